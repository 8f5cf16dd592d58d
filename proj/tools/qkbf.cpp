#include <qkbf/harness.hpp>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.3.0";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  std::vector<std::string> overrides;
};

struct Context {
  qkbf::ExperimentConfig cfg;
  json cfg_json;
  qkbf::SMJLSModel model;
  fs::path out;
};

Context load_context(const Options& o) {
  json j = json::object();
  fs::path base;
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw std::runtime_error("cannot open config '" + o.config + "'");
    j = json::parse(is);
    base = fs::path(o.config).parent_path();
  }
  for (const auto& s : o.overrides) qkbf::apply_override(j, s);
  if (o.seed) j["seed"] = *o.seed;
  if (o.threads) j["threads"] = *o.threads;
  if (o.out) j["output_dir"] = *o.out;
  Context ctx;
  ctx.cfg = qkbf::config_from_json(j);
  ctx.cfg_json = qkbf::config_to_json(ctx.cfg);
  ctx.model = qkbf::normalized(qkbf::resolve_model(ctx.cfg.model, base));
  ctx.out = ctx.cfg.output_dir;
  return ctx;
}

/// Writes through a temporary file so a failed command leaves no partial file.
void write_atomic(const fs::path& path,
                  const std::function<void(std::ostream&)>& fill) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".")
                                                    : path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
    fill(os);
    os.flush();
    if (!os) throw std::runtime_error("failed writing '" + path.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string tag(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

fs::path grid_path(const Context& c, std::size_t nu, std::size_t mode) {
  return c.out / "grids" /
         ("nu" + std::to_string(nu) + "_mode" + std::to_string(mode + 1) +
          ".json");
}

fs::path tree_path(const Context& c, std::size_t nu) {
  return c.out / "trees" /
         ("T" + tag(c.cfg.horizon) + "_dt" + tag(c.cfg.dt) + "_nu" +
          std::to_string(nu) + ".qtree");
}

void require_artifact(const fs::path& p, const char* stage) {
  if (!fs::exists(p))
    throw std::runtime_error("missing artifact '" + p.string() + "'; run `qkbf " +
                             stage + "` first");
}

std::vector<qkbf::QuantizationGrid> load_grids(const Context& c,
                                               std::size_t nu) {
  std::vector<qkbf::QuantizationGrid> grids;
  for (std::size_t i = 0; i < c.model.n_modes(); ++i) {
    const auto p = grid_path(c, nu, i);
    require_artifact(p, "quantize");
    try {
      grids.push_back(qkbf::load_grid(p.string()));
    } catch (const std::exception& e) {
      throw std::runtime_error("refusing grid '" + p.string() + "': " + e.what());
    }
  }
  return grids;
}

qkbf::BranchTree load_checked_tree(const Context& c, std::size_t nu) {
  const auto p = tree_path(c, nu);
  require_artifact(p, "precompute");
  auto tree = qkbf::load_tree(p.string(), c.model);
  const auto grids = load_grids(c, nu);
  for (std::size_t i = 0; i < grids.size(); ++i)
    if (qkbf::effective_grid(grids[i], c.cfg.horizon) != tree.effective_grids[i])
      throw std::runtime_error("tree '" + p.string() +
                               "' is stale for the current grids; rerun "
                               "`qkbf precompute`");
  if (tree.max_depth != c.cfg.max_depth ||
      std::abs(tree.ode_step - c.cfg.ode_step) > 1e-15)
    throw std::runtime_error("tree '" + p.string() +
                             "' was built with other settings; rerun "
                             "`qkbf precompute`");
  return tree;
}

void write_manifest(const Context& c, const std::string& command,
                    double seconds, const std::vector<fs::path>& outputs) {
  json files = json::array();
  for (const auto& p : outputs) files.push_back(p.string());
  const json m = {{"command", command},
                  {"version", kVersion},
                  {"config", c.cfg_json},
                  {"model_hash", qkbf::model_hash(c.model)},
                  {"wall_seconds", seconds},
                  {"outputs", files}};
  write_atomic(c.out / ("manifest_" + command + ".json"),
               [&](std::ostream& os) { os << m.dump(2) << '\n'; });
}

int cmd_quantize(const Context& c, std::vector<fs::path>& outs) {
  std::vector<qkbf::Table1Row> rows;
  for (auto nu : c.cfg.grid_sizes) {
    const auto grids = qkbf::train_grids(c.model, nu, c.cfg);
    for (std::size_t i = 0; i < grids.size(); ++i) {
      const auto p = grid_path(c, nu, i);
      write_atomic(p, [&](std::ostream& os) {
        os << qkbf::grid_to_json(grids[i]).dump(2) << '\n';
      });
      outs.push_back(p);
      for (const auto& w : grids[i].meta.warnings)
        std::cerr << "warning: nu=" << nu << " mode " << i + 1 << ": " << w
                  << '\n';
    }
    rows.push_back(qkbf::table1_row(nu, grids));
  }
  const auto p = c.out / "table1.csv";
  write_atomic(p, [&](std::ostream& os) { qkbf::write_table1_csv(os, rows); });
  outs.push_back(p);
  qkbf::write_table1_csv(std::cout, rows);
  return 0;
}

int cmd_precompute(const Context& c, std::vector<fs::path>& outs) {
  std::vector<qkbf::Table2Row> rows;
  bool over = false;
  for (auto nu : c.cfg.grid_sizes) {
    const auto grids = load_grids(c, nu);
    qkbf::BranchTree tree;
    auto row = qkbf::table2_row(nu, c.model, grids, c.cfg, &tree);
    if (row.budget_exceeded) {
      over = true;
      std::cerr << "error: nu=" << nu << " exceeds the node budget of "
                << c.cfg.node_budget << " (" << row.branches
                << " nodes created)\n";
    } else {
      const auto p = tree_path(c, nu);
      write_atomic(p, [&](std::ostream& os) { qkbf::write_tree(os, tree); });
      outs.push_back(p);
    }
    rows.push_back(row);
  }
  const auto p = c.out / ("table2_T" + tag(c.cfg.horizon) + ".csv");
  write_atomic(p, [&](std::ostream& os) { qkbf::write_table2_csv(os, rows); });
  outs.push_back(p);
  qkbf::write_table2_csv(std::cout, rows);
  return over ? 1 : 0;
}

int cmd_tree_info(const Context& c, const std::string& file) {
  if (!file.empty()) {
    qkbf::print_tree_info(std::cout, qkbf::load_tree(file, c.model));
    return 0;
  }
  std::vector<qkbf::Table2Row> rows;
  for (auto nu : c.cfg.grid_sizes)
    rows.push_back(qkbf::table2_row(nu, load_checked_tree(c, nu)));
  qkbf::write_table2_csv(std::cout, rows);
  return 0;
}

std::vector<qkbf::BranchTree> load_trees(const Context& c,
                                         std::vector<qkbf::SizedTree>& sized) {
  std::vector<qkbf::BranchTree> trees;
  if (!c.cfg.wants("quantized")) return trees;
  trees.reserve(c.cfg.grid_sizes.size());
  for (auto nu : c.cfg.grid_sizes) {
    trees.push_back(load_checked_tree(c, nu));
    sized.push_back({nu, &trees.back()});
  }
  return trees;
}

int cmd_compare(const Context& c, std::vector<fs::path>& outs) {
  std::vector<qkbf::SizedTree> sized;
  const auto trees = load_trees(c, sized);
  if (c.cfg.wants("lmmse") && !c.model.is_markov())
    std::cerr << "warning: LMMSE skipped, the mode process is not Markov\n";
  const auto rows = qkbf::compare_filters(c.model, sized, c.cfg);
  if (c.cfg.runs < 2)
    std::cerr << "warning: standard errors are undefined with a single run\n";
  for (const auto& r : rows)
    if (r.lmmse_nan())
      std::cerr << "warning: LMMSE produced non-finite errors in "
                << r.lmmse.nonfinite << " runs (reported as NaN)\n";
  const auto p = c.out / ("compare_T" + tag(c.cfg.horizon) + ".csv");
  write_atomic(p, [&](std::ostream& os) { qkbf::write_comparison_csv(os, rows); });
  outs.push_back(p);
  qkbf::write_comparison_csv(std::cout, rows);
  return 0;
}

int cmd_curves(const Context& c, std::vector<fs::path>& outs) {
  auto cfg = c.cfg;
  cfg.metrics = {"kbf", "quantized"};
  Context cc = c;
  cc.cfg = cfg;
  std::vector<qkbf::SizedTree> sized;
  const auto trees = load_trees(cc, sized);
  const auto set = qkbf::error_curves(c.model, sized, cfg);
  const auto p = c.out / ("curves_T" + tag(c.cfg.horizon) + ".csv");
  write_atomic(p, [&](std::ostream& os) { qkbf::write_curves_csv(os, set); });
  outs.push_back(p);
  std::cout << "wrote " << p.string() << '\n';
  return 0;
}

int cmd_simulate(const Context& c, std::size_t index,
                 std::vector<fs::path>& outs) {
  std::vector<qkbf::SizedTree> sized;
  const auto trees = load_trees(c, sized);
  const auto run =
      qkbf::simulate_run(c.model, c.cfg.horizon, c.cfg.dt, c.cfg.seed, index);
  const fs::path dir = c.out / ("run" + std::to_string(index));
  auto emit = [&](const std::string& name, const auto& fill) {
    const auto p = dir / name;
    write_atomic(p, fill);
    outs.push_back(p);
  };
  emit("trajectory.csv", [&](std::ostream& os) {
    qkbf::write_trajectory_csv(os, run.traj);
  });
  if (c.cfg.wants("kbf")) {
    const auto kb = qkbf::run_kbf(c.model, run.traj, run.truth, c.cfg.ode_step);
    emit("kbf.csv", [&](std::ostream& os) { qkbf::write_run_csv(os, run.truth, kb); });
  }
  for (const auto& t : sized) {
    const auto q = qkbf::run_quantized(c.model, *t.tree, run.traj, run.truth,
                                       c.cfg.quantized_options());
    const std::string suffix = "_nu" + std::to_string(t.nu) + ".csv";
    emit("quantized" + suffix,
         [&](std::ostream& os) { qkbf::write_run_csv(os, run.truth, q); });
    emit("selection" + suffix,
         [&](std::ostream& os) { qkbf::write_selection_csv(os, q); });
    if (q.censored)
      std::cerr << "warning: run censored at depth " << c.cfg.max_depth << '\n';
  }
  if (c.cfg.wants("lmmse") && c.model.is_markov()) {
    const auto sol = qkbf::solve_lmmse(
        c.model, qkbf::markov_pi(c.model, c.cfg.dt, c.cfg.horizon),
        c.cfg.horizon, c.cfg.ode_step, c.cfg.pi_floor);
    const auto l = qkbf::run_lmmse(c.model, sol, run.truth);
    emit("lmmse.csv", [&](std::ostream& os) { qkbf::write_run_csv(os, run.truth, l); });
  }
  std::cout << "wrote " << outs.size() << " files to " << dir.string() << '\n';
  return 0;
}

int cmd_validate(const Context& c, std::vector<fs::path>& outs) {
  const auto report = qkbf::validate(c.model);
  json j = {{"ok", report.ok()},
            {"modes", c.model.n_modes()},
            {"n1", c.model.n1()},
            {"n2", c.model.n2()},
            {"n3", c.model.n3()},
            {"n4", c.model.n4()},
            {"markov", c.model.is_markov()},
            {"lambda_bar", c.model.lambda_bar()},
            {"model_hash", qkbf::model_hash(c.model)}};
  json v = json::array();
  for (const auto& x : report.violations)
    v.push_back({{"mode", x.mode}, {"message", x.message}, {"magnitude", x.magnitude}});
  j["violations"] = v;
  const auto p = c.out / "validation.json";
  write_atomic(p, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
  outs.push_back(p);
  std::cout << (report.ok() ? "model ok\n" : report.to_string());
  return report.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantized Kalman-Bucy filtering for semi-Markov jump linear systems"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Options opt;
  std::uint64_t seed = 0;
  std::string out;
  unsigned threads = 0;
  app.add_option("--config", opt.config, "JSON experiment config");
  auto* seed_opt = app.add_option("--seed", seed, "root seed");
  auto* out_opt = app.add_option("--out", out, "output directory");
  auto* thr_opt =
      app.add_option("--threads", threads, "worker threads (0 = all cores)");
  app.add_option("--set", opt.overrides, "override a config key (key=value)");

  auto* quantize = app.add_subcommand("quantize", "train grids, write the distortion table");
  auto* precompute =
      app.add_subcommand("precompute", "build branch trees, write the tree size table");
  auto* info = app.add_subcommand("tree-info", "print branch tree statistics");
  std::string tree_file;
  info->add_option("tree", tree_file, "tree file (default: trees of the config)");
  auto* simulate = app.add_subcommand("simulate", "write paths of one run");
  std::size_t run_index = 0;
  simulate->add_option("--run", run_index, "run index");
  auto* compare = app.add_subcommand("compare", "paired filter comparison");
  auto* curves = app.add_subcommand("curves", "per-tick error curves");
  auto* validate = app.add_subcommand("validate", "check the model");
  app.fallthrough();

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) opt.seed = seed;
  if (*out_opt) opt.out = out;
  if (*thr_opt) opt.threads = threads;

  try {
    const auto start = std::chrono::steady_clock::now();
    const Context ctx = load_context(opt);
    std::vector<fs::path> outs;
    std::string name;
    int rc = 0;
    if (*quantize) {
      name = "quantize";
      rc = cmd_quantize(ctx, outs);
    } else if (*precompute) {
      name = "precompute";
      rc = cmd_precompute(ctx, outs);
    } else if (*info) {
      return cmd_tree_info(ctx, tree_file);
    } else if (*simulate) {
      name = "simulate";
      rc = cmd_simulate(ctx, run_index, outs);
    } else if (*compare) {
      name = "compare";
      rc = cmd_compare(ctx, outs);
    } else if (*curves) {
      name = "curves";
      rc = cmd_curves(ctx, outs);
    } else if (*validate) {
      name = "validate";
      rc = cmd_validate(ctx, outs);
    }
    const double secs = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - start)
                            .count();
    write_manifest(ctx, name, secs, outs);
    return rc;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
