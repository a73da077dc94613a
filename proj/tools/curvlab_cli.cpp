// curvlab command-line front end.
//
//   curvlab train <config> [--set key=value]...
//   curvlab grid <config> <grid-file> [--jobs N] [--csv]
//   curvlab align <run-dir>
//   curvlab progress <config> [--out file]
//   curvlab laplace-sample <config> --samples N [--out file] [--check]
//   curvlab validate-oracle [--seed S] [--instances K] [--inject-fault]
//
// Exit status: 0 success, 1 runtime or validation failure, 2 bad usage or
// configuration.

#include "curvlab/harness.hpp"
#include "curvlab/laplace.hpp"
#include "curvlab/validation.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace {

using namespace curvlab;

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

ExperimentConfig load_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg = load_config(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  try {
    cfg.optimizer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

void print_seed(const SeedResult& s) {
  std::printf("seed %llu: final_train_loss=%.6g", static_cast<unsigned long long>(s.seed), s.final_train_loss);
  if (s.final_eval_loss) std::printf(" eval_loss=%.6g", *s.final_eval_loss);
  if (s.final_eval_accuracy) std::printf(" eval_accuracy=%.4f", *s.final_eval_accuracy);
  if (s.diverged) std::printf(" DIVERGED");
  if (!s.csv_path.empty()) std::printf(" -> %s", s.csv_path.c_str());
  std::printf("\n");
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
  const ExperimentConfig cfg = load_with_overrides(config_path, overrides);
  const auto result = run_experiment(cfg);
  for (const auto& s : result.seeds) print_seed(s);
  std::printf("mean_final_train_loss=%.6g median=%.6g\n", result.mean_final_loss(), result.median_final_loss());
  const bool any_diverged =
      std::any_of(result.seeds.begin(), result.seeds.end(), [](const SeedResult& s) { return s.diverged; });
  return any_diverged ? kFailure : kOk;
}

int cmd_grid(const std::string& config_path, const std::string& grid_path, const std::vector<std::string>& overrides,
             unsigned jobs, bool csv) {
  const ExperimentConfig cfg = load_with_overrides(config_path, overrides);
  std::ifstream in(grid_path);
  if (!in) throw ConfigError("cannot read grid file " + grid_path);
  std::stringstream text;
  text << in.rdbuf();
  const auto grid = parse_grid(text.str());
  const auto result = grid_search(cfg, grid, GridOptions{jobs, csv});
  for (std::size_t i = 0; i < result.cells.size(); ++i) {
    const auto& cell = result.cells[i];
    std::string label;
    for (const auto& [k, v] : cell.assignment) label += k + "=" + v + " ";
    std::printf("%s%s score=%.6g%s%s\n", i == result.best ? "* " : "  ", label.c_str(), cell.score,
                cell.diverged ? " diverged" : "", cell.error.empty() ? "" : (" error: " + cell.error).c_str());
  }
  std::string best;
  for (const auto& [k, v] : result.cells[result.best].assignment) best += k + "=" + v + " ";
  std::printf("best: %sscore=%.6g\n", best.c_str(), result.cells[result.best].score);
  for (const auto& axis : result.boundary_axes) {
    std::printf("warning: best value of '%s' lies on the grid boundary\n", axis.c_str());
  }
  return std::isfinite(result.cells[result.best].score) ? kOk : kFailure;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int cmd_align(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("not a directory: " + dir);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    std::fprintf(stderr, "no CSV files in %s\n", dir.c_str());
    return kFailure;
  }
  for (const auto& path : files) {
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) continue;
    const auto header = split_csv(line);
    std::vector<std::size_t> columns;
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c].rfind("alignment_to_foof", 0) == 0) columns.push_back(c);
    }
    std::map<std::size_t, std::vector<double>> values;
    while (std::getline(in, line)) {
      const auto fields = split_csv(line);
      for (auto c : columns) {
        if (c < fields.size() && !fields[c].empty()) values[c].push_back(std::stod(fields[c]));
      }
    }
    std::printf("%s\n", path.filename().c_str());
    for (auto c : columns) {
      auto& xs = values[c];
      if (xs.empty()) {
        std::printf("  %-24s no values\n", header[c].c_str());
        continue;
      }
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      std::sort(xs.begin(), xs.end());
      std::printf("  %-24s n=%zu mean=%.4f median=%.4f min=%.4f max=%.4f\n", header[c].c_str(), xs.size(), mean,
                  xs[xs.size() / 2], xs.front(), xs.back());
    }
  }
  return kOk;
}

int cmd_progress(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& out) {
  const ExperimentConfig cfg = load_with_overrides(config_path, overrides);
  const auto rows = run_progress(cfg, prepare_data(cfg.dataset));
  const std::string text = progress_csv(rows);
  if (out.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    std::ofstream(out) << text;
  }
  std::size_t wins = 0, counted = 0;
  for (const auto& r : rows) {
    if (r.kfac_progress && r.foof_progress) {
      ++counted;
      if (*r.foof_progress > *r.kfac_progress) ++wins;
    }
  }
  std::fprintf(stderr, "FOOF (norm-matched) beat KFAC on %zu of %zu steps\n", wins, counted);
  return kOk;
}

int cmd_laplace(const std::string& config_path, const std::vector<std::string>& overrides, std::size_t samples,
                const std::string& out, bool check) {
  const ExperimentConfig cfg = load_with_overrides(config_path, overrides);
  const auto run = laplace_from_config(cfg, prepare_data(cfg.dataset), samples);
  std::ofstream file;
  if (!out.empty()) file.open(out);
  std::ostream& os = out.empty() ? std::cout : file;
  char buf[32];
  for (const auto& s : run.samples) {
    for (Index i = 0; i < s.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", s(i));
      os << (i ? "," : "") << buf;
    }
    os << "\n";
  }
  if (check) {
    const auto report = laplace_cov_check(run.spec, samples);
    std::fprintf(stderr, "covariance check: %zu samples, max |dev| = %.3g, relative = %.3g\n", report.samples,
                 report.max_abs_deviation, report.relative_deviation);
    if (report.insufficient_samples) std::fprintf(stderr, "warning: %s\n", report.warning.c_str());
  }
  return kOk;
}

int cmd_validate(std::uint64_t seed, std::size_t instances, bool inject) {
  const auto checks = validate_oracle(ValidationOptions{seed, instances, inject});
  bool ok = true;
  for (const auto& c : checks) {
    std::printf("%-32s %s  cases=%zu  max_dev=%.3e  tol=%.0e\n", c.name.c_str(), c.passed() ? "PASS" : "FAIL", c.cases,
                c.max_deviation, c.tolerance);
    ok = ok && c.passed();
  }
  std::printf("%s\n", ok ? "all checks passed" : "validation FAILED");
  return ok ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curvature-based optimizer experiments"};
  app.require_subcommand(1);

  std::string config_path, grid_path, run_dir, out_path;
  std::vector<std::string> overrides;
  unsigned jobs = 1;
  bool csv = false, check = false, inject = false;
  std::size_t samples = 0, instances = 16;
  std::uint64_t seed = 7;

  auto* train = app.add_subcommand("train", "Train with a config file and write metrics CSVs");
  train->add_option("config", config_path, "Config file")->required();
  train->add_option("--set", overrides, "Override a config entry (key=value)");

  auto* grid = app.add_subcommand("grid", "Grid search; selects by mean final training loss");
  grid->add_option("config", config_path, "Base config file")->required();
  grid->add_option("grid", grid_path, "Grid file")->required();
  grid->add_option("--set", overrides, "Override a config entry (key=value)");
  grid->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  grid->add_flag("--csv", csv, "Write a metrics CSV for every cell");

  auto* align = app.add_subcommand("align", "Summarize alignment columns of a run directory");
  align->add_option("run-dir", run_dir, "Directory of metrics CSVs")->required();

  auto* progress = app.add_subcommand("progress", "Per-step progress of KFAC vs norm-matched FOOF updates");
  progress->add_option("config", config_path, "Config file (KFAC optimizer)")->required();
  progress->add_option("--set", overrides, "Override a config entry (key=value)");
  progress->add_option("--out", out_path, "Output CSV (default stdout)");

  auto* laplace = app.add_subcommand("laplace-sample", "Draw exact Laplace posterior samples");
  laplace->add_option("config", config_path, "Config file")->required();
  laplace->add_option("--set", overrides, "Override a config entry (key=value)");
  laplace->add_option("--samples", samples, "Number of samples")->required()->check(CLI::PositiveNumber);
  laplace->add_option("--out", out_path, "Output CSV (default stdout)");
  laplace->add_flag("--check", check, "Compare the sample covariance with the dense posterior");

  auto* validate = app.add_subcommand("validate-oracle", "Check implicit operations against dense references");
  validate->add_option("--seed", seed, "Instance seed");
  validate->add_option("--instances", instances, "Number of random instances")->check(CLI::PositiveNumber);
  validate->add_flag("--inject-fault", inject, "Flip the sign of G·w (the validator must then fail)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train) return cmd_train(config_path, overrides);
    if (*grid) return cmd_grid(config_path, grid_path, overrides, jobs, csv);
    if (*align) return cmd_align(run_dir);
    if (*progress) return cmd_progress(config_path, overrides, out_path);
    if (*laplace) return cmd_laplace(config_path, overrides, samples, out_path, check);
    if (*validate) return cmd_validate(seed, instances, inject);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kUsage;
}
