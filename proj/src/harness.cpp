#include "curvlab/harness.hpp"

#include "curvlab/random.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#ifndef CURVLAB_DEFAULT_DATA_DIR
#define CURVLAB_DEFAULT_DATA_DIR "data/mnist5k"
#endif

namespace curvlab {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_top_level(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  int depth = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '(') ++depth;
    if (s[i] == ')') --depth;
    if (s[i] == sep && depth == 0) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  out.push_back(trim(s.substr(start)));
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError(std::string(key) + ": invalid value '" + std::string(value) + "' (expected " +
                    std::string(expected) + ")");
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

std::int64_t to_int(std::string_view key, std::string_view v) {
  std::int64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

std::int64_t to_nonneg(std::string_view key, std::string_view v) {
  const auto out = to_int(key, v);
  if (out < 0) bad_value(key, v, "a non-negative integer");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "true or false");
}

std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_short(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      {"name", [](C& c, std::string_view v) { c.name = v; }, [](const C& c) { return c.name; }},
      {"dataset",
       [](C& c, std::string_view v) {
         if (v != "mnist" && v != "synth_toy" && v != "teacher") bad_value("dataset", v, "mnist, synth_toy or teacher");
         c.dataset.name = v;
       },
       [](const C& c) { return c.dataset.name; }},
      {"data_dir", [](C& c, std::string_view v) { c.dataset.data_dir = std::string(v); },
       [](const C& c) { return c.dataset.data_dir.string(); }},
      {"images", [](C& c, std::string_view v) { c.dataset.images = v; }, [](const C& c) { return c.dataset.images; }},
      {"labels", [](C& c, std::string_view v) { c.dataset.labels = v; }, [](const C& c) { return c.dataset.labels; }},
      {"subset", [](C& c, std::string_view v) { c.dataset.subset = to_nonneg("subset", v); },
       [](const C& c) { return std::to_string(c.dataset.subset); }},
      {"eval_size", [](C& c, std::string_view v) { c.dataset.eval_size = to_nonneg("eval_size", v); },
       [](const C& c) { return std::to_string(c.dataset.eval_size); }},
      {"pool",
       [](C& c, std::string_view v) {
         c.dataset.pool = to_int("pool", v);
         if (c.dataset.pool < 1) bad_value("pool", v, "a positive integer");
       },
       [](const C& c) { return std::to_string(c.dataset.pool); }},
      {"subset_seed",
       [](C& c, std::string_view v) { c.dataset.subset_seed = static_cast<std::uint64_t>(to_nonneg("subset_seed", v)); },
       [](const C& c) { return std::to_string(c.dataset.subset_seed); }},
      {"teacher_dim", [](C& c, std::string_view v) { c.dataset.teacher_dim = to_nonneg("teacher_dim", v); },
       [](const C& c) { return std::to_string(c.dataset.teacher_dim); }},
      {"teacher_classes", [](C& c, std::string_view v) { c.dataset.teacher_classes = to_nonneg("teacher_classes", v); },
       [](const C& c) { return std::to_string(c.dataset.teacher_classes); }},
      {"hidden",
       [](C& c, std::string_view v) {
         c.hidden.clear();
         if (v.empty() || v == "none") return;
         for (auto part : split_top_level(v, ',')) {
           const auto w = to_int("hidden", part);
           if (w < 1) bad_value("hidden", v, "positive layer widths");
           c.hidden.push_back(w);
         }
       },
       [](const C& c) { return c.hidden.empty() ? std::string("none") : join(c.hidden); }},
      {"activation",
       [](C& c, std::string_view v) {
         if (v == "relu") c.activation = Activation::kRelu;
         else if (v == "tanh") c.activation = Activation::kTanh;
         else bad_value("activation", v, "relu or tanh");
       },
       [](const C& c) { return std::string(to_string(c.activation)); }},
      {"loss",
       [](C& c, std::string_view v) {
         if (v == "cross_entropy") c.loss = LossKind::kCrossEntropy;
         else if (v == "squared_error") c.loss = LossKind::kSquaredError;
         else bad_value("loss", v, "cross_entropy or squared_error");
       },
       [](const C& c) { return std::string(to_string(c.loss)); }},
      {"optimizer",
       [](C& c, std::string_view v) {
         const auto kind = parse_optimizer_kind(v);
         if (!kind) bad_value("optimizer", v, "sgd, adam, kfac_heuristic, kfac_standard, foof, natural_gradient or natural_gradient_blockdiag");
         c.optimizer.kind = *kind;
       },
       [](const C& c) { return std::string(to_string(c.optimizer.kind)); }},
      {"lr", [](C& c, std::string_view v) { c.optimizer.learning_rate = to_double("lr", v); },
       [](const C& c) { return fmt(c.optimizer.learning_rate); }},
      {"damping", [](C& c, std::string_view v) { c.optimizer.damping = to_double("damping", v); },
       [](const C& c) { return fmt(c.optimizer.damping); }},
      {"momentum", [](C& c, std::string_view v) { c.optimizer.momentum = to_double("momentum", v); },
       [](const C& c) { return fmt(c.optimizer.momentum); }},
      {"ema", [](C& c, std::string_view v) { c.optimizer.ema_decay = to_double("ema", v); },
       [](const C& c) { return fmt(c.optimizer.ema_decay); }},
      {"inv_period", [](C& c, std::string_view v) { c.optimizer.inversion_period = to_int("inv_period", v); },
       [](const C& c) { return std::to_string(c.optimizer.inversion_period); }},
      {"acc_window", [](C& c, std::string_view v) { c.optimizer.accumulation_window = to_int("acc_window", v); },
       [](const C& c) { return std::to_string(c.optimizer.accumulation_window); }},
      {"subsampled", [](C& c, std::string_view v) { c.optimizer.subsampled = to_bool("subsampled", v); },
       [](const C& c) { return std::string(c.optimizer.subsampled ? "true" : "false"); }},
      {"weight_decay", [](C& c, std::string_view v) { c.optimizer.weight_decay = to_double("weight_decay", v); },
       [](const C& c) { return fmt(c.optimizer.weight_decay); }},
      {"fisher",
       [](C& c, std::string_view v) {
         if (v == "mc") c.optimizer.fisher = FisherMode::kMonteCarlo;
         else if (v == "full") c.optimizer.fisher = FisherMode::kFull;
         else bad_value("fisher", v, "mc or full");
       },
       [](const C& c) { return std::string(c.optimizer.fisher == FisherMode::kFull ? "full" : "mc"); }},
      {"route",
       [](C& c, std::string_view v) {
         if (v == "auto") c.optimizer.route = SolveRoute::kAuto;
         else if (v == "woodbury") c.optimizer.route = SolveRoute::kWoodbury;
         else if (v == "primal") c.optimizer.route = SolveRoute::kPrimal;
         else bad_value("route", v, "auto, woodbury or primal");
       },
       [](const C& c) {
         switch (c.optimizer.route) {
           case SolveRoute::kWoodbury: return std::string("woodbury");
           case SolveRoute::kPrimal: return std::string("primal");
           default: return std::string("auto");
         }
       }},
      {"foof_kfac_damping",
       [](C& c, std::string_view v) { c.optimizer.foof_kfac_damping = to_bool("foof_kfac_damping", v); },
       [](const C& c) { return std::string(c.optimizer.foof_kfac_damping ? "true" : "false"); }},
      {"adam_beta1", [](C& c, std::string_view v) { c.optimizer.adam_beta1 = to_double("adam_beta1", v); },
       [](const C& c) { return fmt(c.optimizer.adam_beta1); }},
      {"adam_beta2", [](C& c, std::string_view v) { c.optimizer.adam_beta2 = to_double("adam_beta2", v); },
       [](const C& c) { return fmt(c.optimizer.adam_beta2); }},
      {"adam_epsilon", [](C& c, std::string_view v) { c.optimizer.adam_epsilon = to_double("adam_epsilon", v); },
       [](const C& c) { return fmt(c.optimizer.adam_epsilon); }},
      {"epochs", [](C& c, std::string_view v) { c.epochs = to_nonneg("epochs", v); },
       [](const C& c) { return std::to_string(c.epochs); }},
      {"batch_size", [](C& c, std::string_view v) { c.batch_size = to_nonneg("batch_size", v); },
       [](const C& c) { return std::to_string(c.batch_size); }},
      {"seeds",
       [](C& c, std::string_view v) {
         c.seeds.clear();
         for (auto part : split_top_level(v, ',')) c.seeds.push_back(static_cast<std::uint64_t>(to_nonneg("seeds", part)));
       },
       [](const C& c) { return join(c.seeds); }},
      {"curvature_batch",
       [](C& c, std::string_view v) {
         if (v == "same") c.curvature_source = CurvatureSource::kSameBatch;
         else if (v == "independent") c.curvature_source = CurvatureSource::kIndependentBatch;
         else bad_value("curvature_batch", v, "same or independent");
       },
       [](const C& c) {
         return std::string(c.curvature_source == CurvatureSource::kSameBatch ? "same" : "independent");
       }},
      {"warm_start", [](C& c, std::string_view v) { c.warm_start = to_nonneg("warm_start", v); },
       [](const C& c) { return std::to_string(c.warm_start); }},
      {"log_every", [](C& c, std::string_view v) { c.log_every = to_nonneg("log_every", v); },
       [](const C& c) { return std::to_string(c.log_every); }},
      {"diagnostics", [](C& c, std::string_view v) { c.diagnostics = to_bool("diagnostics", v); },
       [](const C& c) { return std::string(c.diagnostics ? "true" : "false"); }},
      {"align_damping", [](C& c, std::string_view v) { c.align_damping = to_double("align_damping", v); },
       [](const C& c) { return fmt(c.align_damping); }},
      {"output_dir", [](C& c, std::string_view v) { c.output_dir = std::string(v); },
       [](const C& c) { return c.output_dir.string(); }},
      {"prior_precision",
       [](C& c, std::string_view v) {
         c.prior_precision = to_double("prior_precision", v);
         if (!(c.prior_precision > 0.0)) bad_value("prior_precision", v, "a positive number");
       },
       [](const C& c) { return fmt(c.prior_precision); }},
      {"laplace_points", [](C& c, std::string_view v) { c.laplace_points = to_nonneg("laplace_points", v); },
       [](const C& c) { return std::to_string(c.laplace_points); }},
      {"laplace_data_count",
       [](C& c, std::string_view v) { c.laplace_data_count = to_double("laplace_data_count", v); },
       [](const C& c) { return fmt(c.laplace_data_count); }},
  };
  return table;
}

Batch make_batch(const Dataset& ds, std::span<const Index> idx) {
  Batch b;
  b.inputs.resize(ds.input_dim(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) b.inputs.col(static_cast<Index>(j)) = ds.inputs.col(idx[j]);
  b.targets = ds.targets.select(idx);
  return b;
}

bool all_finite(const std::vector<Mat>& ms) {
  return std::all_of(ms.begin(), ms.end(), [](const Mat& m) { return m.allFinite(); });
}

double frob_metric_inner(const Mat& u, const Mat& v, const Mat* act, double damping) {
  if (act == nullptr) return (u.array() * v.array()).sum();
  const Mat uv = u * (*act) + damping * u;
  return (uv.array() * v.array()).sum();
}

std::string option_text(const std::optional<double>& x) { return x ? fmt(*x) : std::string(); }

struct DatasetChecks {
  static void check(const ExperimentConfig& cfg, const Dataset& train) {
    if (cfg.loss == LossKind::kCrossEntropy && !train.targets.is_classification()) {
      throw ConfigError("loss cross_entropy needs class labels; dataset " + cfg.dataset.name + " has real targets");
    }
    if (cfg.loss == LossKind::kSquaredError && train.targets.is_classification()) {
      throw ConfigError("loss squared_error needs real-valued targets; dataset " + cfg.dataset.name + " has classes");
    }
  }
};

Network initial_network(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed) {
  if (cfg.dataset.name == "synth_toy" && cfg.hidden.empty()) return synth_toy_network();
  const auto sizes = layer_sizes(cfg, train);
  return Network::kaiming(sizes, cfg.activation, cfg.loss, derive_seed(seed, "init"));
}

// Metric used to compare an update with the FOOF direction: the optimizer's
// own activation statistics when it keeps them, otherwise the batch Σ_A.
AlignmentMetric foof_metric(const ExperimentConfig& cfg, const Optimizer& opt, const BatchTrace& trace) {
  AlignmentMetric metric;
  const double fallback = cfg.align_damping > 0.0 ? cfg.align_damping
                          : cfg.optimizer.damping > 0.0 ? cfg.optimizer.damping
                                                        : 1.0;
  for (std::size_t k = 0; k < trace.inputs.size(); ++k) {
    if (auto view = opt.kronecker_view(k); view && view->act_factor.size() > 0) {
      metric.act_factors.push_back(view->act_factor);
      metric.dampings.push_back(cfg.align_damping > 0.0 ? cfg.align_damping : view->act_damping);
    } else {
      metric.act_factors.push_back(activation_factor(trace.inputs[k]));
      metric.dampings.push_back(fallback);
    }
  }
  return metric;
}

std::vector<Mat> foof_directions(const std::vector<Mat>& grads, const AlignmentMetric& metric) {
  std::vector<Mat> out;
  for (std::size_t k = 0; k < grads.size(); ++k) {
    out.push_back(foof_direction(grads[k], damped_inverse(metric.act_factors[k], metric.dampings[k])));
  }
  return out;
}

std::vector<Mat> negated(std::vector<Mat> ms) {
  for (auto& m : ms) m = -m;
  return ms;
}

}  // namespace

// --- config ------------------------------------------------------------------

void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + std::string(line) + "'");
    }
    apply_setting(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
  try {
    cfg.optimizer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (cfg.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

// --- data --------------------------------------------------------------------

std::filesystem::path resolve_data_dir(const DatasetSpec& spec) {
  if (!spec.data_dir.empty()) return spec.data_dir;
  if (const char* env = std::getenv("CURVLAB_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return CURVLAB_DEFAULT_DATA_DIR;
}

PreparedData prepare_data(const DatasetSpec& spec) {
  PreparedData out;
  if (spec.name == "synth_toy") {
    out.train = synth_toy();
    return out;
  }
  if (spec.name == "teacher") {
    const Index n = spec.subset > 0 ? spec.subset : 1000;
    const Dataset all = synth_teacher(n + spec.eval_size, spec.teacher_dim, spec.teacher_classes, spec.subset_seed);
    auto [train, rest] = split(all, n, derive_seed(spec.subset_seed, "split"));
    out.train = std::move(train);
    if (spec.eval_size > 0) out.eval = std::move(rest);
    return out;
  }
  if (spec.name != "mnist") throw ConfigError("unknown dataset '" + spec.name + "'");

  const auto dir = resolve_data_dir(spec);
  Dataset all = pool_images(load_idx(dir / spec.images, dir / spec.labels), spec.pool);
  Dataset train = all;
  Dataset rest;
  if (spec.subset > 0) {
    if (spec.subset + spec.eval_size > all.size()) {
      throw ConfigError("subset + eval_size = " + std::to_string(spec.subset + spec.eval_size) + " exceeds the " +
                        std::to_string(all.size()) + " available examples");
    }
    std::tie(train, rest) = split(all, spec.subset, spec.subset_seed);
  } else if (spec.eval_size > 0) {
    std::tie(rest, train) = split(all, spec.eval_size, spec.subset_seed);
  }
  const auto [mean, sd] = normalization_constants(train);
  out.train = normalize(train, mean, sd);
  if (spec.eval_size > 0) {
    const Dataset held = spec.subset > 0 ? subset(rest, spec.eval_size, derive_seed(spec.subset_seed, "eval")) : rest;
    out.eval = normalize(held, mean, sd);
  }
  return out;
}

// --- CSV ---------------------------------------------------------------------

std::string csv_header(std::size_t num_layers) {
  std::string out = "step,epoch,seed,train_loss,eval_loss,eval_accuracy,rel_progress,alignment_to_foof";
  for (std::size_t k = 0; k < num_layers; ++k) out += ",alignment_to_foof_L" + std::to_string(k);
  for (std::size_t k = 0; k < num_layers; ++k) out += ",update_norm_L" + std::to_string(k);
  out += ",diverged,wall_ms";
  return out;
}

std::string csv_line(const MetricRow& row, std::size_t num_layers) {
  std::string out = std::to_string(row.step) + "," + std::to_string(row.epoch) + "," + std::to_string(row.seed) + "," +
                    fmt(row.train_loss) + "," + option_text(row.eval_loss) + "," + option_text(row.eval_accuracy) +
                    "," + option_text(row.rel_progress) + "," + option_text(row.alignment_to_foof);
  for (std::size_t k = 0; k < num_layers; ++k) {
    out += ",";
    if (k < row.alignment_layers.size()) out += option_text(row.alignment_layers[k]);
  }
  for (std::size_t k = 0; k < num_layers; ++k) {
    out += ",";
    if (k < row.update_norms.size()) out += fmt(row.update_norms[k]);
  }
  out += row.diverged ? ",1," : ",0,";
  out += fmt(row.wall_ms);
  return out;
}

// --- experiment --------------------------------------------------------------

double ExperimentResult::mean_final_loss() const {
  if (seeds.empty()) return kInf;
  double total = 0.0;
  for (const auto& s : seeds) total += s.diverged ? kInf : s.final_train_loss;
  return total / static_cast<double>(seeds.size());
}

double ExperimentResult::median_final_loss() const {
  if (seeds.empty()) return kInf;
  std::vector<double> xs;
  for (const auto& s : seeds) xs.push_back(s.diverged ? kInf : s.final_train_loss);
  std::sort(xs.begin(), xs.end());
  const std::size_t m = xs.size() / 2;
  return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

std::vector<Index> layer_sizes(const ExperimentConfig& config, const Dataset& train) {
  std::vector<Index> sizes{train.input_dim()};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(train.targets.is_classification() ? train.num_classes : train.targets.values.rows());
  return sizes;
}

namespace {

SeedResult run_seed(const ExperimentConfig& cfg, const PreparedData& data, std::uint64_t seed, const RunOptions& options) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  const Dataset& train = data.train;
  Network net = initial_network(cfg, train, seed);
  const std::size_t layers = net.num_layers();
  auto opt = make_optimizer(cfg.optimizer, net);
  const Batcher batcher(train.size(), cfg.batch_size, derive_seed(seed, "batches"));
  const bool full_batch = batcher.batch_size() == train.size();
  const Batch full = make_batch(train, [&] {
    std::vector<Index> all(static_cast<std::size_t>(train.size()));
    std::iota(all.begin(), all.end(), Index{0});
    return all;
  }());

  const bool kronecker = cfg.optimizer.kind == OptimizerKind::kKfacHeuristic ||
                         cfg.optimizer.kind == OptimizerKind::kKfacStandard ||
                         cfg.optimizer.kind == OptimizerKind::kFoof;
  if (kronecker && cfg.warm_start > 0) {
    const Batcher warm(train.size(), cfg.batch_size, derive_seed(seed, "warm-batches"));
    std::int64_t done = 0;
    for (std::int64_t e = 0; done < cfg.warm_start; ++e) {
      for (const auto& idx : warm.epoch(e)) {
        if (done >= cfg.warm_start) break;
        opt->warm_start(net, full_batch ? full : make_batch(train, idx),
                        derive_seed(seed, "warm-labels", static_cast<std::uint64_t>(done)));
        ++done;
      }
    }
  }

  SeedResult result;
  result.seed = seed;
  const std::int64_t log_every = cfg.log_every > 0 ? cfg.log_every : batcher.batches_per_epoch();

  auto evaluate = [&](MetricRow& row) {
    const Mat out = forward(net, train.inputs).outputs();
    row.train_loss = loss_from_outputs(net.loss_kind(), out, train.targets);
    if (data.eval) {
      const Mat eout = forward(net, data.eval->inputs).outputs();
      row.eval_loss = loss_from_outputs(net.loss_kind(), eout, data.eval->targets);
      if (data.eval->targets.is_classification()) row.eval_accuracy = accuracy(eout, data.eval->targets);
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  };

  MetricRow first;
  first.seed = seed;
  evaluate(first);
  result.rows.push_back(first);

  CurvatureBatchPairing pairing(cfg.curvature_source);
  std::optional<Batch> previous;
  std::int64_t step = 0;
  MetricRow pending;  // diagnostics of the update that ends at the next logged step
  bool diverged = !std::isfinite(first.train_loss);

  for (std::int64_t epoch = 0; epoch < cfg.epochs && !diverged; ++epoch) {
    const auto batches = batcher.epoch(epoch);
    for (std::size_t b = 0; b < batches.size() && !diverged; ++b) {
      std::optional<Batch> owned;
      if (!full_batch) owned = make_batch(train, batches[b]);
      const Batch& batch = full_batch ? full : *owned;

      BatchTrace trace = forward(net, batch.inputs);
      const std::vector<Mat> grads = backward(net, trace, batch.targets);
      const bool current = pairing.uses_current(step) || !previous.has_value();
      const Batch& curv_batch = current ? batch : *previous;
      std::vector<Mat> update;
      try {
        update = opt->compute_update(StepInput{net, batch, trace, grads, curv_batch, current, step, seed});
      } catch (const FactorizationError&) {
        diverged = true;
        break;
      }
      if (!all_finite(update) || !all_finite(grads)) {
        diverged = true;
        break;
      }

      const bool log_now = (step + 1) % log_every == 0;
      const bool last = epoch + 1 == cfg.epochs && b + 1 == batches.size();
      if (log_now || last) {
        pending = MetricRow{};
        pending.update_norms.clear();
        for (const auto& u : update) pending.update_norms.push_back(u.norm());
        if (cfg.diagnostics) {
          pending.rel_progress = per_update_progress(net, batch, {update}).front();
          const AlignmentMetric metric = foof_metric(cfg, *opt, trace);
          const auto foof = foof_directions(grads, metric);
          const auto descent = negated(update);
          pending.alignment_to_foof = alignment(descent, foof, metric);
          for (std::size_t k = 0; k < layers; ++k) {
            pending.alignment_layers.push_back(
                layer_alignment(descent[k], foof[k], &metric.act_factors[k], metric.dampings[k]));
          }
        }
      }

      net.apply_update(update);
      if (cfg.curvature_source == CurvatureSource::kIndependentBatch && !full_batch) previous = batch;
      ++step;

      if (log_now || last) {
        MetricRow row = pending;
        row.step = step;
        row.epoch = epoch + 1;
        row.seed = seed;
        evaluate(row);
        if (!std::isfinite(row.train_loss)) {
          diverged = true;
          break;
        }
        result.rows.push_back(std::move(row));
      }
    }
  }

  if (diverged) {
    MetricRow row;
    row.step = step;
    row.epoch = result.rows.back().epoch;
    row.seed = seed;
    row.train_loss = kNaN;
    row.diverged = true;
    row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    result.rows.push_back(row);
    result.diverged = true;
    result.final_train_loss = kInf;
  } else {
    const MetricRow& last = result.rows.back();
    result.final_train_loss = last.train_loss;
    result.final_eval_loss = last.eval_loss;
    result.final_eval_accuracy = last.eval_accuracy;
  }

  if (options.write_csv) {
    std::filesystem::create_directories(cfg.output_dir);
    result.csv_path = cfg.output_dir / (cfg.name + "_seed" + std::to_string(seed) + ".csv");
    std::ofstream out(result.csv_path);
    if (!out) throw std::runtime_error("cannot write " + result.csv_path.string());
    out << csv_header(layers) << "\n";
    for (const auto& row : result.rows) out << csv_line(row, layers) << "\n";
  }
  if (options.keep_network) result.network = std::move(net);
  return result;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  return run_experiment(config, prepare_data(config.dataset), options);
}

ExperimentResult run_experiment(const ExperimentConfig& config, const PreparedData& data, const RunOptions& options) {
  DatasetChecks::check(config, data.train);
  ExperimentResult result;
  result.config = config;
  if (options.write_csv) {
    std::filesystem::create_directories(config.output_dir);
    std::ofstream(config.output_dir / (config.name + ".config")) << config_text(config);
  }
  for (const auto seed : config.seeds) result.seeds.push_back(run_seed(config, data, seed, options));
  return result;
}

// --- diagnostics -------------------------------------------------------------

std::optional<double> layer_alignment(const Mat& u1, const Mat& u2, const Mat* act_factor, double damping) {
  const double a = frob_metric_inner(u1, u2, act_factor, damping);
  const double n1 = frob_metric_inner(u1, u1, act_factor, damping);
  const double n2 = frob_metric_inner(u2, u2, act_factor, damping);
  if (!(n1 > 0.0) || !(n2 > 0.0)) return std::nullopt;
  return std::clamp(a / std::sqrt(n1 * n2), -1.0, 1.0);
}

std::optional<double> alignment(std::span<const Mat> u1, std::span<const Mat> u2, const AlignmentMetric& metric) {
  if (u1.size() != u2.size()) throw DimensionError("alignment: layer counts differ");
  if (!metric.is_identity() && metric.act_factors.size() != u1.size()) {
    throw DimensionError("alignment: metric has the wrong number of layers");
  }
  double a = 0.0, n1 = 0.0, n2 = 0.0;
  for (std::size_t k = 0; k < u1.size(); ++k) {
    if (u1[k].rows() != u2[k].rows() || u1[k].cols() != u2[k].cols()) {
      throw DimensionError("alignment: layer " + std::to_string(k) + " shapes differ");
    }
    const Mat* act = metric.is_identity() ? nullptr : &metric.act_factors[k];
    const double lambda = metric.is_identity() ? 0.0 : metric.dampings.at(k);
    a += frob_metric_inner(u1[k], u2[k], act, lambda);
    n1 += frob_metric_inner(u1[k], u1[k], act, lambda);
    n2 += frob_metric_inner(u2[k], u2[k], act, lambda);
  }
  if (!(n1 > 0.0) || !(n2 > 0.0)) return std::nullopt;
  return std::clamp(a / std::sqrt(n1 * n2), -1.0, 1.0);
}

std::vector<Mat> match_layer_norms(std::span<const Mat> candidate, std::span<const Mat> reference) {
  if (candidate.size() != reference.size()) throw DimensionError("match_layer_norms: layer counts differ");
  std::vector<Mat> out;
  for (std::size_t k = 0; k < candidate.size(); ++k) {
    const double c = candidate[k].norm();
    out.push_back(c > 0.0 ? Mat(candidate[k] * (reference[k].norm() / c)) : candidate[k]);
  }
  return out;
}

std::vector<std::optional<double>> per_update_progress(const Network& net, const Batch& batch,
                                                        const std::vector<std::vector<Mat>>& candidates) {
  const double before = loss(net, batch.inputs, batch.targets);
  std::vector<std::optional<double>> out;
  for (const auto& c : candidates) {
    if (before == 0.0) {
      out.emplace_back(std::nullopt);
      continue;
    }
    const double after = loss(net.with_update(c), batch.inputs, batch.targets);
    out.emplace_back((before - after) / before);
  }
  return out;
}

std::vector<ProgressRow> run_progress(const ExperimentConfig& config, const PreparedData& data) {
  if (config.optimizer.kind != OptimizerKind::kKfacHeuristic && config.optimizer.kind != OptimizerKind::kKfacStandard) {
    throw ConfigError("progress comparison needs optimizer = kfac_heuristic or kfac_standard");
  }
  DatasetChecks::check(config, data.train);
  const Dataset& train = data.train;
  std::vector<ProgressRow> rows;
  for (const auto seed : config.seeds) {
    Network net = initial_network(config, train, seed);
    KroneckerOptimizer opt(config.optimizer, net);
    const Batcher batcher(train.size(), config.batch_size, derive_seed(seed, "batches"));
    if (config.warm_start > 0) {
      const Batcher warm(train.size(), config.batch_size, derive_seed(seed, "warm-batches"));
      std::int64_t done = 0;
      for (std::int64_t e = 0; done < config.warm_start; ++e) {
        for (const auto& idx : warm.epoch(e)) {
          if (done >= config.warm_start) break;
          opt.warm_start(net, make_batch(train, idx), derive_seed(seed, "warm-labels", static_cast<std::uint64_t>(done)));
          ++done;
        }
      }
    }
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
      for (const auto& idx : batcher.epoch(epoch)) {
        const Batch batch = make_batch(train, idx);
        BatchTrace trace = forward(net, batch.inputs);
        const auto grads = backward(net, trace, batch.targets);
        const auto update = opt.compute_update(StepInput{net, batch, trace, grads, batch, true, step, seed});
        ProgressRow row;
        row.step = step;
        row.seed = seed;
        row.batch_loss = loss_from_outputs(net.loss_kind(), trace.outputs(), batch.targets);
        if (!all_finite(update) || !std::isfinite(row.batch_loss)) {
          rows.push_back(row);
          break;
        }
        std::vector<Mat> foof;
        for (std::size_t k = 0; k < grads.size(); ++k) {
          const auto view = *opt.kronecker_view(k);
          foof.push_back(-foof_direction(grads[k], damped_inverse(view.act_factor, view.act_damping)));
        }
        const auto progress = per_update_progress(net, batch, {update, match_layer_norms(foof, update)});
        row.kfac_progress = progress[0];
        row.foof_progress = progress[1];
        rows.push_back(row);
        net.apply_update(update);
        ++step;
      }
    }
  }
  return rows;
}

std::string progress_csv(const std::vector<ProgressRow>& rows) {
  std::string out = "step,seed,batch_loss,kfac_progress,foof_progress\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.seed) + "," + fmt(r.batch_loss) + "," +
           option_text(r.kfac_progress) + "," + option_text(r.foof_progress) + "\n";
  }
  return out;
}

// --- grid ----------------------------------------------------------------------

std::vector<double> decades13(int lo, int hi) {
  std::vector<double> out;
  for (int i = lo; i <= hi; ++i) {
    out.push_back(std::stod("1e" + std::to_string(i)));
    out.push_back(std::stod("3e" + std::to_string(i)));
  }
  return out;
}

std::vector<double> decades(int lo, int hi, int step) {
  if (step <= 0) throw ConfigError("decades: step must be positive");
  std::vector<double> out;
  for (int i = lo; i <= hi; i += step) out.push_back(std::stod("1e" + std::to_string(i)));
  return out;
}

std::vector<GridAxis> parse_grid(std::string_view text) {
  std::vector<GridAxis> axes;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("grid line " + std::to_string(line_no) + ": expected 'key = v1, v2, ...'");
    }
    GridAxis axis;
    axis.key = trim(line.substr(0, eq));
    if (const auto keys = config_keys(); std::find(keys.begin(), keys.end(), axis.key) == keys.end()) {
      throw ConfigError("grid line " + std::to_string(line_no) + ": unknown config key '" + axis.key + "'");
    }
    for (auto token : split_top_level(line.substr(eq + 1), ',')) {
      const auto open = token.find('(');
      const std::string_view fn = trim(token.substr(0, open));
      if (open != std::string_view::npos && (fn == "decades13" || fn == "decades")) {
        if (token.back() != ')') throw ConfigError("grid line " + std::to_string(line_no) + ": unbalanced parenthesis");
        const auto args = split_top_level(token.substr(open + 1, token.size() - open - 2), ',');
        std::vector<int> ints;
        for (auto a : args) ints.push_back(static_cast<int>(to_int(axis.key, a)));
        std::vector<double> values;
        if (fn == "decades13" && ints.size() == 2) values = decades13(ints[0], ints[1]);
        else if (fn == "decades" && ints.size() == 2) values = decades(ints[0], ints[1]);
        else if (fn == "decades" && ints.size() == 3) values = decades(ints[0], ints[1], ints[2]);
        else throw ConfigError("grid line " + std::to_string(line_no) + ": wrong number of arguments to " + std::string(fn));
        for (double v : values) axis.values.push_back(fmt_short(v));
      } else {
        if (token.empty()) throw ConfigError("grid line " + std::to_string(line_no) + ": empty value");
        axis.values.emplace_back(token);
      }
    }
    axes.push_back(std::move(axis));
  }
  return axes;
}

GridResult grid_search(const ExperimentConfig& base, const std::vector<GridAxis>& grid, const GridOptions& options) {
  return grid_search(base, grid, prepare_data(base.dataset), options);
}

GridResult grid_search(const ExperimentConfig& base, const std::vector<GridAxis>& grid, const PreparedData& data,
                       const GridOptions& options) {
  for (const auto& axis : grid) {
    if (axis.values.empty()) throw ConfigError("grid axis '" + axis.key + "' has no values");
    ExperimentConfig probe = base;
    for (const auto& v : axis.values) apply_setting(probe, axis.key, v);
  }

  GridResult result;
  std::size_t total = 1;
  for (const auto& axis : grid) total *= axis.values.size();
  result.cells.resize(total);
  std::vector<ExperimentConfig> configs(total, base);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t rem = i;
    std::string suffix;
    for (std::size_t a = grid.size(); a-- > 0;) {
      const std::size_t p = rem % grid[a].values.size();
      rem /= grid[a].values.size();
      result.cells[i].position.insert(result.cells[i].position.begin(), p);
    }
    for (std::size_t a = 0; a < grid.size(); ++a) {
      const auto& value = grid[a].values[result.cells[i].position[a]];
      result.cells[i].assignment.emplace_back(grid[a].key, value);
      apply_setting(configs[i], grid[a].key, value);
      suffix += "_" + grid[a].key + "=" + value;
    }
    configs[i].name = base.name + suffix;
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      GridCell& cell = result.cells[i];
      try {
        configs[i].optimizer.validate();
        const auto run = run_experiment(configs[i], data, RunOptions{options.write_csv, false});
        cell.score = run.mean_final_loss();
        for (const auto& s : run.seeds) {
          cell.final_losses.push_back(s.diverged ? kInf : s.final_train_loss);
          cell.diverged = cell.diverged || s.diverged;
        }
      } catch (const std::exception& e) {
        cell.error = e.what();
        cell.score = kInf;
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(options.jobs, static_cast<unsigned>(total)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 1; i < total; ++i) {
    if (result.cells[i].score < result.cells[result.best].score) result.best = i;
  }
  result.best_config = configs[result.best];
  for (std::size_t a = 0; a < grid.size(); ++a) {
    const auto& values = grid[a].values;
    if (values.size() < 2) continue;
    const bool numeric = std::all_of(values.begin(), values.end(), [](const std::string& v) {
      double x = 0.0;
      const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
      return r.ec == std::errc{} && r.ptr == v.data() + v.size();
    });
    const std::size_t p = result.cells[result.best].position[a];
    if (numeric && (p == 0 || p + 1 == values.size())) result.boundary_axes.push_back(grid[a].key);
  }
  return result;
}

// --- Laplace -------------------------------------------------------------------

LaplaceRun laplace_from_config(const ExperimentConfig& config, const PreparedData& data, std::size_t samples) {
  DatasetChecks::check(config, data.train);
  const std::uint64_t seed = config.seeds.front();
  Network net = initial_network(config, data.train, seed);
  if (config.epochs > 0) {
    ExperimentConfig single = config;
    single.seeds = {seed};
    auto run = run_experiment(single, data, RunOptions{false, true});
    if (run.seeds.front().diverged) throw std::runtime_error("training diverged before the Laplace fit");
    net = std::move(*run.seeds.front().network);
  }
  const Index points = std::min(config.laplace_points > 0 ? config.laplace_points : data.train.size(), data.train.size());
  const Dataset fit = subset(data.train, points, derive_seed(seed, "laplace-points"));
  const FisherMode mode = fit.targets.is_classification() ? FisherMode::kFull : FisherMode::kMonteCarlo;

  LaplaceRun out{LaplaceSpec{Vec::Constant(net.num_params(), config.prior_precision),
                             build_curvature(net, fit.inputs, mode, derive_seed(seed, "laplace-fisher")),
                             config.laplace_data_count > 0.0 ? config.laplace_data_count
                                                             : static_cast<double>(data.train.size()),
                             derive_seed(seed, "laplace-samples")},
                 {}};
  const LaplaceSampler sampler(out.spec);
  for (std::size_t s = 0; s < samples; ++s) out.samples.push_back(sampler.sample(s));
  return out;
}

}  // namespace curvlab
