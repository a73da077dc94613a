#pragma once

#include "curvlab/curvature.hpp"
#include "curvlab/data.hpp"
#include "curvlab/laplace.hpp"
#include "curvlab/net.hpp"
#include "curvlab/optimizers.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace curvlab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::string name = "mnist";  // mnist | synth_toy | teacher
  std::filesystem::path data_dir;  // empty: $CURVLAB_DATA_DIR, then the bundled sample
  std::string images = "train-images-idx3-ubyte.gz";
  std::string labels = "train-labels-idx1-ubyte.gz";
  Index subset = 1000;  // 0 keeps everything
  Index eval_size = 0;  // held-out examples drawn from the remainder
  Index pool = 1;
  std::uint64_t subset_seed = 0;
  Index teacher_dim = 8;
  Index teacher_classes = 3;
};

struct ExperimentConfig {
  std::string name = "run";
  DatasetSpec dataset;
  std::vector<Index> hidden;
  Activation activation = Activation::kRelu;
  LossKind loss = LossKind::kCrossEntropy;
  OptimizerConfig optimizer;
  std::int64_t epochs = 10;
  Index batch_size = 100;  // 0: full batch
  std::vector<std::uint64_t> seeds{0};
  CurvatureSource curvature_source = CurvatureSource::kSameBatch;
  std::int64_t warm_start = 50;
  std::int64_t log_every = 0;  // 0: once per epoch
  bool diagnostics = false;
  double align_damping = 0.0;  // 0: use optimizer damping (or 1 when that is 0)
  std::filesystem::path output_dir = "runs";
  double prior_precision = 1.0;
  Index laplace_points = 8;
  double laplace_data_count = 0.0;  // 0: training-set size
};

/// Flat `key = value` text; '#' starts a comment. Unknown keys throw
/// ConfigError naming the key.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value);
std::string config_text(const ExperimentConfig& config);
std::vector<std::string> config_keys();

struct PreparedData {
  Dataset train;
  std::optional<Dataset> eval;
};
std::filesystem::path resolve_data_dir(const DatasetSpec& spec);
PreparedData prepare_data(const DatasetSpec& spec);

struct MetricRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  double train_loss = 0.0;
  std::optional<double> eval_loss;
  std::optional<double> eval_accuracy;
  std::optional<double> rel_progress;
  std::optional<double> alignment_to_foof;
  std::vector<std::optional<double>> alignment_layers;
  std::vector<double> update_norms;
  bool diverged = false;
  double wall_ms = 0.0;
};

std::string csv_header(std::size_t num_layers);
std::string csv_line(const MetricRow& row, std::size_t num_layers);

struct SeedResult {
  std::uint64_t seed = 0;
  double final_train_loss = 0.0;
  std::optional<double> final_eval_loss;
  std::optional<double> final_eval_accuracy;
  bool diverged = false;
  std::filesystem::path csv_path;
  std::vector<MetricRow> rows;
  std::optional<Network> network;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<SeedResult> seeds;

  /// Diverged seeds count as +inf.
  double mean_final_loss() const;
  double median_final_loss() const;
};

struct RunOptions {
  bool write_csv = true;
  bool keep_network = false;
};

std::vector<Index> layer_sizes(const ExperimentConfig& config, const Dataset& train);

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});
ExperimentResult run_experiment(const ExperimentConfig& config, const PreparedData& data, const RunOptions& options = {});

// --- diagnostics -----------------------------------------------------------

/// FOOF inner product ⟨U,V⟩ = Σ_k trace(U_k (λI + Σ_A,k) V_kᵀ); an empty
/// factor list means the identity metric (plain cosine).
struct AlignmentMetric {
  std::vector<Mat> act_factors;
  std::vector<double> dampings;

  static AlignmentMetric identity() { return {}; }
  bool is_identity() const { return act_factors.empty(); }
};

/// Metric-weighted cosine in [-1, 1]; nullopt when either vector is zero.
std::optional<double> alignment(std::span<const Mat> u1, std::span<const Mat> u2, const AlignmentMetric& metric);
std::optional<double> layer_alignment(const Mat& u1, const Mat& u2, const Mat* act_factor, double damping);

/// Rescales each layer of `candidate` to the Frobenius norm of `reference`.
std::vector<Mat> match_layer_norms(std::span<const Mat> candidate, std::span<const Mat> reference);

/// (L(W) - L(W+Δ)) / L(W) on `batch` for every candidate; nullopt if L(W) = 0.
std::vector<std::optional<double>> per_update_progress(const Network& net, const Batch& batch,
                                                        const std::vector<std::vector<Mat>>& candidates);

/// Follows the KFAC trajectory of `config` and records the per-step
/// relative progress of the KFAC update and of the norm-matched FOOF update
/// (second Kronecker factor dropped, damping λ_A).
struct ProgressRow {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  double batch_loss = 0.0;
  std::optional<double> kfac_progress;
  std::optional<double> foof_progress;
};
std::vector<ProgressRow> run_progress(const ExperimentConfig& config, const PreparedData& data);
std::string progress_csv(const std::vector<ProgressRow>& rows);

// --- grid search -----------------------------------------------------------

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

/// `key = v1, v2, ...`, `key = decades13(lo, hi)` for {1,3}·10^i, or
/// `key = decades(lo, hi[, step])` for 10^i.
std::vector<GridAxis> parse_grid(std::string_view text);
std::vector<double> decades13(int lo, int hi);
std::vector<double> decades(int lo, int hi, int step = 1);

struct GridCell {
  std::vector<std::pair<std::string, std::string>> assignment;
  std::vector<std::size_t> position;
  double score = 0.0;  // mean final training loss, +inf when diverged or failed
  bool diverged = false;
  std::string error;
  std::vector<double> final_losses;
};

struct GridResult {
  std::vector<GridCell> cells;
  std::size_t best = 0;
  ExperimentConfig best_config;
  std::vector<std::string> boundary_axes;  // axes whose best value is an end point

  bool on_boundary() const { return !boundary_axes.empty(); }
};

struct GridOptions {
  unsigned jobs = 1;
  bool write_csv = false;
};

GridResult grid_search(const ExperimentConfig& base, const std::vector<GridAxis>& grid, const GridOptions& options = {});
GridResult grid_search(const ExperimentConfig& base, const std::vector<GridAxis>& grid, const PreparedData& data,
                       const GridOptions& options = {});

// --- Laplace ---------------------------------------------------------------

struct LaplaceRun {
  LaplaceSpec spec;
  std::vector<Vec> samples;
};
LaplaceRun laplace_from_config(const ExperimentConfig& config, const PreparedData& data, std::size_t samples);

}  // namespace curvlab
