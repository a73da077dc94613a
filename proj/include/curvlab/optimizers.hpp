#pragma once

#include "curvlab/curvature.hpp"
#include "curvlab/kfac.hpp"
#include "curvlab/net.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace curvlab {

enum class OptimizerKind {
  kSgd,
  kAdam,
  kKfacHeuristic,
  kKfacStandard,
  kFoof,
  kNaturalGradient,
  kNaturalGradientBlockDiag,
};

std::string_view to_string(OptimizerKind kind);
std::optional<OptimizerKind> parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.1;
  double damping = 1.0;
  double momentum = 0.0;
  double ema_decay = 0.95;
  std::int64_t inversion_period = 1;   // T
  std::int64_t accumulation_window = 1;  // S
  bool subsampled = false;  // forces ema_decay = 0
  double weight_decay = 0.0;
  FisherMode fisher = FisherMode::kMonteCarlo;
  SolveRoute route = SolveRoute::kAuto;
  /// FOOF diagnostic: damp with λ_A from the KFAC split and scale by 1/λ_E.
  bool foof_kfac_damping = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  double effective_ema() const { return subsampled ? 0.0 : ema_decay; }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

struct Batch {
  Mat inputs;
  Targets targets;
  Index size() const { return inputs.cols(); }
};

/// Everything one optimizer step may consult. The harness has already run
/// forward and backward on `batch`; `trace` holds A and E, `grads` the
/// mean-loss gradients.
struct StepInput {
  const Network& net;
  const Batch& batch;
  BatchTrace& trace;
  const std::vector<Mat>& grads;
  /// Batch for curvature estimates; may be `batch` itself.
  const Batch& curvature_batch;
  bool curvature_is_current = true;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

/// Per-layer Kronecker statistics exposed for diagnostics.
struct KroneckerLayerView {
  Mat act_factor;
  double act_damping = 0.0;
  double err_damping = 0.0;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;

  /// Returns the parameter update ΔW (already scaled by -η); the caller
  /// applies it with Network::apply_update.
  virtual std::vector<Mat> compute_update(const StepInput& in) = 0;

  /// Accumulates curvature statistics without updating parameters. No-op
  /// for methods that keep no statistics.
  virtual void warm_start(const Network& net, const Batch& batch, std::uint64_t seed);

  /// Kronecker statistics for layer k, if this optimizer keeps them.
  virtual std::optional<KroneckerLayerView> kronecker_view(std::size_t layer) const;

  const OptimizerConfig& config() const { return config_; }

 protected:
  explicit Optimizer(OptimizerConfig config);
  std::vector<Mat> finish(const Network& net, std::vector<Mat> directions) const;

  OptimizerConfig config_;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config, const Network& net);

/// Heavy-ball: buffer ← μ·buffer + grad, ΔW = -η·buffer.
class SgdMomentum final : public Optimizer {
 public:
  SgdMomentum(OptimizerConfig config, const Network& net);
  std::vector<Mat> compute_update(const StepInput& in) override;
  std::vector<Mat> step(const std::vector<Mat>& grads);
  const std::vector<Mat>& buffer() const { return buffer_; }

 private:
  std::vector<Mat> buffer_;
};

class Adam final : public Optimizer {
 public:
  Adam(OptimizerConfig config, const Network& net);
  std::vector<Mat> compute_update(const StepInput& in) override;
  std::vector<Mat> step(const std::vector<Mat>& grads);

 private:
  std::vector<Mat> first_;
  std::vector<Mat> second_;
  std::int64_t t_ = 0;
};

/// KFAC (heuristic or standard damping) and FOOF share Kronecker state and
/// the (T, S) amortization schedule. FOOF only tracks Σ_A unless it runs
/// with foof_kfac_damping.
class KroneckerOptimizer final : public Optimizer {
 public:
  KroneckerOptimizer(OptimizerConfig config, const Network& net);

  std::vector<Mat> compute_update(const StepInput& in) override;
  void warm_start(const Network& net, const Batch& batch, std::uint64_t seed) override;
  std::optional<KroneckerLayerView> kronecker_view(std::size_t layer) const override;

  /// Unscaled preconditioned directions for the given gradients using the
  /// cached inverses.
  std::vector<Mat> directions(const std::vector<Mat>& grads) const;
  /// Recomputes damping split and inverses from the current averages.
  void refresh();
  /// Feeds one batch of statistics into the averages.
  void accumulate(const BatchTrace& trace);

  const EmaFactor& act_average(std::size_t k) const { return layers_.at(k).act; }
  const EmaFactor& err_average(std::size_t k) const { return layers_.at(k).err; }
  const DampingSplit& split(std::size_t k) const { return layers_.at(k).split; }
  const Mat& inv_act(std::size_t k) const { return layers_.at(k).inv_act; }
  const Mat& inv_err(std::size_t k) const { return layers_.at(k).inv_err; }
  std::int64_t clamp_warnings() const { return clamp_warnings_; }

 private:
  struct Layer {
    EmaFactor act;
    EmaFactor err;
    Mat inv_act;
    Mat inv_err;
    Eigenbasis act_basis;
    Eigenbasis err_basis;
    DampingSplit split;
  };

  bool uses_error_factor() const;
  void sampled_pass(const Network& net, BatchTrace& trace, std::uint64_t seed) const;

  std::vector<Layer> layers_;
  std::int64_t clamp_warnings_ = 0;
};

/// Exact subsampled natural gradient (full network or per-layer blocks).
/// The Fisher is rebuilt from the curvature batch every step.
class NaturalGradient final : public Optimizer {
 public:
  NaturalGradient(OptimizerConfig config, const Network& net);
  std::vector<Mat> compute_update(const StepInput& in) override;
};

}  // namespace curvlab
