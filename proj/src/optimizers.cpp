#include "curvlab/optimizers.hpp"

#include "curvlab/random.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace curvlab {

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kKfacHeuristic: return "kfac_heuristic";
    case OptimizerKind::kKfacStandard: return "kfac_standard";
    case OptimizerKind::kFoof: return "foof";
    case OptimizerKind::kNaturalGradient: return "natural_gradient";
    case OptimizerKind::kNaturalGradientBlockDiag: return "natural_gradient_blockdiag";
  }
  return "unknown";
}

std::optional<OptimizerKind> parse_optimizer_kind(std::string_view name) {
  for (auto kind : {OptimizerKind::kSgd, OptimizerKind::kAdam, OptimizerKind::kKfacHeuristic,
                    OptimizerKind::kKfacStandard, OptimizerKind::kFoof, OptimizerKind::kNaturalGradient,
                    OptimizerKind::kNaturalGradientBlockDiag}) {
    if (name == to_string(kind)) return kind;
  }
  if (name == "kfac") return OptimizerKind::kKfacHeuristic;
  if (name == "ng") return OptimizerKind::kNaturalGradient;
  if (name == "ng_blockdiag") return OptimizerKind::kNaturalGradientBlockDiag;
  return std::nullopt;
}

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (!(learning_rate > 0.0)) fail("learning rate must be positive");
  if (!(damping >= 0.0)) fail("damping must be non-negative");
  const bool needs_positive_damping = kind == OptimizerKind::kNaturalGradient ||
                                      kind == OptimizerKind::kNaturalGradientBlockDiag ||
                                      kind == OptimizerKind::kKfacHeuristic || kind == OptimizerKind::kKfacStandard ||
                                      (kind == OptimizerKind::kFoof && foof_kfac_damping);
  if (needs_positive_damping && !(damping > 0.0)) fail(std::string(to_string(kind)) + " requires damping > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("ema decay must lie in [0, 1)");
  if (inversion_period < 1) fail("inversion period T must be >= 1");
  if (accumulation_window < 1 || accumulation_window > inversion_period) fail("accumulation window S must satisfy 1 <= S <= T");
  if (!(weight_decay >= 0.0)) fail("weight decay must be non-negative");
  if (fisher == FisherMode::kFull && kind != OptimizerKind::kNaturalGradient &&
      kind != OptimizerKind::kNaturalGradientBlockDiag) {
    fail("full Fisher is only available for natural-gradient optimizers");
  }
}

Optimizer::Optimizer(OptimizerConfig config) : config_(std::move(config)) { config_.validate(); }

void Optimizer::warm_start(const Network&, const Batch&, std::uint64_t) {}

std::optional<KroneckerLayerView> Optimizer::kronecker_view(std::size_t) const { return std::nullopt; }

std::vector<Mat> Optimizer::finish(const Network& net, std::vector<Mat> directions) const {
  const double lr = config_.learning_rate;
  for (std::size_t k = 0; k < directions.size(); ++k) {
    directions[k] *= -lr;
    if (config_.weight_decay > 0.0) directions[k] -= lr * config_.weight_decay * net.weight(k);
  }
  return directions;
}

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config, const Network& net) {
  switch (config.kind) {
    case OptimizerKind::kSgd: return std::make_unique<SgdMomentum>(config, net);
    case OptimizerKind::kAdam: return std::make_unique<Adam>(config, net);
    case OptimizerKind::kKfacHeuristic:
    case OptimizerKind::kKfacStandard:
    case OptimizerKind::kFoof: return std::make_unique<KroneckerOptimizer>(config, net);
    case OptimizerKind::kNaturalGradient:
    case OptimizerKind::kNaturalGradientBlockDiag: return std::make_unique<NaturalGradient>(config, net);
  }
  throw std::invalid_argument("unknown optimizer kind");
}

// ---------------------------------------------------------------------------

SgdMomentum::SgdMomentum(OptimizerConfig config, const Network& net)
    : Optimizer(std::move(config)), buffer_(net.layout().zeros()) {}

std::vector<Mat> SgdMomentum::step(const std::vector<Mat>& grads) {
  for (std::size_t k = 0; k < buffer_.size(); ++k) buffer_[k] = config_.momentum * buffer_[k] + grads.at(k);
  return buffer_;
}

std::vector<Mat> SgdMomentum::compute_update(const StepInput& in) { return finish(in.net, step(in.grads)); }

Adam::Adam(OptimizerConfig config, const Network& net)
    : Optimizer(std::move(config)), first_(net.layout().zeros()), second_(net.layout().zeros()) {}

std::vector<Mat> Adam::step(const std::vector<Mat>& grads) {
  ++t_;
  const double b1 = config_.adam_beta1;
  const double b2 = config_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  std::vector<Mat> out;
  for (std::size_t k = 0; k < first_.size(); ++k) {
    first_[k] = b1 * first_[k] + (1.0 - b1) * grads.at(k);
    second_[k] = b2 * second_[k] + (1.0 - b2) * grads.at(k).cwiseAbs2();
    out.push_back(((first_[k] / c1).array() / ((second_[k] / c2).array().sqrt() + config_.adam_epsilon)).matrix());
  }
  return out;
}

std::vector<Mat> Adam::compute_update(const StepInput& in) { return finish(in.net, step(in.grads)); }

// ---------------------------------------------------------------------------

KroneckerOptimizer::KroneckerOptimizer(OptimizerConfig config, const Network& net) : Optimizer(std::move(config)) {
  const double decay = config_.effective_ema();
  for (const auto& shape : net.layout().shapes()) {
    layers_.push_back(Layer{EmaFactor(decay, shape.cols), EmaFactor(decay, shape.rows), {}, {}, {}, {}, {}});
  }
}

bool KroneckerOptimizer::uses_error_factor() const {
  return config_.kind != OptimizerKind::kFoof || config_.foof_kfac_damping;
}

void KroneckerOptimizer::sampled_pass(const Network& net, BatchTrace& trace, std::uint64_t seed) const {
  backward_sampled(net, trace, sample_labels(trace.outputs(), net.loss_kind(), seed));
}

void KroneckerOptimizer::accumulate(const BatchTrace& trace) {
  if (trace.inputs.size() != layers_.size()) throw DimensionError("accumulate: trace depth does not match optimizer");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    layers_[k].act.update(activation_factor(trace.inputs[k]));
    if (uses_error_factor()) layers_[k].err.update(error_factor(trace.sampled_errors.at(k), trace.col_weights));
  }
}

void KroneckerOptimizer::warm_start(const Network& net, const Batch& batch, std::uint64_t seed) {
  BatchTrace trace = forward(net, batch.inputs);
  if (uses_error_factor()) sampled_pass(net, trace, seed);
  accumulate(trace);
}

void KroneckerOptimizer::refresh() {
  const double damping = config_.damping;
  for (auto& layer : layers_) {
    const Mat sigma_a = layer.act.value();
    const Mat sigma_e = layer.err.value();
    if (uses_error_factor()) {
      layer.split = damping_split(damping, sigma_a.trace(), sigma_e.trace(), sigma_e.rows(), sigma_a.rows());
      if (layer.split.clamped) ++clamp_warnings_;
    }
    switch (config_.kind) {
      case OptimizerKind::kKfacHeuristic:
        layer.inv_act = damped_inverse(sigma_a, layer.split.act);
        layer.inv_err = damped_inverse(sigma_e, layer.split.err);
        break;
      case OptimizerKind::kKfacStandard:
        layer.act_basis = eigenbasis(sigma_a);
        layer.err_basis = eigenbasis(sigma_e);
        break;
      case OptimizerKind::kFoof:
        layer.inv_act = damped_inverse(sigma_a, config_.foof_kfac_damping ? layer.split.act : damping);
        break;
      default: throw std::logic_error("KroneckerOptimizer: unsupported kind");
    }
  }
}

std::vector<Mat> KroneckerOptimizer::directions(const std::vector<Mat>& grads) const {
  std::vector<Mat> out;
  out.reserve(layers_.size());
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Layer& layer = layers_[k];
    switch (config_.kind) {
      case OptimizerKind::kKfacHeuristic:
        out.push_back(kfac_heuristic_direction(grads.at(k), layer.inv_act, layer.inv_err));
        break;
      case OptimizerKind::kKfacStandard:
        out.push_back(kfac_standard_direction(grads.at(k), layer.act_basis, layer.err_basis, config_.damping));
        break;
      default: {
        Mat dir = foof_direction(grads.at(k), layer.inv_act);
        if (config_.foof_kfac_damping) dir /= layer.split.err;
        out.push_back(std::move(dir));
      }
    }
  }
  return out;
}

std::vector<Mat> KroneckerOptimizer::compute_update(const StepInput& in) {
  const AmortizationStep schedule =
      amortization_schedule(in.step, config_.inversion_period, config_.accumulation_window);
  if (schedule.accumulate) {
    const std::uint64_t sample_seed = derive_seed(in.seed, "fisher-labels", static_cast<std::uint64_t>(in.step));
    if (in.curvature_is_current) {
      if (uses_error_factor()) sampled_pass(in.net, in.trace, sample_seed);
      accumulate(in.trace);
    } else {
      warm_start(in.net, in.curvature_batch, sample_seed);
    }
  }
  if (schedule.refresh_inverse || layers_.front().inv_act.size() + layers_.front().act_basis.values.size() == 0) {
    refresh();
  }
  return finish(in.net, directions(in.grads));
}

std::optional<KroneckerLayerView> KroneckerOptimizer::kronecker_view(std::size_t layer) const {
  const Layer& l = layers_.at(layer);
  KroneckerLayerView view;
  view.act_factor = l.act.value();
  view.act_damping = uses_error_factor() ? l.split.act : config_.damping;
  view.err_damping = l.split.err;
  return view;
}

// ---------------------------------------------------------------------------

NaturalGradient::NaturalGradient(OptimizerConfig config, const Network& net) : Optimizer(std::move(config)) {
  if (config_.fisher == FisherMode::kFull && net.loss_kind() != LossKind::kCrossEntropy) {
    throw std::invalid_argument("full Fisher requires a classification network");
  }
}

std::vector<Mat> NaturalGradient::compute_update(const StepInput& in) {
  const std::uint64_t sample_seed = derive_seed(in.seed, "fisher-labels", static_cast<std::uint64_t>(in.step));
  ImplicitCurvature curv = [&] {
    if (in.curvature_is_current && config_.fisher == FisherMode::kMonteCarlo) {
      backward_sampled(in.net, in.trace, sample_labels(in.trace.outputs(), in.net.loss_kind(), sample_seed));
      return curvature_from_trace(in.trace);
    }
    return build_curvature(in.net, in.curvature_batch.inputs, config_.fisher, sample_seed);
  }();
  const FlatLayout& layout = in.net.layout();
  const Vec grad = layout.flatten(in.grads);
  const Vec dir = config_.kind == OptimizerKind::kNaturalGradient
                      ? natural_gradient(curv, grad, config_.damping, config_.route)
                      : natural_gradient_blockdiag(curv, grad, config_.damping, config_.route);
  return finish(in.net, layout.unflatten(dir));
}

}  // namespace curvlab
