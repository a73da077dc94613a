#include "curvlab/kfac.hpp"

#include "curvlab/curvature.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace curvlab {

EmaFactor::EmaFactor(double decay, Index dim) : decay_(decay), raw_(Mat::Zero(dim, dim)) {
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("EMA decay must lie in [0, 1)");
}

void EmaFactor::update(const Mat& batch_factor) {
  if (weight_ == 0.0 && (batch_factor.rows() != raw_.rows() || batch_factor.cols() != raw_.cols())) {
    raw_ = Mat::Zero(batch_factor.rows(), batch_factor.cols());
  } else if (batch_factor.rows() != raw_.rows() || batch_factor.cols() != raw_.cols()) {
    throw DimensionError("EMA factor shape changed between updates");
  }
  raw_ = decay_ * raw_ + (1.0 - decay_) * batch_factor;
  weight_ = decay_ * weight_ + (1.0 - decay_);
}

Mat EmaFactor::value() const {
  if (weight_ == 0.0) return raw_;
  return raw_ / weight_;
}

Mat activation_factor(const Mat& inputs) {
  return inputs * inputs.transpose() / static_cast<double>(inputs.cols());
}

Mat error_factor(const Mat& errors, const Vec& col_scale) {
  if (col_scale.size() != errors.cols()) throw DimensionError("error_factor: one scale per column required");
  const Mat scaled = errors * col_scale.asDiagonal();
  return scaled * scaled.transpose();
}

DampingSplit damping_split(double damping, double trace_act, double trace_err, Index out_dim, Index in_dim) {
  if (!(damping > 0.0)) throw std::invalid_argument("damping_split: damping must be positive");
  constexpr double kMin = 1e-12;
  constexpr double kMax = 1e12;
  DampingSplit split;
  double ratio = (static_cast<double>(out_dim) * trace_act) / (static_cast<double>(in_dim) * trace_err);
  if (!std::isfinite(ratio) || ratio < kMin || ratio > kMax) {
    split.clamped = true;
    ratio = std::isnan(ratio) ? 1.0 : std::clamp(ratio, kMin, kMax);
  }
  split.act = std::sqrt(damping * ratio);
  split.err = std::sqrt(damping / ratio);
  return split;
}

AmortizationStep amortization_schedule(std::int64_t step, std::int64_t period, std::int64_t window) {
  if (period < 1 || window < 1 || window > period) {
    throw std::invalid_argument("amortization requires 1 <= S <= T (got T=" + std::to_string(period) +
                                ", S=" + std::to_string(window) + ")");
  }
  if (step < 0) throw std::invalid_argument("amortization step must be non-negative");
  AmortizationStep out;
  out.refresh_inverse = step % period == 0;
  out.accumulate = (step + window) % period < window;
  return out;
}

Mat damped_inverse(const Mat& sigma, double damping) {
  Mat system = sigma;
  system.diagonal().array() += damping;
  return SpdFactor(std::move(system)).inverse();
}

Eigenbasis eigenbasis(const Mat& symmetric) {
  Eigen::SelfAdjointEigenSolver<Mat> solver(symmetric);
  if (solver.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  return {solver.eigenvectors(), solver.eigenvalues()};
}

Mat kfac_heuristic_direction(const Mat& grad, const Mat& inv_act, const Mat& inv_err) {
  if (inv_err.rows() != grad.rows() || inv_act.rows() != grad.cols()) {
    throw DimensionError("kfac_heuristic_direction: factor sizes do not match gradient");
  }
  return inv_err * grad * inv_act;
}

Mat kfac_standard_direction(const Mat& grad, const Eigenbasis& act, const Eigenbasis& err, double damping) {
  if (err.vectors.rows() != grad.rows() || act.vectors.rows() != grad.cols()) {
    throw DimensionError("kfac_standard_direction: factor sizes do not match gradient");
  }
  Mat rotated = err.vectors.transpose() * grad * act.vectors;
  for (Index i = 0; i < rotated.rows(); ++i) {
    for (Index j = 0; j < rotated.cols(); ++j) {
      const double denom = err.values(i) * act.values(j) + damping;
      if (!(denom > 0.0)) throw FactorizationError("standard-damped Kronecker curvature is singular", denom);
      rotated(i, j) /= denom;
    }
  }
  return err.vectors * rotated * act.vectors.transpose();
}

Mat foof_direction(const Mat& grad, const Mat& inv_act) {
  if (inv_act.rows() != grad.cols()) throw DimensionError("foof_direction: factor size does not match gradient");
  return grad * inv_act;
}

}  // namespace curvlab
