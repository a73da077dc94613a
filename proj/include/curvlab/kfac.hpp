#pragma once

#include "curvlab/types.hpp"

#include <cstdint>

namespace curvlab {

/// Exponential moving average with bias normalization:
/// raw ← m·raw + (1-m)·x, weight ← m·weight + (1-m), value = raw / weight.
/// With m = 0 the value is always the latest batch factor.
class EmaFactor {
 public:
  explicit EmaFactor(double decay = 0.95, Index dim = 0);

  void update(const Mat& batch_factor);
  bool empty() const { return weight_ == 0.0; }
  double decay() const { return decay_; }
  /// Normalized average (dim × dim zeros before the first update).
  Mat value() const;
  Index dim() const { return raw_.rows(); }

 private:
  double decay_;
  Mat raw_;
  double weight_ = 0.0;
};

/// A Aᵀ / D.
Mat activation_factor(const Mat& inputs);
/// E diag(s²) Eᵀ; with s = 1/sqrt(D) this is E Eᵀ / D.
Mat error_factor(const Mat& errors, const Vec& col_scale);

struct DampingSplit {
  double act = 0.0;  // λ_A
  double err = 0.0;  // λ_E
  bool clamped = false;
};

/// λ_A = sqrt(λ r), λ_E = sqrt(λ / r), r = n·Tr(Σ_A) / (m·Tr(Σ_E)) where the
/// layer weight is n × m. r is clamped into [1e-12, 1e12] (flagged) when a
/// trace vanishes.
DampingSplit damping_split(double damping, double trace_act, double trace_err, Index out_dim, Index in_dim);

struct AmortizationStep {
  bool refresh_inverse = false;
  bool accumulate = false;
};

/// refresh ⇔ t mod T = 0; accumulate ⇔ (t + S) mod T ∈ {0, …, S-1}.
AmortizationStep amortization_schedule(std::int64_t step, std::int64_t period, std::int64_t window);

/// (Σ + λI)⁻¹ via Cholesky; throws FactorizationError when singular.
Mat damped_inverse(const Mat& sigma, double damping);

struct Eigenbasis {
  Mat vectors;
  Vec values;
};
Eigenbasis eigenbasis(const Mat& symmetric);

/// Heuristic damping: P_E · grad · P_A with P_A = (Σ_A + λ_A I)⁻¹ and
/// P_E = (Σ_E + λ_E I)⁻¹ (gradient is n × m, row-major vec ↔ Σ_E ⊗ Σ_A).
Mat kfac_heuristic_direction(const Mat& grad, const Mat& inv_act, const Mat& inv_err);

/// Standard damping: (Σ_E ⊗ Σ_A + λI)⁻¹ vec(grad) computed in the
/// Kronecker eigenbasis.
Mat kfac_standard_direction(const Mat& grad, const Eigenbasis& act, const Eigenbasis& err, double damping);

/// grad · P_A, the transpose of P_A gradᵀ.
Mat foof_direction(const Mat& grad, const Mat& inv_act);

}  // namespace curvlab
