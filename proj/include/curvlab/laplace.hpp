#pragma once

#include "curvlab/curvature.hpp"
#include "curvlab/types.hpp"

#include <cstdint>
#include <string>

namespace curvlab {

/// Gaussian posterior with precision diag(prior) + data_count · G Gᵀ.
struct LaplaceSpec {
  Vec prior_diag;
  ImplicitCurvature curv;
  double data_count = 1.0;
  std::uint64_t seed = 0;
};

/// Draws exact samples using x = y - V U⁻¹ (Vᵀy + z), returned as
/// Λ_prior^{-1/2} x, where V = sqrt(D) Λ_prior^{-1/2} G and U = I + VᵀV.
/// U is formed once and inverted explicitly.
class LaplaceSampler {
 public:
  explicit LaplaceSampler(LaplaceSpec spec);

  /// The index-th sample for the spec's seed; independent of call order.
  Vec sample(std::uint64_t index = 0) const;

  const Mat& u_matrix() const { return u_; }
  const Mat& u_inverse() const { return u_inv_; }
  const LaplaceSpec& spec() const { return spec_; }

 private:
  Vec apply_v(const Vec& w) const;       // V w
  Vec apply_v_t(const Vec& y) const;     // Vᵀ y

  LaplaceSpec spec_;
  Vec prior_inv_sqrt_;
  Mat u_;
  Mat u_inv_;
};

Vec laplace_sample(const LaplaceSpec& spec);

struct LaplaceCovReport {
  std::size_t samples = 0;
  double max_abs_deviation = 0.0;
  double largest_entry = 0.0;
  double relative_deviation = 0.0;  // max_abs_deviation / largest_entry
  bool insufficient_samples = false;
  std::string warning;
};

/// Empirical second moment of `samples` draws against the dense posterior
/// covariance (dense oracle size guards apply).
LaplaceCovReport laplace_cov_check(const LaplaceSpec& spec, std::size_t samples);

}  // namespace curvlab
