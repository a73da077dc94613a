#pragma once

// Brute-force reference computations for tiny instances. Everything here
// assembles matrices explicitly and uses dense LU/LDLT solves; nothing is
// shared with the implicit code paths beyond the input containers.

#include "curvlab/curvature.hpp"
#include "curvlab/net.hpp"
#include "curvlab/types.hpp"

namespace curvlab::oracle {

/// n·D above this is refused by assemble_G.
inline constexpr Index kMaxDenseEntries = 1'000'000;

/// Agreement tolerances shared by the unit tests, the acceptance suite and
/// `validate-oracle`.
struct Tolerances {
  static constexpr double kSolve = 1e-8;
  static constexpr double kProduct = 1e-10;
  static constexpr double kKronAlgebra = 1e-10;
  static constexpr double kDampingProduct = 1e-12;
  static constexpr double kNormalEquations = 1e-10;
  static constexpr double kObjectiveGradient = 1e-8;
  static constexpr double kLaplaceIdentity = 1e-10;
  static constexpr double kFiniteDifference = 1e-5;
};

struct DenseBundle {
  Mat G;  // n × D
  Mat F;  // n × n, F = G Gᵀ
  std::vector<Mat> blocks;  // diagonal blocks of F, one per layer
};

/// Column i is col_scale[i] · (vec_row(e_i^(0) a_i^(0)ᵀ), vec_row(e_i^(1) a_i^(1)ᵀ), …).
Mat assemble_G(const ImplicitCurvature& curv);
DenseBundle assemble(const ImplicitCurvature& curv);

Vec dense_natural_gradient(const Mat& fisher, const Vec& u, double damping);
Vec dense_blockdiag_natural_gradient(const DenseBundle& bundle, const FlatLayout& layout, const Vec& u,
                                     double damping);

Mat kron(const Mat& a, const Mat& b);

enum class KronDamping { kNone, kStandard, kHeuristic };

/// Dense Kronecker curvature in row-major vec order (Σ_E ⊗ Σ_A):
/// kNone: Σ_E ⊗ Σ_A; kStandard: Σ_E ⊗ Σ_A + λI;
/// kHeuristic: (Σ_E + λ_E I) ⊗ (Σ_A + λ_A I).
Mat dense_kron_curvature(const Mat& sigma_act, const Mat& sigma_err, KronDamping mode, double damping,
                         double act_damping = 0.0, double err_damping = 0.0);

/// Solves curvature · vec(x) = vec(grad) densely and reshapes back.
Mat dense_kron_solve(const Mat& curvature, const Mat& grad);

/// Central differences of the mean loss w.r.t. every weight.
Vec finite_diff_grad(const Network& net, const Mat& inputs, const Targets& targets, double eps = 1e-5);

/// (diag(prior) + D·F)⁻¹.
Mat dense_laplace_cov(const Vec& prior_diag, const Mat& fisher, double data_count);

/// I - V U⁻¹ Vᵀ with V = sqrt(D) Λ_prior^{-1/2} G and U = I + VᵀV.
Mat dense_laplace_whitened_cov(const Vec& prior_diag, const Mat& G, double data_count);

}  // namespace curvlab::oracle
