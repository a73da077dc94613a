#pragma once

#include "curvlab/net.hpp"
#include "curvlab/types.hpp"

#include <cstdint>
#include <optional>

namespace curvlab {

enum class FisherMode { kMonteCarlo, kFull };
enum class CurvatureSource { kSameBatch, kIndependentBatch };
enum class SolveRoute { kAuto, kWoodbury, kPrimal };

/// Cholesky factor of a symmetric positive-definite matrix. If the first
/// attempt fails, 1e-10·trace/dim is added to the diagonal and the
/// factorization retried once; a second failure throws FactorizationError.
class SpdFactor {
 public:
  explicit SpdFactor(Mat matrix);

  Vec solve(const Vec& rhs) const { return llt_.solve(rhs); }
  Mat solve(const Mat& rhs) const { return llt_.solve(rhs); }
  Mat inverse() const;
  bool jittered() const { return jittered_; }
  Index dim() const { return llt_.rows(); }

 private:
  Eigen::LLT<Mat> llt_;
  bool jittered_ = false;
};

/// Subsampled Fisher F = G Gᵀ kept in factored form. Column i of G is
/// col_scale[i] · vec(e_i a_iᵀ) summed over layers, where a_i and e_i are the
/// i-th columns of inputs[k] and errors[k]. G is never materialized.
///
/// In Full mode the K columns of one input are stored contiguously and share
/// their activation columns; group_size() reports K (1 for MC mode).
class ImplicitCurvature {
 public:
  ImplicitCurvature(std::vector<Mat> inputs, std::vector<Mat> errors, Vec col_scale,
                    FisherMode mode = FisherMode::kMonteCarlo, Index group_size = 1);

  std::size_t num_layers() const { return inputs_.size(); }
  Index num_columns() const { return col_scale_.size(); }
  Index num_params() const { return layout_.size(); }
  Index group_size() const { return group_size_; }
  FisherMode mode() const { return mode_; }
  const FlatLayout& layout() const { return layout_; }

  const Mat& inputs(std::size_t k) const { return inputs_.at(k); }
  const Mat& errors(std::size_t k) const { return errors_.at(k); }
  const Vec& col_scale() const { return col_scale_; }

  /// Single-layer curvature (the layer's diagonal Fisher block).
  ImplicitCurvature layer(std::size_t k) const;

 private:
  std::vector<Mat> inputs_;
  std::vector<Mat> errors_;
  Vec col_scale_;
  FisherMode mode_;
  Index group_size_;
  FlatLayout layout_;
};

/// GᵀG = Σ_k (A_kᵀA_k) ⊙ (E_kᵀE_k), column scales folded in.
/// layer_weights, if given, scales layer k's contribution (GᵀΛ⁻¹G for a
/// per-layer-constant diagonal Λ).
Mat gram(const ImplicitCurvature& curv, const std::optional<Vec>& layer_weights = std::nullopt);

/// v_i = g_iᵀ u = s_i Σ_k e_iᵀ mat(u_k) a_i.
Vec g_transpose_vec(const ImplicitCurvature& curv, const Vec& u);

/// G w: layer block k equals (E_k diag(s ⊙ w)) A_kᵀ.
Vec g_lincomb(const ImplicitCurvature& curv, const Vec& w);

/// (λI + GGᵀ)⁻¹ u = u/λ - G (I + GᵀG/λ)⁻¹ Gᵀu / λ².
Vec natural_gradient(const ImplicitCurvature& curv, const Vec& u, double damping);

/// Applies natural_gradient to each layer's block independently.
Vec natural_gradient_blockdiag(const ImplicitCurvature& curv, const Vec& u, double damping);

/// Dense n × n Fisher G Gᵀ, summing each input's group of columns before
/// forming Kronecker blocks. Cost O(n² · D / group_size).
Mat fisher_matrix(const ImplicitCurvature& curv);

/// Solves (λI + F) x = u with F assembled by fisher_matrix.
Vec natural_gradient_primal(const ImplicitCurvature& curv, const Vec& u, double damping);

/// Dispatches to the Woodbury (D ≤ n) or primal (D > n) route for kAuto.
Vec natural_gradient(const ImplicitCurvature& curv, const Vec& u, double damping, SolveRoute route);
Vec natural_gradient_blockdiag(const ImplicitCurvature& curv, const Vec& u, double damping, SolveRoute route);

/// MC: one label per input sampled from the model, col_scale = 1/sqrt(B).
/// Full: one column per (input, class), col_scale = sqrt(p(class|input)/N);
/// classification only.
ImplicitCurvature build_curvature(const Network& net, const Mat& inputs, FisherMode mode, std::uint64_t seed = 0);

/// MC curvature from a trace whose sampled_errors are already filled.
ImplicitCurvature curvature_from_trace(const BatchTrace& trace);

/// Which earlier batch supplies the Fisher at a given step. Independent
/// pairing uses the previous step's batch; step 0 falls back to the current one.
class CurvatureBatchPairing {
 public:
  explicit CurvatureBatchPairing(CurvatureSource source) : source_(source) {}
  /// Returns true when the curvature batch is the current gradient batch.
  bool uses_current(std::int64_t step) const { return source_ == CurvatureSource::kSameBatch || step == 0; }
  CurvatureSource source() const { return source_; }

 private:
  CurvatureSource source_;
};

}  // namespace curvlab
