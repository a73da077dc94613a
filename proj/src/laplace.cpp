#include "curvlab/laplace.hpp"

#include "curvlab/oracle.hpp"
#include "curvlab/random.hpp"

#include <cmath>
#include <stdexcept>

namespace curvlab {

namespace {

constexpr std::size_t kMinReliableSamples = 100;

// Per-layer prior value when the prior is constant within every layer.
std::optional<Vec> per_layer_constant(const Vec& prior, const FlatLayout& layout) {
  Vec values(static_cast<Index>(layout.num_layers()));
  for (std::size_t k = 0; k < layout.num_layers(); ++k) {
    const auto seg = prior.segment(layout.offset(k), layout.shape(k).size());
    if (seg.maxCoeff() != seg.minCoeff()) return std::nullopt;
    values(static_cast<Index>(k)) = seg(0);
  }
  return values;
}

}  // namespace

LaplaceSampler::LaplaceSampler(LaplaceSpec spec) : spec_(std::move(spec)) {
  const ImplicitCurvature& curv = spec_.curv;
  if (spec_.prior_diag.size() != curv.num_params()) {
    throw DimensionError("Laplace prior has " + std::to_string(spec_.prior_diag.size()) + " entries, model has " +
                         std::to_string(curv.num_params()));
  }
  if ((spec_.prior_diag.array() <= 0.0).any()) throw std::invalid_argument("Laplace prior precisions must be positive");
  if (!(spec_.data_count > 0.0)) throw std::invalid_argument("Laplace data count must be positive");
  prior_inv_sqrt_ = spec_.prior_diag.cwiseSqrt().cwiseInverse();

  // U = I + D · Gᵀ Λ⁻¹ G
  const Index d = curv.num_columns();
  Mat gtg;
  if (auto layer_prior = per_layer_constant(spec_.prior_diag, curv.layout())) {
    gtg = gram(curv, layer_prior->cwiseInverse());
  } else {
    gtg.resize(d, d);
    const Vec prior_inv = spec_.prior_diag.cwiseInverse();
    for (Index j = 0; j < d; ++j) {
      const Vec col = g_lincomb(curv, Vec::Unit(d, j));
      gtg.col(j) = g_transpose_vec(curv, prior_inv.cwiseProduct(col));
    }
    gtg = 0.5 * (gtg + gtg.transpose()).eval();
  }
  u_ = spec_.data_count * gtg;
  u_.diagonal().array() += 1.0;
  u_inv_ = SpdFactor(u_).inverse();
}

Vec LaplaceSampler::apply_v(const Vec& w) const {
  return std::sqrt(spec_.data_count) * prior_inv_sqrt_.cwiseProduct(g_lincomb(spec_.curv, w));
}

Vec LaplaceSampler::apply_v_t(const Vec& y) const {
  return std::sqrt(spec_.data_count) * g_transpose_vec(spec_.curv, prior_inv_sqrt_.cwiseProduct(y));
}

Vec LaplaceSampler::sample(std::uint64_t index) const {
  Rng rng(derive_seed(spec_.seed, "laplace", index));
  const Index n = spec_.curv.num_params();
  const Index d = spec_.curv.num_columns();
  Vec y(n);
  for (Index i = 0; i < n; ++i) y(i) = rng.normal();
  Vec z(d);
  for (Index i = 0; i < d; ++i) z(i) = rng.normal();
  const Vec x = y - apply_v(u_inv_ * (apply_v_t(y) + z));
  return prior_inv_sqrt_.cwiseProduct(x);
}

Vec laplace_sample(const LaplaceSpec& spec) { return LaplaceSampler(spec).sample(0); }

LaplaceCovReport laplace_cov_check(const LaplaceSpec& spec, std::size_t samples) {
  const LaplaceSampler sampler(spec);
  const oracle::DenseBundle bundle = oracle::assemble(spec.curv);
  const Mat reference = oracle::dense_laplace_cov(spec.prior_diag, bundle.F, spec.data_count);

  const Index n = spec.curv.num_params();
  Mat second_moment = Mat::Zero(n, n);
  for (std::size_t s = 0; s < samples; ++s) {
    const Vec x = sampler.sample(s);
    second_moment.selfadjointView<Eigen::Lower>().rankUpdate(x);
  }
  second_moment = second_moment.selfadjointView<Eigen::Lower>();
  if (samples > 0) second_moment /= static_cast<double>(samples);

  LaplaceCovReport report;
  report.samples = samples;
  report.max_abs_deviation = (second_moment - reference).cwiseAbs().maxCoeff();
  report.largest_entry = reference.cwiseAbs().maxCoeff();
  report.relative_deviation = report.max_abs_deviation / report.largest_entry;
  if (samples < kMinReliableSamples) {
    report.insufficient_samples = true;
    report.warning = "only " + std::to_string(samples) + " samples; covariance estimate is unreliable below " +
                     std::to_string(kMinReliableSamples);
  }
  return report;
}

}  // namespace curvlab
