#include "support.hpp"

namespace curvlab::testing {

Mat random_matrix(Rng& rng, Index rows, Index cols) {
  Mat m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

Vec random_vec(Rng& rng, Index n) { return random_matrix(rng, n, 1).col(0); }

Mat random_spd(Rng& rng, Index n, double floor) {
  const Mat b = random_matrix(rng, n, n);
  Mat s = b * b.transpose() / static_cast<double>(n);
  s.diagonal().array() += floor;
  return s;
}

Case random_case(std::uint64_t seed, Index max_width, Index max_batch, std::size_t max_layers) {
  Rng rng(seed, 0xCA5E);
  const std::size_t layers = 1 + rng.below(max_layers);
  const LossKind loss = rng.below(2) == 0 ? LossKind::kCrossEntropy : LossKind::kSquaredError;
  const Activation act = rng.below(2) == 0 ? Activation::kRelu : Activation::kTanh;
  std::vector<Index> sizes;
  for (std::size_t k = 0; k <= layers; ++k) sizes.push_back(2 + static_cast<Index>(rng.below(max_width - 1)));
  const Index d = 1 + static_cast<Index>(rng.below(static_cast<std::size_t>(max_batch)));
  Case c{Network::kaiming(sizes, act, loss, seed), random_matrix(rng, sizes.front(), d), {}, {}};
  if (loss == LossKind::kCrossEntropy) {
    std::vector<int> labels;
    for (Index j = 0; j < d; ++j) labels.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(sizes.back()))));
    c.targets = Targets::from_classes(labels);
  } else {
    c.targets = Targets::from_values(random_matrix(rng, sizes.back(), d));
  }
  c.label = std::to_string(layers) + " layers, D=" + std::to_string(d) + ", " + std::string(to_string(loss)) + ", " +
            std::string(to_string(act));
  return c;
}

ImplicitCurvature mc_curvature(const Case& c, std::uint64_t seed) {
  BatchTrace trace = forward(c.net, c.inputs);
  backward_sampled(c.net, trace, sample_labels(trace.outputs(), c.net.loss_kind(), seed));
  return curvature_from_trace(trace);
}

::testing::AssertionResult MatNear(const Mat& a, const Mat& b, double tol) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    return ::testing::AssertionFailure() << "shape " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
                                         << b.cols();
  }
  const double scale = std::max(1.0, b.size() ? b.cwiseAbs().maxCoeff() : 0.0);
  const double dev = a.size() ? (a - b).cwiseAbs().maxCoeff() : 0.0;
  if (dev <= tol * scale) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << "max deviation " << dev << " exceeds " << tol * scale;
}

}  // namespace curvlab::testing
