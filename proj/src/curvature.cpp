#include "curvlab/curvature.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace curvlab {

namespace {

double smallest_ldlt_pivot(const Mat& m) {
  Eigen::LDLT<Mat> ldlt(m);
  if (ldlt.info() != Eigen::Success) return std::numeric_limits<double>::quiet_NaN();
  return ldlt.vectorD().minCoeff();
}

void require_positive_damping(double damping) {
  if (!(damping > 0.0)) throw std::invalid_argument("damping must be positive, got " + std::to_string(damping));
}

// Columns 0, K, 2K, ... of an activation matrix whose groups share inputs.
Mat group_representatives(const Mat& a, Index group) {
  if (group == 1) return a;
  const Index n = a.cols() / group;
  Mat out(a.rows(), n);
  for (Index g = 0; g < n; ++g) out.col(g) = a.col(g * group);
  return out;
}

}  // namespace

SpdFactor::SpdFactor(Mat matrix) {
  if (matrix.rows() != matrix.cols()) throw DimensionError("SpdFactor: matrix must be square");
  llt_.compute(matrix);
  if (llt_.info() == Eigen::Success && llt_.matrixLLT().allFinite()) return;
  const Index d = matrix.rows();
  const double jitter = 1e-10 * std::abs(matrix.trace()) / static_cast<double>(std::max<Index>(d, 1));
  Mat retry = matrix;
  retry.diagonal().array() += jitter;
  llt_.compute(retry);
  if (llt_.info() == Eigen::Success && llt_.matrixLLT().allFinite() && jitter > 0.0) {
    jittered_ = true;
    return;
  }
  const double pivot = smallest_ldlt_pivot(matrix);
  throw FactorizationError("matrix is not numerically positive definite (smallest pivot " + std::to_string(pivot) + ")",
                           pivot);
}

Mat SpdFactor::inverse() const { return llt_.solve(Mat::Identity(dim(), dim())); }

ImplicitCurvature::ImplicitCurvature(std::vector<Mat> inputs, std::vector<Mat> errors, Vec col_scale,
                                     FisherMode mode, Index group_size)
    : inputs_(std::move(inputs)),
      errors_(std::move(errors)),
      col_scale_(std::move(col_scale)),
      mode_(mode),
      group_size_(group_size) {
  if (inputs_.empty() || inputs_.size() != errors_.size()) {
    throw DimensionError("curvature needs matching non-empty input and error lists");
  }
  if (group_size_ < 1 || col_scale_.size() % group_size_ != 0) {
    throw DimensionError("curvature column count is not a multiple of the group size");
  }
  std::vector<LayerShape> shapes;
  for (std::size_t k = 0; k < inputs_.size(); ++k) {
    if (inputs_[k].cols() != col_scale_.size() || errors_[k].cols() != col_scale_.size()) {
      throw DimensionError("curvature layer " + std::to_string(k) + " has " + std::to_string(inputs_[k].cols()) +
                           " columns, expected " + std::to_string(col_scale_.size()));
    }
    shapes.push_back({errors_[k].rows(), inputs_[k].rows()});
  }
  layout_ = FlatLayout(std::move(shapes));
}

ImplicitCurvature ImplicitCurvature::layer(std::size_t k) const {
  return ImplicitCurvature({inputs_.at(k)}, {errors_.at(k)}, col_scale_, mode_, group_size_);
}

Mat gram(const ImplicitCurvature& curv, const std::optional<Vec>& layer_weights) {
  const Index d = curv.num_columns();
  if (layer_weights && layer_weights->size() != static_cast<Index>(curv.num_layers())) {
    throw DimensionError("gram: one weight per layer required");
  }
  Mat total = Mat::Zero(d, d);
  for (std::size_t k = 0; k < curv.num_layers(); ++k) {
    const double weight = layer_weights ? (*layer_weights)(static_cast<Index>(k)) : 1.0;
    Mat aa = curv.inputs(k).transpose() * curv.inputs(k);
    Mat ee = curv.errors(k).transpose() * curv.errors(k);
    total.noalias() += weight * aa.cwiseProduct(ee);
  }
  const Vec& s = curv.col_scale();
  return s.asDiagonal() * total * s.asDiagonal();
}

Vec g_transpose_vec(const ImplicitCurvature& curv, const Vec& u) {
  if (u.size() != curv.num_params()) {
    throw DimensionError("g_transpose_vec: vector has length " + std::to_string(u.size()) + ", expected " +
                         std::to_string(curv.num_params()));
  }
  Vec v = Vec::Zero(curv.num_columns());
  for (std::size_t k = 0; k < curv.num_layers(); ++k) {
    const Mat projected = curv.layout().block(u, k) * curv.inputs(k);
    v += projected.cwiseProduct(curv.errors(k)).colwise().sum().transpose();
  }
  return v.cwiseProduct(curv.col_scale());
}

Vec g_lincomb(const ImplicitCurvature& curv, const Vec& w) {
  if (w.size() != curv.num_columns()) {
    throw DimensionError("g_lincomb: weight vector has length " + std::to_string(w.size()) + ", expected " +
                         std::to_string(curv.num_columns()));
  }
  const Vec sw = w.cwiseProduct(curv.col_scale());
  Vec out(curv.num_params());
  for (std::size_t k = 0; k < curv.num_layers(); ++k) {
    curv.layout().block(out, k) = (curv.errors(k) * sw.asDiagonal()) * curv.inputs(k).transpose();
  }
  return out;
}

Vec natural_gradient(const ImplicitCurvature& curv, const Vec& u, double damping) {
  require_positive_damping(damping);
  const Vec v = g_transpose_vec(curv, u);
  Mat inner = gram(curv) / damping;
  inner.diagonal().array() += 1.0;
  const SpdFactor factor(std::move(inner));
  const Vec w = factor.solve(v);
  return u / damping - g_lincomb(curv, w) / (damping * damping);
}

Vec natural_gradient_blockdiag(const ImplicitCurvature& curv, const Vec& u, double damping) {
  return natural_gradient_blockdiag(curv, u, damping, SolveRoute::kWoodbury);
}

Mat fisher_matrix(const ImplicitCurvature& curv) {
  const Index n = curv.num_params();
  const Index group = curv.group_size();
  const Index groups = curv.num_columns() / group;
  const FlatLayout& layout = curv.layout();
  const Vec& s = curv.col_scale();

  std::vector<Mat> reps;
  std::vector<Mat> scaled_errors;
  for (std::size_t k = 0; k < curv.num_layers(); ++k) {
    reps.push_back(group_representatives(curv.inputs(k), group));
    scaled_errors.push_back(curv.errors(k) * s.asDiagonal());
  }

  Mat f(n, n);
  for (std::size_t k = 0; k < curv.num_layers(); ++k) {
    const Index rows_k = layout.shape(k).rows;
    const Index cols_k = layout.shape(k).cols;
    for (std::size_t l = k; l < curv.num_layers(); ++l) {
      const Index rows_l = layout.shape(l).rows;
      const Index cols_l = layout.shape(l).cols;
      Mat h(groups, rows_l * cols_l);
      for (Index p = 0; p < rows_k; ++p) {
        // weights(g, r) = Σ_{i in group g} s_i² e_k[p]_i e_l[r]_i
        const Mat per_column = scaled_errors[l].transpose().array().colwise() *
                               scaled_errors[k].row(p).transpose().array();
        Mat weights = Mat::Zero(groups, rows_l);
        for (Index g = 0; g < groups; ++g) weights.row(g) = per_column.middleRows(g * group, group).colwise().sum();
        for (Index r = 0; r < rows_l; ++r) {
          h.middleCols(r * cols_l, cols_l) = weights.col(r).asDiagonal() * reps[l].transpose();
        }
        f.block(layout.offset(k) + p * cols_k, layout.offset(l), cols_k, rows_l * cols_l).noalias() = reps[k] * h;
      }
      if (l != k) {
        f.block(layout.offset(l), layout.offset(k), layout.shape(l).size(), layout.shape(k).size()) =
            f.block(layout.offset(k), layout.offset(l), layout.shape(k).size(), layout.shape(l).size()).transpose();
      }
    }
  }
  return f;
}

Vec natural_gradient_primal(const ImplicitCurvature& curv, const Vec& u, double damping) {
  require_positive_damping(damping);
  if (u.size() != curv.num_params()) throw DimensionError("natural_gradient_primal: vector length mismatch");
  Mat system = fisher_matrix(curv);
  system.diagonal().array() += damping;
  return SpdFactor(std::move(system)).solve(u);
}

Vec natural_gradient(const ImplicitCurvature& curv, const Vec& u, double damping, SolveRoute route) {
  if (route == SolveRoute::kAuto) {
    route = curv.num_columns() <= curv.num_params() ? SolveRoute::kWoodbury : SolveRoute::kPrimal;
  }
  return route == SolveRoute::kWoodbury ? natural_gradient(curv, u, damping) : natural_gradient_primal(curv, u, damping);
}

Vec natural_gradient_blockdiag(const ImplicitCurvature& curv, const Vec& u, double damping, SolveRoute route) {
  if (u.size() != curv.num_params()) throw DimensionError("natural_gradient_blockdiag: vector length mismatch");
  Vec out(u.size());
  for (std::size_t k = 0; k < curv.num_layers(); ++k) {
    const ImplicitCurvature block = curv.layer(k);
    const Index len = curv.layout().shape(k).size();
    const Vec part = u.segment(curv.layout().offset(k), len);
    out.segment(curv.layout().offset(k), len) = natural_gradient(block, part, damping, route);
  }
  return out;
}

ImplicitCurvature curvature_from_trace(const BatchTrace& trace) {
  if (trace.sampled_errors.size() != trace.inputs.size()) {
    throw std::invalid_argument("curvature_from_trace: trace has no sampled errors");
  }
  return ImplicitCurvature(trace.inputs, trace.sampled_errors, trace.col_weights, FisherMode::kMonteCarlo, 1);
}

ImplicitCurvature build_curvature(const Network& net, const Mat& inputs, FisherMode mode, std::uint64_t seed) {
  BatchTrace trace = forward(net, inputs);
  if (mode == FisherMode::kMonteCarlo) {
    backward_sampled(net, trace, sample_labels(trace.outputs(), net.loss_kind(), seed));
    return curvature_from_trace(trace);
  }
  if (net.loss_kind() != LossKind::kCrossEntropy) {
    throw std::invalid_argument("Full Fisher requires an enumerable (classification) likelihood");
  }
  const Index n = inputs.cols();
  const Index classes = net.output_dim();
  const Mat probs = softmax(trace.outputs());

  auto expand = [&](const Mat& m) {
    Mat out(m.rows(), n * classes);
    for (Index i = 0; i < n; ++i) out.middleCols(i * classes, classes) = m.col(i).replicate(1, classes);
    return out;
  };
  BatchTrace expanded;
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    expanded.inputs.push_back(expand(trace.inputs[k]));
    expanded.preacts.push_back(expand(trace.preacts[k]));
  }
  Mat output_error = expand(probs);
  Vec scale(n * classes);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Index i = 0; i < n; ++i) {
    for (Index y = 0; y < classes; ++y) {
      output_error(y, i * classes + y) -= 1.0;
      scale(i * classes + y) = std::sqrt(probs(y, i) * inv_n);
    }
  }
  std::vector<Mat> errors = backpropagate(net, expanded, std::move(output_error));
  return ImplicitCurvature(std::move(expanded.inputs), std::move(errors), std::move(scale), FisherMode::kFull, classes);
}

}  // namespace curvlab
