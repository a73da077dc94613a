#include "curvlab/oracle.hpp"

#include <string>

namespace curvlab::oracle {

Mat assemble_G(const ImplicitCurvature& curv) {
  const Index n = curv.num_params();
  const Index d = curv.num_columns();
  if (n * d > kMaxDenseEntries) {
    throw SizeGuardError("assemble_G: n·D = " + std::to_string(n * d) + " exceeds the dense limit");
  }
  Mat g = Mat::Zero(n, d);
  for (Index i = 0; i < d; ++i) {
    Index row = 0;
    for (std::size_t k = 0; k < curv.num_layers(); ++k) {
      const Mat& a = curv.inputs(k);
      const Mat& e = curv.errors(k);
      for (Index p = 0; p < e.rows(); ++p) {
        for (Index q = 0; q < a.rows(); ++q) g(row++, i) = curv.col_scale()(i) * e(p, i) * a(q, i);
      }
    }
  }
  return g;
}

DenseBundle assemble(const ImplicitCurvature& curv) {
  DenseBundle b;
  b.G = assemble_G(curv);
  b.F = b.G * b.G.transpose();
  const FlatLayout& layout = curv.layout();
  for (std::size_t k = 0; k < layout.num_layers(); ++k) {
    const Index off = layout.offset(k);
    const Index len = layout.shape(k).size();
    b.blocks.push_back(b.F.block(off, off, len, len));
  }
  return b;
}

Vec dense_natural_gradient(const Mat& fisher, const Vec& u, double damping) {
  Mat system = fisher;
  system.diagonal().array() += damping;
  return system.fullPivLu().solve(u);
}

Vec dense_blockdiag_natural_gradient(const DenseBundle& bundle, const FlatLayout& layout, const Vec& u,
                                     double damping) {
  Vec out(u.size());
  for (std::size_t k = 0; k < layout.num_layers(); ++k) {
    const Index off = layout.offset(k);
    const Index len = layout.shape(k).size();
    out.segment(off, len) = dense_natural_gradient(bundle.blocks[k], u.segment(off, len), damping);
  }
  return out;
}

Mat kron(const Mat& a, const Mat& b) {
  Mat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

Mat dense_kron_curvature(const Mat& sigma_act, const Mat& sigma_err, KronDamping mode, double damping,
                         double act_damping, double err_damping) {
  if (mode == KronDamping::kHeuristic) {
    const Mat a = sigma_act + act_damping * Mat::Identity(sigma_act.rows(), sigma_act.cols());
    const Mat e = sigma_err + err_damping * Mat::Identity(sigma_err.rows(), sigma_err.cols());
    return kron(e, a);
  }
  Mat c = kron(sigma_err, sigma_act);
  if (mode == KronDamping::kStandard) c.diagonal().array() += damping;
  return c;
}

Mat dense_kron_solve(const Mat& curvature, const Mat& grad) {
  Vec g(grad.size());
  for (Index p = 0; p < grad.rows(); ++p)
    for (Index q = 0; q < grad.cols(); ++q) g(p * grad.cols() + q) = grad(p, q);
  const Vec x = curvature.fullPivLu().solve(g);
  Mat out(grad.rows(), grad.cols());
  for (Index p = 0; p < grad.rows(); ++p)
    for (Index q = 0; q < grad.cols(); ++q) out(p, q) = x(p * grad.cols() + q);
  return out;
}

Vec finite_diff_grad(const Network& net, const Mat& inputs, const Targets& targets, double eps) {
  const Vec w0 = net.flat_weights();
  Vec grad(w0.size());
  Network probe = net;
  for (Index i = 0; i < w0.size(); ++i) {
    Vec w = w0;
    w(i) = w0(i) + eps;
    probe.set_flat_weights(w);
    const double up = loss(probe, inputs, targets);
    w(i) = w0(i) - eps;
    probe.set_flat_weights(w);
    const double down = loss(probe, inputs, targets);
    grad(i) = (up - down) / (2.0 * eps);
  }
  return grad;
}

Mat dense_laplace_cov(const Vec& prior_diag, const Mat& fisher, double data_count) {
  Mat precision = data_count * fisher;
  precision.diagonal() += prior_diag;
  return precision.fullPivLu().inverse();
}

Mat dense_laplace_whitened_cov(const Vec& prior_diag, const Mat& G, double data_count) {
  const Mat v = std::sqrt(data_count) * prior_diag.cwiseSqrt().cwiseInverse().asDiagonal() * G;
  Mat u = v.transpose() * v;
  u.diagonal().array() += 1.0;
  return Mat::Identity(v.rows(), v.rows()) - v * u.fullPivLu().inverse() * v.transpose();
}

}  // namespace curvlab::oracle
