#include "curvlab/validation.hpp"

#include "curvlab/harness.hpp"
#include "curvlab/kfac.hpp"
#include "curvlab/laplace.hpp"
#include "curvlab/oracle.hpp"
#include "curvlab/random.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace curvlab {

namespace {

using oracle::Tolerances;

Mat random_matrix(Rng& rng, Index rows, Index cols) {
  Mat m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  return m;
}

Vec random_vec(Rng& rng, Index n) { return random_matrix(rng, n, 1).col(0); }

Index uniform_int(Rng& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.below(static_cast<std::size_t>(hi - lo + 1)));
}

class Recorder {
 public:
  void add(const std::string& name, double deviation, double tolerance) {
    auto [it, inserted] = index_.try_emplace(name, results_.size());
    if (inserted) results_.push_back(CheckResult{name, 0, 0.0, tolerance});
    CheckResult& r = results_[it->second];
    ++r.cases;
    // NaN must count as a failure, so compare through !(a <= b)
    if (!(deviation <= r.max_deviation)) r.max_deviation = std::isnan(deviation) ? HUGE_VAL : deviation;
  }
  std::vector<CheckResult> take() { return std::move(results_); }

 private:
  std::map<std::string, std::size_t> index_;
  std::vector<CheckResult> results_;
};

double max_abs(const Mat& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace

std::vector<TinyInstance> tiny_instances(std::uint64_t seed, std::size_t count) {
  std::vector<TinyInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "tiny-instance", i));
    const std::size_t layers = 1 + i % 3;
    const LossKind loss = i % 2 == 0 ? LossKind::kCrossEntropy : LossKind::kSquaredError;
    const Activation act = (i / 2) % 2 == 0 ? Activation::kTanh : Activation::kRelu;
    const bool full = loss == LossKind::kCrossEntropy && i % 4 == 0;

    std::vector<Index> sizes{uniform_int(rng, 2, 8)};
    for (std::size_t k = 1; k < layers; ++k) sizes.push_back(uniform_int(rng, 1, 8));
    sizes.push_back(uniform_int(rng, 2, loss == LossKind::kCrossEntropy ? 5 : 8));
    const Index classes = sizes.back();
    const Index d = full ? std::max<Index>(1, uniform_int(rng, 1, 20) / classes) : uniform_int(rng, 1, 20);

    Network net = Network::kaiming(sizes, act, loss, derive_seed(seed, "tiny-net", i));
    Mat inputs = random_matrix(rng, sizes.front(), d);
    Targets targets;
    if (loss == LossKind::kCrossEntropy) {
      std::vector<int> labels;
      for (Index j = 0; j < d; ++j) labels.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(classes))));
      targets = Targets::from_classes(std::move(labels));
    } else {
      targets = Targets::from_values(random_matrix(rng, classes, d));
    }
    BatchTrace trace = forward(net, inputs);
    std::vector<Mat> grads = backward(net, trace, targets);
    ImplicitCurvature curv = [&] {
      if (full) return build_curvature(net, inputs, FisherMode::kFull);
      backward_sampled(net, trace, sample_labels(trace.outputs(), loss, derive_seed(seed, "tiny-labels", i)));
      return curvature_from_trace(trace);
    }();
    const double damping = std::pow(10.0, -2.0 + 3.0 * rng.uniform());
    Vec u = random_vec(rng, net.num_params());

    std::string label = std::to_string(layers) + "-layer " + std::string(to_string(loss)) + " " +
                        (full ? "full" : "mc") + " D=" + std::to_string(curv.num_columns());
    out.push_back(TinyInstance{std::move(label), std::move(net), std::move(inputs), std::move(targets),
                               std::move(trace), std::move(grads), std::move(curv), std::move(u), damping});
  }
  return out;
}

std::vector<CheckResult> validate_oracle(const ValidationOptions& options) {
  Recorder rec;
  const auto instances = tiny_instances(options.seed, options.instances);
  for (std::size_t idx = 0; idx < instances.size(); ++idx) {
    const TinyInstance& inst = instances[idx];
    Rng rng(derive_seed(options.seed, "validate", idx));
    const ImplicitCurvature& curv = inst.curv;
    const FlatLayout& layout = curv.layout();
    const oracle::DenseBundle dense = oracle::assemble(curv);
    const double lambda = inst.damping;

    // Factored products.
    rec.add("gram", relative_deviation(gram(curv), dense.G.transpose() * dense.G), Tolerances::kProduct);
    rec.add("g_transpose_vec", relative_deviation(g_transpose_vec(curv, inst.u), dense.G.transpose() * inst.u),
            Tolerances::kProduct);
    const Vec w = random_vec(rng, curv.num_columns());
    Vec gw = g_lincomb(curv, w);
    if (options.flip_lincomb_sign) gw = -gw;
    rec.add("g_lincomb", relative_deviation(gw, dense.G * w), Tolerances::kProduct);
    rec.add("fisher_assembly", relative_deviation(fisher_matrix(curv), dense.F), Tolerances::kProduct);

    // Natural-gradient solves.
    const Vec reference = oracle::dense_natural_gradient(dense.F, inst.u, lambda);
    rec.add("woodbury_natural_gradient",
            relative_deviation(natural_gradient(curv, inst.u, lambda, SolveRoute::kWoodbury), reference),
            Tolerances::kSolve);
    rec.add("primal_natural_gradient",
            relative_deviation(natural_gradient(curv, inst.u, lambda, SolveRoute::kPrimal), reference),
            Tolerances::kSolve);
    rec.add("blockdiag_natural_gradient",
            relative_deviation(natural_gradient_blockdiag(curv, inst.u, lambda),
                               oracle::dense_blockdiag_natural_gradient(dense, layout, inst.u, lambda)),
            Tolerances::kSolve);

    // Kronecker factorizations, per layer.
    for (std::size_t k = 0; k < layout.num_layers(); ++k) {
      const Mat sigma_a = activation_factor(curv.inputs(k));
      const Mat sigma_e = error_factor(curv.errors(k), curv.col_scale());
      const Mat& grad = inst.grads[k];
      const Index rows = grad.rows();
      const Index cols = grad.cols();
      const DampingSplit split = damping_split(lambda, sigma_a.trace(), sigma_e.trace(), rows, cols);

      rec.add("damping_split_product", std::abs(split.act * split.err - lambda) / lambda, Tolerances::kDampingProduct);

      const Mat heuristic = oracle::dense_kron_curvature(sigma_a, sigma_e, oracle::KronDamping::kHeuristic, 0.0,
                                                         split.act, split.err);
      const Mat ia = Mat::Identity(cols, cols);
      const Mat ie = Mat::Identity(rows, rows);
      Mat expansion = oracle::kron(sigma_e, sigma_a) + split.err * oracle::kron(ie, sigma_a) +
                      split.act * oracle::kron(sigma_e, ia);
      expansion.diagonal().array() += split.act * split.err;
      rec.add("kfac_heuristic_expansion", relative_deviation(expansion, heuristic), Tolerances::kKronAlgebra);

      const Mat inv_a = damped_inverse(sigma_a, split.act);
      const Mat inv_e = damped_inverse(sigma_e, split.err);
      rec.add("kfac_heuristic_direction",
              relative_deviation(kfac_heuristic_direction(grad, inv_a, inv_e), oracle::dense_kron_solve(heuristic, grad)),
              Tolerances::kKronAlgebra);

      const Mat standard =
          oracle::dense_kron_curvature(sigma_a, sigma_e, oracle::KronDamping::kStandard, lambda);
      rec.add("kfac_standard_eigenbasis",
              relative_deviation(kfac_standard_direction(grad, eigenbasis(sigma_a), eigenbasis(sigma_e), lambda),
                                 oracle::dense_kron_solve(standard, grad)),
              Tolerances::kSolve);

      // FOOF against its normal equations and objective gradient, using the
      // batch statistics of the loss being minimized.
      const Mat& a = inst.trace.inputs[k];
      const Mat& e = inst.trace.errors[k];
      const double d = static_cast<double>(a.cols());
      const Mat batch_sigma_a = activation_factor(a);
      const double eta = 0.1 + 0.9 * rng.uniform();
      const Mat delta = -eta * foof_direction(grad, damped_inverse(batch_sigma_a, lambda));
      const Mat normal = delta * (batch_sigma_a + lambda * ia) + eta * grad;
      rec.add("foof_normal_equations", max_abs(normal), Tolerances::kNormalEquations);
      const Mat a_tilde = a / std::sqrt(d);
      const Mat e_tilde = -std::sqrt(d) * e;
      const Mat objective_grad = (delta * a_tilde - eta * e_tilde) * a_tilde.transpose() + lambda * delta;
      rec.add("foof_objective_gradient", max_abs(objective_grad), Tolerances::kObjectiveGradient);

      // KFAC tends to FOOF when the error-side damping dominates.
      const double big = 1e8 * std::max(1.0, sigma_e.norm());
      const Mat kfac_limit = big * kfac_heuristic_direction(grad, inv_a, damped_inverse(sigma_e, big));
      const Mat foof = foof_direction(grad, inv_a);
      const auto cos = layer_alignment(kfac_limit, foof, &sigma_a, split.act);
      rec.add("kfac_foof_limit", cos ? 1.0 - *cos : 0.0, 1e-3);
    }

    // Laplace sampling algebra: samples are x = y - V U⁻¹ (Vᵀ y + z); its
    // covariance must equal I - V U⁻¹ Vᵀ and map back to (Λ + D F)⁻¹.
    {
      const Index n = curv.num_params();
      const Index d = curv.num_columns();
      Vec prior(n);
      if (idx % 2 == 0) {
        for (std::size_t k = 0; k < layout.num_layers(); ++k) {
          prior.segment(layout.offset(k), layout.shape(k).size()).setConstant(0.5 + 1.5 * rng.uniform());
        }
      } else {
        for (Index i = 0; i < n; ++i) prior(i) = 0.5 + 1.5 * rng.uniform();
      }
      const double data_count = 1.0 + std::floor(19.0 * rng.uniform());
      const LaplaceSampler sampler(LaplaceSpec{prior, curv, data_count, 1});
      const Vec inv_sqrt = prior.cwiseSqrt().cwiseInverse();
      Mat v(n, d);
      for (Index j = 0; j < d; ++j) {
        v.col(j) = std::sqrt(data_count) * inv_sqrt.cwiseProduct(g_lincomb(curv, Vec::Unit(d, j)));
      }
      const Mat vu = v * sampler.u_inverse();
      Mat whitened = -vu * v.transpose();
      whitened.diagonal().array() += 1.0;
      Mat map(n, n + d);
      map << whitened, -vu;
      rec.add("laplace_covariance_identity", relative_deviation(map * map.transpose(), whitened),
              Tolerances::kLaplaceIdentity);
      rec.add("laplace_whitened_covariance",
              relative_deviation(whitened, oracle::dense_laplace_whitened_cov(prior, dense.G, data_count)),
              Tolerances::kLaplaceIdentity);
      const Mat posterior = inv_sqrt.asDiagonal() * whitened * inv_sqrt.asDiagonal();
      rec.add("laplace_posterior_covariance",
              relative_deviation(posterior, oracle::dense_laplace_cov(prior, dense.F, data_count)),
              Tolerances::kSolve);
    }

    // Backpropagated gradient against central differences.
    const Vec fd = oracle::finite_diff_grad(inst.net, inst.inputs, inst.targets);
    rec.add("finite_difference_gradient", relative_deviation(layout.flatten(inst.grads), fd),
            Tolerances::kFiniteDifference);
  }
  return rec.take();
}

}  // namespace curvlab
