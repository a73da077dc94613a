#pragma once

#include "curvlab/curvature.hpp"
#include "curvlab/net.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace curvlab {

/// A small random problem: network, batch, the batch's forward/backward
/// trace and a Fisher factor built from it.
struct TinyInstance {
  std::string label;
  Network net;
  Mat inputs;
  Targets targets;
  BatchTrace trace;  // errors and grads of the mean loss
  std::vector<Mat> grads;
  ImplicitCurvature curv;
  Vec u;
  double damping = 1.0;
};

/// 1-3 layers, widths <= 8, D <= 20, both loss kinds, MC and Full Fisher.
std::vector<TinyInstance> tiny_instances(std::uint64_t seed = 7, std::size_t count = 16);

struct CheckResult {
  std::string name;
  std::size_t cases = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;

  bool passed() const { return cases > 0 && max_deviation <= tolerance; }
};

struct ValidationOptions {
  std::uint64_t seed = 7;
  std::size_t instances = 16;
  /// Negates the implicit G·w result before comparison (self-test of the
  /// validator: the g_lincomb check must then fail).
  bool flip_lincomb_sign = false;
};

/// Compares every implicit operation against the dense oracle on the tiny
/// instance matrix; one result per named check.
std::vector<CheckResult> validate_oracle(const ValidationOptions& options = {});

}  // namespace curvlab
