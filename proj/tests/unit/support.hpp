#pragma once

#include "curvlab/curvature.hpp"
#include "curvlab/net.hpp"
#include "curvlab/random.hpp"

#include <gtest/gtest.h>

#include <cstdint>
#include <string>
#include <vector>

namespace curvlab::testing {

Mat random_matrix(Rng& rng, Index rows, Index cols);
Vec random_vec(Rng& rng, Index n);
Mat random_spd(Rng& rng, Index n, double floor = 0.1);

/// Random small problem drawn by a hand-rolled generator: layer count,
/// widths, batch size, loss and activation all vary with the case index.
struct Case {
  Network net;
  Mat inputs;
  Targets targets;
  std::string label;
};
Case random_case(std::uint64_t seed, Index max_width = 8, Index max_batch = 6, std::size_t max_layers = 3);

/// MC curvature from a fresh sampled backward pass on the case's batch.
ImplicitCurvature mc_curvature(const Case& c, std::uint64_t seed);

/// gtest predicate: max |a - b| <= tol * max(1, max |b|).
::testing::AssertionResult MatNear(const Mat& a, const Mat& b, double tol);

}  // namespace curvlab::testing
