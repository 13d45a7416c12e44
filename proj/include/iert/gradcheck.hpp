#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "iert/parameters.hpp"

namespace iert {

/// Evaluates a scalar loss at the store's current values. When
/// `with_gradients` is true it must also accumulate analytic gradients into
/// the store (typically via Tape::backward).
using LossFunction = std::function<double(ParameterStore& store, bool with_gradients)>;

struct Coordinate {
  std::string name;
  std::size_t index = 0;
};

struct GradientCheckOptions {
  double epsilon = 1e-4;
  std::size_t samples = 200;
  std::uint64_t seed = 0;
  /// When non-empty, only these parameters are sampled.
  std::vector<std::string> only;
};

struct GradientCheckReport {
  double max_relative_error = 0.0;
  Coordinate worst;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares analytic gradients against central differences on sampled
/// coordinates. Coordinates are drawn round-robin over parameter tensors so
/// small tensors are not drowned out by large embedding tables. The
/// relative error of one coordinate is
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradientCheckReport finite_difference_check(const LossFunction& loss, ParameterStore& store,
                                            const GradientCheckOptions& options);

/// Same check over an explicit coordinate list.
GradientCheckReport finite_difference_check(const LossFunction& loss, ParameterStore& store,
                                            const std::vector<Coordinate>& coordinates,
                                            double epsilon);

}  // namespace iert
