#include "iert/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "iert/error.hpp"
#include "iert/rng.hpp"

namespace iert {

GradientCheckReport finite_difference_check(const LossFunction& loss, ParameterStore& store,
                                            const GradientCheckOptions& options) {
  std::vector<std::string> names = options.only.empty() ? store.names() : options.only;
  std::erase_if(names, [&](const std::string& n) { return store.value(n).size() == 0; });
  require(!names.empty(), ErrorKind::kContract, "finite_difference_check: nothing to sample");
  Rng rng(options.seed);
  std::vector<Coordinate> coordinates;
  coordinates.reserve(options.samples);
  for (std::size_t i = 0; i < options.samples; ++i) {
    const std::string& name = names[i % names.size()];
    coordinates.push_back({name, rng.index(store.value(name).size())});
  }
  return finite_difference_check(loss, store, coordinates, options.epsilon);
}

GradientCheckReport finite_difference_check(const LossFunction& loss, ParameterStore& store,
                                            const std::vector<Coordinate>& coordinates,
                                            double epsilon) {
  require(epsilon > 0.0 && std::isfinite(epsilon), ErrorKind::kContract,
          "finite_difference_check: epsilon must be positive and finite");
  store.zero_grad();
  const double base = loss(store, true);
  const double again = loss(store, false);
  require(base == again, ErrorKind::kNonDeterministic,
          "finite_difference_check: loss changed between identical evaluations (" +
              std::to_string(base) + " vs " + std::to_string(again) + ")");

  GradientCheckReport report;
  for (const Coordinate& c : coordinates) {
    Tensor& value = store.value(c.name);
    require(c.index < value.size(), ErrorKind::kBounds,
            "finite_difference_check: index " + std::to_string(c.index) + " outside '" + c.name + "'");
    const double analytic = store.grad(c.name)[c.index];
    const double original = value[c.index];
    value[c.index] = original + epsilon;
    const double plus = loss(store, false);
    value[c.index] = original - epsilon;
    const double minus = loss(store, false);
    value[c.index] = original;
    const double numeric = (plus - minus) / (2.0 * epsilon);
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    const double rel = std::fabs(analytic - numeric) / denom;
    report.coordinates += 1;
    if (report.coordinates == 1 || rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst = c;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  store.zero_grad();
  return report;
}

}  // namespace iert
