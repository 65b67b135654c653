#include "fedsdaf/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedsdaf/errors.hpp"

namespace fedsdaf {

GradCheckResult grad_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& leaves,
    double step) {
  for (const auto& [name, leaf] : leaves) {
    if (!leaf.requires_grad())
      throw ContractError("grad_check: leaf '" + name +
                          "' does not require gradients");
  }
  for (const auto& [name, leaf] : leaves) {
    Tensor t = leaf;
    t.zero_grad();
  }

  Tensor loss = f();
  backward(loss);

  // Snapshot analytic grads before finite differencing mutates anything.
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& [name, leaf] : leaves) analytic.push_back(leaf.grad());

  GradCheckResult result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li].second;
    std::vector<double>& values = leaf.mutable_data();
    double leaf_max = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      double saved = values[i];
      double plus, minus;
      {
        NoGradGuard ng;
        values[i] = saved + step;
        plus = f().value();
        values[i] = saved - step;
        minus = f().value();
      }
      values[i] = saved;
      double numeric = (plus - minus) / (2.0 * step);
      double a = analytic[li][i];
      if (!std::isfinite(a) || !std::isfinite(numeric))
        throw NumericalError("grad_check: non-finite gradient at " +
                             leaves[li].first + "[" + std::to_string(i) + "]");
      double rel =
          std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      leaf_max = std::max(leaf_max, rel);
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_leaf = leaves[li].first;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    result.per_leaf.emplace_back(leaves[li].first, leaf_max);
  }
  return result;
}

void require_gradients(const std::function<Tensor()>& f,
                       const std::vector<std::pair<std::string, Tensor>>& leaves,
                       double step, double tol) {
  GradCheckResult r = grad_check(f, leaves, step);
  if (!r.ok(tol)) {
    std::ostringstream os;
    os << "gradient mismatch at " << r.worst_leaf << "[" << r.worst_index
       << "]: analytic " << r.analytic << " vs numeric " << r.numeric
       << " (rel err " << r.max_rel_err << ", tol " << tol << ")";
    throw NumericalError(os.str());
  }
}

}  // namespace fedsdaf
