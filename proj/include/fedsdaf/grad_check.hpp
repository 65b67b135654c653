#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fedsdaf/tensor.hpp"

namespace fedsdaf {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  // max relative error per leaf, in the order the leaves were given
  std::vector<std::pair<std::string, double>> per_leaf;
  bool ok(double tol) const { return max_rel_err < tol; }
};

// Compares reverse-mode gradients of the scalar `f()` against central
// differences, perturbing every coordinate of every named leaf in place.
// `f` must recompute from the leaves on each call.
GradCheckResult grad_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& leaves,
    double step = 1e-5);

// Same check, but raises NumericalError naming the offending coordinate
// when the worst relative error reaches `tol`.
void require_gradients(const std::function<Tensor()>& f,
                       const std::vector<std::pair<std::string, Tensor>>& leaves,
                       double step = 1e-5, double tol = 1e-4);

}  // namespace fedsdaf
