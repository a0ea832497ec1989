#pragma once

// Finite-difference gradient oracle shared by the unit and acceptance suites.
// Central differences with step h, compared entrywise against analytic
// gradients at a relative tolerance (with a small absolute floor for entries
// that are numerically zero).

#include <cmath>
#include <cstddef>
#include <functional>

#include "calr/matrix.hpp"

namespace calr_test {

inline calr::Matrix fd_gradient(calr::Matrix& param,
                                const std::function<double()>& loss,
                                double h = 1e-5) {
  calr::Matrix grad(param.rows(), param.cols());
  for (size_t i = 0; i < param.size(); ++i) {
    double saved = param.data()[i];
    param.data()[i] = saved + h;
    double up = loss();
    param.data()[i] = saved - h;
    double down = loss();
    param.data()[i] = saved;
    grad.data()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

struct GradCompare {
  size_t checked = 0;
  size_t failed = 0;
  double max_rel_err = 0.0;

  void accumulate(const calr::Matrix& analytic, const calr::Matrix& numeric,
                  double rtol = 1e-3, double floor = 1e-8) {
    for (size_t i = 0; i < analytic.size(); ++i) {
      double a = analytic.data()[i];
      double n = numeric.data()[i];
      double denom = std::max({std::abs(a), std::abs(n), floor});
      double rel = std::abs(a - n) / denom;
      max_rel_err = std::max(max_rel_err, rel);
      ++checked;
      if (rel > rtol) ++failed;
    }
  }

  bool all_match() const { return checked > 0 && failed == 0; }
};

}  // namespace calr_test
