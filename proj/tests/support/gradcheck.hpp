#pragma once

// Central finite-difference gradient checking. The loss callback must build a
// fresh tape and return the loss value; it is invoked repeatedly with
// perturbed parameter entries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "editproc/autodiff.hpp"

namespace editproc::testing {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_row = -1, worst_col = -1;
  double worst_analytic = 0.0, worst_numeric = 0.0;
  int coords_checked = 0;
};

// Checks d loss / d p for every listed parameter. Analytic gradients must
// already be accumulated in p->grad (zero_grad + one backward pass).
// max_coords_per_param < 0 checks every entry; otherwise a seeded random
// subset of that size per parameter.
inline GradCheckReport check_gradients(const std::vector<ad::Param*>& params,
                                       const std::function<double()>& loss_fn,
                                       double h = 1e-4,
                                       int max_coords_per_param = -1,
                                       uint64_t seed = 1234) {
  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (ad::Param* p : params) {
    const int rows = static_cast<int>(p->value.rows());
    const int cols = static_cast<int>(p->value.cols());
    std::vector<std::pair<int, int>> coords;
    if (max_coords_per_param < 0 || rows * cols <= max_coords_per_param) {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) coords.emplace_back(r, c);
    } else {
      std::uniform_int_distribution<int> rd(0, rows - 1), cd(0, cols - 1);
      for (int k = 0; k < max_coords_per_param; ++k) coords.emplace_back(rd(rng), cd(rng));
    }
    for (auto [r, c] : coords) {
      const double saved = p->value(r, c);
      p->value(r, c) = saved + h;
      const double up = loss_fn();
      p->value(r, c) = saved - h;
      const double down = loss_fn();
      p->value(r, c) = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad(r, c);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double rel = std::abs(numeric - analytic) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p->name;
        report.worst_row = r;
        report.worst_col = c;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

inline void randomize(ad::Param& p, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (int r = 0; r < p.value.rows(); ++r)
    for (int c = 0; c < p.value.cols(); ++c) p.value(r, c) = dist(rng);
}

}  // namespace editproc::testing
