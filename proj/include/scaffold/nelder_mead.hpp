#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace scaffold {

struct NelderMeadOptions {
  double diameter_tol = 1e-6;  // stop when every vertex is this close to the best one
  int max_evaluations = 2000;
  double initial_step = 0.5;
};

struct NelderMeadResult {
  std::vector<double> x;
  double value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
  bool converged = false;
};

/// Minimizes `f` with the standard Nelder-Mead simplex (reflection 1,
/// expansion 2, contraction 1/2, shrink 1/2). Non-finite objective values are
/// treated as +inf so the simplex walks away from them.
template <class F>
NelderMeadResult nelder_mead(F&& f, std::vector<double> x0, const NelderMeadOptions& opts = {}) {
  const std::size_t n = x0.size();
  NelderMeadResult res;
  auto eval = [&](const std::vector<double>& x) {
    ++res.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  std::vector<std::vector<double>> simplex(n + 1, x0);
  for (std::size_t i = 0; i < n; ++i) simplex[i + 1][i] += opts.initial_step;
  std::vector<double> values(n + 1);
  for (std::size_t i = 0; i <= n; ++i) values[i] = eval(simplex[i]);

  std::vector<std::size_t> order(n + 1);
  std::vector<double> centroid(n), trial(n), trial2(n);
  auto point = [&](double t, const std::vector<double>& worst, std::vector<double>& out) {
    for (std::size_t j = 0; j < n; ++j) out[j] = centroid[j] + t * (worst[j] - centroid[j]);
  };

  while (true) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    const std::size_t best = order.front(), worst = order.back();
    const std::size_t second = n > 0 ? order[n - 1] : best;

    double diameter = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) d2 += (simplex[i][j] - simplex[best][j]) * (simplex[i][j] - simplex[best][j]);
      diameter = std::max(diameter, std::sqrt(d2));
    }
    if (diameter < opts.diameter_tol) {
      res.converged = true;
      break;
    }
    if (res.evaluations >= opts.max_evaluations || n == 0) break;

    std::fill(centroid.begin(), centroid.end(), 0.0);
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == worst) continue;
      for (std::size_t j = 0; j < n; ++j) centroid[j] += simplex[i][j] / static_cast<double>(n);
    }

    point(-1.0, simplex[worst], trial);
    const double fr = eval(trial);
    if (fr < values[best]) {
      point(-2.0, simplex[worst], trial2);
      const double fe = eval(trial2);
      if (fe < fr) {
        simplex[worst] = trial2;
        values[worst] = fe;
      } else {
        simplex[worst] = trial;
        values[worst] = fr;
      }
      continue;
    }
    if (fr < values[second]) {
      simplex[worst] = trial;
      values[worst] = fr;
      continue;
    }
    // Outside contraction when the reflection beat the worst point, inside otherwise.
    const bool outside = fr < values[worst];
    point(outside ? -0.5 : 0.5, simplex[worst], trial2);
    const double fc = eval(trial2);
    if (fc < (outside ? fr : values[worst])) {
      simplex[worst] = trial2;
      values[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i <= n; ++i) {
      if (i == best) continue;
      for (std::size_t j = 0; j < n; ++j) simplex[i][j] = simplex[best][j] + 0.5 * (simplex[i][j] - simplex[best][j]);
      values[i] = eval(simplex[i]);
    }
  }

  const auto best = static_cast<std::size_t>(std::min_element(values.begin(), values.end()) - values.begin());
  res.x = simplex[best];
  res.value = values[best];
  return res;
}

}  // namespace scaffold
