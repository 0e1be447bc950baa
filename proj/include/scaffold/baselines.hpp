#pragma once

// Regression baselines for practice-mode selection: an OLS utility model with
// practice-mode interactions (optionally with tempo), a grid search over the
// utility weight a, a logistic-regression mode classifier fitted by IRLS, and
// the published fixed rule.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "scaffold/dataset.hpp"
#include "scaffold/errors.hpp"
#include "scaffold/scaffold_policy.hpp"

namespace scaffold::baselines {

// ---------------------------------------------------------------------------
// Shared accuracy interface
// ---------------------------------------------------------------------------

template <class P>
concept ModePredictor = std::invocable<const P&, const PracticeTuple&> &&
                        std::same_as<std::invoke_result_t<const P&, const PracticeTuple&>, PracticeMode>;

/// Fraction of tuples whose predicted mode equals the teacher's mode.
template <ModePredictor P>
double selection_accuracy(const P& predictor, const Dataset& d) {
  if (d.empty()) throw DataError("selection_accuracy on an empty dataset");
  std::size_t hits = 0;
  for (const auto& t : d.tuples)
    if (predictor(t) == t.pm) ++hits;
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

/// Adapts a fitted GP to the shared predictor interface.
inline auto gp_predictor(const gp::GPModel& model) {
  return [&model](const PracticeTuple& t) { return recommend(model, t.p_pre, t.t_pre, t.bpm).chosen_pm; };
}

// ---------------------------------------------------------------------------
// Linear utility model
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& linear_column_names() {
  static const std::vector<std::string> names{"intercept", "pm", "t_pre", "p_pre", "pm*t_pre", "pm*p_pre", "bpm"};
  return names;
}

struct LinearModel {
  std::vector<double> coefficients;  // b1..b6 (+ b7 for tempo)
  double r_squared = 0.0;
  bool includes_bpm = false;

  double predict(PracticeMode pm, double t_pre, double p_pre, double bpm) const {
    const double m = static_cast<double>(static_cast<int>(pm));
    double u = coefficients[0] + coefficients[1] * m + coefficients[2] * t_pre + coefficients[3] * p_pre +
               coefficients[4] * m * t_pre + coefficients[5] * m * p_pre;
    if (includes_bpm) u += coefficients[6] * bpm;
    return u;
  }

  /// Mode with the larger predicted utility; pitch wins ties.
  PracticeMode select(const PracticeTuple& t) const {
    const double up = predict(PracticeMode::kPitch, t.t_pre, t.p_pre, t.bpm);
    const double ut = predict(PracticeMode::kTiming, t.t_pre, t.p_pre, t.bpm);
    return ut > up ? PracticeMode::kTiming : PracticeMode::kPitch;
  }

  PracticeMode operator()(const PracticeTuple& t) const { return select(t); }
};

inline Eigen::MatrixXd linear_design(const Dataset& d, bool include_bpm) {
  const auto n = static_cast<Eigen::Index>(d.size());
  Eigen::MatrixXd A(n, include_bpm ? 7 : 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = d.tuples[static_cast<std::size_t>(i)];
    const double m = static_cast<double>(static_cast<int>(t.pm));
    A(i, 0) = 1.0;
    A(i, 1) = m;
    A(i, 2) = t.t_pre;
    A(i, 3) = t.p_pre;
    A(i, 4) = m * t.t_pre;
    A(i, 5) = m * t.p_pre;
    if (include_bpm) A(i, 6) = t.bpm;
  }
  return A;
}

inline double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& fitted) {
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  const double ss_res = (y - fitted).squaredNorm();
  // Constant targets: nothing to explain.
  if (ss_tot <= 1e-300) return 0.0;
  return 1.0 - ss_res / ss_tot;
}

/// OLS on an arbitrary design with a rank check that names dependent columns.
inline Eigen::VectorXd least_squares(const Eigen::MatrixXd& A, const Eigen::VectorXd& y,
                                     const std::vector<std::string>& names) {
  if (A.rows() < A.cols())
    throw DataError("linear regression needs at least " + std::to_string(A.cols()) + " rows, got " +
                    std::to_string(A.rows()));
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < A.cols()) {
    std::string dependent;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < A.cols(); ++k) {
      if (!dependent.empty()) dependent += ", ";
      dependent += names[static_cast<std::size_t>(perm(k))];
    }
    throw DataError("design matrix is rank deficient; linearly dependent column(s): " + dependent);
  }
  return qr.solve(y);
}

/// Utility targets use u_mu = 0; the intercept absorbs any offset.
inline LinearModel fit_linear(const Dataset& d, double a, bool include_bpm = false) {
  if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("a", "must be in [0,1]");
  const Eigen::MatrixXd A = linear_design(d, include_bpm);
  const TrainingSet ts = build_training_set(d, UtilityParams{a, 0.0});
  const Eigen::VectorXd b = least_squares(A, ts.y, linear_column_names());
  LinearModel m;
  m.coefficients.assign(b.data(), b.data() + b.size());
  m.includes_bpm = include_bpm;
  m.r_squared = r_squared(ts.y, A * b);
  return m;
}

struct GridSearchResult {
  std::vector<double> a_values;
  std::vector<double> accuracies;
  double best_accuracy = 0.0;
  std::vector<double> best_a;                           // every grid value attaining the maximum
  std::vector<std::pair<double, double>> best_intervals;  // maximal runs of consecutive best grid values
  LinearModel best_model;                                // model at the smallest best a
};

/// Fits the linear model for every a on {0, step, ..., 1} and scores argmax
/// selection against the teacher's choices on `eval` (in-sample when omitted).
inline GridSearchResult grid_search_a(const Dataset& train, double step = 0.01, bool include_bpm = false,
                                      const Dataset* eval = nullptr) {
  if (!(step > 0.0 && step <= 1.0)) throw ValidationError("step", "must be in (0,1]");
  const double count = 1.0 / step;
  const auto steps = static_cast<int>(std::lround(count));
  if (std::abs(count - steps) > 1e-9 * count) throw ValidationError("step", "must divide 1");
  const Dataset& target = eval ? *eval : train;

  GridSearchResult r;
  std::vector<LinearModel> models;
  for (int i = 0; i <= steps; ++i) {
    const double a = static_cast<double>(i) / steps;
    models.push_back(fit_linear(train, a, include_bpm));
    r.a_values.push_back(a);
    r.accuracies.push_back(selection_accuracy(models.back(), target));
  }
  r.best_accuracy = *std::max_element(r.accuracies.begin(), r.accuracies.end());
  bool in_run = false;
  for (std::size_t i = 0; i < r.a_values.size(); ++i) {
    const bool best = r.accuracies[i] == r.best_accuracy;
    if (best) {
      if (r.best_a.empty()) r.best_model = models[i];
      r.best_a.push_back(r.a_values[i]);
      if (!in_run) r.best_intervals.emplace_back(r.a_values[i], r.a_values[i]);
      r.best_intervals.back().second = r.a_values[i];
    }
    in_run = best;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Logistic mode classifier
// ---------------------------------------------------------------------------

struct LogisticModel {
  std::vector<double> coefficients;  // b1 (intercept), b2 (t_pre), b3 (p_pre) (+ b4 bpm)
  double threshold = 0.5;            // on the fitted probability
  bool includes_bpm = false;
  int iterations = 0;
  bool converged = false;
  bool separated = false;
  std::vector<double> log_likelihood_history;  // one entry per accepted iterate, starting at b = 0

  double linear_predictor(double t_pre, double p_pre, double bpm) const {
    double s = coefficients[0] + coefficients[1] * t_pre + coefficients[2] * p_pre;
    if (includes_bpm) s += coefficients[3] * bpm;
    return s;
  }
  double probability_timing(double t_pre, double p_pre, double bpm) const {
    return 1.0 / (1.0 + std::exp(-linear_predictor(t_pre, p_pre, bpm)));
  }
  PracticeMode operator()(const PracticeTuple& t) const {
    return probability_timing(t.t_pre, t.p_pre, t.bpm) > threshold ? PracticeMode::kTiming : PracticeMode::kPitch;
  }
};

inline Eigen::MatrixXd logistic_design(const Dataset& d, bool include_bpm) {
  const auto n = static_cast<Eigen::Index>(d.size());
  Eigen::MatrixXd A(n, include_bpm ? 4 : 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = d.tuples[static_cast<std::size_t>(i)];
    A(i, 0) = 1.0;
    A(i, 1) = t.t_pre;
    A(i, 2) = t.p_pre;
    if (include_bpm) A(i, 3) = t.bpm;
  }
  return A;
}

inline double logistic_log_likelihood(const Eigen::MatrixXd& A, const Eigen::VectorXd& y, const Eigen::VectorXd& b) {
  const Eigen::VectorXd eta = A * b;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + e^eta) computed stably
    const double softplus = eta(i) > 0 ? eta(i) + std::log1p(std::exp(-eta(i))) : std::log1p(std::exp(eta(i)));
    ll += y(i) * eta(i) - softplus;
  }
  return ll;
}

/// Maximum-likelihood logistic regression by IRLS (Newton) with step halving,
/// so the log-likelihood never decreases between accepted iterates. Stops when
/// max |delta b| < 1e-8 or after 100 iterations. Under complete separation the
/// likelihood has no maximizer; the capped iterate is returned and flagged.
inline LogisticModel fit_logistic(const Dataset& d, bool include_bpm = false, int max_iterations = 100,
                                  double tolerance = 1e-8) {
  if (!d.has_both_modes()) throw DataError("logistic regression needs both practice modes in the data");
  const Eigen::MatrixXd A = logistic_design(d, include_bpm);
  if (A.rows() < A.cols()) throw DataError("too few tuples for logistic regression");
  Eigen::VectorXd y(A.rows());
  for (Eigen::Index i = 0; i < y.size(); ++i)
    y(i) = d.tuples[static_cast<std::size_t>(i)].pm == PracticeMode::kTiming ? 1.0 : 0.0;

  LogisticModel m;
  m.includes_bpm = include_bpm;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(A.cols());
  double ll = logistic_log_likelihood(A, y, b);
  m.log_likelihood_history.push_back(ll);

  for (int it = 0; it < max_iterations; ++it) {
    m.iterations = it + 1;
    const Eigen::VectorXd eta = A * b;
    const Eigen::VectorXd p = (1.0 + (-eta.array()).exp()).inverse().matrix();
    const Eigen::VectorXd w = (p.array() * (1.0 - p.array())).max(1e-12).matrix();
    const Eigen::MatrixXd H = A.transpose() * w.asDiagonal() * A;
    const Eigen::VectorXd grad = A.transpose() * (y - p);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success) break;
    Eigen::VectorXd delta = ldlt.solve(grad);
    if (!delta.allFinite()) break;

    double scale = 1.0;
    Eigen::VectorXd next = b + delta;
    double next_ll = logistic_log_likelihood(A, y, next);
    for (int h = 0; h < 30 && !(next_ll >= ll); ++h) {
      scale *= 0.5;
      next = b + scale * delta;
      next_ll = logistic_log_likelihood(A, y, next);
    }
    if (!(next_ll >= ll)) {
      m.converged = true;  // no ascent direction left at machine precision
      break;
    }
    const double step = (scale * delta).cwiseAbs().maxCoeff();
    b = next;
    ll = next_ll;
    m.log_likelihood_history.push_back(ll);
    if (step < tolerance) {
      m.converged = true;
      break;
    }
  }
  m.coefficients.assign(b.data(), b.data() + b.size());

  // Complete separation: every training point on the correct side and the
  // iteration did not settle.
  const Eigen::VectorXd eta = A * b;
  bool all_correct = true;
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    if ((eta(i) > 0.0) != (y(i) > 0.5)) all_correct = false;
  m.separated = all_correct && (!m.converged || b.cwiseAbs().maxCoeff() > 1e3);
  return m;
}

// ---------------------------------------------------------------------------
// Published rule
// ---------------------------------------------------------------------------

inline constexpr double kPaperRuleIntercept = -0.283;
inline constexpr double kPaperRuleTiming = 8.124;
inline constexpr double kPaperRulePitch = -6.734;
inline constexpr double kPaperRuleThreshold = 0.5;

inline double paper_rule_score(double t_pre, double p_pre) {
  return kPaperRuleIntercept + kPaperRuleTiming * t_pre + kPaperRulePitch * p_pre;
}

/// The published linear decision rule: timing practice when the linear score
/// exceeds 0.5 (the score is compared directly, not passed through a sigmoid).
inline PracticeMode paper_rule(double t_pre, double p_pre) {
  return paper_rule_score(t_pre, p_pre) > kPaperRuleThreshold ? PracticeMode::kTiming : PracticeMode::kPitch;
}

inline PracticeMode paper_rule_predictor(const PracticeTuple& t) { return paper_rule(t.t_pre, t.p_pre); }

}  // namespace scaffold::baselines
