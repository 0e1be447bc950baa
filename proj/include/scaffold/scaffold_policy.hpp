#pragma once

// Practice-mode scaffolding policy.
//
// A GP g(p_pre, t_pre, pm, bpm) is trained to predict the utility of a
// practice unit,
//
//     u(a, u_mu) = (1 - a)(p_pre - p_post) + a(t_pre - t_post) - u_mu,
//
// and the policy recommends whichever practice mode has the larger predicted
// utility. The weights (a, u_mu) are chosen by Bayesian optimization so that
// the policy agrees with the teacher's recorded choices as often as possible.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "scaffold/dataset.hpp"
#include "scaffold/errors.hpp"
#include "scaffold/gp.hpp"
#include "scaffold/text.hpp"

namespace scaffold {

struct UtilityParams {
  double a = 0.5;     // weight of timing improvement, in [0,1]
  double u_mu = 0.0;  // mean utility, in [-1,1]

  bool operator==(const UtilityParams&) const = default;
};

inline void validate(const UtilityParams& p) {
  if (!(p.a >= 0.0 && p.a <= 1.0)) throw ValidationError("a", "must be in [0,1]");
  if (!(p.u_mu >= -1.0 && p.u_mu <= 1.0)) throw ValidationError("u_mu", "must be in [-1,1]");
}

inline double utility(const PracticeTuple& t, const UtilityParams& p) {
  return (1.0 - p.a) * (t.p_pre - t.p_post) + p.a * (t.t_pre - t.t_post) - p.u_mu;
}

// Column layout of the GP input: (p_pre, t_pre, pm, bpm). pm stays a raw 0/1
// indicator; the other three columns are z-scored.
inline constexpr int kInputDims = 4;
inline const std::vector<bool> kCategoricalColumns{false, false, true, false};

struct TrainingSet {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

inline TrainingSet build_training_set(const Dataset& d, const UtilityParams& p) {
  if (d.empty()) throw DataError("cannot build a training set from an empty dataset");
  const auto n = static_cast<Eigen::Index>(d.size());
  TrainingSet ts{Eigen::MatrixXd(n, kInputDims), Eigen::VectorXd(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = d.tuples[static_cast<std::size_t>(i)];
    ts.X(i, 0) = t.p_pre;
    ts.X(i, 1) = t.t_pre;
    ts.X(i, 2) = static_cast<double>(static_cast<int>(t.pm));
    ts.X(i, 3) = t.bpm;
    ts.y(i) = utility(t, p);
  }
  return ts;
}

// ---------------------------------------------------------------------------
// Recommendation
// ---------------------------------------------------------------------------

struct ModeEstimate {
  double mean = 0.0;
  double sd = 0.0;
};

struct Recommendation {
  PracticeMode chosen_pm = PracticeMode::kPitch;
  ModeEstimate pitch;
  ModeEstimate timing;
  bool tie = false;
};

inline constexpr double kTieTolerance = 1e-12;

/// Pitch wins ties (|difference of means| < 1e-12); ties are flagged.
inline Recommendation recommend(const gp::GPModel& model, double p_pre, double t_pre, double bpm) {
  const auto pitch = model.predict({p_pre, t_pre, 0.0, bpm});
  const auto timing = model.predict({p_pre, t_pre, 1.0, bpm});
  Recommendation r;
  r.pitch = {pitch.mean, pitch.sd()};
  r.timing = {timing.mean, timing.sd()};
  if (std::abs(timing.mean - pitch.mean) < kTieTolerance) {
    r.tie = true;
    r.chosen_pm = PracticeMode::kPitch;
  } else {
    r.chosen_pm = timing.mean > pitch.mean ? PracticeMode::kTiming : PracticeMode::kPitch;
  }
  return r;
}

/// Fraction of tuples where the recommended mode equals the teacher's.
inline double policy_accuracy(const gp::GPModel& model, const Dataset& d) {
  if (d.empty()) throw DataError("policy_accuracy on an empty dataset");
  std::size_t hits = 0;
  for (const auto& t : d.tuples)
    if (recommend(model, t.p_pre, t.t_pre, t.bpm).chosen_pm == t.pm) ++hits;
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Bayesian optimization of (a, u_mu)
// ---------------------------------------------------------------------------

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Expected improvement (maximization) of the surrogate at x over f_best.
inline double expected_improvement(const gp::GPModel& surrogate, std::span<const double> x, double f_best,
                                   double xi = 0.01) {
  const auto p = surrogate.predict(x);
  const double sigma = p.sd();
  if (!(sigma > 0.0)) return 0.0;
  const double gain = p.mean - f_best - xi;
  const double z = gain / sigma;
  return std::max(0.0, gain * normal_cdf(z) + sigma * normal_pdf(z));
}

struct BOIteration {
  int iteration = 0;  // 0-based; the initial design comes first
  UtilityParams params;
  double objective = 0.0;
  std::optional<double> acquisition;  // empty for initial-design points
  double best_so_far = 0.0;
};

struct BOTrace {
  std::vector<BOIteration> iterations;

  double best() const { return iterations.empty() ? 0.0 : iterations.back().best_so_far; }
};

struct ScaffoldOptions {
  int initial_design = 8;
  int folds = 3;
  int acquisition_grid = 101;  // points per axis
  double xi = 0.01;
  // kernel refits inside the cross-validated objective
  gp::FitOptions fold_fit = [] {
    gp::FitOptions o;
    o.restarts = 2;
    o.optimizer.max_evaluations = 600;
    o.optimizer.diameter_tol = 1e-4;
    return o;
  }();
  gp::FitOptions final_fit{};
  gp::FitOptions surrogate_fit{};
  bool parallel_folds = false;
  std::function<void(int completed, int budget)> progress;
};

struct ScaffoldResult {
  UtilityParams params;
  gp::GPModel model;
  BOTrace trace;
  gp::KernelFamily family = gp::KernelFamily::kRatQuad;
};

namespace policy_detail {

inline gp::FitOptions with_categorical(gp::FitOptions o) {
  o.categorical = kCategoricalColumns;
  return o;
}

/// Stratified k-fold labels: each mode is shuffled and dealt round-robin.
inline std::vector<int> fold_labels(const Dataset& d, int folds, std::uint64_t seed) {
  std::vector<int> label(d.size(), 0);
  std::mt19937_64 rng(seed);
  int next = 0;
  for (PracticeMode pm : {PracticeMode::kPitch, PracticeMode::kTiming}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.tuples[i].pm == pm) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) label[i] = next++ % folds;
  }
  return label;
}

inline std::vector<std::pair<double, double>> latin_hypercube(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> perm_a(static_cast<std::size_t>(n)), perm_u(static_cast<std::size_t>(n));
  std::iota(perm_a.begin(), perm_a.end(), 0);
  std::iota(perm_u.begin(), perm_u.end(), 0);
  std::shuffle(perm_a.begin(), perm_a.end(), rng);
  std::shuffle(perm_u.begin(), perm_u.end(), rng);
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < n; ++i) {
    const double a = (perm_a[static_cast<std::size_t>(i)] + unit(rng)) / n;
    const double u = (perm_u[static_cast<std::size_t>(i)] + unit(rng)) / n;
    pts.emplace_back(a, -1.0 + 2.0 * u);
  }
  return pts;
}

}  // namespace policy_detail

/// Mean held-out policy accuracy over the given fold labelling, refitting the
/// kernel hyperparameters on each training fold.
inline double cross_validated_accuracy(const Dataset& d, gp::KernelFamily family, const UtilityParams& params,
                                       const std::vector<int>& labels, int folds, std::uint64_t seed,
                                       const gp::FitOptions& fit_opts, bool parallel = false) {
  auto run_fold = [&](int f) {
    Dataset train, held;
    for (std::size_t i = 0; i < d.size(); ++i) (labels[i] == f ? held : train).tuples.push_back(d.tuples[i]);
    if (held.empty() || train.size() < 2) return std::optional<double>{};
    const TrainingSet ts = build_training_set(train, params);
    const auto model = gp::fit(ts.X, ts.y, family, seed + static_cast<std::uint64_t>(f),
                               policy_detail::with_categorical(fit_opts));
    return std::optional<double>{policy_accuracy(model, held)};
  };
  std::vector<std::optional<double>> scores(static_cast<std::size_t>(folds));
  if (parallel) {
    std::vector<std::future<std::optional<double>>> jobs;
    for (int f = 0; f < folds; ++f) jobs.push_back(std::async(std::launch::async, run_fold, f));
    for (int f = 0; f < folds; ++f) scores[static_cast<std::size_t>(f)] = jobs[static_cast<std::size_t>(f)].get();
  } else {
    for (int f = 0; f < folds; ++f) scores[static_cast<std::size_t>(f)] = run_fold(f);
  }
  double sum = 0.0;
  int used = 0;
  for (const auto& s : scores)
    if (s) sum += *s, ++used;
  if (used == 0) throw DataError("cross-validation produced no usable fold");
  return sum / used;
}

/// Bayesian optimization of (a, u_mu) against cross-validated policy
/// accuracy, followed by a final kernel fit on the whole dataset at the best
/// point found. The trace lists the Latin-hypercube design first, then one
/// entry per acquisition step.
inline ScaffoldResult optimize_scaffold(const Dataset& d, gp::KernelFamily family, int budget, std::uint64_t seed,
                                        const ScaffoldOptions& opts = {}) {
  if (budget < 1) throw DataError("BO budget must be >= 1");
  if (!d.has_both_modes())
    throw DataError("dataset contains only one practice mode; the policy cannot be trained to choose between modes");
  if (d.size() < static_cast<std::size_t>(opts.folds) + 1)
    throw DataError("dataset too small for " + std::to_string(opts.folds) + "-fold cross-validation");

  const auto labels = policy_detail::fold_labels(d, opts.folds, seed);
  const std::uint64_t fit_seed = seed * 0x9E3779B97F4A7C15ull + 1;
  auto objective = [&](const UtilityParams& p) {
    return cross_validated_accuracy(d, family, p, labels, opts.folds, fit_seed, opts.fold_fit, opts.parallel_folds);
  };

  ScaffoldResult result;
  result.family = family;
  auto record = [&](const UtilityParams& p, double value, std::optional<double> acq) {
    BOIteration it;
    it.iteration = static_cast<int>(result.trace.iterations.size());
    it.params = p;
    it.objective = value;
    it.acquisition = acq;
    it.best_so_far = result.trace.iterations.empty() ? value : std::max(result.trace.best(), value);
    result.trace.iterations.push_back(it);
  };

  for (const auto& [a, u] : policy_detail::latin_hypercube(opts.initial_design, seed ^ 0x5DEECE66Dull))
    record({a, u}, objective({a, u}), std::nullopt);

  const int g = opts.acquisition_grid;
  auto grid_point = [g](int i, int j) { return UtilityParams{static_cast<double>(i) / (g - 1), -1.0 + 2.0 * j / (g - 1)}; };

  for (int step = 0; step < budget; ++step) {
    const auto& its = result.trace.iterations;
    const auto n = static_cast<Eigen::Index>(its.size());
    Eigen::MatrixXd X(n, 2);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      X(i, 0) = its[static_cast<std::size_t>(i)].params.a;
      X(i, 1) = its[static_cast<std::size_t>(i)].params.u_mu;
      y(i) = its[static_cast<std::size_t>(i)].objective;
    }
    const auto surrogate =
        gp::fit(X, y, gp::KernelFamily::kMatern52, seed + 7919ull * static_cast<std::uint64_t>(step + 1), opts.surrogate_fit);
    const double f_best = result.trace.best();

    // grid maximization of EI, skipping points already evaluated
    double best_ei = -1.0;
    UtilityParams next{};
    for (int i = 0; i < g; ++i) {
      for (int j = 0; j < g; ++j) {
        const UtilityParams cand = grid_point(i, j);
        const bool seen = std::any_of(its.begin(), its.end(), [&](const BOIteration& it) { return it.params == cand; });
        if (seen) continue;
        const double x[2] = {cand.a, cand.u_mu};
        const double ei = expected_improvement(surrogate, x, f_best, opts.xi);
        if (ei > best_ei) {
          best_ei = ei;
          next = cand;
        }
      }
    }
    record(next, objective(next), best_ei);
    if (opts.progress) opts.progress(step + 1, budget);
  }

  // Earliest iteration attaining the best objective.
  const auto& its = result.trace.iterations;
  const auto best_it = std::find_if(its.begin(), its.end(), [&](const BOIteration& it) { return it.objective == result.trace.best(); });
  result.params = best_it->params;
  const TrainingSet ts = build_training_set(d, result.params);
  result.model = gp::fit(ts.X, ts.y, family, fit_seed, policy_detail::with_categorical(opts.final_fit));
  return result;
}

inline std::string trace_csv(const BOTrace& trace) {
  std::string out = "iter,a,u_mu,objective,best\n";
  for (const auto& it : trace.iterations) {
    out += std::to_string(it.iteration) + ',' + text::format_double(it.params.a) + ',' +
           text::format_double(it.params.u_mu) + ',' + text::format_double(it.objective) + ',' +
           text::format_double(it.best_so_far) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy maps
// ---------------------------------------------------------------------------

struct PolicyCell {
  double t_pre = 0.0;
  double p_pre = 0.0;
  Recommendation rec;
};

struct PolicyMap {
  double bpm = 0.0;
  int resolution = 0;
  std::vector<PolicyCell> cells;  // row-major: p_pre outer, t_pre inner

  const PolicyCell& at(int p_index, int t_index) const {
    return cells[static_cast<std::size_t>(p_index * resolution + t_index)];
  }
  std::size_t count(PracticeMode pm) const {
    return static_cast<std::size_t>(
        std::count_if(cells.begin(), cells.end(), [pm](const PolicyCell& c) { return c.rec.chosen_pm == pm; }));
  }
};

inline PolicyMap policy_map(const gp::GPModel& model, double bpm, int resolution = 41) {
  if (resolution < 2) throw ValidationError("resolution", "must be >= 2");
  if (!(bpm > 0.0)) throw ValidationError("bpm", "must be > 0");
  PolicyMap map;
  map.bpm = bpm;
  map.resolution = resolution;
  map.cells.reserve(static_cast<std::size_t>(resolution) * static_cast<std::size_t>(resolution));
  for (int pi = 0; pi < resolution; ++pi) {
    const double p = static_cast<double>(pi) / (resolution - 1);
    for (int ti = 0; ti < resolution; ++ti) {
      const double t = static_cast<double>(ti) / (resolution - 1);
      map.cells.push_back({t, p, recommend(model, p, t, bpm)});
    }
  }
  return map;
}

inline std::string policy_map_csv(const PolicyMap& map) {
  using text::format_double;
  std::string out = "t_pre,p_pre,chosen_pm,u_pitch,u_timing,sd_pitch,sd_timing\n";
  for (const auto& c : map.cells) {
    out += format_double(c.t_pre) + ',' + format_double(c.p_pre) + ',' +
           std::to_string(static_cast<int>(c.rec.chosen_pm)) + ',' + format_double(c.rec.pitch.mean) + ',' +
           format_double(c.rec.timing.mean) + ',' + format_double(c.rec.pitch.sd) + ',' +
           format_double(c.rec.timing.sd) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

// Where a model came from, so evaluation can rebuild the held-out split.
struct TrainingInfo {
  std::string dataset;
  std::uint64_t dataset_fingerprint = 0;
  std::size_t dataset_rows = 0;
  double test_fraction = 0.0;  // 0: trained on every row
  std::uint64_t seed = 0;
  int budget = 0;
  double cv_objective = 0.0;
};

struct ScaffoldModel {
  UtilityParams params;
  gp::GPModel gp;
  std::optional<TrainingInfo> training;
};

/// FNV-1a over the canonical CSV, used to recognise the training dataset.
inline std::uint64_t fingerprint(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : to_csv(d)) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline constexpr int kScaffoldModelSchema = 1;

inline nlohmann::json to_json(const ScaffoldModel& m) {
  nlohmann::json j{{"schema", kScaffoldModelSchema},
                   {"kind", "scaffold-model"},
                   {"params", {{"a", m.params.a}, {"u_mu", m.params.u_mu}}},
                   {"gp", gp::to_json(m.gp)}};
  if (m.training) {
    const auto& t = *m.training;
    // fingerprint stored as hex
    char fp[17];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(t.dataset_fingerprint));
    j["training"] = {{"dataset", t.dataset},   {"dataset_fingerprint", fp}, {"dataset_rows", t.dataset_rows},
                     {"test_fraction", t.test_fraction}, {"seed", t.seed}, {"budget", t.budget},
                     {"cv_objective", t.cv_objective}};
  }
  return j;
}

inline ScaffoldModel scaffold_model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("kind").get<std::string>() != "scaffold-model")
      throw ValidationError("kind", "expected 'scaffold-model'");
    if (j.at("schema").get<int>() != kScaffoldModelSchema) throw ValidationError("schema", "unsupported version");
    UtilityParams p{j.at("params").at("a").get<double>(), j.at("params").at("u_mu").get<double>()};
    validate(p);
    auto g = gp::model_from_json(j.at("gp"));
    if (g.dim() != static_cast<std::size_t>(kInputDims))
      throw ValidationError("gp", "scaffold model must have 4 input dimensions");
    std::optional<TrainingInfo> info;
    if (j.contains("training")) {
      const auto& t = j.at("training");
      TrainingInfo ti;
      ti.dataset = t.at("dataset").get<std::string>();
      ti.dataset_fingerprint = std::stoull(t.at("dataset_fingerprint").get<std::string>(), nullptr, 16);
      ti.dataset_rows = t.at("dataset_rows").get<std::size_t>();
      ti.test_fraction = t.at("test_fraction").get<double>();
      ti.seed = t.at("seed").get<std::uint64_t>();
      ti.budget = t.at("budget").get<int>();
      ti.cv_objective = t.at("cv_objective").get<double>();
      info = ti;
    }
    return {p, std::move(g), std::move(info)};
  } catch (const std::logic_error&) {
    throw ValidationError("training.dataset_fingerprint", "not a hex string");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("model", std::string("malformed scaffold model: ") + e.what());
  }
}

inline std::string dump_model(const ScaffoldModel& m) { return to_json(m).dump(2) + "\n"; }

inline ScaffoldModel parse_model(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("model file is not valid JSON: ") + e.what(), e.byte);
  }
  return scaffold_model_from_json(j);
}

}  // namespace scaffold
