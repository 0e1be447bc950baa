#pragma once

// Side-by-side evaluation of a scaffold model and the regression baselines.
// Baselines are fitted on `train` and every method is scored on `eval`.

#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "scaffold/baselines.hpp"
#include "scaffold/dataset.hpp"
#include "scaffold/scaffold_policy.hpp"
#include "scaffold/text.hpp"

namespace scaffold {

struct EvalReport {
  std::string scope;  // "held-out" or "in-sample"
  std::size_t train_rows = 0;
  std::size_t eval_rows = 0;
  double chance = 0.5;
  double majority = 0.0;  // most frequent training mode, always
  UtilityParams params;
  double scaffold = 0.0;
  std::optional<double> linear;
  std::optional<double> linear_r_squared;  // in-sample, at the best a
  std::vector<std::pair<double, double>> linear_best_a;
  std::optional<double> logistic;
  std::optional<double> logistic_bpm;
  bool logistic_separated = false;
  bool logistic_bpm_separated = false;
  double paper_rule = 0.0;
  std::vector<std::string> notes;
};

inline EvalReport evaluate(const ScaffoldModel& model, const Dataset& train, const Dataset& eval, std::string scope) {
  if (train.empty() || eval.empty()) throw DataError("evaluation needs nonempty train and eval sets");
  EvalReport r;
  r.scope = std::move(scope);
  r.train_rows = train.size();
  r.eval_rows = eval.size();
  r.params = model.params;
  r.scaffold = policy_accuracy(model.gp, eval);

  const PracticeMode major = train.count(PracticeMode::kTiming) > train.count(PracticeMode::kPitch)
                                 ? PracticeMode::kTiming
                                 : PracticeMode::kPitch;
  r.majority = baselines::selection_accuracy([major](const PracticeTuple&) { return major; }, eval);
  r.paper_rule = baselines::selection_accuracy(baselines::paper_rule_predictor, eval);

  try {
    const auto grid = baselines::grid_search_a(train, 0.01, false, &eval);
    r.linear = grid.best_accuracy;
    r.linear_r_squared = grid.best_model.r_squared;
    r.linear_best_a = grid.best_intervals;
  } catch (const Error& e) {
    r.notes.push_back(std::string("linear baseline skipped: ") + e.what());
  }
  for (bool with_bpm : {false, true}) {
    try {
      const auto lm = baselines::fit_logistic(train, with_bpm);
      (with_bpm ? r.logistic_bpm : r.logistic) = baselines::selection_accuracy(lm, eval);
      (with_bpm ? r.logistic_bpm_separated : r.logistic_separated) = lm.separated;
    } catch (const Error& e) {
      r.notes.push_back(std::string(with_bpm ? "logistic+bpm" : "logistic") + " baseline skipped: " + e.what());
    }
  }
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json intervals = nlohmann::json::array();
  for (const auto& [lo, hi] : r.linear_best_a) intervals.push_back({lo, hi});
  return {{"scope", r.scope},
          {"train_rows", r.train_rows},
          {"eval_rows", r.eval_rows},
          {"chance", r.chance},
          {"majority", r.majority},
          {"scaffold", {{"accuracy", r.scaffold}, {"a", r.params.a}, {"u_mu", r.params.u_mu}}},
          {"linear", {{"accuracy", opt(r.linear)}, {"r_squared", opt(r.linear_r_squared)}, {"best_a", intervals}}},
          {"logistic", {{"accuracy", opt(r.logistic)}, {"separated", r.logistic_separated}}},
          {"logistic_bpm", {{"accuracy", opt(r.logistic_bpm)}, {"separated", r.logistic_bpm_separated}}},
          {"paper_rule", {{"accuracy", r.paper_rule}}},
          {"notes", r.notes}};
}

inline std::string format_table(const EvalReport& r) {
  auto pct = [](std::optional<double> v) {
    if (!v) return std::string("n/a");
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(1);
    s << 100.0 * *v << '%';
    return s.str();
  };
  std::ostringstream out;
  out << "scope: " << r.scope << " (" << r.eval_rows << " rows scored, baselines fit on " << r.train_rows << ")\n";
  auto row = [&](const std::string& name, std::optional<double> v, const std::string& extra = "") {
    out << "  ";
    out.width(22);
    out << std::left << name;
    out.width(8);
    out << std::right << pct(v);
    if (!extra.empty()) out << "  " << extra;
    out << '\n';
  };
  row("scaffold GP", r.scaffold,
      "a=" + text::format_double(r.params.a) + " u_mu=" + text::format_double(r.params.u_mu));
  std::string lin;
  if (r.linear_r_squared) {
    lin = "R2=" + text::format_double(r.linear_r_squared.value()) + " best a in";
    for (const auto& [lo, hi] : r.linear_best_a)
      lin += " [" + text::format_double(lo) + "," + text::format_double(hi) + "]";
  }
  row("linear argmax", r.linear, lin);
  row("logistic", r.logistic, r.logistic_separated ? "separated" : "");
  row("logistic + bpm", r.logistic_bpm, r.logistic_bpm_separated ? "separated" : "");
  row("fixed published rule", r.paper_rule);
  row("majority mode", r.majority);
  row("chance", r.chance);
  for (const auto& n : r.notes) out << "  note: " << n << '\n';
  return out.str();
}

}  // namespace scaffold
