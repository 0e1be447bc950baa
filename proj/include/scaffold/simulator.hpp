#pragma once

// Synthetic teacher/learner sessions with a planted teacher rule, used as
// ground truth where recorded sessions are unavailable.

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "scaffold/baselines.hpp"
#include "scaffold/dataset.hpp"
#include "scaffold/errors.hpp"

namespace scaffold::sim {

struct LearnerState {
  double pitch_err = 0.0;
  double timing_err = 0.0;
};

struct ImprovementModel {
  double direct_gain = 0.5;    // fractional reduction of the practised modality's error
  double transfer_gain = 0.1;  // fractional reduction of the other modality's error
  double noise_sd = 0.02;
  std::uint64_t seed = 0;
};

inline void validate(const ImprovementModel& m) {
  if (!(m.direct_gain > 0.0 && m.direct_gain < 1.0)) throw ValidationError("direct_gain", "must be in (0,1)");
  if (!(m.transfer_gain >= 0.0 && m.transfer_gain < 1.0)) throw ValidationError("transfer_gain", "must be in [0,1)");
  if (!(m.direct_gain > m.transfer_gain)) throw ValidationError("transfer_gain", "must be below direct_gain");
  if (!(m.noise_sd >= 0.0)) throw ValidationError("noise_sd", "must be >= 0");
}

struct TeacherRule {
  enum class Kind { kPublished, kLogistic, kAlways };
  Kind kind = Kind::kPublished;
  std::array<double, 3> coefficients{};  // intercept, t_pre, p_pre (kLogistic)
  PracticeMode always = PracticeMode::kPitch;

  static TeacherRule published() { return {}; }
  static TeacherRule logistic(std::array<double, 3> b) { return {Kind::kLogistic, b, PracticeMode::kPitch}; }
  static TeacherRule constant(PracticeMode pm) { return {Kind::kAlways, {}, pm}; }

  PracticeMode operator()(const LearnerState& s) const {
    switch (kind) {
      case Kind::kPublished:
        return baselines::paper_rule(s.timing_err, s.pitch_err);
      case Kind::kLogistic:
        return coefficients[0] + coefficients[1] * s.timing_err + coefficients[2] * s.pitch_err > 0.0
                   ? PracticeMode::kTiming
                   : PracticeMode::kPitch;
      case Kind::kAlways:
        return always;
    }
    return PracticeMode::kPitch;
  }
};

/// One practice unit: multiplicative reduction of both errors plus Gaussian
/// noise drawn from `rng`, clamped to [0,1].
inline LearnerState learner_step(const LearnerState& s, PracticeMode pm, const ImprovementModel& m,
                                 std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, m.noise_sd);
  const bool timing = pm == PracticeMode::kTiming;
  const double pitch_gain = timing ? m.transfer_gain : m.direct_gain;
  const double timing_gain = timing ? m.direct_gain : m.transfer_gain;
  const double eps_pitch = m.noise_sd > 0.0 ? noise(rng) : 0.0;
  const double eps_timing = m.noise_sd > 0.0 ? noise(rng) : 0.0;
  return {std::clamp(s.pitch_err * (1.0 - pitch_gain) + eps_pitch, 0.0, 1.0),
          std::clamp(s.timing_err * (1.0 - timing_gain) + eps_timing, 0.0, 1.0)};
}

inline constexpr double kSessionResetThreshold = 0.05;

/// Generates `n` tuples. A session starts from errors uniform in
/// [0.05, 0.9]^2 and ends once both errors fall below 0.05; the teacher picks
/// each mode by `rule` on the pre-practice state, the tempo uniformly from
/// `bpm_choices`.
inline Dataset simulate_dataset(const TeacherRule& rule, const ImprovementModel& model, std::size_t n,
                                const std::vector<double>& bpm_choices, std::uint64_t seed) {
  validate(model);
  if (n < 1) throw DataError("simulate_dataset needs n >= 1");
  if (bpm_choices.empty()) throw DataError("bpm_choices must not be empty");

  std::mt19937_64 rng(seed);
  std::mt19937_64 learner_rng(model.seed ^ (seed * 0x9E3779B97F4A7C15ull));
  std::uniform_real_distribution<double> start(0.05, 0.9);
  std::uniform_int_distribution<std::size_t> pick_bpm(0, bpm_choices.size() - 1);

  Dataset d;
  d.provenance = Provenance::kSynthetic;
  std::size_t session = 0;
  LearnerState state{start(rng), start(rng)};
  while (d.size() < n) {
    const PracticeMode pm = rule(state);
    const double bpm = bpm_choices[pick_bpm(rng)];
    const LearnerState post = learner_step(state, pm, model, learner_rng);
    d.tuples.push_back({"sim-subject-" + std::to_string(session), "sim-piece-" + std::to_string(session),
                        state.pitch_err, state.timing_err, pm, bpm, post.pitch_err, post.timing_err});
    state = post;
    if (state.pitch_err < kSessionResetThreshold && state.timing_err < kSessionResetThreshold) {
      ++session;
      state = {start(rng), start(rng)};
    }
  }
  return d;
}

}  // namespace scaffold::sim
