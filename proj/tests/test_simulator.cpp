#include <random>

#include <gtest/gtest.h>

#include "scaffold/simulator.hpp"

using namespace scaffold;
using namespace scaffold::sim;

TEST(LearnerStep, NoiselessTimingPractice) {
  std::mt19937_64 rng(1);
  const ImprovementModel m{0.5, 0.1, 0.0, 0};
  const auto s = learner_step({0.4, 0.6}, PracticeMode::kTiming, m, rng);
  EXPECT_DOUBLE_EQ(s.timing_err, 0.3);
  EXPECT_DOUBLE_EQ(s.pitch_err, 0.4 * 0.9);
}

TEST(LearnerStep, NoiselessPitchPractice) {
  std::mt19937_64 rng(1);
  const auto s = learner_step({0.4, 0.6}, PracticeMode::kPitch, {0.5, 0.1, 0.0, 0}, rng);
  EXPECT_DOUBLE_EQ(s.pitch_err, 0.2);
  EXPECT_DOUBLE_EQ(s.timing_err, 0.6 * 0.9);
}

TEST(LearnerStep, PerfectStateStaysInRange) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto s = learner_step({0.0, 0.0}, static_cast<PracticeMode>(i % 2), {}, rng);
    EXPECT_GE(s.pitch_err, 0.0);
    EXPECT_LE(s.pitch_err, 1.0);
    EXPECT_GE(s.timing_err, 0.0);
    EXPECT_LE(s.timing_err, 1.0);
  }
}

TEST(Simulate, DeterministicForFixedSeed) {
  const auto a = simulate_dataset(TeacherRule::published(), {0.5, 0.1, 0.02, 7}, 80, {50, 100}, 3);
  const auto b = simulate_dataset(TeacherRule::published(), {0.5, 0.1, 0.02, 7}, 80, {50, 100}, 3);
  EXPECT_EQ(a.tuples, b.tuples);
  const auto c = simulate_dataset(TeacherRule::published(), {0.5, 0.1, 0.02, 7}, 80, {50, 100}, 4);
  EXPECT_NE(a.tuples, c.tuples);
  EXPECT_EQ(a.provenance, Provenance::kSynthetic);
}

TEST(Simulate, ConstantTeacher) {
  const auto d = simulate_dataset(TeacherRule::constant(PracticeMode::kPitch), {}, 50, {60}, 1);
  EXPECT_EQ(d.count(PracticeMode::kPitch), 50u);
}

TEST(Simulate, PublishedRuleLabelsEveryTuple) {
  const auto d = simulate_dataset(TeacherRule::published(), {}, 300, {50, 80, 100}, 9);
  ASSERT_EQ(d.size(), 300u);
  for (const auto& t : d.tuples) EXPECT_EQ(t.pm, baselines::paper_rule(t.t_pre, t.p_pre));
  EXPECT_TRUE(d.has_both_modes());
  for (const auto& t : d.tuples) EXPECT_TRUE(t.bpm == 50 || t.bpm == 80 || t.bpm == 100);
}

TEST(Simulate, ConsecutiveTuplesChainWithinSession) {
  const auto d = simulate_dataset(TeacherRule::published(), {}, 100, {60}, 2);
  for (std::size_t i = 1; i < d.size(); ++i) {
    const auto& prev = d.tuples[i - 1];
    const auto& cur = d.tuples[i];
    if (prev.subject_id == cur.subject_id) {
      EXPECT_EQ(cur.p_pre, prev.p_post);
      EXPECT_EQ(cur.t_pre, prev.t_post);
    }
  }
}

TEST(Simulate, RejectsBadModels) {
  EXPECT_THROW(simulate_dataset(TeacherRule::published(), {1.0, 0.1, 0.02, 0}, 10, {60}, 1), ValidationError);
  EXPECT_THROW(simulate_dataset(TeacherRule::published(), {0.3, 0.4, 0.02, 0}, 10, {60}, 1), ValidationError);
  EXPECT_THROW(simulate_dataset(TeacherRule::published(), {0.5, 0.1, -1.0, 0}, 10, {60}, 1), ValidationError);
  EXPECT_THROW(simulate_dataset(TeacherRule::published(), {}, 0, {60}, 1), DataError);
  EXPECT_THROW(simulate_dataset(TeacherRule::published(), {}, 10, {}, 1), DataError);
}
