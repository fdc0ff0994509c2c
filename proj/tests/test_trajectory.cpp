#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "trapo/diagnostics.hpp"
#include "trapo/trajectory.hpp"

using namespace trapo;
using namespace trapo::testing;

namespace {

std::map<QuestionId, double> scores_from(const std::vector<double>& v) {
  std::map<QuestionId, double> m;
  for (std::size_t i = 0; i < v.size(); ++i) m[static_cast<QuestionId>(i)] = v[i];
  return m;
}

// Brute force: an id is in the top-p branch when fewer than k ids beat it
// under (score desc, id asc).
std::set<QuestionId> brute_select(const std::map<QuestionId, double>& scores, double top_p, double gamma) {
  const std::size_t k = top_p_count(top_p, scores.size());
  std::set<QuestionId> out;
  for (const auto& [id, s] : scores) {
    std::size_t better = 0;
    for (const auto& [other, so] : scores)
      if (so > s || (so == s && other < id)) ++better;
    if (better < k || s >= gamma) out.insert(id);
  }
  return out;
}

Trajectory traj(QuestionId id, std::vector<double> v) { return Trajectory{id, std::move(v)}; }

}  // namespace

TEST(PassRate, CountsTargetHits) {
  EXPECT_DOUBLE_EQ(pass_rate(group_with_answers({2, 2, 5, 2}), 2), 0.75);
  EXPECT_DOUBLE_EQ(pass_rate(group_with_answers({1, 1}), 3), 0.0);
  EXPECT_THROW(pass_rate(RolloutGroup{}, 0), std::invalid_argument);
}

TEST(TrajectoryAppend, GrowsByOneAndRejectsOutOfRange) {
  Trajectory t{7, {}};
  for (int i = 0; i < 5; ++i) {
    append(t, 0.125 * i);
    EXPECT_EQ(t.length(), static_cast<std::size_t>(i + 1));
  }
  EXPECT_THROW(append(t, 1.5), std::domain_error);
  EXPECT_THROW(append(t, -0.1), std::domain_error);
  EXPECT_EQ(t.length(), 5u);
  const Trajectory u = appended(t, 1.0);
  EXPECT_EQ(u.length(), 6u);
  EXPECT_EQ(t.length(), 5u);
}

TEST(Tcs, Examples) {
  EXPECT_NEAR(tcs(std::vector<double>{0.2, 0.4, 0.6}, std::vector<double>{0.1, 0.2, 0.3}), 1.0, 1e-12);
  EXPECT_NEAR(tcs(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0, 1e-15);
  EXPECT_EQ(tcs(std::vector<double>{0, 0, 0}, std::vector<double>{0.5, 0.2, 0.1}), 0.0);
  EXPECT_NEAR(tcs(std::vector<double>{0.5}, std::vector<double>{0.9}), 1.0, 1e-15);
  EXPECT_THROW(tcs(std::vector<double>{0.1, 0.2}, std::vector<double>{0.1}), std::invalid_argument);
  EXPECT_THROW(tcs(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
}

TEST(Tcs, PropertiesOnRandomTrajectories) {
  RandomStream rng = rng_stream(20, 0, 0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t t = 1 + rng.below(30);
    std::vector<double> a(t), b(t);
    for (std::size_t i = 0; i < t; ++i) {
      a[i] = rng.below(9) / 8.0;
      b[i] = rng.below(9) / 8.0;
    }
    const double s = tcs(a, b);
    EXPECT_GE(s, 0.0);  // non-negative entries
    EXPECT_LE(s, 1.0);
    EXPECT_DOUBLE_EQ(s, tcs(b, a));
    std::vector<double> scaled = a;
    const double c = 0.1 + rng.uniform();
    for (double& v : scaled) v *= c;
    EXPECT_NEAR(tcs(scaled, b), s, 1e-12);
    EXPECT_DOUBLE_EQ(trajectory_divergence(a, b) + s, 1.0);
  }
}

TEST(ReliableAverage, ElementwiseMeanOfMembers) {
  TrajectoryStore store;
  store[0] = traj(0, {0.0, 0.5, 1.0});
  store[1] = traj(1, {1.0, 0.5, 0.0});
  store[2] = traj(2, {0.25, 0.25, 0.25});
  const std::vector<QuestionId> labeled = {0, 1};
  ReliableDatabase db = ReliableDatabase::from_labeled(labeled);
  const auto avg = reliable_average(db, store, 3);
  EXPECT_EQ(avg, (std::vector<double>{0.5, 0.5, 0.5}));
  EXPECT_THROW(reliable_average(db, store, 4), std::invalid_argument);
  EXPECT_THROW(reliable_average(ReliableDatabase{}, store, 3), std::invalid_argument);
}

TEST(TopPCount, CeilingWithSlack) {
  EXPECT_EQ(top_p_count(0.1, 10), 1u);
  EXPECT_EQ(top_p_count(0.3, 10), 3u);
  EXPECT_EQ(top_p_count(0.1, 180), 18u);
  EXPECT_EQ(top_p_count(0.1, 11), 2u);
  EXPECT_EQ(top_p_count(1.0, 7), 7u);
  EXPECT_EQ(top_p_count(0.0, 7), 0u);
  EXPECT_EQ(top_p_count(0.5, 0), 0u);
}

TEST(Select, FixtureExample) {
  const auto mask = select(scores_from({0.9, 0.5, 0.45, 0.3, 0.2, 0.1, 0.41, 0.05, 0.39, 0.02}), 0.1, 0.4, 3);
  EXPECT_EQ(mask.selected, (std::set<QuestionId>{0, 1, 2, 6}));
  EXPECT_EQ(mask.epoch, 3u);
  EXPECT_EQ(mask.tcs_scores.size(), 10u);
}

TEST(Select, TiesBreakTowardSmallerId) {
  const auto mask = select(scores_from({0.3, 0.3, 0.3, 0.3}), 0.5, 0.9);
  EXPECT_EQ(mask.selected, (std::set<QuestionId>{0, 1}));
}

TEST(Select, ExtremeParameters) {
  const auto s = scores_from({0.9, -0.2, 0.1, 0.0});
  EXPECT_EQ(select(s, 1.0, 2.0).selected.size(), 4u);
  EXPECT_EQ(select(s, 0.0, -1.0).selected.size(), 4u);
  EXPECT_TRUE(select(s, 0.0, 1.01).selected.empty());
  EXPECT_TRUE(select({}, 0.5, 0.0).selected.empty());
}

TEST(Select, AgreesWithBruteForceAndIsMonotone) {
  RandomStream rng = rng_stream(21, 0, 0);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::map<QuestionId, double> scores;
    for (std::size_t i = 0; i < n; ++i) scores[static_cast<QuestionId>(3 * i + 1)] = rng.below(11) / 10.0;
    const double top_p = rng.below(11) / 10.0;
    const double gamma = rng.below(12) / 10.0;
    const auto mask = select(scores, top_p, gamma);
    EXPECT_EQ(mask.selected, brute_select(scores, top_p, gamma));
    EXPECT_GE(mask.selected.size(), top_p_count(top_p, n));
    for (const auto& [id, s] : scores)
      if (s >= gamma) { EXPECT_TRUE(mask.contains(id)); }
    // Looser parameters never drop an id.
    const auto looser = select(scores, std::min(1.0, top_p + 0.1), gamma - 0.1);
    EXPECT_TRUE(std::includes(looser.selected.begin(), looser.selected.end(), mask.selected.begin(),
                              mask.selected.end()));
  }
}

TEST(UpdateDb, AdditiveKeepsAndRecomputeResets) {
  const std::vector<QuestionId> labeled = {0, 1};
  ReliableDatabase db = ReliableDatabase::from_labeled(labeled);
  SelectionMask m1;
  m1.epoch = 2;
  m1.selected = {5, 6};
  update_db(db, m1, DbPolicy::additive);
  EXPECT_EQ(db.size(), 4u);
  EXPECT_EQ(db.members.at(5), 2u);
  SelectionMask m2;
  m2.epoch = 3;
  m2.selected = {6, 7};
  ReliableDatabase add = db, rec = db;
  update_db(add, m2, DbPolicy::additive);
  EXPECT_EQ(add.size(), 5u);
  EXPECT_EQ(add.members.at(6), 2u);  // keeps the epoch it first joined
  update_db(rec, m2, DbPolicy::recompute);
  EXPECT_EQ(rec.size(), 4u);
  EXPECT_FALSE(rec.contains(5));
  EXPECT_TRUE(rec.contains(0) && rec.contains(1) && rec.contains(6) && rec.contains(7));
}

TEST(ScoreUnlabeled, MeanAndMaxMatching) {
  TrajectoryStore store;
  store[0] = traj(0, {1.0, 0.0});
  store[1] = traj(1, {0.0, 1.0});
  store[10] = traj(10, {1.0, 0.0});
  store[11] = traj(11, {0.5, 0.5});
  const std::vector<QuestionId> labeled = {0, 1};
  const std::vector<QuestionId> unlabeled = {10, 11};
  const ReliableDatabase db = ReliableDatabase::from_labeled(labeled);
  const auto mean = score_unlabeled(unlabeled, store, db, 2, MatchingMode::mean);
  EXPECT_NEAR(mean.at(10), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(mean.at(11), 1.0, 1e-12);
  const auto mx = score_unlabeled(unlabeled, store, db, 2, MatchingMode::max);
  EXPECT_NEAR(mx.at(10), 1.0, 1e-12);
  EXPECT_NEAR(mx.at(11), 1.0 / std::sqrt(2.0), 1e-12);

  // A selected unlabeled member never matches itself.
  ReliableDatabase with_self = db;
  with_self.members.emplace(11, 1);
  EXPECT_NEAR(score_unlabeled(unlabeled, store, with_self, 2, MatchingMode::max).at(11), 1.0 / std::sqrt(2.0),
              1e-12);
  EXPECT_THROW(score_unlabeled(std::vector<QuestionId>{99}, store, db, 2, MatchingMode::mean), std::out_of_range);
}
