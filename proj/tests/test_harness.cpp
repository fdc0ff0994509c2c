#include <gtest/gtest.h>

#include <sstream>

#include "trapo/io.hpp"

using namespace trapo;

namespace {

WorldConfig small_world(std::uint64_t seed = 0) {
  WorldConfig w;
  w.n_labeled = 12;
  w.n_unlabeled = 36;
  w.seed = seed;
  return w;
}

TrainerConfig small_trainer(Paradigm paradigm, int epochs = 16, std::uint64_t seed = 0) {
  TrainerConfig t;
  t.paradigm = paradigm;
  t.epochs = epochs;
  t.warmup_epochs = 4;
  t.seed = seed;
  return t;
}

TrainState fresh_state(const WorldConfig& wc) {
  World w = generate_world(wc);
  Policy p = init_policy(w, wc.bias_strength);
  return TrainState(std::move(w), std::move(p));
}

std::string jsonl(const auto& rows) {
  std::ostringstream out;
  write_jsonl(out, rows);
  return out.str();
}

}  // namespace

TEST(TrainEpoch, WarmupMatchesSupervisedBitForBit) {
  const WorldConfig wc = small_world(3);
  TrainState trapo_state = fresh_state(wc), sup_state = fresh_state(wc);
  const TrainerConfig trapo_cfg = small_trainer(Paradigm::trapo);
  const TrainerConfig sup_cfg = small_trainer(Paradigm::supervised);
  for (std::uint32_t t = 1; t <= 4; ++t) {
    const EpochReport a = train_epoch(trapo_state, t, trapo_cfg);
    const EpochReport b = train_epoch(sup_state, t, sup_cfg);
    EXPECT_FALSE(a.mask.has_value());
    EXPECT_TRUE(a.included_unlabeled.empty());
    EXPECT_EQ(a.unlabeled_gradient.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(a.gradient, b.gradient);
    EXPECT_EQ(trapo_state.policy.params.weights, sup_state.policy.params.weights);
    for (const auto& q : trapo_state.world.dataset.unlabeled)
      EXPECT_EQ(trapo_state.trajectories.at(q.id).length(), t);
  }
  // The first post-warmup epoch selects and includes unlabeled questions.
  const EpochReport after = train_epoch(trapo_state, 5, trapo_cfg);
  ASSERT_TRUE(after.mask.has_value());
  EXPECT_FALSE(after.included_unlabeled.empty());
}

TEST(TrainEpoch, GammaZeroSaturatesToNaiveSemi) {
  const WorldConfig wc = small_world(4);
  TrainerConfig trapo_cfg = small_trainer(Paradigm::trapo);
  trapo_cfg.gamma = 0.0;
  const TrainerConfig naive_cfg = small_trainer(Paradigm::naive_semi);
  TrainState a = fresh_state(wc);
  for (std::uint32_t t = 1; t <= 4; ++t) train_epoch(a, t, trapo_cfg);
  TrainState b = a;
  for (std::uint32_t t = 5; t <= 16; ++t) {
    const EpochReport ra = train_epoch(a, t, trapo_cfg);
    const EpochReport rb = train_epoch(b, t, naive_cfg);
    EXPECT_EQ(ra.included_unlabeled.size(), a.world.dataset.unlabeled.size());
    EXPECT_EQ(ra.included_unlabeled, rb.included_unlabeled);
    EXPECT_EQ(ra.gradient, rb.gradient);
    EXPECT_EQ(ra.loss, rb.loss);
    EXPECT_EQ(a.policy.params.weights, b.policy.params.weights);
  }
}

TEST(TrainEpoch, ReliableDatabaseGrowsMonotonically) {
  TrainState s = fresh_state(small_world(5));
  const TrainerConfig cfg = small_trainer(Paradigm::trapo);
  std::size_t prev = s.db.size();
  EXPECT_EQ(prev, 12u);
  for (std::uint32_t t = 1; t <= 16; ++t) {
    train_epoch(s, t, cfg);
    EXPECT_GE(s.db.size(), prev);
    for (const auto& q : s.world.dataset.labeled) EXPECT_TRUE(s.db.contains(q.id));
    prev = s.db.size();
  }
}

TEST(Run, SupervisedNeverSelects) {
  const RunResult r = run(small_trainer(Paradigm::supervised, 10), small_world());
  ASSERT_EQ(r.metrics.size(), 10u);
  for (const auto& m : r.metrics) {
    EXPECT_EQ(m.n_selected, 0u);
    EXPECT_FALSE(m.mean_tcs_selected.has_value());
    EXPECT_FALSE(m.pseudo_acc_selected.has_value());
    EXPECT_TRUE(m.pseudo_acc_unselected.has_value());
  }
  EXPECT_TRUE(r.selections.empty());
  for (const auto& rec : r.passrates) {
    EXPECT_FALSE(rec.tcs.has_value());
    EXPECT_FALSE(rec.selected);
  }
}

TEST(Run, UnsupervisedAndNaiveIncludeEveryUnlabeledQuestion) {
  for (Paradigm p : {Paradigm::unsupervised, Paradigm::naive_semi}) {
    const RunResult r = run(small_trainer(p, 6), small_world());
    for (const auto& m : r.metrics) EXPECT_EQ(m.n_selected, 36u);
  }
}

TEST(Run, RecordsOneGradientNormPerEpoch) {
  const RunResult r = run(small_trainer(Paradigm::naive_semi, 6), small_world());
  ASSERT_EQ(r.gradient_norms.size(), 6u);
  for (double g : r.gradient_norms) EXPECT_GT(g, 0.0);
}

TEST(Run, SingleEpochWithoutWarmup) {
  TrainerConfig t = small_trainer(Paradigm::trapo, 1);
  t.warmup_epochs = 0;
  const RunResult r = run(t, small_world());
  ASSERT_EQ(r.metrics.size(), 1u);
  ASSERT_EQ(r.selections.size(), 1u);
  // Length-1 trajectories are all parallel to the reference.
  EXPECT_EQ(r.selections[0].selected.size(), 36u);
  EXPECT_EQ(r.passrates.size(), 48u);
}

TEST(Run, LogShapeAndOrder) {
  const RunResult r = run(small_trainer(Paradigm::trapo, 6), small_world());
  ASSERT_EQ(r.passrates.size(), 6u * 48u);
  for (std::size_t i = 0; i < r.passrates.size(); ++i) {
    const auto& rec = r.passrates[i];
    EXPECT_EQ(rec.epoch, i / 48 + 1);
    EXPECT_EQ(rec.qid, i % 48);
    EXPECT_EQ(rec.split == Split::labeled, rec.qid < 12);
    EXPECT_EQ(rec.pseudo_label.has_value(), rec.split == Split::unlabeled);
    EXPECT_EQ(rec.tcs.has_value(), rec.split == Split::unlabeled && rec.epoch > 4);
    if (rec.confidence) {
      EXPECT_GE(*rec.confidence, 1.0 / 8.0);
      // The unlabeled pass rate is the fraction agreeing with the majority.
      EXPECT_DOUBLE_EQ(*rec.confidence, rec.pass_rate);
    }
  }
  for (const auto& [id, tr] : r.trajectories) EXPECT_EQ(tr.length(), 6u);
}

TEST(Run, DeterministicAndSeedSensitive) {
  const RunResult a = run(small_trainer(Paradigm::trapo, 12, 7), small_world(7));
  const RunResult b = run(small_trainer(Paradigm::trapo, 12, 7), small_world(7));
  EXPECT_EQ(jsonl(a.passrates), jsonl(b.passrates));
  EXPECT_EQ(jsonl(a.metrics), jsonl(b.metrics));
  EXPECT_EQ(a.final_params.weights, b.final_params.weights);
  const RunResult c = run(small_trainer(Paradigm::trapo, 12, 8), small_world(7));
  EXPECT_NE(jsonl(a.passrates), jsonl(c.passrates));
}

TEST(Run, RejectsInvalidConfig) {
  TrainerConfig t = small_trainer(Paradigm::trapo, 4);
  t.warmup_epochs = 4;
  EXPECT_THROW(run(t, small_world()), ConfigError);
}

TEST(OfflineSelect, ReproducesOnlineMasksThroughTextLog) {
  for (MatchingMode mode : {MatchingMode::mean, MatchingMode::max}) {
    for (DbPolicy policy : {DbPolicy::additive, DbPolicy::recompute}) {
      TrainerConfig t = small_trainer(Paradigm::trapo, 14, 2);
      t.matching_mode = mode;
      t.db_policy = policy;
      t.gamma = 0.97;  // keeps the masks non-trivial
      const RunResult r = run(t, small_world(2));
      std::stringstream buf(jsonl(r.passrates));
      OfflineOptions opt;
      opt.top_p = t.top_p;
      opt.gamma = t.gamma;
      opt.matching = mode;
      opt.db_policy = policy;
      const auto masks = offline_select(read_passrates(buf), opt);
      ASSERT_EQ(masks.size(), r.selections.size());
      for (std::size_t i = 0; i < masks.size(); ++i) {
        EXPECT_EQ(masks[i].epoch, r.selections[i].epoch);
        EXPECT_EQ(masks[i].selected, r.selections[i].selected);
        for (const auto& [id, s] : masks[i].tcs_scores) EXPECT_DOUBLE_EQ(s, r.selections[i].tcs_scores.at(id));
      }
    }
  }
}

TEST(OfflineSelect, RejectsMalformedLogs) {
  const RunResult r = run(small_trainer(Paradigm::trapo, 6), small_world());
  EXPECT_THROW(offline_select({}, {}), std::invalid_argument);
  auto gap = r.passrates;
  gap.erase(std::remove_if(gap.begin(), gap.end(), [](const auto& rec) { return rec.epoch == 3; }), gap.end());
  EXPECT_THROW(offline_select(gap, {}), std::invalid_argument);
  auto dup = r.passrates;
  dup.push_back(dup.back());
  EXPECT_THROW(offline_select(dup, {}), std::invalid_argument);
  auto ragged = r.passrates;
  ragged.pop_back();
  EXPECT_THROW(offline_select(ragged, {}), std::invalid_argument);
}

TEST(OfflineSelect, InfersWarmupFromTheLog) {
  const RunResult r = run(small_trainer(Paradigm::trapo, 8), small_world());
  const auto masks = offline_select(r.passrates, {});
  ASSERT_FALSE(masks.empty());
  EXPECT_EQ(masks.front().epoch, 5u);
}

TEST(Sweep, OneRunPerValue) {
  const auto entries = sweep(small_trainer(Paradigm::trapo, 14), small_world(), "warmup_epochs", {2, 8, 12});
  ASSERT_EQ(entries.size(), 3u);
  EXPECT_EQ(entries[0].result.config.warmup_epochs, 2);
  EXPECT_EQ(entries[1].result.config.warmup_epochs, 8);
  EXPECT_EQ(entries[2].result.config.warmup_epochs, 12);
  EXPECT_EQ(entries[2].result.selections.size(), 2u);
  EXPECT_THROW(sweep(small_trainer(Paradigm::trapo), small_world(), "paradigm", {1}), ConfigError);
  EXPECT_THROW(sweep(small_trainer(Paradigm::trapo), small_world(), "nonsense", {1}), ConfigError);
}

TEST(FormatNumber, ShortestRoundTrip) {
  EXPECT_EQ(format_number(0.4), "0.4");
  EXPECT_EQ(format_number(12), "12");
  EXPECT_EQ(format_number(0.1 + 0.2), "0.30000000000000004");
}

TEST(EpochMetrics, RtcMatchesItsComponents) {
  const RunResult r = run(small_trainer(Paradigm::trapo, 10), small_world());
  for (const auto& m : r.metrics) {
    ASSERT_TRUE(m.rtc && m.mean_divergence && m.mean_confidence);
    EXPECT_NEAR(*m.rtc, tc_risk({}, *m.mean_divergence, *m.mean_confidence, 36, 8), 1e-12);
  }
}
