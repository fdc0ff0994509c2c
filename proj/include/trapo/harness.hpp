#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "trapo/core.hpp"
#include "trapo/diagnostics.hpp"
#include "trapo/grpo.hpp"
#include "trapo/rewards.hpp"
#include "trapo/rng.hpp"
#include "trapo/sim.hpp"
#include "trapo/trajectory.hpp"

namespace trapo {

/// One row of passrates.jsonl.
struct PassRateRecord {
  std::uint32_t epoch = 0;
  QuestionId qid = 0;
  Split split = Split::labeled;
  double pass_rate = 0.0;
  std::optional<Token> pseudo_label;
  std::optional<double> confidence;
  bool tie = false;
  bool selected = false;
  std::optional<double> tcs;
};

/// One row of metrics.jsonl. Quantities over an empty set are null.
struct EpochMetrics {
  std::uint32_t epoch = 0;
  std::optional<double> labeled_train_acc;
  std::optional<double> eval_acc_id;
  std::optional<double> eval_acc_ood;
  std::size_t n_selected = 0;
  std::optional<double> mean_tcs_selected;
  std::optional<double> mean_tcs_unselected;
  std::optional<double> pseudo_acc_selected;
  std::optional<double> pseudo_acc_unselected;
  std::optional<double> mean_confidence;
  std::optional<double> mean_divergence;
  std::optional<double> rtc;
  double loss = 0.0;
};

/// Greedy accuracies of a policy, scored on the evaluation path (hidden gold).
struct EvalSnapshot {
  std::optional<double> labeled_acc;
  std::optional<double> id_acc;
  std::optional<double> ood_acc;
  std::optional<double> biased_acc;
};

inline EvalSnapshot evaluate(const PolicyParams& params, const World& world) {
  auto acc = [&](auto&& pick, const std::vector<Question>& qs) -> std::optional<double> {
    std::size_t n = 0, hit = 0;
    for (const auto& q : qs) {
      if (!pick(q)) continue;
      ++n;
      hit += greedy_answer(params, q) == world.hidden.gold_of(q.id) ? 1 : 0;
    }
    if (n == 0) return std::nullopt;
    return static_cast<double>(hit) / static_cast<double>(n);
  };
  EvalSnapshot s;
  s.labeled_acc = acc([](const Question&) { return true; }, world.dataset.labeled);
  s.id_acc = acc([](const Question& q) { return q.domain_tag == DomainTag::ID; }, world.dataset.unlabeled);
  s.ood_acc = acc([](const Question& q) { return q.domain_tag == DomainTag::OOD; }, world.dataset.unlabeled);
  s.biased_acc = acc([](const Question& q) { return q.bias_target.has_value(); }, world.dataset.unlabeled);
  return s;
}

struct TrainState {
  World world;
  Policy policy;
  TrajectoryStore trajectories;
  ReliableDatabase db;
  std::vector<PassRateRecord> log;
  std::vector<SelectionMask> masks;

  TrainState(World w, Policy p) : world(std::move(w)), policy(std::move(p)) {
    std::vector<QuestionId> labeled_ids;
    for (const auto& q : world.dataset.labeled) {
      labeled_ids.push_back(q.id);
      trajectories[q.id].question_id = q.id;
    }
    for (const auto& q : world.dataset.unlabeled) trajectories[q.id].question_id = q.id;
    db = ReliableDatabase::from_labeled(labeled_ids);
  }

  std::vector<QuestionId> unlabeled_ids() const {
    std::vector<QuestionId> ids;
    for (const auto& q : world.dataset.unlabeled) ids.push_back(q.id);
    return ids;
  }
};

/// What one epoch did, beyond the state mutation.
struct EpochReport {
  std::uint32_t epoch = 0;
  double loss = 0.0;
  Eigen::MatrixXd gradient;            // gradient actually applied
  Eigen::MatrixXd unlabeled_gradient;  // the unlabeled questions' share of `gradient`
  std::set<QuestionId> included_unlabeled;
  std::optional<SelectionMask> mask;
  std::map<QuestionId, RolloutGroup> groups;
  std::map<QuestionId, Token> pseudo_labels;
  std::map<QuestionId, double> confidences;
};

inline bool selection_active(const TrainerConfig& config, std::uint32_t epoch) {
  return config.paradigm == Paradigm::trapo && static_cast<int>(epoch) > config.warmup_epochs;
}

/// One training epoch: roll out every question, reward, extend pass-rate
/// trajectories, select unlabeled samples (trapo, after warmup), then take a
/// single gradient step on the summed per-question GRPO losses.
inline EpochReport train_epoch(TrainState& state, std::uint32_t epoch, const TrainerConfig& config) {
  const Dataset& data = state.world.dataset;
  const PolicyParams old_params = state.policy.params;
  const GrpoOptions opt = grpo_options(config);
  const auto G = static_cast<std::size_t>(config.group_size);

  EpochReport report;
  report.epoch = epoch;

  // (1)-(3) rollouts, rewards, pass rates.
  std::map<QuestionId, std::vector<double>> rewards;
  for (const auto* split : {&data.labeled, &data.unlabeled}) {
    for (const Question& q : *split) {
      RandomStream stream = rng_stream(config.seed, q.id, epoch);
      RolloutGroup group = rollout_group(old_params, q, G, config.rollout_temperature, stream, epoch);
      double p = 0.0;
      if (split == &data.labeled) {
        rewards[q.id] = hybrid_reward(q, Split::labeled, group, RewardKind::verifiable, data.K).values;
        p = pass_rate(group, *q.gold_answer);
      } else {
        const MajorityVote vote = majority_vote(group.answers);
        rewards[q.id] = hybrid_reward(q, Split::unlabeled, group, config.reward_kind, data.K).values;
        p = pass_rate(group, vote.pseudo_label);
        report.pseudo_labels[q.id] = vote.pseudo_label;
        report.confidences[q.id] = vote.confidence;
      }
      append(state.trajectories.at(q.id), p);
      report.groups.emplace(q.id, std::move(group));
    }
  }

  // (4) selection.
  const std::vector<QuestionId> unlabeled = state.unlabeled_ids();
  if (selection_active(config, epoch) && !unlabeled.empty() && !state.db.members.empty()) {
    const auto scores = score_unlabeled(unlabeled, state.trajectories, state.db, epoch, config.matching_mode);
    SelectionMask mask = select(scores, config.top_p, config.gamma, epoch);
    update_db(state.db, mask, config.db_policy);
    state.masks.push_back(mask);
    report.mask = std::move(mask);
  }

  switch (config.paradigm) {
    case Paradigm::supervised: break;
    case Paradigm::unsupervised:
    case Paradigm::naive_semi: report.included_unlabeled.insert(unlabeled.begin(), unlabeled.end()); break;
    case Paradigm::trapo:
      if (report.mask) report.included_unlabeled = report.mask->selected;
      break;
  }

  // (5)-(6) loss and update.
  const bool use_labeled = config.paradigm != Paradigm::unsupervised;
  const PolicyParams& ref = state.policy.reference();
  Eigen::MatrixXd grad_sum = Eigen::MatrixXd::Zero(old_params.weights.rows(), old_params.weights.cols());
  report.unlabeled_gradient = grad_sum;
  double loss_sum = 0.0;
  std::size_t n_terms = 0;
  auto add_term = [&](const Question& q, bool is_unlabeled) {
    const LossAndGrad lg = grpo_loss_and_grad(q, report.groups.at(q.id), rewards.at(q.id), old_params,
                                              state.policy.params, ref, opt);
    loss_sum += lg.loss;
    grad_sum += lg.grad;
    if (is_unlabeled) report.unlabeled_gradient += lg.grad;
    ++n_terms;
  };
  if (use_labeled)
    for (const Question& q : data.labeled) add_term(q, false);
  for (const Question& q : data.unlabeled)
    if (report.included_unlabeled.count(q.id)) add_term(q, true);

  // Per-question terms are summed and scaled by the fixed question count, so
  // every paradigm uses the same step size per included question.
  report.gradient = grad_sum;
  const std::size_t n_questions = data.labeled.size() + data.unlabeled.size();
  if (n_terms > 0) {
    report.loss = loss_sum / static_cast<double>(n_questions);
    report.gradient /= static_cast<double>(n_questions);
    report.unlabeled_gradient /= static_cast<double>(n_questions);
    state.policy.params.weights -= config.learning_rate * report.gradient;
  }

  // Log rows in question order.
  for (const auto* split : {&data.labeled, &data.unlabeled}) {
    for (const Question& q : *split) {
      PassRateRecord rec;
      rec.epoch = epoch;
      rec.qid = q.id;
      rec.pass_rate = state.trajectories.at(q.id).pass_rates.back();
      if (split == &data.unlabeled) {
        rec.split = Split::unlabeled;
        rec.pseudo_label = report.pseudo_labels.at(q.id);
        rec.confidence = report.confidences.at(q.id);
        rec.tie = majority_vote(report.groups.at(q.id).answers).tie;
        rec.selected = report.included_unlabeled.count(q.id) != 0;
        if (report.mask) rec.tcs = report.mask->tcs_scores.at(q.id);
      }
      state.log.push_back(rec);
    }
  }
  return report;
}

/// Per-epoch metrics from the epoch report and the post-update policy.
inline EpochMetrics epoch_metrics(const TrainState& state, const EpochReport& report, const TrainerConfig& config,
                                  const BoundConfig& bound = {}) {
  const World& world = state.world;
  const EvalSnapshot snap = evaluate(state.policy.params, world);
  EpochMetrics m;
  m.epoch = report.epoch;
  m.labeled_train_acc = snap.labeled_acc;
  m.eval_acc_id = snap.id_acc;
  m.eval_acc_ood = snap.ood_acc;
  m.n_selected = report.included_unlabeled.size();
  m.loss = report.loss;

  auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };

  std::vector<double> tcs_sel, tcs_unsel, hit_sel, hit_unsel, conf;
  for (const Question& q : world.dataset.unlabeled) {
    const bool sel = report.included_unlabeled.count(q.id) != 0;
    const double hit = report.pseudo_labels.at(q.id) == world.hidden.gold_of(q.id) ? 1.0 : 0.0;
    (sel ? hit_sel : hit_unsel).push_back(hit);
    if (report.mask) (sel ? tcs_sel : tcs_unsel).push_back(report.mask->tcs_scores.at(q.id));
    conf.push_back(report.confidences.at(q.id));
  }
  m.mean_tcs_selected = mean_of(tcs_sel);
  m.mean_tcs_unselected = mean_of(tcs_unsel);
  m.pseudo_acc_selected = mean_of(hit_sel);
  m.pseudo_acc_unselected = mean_of(hit_unsel);
  m.mean_confidence = mean_of(conf);

  if (!world.dataset.unlabeled.empty() && !state.db.members.empty()) {
    const std::vector<double> ref = reliable_average(state.db, state.trajectories, report.epoch);
    std::vector<double> div;
    for (const Question& q : world.dataset.unlabeled)
      div.push_back(trajectory_divergence(state.trajectories.at(q.id).pass_rates, ref));
    m.mean_divergence = mean_of(div);
    m.rtc = tc_risk(bound, *m.mean_divergence, *m.mean_confidence, world.dataset.unlabeled.size(),
                    static_cast<std::size_t>(config.group_size));
  }
  return m;
}

struct RunResult {
  TrainerConfig config;
  WorldConfig world_config;
  EvalSnapshot initial;
  std::vector<EpochMetrics> metrics;
  std::vector<EvalSnapshot> evals;  // post-update evaluation, one per epoch
  std::vector<double> gradient_norms;  // Frobenius norm of each applied gradient
  TrajectoryStore trajectories;
  std::vector<SelectionMask> selections;
  std::vector<PassRateRecord> passrates;
  PolicyParams final_params;
};

/// T epochs of train_epoch from a freshly generated world and policy.
inline RunResult run(const TrainerConfig& config_in, const WorldConfig& world_config,
                     const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  const TrainerConfig config = validate_config(config_in);
  World world = generate_world(world_config);
  Policy policy = init_policy(world, world_config.bias_strength, static_cast<std::size_t>(config.group_size));
  TrainState state(std::move(world), std::move(policy));

  RunResult result;
  result.config = config;
  result.world_config = world_config;
  result.initial = evaluate(state.policy.params, state.world);
  for (int t = 1; t <= config.epochs; ++t) {
    const EpochReport report = train_epoch(state, static_cast<std::uint32_t>(t), config);
    result.metrics.push_back(epoch_metrics(state, report, config));
    result.gradient_norms.push_back(report.gradient.norm());
    result.evals.push_back(evaluate(state.policy.params, state.world));
    if (on_epoch) on_epoch(result.metrics.back());
  }
  result.trajectories = state.trajectories;
  result.selections = state.masks;
  result.passrates = std::move(state.log);
  result.final_params = state.policy.params;
  return result;
}

// ---------------------------------------------------------------------------
// Config keys. Config files and sweeps address fields by these names.

inline void apply_setting(TrainerConfig& tc, WorldConfig& wc, const std::string& key, const std::string& value) {
  auto as_double = [&]() {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &pos);
    } catch (const std::exception&) {
      throw ConfigError(key, "expected a number, got '" + value + "'");
    }
    if (pos != value.size()) throw ConfigError(key, "expected a number, got '" + value + "'");
    return v;
  };
  auto as_count = [&]() {
    const double v = as_double();
    if (v < 0 || v != std::floor(v)) throw ConfigError(key, "expected a non-negative integer");
    return static_cast<std::size_t>(v);
  };
  auto as_int = [&]() {
    const double v = as_double();
    if (v != std::floor(v)) throw ConfigError(key, "expected an integer");
    return static_cast<int>(v);
  };
  auto as_bool = [&]() {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(key, "expected true or false");
  };

  // Trainer.
  if (key == "seed") {  // also seeds the world unless world_seed follows
    tc.seed = as_count();
    wc.seed = tc.seed;
    return;
  }
  if (key == "epochs") { tc.epochs = as_int(); return; }
  if (key == "warmup_epochs") { tc.warmup_epochs = as_int(); return; }
  if (key == "group_size") { tc.group_size = as_int(); return; }
  if (key == "top_p") { tc.top_p = as_double(); return; }
  if (key == "gamma") { tc.gamma = as_double(); return; }
  if (key == "clip_eps") { tc.clip_eps = as_double(); return; }
  if (key == "kl_beta") { tc.kl_beta = as_double(); return; }
  if (key == "entropy_coef") { tc.entropy_coef = as_double(); return; }
  if (key == "learning_rate") { tc.learning_rate = as_double(); return; }
  if (key == "rollout_temperature") { tc.rollout_temperature = as_double(); return; }
  if (key == "length_normalize") { tc.length_normalize = as_bool(); return; }
  if (key == "advantage_mode") { tc.advantage_mode = parse_enum<AdvantageMode>(key, value); return; }
  if (key == "matching_mode") { tc.matching_mode = parse_enum<MatchingMode>(key, value); return; }
  if (key == "reward_kind") { tc.reward_kind = parse_enum<RewardKind>(key, value); return; }
  if (key == "paradigm") { tc.paradigm = parse_enum<Paradigm>(key, value); return; }
  if (key == "db_policy") { tc.db_policy = parse_enum<DbPolicy>(key, value); return; }
  // World.
  if (key == "n_labeled") { wc.n_labeled = as_count(); return; }
  if (key == "n_unlabeled") { wc.n_unlabeled = as_count(); return; }
  if (key == "d") { wc.d = as_count(); return; }
  if (key == "k") { wc.K = as_count(); return; }
  if (key == "l") { wc.L = as_count(); return; }
  if (key == "n_clusters") { wc.n_clusters = as_count(); return; }
  if (key == "cluster_spread") { wc.cluster_spread = as_double(); return; }
  if (key == "ood_fraction") { wc.ood_fraction = as_double(); return; }
  if (key == "bias_fraction") { wc.bias_fraction = as_double(); return; }
  if (key == "bias_strength") { wc.bias_strength = as_double(); return; }
  if (key == "world_seed") { wc.seed = as_count(); return; }
  if (key == "prior_strength") { wc.prior_strength = as_double(); return; }
  if (key == "ood_shift") { wc.ood_shift = as_double(); return; }
  if (key == "bias_coef_min") { wc.bias_coef_min = as_double(); return; }
  if (key == "init_scale") { wc.init_scale = as_double(); return; }
  if (key == "feature_scale") { wc.feature_scale = as_double(); return; }
  if (key == "bias_shared") { wc.bias_shared = as_bool(); return; }
  throw ConfigError(key, "unknown config key");
}

inline bool is_numeric_key(const std::string& key) {
  static const std::set<std::string> numeric = {
      "seed", "epochs", "warmup_epochs", "group_size", "top_p", "gamma", "clip_eps", "kl_beta",
      "entropy_coef", "learning_rate", "rollout_temperature", "n_labeled", "n_unlabeled", "d", "k", "l",
      "n_clusters", "cluster_spread", "ood_fraction", "bias_fraction", "bias_strength", "world_seed",
      "prior_strength", "ood_shift", "bias_coef_min", "init_scale", "feature_scale"};
  return numeric.count(key) != 0;
}

/// Shortest %g form that reads back to the same double.
inline std::string format_number(double v) {
  char buf[64];
  for (int precision = 6; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

struct SweepEntry {
  double value = 0.0;
  RunResult result;
};

/// One run per value of a numeric config field; the world seed is shared.
inline std::vector<SweepEntry> sweep(const TrainerConfig& base, const WorldConfig& world, const std::string& axis,
                                     const std::vector<double>& values) {
  if (!is_numeric_key(axis)) throw ConfigError(axis, "not a numeric config field");
  std::vector<SweepEntry> out;
  for (double v : values) {
    TrainerConfig tc = base;
    WorldConfig wc = world;
    apply_setting(tc, wc, axis, format_number(v));
    out.push_back({v, run(tc, wc)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Offline selection over a pass-rate log.

struct OfflineOptions {
  double top_p = 0.1;
  double gamma = 0.4;
  MatchingMode matching = MatchingMode::mean;
  int warmup_epochs = -1;  // < 0: infer from the first epoch with recorded scores
  DbPolicy db_policy = DbPolicy::additive;
};

/// Rebuilds trajectories from log rows and replays the selection rule for
/// every epoch after warmup, exactly as train_epoch does online.
inline std::vector<SelectionMask> offline_select(const std::vector<PassRateRecord>& records,
                                                 const OfflineOptions& opt) {
  if (records.empty()) throw std::invalid_argument("offline_select: empty log");

  std::map<std::uint32_t, std::vector<const PassRateRecord*>> by_epoch;
  std::set<QuestionId> labeled, unlabeled;
  for (const auto& r : records) {
    by_epoch[r.epoch].push_back(&r);
    (r.split == Split::labeled ? labeled : unlabeled).insert(r.qid);
  }
  for (QuestionId id : labeled)
    if (unlabeled.count(id)) throw std::invalid_argument("offline_select: question " + std::to_string(id) + " in both splits");

  int warmup = opt.warmup_epochs;
  if (warmup < 0) {
    warmup = static_cast<int>(by_epoch.rbegin()->first);
    for (const auto& [epoch, rows] : by_epoch) {
      bool scored = false;
      for (const auto* r : rows) scored = scored || r->tcs.has_value();
      if (scored) {
        warmup = static_cast<int>(epoch) - 1;
        break;
      }
    }
  }

  const std::size_t n_questions = labeled.size() + unlabeled.size();
  TrajectoryStore trajectories;
  const std::vector<QuestionId> labeled_ids(labeled.begin(), labeled.end());
  const std::vector<QuestionId> unlabeled_ids(unlabeled.begin(), unlabeled.end());
  ReliableDatabase db = ReliableDatabase::from_labeled(labeled_ids);
  std::vector<SelectionMask> masks;

  std::uint32_t expected_epoch = by_epoch.begin()->first;
  for (const auto& [epoch, rows] : by_epoch) {
    if (epoch != expected_epoch) throw std::invalid_argument("offline_select: missing epoch " + std::to_string(expected_epoch));
    ++expected_epoch;
    std::set<QuestionId> seen;
    for (const auto* r : rows) {
      if (!seen.insert(r->qid).second)
        throw std::invalid_argument("offline_select: duplicate row for question " + std::to_string(r->qid) +
                                    " at epoch " + std::to_string(epoch));
      Trajectory& tr = trajectories[r->qid];
      tr.question_id = r->qid;
      append(tr, r->pass_rate);
    }
    if (seen.size() != n_questions)
      throw std::invalid_argument("offline_select: ragged trajectories at epoch " + std::to_string(epoch));
    const std::size_t t = trajectories.begin()->second.length();

    if (static_cast<int>(epoch) > warmup && !unlabeled_ids.empty() && !db.members.empty()) {
      const auto scores = score_unlabeled(unlabeled_ids, trajectories, db, t, opt.matching);
      SelectionMask mask = select(scores, opt.top_p, opt.gamma, epoch);
      update_db(db, mask, opt.db_policy);
      masks.push_back(std::move(mask));
    }
  }
  return masks;
}

/// Bound terms per epoch, recomputed from a pass-rate log alone. The
/// reference set is the labeled questions plus every unlabeled question
/// recorded as selected in a scored epoch (additive), matching the online
/// database. Labeled empirical risk is one minus the mean labeled pass rate.
inline std::vector<BoundReport> diagnose_log(const std::vector<PassRateRecord>& records, const BoundConfig& bound,
                                             std::size_t G, DbPolicy db_policy = DbPolicy::additive) {
  validate_bound(bound);
  if (records.empty()) throw std::invalid_argument("diagnose_log: empty log");
  std::map<std::uint32_t, std::vector<const PassRateRecord*>> by_epoch;
  std::set<QuestionId> labeled;
  for (const auto& r : records) {
    by_epoch[r.epoch].push_back(&r);
    if (r.split == Split::labeled) labeled.insert(r.qid);
  }
  const std::vector<QuestionId> labeled_ids(labeled.begin(), labeled.end());
  ReliableDatabase db = ReliableDatabase::from_labeled(labeled_ids);
  TrajectoryStore trajectories;
  std::vector<BoundReport> out;

  for (const auto& [epoch, rows] : by_epoch) {
    SelectionMask mask;
    mask.epoch = epoch;
    bool scored = false;
    double labeled_sum = 0.0, conf_sum = 0.0;
    std::size_t n_labeled = 0, n_unlabeled = 0;
    for (const auto* r : rows) {
      Trajectory& tr = trajectories[r->qid];
      tr.question_id = r->qid;
      append(tr, r->pass_rate);
      if (r->split == Split::labeled) {
        labeled_sum += r->pass_rate;
        ++n_labeled;
      } else {
        if (!r->confidence) throw std::invalid_argument("diagnose_log: unlabeled row without confidence");
        conf_sum += *r->confidence;
        ++n_unlabeled;
        if (r->tcs) {
          scored = true;
          if (r->selected) mask.selected.insert(r->qid);
        }
      }
    }
    if (scored) update_db(db, mask, db_policy);
    if (n_unlabeled == 0 || db.members.empty()) continue;

    const std::size_t t = trajectories.at(rows.front()->qid).length();
    const std::vector<double> ref = reliable_average(db, trajectories, t);
    double div = 0.0;
    for (const auto* r : rows)
      if (r->split == Split::unlabeled) div += trajectory_divergence(trajectories.at(r->qid).pass_rates, ref);
    const double risk = n_labeled ? 1.0 - labeled_sum / static_cast<double>(n_labeled) : 0.0;
    out.push_back(make_bound_report(bound, epoch, risk, div / static_cast<double>(n_unlabeled),
                                    conf_sum / static_cast<double>(n_unlabeled), n_unlabeled, G));
  }
  return out;
}

}  // namespace trapo
