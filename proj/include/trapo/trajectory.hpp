#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trapo/core.hpp"

namespace trapo {

/// Per-question pass rates, one entry per elapsed epoch. Append-only.
struct Trajectory {
  QuestionId question_id = 0;
  std::vector<double> pass_rates;

  std::size_t length() const noexcept { return pass_rates.size(); }
};

using TrajectoryStore = std::map<QuestionId, Trajectory>;

/// Fraction of the group's answers equal to `target` (gold for labeled
/// questions, the epoch's majority pseudo-label for unlabeled ones).
inline double pass_rate(const RolloutGroup& group, Token target) {
  if (group.answers.empty()) throw std::invalid_argument("pass_rate: empty group");
  const auto hits = std::count(group.answers.begin(), group.answers.end(), target);
  return static_cast<double>(hits) / static_cast<double>(group.answers.size());
}

inline Trajectory& append(Trajectory& trajectory, double p) {
  if (!(p >= 0.0 && p <= 1.0))
    throw std::domain_error("append: pass rate " + std::to_string(p) + " outside [0, 1]");
  trajectory.pass_rates.push_back(p);
  return trajectory;
}

inline Trajectory appended(Trajectory trajectory, double p) {
  append(trajectory, p);
  return trajectory;
}

/// Trusted reference set. Membership is by id so members always contribute
/// their current, full-length trajectory.
struct ReliableDatabase {
  std::set<QuestionId> labeled_ids;
  std::map<QuestionId, std::uint32_t> members;  // id -> epoch it joined (0 for labeled)

  static ReliableDatabase from_labeled(std::span<const QuestionId> ids) {
    ReliableDatabase db;
    for (QuestionId id : ids) {
      db.labeled_ids.insert(id);
      db.members.emplace(id, 0u);
    }
    return db;
  }

  bool contains(QuestionId id) const { return members.count(id) != 0; }
  std::size_t size() const noexcept { return members.size(); }
};

struct SelectionMask {
  std::uint32_t epoch = 0;
  std::set<QuestionId> selected;
  std::map<QuestionId, double> tcs_scores;

  bool contains(QuestionId id) const { return selected.count(id) != 0; }
};

namespace detail {
inline const Trajectory& find_trajectory(const TrajectoryStore& store, QuestionId id) {
  const auto it = store.find(id);
  if (it == store.end()) throw std::out_of_range("no trajectory for question " + std::to_string(id));
  return it->second;
}
}  // namespace detail

/// Elementwise mean of the member trajectories.
inline std::vector<double> reliable_average(const ReliableDatabase& db, const TrajectoryStore& trajectories,
                                            std::size_t t) {
  if (db.members.empty()) throw std::invalid_argument("reliable_average: empty database");
  std::vector<double> avg(t, 0.0);
  for (const auto& [id, joined] : db.members) {
    const Trajectory& tr = detail::find_trajectory(trajectories, id);
    if (tr.length() != t)
      throw std::invalid_argument("reliable_average: trajectory of question " + std::to_string(id) +
                                  " has length " + std::to_string(tr.length()) + ", expected " +
                                  std::to_string(t));
    for (std::size_t i = 0; i < t; ++i) avg[i] += tr.pass_rates[i];
  }
  for (double& v : avg) v /= static_cast<double>(db.members.size());
  return avg;
}

/// Trajectory cosine similarity; 0 when either trajectory is all-zero.
inline double tcs(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("tcs: length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  if (a.empty()) throw std::invalid_argument("tcs: empty trajectories");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

/// Best match against any single member trajectory.
inline double tcs_max(std::span<const double> t_u, const std::vector<std::span<const double>>& members) {
  if (members.empty()) throw std::invalid_argument("tcs_max: empty member set");
  double best = -1.0;
  for (const auto& m : members) best = std::max(best, tcs(t_u, m));
  return best;
}

/// Number of ids in the top-p branch: ceil(top_p * n). A 1e-9 slack keeps
/// products such as 0.3 * 10 from rounding up to the next integer.
inline std::size_t top_p_count(double top_p, std::size_t n) {
  if (n == 0 || top_p <= 0.0) return 0;
  const double raw = std::ceil(top_p * static_cast<double>(n) - 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(raw, 0.0)));
}

/// top-p by score (ties to the smaller id) united with every id scoring >= gamma.
inline SelectionMask select(const std::map<QuestionId, double>& scores, double top_p, double gamma,
                            std::uint32_t epoch = 0) {
  SelectionMask mask;
  mask.epoch = epoch;
  mask.tcs_scores = scores;

  std::vector<std::pair<QuestionId, double>> ranked(scores.begin(), scores.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
    if (x.second != y.second) return x.second > y.second;
    return x.first < y.first;
  });
  const std::size_t k = top_p_count(top_p, ranked.size());
  for (std::size_t i = 0; i < k; ++i) mask.selected.insert(ranked[i].first);
  for (const auto& [id, score] : scores)
    if (score >= gamma) mask.selected.insert(id);
  return mask;
}

inline ReliableDatabase& update_db(ReliableDatabase& db, const SelectionMask& mask, DbPolicy policy) {
  if (policy == DbPolicy::recompute) {
    for (auto it = db.members.begin(); it != db.members.end();)
      it = db.labeled_ids.count(it->first) ? std::next(it) : db.members.erase(it);
  }
  for (QuestionId id : mask.selected) db.members.emplace(id, mask.epoch);
  return db;
}

/// Scores every unlabeled trajectory against the database, by the mean
/// reference trajectory or by the best single member.
inline std::map<QuestionId, double> score_unlabeled(std::span<const QuestionId> unlabeled_ids,
                                                    const TrajectoryStore& trajectories,
                                                    const ReliableDatabase& db, std::size_t t,
                                                    MatchingMode mode) {
  std::map<QuestionId, double> scores;
  if (mode == MatchingMode::mean) {
    const std::vector<double> ref = reliable_average(db, trajectories, t);
    for (QuestionId id : unlabeled_ids) scores[id] = tcs(detail::find_trajectory(trajectories, id).pass_rates, ref);
    return scores;
  }
  // Max matching compares against every other member; a selected unlabeled
  // question would otherwise match itself with similarity 1.
  std::vector<std::pair<QuestionId, std::span<const double>>> members;
  for (const auto& [id, joined] : db.members) {
    const Trajectory& tr = detail::find_trajectory(trajectories, id);
    if (tr.length() != t) throw std::invalid_argument("score_unlabeled: ragged member trajectories");
    members.emplace_back(id, tr.pass_rates);
  }
  for (QuestionId id : unlabeled_ids) {
    std::vector<std::span<const double>> others;
    for (const auto& [mid, traj] : members)
      if (mid != id) others.push_back(traj);
    scores[id] = tcs_max(detail::find_trajectory(trajectories, id).pass_rates, others);
  }
  return scores;
}

}  // namespace trapo
