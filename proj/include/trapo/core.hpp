#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace trapo {

using QuestionId = std::uint32_t;
using Token = int;

enum class DomainTag { ID, OOD };
enum class AdvantageMode { std_normalized, mean_only };
enum class MatchingMode { mean, max };
enum class RewardKind { verifiable, majority, self_certainty, token_entropy, sentence_entropy };
enum class Paradigm { supervised, unsupervised, naive_semi, trapo };
enum class DbPolicy { additive, recompute };

/// Raised when a configuration invariant is violated. `field()` names the
/// offending key exactly as it appears in config files.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& detail)
      : std::invalid_argument(field + ": " + detail), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// A training question as seen by rewards, trajectories and the optimizer.
/// Unlabeled questions carry no gold answer here; evaluation-only labels live
/// in `HiddenLabels` (see sim.hpp), which those modules never receive.
struct Question {
  QuestionId id = 0;
  std::vector<double> features;
  std::optional<Token> gold_answer;
  DomainTag domain_tag = DomainTag::ID;
  std::optional<Token> bias_target;

  bool labeled() const noexcept { return gold_answer.has_value(); }
};

struct Dataset {
  std::vector<Question> labeled;
  std::vector<Question> unlabeled;
  std::size_t d = 16;
  std::size_t K = 8;
  std::size_t L = 4;
};

/// G sampled responses of L steps each for one question at one epoch.
/// `step_distributions[j][s]` is the categorical the token `responses[j][s]`
/// was drawn from.
struct RolloutGroup {
  QuestionId question_id = 0;
  std::uint32_t epoch = 0;
  std::vector<std::vector<Token>> responses;
  std::vector<std::vector<std::vector<double>>> step_distributions;
  std::vector<Token> answers;

  std::size_t size() const noexcept { return responses.size(); }
  std::size_t length() const noexcept { return responses.empty() ? 0 : responses.front().size(); }
};

struct TrainerConfig {
  std::uint64_t seed = 0;
  int epochs = 40;
  int warmup_epochs = 8;
  int group_size = 8;
  double top_p = 0.1;
  double gamma = 0.4;
  double clip_eps = 0.2;
  double kl_beta = 0.0;
  double entropy_coef = 0.01;
  double learning_rate = 0.05;
  double rollout_temperature = 1.0;
  bool length_normalize = false;
  AdvantageMode advantage_mode = AdvantageMode::mean_only;
  MatchingMode matching_mode = MatchingMode::mean;
  RewardKind reward_kind = RewardKind::majority;
  Paradigm paradigm = Paradigm::trapo;
  DbPolicy db_policy = DbPolicy::additive;
};

/// Returns `config` unchanged or throws ConfigError naming the first
/// violated invariant.
inline TrainerConfig validate_config(const TrainerConfig& config) {
  if (config.epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (config.warmup_epochs < 0) throw ConfigError("warmup_epochs", "must be >= 0");
  if (config.warmup_epochs >= config.epochs)
    throw ConfigError("warmup_epochs", "must be < epochs");
  if (config.group_size < 2) throw ConfigError("group_size", "must be >= 2");
  if (!(config.top_p > 0.0 && config.top_p <= 1.0)) throw ConfigError("top_p", "must lie in (0, 1]");
  if (!(config.gamma >= 0.0 && config.gamma <= 1.0)) throw ConfigError("gamma", "must lie in [0, 1]");
  if (!(config.clip_eps > 0.0 && config.clip_eps < 1.0))
    throw ConfigError("clip_eps", "must lie in (0, 1)");
  if (!(config.kl_beta >= 0.0)) throw ConfigError("kl_beta", "must be >= 0");
  if (!(config.entropy_coef >= 0.0)) throw ConfigError("entropy_coef", "must be >= 0");
  if (!(config.learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
  if (!(config.rollout_temperature > 0.0))
    throw ConfigError("rollout_temperature", "must be > 0");
  return config;
}

// Enum <-> string, used by config files, logs and the CLI.

inline std::string_view to_string(DomainTag v) { return v == DomainTag::ID ? "ID" : "OOD"; }

inline std::string_view to_string(AdvantageMode v) {
  return v == AdvantageMode::std_normalized ? "std_normalized" : "mean_only";
}

inline std::string_view to_string(MatchingMode v) { return v == MatchingMode::mean ? "mean" : "max"; }

inline std::string_view to_string(RewardKind v) {
  switch (v) {
    case RewardKind::verifiable: return "verifiable";
    case RewardKind::majority: return "majority";
    case RewardKind::self_certainty: return "self_certainty";
    case RewardKind::token_entropy: return "token_entropy";
    case RewardKind::sentence_entropy: return "sentence_entropy";
  }
  return "?";
}

inline std::string_view to_string(Paradigm v) {
  switch (v) {
    case Paradigm::supervised: return "supervised";
    case Paradigm::unsupervised: return "unsupervised";
    case Paradigm::naive_semi: return "naive_semi";
    case Paradigm::trapo: return "trapo";
  }
  return "?";
}

inline std::string_view to_string(DbPolicy v) { return v == DbPolicy::additive ? "additive" : "recompute"; }

template <class Enum>
Enum parse_enum(std::string_view field, std::string_view text);

namespace detail {
template <class Enum, std::size_t N>
Enum parse_from(std::string_view field, std::string_view text, const Enum (&all)[N]) {
  for (Enum e : all)
    if (to_string(e) == text) return e;
  throw ConfigError(std::string(field), "unknown value '" + std::string(text) + "'");
}
}  // namespace detail

template <>
inline AdvantageMode parse_enum<AdvantageMode>(std::string_view field, std::string_view text) {
  static constexpr AdvantageMode all[] = {AdvantageMode::std_normalized, AdvantageMode::mean_only};
  return detail::parse_from(field, text, all);
}

template <>
inline MatchingMode parse_enum<MatchingMode>(std::string_view field, std::string_view text) {
  static constexpr MatchingMode all[] = {MatchingMode::mean, MatchingMode::max};
  return detail::parse_from(field, text, all);
}

template <>
inline RewardKind parse_enum<RewardKind>(std::string_view field, std::string_view text) {
  static constexpr RewardKind all[] = {RewardKind::verifiable, RewardKind::majority,
                                       RewardKind::self_certainty, RewardKind::token_entropy,
                                       RewardKind::sentence_entropy};
  return detail::parse_from(field, text, all);
}

template <>
inline Paradigm parse_enum<Paradigm>(std::string_view field, std::string_view text) {
  static constexpr Paradigm all[] = {Paradigm::supervised, Paradigm::unsupervised,
                                     Paradigm::naive_semi, Paradigm::trapo};
  return detail::parse_from(field, text, all);
}

template <>
inline DbPolicy parse_enum<DbPolicy>(std::string_view field, std::string_view text) {
  static constexpr DbPolicy all[] = {DbPolicy::additive, DbPolicy::recompute};
  return detail::parse_from(field, text, all);
}

}  // namespace trapo
