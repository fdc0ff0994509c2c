#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trapo/core.hpp"

namespace trapo {

/// Linear-softmax policy weights. Logits at step s are
/// `weights * concat(features, onehot(s))`, so the matrix is K x (d + L).
struct PolicyParams {
  Eigen::MatrixXd weights;
  std::size_t d = 0;

  PolicyParams() = default;
  PolicyParams(std::size_t K, std::size_t d_, std::size_t L)
      : weights(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d_ + L))), d(d_) {}

  std::size_t K() const noexcept { return static_cast<std::size_t>(weights.rows()); }
  std::size_t L() const noexcept { return static_cast<std::size_t>(weights.cols()) - d; }
  bool finite() const { return weights.allFinite(); }
};

inline Eigen::VectorXd step_logits(const PolicyParams& params, std::span<const double> features, std::size_t step) {
  const auto d = static_cast<Eigen::Index>(params.d);
  if (features.size() != params.d) throw std::invalid_argument("feature dimension does not match policy");
  if (step >= params.L()) throw std::out_of_range("step index beyond response length");
  const Eigen::Map<const Eigen::VectorXd> x(features.data(), d);
  return params.weights.leftCols(d) * x + params.weights.col(d + static_cast<Eigen::Index>(step));
}

/// softmax(logits / temperature), shifted by the max logit for stability.
inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits, double temperature = 1.0) {
  const Eigen::VectorXd z = logits / temperature;
  const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

inline Eigen::VectorXd step_probabilities(const PolicyParams& params, std::span<const double> features,
                                          std::size_t step, double temperature = 1.0) {
  return softmax(step_logits(params, features, step), temperature);
}

namespace detail {

/// grad += (dz / dW) contracted with `dloss_dlogit` at `step`.
inline void accumulate_outer(Eigen::MatrixXd& grad, const Eigen::VectorXd& dloss_dlogit,
                             std::span<const double> features, std::size_t d, std::size_t step) {
  const auto di = static_cast<Eigen::Index>(d);
  const Eigen::Map<const Eigen::VectorXd> x(features.data(), di);
  grad.leftCols(di).noalias() += dloss_dlogit * x.transpose();
  grad.col(di + static_cast<Eigen::Index>(step)) += dloss_dlogit;
}

inline double entropy(const Eigen::VectorXd& p) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k)
    if (p[k] > 0.0) h -= p[k] * std::log(p[k]);
  return h;
}

inline void check_group_shape(const RolloutGroup& group, const PolicyParams& params) {
  if (group.size() == 0) throw std::invalid_argument("rollout group is empty");
  for (const auto& r : group.responses)
    if (r.size() != params.L()) throw std::invalid_argument("response length does not match policy");
}

}  // namespace detail

struct AdvantageVector {
  QuestionId question_id = 0;
  std::vector<double> values;
  AdvantageMode mode = AdvantageMode::mean_only;
};

/// Group-relative advantages. std_normalized divides by the population
/// standard deviation; a zero-variance group gets all-zero advantages.
inline AdvantageVector group_advantages(std::span<const double> rewards, AdvantageMode mode) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;

  AdvantageVector out;
  out.mode = mode;
  out.values.resize(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  if (var == 0.0) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    return out;
  }
  const double scale = mode == AdvantageMode::std_normalized ? 1.0 / std::sqrt(var) : 1.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) out.values[i] = (rewards[i] - mean) * scale;
  return out;
}

/// Per-token ratios pi_new / pi_old, indexed [rollout][step].
inline std::vector<std::vector<double>> importance_ratios(const Question& question, const RolloutGroup& group,
                                                          const PolicyParams& old_params,
                                                          const PolicyParams& new_params,
                                                          double temperature = 1.0) {
  if (!old_params.finite() || !new_params.finite())
    throw std::invalid_argument("importance_ratios: non-finite parameters");
  detail::check_group_shape(group, old_params);
  std::vector<std::vector<double>> ratios(group.size(), std::vector<double>(old_params.L()));
  for (std::size_t s = 0; s < old_params.L(); ++s) {
    const Eigen::VectorXd p_old = step_probabilities(old_params, question.features, s, temperature);
    const Eigen::VectorXd p_new = step_probabilities(new_params, question.features, s, temperature);
    for (std::size_t j = 0; j < group.size(); ++j) {
      const auto k = static_cast<Eigen::Index>(group.responses[j][s]);
      if (p_old[k] <= 0.0)
        throw std::domain_error("importance_ratios: sampled token has zero old-policy probability");
      ratios[j][s] = p_new[k] / p_old[k];
    }
  }
  return ratios;
}

struct GrpoOptions {
  double clip_eps = 0.2;
  double kl_beta = 0.0;
  double entropy_coef = 0.01;
  double temperature = 1.0;
  AdvantageMode advantage_mode = AdvantageMode::mean_only;
  bool length_normalize = false;
};

inline GrpoOptions grpo_options(const TrainerConfig& config) {
  return {config.clip_eps,        config.kl_beta,        config.entropy_coef,
          config.rollout_temperature, config.advantage_mode, config.length_normalize};
}

struct LossAndGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;
};

/// Mean over steps of KL(pi_theta(.|q,s) || pi_ref(.|q,s)).
inline double kl_penalty(const PolicyParams& params, const PolicyParams& ref_params, const Question& question,
                         double temperature = 1.0) {
  double kl = 0.0;
  for (std::size_t s = 0; s < params.L(); ++s) {
    const Eigen::VectorXd p = step_probabilities(params, question.features, s, temperature);
    const Eigen::VectorXd q = step_probabilities(ref_params, question.features, s, temperature);
    for (Eigen::Index k = 0; k < p.size(); ++k)
      if (p[k] > 0.0) kl += p[k] * (std::log(p[k]) - std::log(q[k]));
  }
  return std::max(0.0, kl / static_cast<double>(params.L()));
}

/// Clipped-surrogate GRPO loss for one question and its exact gradient with
/// respect to `params` (old and reference parameters held fixed):
///
///   loss = -(1/Z) sum_j sum_s min(r A_j, clip(r, 1-eps, 1+eps) A_j)
///          + beta * KL(pi || pi_ref) - c_H * H(pi)
///
/// Z = G*L with length normalization, 1 otherwise. At the clip kink the
/// unclipped branch is differentiated.
inline LossAndGrad grpo_loss_and_grad(const Question& question, const RolloutGroup& group,
                                      std::span<const double> rewards, const PolicyParams& old_params,
                                      const PolicyParams& params, const PolicyParams& ref_params,
                                      const GrpoOptions& opt) {
  detail::check_group_shape(group, params);
  if (rewards.size() != group.size()) throw std::invalid_argument("grpo_loss_and_grad: reward count != G");
  const std::size_t G = group.size();
  const std::size_t L = params.L();
  const std::size_t d = params.d;
  const double tau = opt.temperature;
  const AdvantageVector adv = group_advantages(rewards, opt.advantage_mode);
  const double Z = opt.length_normalize ? static_cast<double>(G * L) : 1.0;

  LossAndGrad out;
  out.grad = Eigen::MatrixXd::Zero(params.weights.rows(), params.weights.cols());
  for (std::size_t s = 0; s < L; ++s) {
    const Eigen::VectorXd p_new = step_probabilities(params, question.features, s, tau);
    const Eigen::VectorXd p_old = step_probabilities(old_params, question.features, s, tau);
    Eigen::VectorXd dz = Eigen::VectorXd::Zero(p_new.size());

    for (std::size_t j = 0; j < G; ++j) {
      const double A = adv.values[j];
      if (A == 0.0) continue;
      const auto k = static_cast<Eigen::Index>(group.responses[j][s]);
      if (p_old[k] <= 0.0) throw std::domain_error("grpo_loss_and_grad: zero old-policy probability");
      const double r = p_new[k] / p_old[k];
      const double clipped = std::clamp(r, 1.0 - opt.clip_eps, 1.0 + opt.clip_eps);
      out.loss -= std::min(r * A, clipped * A) / Z;
      const bool unclipped = A > 0.0 ? r <= 1.0 + opt.clip_eps : r >= 1.0 - opt.clip_eps;
      if (unclipped) {
        // d(-rA/Z)/dz = -(A r / Z) (e_k - p) / tau
        const double w = -A * r / (Z * tau);
        dz -= w * p_new;
        dz[k] += w;
      }
    }

    if (opt.entropy_coef != 0.0) {
      const double h = detail::entropy(p_new);
      out.loss -= opt.entropy_coef * h / static_cast<double>(L);
      // dH/dz = -p (log p + H) / tau
      Eigen::VectorXd dh(p_new.size());
      for (Eigen::Index k = 0; k < p_new.size(); ++k)
        dh[k] = p_new[k] > 0.0 ? -p_new[k] * (std::log(p_new[k]) + h) / tau : 0.0;
      dz -= (opt.entropy_coef / static_cast<double>(L)) * dh;
    }

    if (opt.kl_beta != 0.0) {
      const Eigen::VectorXd q = step_probabilities(ref_params, question.features, s, tau);
      Eigen::VectorXd log_ratio = Eigen::VectorXd::Zero(p_new.size());
      double kl = 0.0;
      for (Eigen::Index k = 0; k < p_new.size(); ++k) {
        if (p_new[k] <= 0.0) continue;
        log_ratio[k] = std::log(p_new[k]) - std::log(q[k]);
        kl += p_new[k] * log_ratio[k];
      }
      out.loss += opt.kl_beta * kl / static_cast<double>(L);
      // dKL/dz = p (log p - log q - KL) / tau
      const Eigen::VectorXd dkl = (p_new.array() * (log_ratio.array() - kl)).matrix() / tau;
      dz += (opt.kl_beta / static_cast<double>(L)) * dkl;
    }

    detail::accumulate_outer(out.grad, dz, question.features, d, s);
  }

  if (!std::isfinite(out.loss) || !out.grad.allFinite())
    throw std::domain_error("grpo_loss_and_grad: non-finite loss for question " + std::to_string(question.id));
  return out;
}

struct PreferenceWeights {
  double positive = 0.0;  // (1-p)/sqrt(p(1-p))
  double negative = 0.0;  // p/sqrt(p(1-p))
};

inline PreferenceWeights preference_weights(double p) {
  if (p <= 0.0 || p >= 1.0) return {};
  const double sd = std::sqrt(p * (1.0 - p));
  return {(1.0 - p) / sd, p / sd};
}

struct ObjectiveAndGrad {
  double value = 0.0;
  Eigen::MatrixXd grad;
};

/// Weighted preference form of the binary-reward GRPO objective, on
/// sequence-level ratios:
///
///   J = p+ sum_correct min(R, 1+eps) - p- sum_incorrect max(R, 1-eps)
///
/// with R = pi(tau|q) / pi_old(tau|q). Returns the value and its gradient;
/// degenerate groups (p in {0, 1}) give zero.
inline ObjectiveAndGrad preference_objective_and_grad(const Question& question, const RolloutGroup& group,
                                                      std::span<const double> rewards,
                                                      const PolicyParams& old_params, const PolicyParams& params,
                                                      double eps, double temperature = 1.0) {
  detail::check_group_shape(group, params);
  if (rewards.size() != group.size()) throw std::invalid_argument("preference_objective: reward count != G");
  for (double r : rewards)
    if (r != 0.0 && r != 1.0) throw std::invalid_argument("preference_objective: rewards must be binary");

  ObjectiveAndGrad out;
  out.grad = Eigen::MatrixXd::Zero(params.weights.rows(), params.weights.cols());
  const double p = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  const PreferenceWeights w = preference_weights(p);
  if (w.positive == 0.0 && w.negative == 0.0) return out;

  const std::size_t L = params.L();
  std::vector<Eigen::VectorXd> p_new(L), p_old(L);
  for (std::size_t s = 0; s < L; ++s) {
    p_new[s] = step_probabilities(params, question.features, s, temperature);
    p_old[s] = step_probabilities(old_params, question.features, s, temperature);
  }

  for (std::size_t j = 0; j < group.size(); ++j) {
    double log_ratio = 0.0;
    for (std::size_t s = 0; s < L; ++s) {
      const auto k = static_cast<Eigen::Index>(group.responses[j][s]);
      log_ratio += std::log(p_new[s][k]) - std::log(p_old[s][k]);
    }
    const double R = std::exp(log_ratio);
    const bool correct = rewards[j] == 1.0;
    double coef = 0.0;
    if (correct) {
      out.value += w.positive * std::min(R, 1.0 + eps);
      if (R <= 1.0 + eps) coef = w.positive * R;
    } else {
      out.value -= w.negative * std::max(R, 1.0 - eps);
      if (R >= 1.0 - eps) coef = -w.negative * R;
    }
    if (coef == 0.0) continue;
    // dR/dz_s = R (e_k - p_s) / tau at every step.
    for (std::size_t s = 0; s < L; ++s) {
      const auto k = static_cast<Eigen::Index>(group.responses[j][s]);
      Eigen::VectorXd dz = -(coef / temperature) * p_new[s];
      dz[k] += coef / temperature;
      detail::accumulate_outer(out.grad, dz, question.features, params.d, s);
    }
  }
  return out;
}

inline double preference_objective(const Question& question, const RolloutGroup& group,
                                   std::span<const double> rewards, const PolicyParams& old_params,
                                   const PolicyParams& params, double eps, double temperature = 1.0) {
  return preference_objective_and_grad(question, group, rewards, old_params, params, eps, temperature).value;
}

}  // namespace trapo
