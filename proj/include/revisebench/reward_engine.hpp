#pragma once

// Verifiable rewards for forecast revision (ExpMAE, ImpRatio), GRPO group
// advantages and reward-collapse diagnostics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "revisebench/error.hpp"
#include "revisebench/metrics.hpp"
#include "revisebench/numeric.hpp"

namespace revisebench {

enum class RewardKind { exp_mae, imp_ratio };

inline std::string_view to_string(RewardKind k) { return k == RewardKind::exp_mae ? "exp_mae" : "imp_ratio"; }

inline RewardKind parse_reward_kind(std::string_view s) {
  if (s == "exp_mae") return RewardKind::exp_mae;
  if (s == "imp_ratio") return RewardKind::imp_ratio;
  throw ConfigError("unknown reward kind '" + std::string(s) + "'");
}

struct RewardConfig {
  RewardKind kind = RewardKind::imp_ratio;
  double gamma = 10.0;
  double eps = 1e-8;
  double eps_std = 1e-4;
  double zero_std_threshold = 1e-6;
  double invalid_reward = 0.0;

  void validate() const {
    if (!(gamma > 0.0) || !(eps > 0.0) || !(eps_std > 0.0) || !(zero_std_threshold >= 0.0)) {
      throw ConfigError("reward config: gamma, eps and eps_std must be > 0");
    }
  }
};

struct RewardOutcome {
  double reward = 0.0;
  std::optional<double> imp_ratio;
  std::optional<double> mae;
  double prior_mae = 0.0;
  bool valid = false;
};

/// Improvement of the revision over the prior, normalised by the prior's error:
/// (MAE(prior) - MAE(revision)) / (MAE(prior) + eps). Zero on a tie.
inline double imp_ratio(double mae, double prior_mae, double eps) { return (prior_mae - mae) / (prior_mae + eps); }

/// Reward from already computed errors; an empty mae marks an invalid completion.
inline RewardOutcome reward_from_mae(std::optional<double> mae, double prior_mae, const RewardConfig& config) {
  RewardOutcome out;
  out.prior_mae = prior_mae;
  if (!mae) {
    out.reward = config.invalid_reward;
    return out;
  }
  out.valid = true;
  out.mae = *mae;
  if (config.kind == RewardKind::exp_mae) {
    out.reward = std::exp(-*mae / config.gamma);
  } else {
    out.imp_ratio = imp_ratio(*mae, prior_mae, config.eps);
    out.reward = std::clamp(0.5 + 0.5 * *out.imp_ratio, 0.0, 1.0);
  }
  return out;
}

inline RewardOutcome reward(std::optional<std::span<const double>> forecast, std::span<const double> prior,
                            std::span<const double> truth, const RewardConfig& config) {
  if (prior.size() != truth.size()) throw ValidationError("reward: prior and ground truth lengths differ");
  const double prior_mae = mean_absolute_error(prior, truth);
  if (!forecast) return reward_from_mae(std::nullopt, prior_mae, config);
  if (forecast->size() != truth.size()) throw ValidationError("reward: forecast length differs from horizon");
  return reward_from_mae(mean_absolute_error(*forecast, truth), prior_mae, config);
}

// ---------------------------------------------------------------------------
// GRPO advantages

struct AdvantageGroup {
  std::string prompt_id;
  std::vector<double> rewards;
  double mean = 0.0;
  double std_dev = 0.0;  // population
  std::vector<double> advantages;
};

/// A_i = (R_i - mean) / (std + eps_std), population std. The mean is taken
/// as R_0 + mean(R_i - R_0) so a uniform group gives exactly zero advantages.
inline AdvantageGroup group_advantages(std::span<const double> rewards, const RewardConfig& config,
                                       std::string prompt_id = {}) {
  if (rewards.size() < 2) throw ValidationError("group_advantages: need at least two completions per group");
  AdvantageGroup g;
  g.prompt_id = std::move(prompt_id);
  g.rewards.assign(rewards.begin(), rewards.end());
  const double n = static_cast<double>(rewards.size());
  const double r0 = rewards[0];
  double shift = 0.0;
  for (double r : rewards) shift += r - r0;
  g.mean = r0 + shift / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - g.mean) * (r - g.mean);
  g.std_dev = std::sqrt(ss / n);
  g.advantages.reserve(rewards.size());
  for (double r : rewards) g.advantages.push_back((r - g.mean) / (g.std_dev + config.eps_std));
  return g;
}

// ---------------------------------------------------------------------------
// Collapse diagnostics

struct CollapseReport {
  double mean_group_std = 0.0;
  double zero_std_fraction = 0.0;
  std::size_t collapse_steps = 0;
  std::size_t groups_per_step = 0;
  std::size_t groups = 0;
  std::size_t steps = 0;
};

/// Logging steps are consecutive blocks of step_size groups (the last block
/// may be shorter); a step collapses when at least half of its groups have
/// std below the threshold.
inline CollapseReport collapse_diagnostics(std::span<const AdvantageGroup> groups, std::size_t step_size,
                                           double zero_std_threshold) {
  if (groups.empty()) throw ValidationError("collapse_diagnostics: no groups");
  if (step_size < 1) throw ValidationError("collapse_diagnostics: step_size must be >= 1");
  CollapseReport r;
  r.groups = groups.size();
  r.groups_per_step = step_size;
  std::size_t zero = 0;
  double std_sum = 0.0;
  for (std::size_t b = 0; b < groups.size(); b += step_size) {
    const std::size_t e = std::min(groups.size(), b + step_size);
    std::size_t block_zero = 0;
    for (std::size_t i = b; i < e; ++i) {
      std_sum += groups[i].std_dev;
      if (groups[i].std_dev < zero_std_threshold) ++block_zero;
    }
    zero += block_zero;
    ++r.steps;
    if (2 * block_zero >= e - b) ++r.collapse_steps;
  }
  r.mean_group_std = std_sum / static_cast<double>(groups.size());
  r.zero_std_fraction = static_cast<double>(zero) / static_cast<double>(groups.size());
  return r;
}

inline nlohmann::json collapse_to_json(const CollapseReport& r) {
  return {{"mean_group_std", r.mean_group_std}, {"zero_std_fraction", r.zero_std_fraction},
          {"collapse_steps", r.collapse_steps}, {"groups_per_step", r.groups_per_step},
          {"groups", r.groups},                 {"steps", r.steps}};
}

struct ContrastParams {
  std::uint64_t seed = 0;
  std::size_t n_groups = 500;
  std::size_t group_size = 4;
  double mae_lo = 50.0;
  double mae_hi = 200.0;
  double perturbation = 0.1;
  std::size_t step_size = 20;
};

struct RewardContrast {
  CollapseReport exp_mae;
  CollapseReport imp_ratio;
};

/// Synthetic groups: prior MAE ~ U[lo, hi], candidate MAE = prior MAE * (1 + p * u),
/// u ~ U[-1, 1] (floored at 0). Both reward kinds score the same draws.
inline RewardContrast simulate_reward_contrast(const ContrastParams& p, RewardConfig config = {}) {
  if (!(p.mae_lo > 0.0) || !(p.mae_hi > p.mae_lo)) throw ValidationError("simulate: need 0 < lo < hi");
  if (p.group_size < 2) throw ValidationError("simulate: group_size must be >= 2");
  if (p.n_groups < 1) throw ValidationError("simulate: n_groups must be >= 1");
  Rng rng(p.seed);
  RewardConfig exp_cfg = config, imp_cfg = config;
  exp_cfg.kind = RewardKind::exp_mae;
  imp_cfg.kind = RewardKind::imp_ratio;
  std::vector<AdvantageGroup> exp_groups, imp_groups;
  std::vector<double> exp_r(p.group_size), imp_r(p.group_size);
  for (std::size_t g = 0; g < p.n_groups; ++g) {
    const double prior_mae = rng.uniform(p.mae_lo, p.mae_hi);
    for (std::size_t j = 0; j < p.group_size; ++j) {
      const double mae = prior_mae * std::max(0.0, 1.0 + p.perturbation * rng.uniform(-1.0, 1.0));
      exp_r[j] = reward_from_mae(mae, prior_mae, exp_cfg).reward;
      imp_r[j] = reward_from_mae(mae, prior_mae, imp_cfg).reward;
    }
    exp_groups.push_back(group_advantages(exp_r, exp_cfg));
    imp_groups.push_back(group_advantages(imp_r, imp_cfg));
  }
  return {collapse_diagnostics(exp_groups, p.step_size, config.zero_std_threshold),
          collapse_diagnostics(imp_groups, p.step_size, config.zero_std_threshold)};
}

// ---------------------------------------------------------------------------
// Audit log and trainer config record

struct AuditRow {
  std::string prompt_id;
  std::size_t completion_idx = 0;
  RewardKind kind = RewardKind::imp_ratio;
  RewardOutcome outcome;
  double advantage = 0.0;
  double group_std = 0.0;
};

inline std::vector<AuditRow> audit_group(const std::string& prompt_id, const std::vector<RewardOutcome>& outcomes,
                                         const RewardConfig& config, AdvantageGroup* group_out = nullptr) {
  std::vector<double> rewards;
  for (const auto& o : outcomes) rewards.push_back(o.reward);
  auto g = group_advantages(rewards, config, prompt_id);
  std::vector<AuditRow> rows;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    rows.push_back({prompt_id, i, config.kind, outcomes[i], g.advantages[i], g.std_dev});
  }
  if (group_out) *group_out = std::move(g);
  return rows;
}

inline void write_audit_csv(std::ostream& out, const std::vector<AuditRow>& rows) {
  out << "prompt_id,completion_idx,kind,mae,prior_mae,imp_ratio,reward,advantage,group_std\n";
  for (const auto& r : rows) {
    out << r.prompt_id << ',' << r.completion_idx << ',' << to_string(r.kind) << ','
        << (r.outcome.mae ? format_number(*r.outcome.mae) : "") << ',' << format_number(r.outcome.prior_mae) << ','
        << (r.outcome.imp_ratio ? format_number(*r.outcome.imp_ratio) : "") << ',' << format_number(r.outcome.reward)
        << ',' << format_number(r.advantage) << ',' << format_number(r.group_std) << '\n';
  }
}

/// Hyperparameters handed to an external GRPO trainer. Written, never read back.
inline nlohmann::json rl_config_record(const RewardConfig& config) {
  return {{"objective_family", "GRPO"},
          {"reward", std::string(to_string(config.kind))},
          {"reward_params", {{"gamma", config.gamma}, {"eps", config.eps}, {"eps_std", config.eps_std}}},
          {"finetuning_type", "LoRA"},
          {"lora", {{"rank", 8}, {"alpha", 32}, {"dropout", 0.05}}},
          {"max_sequence_length", 10240},
          {"max_completion_length", 1024},
          {"per_device_train_batch_size", 4},
          {"gradient_accumulation_steps", 2},
          {"learning_rate", 1.0e-5},
          {"weight_decay", 0.01},
          {"epochs", 8},
          {"warmup_ratio", 0.03},
          {"max_grad_norm", 0.3},
          {"num_generations", 4},
          {"steps_per_generation", 5},
          {"temperature", 0.9},
          {"top_p", 0.9},
          {"top_k", 50},
          {"kl_beta", 0.04},
          {"clip_epsilon", 0.2}};
}

}  // namespace revisebench
