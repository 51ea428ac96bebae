#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emorl/checkpoint.hpp"
#include "emorl/error.hpp"
#include "emorl/lora.hpp"
#include "emorl/objectives.hpp"

namespace emorl {

/// How the KL term toward the reference model is formed.
///   sampled  mean over sampled tokens of log pi - log pi_ref
///   full     mean over sampled positions of the full-vocabulary KL
enum class KlMode { sampled, full };

std::string_view to_string(KlMode mode);
KlMode parse_kl_mode(std::string_view name);

struct RLConfig {
  std::size_t batch_size = 16;
  std::size_t k = 4;
  double beta = 0.05;
  double learning_rate = 0.05;
  std::size_t max_steps = 10'000;
  std::size_t ma_window = 20;
  double threshold = 0.005;
  std::size_t patience = 50;
  double temperature = 1.0;
  std::size_t max_new_tokens = 12;
  KlMode kl_mode = KlMode::sampled;
  std::uint64_t seed = 0;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::vector<std::string> targets;  // empty means every attention q/v

  void validate() const;
};

/// One scorer, or several combined as sum_i lambda_i * r_i.
struct RewardSpec {
  std::vector<std::string> scorers;
  std::vector<double> weights;

  static RewardSpec single(std::string scorer);
  /// Equal weights 1/n.
  static RewardSpec uniform(std::vector<std::string> scorers);
  void validate() const;
  std::string label() const;
};

/// RewardSpec bound to concrete scorers.
class RewardFunction {
 public:
  RewardFunction(const RewardSpec& spec, const ScorerRegistry& registry);
  double operator()(std::string_view prompt, std::string_view text) const;
  const RewardSpec& spec() const noexcept { return spec_; }

 private:
  RewardSpec spec_;
  std::vector<ScorerPtr> scorers_;
};

/// Candidates already sampled for one prompt, with their rewards.
struct PromptRollout {
  std::vector<TokenId> prompt;
  std::vector<std::vector<TokenId>> candidates;
  std::vector<double> rewards;
};

/// r_j - mean(r).
std::vector<double> scst_advantages(std::span<const double> rewards);

/// Mean of per-token (log pi - log pi_ref); both spans cover the same tokens.
double kl_penalty(std::span<const double> policy_log_probs, std::span<const double> reference_log_probs);

struct LossParts {
  Var total;
  Var policy;
  Var kl;
};

/// Records the SCST objective for fixed rollouts on `tape`:
///   policy = mean over prompts of -sum_j a_j * log pi(candidate_j)
///   total  = policy + beta * kl
/// Only the adapter factors are gradient leaves.
LossParts scst_loss(Tape& tape, const ModelConfig& config, const ParamStore& base, const LoraAdapter& adapter,
                    std::span<const PromptRollout> batch, double beta, KlMode mode);

struct StepResult {
  double loss = 0.0;
  double policy_loss = 0.0;
  double kl = 0.0;
  double mean_reward = 0.0;
  Gradients gradients;
};

/// Samples k candidates per prompt from the adapted policy, scores them and
/// returns the loss with gradients for every adapter factor. Candidate
/// sampling is seeded by `step_seed`. Does not update the adapter.
StepResult scst_step(const Checkpoint& base, const LoraAdapter& adapter, std::span<const std::vector<TokenId>> prompts,
                     const std::vector<std::string>& prompt_texts, const RewardFunction& reward, const RLConfig& config,
                     std::uint64_t step_seed);

/// Plain SGD on every factor named in `grads`.
void sgd_update(LoraAdapter& adapter, const Gradients& grads, double learning_rate);

struct CurvePoint {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double kl = 0.0;
  double moving_average = 0.0;
};

struct TrainReport {
  std::string objective;
  std::size_t steps = 0;
  std::size_t batch_size = 0;
  std::size_t k = 0;
  std::size_t ma_window = 0;
  std::uint64_t data_points = 0;  // steps * batch_size * k
  double wall_seconds = 0.0;
  bool stopped_early = false;
  std::vector<CurvePoint> curve;
  std::string adapter_path;

  /// Moving average once the first window is full (or at the last step if
  /// training stopped sooner).
  double initial_moving_average() const;
  double final_moving_average() const;
};

/// Raised when training produces non-finite parameters.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(what, "divergence") {}
};

struct TrainResult {
  LoraAdapter adapter;
  TrainReport report;
};

/// SCST fine-tuning of a fresh adapter. Stops after max_steps, or once the
/// moving-average reward has failed to beat its best by `threshold` for
/// `patience` consecutive steps.
TrainResult train(const Checkpoint& base, const std::vector<std::string>& prompts, const RewardFunction& reward,
                  const RLConfig& config);

/// max_i train time + aggregation time.
double t_total(std::span<const double> train_seconds, double aggregation_seconds);
double t_total(std::span<const TrainReport> reports, double aggregation_seconds);

/// step,mean_reward,loss,kl,moving_average,data_points
std::string reward_curve_csv(const TrainReport& report);

}  // namespace emorl
