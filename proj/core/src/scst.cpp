#include "emorl/scst.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "emorl/rng.hpp"

namespace emorl {

std::string_view to_string(KlMode mode) { return mode == KlMode::full ? "full" : "sampled"; }

KlMode parse_kl_mode(std::string_view name) {
  if (name == "sampled") return KlMode::sampled;
  if (name == "full") return KlMode::full;
  fail("unknown KL mode '", name, "' (expected sampled or full)");
}

void RLConfig::validate() const {
  require(batch_size >= 1, "batch size must be at least 1");
  require(k >= 2, "k must be at least 2 so the baseline has something to compare, got ", k);
  require(std::isfinite(beta) && beta >= 0.0, "KL coefficient must be non-negative, got ", beta);
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, "learning rate must be non-negative");
  require(max_steps >= 1, "max_steps must be at least 1");
  require(ma_window >= 1, "moving-average window must be at least 1");
  require(threshold >= 0.0, "early-stop threshold must be non-negative");
  require(patience >= 1, "early-stop patience must be at least 1");
  require(temperature > 0.0, "sampling temperature must be positive");
  require(max_new_tokens >= 1, "max_new_tokens must be at least 1");
}

// ---------------------------------------------------------------------------

RewardSpec RewardSpec::single(std::string scorer) { return RewardSpec{{std::move(scorer)}, {1.0}}; }

RewardSpec RewardSpec::uniform(std::vector<std::string> scorers) {
  require(!scorers.empty(), "uniform reward needs at least one scorer");
  const double w = 1.0 / static_cast<double>(scorers.size());
  std::vector<double> weights(scorers.size(), w);
  return RewardSpec{std::move(scorers), std::move(weights)};
}

void RewardSpec::validate() const {
  require(!scorers.empty(), "reward spec names no scorer");
  require(weights.size() == scorers.size(), "reward spec has ", scorers.size(), " scorers but ", weights.size(),
          " weights");
  Preference{weights}.validate();
}

std::string RewardSpec::label() const {
  if (scorers.size() == 1) return scorers.front();
  std::string out = "weighted";
  for (const auto& s : scorers) out += "+" + s;
  return out;
}

RewardFunction::RewardFunction(const RewardSpec& spec, const ScorerRegistry& registry) : spec_(spec) {
  spec_.validate();
  for (const auto& name : spec_.scorers) scorers_.push_back(registry.get(name));
}

double RewardFunction::operator()(std::string_view prompt, std::string_view text) const {
  double r = 0.0;
  for (std::size_t i = 0; i < scorers_.size(); ++i) {
    const double s = scorers_[i]->score(prompt, text);
    require<NumericError>(std::isfinite(s), "scorer '", spec_.scorers[i], "' returned a non-finite reward");
    r += spec_.weights[i] * s;
  }
  return r;
}

// ---------------------------------------------------------------------------

std::vector<double> scst_advantages(std::span<const double> rewards) {
  require(!rewards.empty(), "no rewards");
  const double baseline = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back(r - baseline);
  return out;
}

double kl_penalty(std::span<const double> policy_log_probs, std::span<const double> reference_log_probs) {
  require(policy_log_probs.size() == reference_log_probs.size(), "kl_penalty: ", policy_log_probs.size(),
          " policy log-probs vs ", reference_log_probs.size(), " reference log-probs");
  require(!policy_log_probs.empty(), "kl_penalty needs at least one token");
  double total = 0.0;
  for (std::size_t i = 0; i < policy_log_probs.size(); ++i) total += policy_log_probs[i] - reference_log_probs[i];
  return total / static_cast<double>(policy_log_probs.size());
}

LossParts scst_loss(Tape& tape, const ModelConfig& config, const ParamStore& base, const LoraAdapter& adapter,
                    std::span<const PromptRollout> batch, double beta, KlMode mode) {
  require(!batch.empty(), "scst_loss: empty batch");
  require(beta >= 0.0, "KL coefficient must be non-negative");
  const BoundParams policy = bind_trainable(tape, base, adapter);
  const BoundParams reference(tape, base);

  std::vector<Var> policy_terms;
  std::vector<Var> kl_terms;
  std::size_t kl_count = 0;
  for (const PromptRollout& roll : batch) {
    require(roll.candidates.size() == roll.rewards.size(), "rollout has ", roll.candidates.size(), " candidates but ",
            roll.rewards.size(), " rewards");
    require(!roll.candidates.empty(), "rollout without candidates");
    const std::vector<double> adv = scst_advantages(roll.rewards);
    const Var enc = forward::encode(config, policy, roll.prompt);
    const Var enc_ref = forward::encode(config, reference, roll.prompt);
    for (std::size_t j = 0; j < roll.candidates.size(); ++j) {
      const auto& cand = roll.candidates[j];
      require(!cand.empty(), "empty candidate");
      std::vector<TokenId> prefix{Vocabulary::kBegin};
      prefix.insert(prefix.end(), cand.begin(), cand.end() - 1);
      const Var logp = ag::log_softmax(forward::lm_head(policy, forward::decode(config, policy, enc, prefix)), 1);
      const Var logp_ref =
          ag::log_softmax(forward::lm_head(reference, forward::decode(config, reference, enc_ref, prefix)), 1);
      const Var picked = ag::gather(logp, cand);
      policy_terms.push_back(ag::scale(ag::sum(picked), -adv[j]));
      if (mode == KlMode::sampled) {
        kl_terms.push_back(ag::sum(ag::sub(picked, ag::gather(logp_ref, cand))));
      } else {
        kl_terms.push_back(ag::sum(ag::mul(ag::softmax(logp, 1), ag::sub(logp, logp_ref))));
      }
      kl_count += cand.size();
    }
  }

  auto total_of = [](const std::vector<Var>& terms) {
    Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ag::add(acc, terms[i]);
    return acc;
  };
  LossParts out;
  out.policy = ag::scale(total_of(policy_terms), 1.0 / static_cast<double>(batch.size()));
  out.kl = ag::scale(total_of(kl_terms), 1.0 / static_cast<double>(kl_count));
  out.total = ag::add(out.policy, ag::scale(out.kl, beta));
  return out;
}

StepResult scst_step(const Checkpoint& base, const LoraAdapter& adapter, std::span<const std::vector<TokenId>> prompts,
                     const std::vector<std::string>& prompt_texts, const RewardFunction& reward, const RLConfig& config,
                     std::uint64_t step_seed) {
  config.validate();
  require(!prompts.empty(), "scst_step: empty batch");
  require(prompts.size() == prompt_texts.size(), "scst_step: ", prompts.size(), " prompts but ", prompt_texts.size(),
          " prompt texts");
  const WeightedAdapter wa{&adapter, 1.0};
  const Model policy(base.config, apply_lora(base.params, std::span(&wa, 1)));

  std::vector<PromptRollout> batch(prompts.size());
  double reward_sum = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    PromptRollout& roll = batch[i];
    roll.prompt = prompts[i];
    for (std::size_t j = 0; j < config.k; ++j) {
      const std::uint64_t seed = Rng::derive(step_seed, i * config.k + j);
      roll.candidates.push_back(policy.sample_generate(roll.prompt, config.max_new_tokens, config.temperature, seed));
      const double r = reward(prompt_texts[i], base.vocab.detokenize(roll.candidates.back()));
      roll.rewards.push_back(r);
      reward_sum += r;
    }
  }

  Tape tape;
  const LossParts loss = scst_loss(tape, base.config, base.params, adapter, batch, config.beta, config.kl_mode);
  StepResult out;
  out.loss = loss.total.value().item();
  out.policy_loss = loss.policy.value().item();
  out.kl = loss.kl.value().item();
  require<NumericError>(std::isfinite(out.loss), "non-finite SCST loss");
  out.mean_reward = reward_sum / static_cast<double>(prompts.size() * config.k);
  out.gradients = tape.backward(loss.total);
  return out;
}

void sgd_update(LoraAdapter& adapter, const Gradients& grads, double learning_rate) {
  for (auto& [name, f] : adapter.targets) {
    for (auto [tensor, leaf] : {std::pair{&f.a, lora_a_name(name)}, std::pair{&f.b, lora_b_name(name)}}) {
      auto it = grads.find(leaf);
      if (it == grads.end()) continue;
      require<ShapeError>(it->second.shape() == tensor->shape(), "gradient for ", leaf, " has shape ",
                          shape_string(it->second.shape()));
      for (std::size_t i = 0; i < tensor->numel(); ++i) (*tensor)[i] -= learning_rate * it->second[i];
    }
  }
}

// ---------------------------------------------------------------------------

double TrainReport::initial_moving_average() const {
  require(!curve.empty(), "empty reward curve");
  return curve[std::min(curve.size(), std::max<std::size_t>(ma_window, 1)) - 1].moving_average;
}

double TrainReport::final_moving_average() const {
  require(!curve.empty(), "empty reward curve");
  return curve.back().moving_average;
}

TrainResult train(const Checkpoint& base, const std::vector<std::string>& prompts, const RewardFunction& reward,
                  const RLConfig& config) {
  config.validate();
  require(!prompts.empty(), "training corpus is empty");
  const auto start = std::chrono::steady_clock::now();

  std::vector<std::vector<TokenId>> encoded;
  encoded.reserve(prompts.size());
  for (const auto& p : prompts) {
    auto ids = clamp_prompt(base.vocab.tokenize(p), base.config);
    if (ids.empty()) ids.push_back(Vocabulary::kUnknown);
    encoded.push_back(std::move(ids));
  }

  const std::vector<std::string> targets = config.targets.empty() ? attention_qv_names(base.config) : config.targets;
  TrainResult result{init_lora(base.params, targets, config.lora_rank, config.lora_alpha, Rng::derive(config.seed, 0)),
                     {}};
  TrainReport& report = result.report;
  report.objective = reward.spec().label();
  report.batch_size = config.batch_size;
  report.k = config.k;
  report.ma_window = config.ma_window;

  Rng picker(Rng::derive(config.seed, 1));
  double best_ma = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  double window_sum = 0.0;
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    std::vector<std::vector<TokenId>> batch_ids;
    std::vector<std::string> batch_text;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto idx = static_cast<std::size_t>(picker.below(prompts.size()));
      batch_ids.push_back(encoded[idx]);
      batch_text.push_back(prompts[idx]);
    }
    StepResult sr;
    try {
      sr = scst_step(base, result.adapter, batch_ids, batch_text, reward, config, Rng::derive(config.seed, 1000 + step));
    } catch (const NumericError& e) {
      // Inputs are fixed, so after an update a non-finite forward pass comes
      // from the adapter.
      if (step == 1) throw;
      throw DivergenceError(detail::concat("training diverged at step ", step, " (learning rate ",
                                           config.learning_rate, "): ", e.what()));
    }
    sgd_update(result.adapter, sr.gradients, config.learning_rate);
    for (const auto& [name, f] : result.adapter.targets) {
      if (!f.a.all_finite() || !f.b.all_finite()) {
        throw DivergenceError(detail::concat("training diverged at step ", step, ": adapter factor ", name,
                                             " became non-finite (loss ", sr.loss, ", learning rate ",
                                             config.learning_rate, ")"));
      }
    }

    window_sum += sr.mean_reward;
    if (report.curve.size() >= config.ma_window) window_sum -= report.curve[report.curve.size() - config.ma_window].mean_reward;
    const std::size_t in_window = std::min(step, config.ma_window);
    const double ma = window_sum / static_cast<double>(in_window);
    report.curve.push_back(CurvePoint{step, sr.mean_reward, sr.loss, sr.kl, ma});
    report.steps = step;

    if (step < config.ma_window) continue;
    if (ma > best_ma + config.threshold) {
      best_ma = ma;
      stale = 0;
    } else if (++stale >= config.patience) {
      report.stopped_early = true;
      break;
    }
  }

  report.data_points = static_cast<std::uint64_t>(report.steps) * config.batch_size * config.k;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

double t_total(std::span<const double> train_seconds, double aggregation_seconds) {
  require(!train_seconds.empty(), "t_total needs at least one training time");
  require(std::isfinite(aggregation_seconds) && aggregation_seconds >= 0.0, "aggregation time must be non-negative");
  double longest = 0.0;
  for (double t : train_seconds) {
    require(std::isfinite(t) && t >= 0.0, "training times must be non-negative");
    longest = std::max(longest, t);
  }
  return longest + aggregation_seconds;
}

double t_total(std::span<const TrainReport> reports, double aggregation_seconds) {
  std::vector<double> times;
  for (const auto& r : reports) times.push_back(r.wall_seconds);
  return t_total(times, aggregation_seconds);
}

std::string reward_curve_csv(const TrainReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "step,mean_reward,loss,kl,moving_average,data_points\n";
  for (const auto& c : report.curve) {
    os << c.step << ',' << c.mean_reward << ',' << c.loss << ',' << c.kl << ',' << c.moving_average << ','
       << c.step * report.batch_size * report.k << '\n';
  }
  return os.str();
}

}  // namespace emorl
