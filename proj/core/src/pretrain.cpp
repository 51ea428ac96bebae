#include "emorl/pretrain.hpp"

#include <chrono>
#include <cmath>

#include "emorl/error.hpp"
#include "emorl/rng.hpp"

namespace emorl {

Checkpoint bootstrap_checkpoint(std::span<const CorpusRecord> records, ModelConfig config, std::uint64_t seed,
                                std::size_t vocab_cap) {
  require(!records.empty(), "cannot bootstrap a model from an empty corpus");
  std::vector<std::string> texts;
  texts.reserve(records.size() * 2);
  for (const auto& r : records) {
    texts.push_back(r.prompt);
    texts.push_back(r.response);
  }
  Checkpoint ckpt;
  ckpt.vocab = Vocabulary::build(texts, vocab_cap);
  config.vocab_size = ckpt.vocab.size();
  config.validate();
  ckpt.config = config;
  ckpt.params = init_params(config, seed);
  return ckpt;
}

void PretrainConfig::validate() const {
  require(batch_size >= 1, "pretrain batch size must be at least 1");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, "pretrain learning rate must be non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
  require(epsilon > 0.0, "Adam epsilon must be positive");
}

namespace {

struct Example {
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;
};

Example make_example(const Checkpoint& ckpt, const CorpusRecord& rec) {
  Example ex;
  ex.prompt = clamp_prompt(ckpt.vocab.tokenize(rec.prompt), ckpt.config);
  if (ex.prompt.empty()) ex.prompt.push_back(Vocabulary::kUnknown);
  ex.target = ckpt.vocab.tokenize(rec.response);
  ex.target.push_back(Vocabulary::kEnd);
  if (ex.target.size() > ckpt.config.max_seq_len) ex.target.resize(ckpt.config.max_seq_len);
  return ex;
}

// Sum of token log-likelihoods for one example, recorded on the tape.
Var example_log_likelihood(const ModelConfig& config, const BoundParams& params, const Example& ex) {
  const Var enc = forward::encode(config, params, ex.prompt);
  std::vector<TokenId> prefix{Vocabulary::kBegin};
  prefix.insert(prefix.end(), ex.target.begin(), ex.target.end() - 1);
  const Var logp = ag::log_softmax(forward::lm_head(params, forward::decode(config, params, enc, prefix)), 1);
  return ag::sum(ag::gather(logp, ex.target));
}

}  // namespace

PretrainReport pretrain(Checkpoint& checkpoint, std::span<const CorpusRecord> records, const PretrainConfig& config) {
  config.validate();
  require(!records.empty(), "pretraining corpus is empty");
  checkpoint.validate();
  const auto start = std::chrono::steady_clock::now();

  std::vector<Example> examples;
  examples.reserve(records.size());
  for (const auto& r : records) examples.push_back(make_example(checkpoint, r));

  std::map<std::string, Tensor> m, v;
  for (const auto& [name, t] : checkpoint.params) {
    m.emplace(name, Tensor(t->shape()));
    v.emplace(name, Tensor(t->shape()));
  }

  Rng rng(config.seed);
  PretrainReport report;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    Tape tape;
    BoundParams bound(tape, checkpoint.params);
    for (const auto& [name, t] : checkpoint.params) bound.set(name, tape.parameter(name, t));
    std::vector<Var> terms;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Example& ex = examples[static_cast<std::size_t>(rng.below(examples.size()))];
      terms.push_back(example_log_likelihood(checkpoint.config, bound, ex));
      tokens += ex.target.size();
    }
    Var total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = ag::add(total, terms[i]);
    const Var loss = ag::scale(total, -1.0 / static_cast<double>(tokens));
    report.loss_curve.push_back(loss.value().item());

    const Gradients grads = tape.backward(loss);
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    for (auto& [name, ptr] : checkpoint.params) {
      const Tensor& g = grads.at(name);
      Tensor& mt = m.at(name);
      Tensor& vt = v.at(name);
      Tensor updated = *ptr;
      for (std::size_t i = 0; i < updated.numel(); ++i) {
        mt[i] = config.beta1 * mt[i] + (1.0 - config.beta1) * g[i];
        vt[i] = config.beta2 * vt[i] + (1.0 - config.beta2) * g[i] * g[i];
        updated[i] -= config.learning_rate * (mt[i] / bc1) / (std::sqrt(vt[i] / bc2) + config.epsilon);
      }
      check_finite(updated, "pretrain update");
      ptr = std::make_shared<const Tensor>(std::move(updated));
    }
    report.steps = step;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

double supervised_loss(const Checkpoint& checkpoint, std::span<const CorpusRecord> records) {
  require(!records.empty(), "supervised_loss needs at least one record");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& r : records) {
    const Example ex = make_example(checkpoint, r);
    Tape tape;
    const BoundParams bound(tape, checkpoint.params);
    total -= example_log_likelihood(checkpoint.config, bound, ex).value().item();
    tokens += ex.target.size();
  }
  return total / static_cast<double>(tokens);
}

}  // namespace emorl
