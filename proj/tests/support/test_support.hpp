#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "emorl/autograd.hpp"
#include "emorl/checkpoint.hpp"
#include "emorl/lora.hpp"
#include "emorl/model.hpp"
#include "emorl/rng.hpp"
#include "emorl/tensor.hpp"

namespace emorl::testing {

inline std::filesystem::path data_dir() { return EMORL_TEST_DATA_DIR; }

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.uniform(-1.0, 1.0);
  return t;
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning round-off into large ratios.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using LossBuilder = std::function<Var(Tape&, const std::map<std::string, Tensor>&)>;

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares backward() against central differences for every entry of every
/// named input. The builder must register each input with tape.parameter.
inline GradCheck check_gradients(const LossBuilder& build, const std::map<std::string, Tensor>& inputs,
                                 double step = 1e-4, double floor = 1e-3) {
  GradCheck out;
  Tape tape;
  const Var loss = build(tape, inputs);
  const Gradients grads = tape.backward(loss);
  for (const auto& [name, value] : inputs) {
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < value.numel(); ++i) {
      auto shifted = inputs;
      shifted[name][i] = value[i] + step;
      Tape up;
      const double f_up = build(up, shifted).value().item();
      shifted[name][i] = value[i] - step;
      Tape down;
      const double f_down = build(down, shifted).value().item();
      const double numeric = (f_up - f_down) / (2.0 * step);
      const double rel = relative_error(g[i], numeric, floor);
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

inline ModelConfig micro_config(std::size_t vocab = 24) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.max_seq_len = 16;
  return c;
}

inline ModelConfig small_config(std::size_t vocab = 40) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 32;
  c.max_seq_len = 24;
  return c;
}

/// Vocabulary of w0..w{n-1} after the reserved ids.
inline Vocabulary synthetic_vocab(std::size_t size) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i + Vocabulary::kReserved < size; ++i) words.push_back("w" + std::to_string(i));
  return Vocabulary::build(words, size);
}

inline std::shared_ptr<Checkpoint> random_checkpoint(const ModelConfig& config, std::uint64_t seed) {
  auto ck = std::make_shared<Checkpoint>();
  ck->config = config;
  ck->vocab = synthetic_vocab(config.vocab_size);
  ck->params = init_params(config, seed);
  return ck;
}

/// Fresh adapter with B drawn at random too, so it actually moves the model.
inline LoraAdapter random_adapter(const ParamStore& base, const ModelConfig& config, std::uint64_t seed,
                                  double b_scale = 0.3) {
  LoraAdapter a = init_lora(base, attention_qv_names(config), 2, 4.0, seed);
  Rng rng(Rng::derive(seed, 77));
  for (auto& [name, f] : a.targets) {
    for (auto& v : f.a.data()) v = rng.normal() * 0.3;
    for (auto& v : f.b.data()) v = rng.normal() * b_scale;
  }
  return a;
}

inline std::vector<std::vector<TokenId>> random_prompts(std::size_t count, std::size_t vocab, Rng& rng,
                                                        std::size_t min_len = 2, std::size_t max_len = 7) {
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    std::vector<TokenId> p;
    for (std::size_t j = 0; j < len; ++j) {
      p.push_back(static_cast<TokenId>(Vocabulary::kReserved + rng.below(vocab - Vocabulary::kReserved)));
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace emorl::testing
