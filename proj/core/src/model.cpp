#include "emorl/model.hpp"

#include <algorithm>
#include <cmath>

#include "emorl/error.hpp"
#include "emorl/rng.hpp"

namespace emorl {

void ModelConfig::validate() const {
  require(vocab_size > Vocabulary::kReserved, "vocab_size must exceed the reserved token count, got ", vocab_size);
  validate_shape();
}

void ModelConfig::validate_shape() const {
  require(d_model >= 1 && n_heads >= 1 && n_enc_layers >= 1 && n_dec_layers >= 1 && d_ff >= 1 && max_seq_len >= 1,
          "model extents must all be at least 1");
  require(d_model % n_heads == 0, "d_model ", d_model, " is not divisible by n_heads ", n_heads);
}

namespace {

std::string layer_key(const char* stack, std::size_t layer, const char* rest) {
  return std::string(stack) + "." + std::to_string(layer) + "." + rest;
}

void add_norm(std::map<std::string, Shape>& out, const std::string& base, std::size_t d) {
  out[base + ".gain"] = {d};
  out[base + ".bias"] = {d};
}

void add_attention(std::map<std::string, Shape>& out, const std::string& base, std::size_t d) {
  for (const char* m : {"q", "k", "v", "o"}) out[base + "." + m] = {d, d};
}

void add_ffn(std::map<std::string, Shape>& out, const std::string& base, std::size_t d, std::size_t ff) {
  out[base + ".in.weight"] = {ff, d};
  out[base + ".in.bias"] = {ff};
  out[base + ".out.weight"] = {d, ff};
  out[base + ".out.bias"] = {d};
}

}  // namespace

std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  c.validate();
  std::map<std::string, Shape> out;
  out["embed.tokens"] = {c.vocab_size, c.d_model};
  out["embed.enc_pos"] = {c.max_seq_len, c.d_model};
  out["embed.dec_pos"] = {c.max_seq_len, c.d_model};
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    add_norm(out, layer_key("enc", l, "ln_attn"), c.d_model);
    add_attention(out, layer_key("enc", l, "attn"), c.d_model);
    add_norm(out, layer_key("enc", l, "ln_ffn"), c.d_model);
    add_ffn(out, layer_key("enc", l, "ffn"), c.d_model, c.d_ff);
  }
  add_norm(out, "enc.final_ln", c.d_model);
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    add_norm(out, layer_key("dec", l, "ln_self"), c.d_model);
    add_attention(out, layer_key("dec", l, "self"), c.d_model);
    add_norm(out, layer_key("dec", l, "ln_cross"), c.d_model);
    add_attention(out, layer_key("dec", l, "cross"), c.d_model);
    add_norm(out, layer_key("dec", l, "ln_ffn"), c.d_model);
    add_ffn(out, layer_key("dec", l, "ffn"), c.d_model, c.d_ff);
  }
  add_norm(out, "dec.final_ln", c.d_model);
  out["lm_head"] = {c.vocab_size, c.d_model};
  return out;
}

void validate_params(const ModelConfig& config, const ParamStore& params) {
  for (const auto& [name, shape] : parameter_shapes(config)) {
    auto it = params.find(name);
    require<FormatError>(it != params.end() && it->second != nullptr, "missing parameter '", name, "'");
    require<FormatError>(it->second->shape() == shape, "parameter '", name, "' has shape ",
                         shape_string(it->second->shape()), ", expected ", shape_string(shape));
  }
}

ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore out;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    Tensor t(shape);
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias");
    if (is_gain) {
      for (double& v : t.data()) v = 1.0;
    } else if (!is_bias) {
      double stddev = 1.0 / std::sqrt(static_cast<double>(shape.back()));
      if (name.starts_with("embed.")) stddev = 0.1;
      for (double& v : t.data()) v = stddev * rng.normal();
    }
    out.emplace(name, std::make_shared<const Tensor>(std::move(t)));
  }
  return out;
}

std::vector<std::string> attention_qv_names(const ModelConfig& c) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    out.push_back(layer_key("enc", l, "attn.q"));
    out.push_back(layer_key("enc", l, "attn.v"));
  }
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    for (const char* m : {"self.q", "self.v", "cross.q", "cross.v"}) out.push_back(layer_key("dec", l, m));
  }
  return out;
}

// ---------------------------------------------------------------------------

BoundParams::BoundParams(Tape& tape, const ParamStore& params) : tape_(&tape) {
  for (const auto& [name, value] : params) vars_.emplace(name, tape.constant(value));
}

void BoundParams::set(const std::string& name, Var value) { vars_[name] = value; }

Var BoundParams::operator()(const std::string& name) const {
  auto it = vars_.find(name);
  require<FormatError>(it != vars_.end(), "parameter '", name, "' is not bound");
  return it->second;
}

namespace forward {
namespace {

Var norm(const BoundParams& p, const Var& x, const std::string& base) {
  return ag::layer_norm(x, p(base + ".gain"), p(base + ".bias"));
}

Var attention(const ModelConfig& c, const BoundParams& p, const std::string& base, const Var& xq, const Var& xkv,
              bool causal) {
  const Var q = ag::linear(xq, p(base + ".q"));
  const Var k = ag::linear(xkv, p(base + ".k"));
  const Var v = ag::linear(xkv, p(base + ".v"));
  const std::size_t head_dim = c.d_model / c.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const std::size_t tq = xq.value().dim(0);
  const std::size_t tk = xkv.value().dim(0);

  Var mask;
  if (causal && tq > 1) {
    Tensor m({tq, tk});
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t j = i + 1; j < tk; ++j) m.at(i, j) = -1e9;
    mask = p.tape().constant(std::move(m));
  }

  std::vector<Var> heads;
  heads.reserve(c.n_heads);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const std::size_t lo = h * head_dim, hi = lo + head_dim;
    Var scores = ag::scale(ag::linear(ag::slice_cols(q, lo, hi), ag::slice_cols(k, lo, hi)), inv_sqrt);
    if (mask.valid()) scores = ag::add(scores, mask);
    heads.push_back(ag::matmul(ag::softmax(scores, 1), ag::slice_cols(v, lo, hi)));
  }
  const Var merged = heads.size() == 1 ? heads.front() : ag::concat_cols(heads);
  return ag::linear(merged, p(base + ".o"));
}

Var ffn(const BoundParams& p, const Var& x, const std::string& base) {
  const Var h = ag::gelu(ag::add_bias(ag::linear(x, p(base + ".in.weight")), p(base + ".in.bias")));
  return ag::add_bias(ag::linear(h, p(base + ".out.weight")), p(base + ".out.bias"));
}

}  // namespace

Var encode(const ModelConfig& c, const BoundParams& p, std::span<const TokenId> ids) {
  require(!ids.empty(), "cannot encode an empty prompt");
  require(ids.size() <= c.max_seq_len, "prompt length ", ids.size(), " exceeds max_seq_len ", c.max_seq_len);
  Var x = ag::add(ag::embedding(p("embed.tokens"), ids), ag::slice_rows(p("embed.enc_pos"), 0, ids.size()));
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    const Var h = norm(p, x, base + ".ln_attn");
    x = ag::add(x, attention(c, p, base + ".attn", h, h, false));
    x = ag::add(x, ffn(p, norm(p, x, base + ".ln_ffn"), base + ".ffn"));
  }
  return norm(p, x, "enc.final_ln");
}

Var decode(const ModelConfig& c, const BoundParams& p, const Var& encoder_states, std::span<const TokenId> prefix) {
  require(!prefix.empty() && prefix.front() == Vocabulary::kBegin, "decoder prefix must start with the begin token");
  require(prefix.size() <= c.max_seq_len, "decoder prefix length ", prefix.size(), " exceeds max_seq_len ",
          c.max_seq_len);
  require<ShapeError>(encoder_states.value().rank() == 2 && encoder_states.value().dim(1) == c.d_model,
                      "encoder states must be [len x ", c.d_model, "]");
  Var x = ag::add(ag::embedding(p("embed.tokens"), prefix), ag::slice_rows(p("embed.dec_pos"), 0, prefix.size()));
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    const std::string base = "dec." + std::to_string(l);
    const Var hs = norm(p, x, base + ".ln_self");
    x = ag::add(x, attention(c, p, base + ".self", hs, hs, true));
    x = ag::add(x, attention(c, p, base + ".cross", norm(p, x, base + ".ln_cross"), encoder_states, false));
    x = ag::add(x, ffn(p, norm(p, x, base + ".ln_ffn"), base + ".ffn"));
  }
  return norm(p, x, "dec.final_ln");
}

Var lm_head(const BoundParams& p, const Var& hidden) { return ag::linear(hidden, p("lm_head")); }

}  // namespace forward

// ---------------------------------------------------------------------------

std::size_t argmax(std::span<const double> values) {
  require(!values.empty(), "argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<TokenId> clamp_prompt(std::vector<TokenId> ids, const ModelConfig& config) {
  if (ids.size() > config.max_seq_len) ids.resize(config.max_seq_len);
  if (ids.empty()) ids.push_back(Vocabulary::kUnknown);
  return ids;
}

Model::Model(ModelConfig config, ParamStore params) : config_(config), params_(std::move(params)) {
  config_.validate();
  validate_params(config_, params_);
}

Tensor Model::encode(std::span<const TokenId> prompt) const {
  Tape tape;
  BoundParams p(tape, params_);
  return forward::encode(config_, p, prompt).value();
}

Tensor Model::decode_step(const Tensor& encoder_states, std::span<const TokenId> prefix) const {
  Tape tape;
  BoundParams p(tape, params_);
  const Var enc = tape.constant(encoder_states);
  const Var states = forward::decode(config_, p, enc, prefix);
  const std::size_t last = prefix.size() - 1;
  return ag::slice_rows(states, last, last + 1).value().reshaped({config_.d_model});
}

Tensor Model::lm_head(const Tensor& hidden) const {
  require<ShapeError>(hidden.numel() == config_.d_model, "lm_head expects a vector of extent ", config_.d_model,
                      ", got ", shape_string(hidden.shape()));
  Tape tape;
  BoundParams p(tape, params_);
  const Var h = tape.constant(hidden.reshaped({1, config_.d_model}));
  return forward::lm_head(p, h).value().reshaped({config_.vocab_size});
}

std::vector<TokenId> Model::greedy_generate(std::span<const TokenId> prompt, std::size_t max_new) const {
  const Tensor enc = encode(prompt);
  std::vector<TokenId> prefix{Vocabulary::kBegin};
  std::vector<TokenId> out;
  while (out.size() < max_new && prefix.size() <= config_.max_seq_len) {
    const Tensor logits = lm_head(decode_step(enc, prefix));
    const auto tok = static_cast<TokenId>(argmax(logits.data()));
    out.push_back(tok);
    if (tok == Vocabulary::kEnd || prefix.size() == config_.max_seq_len) break;
    prefix.push_back(tok);
  }
  return out;
}

std::vector<TokenId> Model::sample_generate(std::span<const TokenId> prompt, std::size_t max_new, double temperature,
                                            std::uint64_t seed) const {
  require(temperature > 0.0, "sampling temperature must be positive, got ", temperature);
  Rng rng(seed);
  const Tensor enc = encode(prompt);
  std::vector<TokenId> prefix{Vocabulary::kBegin};
  std::vector<TokenId> out;
  std::vector<double> probs(config_.vocab_size);
  while (out.size() < max_new && prefix.size() <= config_.max_seq_len) {
    const Tensor logits = lm_head(decode_step(enc, prefix));
    const double mx = logits[argmax(logits.data())];
    double z = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      probs[i] = std::exp((logits[i] - mx) / temperature);
      z += probs[i];
    }
    const double u = rng.uniform() * z;
    double cum = 0.0;
    std::size_t pick = probs.size() - 1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cum += probs[i];
      if (u < cum) {
        pick = i;
        break;
      }
    }
    // Guard against the rounding tail landing on a zero-probability id.
    while (probs[pick] == 0.0 && pick > 0) --pick;
    const auto tok = static_cast<TokenId>(pick);
    out.push_back(tok);
    if (tok == Vocabulary::kEnd || prefix.size() == config_.max_seq_len) break;
    prefix.push_back(tok);
  }
  return out;
}

std::vector<double> Model::sequence_log_prob(std::span<const TokenId> prompt, std::span<const TokenId> output) const {
  require(!output.empty(), "sequence_log_prob needs a non-empty output");
  for (TokenId t : output) {
    require(t >= 0 && static_cast<std::size_t>(t) < config_.vocab_size, "token id ", t, " out of range [0, ",
            config_.vocab_size, ")");
  }
  Tape tape;
  BoundParams p(tape, params_);
  const Var enc = forward::encode(config_, p, prompt);
  std::vector<TokenId> prefix{Vocabulary::kBegin};
  prefix.insert(prefix.end(), output.begin(), output.end() - 1);
  const Var logp = ag::log_softmax(forward::lm_head(p, forward::decode(config_, p, enc, prefix)), 1);
  const Var picked = ag::gather(logp, output);
  return picked.value().values();
}

}  // namespace emorl
