#include "emorl/aggregation.hpp"

#include <cmath>

#include <json.hpp>

#include "emorl/error.hpp"

namespace emorl {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::hidden: return "hidden";
    case Strategy::logit: return "logit";
    case Strategy::parameter: return "parameter";
  }
  return "hidden";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "hidden") return Strategy::hidden;
  if (name == "logit") return Strategy::logit;
  if (name == "parameter") return Strategy::parameter;
  fail("unknown aggregation strategy '", name, "' (expected hidden, logit or parameter)");
}

void EnsembleWeights::validate() const {
  require(!w.empty(), "ensemble weights must have at least one entry");
  for (std::size_t i = 0; i < w.size(); ++i) {
    require(w[i] >= 0.0 && w[i] <= 1.0, "ensemble weight ", i, " = ", w[i], " outside [0, 1]");
  }
}

EnsembleWeights EnsembleWeights::one_hot(std::size_t size, std::size_t index, Strategy strategy) {
  require(index < size, "one-hot index ", index, " out of range for ", size, " members");
  EnsembleWeights ew{std::vector<double>(size, 0.0), strategy};
  ew.w[index] = 1.0;
  return ew;
}

namespace {

Tensor weighted_sum(std::span<const Tensor> parts, std::span<const double> w, const char* what) {
  require(parts.size() == w.size(), what, ": ", parts.size(), " inputs for ", w.size(), " weights");
  const Shape& shape = parts.front().shape();
  Tensor out(shape);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require<ShapeError>(parts[i].shape() == shape, what, ": extent mismatch ", shape_string(parts[i].shape()), " vs ",
                        shape_string(shape));
    for (std::size_t j = 0; j < out.numel(); ++j) out[j] += w[i] * parts[i][j];
  }
  return out;
}

}  // namespace

Tensor aggregate_hidden(std::span<const Tensor> states, const EnsembleWeights& weights) {
  weights.validate();
  require(weights.strategy == Strategy::hidden, "aggregate_hidden needs the hidden strategy");
  return weighted_sum(states, weights.w, "aggregate_hidden");
}

Tensor aggregate_logits(std::span<const Tensor> logits, const EnsembleWeights& weights, LogitSpace space) {
  weights.validate();
  require(weights.strategy == Strategy::logit, "aggregate_logits needs the logit strategy");
  if (space == LogitSpace::logits) return weighted_sum(logits, weights.w, "aggregate_logits");
  std::vector<Tensor> probs;
  probs.reserve(logits.size());
  for (const Tensor& l : logits) {
    Tensor p(l.shape());
    const double mx = l[argmax(l.data())];
    double z = 0.0;
    for (std::size_t j = 0; j < l.numel(); ++j) {
      p[j] = std::exp(l[j] - mx);
      z += p[j];
    }
    for (double& v : p.data()) v /= z;
    probs.push_back(std::move(p));
  }
  return weighted_sum(probs, weights.w, "aggregate_logits");
}

Checkpoint merge_parameters(const Checkpoint& base, std::span<const LoraAdapter> adapters,
                            const EnsembleWeights& weights) {
  weights.validate();
  require(weights.strategy == Strategy::parameter, "merge_parameters needs the parameter strategy");
  require(adapters.size() == weights.w.size(), "merge_parameters: ", adapters.size(), " adapters for ",
          weights.w.size(), " weights");
  std::vector<WeightedAdapter> weighted;
  for (std::size_t i = 0; i < adapters.size(); ++i) weighted.push_back({&adapters[i], weights.w[i]});
  Checkpoint merged = base;
  merged.params = apply_lora(base.params, weighted);
  return merged;
}

// ---------------------------------------------------------------------------

Ensemble::Ensemble(std::shared_ptr<const Checkpoint> base, std::vector<LoraAdapter> adapters,
                   std::vector<std::string> objectives)
    : base_(std::move(base)),
      adapters_(std::move(adapters)),
      objectives_(std::move(objectives)),
      base_model_(base_->config, base_->params) {
  require(!adapters_.empty(), "an ensemble needs at least one adapter");
  if (objectives_.empty()) {
    for (std::size_t i = 0; i < adapters_.size(); ++i) objectives_.push_back("objective_" + std::to_string(i));
  }
  require(objectives_.size() == adapters_.size(), "ensemble has ", adapters_.size(), " adapters but ",
          objectives_.size(), " objective names");
  members_.reserve(adapters_.size());
  for (const auto& adapter : adapters_) {
    const WeightedAdapter wa{&adapter, 1.0};
    members_.emplace_back(base_->config, apply_lora(base_->params, std::span(&wa, 1)));
  }
}

std::vector<TokenId> Ensemble::generate(const EnsembleWeights& weights, std::span<const TokenId> prompt,
                                        std::size_t max_new, LogitSpace space) const {
  weights.validate();
  require(weights.w.size() == size(), "ensemble has ", size(), " members but ", weights.w.size(), " weights");

  if (weights.strategy == Strategy::parameter) {
    const Checkpoint merged = merge_parameters(*base_, adapters_, weights);
    return Model(merged.config, merged.params).greedy_generate(prompt, max_new);
  }

  const ModelConfig& cfg = base_->config;
  std::vector<Tensor> encoded;
  encoded.reserve(size());
  for (const Model& m : members_) encoded.push_back(m.encode(prompt));

  std::vector<TokenId> prefix{Vocabulary::kBegin};
  std::vector<TokenId> out;
  std::vector<Tensor> per_member(size());
  while (out.size() < max_new && prefix.size() <= cfg.max_seq_len) {
    for (std::size_t i = 0; i < size(); ++i) per_member[i] = members_[i].decode_step(encoded[i], prefix);
    Tensor logits;
    if (weights.strategy == Strategy::hidden) {
      logits = base_model_.lm_head(aggregate_hidden(per_member, weights));
    } else {
      for (std::size_t i = 0; i < size(); ++i) per_member[i] = members_[i].lm_head(per_member[i]);
      logits = aggregate_logits(per_member, weights, space);
    }
    const auto tok = static_cast<TokenId>(argmax(logits.data()));
    out.push_back(tok);
    if (tok == Vocabulary::kEnd || prefix.size() == cfg.max_seq_len) break;
    prefix.push_back(tok);
  }
  return out;
}

// ---------------------------------------------------------------------------

using nlohmann::json;

std::string ensemble_manifest_to_json(const EnsembleManifest& m) {
  std::vector<std::string> adapters;
  for (const auto& p : m.adapters) adapters.push_back(p.generic_string());
  json doc{{"base", m.base.generic_string()},
           {"adapters", adapters},
           {"objectives", m.objectives},
           {"strategy", std::string(to_string(m.strategy))}};
  return doc.dump(2);
}

EnsembleManifest ensemble_manifest_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    EnsembleManifest m;
    m.base = doc.at("base").get<std::string>();
    for (const auto& p : doc.at("adapters")) m.adapters.emplace_back(p.get<std::string>());
    m.objectives = doc.at("objectives").get<std::vector<std::string>>();
    m.strategy = parse_strategy(doc.value("strategy", std::string("hidden")));
    require<FormatError>(m.adapters.size() == m.objectives.size(), "ensemble manifest lists ", m.adapters.size(),
                         " adapters but ", m.objectives.size(), " objectives");
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed ensemble manifest: ") + e.what());
  }
}

void save_ensemble_manifest(const EnsembleManifest& manifest, const std::filesystem::path& path) {
  write_text_file(path, ensemble_manifest_to_json(manifest));
}

EnsembleManifest load_ensemble_manifest(const std::filesystem::path& path) {
  return ensemble_manifest_from_json(read_text_file(path));
}

Ensemble load_ensemble(const std::filesystem::path& manifest_path) {
  const EnsembleManifest m = load_ensemble_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  auto resolve = [&](const std::filesystem::path& p) { return p.is_absolute() ? p : dir / p; };
  auto base = std::make_shared<const Checkpoint>(load_checkpoint(resolve(m.base)));
  std::vector<LoraAdapter> adapters;
  for (const auto& p : m.adapters) adapters.push_back(load_adapter(resolve(p)));
  return Ensemble(std::move(base), std::move(adapters), m.objectives);
}

}  // namespace emorl
