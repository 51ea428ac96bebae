#include <gtest/gtest.h>

#include "emorl/aggregation.hpp"
#include "emorl/error.hpp"
#include "test_support.hpp"

using namespace emorl;
using namespace emorl::testing;

namespace {

const std::vector<TokenId> kPrompt{5, 9, 13, 21, 7};

struct Fixture {
  std::shared_ptr<Checkpoint> base = random_checkpoint(small_config(40), 2024);
  std::vector<LoraAdapter> adapters;
  Fixture() {
    for (std::uint64_t i = 0; i < 3; ++i) adapters.push_back(random_adapter(base->params, base->config, 500 + i));
  }
  Ensemble ensemble() const { return Ensemble(base, adapters, {"a", "b", "c"}); }
};

}  // namespace

TEST(EnsembleWeights, ValidationAndOneHot) {
  EXPECT_NO_THROW((EnsembleWeights{{0.94375, 0.59365, 0.0875}, Strategy::hidden}.validate()));
  EXPECT_THROW((EnsembleWeights{{1.2, 0.0}, Strategy::hidden}.validate()), InvalidArgument);
  EXPECT_THROW((EnsembleWeights{{-0.1, 0.5}, Strategy::hidden}.validate()), InvalidArgument);
  EXPECT_THROW((EnsembleWeights{{}, Strategy::hidden}.validate()), InvalidArgument);
  EXPECT_EQ(EnsembleWeights::one_hot(3, 1, Strategy::logit).w, (std::vector<double>{0, 1, 0}));
  EXPECT_EQ(parse_strategy("parameter"), Strategy::parameter);
  EXPECT_THROW(parse_strategy("median"), InvalidArgument);
}

TEST(AggregateHidden, OneHotAndLinearity) {
  const std::vector<Tensor> states{Tensor::vector({2, 0}), Tensor::vector({0, 2})};
  EXPECT_EQ(aggregate_hidden(states, {{1, 0}, Strategy::hidden}), states[0]);
  EXPECT_EQ(aggregate_hidden(states, {{0.5, 0.5}, Strategy::hidden}), Tensor::vector({1, 1}));

  Rng rng(1);
  const std::vector<Tensor> many{random_tensor({5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)};
  const EnsembleWeights w{{0.8, 0.4, 0.6}, Strategy::hidden};
  const EnsembleWeights half{{0.4, 0.2, 0.3}, Strategy::hidden};
  const Tensor full = aggregate_hidden(many, w);
  const Tensor scaled = aggregate_hidden(many, half);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(scaled[i], 0.5 * full[i], 1e-15);
}

TEST(AggregateHidden, AcceptsWeightsNotSummingToOne) {
  const std::vector<Tensor> states{Tensor::vector({1}), Tensor::vector({1}), Tensor::vector({1})};
  const Tensor out = aggregate_hidden(states, {{0.94375, 0.59365, 0.0875}, Strategy::hidden});
  EXPECT_NEAR(out[0], 0.94375 + 0.59365 + 0.0875, 1e-15);
}

TEST(AggregateHidden, CountAndShapeMismatchesAreRejected) {
  const std::vector<Tensor> states{Tensor::vector({1, 2}), Tensor::vector({1})};
  EXPECT_THROW(aggregate_hidden(states, {{0.5, 0.5}, Strategy::hidden}), ShapeError);
  const std::vector<Tensor> two{Tensor::vector({1}), Tensor::vector({1})};
  EXPECT_THROW(aggregate_hidden(two, {{0.5}, Strategy::hidden}), InvalidArgument);
}

TEST(AggregateLogits, HandExample) {
  const std::vector<Tensor> logits{Tensor::vector({1, 0, 0}), Tensor::vector({0, 1, 0})};
  const Tensor out = aggregate_logits(logits, {{0.6, 0.5}, Strategy::logit});
  EXPECT_EQ(out, Tensor::vector({0.6, 0.5, 0.0}));
  EXPECT_EQ(argmax(out.data()), 0u);
  EXPECT_EQ(aggregate_logits(logits, {{0, 1}, Strategy::logit}), logits[1]);
}

TEST(AggregateLogits, IdenticalModelsScaleBySum) {
  Rng rng(2);
  const Tensor l = random_tensor({7}, rng);
  const std::vector<Tensor> logits{l, l, l};
  const Tensor out = aggregate_logits(logits, {{0.2, 0.3, 0.4}, Strategy::logit});
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(out[i], 0.9 * l[i], 1e-15);
  EXPECT_EQ(argmax(out.data()), argmax(l.data()));
}

TEST(AggregateLogits, ProbabilitySpaceMixesSoftmaxOutputs) {
  const std::vector<Tensor> logits{Tensor::vector({0, 0}), Tensor::vector({std::log(3.0), 0})};
  const Tensor out = aggregate_logits(logits, {{0.5, 0.5}, Strategy::logit}, LogitSpace::probabilities);
  EXPECT_NEAR(out[0], 0.5 * 0.5 + 0.5 * 0.75, 1e-15);
  EXPECT_NEAR(out[1], 0.5 * 0.5 + 0.5 * 0.25, 1e-15);
}

TEST(MergeParameters, ZeroWeightsGiveBase) {
  Fixture fx;
  const Checkpoint merged = merge_parameters(*fx.base, fx.adapters, {{0, 0, 0}, Strategy::parameter});
  for (const auto& [name, t] : fx.base->params) EXPECT_EQ(*merged.params.at(name), *t) << name;
  EXPECT_EQ(merged.vocab, fx.base->vocab);
}

TEST(MergeParameters, OneHotMatchesApplyLora) {
  Fixture fx;
  for (std::size_t i = 0; i < 3; ++i) {
    const Checkpoint merged =
        merge_parameters(*fx.base, fx.adapters, EnsembleWeights::one_hot(3, i, Strategy::parameter));
    const std::vector<WeightedAdapter> single{{&fx.adapters[i], 1.0}};
    const ParamStore expected = apply_lora(fx.base->params, single);
    for (const auto& [name, t] : expected) EXPECT_EQ(*merged.params.at(name), *t) << name;
  }
}

TEST(MergeParameters, OrderIndependent) {
  Fixture fx;
  const Checkpoint forward = merge_parameters(*fx.base, fx.adapters, {{0.3, 0.9, 0.6}, Strategy::parameter});
  const std::vector<LoraAdapter> reversed{fx.adapters[2], fx.adapters[1], fx.adapters[0]};
  const Checkpoint backward = merge_parameters(*fx.base, reversed, {{0.6, 0.9, 0.3}, Strategy::parameter});
  for (const auto& [name, t] : forward.params) {
    const Tensor& other = *backward.params.at(name);
    for (std::size_t i = 0; i < t->numel(); ++i) EXPECT_NEAR((*t)[i], other[i], 1e-12) << name;
  }
}

TEST(MergeParameters, IdenticalAdaptersMatchHiddenEnsemble) {
  Fixture fx;
  const std::vector<LoraAdapter> same{fx.adapters[0], fx.adapters[0], fx.adapters[0]};
  const Ensemble e(fx.base, same, {"a", "b", "c"});
  // With all adapters equal the merged delta is (sum w) times one delta; at
  // sum w = 1 that is the single adapted model, as is the hidden mix.
  const EnsembleWeights w{{0.5, 0.25, 0.25}, Strategy::parameter};
  const Model merged = merge_parameters(*fx.base, same, w).model();
  Rng rng(3);
  for (const auto& prompt : random_prompts(10, 40, rng)) {
    EXPECT_EQ(merged.greedy_generate(prompt, 8), e.generate({w.w, Strategy::hidden}, prompt, 8));
  }
}

TEST(EnsembleGenerate, OneHotMatchesMemberForEveryStrategy) {
  Fixture fx;
  const Ensemble e = fx.ensemble();
  Rng rng(4);
  const auto prompts = random_prompts(15, 40, rng);
  for (Strategy s : {Strategy::hidden, Strategy::logit, Strategy::parameter}) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (const auto& prompt : prompts) {
        EXPECT_EQ(e.generate(EnsembleWeights::one_hot(3, i, s), prompt, 10), e.member(i).greedy_generate(prompt, 10))
            << to_string(s) << " member " << i;
      }
    }
  }
}

TEST(EnsembleGenerate, IdenticalAdaptersAnyWeightsHidden) {
  Fixture fx;
  const std::vector<LoraAdapter> same{fx.adapters[1], fx.adapters[1], fx.adapters[1]};
  const Ensemble e(fx.base, same, {"a", "b", "c"});
  Rng rng(5);
  for (const auto& prompt : random_prompts(10, 40, rng)) {
    EXPECT_EQ(e.generate({{0.1, 0.7, 0.35}, Strategy::hidden}, prompt, 8), e.member(0).greedy_generate(prompt, 8));
  }
}

TEST(EnsembleGenerate, HiddenArgmaxInvariantUnderPositiveScale) {
  Fixture fx;
  const Ensemble e = fx.ensemble();
  Rng rng(6);
  for (const auto& prompt : random_prompts(10, 40, rng)) {
    EXPECT_EQ(e.generate({{0.8, 0.4, 0.6}, Strategy::hidden}, prompt, 8),
              e.generate({{0.4, 0.2, 0.3}, Strategy::hidden}, prompt, 8));
  }
}

TEST(EnsembleGenerate, GoldenTraces) {
  Fixture fx;
  const Ensemble e = fx.ensemble();
  // Recorded once at w = (0.78125, 0.5, 0.0625).
  const std::vector<double> w{0.78125, 0.5, 0.0625};
  const std::vector<TokenId> hidden{4, 6, 6, 5, 5, 20, 9, 9, 5, 5};
  const std::vector<TokenId> parameter{20, 9, 7, 13, 13, 19, 9, 9, 9, 19};
  EXPECT_EQ(e.generate({w, Strategy::hidden}, kPrompt, 10), hidden);
  // A bias-free shared head makes the logit mix the head of the hidden mix.
  EXPECT_EQ(e.generate({w, Strategy::logit}, kPrompt, 10), hidden);
  EXPECT_EQ(e.generate({w, Strategy::parameter}, kPrompt, 10), parameter);
}

TEST(EnsembleGenerate, PrefixIsSharedAcrossMembers) {
  // Each step must equal the argmax of the mixed logits given the ensemble's
  // own committed prefix.
  Fixture fx;
  const Ensemble e = fx.ensemble();
  const EnsembleWeights w{{0.3, 0.9, 0.5}, Strategy::logit};
  const auto out = e.generate(w, kPrompt, 8);
  std::vector<TokenId> prefix{Vocabulary::kBegin};
  for (TokenId t : out) {
    std::vector<Tensor> logits;
    for (std::size_t i = 0; i < 3; ++i) {
      const Model& m = e.member(i);
      logits.push_back(m.lm_head(m.decode_step(m.encode(kPrompt), prefix)));
    }
    EXPECT_EQ(static_cast<TokenId>(argmax(aggregate_logits(logits, w).data())), t);
    prefix.push_back(t);
  }
}

TEST(EnsembleManifest, JsonRoundTrip) {
  EnsembleManifest m;
  m.base = "base.json";
  m.adapters = {"adapters/a.json", "adapters/b.json"};
  m.objectives = {"a", "b"};
  m.strategy = Strategy::logit;
  const EnsembleManifest back = ensemble_manifest_from_json(ensemble_manifest_to_json(m));
  EXPECT_EQ(back.base, m.base);
  EXPECT_EQ(back.adapters, m.adapters);
  EXPECT_EQ(back.objectives, m.objectives);
  EXPECT_EQ(back.strategy, m.strategy);
  EXPECT_THROW(ensemble_manifest_from_json("{\"base\": 1}"), FormatError);
}
