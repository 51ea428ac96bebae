#include <cmath>

#include <gtest/gtest.h>

#include "emorl/checkpoint.hpp"
#include "emorl/corpus.hpp"
#include "emorl/error.hpp"
#include "emorl/lora.hpp"
#include "emorl/model.hpp"
#include "emorl/vocab.hpp"
#include "test_support.hpp"

using namespace emorl;
using namespace emorl::testing;

namespace {

const std::vector<TokenId> kPrompt{5, 9, 13, 21, 7};

// Recorded once from random_checkpoint(small_config(40), 2024).
const std::vector<double> kGoldenBeginState{
    -1.0277482025198488, -0.85517627930675177, 0.34987782462069666, 0.60360440915587033,
    -0.36632097471455677, 0.55580999223285388, 1.1048793578932607,  1.5873266243927164,
    -2.6450530692011021, -0.66565889032575598, 0.46176819947042941, -0.15526034701738864,
    0.65877137651500239, -0.76864196840742893, 0.86874478962419655, 0.29307715758780628};
const std::vector<TokenId> kGoldenGreedy{1, 0, 5, 35, 1, 35, 1, 5, 1, 5};

}  // namespace

TEST(Vocabulary, TokenizeSplitsWordsAndPunctuation) {
  const std::vector<std::string> corpus{"I lost my job.", "my job was fine"};
  const Vocabulary v = Vocabulary::build(corpus);
  const std::vector<TokenId> expected{v.id("i"), v.id("lost"), v.id("my"), v.id("job"), v.id(".")};
  EXPECT_EQ(v.tokenize("I lost my job."), expected);
  for (TokenId id : expected) EXPECT_GE(id, static_cast<TokenId>(Vocabulary::kReserved));
}

TEST(Vocabulary, UnseenWordMapsToUnknown) {
  const std::vector<std::string> corpus{"hello there"};
  const Vocabulary v = Vocabulary::build(corpus);
  EXPECT_EQ(v.tokenize("hello stranger"), (std::vector<TokenId>{v.id("hello"), Vocabulary::kUnknown}));
}

TEST(Vocabulary, RoundTripGivesNormalisedText) {
  const auto records = load_corpus(data_dir() / "toy_corpus.jsonl");
  std::vector<std::string> texts;
  for (const auto& r : records) texts.push_back(r.prompt);
  const Vocabulary v = Vocabulary::build(texts);
  for (std::size_t i = 0; i < records.size(); i += 7) {
    EXPECT_EQ(v.detokenize(v.tokenize(records[i].prompt)), normalize_text(records[i].prompt));
  }
}

TEST(Vocabulary, CapLimitsSizeAndKeepsReservedIds) {
  const std::vector<std::string> corpus{"a a a b b c d e f"};
  const Vocabulary v = Vocabulary::build(corpus, 6);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.token(Vocabulary::kBegin), "<s>");
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  EXPECT_EQ(v.id("c"), Vocabulary::kUnknown);
}

TEST(ModelConfig, ValidationRejectsBadExtents) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = small_config();
  c.vocab_size = 4;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_NO_THROW(c.validate_shape());
}

TEST(Encode, DeterministicWithExpectedShape) {
  const auto ck = random_checkpoint(small_config(), 1);
  const Model m = ck->model();
  const Tensor a = m.encode(kPrompt);
  EXPECT_EQ(a.shape(), (Shape{kPrompt.size(), 16}));
  EXPECT_EQ(a, m.encode(kPrompt));
}

TEST(Encode, EmptyPromptIsRejected) {
  const auto ck = random_checkpoint(small_config(), 1);
  EXPECT_THROW(ck->model().encode(std::vector<TokenId>{}), InvalidArgument);
}

TEST(DecodeStep, ShapeDeterminismAndGoldenState) {
  const auto ck = random_checkpoint(small_config(40), 2024);
  const Model m = ck->model();
  const Tensor enc = m.encode(kPrompt);
  const std::vector<TokenId> prefix{Vocabulary::kBegin};
  const Tensor h = m.decode_step(enc, prefix);
  ASSERT_EQ(h.shape(), (Shape{16}));
  EXPECT_EQ(h, m.decode_step(enc, prefix));
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(h[i], kGoldenBeginState[i], 1e-12) << i;

  const std::vector<TokenId> longer{Vocabulary::kBegin, 7, 8, 9};
  EXPECT_EQ(m.decode_step(enc, longer).shape(), (Shape{16}));
  const std::vector<TokenId> bad{7, 8};
  EXPECT_THROW(m.decode_step(enc, bad), InvalidArgument);
}

TEST(LmHead, ExtentAndLinearity) {
  const auto ck = random_checkpoint(small_config(40), 3);
  const Model m = ck->model();
  Rng rng(9);
  const Tensor f = random_tensor({16}, rng);
  const Tensor logits = m.lm_head(f);
  ASSERT_EQ(logits.shape(), (Shape{40}));
  Tensor scaled = f;
  for (auto& v : scaled.data()) v *= 2.5;
  const Tensor scaled_logits = m.lm_head(scaled);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_NEAR(scaled_logits[i], 2.5 * logits[i], 1e-12);
}

TEST(Greedy, GoldenSequence) {
  const auto ck = random_checkpoint(small_config(40), 2024);
  EXPECT_EQ(ck->model().greedy_generate(kPrompt, 10), kGoldenGreedy);
}

TEST(Greedy, StepReplayThroughDecodeStepAndHead) {
  const auto ck = random_checkpoint(small_config(40), 17);
  const Model m = ck->model();
  Rng rng(4);
  for (const auto& prompt : random_prompts(10, 40, rng)) {
    const auto out = m.greedy_generate(prompt, 8);
    const Tensor enc = m.encode(prompt);
    std::vector<TokenId> prefix{Vocabulary::kBegin};
    for (TokenId t : out) {
      const Tensor logits = m.lm_head(m.decode_step(enc, prefix));
      EXPECT_EQ(static_cast<TokenId>(argmax(logits.data())), t);
      prefix.push_back(t);
    }
  }
}

TEST(Greedy, NeverExceedsMaxSeqLen) {
  ModelConfig c = small_config(40);
  c.max_seq_len = 6;
  const auto ck = random_checkpoint(c, 2);
  // Each token comes from a prefix of at most max_seq_len positions; the last
  // one is emitted but never fed back.
  const auto out = ck->model().greedy_generate(kPrompt, 50);
  EXPECT_LE(out.size(), c.max_seq_len);
  const auto sampled = ck->model().sample_generate(kPrompt, 50, 1.0, 4);
  EXPECT_LE(sampled.size(), c.max_seq_len);
}

TEST(Sampling, SameSeedSameSamples) {
  const auto ck = random_checkpoint(small_config(40), 5);
  const Model m = ck->model();
  EXPECT_EQ(m.sample_generate(kPrompt, 10, 1.0, 42), m.sample_generate(kPrompt, 10, 1.0, 42));
}

TEST(Sampling, LowTemperatureConvergesToGreedy) {
  const auto ck = random_checkpoint(small_config(40), 6);
  const Model m = ck->model();
  Rng rng(8);
  for (const auto& prompt : random_prompts(20, 40, rng)) {
    EXPECT_EQ(m.sample_generate(prompt, 8, 1e-6, 99), m.greedy_generate(prompt, 8));
  }
}

TEST(SequenceLogProb, UniformModelGivesMinusLogV) {
  auto ck = random_checkpoint(small_config(40), 7);
  ParamStore params = ck->params;
  params["lm_head"] = std::make_shared<Tensor>(Shape{40, 16});
  const Model m(ck->config, params);
  const std::vector<TokenId> out{6, 7, 8, Vocabulary::kEnd};
  for (double lp : m.sequence_log_prob(kPrompt, out)) EXPECT_NEAR(lp, -std::log(40.0), 1e-12);
}

TEST(SequenceLogProb, MatchesStepReplay) {
  const auto ck = random_checkpoint(small_config(40), 8);
  const Model m = ck->model();
  const std::vector<TokenId> out{6, 12, 30, 9, Vocabulary::kEnd};
  const auto lps = m.sequence_log_prob(kPrompt, out);
  ASSERT_EQ(lps.size(), out.size());
  const Tensor enc = m.encode(kPrompt);
  std::vector<TokenId> prefix{Vocabulary::kBegin};
  double log_product = 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < out.size(); ++t) {
    Tape tape;
    const Var logits = tape.constant(m.lm_head(m.decode_step(enc, prefix)));
    const double lp = ag::log_softmax(logits, 0).value()[static_cast<std::size_t>(out[t])];
    EXPECT_NEAR(lps[t], lp, 1e-12);
    const Tensor p = ag::softmax(logits, 0).value();
    log_product += std::log(p[static_cast<std::size_t>(out[t])]);
    total += lps[t];
    prefix.push_back(out[t]);
  }
  EXPECT_NEAR(total, log_product, 1e-10);
}

TEST(Lora, ZeroBLeavesParametersUnchanged) {
  const auto ck = random_checkpoint(small_config(), 9);
  const LoraAdapter a = init_lora(ck->params, attention_qv_names(ck->config), 4, 8.0, 1);
  const std::vector<WeightedAdapter> wa{{&a, 1.0}};
  const ParamStore merged = apply_lora(ck->params, wa);
  for (const auto& [name, t] : ck->params) EXPECT_EQ(*merged.at(name), *t) << name;
}

TEST(Lora, HandOuterProduct) {
  ParamStore base{{"w", std::make_shared<Tensor>(Shape{2, 2})}};
  LoraAdapter a;
  a.rank = 1;
  a.alpha = 1.0;
  a.targets["w"] = LoraFactor{Tensor::matrix({{1, 0}}), Tensor::matrix({{1}, {0}})};
  const std::vector<WeightedAdapter> wa{{&a, 1.0}};
  EXPECT_EQ(*apply_lora(base, wa).at("w"), Tensor::matrix({{1, 0}, {0, 0}}));
}

TEST(Lora, AffineInWeight) {
  const auto ck = random_checkpoint(small_config(), 10);
  const LoraAdapter a = random_adapter(ck->params, ck->config, 3);
  const std::vector<WeightedAdapter> full{{&a, 1.0}};
  const std::vector<WeightedAdapter> half{{&a, 0.5}};
  const std::vector<WeightedAdapter> third{{&a, 1.0 / 3.0}};
  const ParamStore p1 = apply_lora(ck->params, full);
  const ParamStore ph = apply_lora(ck->params, half);
  const ParamStore pt = apply_lora(ck->params, third);
  for (const auto& [name, f] : a.targets) {
    const Tensor& base = *ck->params.at(name);
    for (std::size_t i = 0; i < base.numel(); ++i) {
      const double d1 = (*p1.at(name))[i] - base[i];
      EXPECT_NEAR((*ph.at(name))[i] - base[i], 0.5 * d1, 1e-12);
      EXPECT_NEAR((*pt.at(name))[i] - base[i], d1 / 3.0, 1e-12);
    }
  }
}

TEST(Lora, HeadAndUnknownTargetsAreRejected) {
  const auto ck = random_checkpoint(small_config(), 11);
  EXPECT_THROW(init_lora(ck->params, {"lm_head"}, 2, 4.0, 1), InvalidArgument);
  EXPECT_THROW(init_lora(ck->params, {"no_such_weight"}, 2, 4.0, 1), InvalidArgument);
}

TEST(Checkpoint, RoundTripIsValueIdentical) {
  const auto ck = random_checkpoint(small_config(), 12);
  const Checkpoint back = checkpoint_from_json(checkpoint_to_json(*ck));
  EXPECT_EQ(back.config, ck->config);
  EXPECT_EQ(back.vocab, ck->vocab);
  ASSERT_EQ(back.params.size(), ck->params.size());
  for (const auto& [name, t] : ck->params) EXPECT_EQ(*back.params.at(name), *t) << name;

  const LoraAdapter a = random_adapter(ck->params, ck->config, 4);
  EXPECT_EQ(adapter_from_json(adapter_to_json(a)), a);
}

TEST(Checkpoint, MalformedDocumentIsFormatError) {
  EXPECT_THROW(checkpoint_from_json("{\"format_version\": 1}"), FormatError);
  EXPECT_THROW(checkpoint_from_json("not json"), FormatError);
}
