#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "emorl/corpus.hpp"
#include "emorl/error.hpp"
#include "emorl/objectives.hpp"
#include "emorl/pretrain.hpp"
#include "emorl/scst.hpp"
#include "test_support.hpp"

using namespace emorl;
using namespace emorl::testing;

namespace {

std::vector<PromptRollout> random_batch(Rng& rng, std::size_t vocab, std::size_t prompts, std::size_t k,
                                        bool equal_rewards) {
  std::vector<PromptRollout> batch;
  for (const auto& p : random_prompts(prompts, vocab, rng, 2, 5)) {
    PromptRollout r;
    r.prompt = p;
    for (std::size_t j = 0; j < k; ++j) {
      auto cand = random_prompts(1, vocab, rng, 1, 4).front();
      if (rng.below(2) == 0) cand.push_back(Vocabulary::kEnd);
      r.candidates.push_back(std::move(cand));
      r.rewards.push_back(equal_rewards ? 0.4 : rng.uniform());
    }
    batch.push_back(std::move(r));
  }
  return batch;
}

double loss_value(const ModelConfig& c, const ParamStore& base, const LoraAdapter& a,
                  const std::vector<PromptRollout>& batch, double beta, KlMode mode) {
  Tape tape;
  return scst_loss(tape, c, base, a, batch, beta, mode).total.value().item();
}

struct Toy {
  std::shared_ptr<Checkpoint> base;
  std::vector<std::string> prompts;
  ScorerRegistry registry;
};

Toy make_toy() {
  const auto splits = ingest(data_dir() / "toy_corpus.jsonl", {}, 1);
  ModelConfig mc = small_config();
  auto base = std::make_shared<Checkpoint>(bootstrap_checkpoint(splits.fine_tune, mc, 1));
  PretrainConfig pc;
  pc.steps = 40;
  pretrain(*base, splits.fine_tune, pc);
  Toy t{base, prompts_of(splits.fine_tune), {}};
  t.registry = ScorerRegistry::build(load_scorer_specs(data_dir() / "scorers.json"), base);
  return t;
}

RLConfig quick_rl(std::uint64_t seed) {
  RLConfig rl;
  rl.batch_size = 4;
  rl.k = 3;
  rl.max_new_tokens = 6;
  rl.max_steps = 12;
  rl.ma_window = 4;
  rl.patience = 100;
  rl.seed = seed;
  return rl;
}

}  // namespace

TEST(Advantages, BaselineIsMeanReward) {
  const std::vector<double> r{1.0, 0.0};
  EXPECT_EQ(scst_advantages(r), (std::vector<double>{0.5, -0.5}));
  const std::vector<double> same{0.3, 0.3, 0.3};
  for (double a : scst_advantages(same)) EXPECT_EQ(a, 0.0);
}

TEST(KlPenalty, MeanOfPerTokenDifferences) {
  const std::vector<double> p{-1.0, -2.0, -0.5};
  const std::vector<double> q{-1.5, -2.5, -0.8};
  EXPECT_NEAR(kl_penalty(p, q), (0.5 + 0.5 + 0.3) / 3.0, 1e-15);
  EXPECT_EQ(kl_penalty(p, p), 0.0);
  EXPECT_THROW(kl_penalty(p, std::vector<double>{-1.0}), InvalidArgument);
}

TEST(ScstLoss, FreshAdapterHasZeroKl) {
  const ModelConfig c = micro_config();
  const ParamStore base = init_params(c, 3);
  const LoraAdapter fresh = init_lora(base, attention_qv_names(c), 2, 4.0, 9);
  Rng rng(1);
  const auto batch = random_batch(rng, c.vocab_size, 3, 3, false);
  for (KlMode mode : {KlMode::sampled, KlMode::full}) {
    Tape tape;
    EXPECT_NEAR(scst_loss(tape, c, base, fresh, batch, 0.1, mode).kl.value().item(), 0.0, 1e-10);
  }
}

TEST(ScstLoss, BetaZeroIsPurePolicyLoss) {
  const ModelConfig c = micro_config();
  const ParamStore base = init_params(c, 3);
  const LoraAdapter a = random_adapter(base, c, 4);
  Rng rng(2);
  const auto batch = random_batch(rng, c.vocab_size, 2, 3, false);
  Tape tape;
  const LossParts parts = scst_loss(tape, c, base, a, batch, 0.0, KlMode::sampled);
  EXPECT_EQ(parts.total.value().item(), parts.policy.value().item());
  EXPECT_NE(parts.kl.value().item(), 0.0);
}

TEST(ScstLoss, GradientsMatchFiniteDifferences) {
  Rng rng(2024);
  for (int trial = 0; trial < 12; ++trial) {
    const ModelConfig c = micro_config(12 + rng.below(12));
    const ParamStore base = init_params(c, rng.next());
    LoraAdapter a = random_adapter(base, c, rng.next());
    const auto batch = random_batch(rng, c.vocab_size, 1 + rng.below(3), 2 + rng.below(2), false);
    const double beta = rng.uniform(0.0, 0.5);
    const KlMode mode = rng.below(2) == 0 ? KlMode::sampled : KlMode::full;

    Tape tape;
    const Gradients g = tape.backward(scst_loss(tape, c, base, a, batch, beta, mode).total);
    double worst = 0.0;
    for (auto& [name, f] : a.targets) {
      for (Tensor* t : {&f.a, &f.b}) {
        const std::string key = name + (t == &f.a ? ".lora_a" : ".lora_b");
        // A spread of entries per factor keeps the check affordable.
        for (std::size_t i = 0; i < t->numel(); i += 3) {
          const double saved = (*t)[i];
          (*t)[i] = saved + 1e-5;
          const double up = loss_value(c, base, a, batch, beta, mode);
          (*t)[i] = saved - 1e-5;
          const double down = loss_value(c, base, a, batch, beta, mode);
          (*t)[i] = saved;
          worst = std::max(worst, relative_error(g.at(key)[i], (up - down) / 2e-5, 1e-4));
        }
      }
    }
    EXPECT_LT(worst, 1e-4) << "trial " << trial << " mode " << to_string(mode);
  }
}

TEST(ScstLoss, ZeroAdvantageGivesZeroPolicyGradient) {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelConfig c = micro_config();
    const ParamStore base = init_params(c, rng.next());
    const LoraAdapter a = random_adapter(base, c, rng.next());
    const auto batch = random_batch(rng, c.vocab_size, 2, 3, true);
    Tape tape;
    const Gradients g = tape.backward(scst_loss(tape, c, base, a, batch, 0.0, KlMode::sampled).policy);
    double max_abs = 0.0;
    for (const auto& [name, t] : g) {
      for (double v : t.data()) max_abs = std::max(max_abs, std::abs(v));
    }
    EXPECT_LT(max_abs, 1e-12);
  }
}

TEST(ScstLoss, MalformedRolloutsAreRejected) {
  const ModelConfig c = micro_config();
  const ParamStore base = init_params(c, 3);
  const LoraAdapter a = random_adapter(base, c, 4);
  Tape tape;
  EXPECT_THROW(scst_loss(tape, c, base, a, {}, 0.1, KlMode::sampled), InvalidArgument);
  PromptRollout r{{5, 6}, {{7, 8}}, {0.1, 0.2}};
  const std::vector<PromptRollout> bad{r};
  EXPECT_THROW(scst_loss(tape, c, base, a, bad, 0.1, KlMode::sampled), InvalidArgument);
}

TEST(RLConfig, Validation) {
  RLConfig rl;
  EXPECT_NO_THROW(rl.validate());
  rl.k = 1;
  EXPECT_THROW(rl.validate(), InvalidArgument);
  rl = RLConfig{};
  rl.beta = -1;
  EXPECT_THROW(rl.validate(), InvalidArgument);
  EXPECT_EQ(parse_kl_mode("full"), KlMode::full);
  EXPECT_THROW(parse_kl_mode("exact"), InvalidArgument);
}

TEST(RewardFunction, WeightedSumOfScorers) {
  const auto reg = ScorerRegistry::build(load_scorer_specs(data_dir() / "scorers.json"), nullptr);
  const RewardFunction uniform(RewardSpec::uniform({"keyword", "brevity"}), reg);
  // keyword: 1 hit of 1; brevity: 3 of 6 tokens.
  EXPECT_NEAR(uniform("p", "we can help"), 0.5 * 1.0 + 0.5 * 0.5, 1e-15);
  EXPECT_EQ(RewardSpec::uniform({"a", "b", "c"}).weights, (std::vector<double>(3, 1.0 / 3.0)));
  EXPECT_THROW(RewardFunction(RewardSpec::single("missing"), reg), InvalidArgument);
}

TEST(Train, AccountingIdentitiesAndCurve) {
  const Toy toy = make_toy();
  const RLConfig rl = quick_rl(5);
  const TrainResult tr = train(*toy.base, toy.prompts, RewardFunction(RewardSpec::single("keyword"), toy.registry), rl);
  EXPECT_EQ(tr.report.steps, 12u);
  EXPECT_EQ(tr.report.data_points, tr.report.steps * rl.batch_size * rl.k);
  EXPECT_EQ(tr.report.curve.size(), tr.report.steps);
  EXPECT_FALSE(tr.report.stopped_early);
  const std::string csv = reward_curve_csv(tr.report);
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), tr.report.steps + 1);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,mean_reward,loss,kl,moving_average,data_points");
  for (std::size_t i = 0; i < tr.report.curve.size(); ++i) EXPECT_EQ(tr.report.curve[i].step, i + 1);
  EXPECT_EQ(tr.report.final_moving_average(), tr.report.curve.back().moving_average);
}

TEST(Train, DeterministicForSeed) {
  const Toy toy = make_toy();
  const RewardFunction reward(RewardSpec::single("empathy"), toy.registry);
  const TrainResult a = train(*toy.base, toy.prompts, reward, quick_rl(8));
  const TrainResult b = train(*toy.base, toy.prompts, reward, quick_rl(8));
  EXPECT_EQ(a.adapter, b.adapter);
  ASSERT_EQ(a.report.curve.size(), b.report.curve.size());
  for (std::size_t i = 0; i < a.report.curve.size(); ++i) {
    EXPECT_EQ(a.report.curve[i].mean_reward, b.report.curve[i].mean_reward);
  }
}

TEST(Train, ZeroLearningRateLeavesAdapterUnchanged) {
  const Toy toy = make_toy();
  RLConfig rl = quick_rl(6);
  rl.learning_rate = 0.0;
  const TrainResult tr = train(*toy.base, toy.prompts, RewardFunction(RewardSpec::single("keyword"), toy.registry), rl);
  const LoraAdapter fresh = init_lora(toy.base->params, attention_qv_names(toy.base->config), rl.lora_rank,
                                      rl.lora_alpha, Rng::derive(rl.seed, 0));
  EXPECT_EQ(tr.adapter, fresh);
  for (const auto& p : tr.report.curve) EXPECT_NEAR(p.kl, 0.0, 1e-12);
}

TEST(Train, EarlyStopWhenRewardPlateaus) {
  const Toy toy = make_toy();
  RLConfig rl = quick_rl(7);
  rl.learning_rate = 0.0;
  rl.max_steps = 200;
  rl.ma_window = 3;
  rl.patience = 5;
  rl.threshold = 10.0;  // nothing can beat the best by this much
  const TrainResult tr = train(*toy.base, toy.prompts, RewardFunction(RewardSpec::single("keyword"), toy.registry), rl);
  EXPECT_TRUE(tr.report.stopped_early);
  EXPECT_EQ(tr.report.steps, rl.ma_window + rl.patience);
}

TEST(Train, LargeBetaKeepsKlBelowUnregularisedRun) {
  const Toy toy = make_toy();
  const RewardFunction reward(RewardSpec::single("keyword"), toy.registry);
  RLConfig rl = quick_rl(9);
  rl.max_steps = 30;
  rl.learning_rate = 0.05;
  // The full-vocabulary penalty; beta * lr must stay well below 1 for SGD.
  rl.kl_mode = KlMode::full;
  rl.beta = 0.0;
  const TrainResult free_run = train(*toy.base, toy.prompts, reward, rl);
  rl.beta = 100.0;
  const TrainResult tied = train(*toy.base, toy.prompts, reward, rl);
  double free_kl = 0.0;
  double tied_kl = 0.0;
  for (std::size_t i = 0; i < rl.max_steps; ++i) {
    free_kl += std::abs(free_run.report.curve[i].kl);
    tied_kl += std::abs(tied.report.curve[i].kl);
  }
  EXPECT_LT(tied_kl, free_kl);
}

TEST(Train, DivergenceIsReported) {
  const Toy toy = make_toy();
  RLConfig rl = quick_rl(9);
  rl.beta = 0.0;
  rl.learning_rate = std::numeric_limits<double>::max();
  try {
    train(*toy.base, toy.prompts, RewardFunction(RewardSpec::single("keyword"), toy.registry), rl);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at step"), std::string::npos) << e.what();
  }
}

TEST(TTotal, MaxTrainPlusAggregation) {
  const std::vector<double> times{100, 200, 150};
  EXPECT_EQ(t_total(times, 30), 230.0);
  const std::vector<double> one{42.5};
  EXPECT_EQ(t_total(one, 7.5), 50.0);
  const std::vector<double> hours{4175.05, 2232.18, 1629.19};
  EXPECT_EQ(t_total(hours, 12.0), 4175.05 + 12.0);
  EXPECT_THROW(t_total(std::vector<double>{}, 1.0), InvalidArgument);
  std::vector<TrainReport> reports(2);
  reports[0].wall_seconds = 3.0;
  reports[1].wall_seconds = 5.0;
  EXPECT_EQ(t_total(reports, 1.0), 6.0);
}
