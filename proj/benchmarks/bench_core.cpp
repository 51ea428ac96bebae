#include <cmath>
#include <vector>

#include <benchmark/benchmark.h>

#include "emorl/aggregation.hpp"
#include "emorl/checkpoint.hpp"
#include "emorl/lora.hpp"
#include "emorl/metrics.hpp"
#include "emorl/model.hpp"
#include "emorl/search.hpp"

namespace {

double bowl(const emorl::Point& p) {
  double s = 0.0;
  for (double x : p) s -= (x - 0.37) * (x - 0.37);
  return s;
}

void BM_HierarchicalSearch(benchmark::State& state) {
  emorl::SearchSpec spec;
  spec.dimension = static_cast<std::size_t>(state.range(0));
  spec.iterations = 5;
  spec.objective = emorl::detailed(bowl);
  for (auto _ : state) benchmark::DoNotOptimize(emorl::hierarchical_search(spec));
}
BENCHMARK(BM_HierarchicalSearch)->Arg(2)->Arg(3)->Arg(4);

void BM_ExhaustiveGrid(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(emorl::exhaustive_grid(bowl, 3, 0.03125));
}
BENCHMARK(BM_ExhaustiveGrid)->Unit(benchmark::kMillisecond);

void BM_BayesianSearch(benchmark::State& state) {
  for (auto _ : state) {
    benchmark::DoNotOptimize(emorl::bayesian_search(bowl, 3, static_cast<std::size_t>(state.range(0)), 11));
  }
}
BENCHMARK(BM_BayesianSearch)->Arg(30)->Arg(60)->Unit(benchmark::kMillisecond);

emorl::ModelConfig small_config() {
  emorl::ModelConfig c;
  c.vocab_size = 200;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 64;
  c.max_seq_len = 32;
  return c;
}

void BM_DecodeStep(benchmark::State& state) {
  const emorl::Model model(small_config(), emorl::init_params(small_config(), 5));
  const std::vector<emorl::TokenId> prompt{4, 9, 17, 30, 41, 52, 8, 11};
  const emorl::Tensor enc = model.encode(prompt);
  std::vector<emorl::TokenId> prefix{emorl::Vocabulary::kBegin};
  for (int i = 0; i < state.range(0); ++i) prefix.push_back(static_cast<emorl::TokenId>(5 + i));
  for (auto _ : state) benchmark::DoNotOptimize(model.decode_step(enc, prefix));
}
BENCHMARK(BM_DecodeStep)->Arg(1)->Arg(8)->Arg(16);

void BM_EnsembleGenerate(benchmark::State& state) {
  const emorl::ModelConfig config = small_config();
  auto base = std::make_shared<emorl::Checkpoint>();
  base->config = config;
  base->params = emorl::init_params(config, 5);
  std::vector<std::string> words;
  for (std::size_t i = 0; i + emorl::Vocabulary::kReserved < config.vocab_size; ++i) {
    words.push_back("w" + std::to_string(i));
  }
  base->vocab = emorl::Vocabulary::build(words);
  std::vector<emorl::LoraAdapter> adapters;
  for (std::uint64_t s = 0; s < 3; ++s) {
    adapters.push_back(emorl::init_lora(base->params, emorl::attention_qv_names(config), 4, 8.0, 100 + s));
  }
  const emorl::Ensemble ensemble(base, adapters, {"a", "b", "c"});
  const emorl::EnsembleWeights w{{0.5, 0.25, 0.75}, static_cast<emorl::Strategy>(state.range(0))};
  const std::vector<emorl::TokenId> prompt{4, 9, 17, 30, 41, 52, 8, 11};
  for (auto _ : state) benchmark::DoNotOptimize(ensemble.generate(w, prompt, 12));
}
BENCHMARK(BM_EnsembleGenerate)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_EditRate(benchmark::State& state) {
  const std::string prompt = "i feel like nobody at work listens to me when i talk about my ideas";
  const std::string gen = "it sounds like you feel unheard at work when you share your ideas";
  for (auto _ : state) benchmark::DoNotOptimize(emorl::edit_rate(prompt, gen));
}
BENCHMARK(BM_EditRate);

}  // namespace
BENCHMARK_MAIN();
