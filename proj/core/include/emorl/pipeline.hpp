#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "emorl/aggregation.hpp"
#include "emorl/corpus.hpp"
#include "emorl/pretrain.hpp"
#include "emorl/scst.hpp"
#include "emorl/search.hpp"

namespace emorl {

struct SearchConfig {
  std::string method = "hierarchical";  // hierarchical | grid | bayesian
  std::size_t iterations = 5;
  double step = 0.03125;
  std::size_t budget = 135;
  Strategy strategy = Strategy::hidden;
  /// Aggregation-split prompts used per utility evaluation; 0 means all.
  std::size_t max_prompts = 0;

  void validate() const;
};

struct ExperimentConfig {
  std::filesystem::path corpus;
  /// Further corpora scored in stage 3 alongside the inference split.
  std::vector<std::filesystem::path> extra_inference;
  SplitRatios splits;
  std::filesystem::path scorers;
  ModelConfig model;
  std::size_t vocab_cap = Vocabulary::kDefaultCap;
  PretrainConfig pretrain;
  std::vector<std::string> objectives;
  /// Utility weights over objectives; empty means uniform.
  std::vector<double> preference;
  RLConfig rl;
  SearchConfig search;
  std::size_t max_new_tokens = 12;
  std::vector<std::string> bench_methods;
  /// Sample generations kept per bench method.
  std::size_t bench_samples = 5;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  /// Independent master seeds per bench method (seed, seed + 1, ...).
  std::size_t replicates = 1;
  std::size_t threads = 1;

  void validate() const;
  Preference utility_preference() const;
};

/// Parses a JSON config. Missing keys keep their defaults; relative paths
/// resolve against `base_dir`.
ExperimentConfig parse_experiment_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Round-trips through parse_experiment_config. Paths are written as given.
std::string experiment_config_to_json(const ExperimentConfig& config, bool include_output_dir = true);

/// Sub-seeds derived from the master seed by fixed offsets.
struct StageSeeds {
  std::uint64_t split = 0;
  std::uint64_t init = 0;
  std::uint64_t pretrain = 0;
  std::uint64_t bayes = 0;
  std::vector<std::uint64_t> train;  // one per objective
  std::uint64_t uniform = 0;

  static StageSeeds derive(std::uint64_t master, std::size_t objectives);
};

/// Artifact locations under a run directory. All relative to `root`.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path timings() const { return root / "timings.json"; }
  std::filesystem::path split(const std::string& name) const { return root / "corpus" / (name + ".jsonl"); }
  std::filesystem::path corpus_stats() const { return root / "corpus" / "stats.json"; }
  std::filesystem::path base() const { return root / "base.json"; }
  std::filesystem::path adapter(const std::string& objective) const {
    return root / "adapters" / (objective + ".json");
  }
  std::filesystem::path curve(const std::string& objective) const { return root / "curves" / (objective + ".csv"); }
  std::filesystem::path ensemble() const { return root / "ensemble.json"; }
  std::filesystem::path trace() const { return root / "search" / "trace.csv"; }
  std::filesystem::path search_result() const { return root / "search" / "result.json"; }
  std::filesystem::path generations() const { return root / "inference" / "generations.csv"; }
  std::filesystem::path metrics() const { return root / "inference" / "metrics.json"; }
  std::filesystem::path bench_table() const { return root / "bench" / "table.csv"; }
  std::filesystem::path bench_samples() const { return root / "bench" / "samples.csv"; }
  std::filesystem::path bench_complexity() const { return root / "bench" / "complexity.csv"; }
};

/// One row of a comparison table.
struct RunRecord {
  std::string method;
  std::vector<std::string> objectives;
  std::vector<double> score_mean;
  std::vector<double> score_sd;
  std::optional<double> diversity2;
  std::optional<double> edit_rate;
  std::vector<double> weights;
  std::uint64_t data_points = 0;
  /// Wall time of every training job the method depends on.
  std::vector<double> train_times;
  double train_seconds = 0.0;  // longest of train_times
  double agg_seconds = 0.0;
  double t_total = 0.0;
  std::vector<std::string> generations;
  std::string error;
};

/// Scores of a set of generations on every objective plus text metrics.
RunRecord evaluate_generations(const std::string& method, const std::vector<std::string>& prompts,
                               const std::vector<std::string>& generations, const ScorerRegistry& registry,
                               const std::vector<std::string>& objectives);

/// Utility of an ensemble at w on a prompt set, with per-objective means.
Evaluation ensemble_utility(const Ensemble& ensemble, const EnsembleWeights& weights,
                            const std::vector<std::string>& prompts, const ScorerRegistry& registry,
                            const Preference& preference, std::size_t max_new_tokens);

/// Delimited search trace: iteration, utility, w1..wd, one column per objective.
std::string search_trace_csv(const SearchResult& result, const std::vector<std::string>& objectives);

/// Runs the configured optimiser over ensemble weights.
SearchResult run_weight_search(const SearchConfig& config, std::size_t dimension, const DetailedObjective& objective,
                               std::uint64_t seed);

// -- stages ------------------------------------------------------------------
// Each stage reads its inputs from the run directory and writes its outputs
// there, so any stage can be re-run on its own.

CorpusSplits stage_ingest(const ExperimentConfig& config);
/// Vocabulary, seeded parameters and the optional supervised warm start.
void stage_bootstrap(const ExperimentConfig& config);
std::vector<TrainReport> stage_train(const ExperimentConfig& config);
SearchResult stage_search(const ExperimentConfig& config);
std::vector<std::string> stage_generate(const ExperimentConfig& config);
RunRecord stage_eval(const ExperimentConfig& config);

struct PipelineResult {
  std::vector<TrainReport> training;
  SearchResult search;
  std::vector<double> weights;
  RunRecord record;
};

/// Ingest, bootstrap, train, search, generate and evaluate. A failing stage is
/// recorded in the manifest before the error propagates.
PipelineResult run_pipeline(const ExperimentConfig& config);

/// Marks `stage` failed in the manifest with the error's kind and message.
/// Artifacts already written are left in place.
void record_stage_failure(const ExperimentConfig& config, const std::string& stage, const std::exception& error);

struct BenchResult {
  std::vector<RunRecord> records;
  ComplexityCounts complexity;
};

/// Compares methods on the inference split. Methods:
///   single:<objective>   one adapter at full weight
///   uniform              one adapter trained on the equal-weight reward
///   hidden | logit | parameter   ensembles with searched weights
///   <strategy>@w1,w2,...         ensembles with fixed weights
/// A failing method is reported in its record and the others continue.
BenchResult bench(const ExperimentConfig& config);

std::string run_records_csv(const std::vector<RunRecord>& records);

}  // namespace emorl
