#include "emorl/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "emorl/csv.hpp"
#include "emorl/error.hpp"
#include "emorl/metrics.hpp"
#include "emorl/rng.hpp"

namespace emorl {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void check_keys(const json& obj, const char* where, std::initializer_list<const char*> allowed) {
  require<FormatError>(obj.is_object(), where, " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : obj.items()) {
    require<FormatError>(ok.contains(item.key()), "unknown key '", item.key(), "' in ", where);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

}  // namespace

// -- configuration ------------------------------------------------------------

void SearchConfig::validate() const {
  require(method == "hierarchical" || method == "grid" || method == "bayesian", "unknown search method '", method,
          "' (expected hierarchical, grid or bayesian)");
  require(iterations >= 1, "search iterations must be at least 1");
  require(step > 0.0 && step <= 1.0, "grid step must lie in (0, 1]");
  require(budget >= 1, "search budget must be at least 1");
}

void ExperimentConfig::validate() const {
  require(!corpus.empty(), "config names no corpus");
  splits.validate();
  model.validate_shape();
  require(!objectives.empty(), "config names no objectives");
  std::set<std::string> seen;
  for (const auto& o : objectives) {
    require(!o.empty(), "empty objective name");
    require(seen.insert(o).second, "objective '", o, "' listed twice");
  }
  if (!preference.empty()) {
    require(preference.size() == objectives.size(), "preference has ", preference.size(), " weights for ",
            objectives.size(), " objectives");
    Preference{preference}.validate();
  }
  rl.validate();
  pretrain.validate();
  search.validate();
  require(max_new_tokens >= 1, "max_new_tokens must be at least 1");
  require(!output_dir.empty(), "config names no output directory");
  require(replicates >= 1, "replicates must be at least 1");
  require(threads >= 1, "threads must be at least 1");
}

Preference ExperimentConfig::utility_preference() const {
  return preference.empty() ? Preference::uniform(objectives.size()) : Preference{preference};
}

ExperimentConfig parse_experiment_config(const std::string& json_text, const fs::path& base_dir) {
  ExperimentConfig c;
  try {
    const json doc = json::parse(json_text);
    check_keys(doc, "config",
               {"corpus", "extra_inference", "splits", "scorers", "model", "vocab_cap", "pretrain", "objectives",
                "preference", "rl", "search", "max_new_tokens", "bench", "output_dir", "seed", "replicates",
                "threads"});
    if (doc.contains("corpus")) c.corpus = resolve(doc.at("corpus").get<std::string>(), base_dir);
    if (doc.contains("extra_inference")) {
      for (const auto& p : doc.at("extra_inference")) c.extra_inference.push_back(resolve(p.get<std::string>(), base_dir));
    }
    if (doc.contains("splits")) {
      const json& s = doc.at("splits");
      check_keys(s, "splits", {"fine_tune", "aggregation", "inference"});
      read(s, "fine_tune", c.splits.fine_tune);
      read(s, "aggregation", c.splits.aggregation);
      read(s, "inference", c.splits.inference);
    }
    if (doc.contains("scorers")) c.scorers = resolve(doc.at("scorers").get<std::string>(), base_dir);
    if (doc.contains("model")) {
      const json& m = doc.at("model");
      check_keys(m, "model", {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_seq_len"});
      read(m, "d_model", c.model.d_model);
      read(m, "n_heads", c.model.n_heads);
      read(m, "n_enc_layers", c.model.n_enc_layers);
      read(m, "n_dec_layers", c.model.n_dec_layers);
      read(m, "d_ff", c.model.d_ff);
      read(m, "max_seq_len", c.model.max_seq_len);
    }
    read(doc, "vocab_cap", c.vocab_cap);
    if (doc.contains("pretrain")) {
      const json& p = doc.at("pretrain");
      check_keys(p, "pretrain", {"steps", "batch_size", "learning_rate"});
      read(p, "steps", c.pretrain.steps);
      read(p, "batch_size", c.pretrain.batch_size);
      read(p, "learning_rate", c.pretrain.learning_rate);
    }
    read(doc, "objectives", c.objectives);
    read(doc, "preference", c.preference);
    if (doc.contains("rl")) {
      const json& r = doc.at("rl");
      check_keys(r, "rl",
                 {"batch_size", "k", "beta", "learning_rate", "max_steps", "ma_window", "threshold", "patience",
                  "temperature", "max_new_tokens", "kl_mode", "lora_rank", "lora_alpha", "targets"});
      read(r, "batch_size", c.rl.batch_size);
      read(r, "k", c.rl.k);
      read(r, "beta", c.rl.beta);
      read(r, "learning_rate", c.rl.learning_rate);
      read(r, "max_steps", c.rl.max_steps);
      read(r, "ma_window", c.rl.ma_window);
      read(r, "threshold", c.rl.threshold);
      read(r, "patience", c.rl.patience);
      read(r, "temperature", c.rl.temperature);
      read(r, "max_new_tokens", c.rl.max_new_tokens);
      if (r.contains("kl_mode")) c.rl.kl_mode = parse_kl_mode(r.at("kl_mode").get<std::string>());
      read(r, "lora_rank", c.rl.lora_rank);
      read(r, "lora_alpha", c.rl.lora_alpha);
      read(r, "targets", c.rl.targets);
    }
    if (doc.contains("search")) {
      const json& s = doc.at("search");
      check_keys(s, "search", {"method", "iterations", "step", "budget", "strategy", "max_prompts"});
      read(s, "method", c.search.method);
      read(s, "iterations", c.search.iterations);
      read(s, "step", c.search.step);
      read(s, "budget", c.search.budget);
      if (s.contains("strategy")) c.search.strategy = parse_strategy(s.at("strategy").get<std::string>());
      read(s, "max_prompts", c.search.max_prompts);
    }
    read(doc, "max_new_tokens", c.max_new_tokens);
    if (doc.contains("bench")) {
      const json& b = doc.at("bench");
      check_keys(b, "bench", {"methods", "samples"});
      read(b, "methods", c.bench_methods);
      read(b, "samples", c.bench_samples);
    }
    if (doc.contains("output_dir")) c.output_dir = resolve(doc.at("output_dir").get<std::string>(), base_dir);
    read(doc, "seed", c.seed);
    read(doc, "replicates", c.replicates);
    read(doc, "threads", c.threads);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return parse_experiment_config(read_text_file(path), path.parent_path());
}

namespace {

json config_json(const ExperimentConfig& c, bool include_output_dir) {
  std::vector<std::string> extra;
  for (const auto& p : c.extra_inference) extra.push_back(p.generic_string());
  json doc{
      {"corpus", c.corpus.generic_string()},
      {"extra_inference", extra},
      {"splits", {{"fine_tune", c.splits.fine_tune}, {"aggregation", c.splits.aggregation},
                  {"inference", c.splits.inference}}},
      {"scorers", c.scorers.generic_string()},
      {"model", {{"d_model", c.model.d_model}, {"n_heads", c.model.n_heads}, {"n_enc_layers", c.model.n_enc_layers},
                 {"n_dec_layers", c.model.n_dec_layers}, {"d_ff", c.model.d_ff},
                 {"max_seq_len", c.model.max_seq_len}}},
      {"vocab_cap", c.vocab_cap},
      {"pretrain", {{"steps", c.pretrain.steps}, {"batch_size", c.pretrain.batch_size},
                    {"learning_rate", c.pretrain.learning_rate}}},
      {"objectives", c.objectives},
      {"preference", c.preference},
      {"rl", {{"batch_size", c.rl.batch_size}, {"k", c.rl.k}, {"beta", c.rl.beta},
              {"learning_rate", c.rl.learning_rate}, {"max_steps", c.rl.max_steps}, {"ma_window", c.rl.ma_window},
              {"threshold", c.rl.threshold}, {"patience", c.rl.patience}, {"temperature", c.rl.temperature},
              {"max_new_tokens", c.rl.max_new_tokens}, {"kl_mode", std::string(to_string(c.rl.kl_mode))},
              {"lora_rank", c.rl.lora_rank}, {"lora_alpha", c.rl.lora_alpha}, {"targets", c.rl.targets}}},
      {"search", {{"method", c.search.method}, {"iterations", c.search.iterations}, {"step", c.search.step},
                  {"budget", c.search.budget}, {"strategy", std::string(to_string(c.search.strategy))},
                  {"max_prompts", c.search.max_prompts}}},
      {"max_new_tokens", c.max_new_tokens},
      {"bench", {{"methods", c.bench_methods}, {"samples", c.bench_samples}}},
      {"seed", c.seed},
      {"replicates", c.replicates},
      {"threads", c.threads},
  };
  if (include_output_dir) doc["output_dir"] = c.output_dir.generic_string();
  return doc;
}

}  // namespace

std::string experiment_config_to_json(const ExperimentConfig& config, bool include_output_dir) {
  return config_json(config, include_output_dir).dump(2);
}

StageSeeds StageSeeds::derive(std::uint64_t master, std::size_t objectives) {
  StageSeeds s;
  s.split = Rng::derive(master, 1);
  s.init = Rng::derive(master, 2);
  s.pretrain = Rng::derive(master, 3);
  s.bayes = Rng::derive(master, 4);
  s.uniform = Rng::derive(master, 5);
  for (std::size_t i = 0; i < objectives; ++i) s.train.push_back(Rng::derive(master, 100 + i));
  return s;
}

// -- manifest -----------------------------------------------------------------

namespace {

std::mutex manifest_mutex;

json read_json_or(const fs::path& path, json fallback) {
  if (!fs::exists(path)) return fallback;
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void update_json(const fs::path& path, const std::function<void(json&)>& edit) {
  std::lock_guard lock(manifest_mutex);
  json doc = read_json_or(path, json::object());
  edit(doc);
  write_text_file(path, doc.dump(2) + "\n");
}

void init_manifest(const ExperimentConfig& c, const RunLayout& layout) {
  const StageSeeds seeds = StageSeeds::derive(c.seed, c.objectives.size());
  update_json(layout.manifest(), [&](json& m) {
    m["format_version"] = 1;
    m["config"] = config_json(c, false);
    m["objectives"] = c.objectives;
    m["seed"] = c.seed;
    json train = json::object();
    for (std::size_t i = 0; i < c.objectives.size(); ++i) train[c.objectives[i]] = seeds.train[i];
    m["seeds"] = {{"split", seeds.split}, {"init", seeds.init},       {"pretrain", seeds.pretrain},
                  {"bayes", seeds.bayes}, {"uniform", seeds.uniform}, {"train", train}};
    if (!m.contains("stages")) m["stages"] = json::object();
    if (!m.contains("artifacts")) m["artifacts"] = json::object();
  });
}

void mark_stage(const RunLayout& layout, const std::string& stage, const std::function<void(json&)>& edit = {}) {
  update_json(layout.manifest(), [&](json& m) {
    m["stages"][stage] = "done";
    m.erase("error");
    if (edit) edit(m);
  });
}

void record_timing(const RunLayout& layout, const std::string& key, double seconds) {
  update_json(layout.timings(), [&](json& t) { t[key] = seconds; });
}

std::string rel(const RunLayout& layout, const fs::path& p) { return p.lexically_relative(layout.root).generic_string(); }

std::vector<CorpusRecord> load_split(const RunLayout& layout, const std::string& name) {
  const fs::path p = layout.split(name);
  require<IoError>(fs::exists(p), "missing corpus split ", p.string(), " (run ingest first)");
  return load_corpus(p);
}

std::shared_ptr<const Checkpoint> load_base(const RunLayout& layout) {
  require<IoError>(fs::exists(layout.base()), "missing base checkpoint ", layout.base().string(),
                   " (run train first)");
  return std::make_shared<const Checkpoint>(load_checkpoint(layout.base()));
}

ScorerRegistry make_registry(const ExperimentConfig& c, std::shared_ptr<const Checkpoint> base) {
  std::vector<FeatureSpec> specs;
  if (!c.scorers.empty()) specs = load_scorer_specs(c.scorers);
  ScorerRegistry reg = ScorerRegistry::build(specs, std::move(base));
  for (const auto& o : c.objectives) require(reg.contains(o), "objective '", o, "' has no registered scorer");
  return reg;
}

std::vector<TokenId> prompt_ids(const Checkpoint& base, const std::string& prompt) {
  auto ids = clamp_prompt(base.vocab.tokenize(prompt), base.config);
  if (ids.empty()) ids.push_back(Vocabulary::kUnknown);
  return ids;
}

std::string ensemble_text(const Ensemble& e, const EnsembleWeights& w, const std::string& prompt,
                          std::size_t max_new) {
  return e.base().vocab.detokenize(e.generate(w, prompt_ids(e.base(), prompt), max_new));
}

std::string model_text(const Checkpoint& base, const Model& m, const std::string& prompt, std::size_t max_new) {
  return base.vocab.detokenize(m.greedy_generate(prompt_ids(base, prompt), max_new));
}

// Runs jobs[i] for every i on up to `threads` workers; rethrows the first failure.
void run_parallel(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min(threads, count);
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

json search_json(const SearchConfig& sc, const SearchResult& r) {
  return json{{"method", sc.method},
              {"strategy", std::string(to_string(sc.strategy))},
              {"weights", r.best_point},
              {"best_score", r.best_score},
              {"evaluations", r.evaluations}};
}

}  // namespace

// -- evaluation helpers --------------------------------------------------------

RunRecord evaluate_generations(const std::string& method, const std::vector<std::string>& prompts,
                               const std::vector<std::string>& generations, const ScorerRegistry& registry,
                               const std::vector<std::string>& objectives) {
  require(prompts.size() == generations.size(), "evaluate_generations: ", prompts.size(), " prompts but ",
          generations.size(), " generations");
  require(!prompts.empty(), "evaluate_generations: nothing to evaluate");
  RunRecord rec;
  rec.method = method;
  rec.objectives = objectives;
  rec.generations = generations;
  for (const auto& o : objectives) {
    const ScorerPtr s = registry.get(o);
    double total = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) total += s->score(prompts[i], generations[i]);
    rec.score_mean.push_back(total / static_cast<double>(prompts.size()));
    rec.score_sd.push_back(0.0);
  }
  try {
    rec.diversity2 = diversity2(generations);
  } catch (const InvalidArgument&) {
    rec.diversity2.reset();
  }
  double edit_total = 0.0;
  std::size_t edit_n = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (split_words(generations[i]).empty() || split_words(prompts[i]).empty()) continue;
    edit_total += edit_rate(prompts[i], generations[i]);
    ++edit_n;
  }
  if (edit_n > 0) rec.edit_rate = edit_total / static_cast<double>(edit_n);
  return rec;
}

Evaluation ensemble_utility(const Ensemble& ensemble, const EnsembleWeights& weights,
                            const std::vector<std::string>& prompts, const ScorerRegistry& registry,
                            const Preference& preference, std::size_t max_new_tokens) {
  require(!prompts.empty(), "ensemble_utility needs prompts");
  const auto& objectives = ensemble.objectives();
  std::vector<ScorerPtr> scorers;
  for (const auto& o : objectives) scorers.push_back(registry.get(o));
  Evaluation e;
  e.scores.assign(objectives.size(), 0.0);
  for (const auto& prompt : prompts) {
    const std::string text = ensemble_text(ensemble, weights, prompt, max_new_tokens);
    for (std::size_t i = 0; i < scorers.size(); ++i) e.scores[i] += scorers[i]->score(prompt, text);
  }
  for (double& s : e.scores) s /= static_cast<double>(prompts.size());
  e.utility = utility(e.scores, preference);
  return e;
}

std::string search_trace_csv(const SearchResult& result, const std::vector<std::string>& objectives) {
  const std::size_t d = result.trace.empty() ? 0 : result.trace.front().point.size();
  std::vector<std::string> header{"iteration", "utility"};
  for (std::size_t i = 1; i <= d; ++i) header.push_back("w" + std::to_string(i));
  for (const auto& o : objectives) header.push_back(o);
  CsvTable table(header);
  for (const auto& rec : result.trace) {
    require(rec.scores.empty() || rec.scores.size() == objectives.size(), "trace record has ", rec.scores.size(),
            " scores for ", objectives.size(), " objectives");
    std::vector<std::string> row{std::to_string(rec.iteration), format_number(rec.utility)};
    for (double w : rec.point) row.push_back(format_number(w));
    for (std::size_t i = 0; i < objectives.size(); ++i) {
      row.push_back(rec.scores.empty() ? std::string() : format_number(rec.scores[i]));
    }
    table.add_row(std::move(row));
  }
  return table.str();
}

SearchResult run_weight_search(const SearchConfig& config, std::size_t dimension, const DetailedObjective& objective,
                               std::uint64_t seed) {
  config.validate();
  if (config.method == "hierarchical") {
    SearchSpec spec;
    spec.dimension = dimension;
    spec.iterations = config.iterations;
    spec.objective = objective;
    return hierarchical_search(spec);
  }
  if (config.method == "grid") return exhaustive_grid(objective, dimension, config.step);
  return bayesian_search(objective, dimension, config.budget, seed);
}

// -- stages ---------------------------------------------------------------------

CorpusSplits stage_ingest(const ExperimentConfig& config) {
  config.validate();
  const RunLayout layout{config.output_dir};
  init_manifest(config, layout);
  const StageSeeds seeds = StageSeeds::derive(config.seed, config.objectives.size());
  CorpusSplits splits = ingest(config.corpus, config.splits, seeds.split);
  write_text_file(layout.split("fine_tune"), corpus_to_jsonl(splits.fine_tune));
  write_text_file(layout.split("aggregation"), corpus_to_jsonl(splits.aggregation));
  write_text_file(layout.split("inference"), corpus_to_jsonl(splits.inference));
  const json stats{{"records", splits.stats.records},
                   {"avg_words", splits.stats.avg_words},
                   {"fine_tune", splits.fine_tune.size()},
                   {"aggregation", splits.aggregation.size()},
                   {"inference", splits.inference.size()}};
  write_text_file(layout.corpus_stats(), stats.dump(2) + "\n");
  mark_stage(layout, "ingest", [&](json& m) {
    m["artifacts"]["corpus"] = {{"fine_tune", rel(layout, layout.split("fine_tune"))},
                                {"aggregation", rel(layout, layout.split("aggregation"))},
                                {"inference", rel(layout, layout.split("inference"))},
                                {"stats", rel(layout, layout.corpus_stats())}};
    m["corpus_stats"] = stats;
  });
  return splits;
}

void stage_bootstrap(const ExperimentConfig& config) {
  config.validate();
  const RunLayout layout{config.output_dir};
  init_manifest(config, layout);
  const StageSeeds seeds = StageSeeds::derive(config.seed, config.objectives.size());
  const auto start = std::chrono::steady_clock::now();
  const auto records = load_split(layout, "fine_tune");
  Checkpoint base = bootstrap_checkpoint(records, config.model, seeds.init, config.vocab_cap);
  PretrainReport report;
  if (config.pretrain.steps > 0) {
    PretrainConfig pc = config.pretrain;
    pc.seed = seeds.pretrain;
    report = pretrain(base, records, pc);
  }
  save_checkpoint(base, layout.base());
  record_timing(layout, "bootstrap", seconds_since(start));
  mark_stage(layout, "bootstrap", [&](json& m) {
    m["artifacts"]["base"] = rel(layout, layout.base());
    m["pretrain"] = {{"steps", report.steps},
                     {"final_loss", report.loss_curve.empty() ? 0.0 : report.loss_curve.back()},
                     {"vocab_size", base.vocab.size()}};
  });
}

std::vector<TrainReport> stage_train(const ExperimentConfig& config) {
  config.validate();
  const RunLayout layout{config.output_dir};
  init_manifest(config, layout);
  if (!fs::exists(layout.base())) stage_bootstrap(config);
  const auto base = load_base(layout);
  const ScorerRegistry registry = make_registry(config, base);
  const std::vector<std::string> prompts = prompts_of(load_split(layout, "fine_tune"));
  const StageSeeds seeds = StageSeeds::derive(config.seed, config.objectives.size());

  std::vector<TrainReport> reports(config.objectives.size());
  run_parallel(config.objectives.size(), config.threads, [&](std::size_t i) {
    const std::string& objective = config.objectives[i];
    RLConfig rl = config.rl;
    rl.seed = seeds.train[i];
    TrainResult tr = train(*base, prompts, RewardFunction(RewardSpec::single(objective), registry), rl);
    save_adapter(tr.adapter, layout.adapter(objective));
    write_text_file(layout.curve(objective), reward_curve_csv(tr.report));
    tr.report.adapter_path = rel(layout, layout.adapter(objective));
    reports[i] = std::move(tr.report);
  });

  EnsembleManifest em;
  em.base = "base.json";
  for (const auto& o : config.objectives) em.adapters.push_back(rel(layout, layout.adapter(o)));
  em.objectives = config.objectives;
  em.strategy = config.search.strategy;
  save_ensemble_manifest(em, layout.ensemble());

  update_json(layout.timings(), [&](json& t) {
    for (const auto& r : reports) t["train"][r.objective] = r.wall_seconds;
  });
  mark_stage(layout, "train", [&](json& m) {
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const auto& o = config.objectives[i];
      m["artifacts"]["adapters"][o] = reports[i].adapter_path;
      m["artifacts"]["curves"][o] = rel(layout, layout.curve(o));
      m["training"][o] = {{"steps", reports[i].steps},
                          {"data_points", reports[i].data_points},
                          {"stopped_early", reports[i].stopped_early},
                          {"final_moving_average", reports[i].final_moving_average()}};
    }
    m["artifacts"]["ensemble"] = rel(layout, layout.ensemble());
  });
  return reports;
}

SearchResult stage_search(const ExperimentConfig& config) {
  config.validate();
  const RunLayout layout{config.output_dir};
  init_manifest(config, layout);
  require<IoError>(fs::exists(layout.ensemble()), "missing ensemble manifest ", layout.ensemble().string(),
                   " (run train first)");
  const Ensemble ensemble = load_ensemble(layout.ensemble());
  auto base = std::make_shared<const Checkpoint>(ensemble.base());
  const ScorerRegistry registry = make_registry(config, base);
  std::vector<std::string> prompts = prompts_of(load_split(layout, "aggregation"));
  require(!prompts.empty(), "the aggregation split is empty");
  if (config.search.max_prompts > 0 && prompts.size() > config.search.max_prompts) {
    prompts.resize(config.search.max_prompts);
  }
  const Preference pref = config.utility_preference();
  const Strategy strategy = config.search.strategy;
  const DetailedObjective objective = [&](const Point& w) {
    return ensemble_utility(ensemble, EnsembleWeights{w, strategy}, prompts, registry, pref, config.max_new_tokens);
  };

  const auto start = std::chrono::steady_clock::now();
  const StageSeeds seeds = StageSeeds::derive(config.seed, config.objectives.size());
  SearchResult result = run_weight_search(config.search, ensemble.size(), objective, seeds.bayes);
  record_timing(layout, "search", seconds_since(start));

  write_text_file(layout.trace(), search_trace_csv(result, config.objectives));
  const json summary = search_json(config.search, result);
  write_text_file(layout.search_result(), summary.dump(2) + "\n");
  mark_stage(layout, "search", [&](json& m) {
    m["artifacts"]["trace"] = rel(layout, layout.trace());
    m["artifacts"]["search"] = rel(layout, layout.search_result());
    m["search"] = summary;
  });
  return result;
}

namespace {

std::vector<double> load_weights(const RunLayout& layout) {
  require<IoError>(fs::exists(layout.search_result()), "missing search result ", layout.search_result().string(),
                   " (run search first)");
  const json doc = json::parse(read_text_file(layout.search_result()));
  return doc.at("weights").get<std::vector<double>>();
}

struct InferenceSet {
  std::string name;
  std::vector<std::string> prompts;
};

std::vector<InferenceSet> inference_sets(const ExperimentConfig& config, const RunLayout& layout) {
  std::vector<InferenceSet> sets{{"inference", prompts_of(load_split(layout, "inference"))}};
  for (const auto& p : config.extra_inference) sets.push_back({p.stem().string(), prompts_of(load_corpus(p))});
  return sets;
}

}  // namespace

std::vector<std::string> stage_generate(const ExperimentConfig& config) {
  config.validate();
  const RunLayout layout{config.output_dir};
  init_manifest(config, layout);
  require<IoError>(fs::exists(layout.ensemble()), "missing ensemble manifest ", layout.ensemble().string(),
                   " (run train first)");
  const Ensemble ensemble = load_ensemble(layout.ensemble());
  const EnsembleWeights weights{load_weights(layout), config.search.strategy};
  const auto start = std::chrono::steady_clock::now();

  CsvTable table({"corpus", "prompt", "generation"});
  std::vector<std::string> main_generations;
  for (const auto& set : inference_sets(config, layout)) {
    for (const auto& prompt : set.prompts) {
      std::string text = ensemble_text(ensemble, weights, prompt, config.max_new_tokens);
      if (set.name == "inference") main_generations.push_back(text);
      table.add_row({set.name, prompt, std::move(text)});
    }
  }
  write_text_file(layout.generations(), table.str());
  record_timing(layout, "generate", seconds_since(start));
  mark_stage(layout, "generate", [&](json& m) { m["artifacts"]["generations"] = rel(layout, layout.generations()); });
  return main_generations;
}

RunRecord stage_eval(const ExperimentConfig& config) {
  config.validate();
  const RunLayout layout{config.output_dir};
  init_manifest(config, layout);
  require<IoError>(fs::exists(layout.generations()), "missing generations ", layout.generations().string(),
                   " (run generate first)");
  const auto rows = parse_csv(read_text_file(layout.generations()));
  require<FormatError>(!rows.empty() && rows.front() == std::vector<std::string>{"corpus", "prompt", "generation"},
                       "unexpected header in ", layout.generations().string());
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> by_corpus;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    require<FormatError>(rows[i].size() == 3, layout.generations().string(), " row ", i, " has ", rows[i].size(),
                         " fields");
    by_corpus[rows[i][0]].first.push_back(rows[i][1]);
    by_corpus[rows[i][0]].second.push_back(rows[i][2]);
  }
  require<FormatError>(by_corpus.contains("inference"), "no inference-split generations in ",
                       layout.generations().string());

  const auto base = load_base(layout);
  const ScorerRegistry registry = make_registry(config, base);
  const std::vector<double> weights = load_weights(layout);
  json metrics = json::object();
  RunRecord main;
  for (const auto& [name, pg] : by_corpus) {
    RunRecord rec = evaluate_generations(std::string(to_string(config.search.strategy)), pg.first, pg.second, registry,
                                         config.objectives);
    rec.weights = weights;
    json scores = json::object();
    for (std::size_t i = 0; i < rec.objectives.size(); ++i) scores[rec.objectives[i]] = rec.score_mean[i];
    metrics[name] = {{"scores", scores},
                     {"utility", utility(rec.score_mean, config.utility_preference())},
                     {"diversity2", rec.diversity2 ? json(*rec.diversity2) : json(nullptr)},
                     {"edit_rate", rec.edit_rate ? json(*rec.edit_rate) : json(nullptr)},
                     {"prompts", pg.first.size()}};
    if (name == "inference") main = std::move(rec);
  }
  const json doc{{"strategy", std::string(to_string(config.search.strategy))},
                 {"weights", weights},
                 {"corpora", metrics}};
  write_text_file(layout.metrics(), doc.dump(2) + "\n");
  mark_stage(layout, "eval", [&](json& m) {
    m["artifacts"]["metrics"] = rel(layout, layout.metrics());
    m["metrics"] = metrics;
  });
  return main;
}

PipelineResult run_pipeline(const ExperimentConfig& config) {
  config.validate();
  const RunLayout layout{config.output_dir};
  std::string stage = "ingest";
  try {
    PipelineResult out;
    stage_ingest(config);
    stage = "bootstrap";
    stage_bootstrap(config);
    stage = "train";
    out.training = stage_train(config);
    stage = "search";
    out.search = stage_search(config);
    out.weights = out.search.best_point;
    stage = "generate";
    stage_generate(config);
    stage = "eval";
    out.record = stage_eval(config);
    return out;
  } catch (const std::exception& e) {
    record_stage_failure(config, stage, e);
    throw;
  }
}

void record_stage_failure(const ExperimentConfig& config, const std::string& stage, const std::exception& error) {
  if (config.output_dir.empty()) return;
  const RunLayout layout{config.output_dir};
  const auto* err = dynamic_cast<const Error*>(&error);
  update_json(layout.manifest(), [&](json& m) {
    m["stages"][stage] = "failed";
    m["error"] = {{"stage", stage}, {"kind", err ? err->kind() : std::string("internal")}, {"message", error.what()}};
  });
}

// -- bench -------------------------------------------------------------------------

namespace {

struct MethodSpec {
  enum class Kind { single, uniform, ensemble } kind = Kind::ensemble;
  std::string objective;
  Strategy strategy = Strategy::hidden;
  std::vector<double> fixed;  // empty means searched
};

MethodSpec parse_method(const std::string& text, const std::vector<std::string>& objectives) {
  MethodSpec m;
  if (text.rfind("single:", 0) == 0) {
    m.kind = MethodSpec::Kind::single;
    m.objective = text.substr(7);
    require(std::find(objectives.begin(), objectives.end(), m.objective) != objectives.end(), "bench method '", text,
            "' names an unknown objective");
    return m;
  }
  if (text == "uniform") {
    m.kind = MethodSpec::Kind::uniform;
    return m;
  }
  const auto at = text.find('@');
  m.strategy = parse_strategy(text.substr(0, at));
  if (at != std::string::npos) {
    std::string rest = text.substr(at + 1);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
      const auto comma = rest.find(',', pos);
      const std::string item = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      require(used == item.size() && !item.empty(), "bench method '", text, "': bad weight '", item, "'");
      m.fixed.push_back(v);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    require(m.fixed.size() == objectives.size(), "bench method '", text, "' gives ", m.fixed.size(),
            " weights for ", objectives.size(), " objectives");
  }
  return m;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

RunRecord combine_replicates(const std::vector<RunRecord>& reps) {
  RunRecord out = reps.front();
  if (reps.size() == 1) return out;
  for (std::size_t i = 0; i < out.score_mean.size(); ++i) {
    std::vector<double> xs;
    for (const auto& r : reps) xs.push_back(r.score_mean[i]);
    out.score_mean[i] = mean_of(xs);
    out.score_sd[i] = sd_of(xs);
  }
  auto avg_opt = [&](std::optional<double> RunRecord::*field) -> std::optional<double> {
    std::vector<double> xs;
    for (const auto& r : reps) {
      if (r.*field) xs.push_back(*(r.*field));
    }
    if (xs.empty()) return std::nullopt;
    return mean_of(xs);
  };
  out.diversity2 = avg_opt(&RunRecord::diversity2);
  out.edit_rate = avg_opt(&RunRecord::edit_rate);
  // Per-job times are averaged first, so the combined row still satisfies
  // t_total = max(train_times) + agg_seconds.
  std::vector<double> agg, data;
  for (std::size_t j = 0; j < out.train_times.size(); ++j) {
    std::vector<double> xs;
    for (const auto& r : reps) xs.push_back(r.train_times.at(j));
    out.train_times[j] = mean_of(xs);
  }
  for (const auto& r : reps) {
    agg.push_back(r.agg_seconds);
    data.push_back(static_cast<double>(r.data_points));
  }
  out.agg_seconds = mean_of(agg);
  out.data_points = static_cast<std::uint64_t>(std::llround(mean_of(data)));
  out.train_seconds = *std::max_element(out.train_times.begin(), out.train_times.end());
  out.t_total = t_total(out.train_times, out.agg_seconds);
  return out;
}

}  // namespace

BenchResult bench(const ExperimentConfig& config) {
  config.validate();
  require(config.bench_methods.size() >= 2, "bench needs at least two methods, got ", config.bench_methods.size());
  const RunLayout layout{config.output_dir};
  std::vector<MethodSpec> methods;
  for (const auto& m : config.bench_methods) methods.push_back(parse_method(m, config.objectives));

  std::vector<std::vector<RunRecord>> per_method(methods.size());
  std::vector<std::string> errors(methods.size());
  std::vector<std::string> sample_prompts;
  for (std::size_t rep = 0; rep < config.replicates; ++rep) {
    ExperimentConfig rc = config;
    rc.seed = config.seed + rep;
    rc.output_dir = layout.root / "bench" / ("replicate_" + std::to_string(rep));
    const RunLayout rl{rc.output_dir};
    stage_ingest(rc);
    stage_bootstrap(rc);
    const std::vector<TrainReport> reports = stage_train(rc);
    const Ensemble ensemble = load_ensemble(rl.ensemble());
    auto base = std::make_shared<const Checkpoint>(ensemble.base());
    const ScorerRegistry registry = make_registry(rc, base);
    const std::vector<std::string> prompts = prompts_of(load_split(rl, "inference"));
    std::vector<std::string> agg_prompts = prompts_of(load_split(rl, "aggregation"));
    if (rc.search.max_prompts > 0 && agg_prompts.size() > rc.search.max_prompts) {
      agg_prompts.resize(rc.search.max_prompts);
    }
    if (rep == 0) sample_prompts = prompts;
    const StageSeeds seeds = StageSeeds::derive(rc.seed, rc.objectives.size());

    std::vector<double> walls;
    std::uint64_t all_data = 0;
    for (const auto& r : reports) {
      walls.push_back(r.wall_seconds);
      all_data += r.data_points;
    }

    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      if (!errors[mi].empty()) continue;
      const MethodSpec& m = methods[mi];
      try {
        std::vector<std::string> gens;
        RunRecord rec;
        if (m.kind == MethodSpec::Kind::single) {
          const auto idx = static_cast<std::size_t>(
              std::find(rc.objectives.begin(), rc.objectives.end(), m.objective) - rc.objectives.begin());
          for (const auto& p : prompts) gens.push_back(model_text(*base, ensemble.member(idx), p, rc.max_new_tokens));
          rec = evaluate_generations(config.bench_methods[mi], prompts, gens, registry, rc.objectives);
          rec.data_points = reports[idx].data_points;
          rec.train_times = {reports[idx].wall_seconds};
          rec.weights = EnsembleWeights::one_hot(rc.objectives.size(), idx, Strategy::parameter).w;
        } else if (m.kind == MethodSpec::Kind::uniform) {
          RLConfig rlc = rc.rl;
          rlc.seed = seeds.uniform;
          const TrainResult tr =
              train(*base, prompts_of(load_split(rl, "fine_tune")),
                    RewardFunction(RewardSpec::uniform(rc.objectives), registry), rlc);
          save_adapter(tr.adapter, rl.root / "adapters" / "uniform.json");
          write_text_file(rl.root / "curves" / "uniform.csv", reward_curve_csv(tr.report));
          const WeightedAdapter wa{&tr.adapter, 1.0};
          const Model model(base->config, apply_lora(base->params, std::span(&wa, 1)));
          for (const auto& p : prompts) gens.push_back(model_text(*base, model, p, rc.max_new_tokens));
          rec = evaluate_generations(config.bench_methods[mi], prompts, gens, registry, rc.objectives);
          rec.data_points = tr.report.data_points;
          rec.train_times = {tr.report.wall_seconds};
        } else {
          std::vector<double> w = m.fixed;
          double agg = 0.0;
          if (w.empty()) {
            const auto start = std::chrono::steady_clock::now();
            const DetailedObjective objective = [&](const Point& x) {
              return ensemble_utility(ensemble, EnsembleWeights{x, m.strategy}, agg_prompts, registry,
                                      rc.utility_preference(), rc.max_new_tokens);
            };
            w = run_weight_search(rc.search, ensemble.size(), objective, seeds.bayes).best_point;
            agg = seconds_since(start);
          }
          const EnsembleWeights ew{w, m.strategy};
          for (const auto& p : prompts) gens.push_back(ensemble_text(ensemble, ew, p, rc.max_new_tokens));
          rec = evaluate_generations(config.bench_methods[mi], prompts, gens, registry, rc.objectives);
          rec.weights = w;
          rec.data_points = all_data;
          rec.train_times = walls;
          rec.agg_seconds = agg;
        }
        rec.train_seconds = *std::max_element(rec.train_times.begin(), rec.train_times.end());
        rec.t_total = t_total(rec.train_times, rec.agg_seconds);
        per_method[mi].push_back(std::move(rec));
      } catch (const std::exception& e) {
        errors[mi] = e.what();
      }
    }
  }

  BenchResult out;
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    if (!errors[mi].empty()) {
      RunRecord failed;
      failed.method = config.bench_methods[mi];
      failed.objectives = config.objectives;
      failed.error = errors[mi];
      out.records.push_back(std::move(failed));
    } else {
      out.records.push_back(combine_replicates(per_method[mi]));
    }
  }
  out.complexity = complexity_counts(config.objectives.size(), config.search.step);

  write_text_file(layout.bench_table(), run_records_csv(out.records));
  CsvTable samples({"method", "prompt", "generation"});
  for (const auto& rec : out.records) {
    for (std::size_t i = 0; i < std::min(config.bench_samples, rec.generations.size()); ++i) {
      samples.add_row({rec.method, sample_prompts[i], rec.generations[i]});
    }
  }
  write_text_file(layout.bench_samples(), samples.str());
  CsvTable complexity({"d", "step", "hierarchical", "grid"});
  complexity.add_row({std::to_string(config.objectives.size()), format_number(config.search.step),
                      std::to_string(out.complexity.hierarchical), std::to_string(out.complexity.grid)});
  write_text_file(layout.bench_complexity(), complexity.str());
  return out;
}

std::string run_records_csv(const std::vector<RunRecord>& records) {
  require(!records.empty(), "no run records");
  const auto& objectives = records.front().objectives;
  std::vector<std::string> header{"method"};
  for (const auto& o : objectives) {
    header.push_back(o + "_mean");
    header.push_back(o + "_sd");
  }
  for (const char* h : {"diversity2", "edit_rate", "weights", "data_points", "train_times", "train_seconds",
                        "agg_seconds", "t_total", "error"}) {
    header.emplace_back(h);
  }
  CsvTable table(header);
  for (const auto& r : records) {
    std::vector<std::string> row{r.method};
    for (std::size_t i = 0; i < objectives.size(); ++i) {
      const bool have = i < r.score_mean.size();
      row.push_back(have ? format_number(r.score_mean[i]) : "");
      row.push_back(have ? format_number(r.score_sd[i]) : "");
    }
    row.push_back(r.diversity2 ? format_number(*r.diversity2) : "");
    row.push_back(r.edit_rate ? format_number(*r.edit_rate) : "");
    std::string w;
    for (std::size_t i = 0; i < r.weights.size(); ++i) w += (i ? " " : "") + format_number(r.weights[i]);
    row.push_back(w);
    row.push_back(std::to_string(r.data_points));
    std::string times;
    for (std::size_t i = 0; i < r.train_times.size(); ++i) times += (i ? " " : "") + format_number(r.train_times[i]);
    row.push_back(times);
    row.push_back(format_number(r.train_seconds));
    row.push_back(format_number(r.agg_seconds));
    row.push_back(format_number(r.t_total));
    row.push_back(r.error);
    table.add_row(std::move(row));
  }
  return table.str();
}

}  // namespace emorl
