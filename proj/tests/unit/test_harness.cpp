#include <algorithm>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "emorl/corpus.hpp"
#include "emorl/csv.hpp"
#include "emorl/error.hpp"
#include "emorl/pipeline.hpp"
#include "emorl/report.hpp"
#include "test_support.hpp"

using namespace emorl;
using namespace emorl::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("emorl_test_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig tiny_config(const std::string& name) {
  ExperimentConfig c = load_experiment_config(data_dir() / "tiny_config.json");
  c.output_dir = scratch(name);
  return c;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

std::string jsonl(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

std::string record(int i) {
  return "{\"prompt\": \"prompt number " + std::to_string(i) + "\", \"response\": \"reply " + std::to_string(i) +
         "\"}";
}

}  // namespace

// -- corpus ---------------------------------------------------------------------

TEST(Corpus, SplitsOneHundredRecordsEightyTenTen) {
  std::vector<CorpusRecord> records;
  for (int i = 0; i < 100; ++i) records.push_back({"p" + std::to_string(i), "r"});
  const CorpusSplits s = split_corpus(records, {}, 3);
  EXPECT_EQ(s.fine_tune.size(), 80u);
  EXPECT_EQ(s.aggregation.size(), 10u);
  EXPECT_EQ(s.inference.size(), 10u);
  std::vector<CorpusRecord> all = s.fine_tune;
  all.insert(all.end(), s.aggregation.begin(), s.aggregation.end());
  all.insert(all.end(), s.inference.begin(), s.inference.end());
  auto key = [](const CorpusRecord& a, const CorpusRecord& b) { return a.prompt < b.prompt; };
  std::sort(all.begin(), all.end(), key);
  std::sort(records.begin(), records.end(), key);
  EXPECT_EQ(all, records);
  EXPECT_NE(s.fine_tune.front().prompt, "p0");  // shuffled
  EXPECT_EQ(split_corpus(records, {}, 3).inference, split_corpus(records, {}, 3).inference);
}

TEST(Corpus, AverageWordsHandCount) {
  const std::vector<CorpusRecord> records{{"i am", "sad"}, {"work is hard", "oh no"}};
  const CorpusStats s = corpus_stats(records);
  EXPECT_EQ(s.records, 2u);
  EXPECT_EQ(s.avg_words, 4.0);
}

TEST(Corpus, MalformedLineIsNamed) {
  std::vector<std::string> lines;
  for (int i = 1; i <= 6; ++i) lines.push_back(record(i));
  lines.push_back("{\"prompt\": \"broken\"");
  lines.push_back(record(8));
  try {
    parse_corpus(jsonl(lines));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos) << e.what();
  }
}

TEST(Corpus, EmptyFieldsBlankLinesAndEmptyCorpus) {
  EXPECT_EQ(parse_corpus(jsonl({record(1), "", "   ", record(2)})).size(), 2u);
  EXPECT_THROW(parse_corpus(jsonl({record(1), R"({"prompt": "  ", "response": "x"})"})), FormatError);
  EXPECT_THROW(parse_corpus(jsonl({R"({"prompt": "a"})"})), FormatError);
  EXPECT_TRUE(parse_corpus("\n\n").empty());
  const fs::path blank = scratch("blank_corpus.jsonl");
  write_text_file(blank, "\n\n");
  EXPECT_TRUE(load_corpus(blank).empty());
  EXPECT_THROW(ingest(blank, {}, 1), FormatError);
  EXPECT_THROW(load_corpus("/no/such/corpus.jsonl"), IoError);
}

TEST(Corpus, RatiosMustSumToOne) {
  EXPECT_THROW((SplitRatios{0.5, 0.2, 0.2}.validate()), InvalidArgument);
  EXPECT_THROW((SplitRatios{1.2, -0.1, -0.1}.validate()), InvalidArgument);
  EXPECT_NO_THROW((SplitRatios{0.7, 0.2, 0.1}.validate()));
}

TEST(Corpus, JsonlRoundTrip) {
  const auto records = load_corpus(data_dir() / "toy_corpus.jsonl");
  EXPECT_EQ(records.size(), 240u);
  EXPECT_EQ(parse_corpus(corpus_to_jsonl(records)), records);
}

// -- csv -------------------------------------------------------------------------

TEST(Csv, QuotingAndParsing) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  CsvTable t({"x", "y"});
  t.add_row({"1,2", "line\nbreak"});
  t.add_row({"", "\"q\""});
  const auto rows = parse_csv(t.str());
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1], (std::vector<std::string>{"1,2", "line\nbreak"}));
  EXPECT_EQ(rows[2], (std::vector<std::string>{"", "\"q\""}));
  EXPECT_THROW(t.add_row({"only one"}), InvalidArgument);
}

TEST(Csv, NumbersRoundTrip) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double v = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
    EXPECT_EQ(std::stod(format_number(v)), v);
  }
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_THROW(format_number(std::nan("")), NumericError);
}

// -- config ----------------------------------------------------------------------

TEST(Config, ParsesAndResolvesRelativePaths) {
  const ExperimentConfig c = load_experiment_config(data_dir() / "tiny_config.json");
  EXPECT_EQ(c.corpus, data_dir() / "toy_corpus.jsonl");
  EXPECT_EQ(c.objectives, (std::vector<std::string>{"reflection", "empathy", "fluency"}));
  EXPECT_EQ(c.model.d_model, 16u);
  EXPECT_EQ(c.splits.fine_tune, 0.8);
  EXPECT_EQ(c.search.method, "hierarchical");
  EXPECT_EQ(c.rl.k, 2u);
  EXPECT_EQ(c.seed, 11u);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = tiny_config("roundtrip");
  c.rl.kl_mode = KlMode::full;
  c.search.strategy = Strategy::logit;
  c.preference = {2, 1, 1};
  const ExperimentConfig back = parse_experiment_config(experiment_config_to_json(c));
  EXPECT_EQ(experiment_config_to_json(back), experiment_config_to_json(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_experiment_config(R"({"corpus": "x", "colour": 1})"), FormatError);
  EXPECT_THROW(parse_experiment_config(R"({"rl": {"gamma": 1}})"), FormatError);
  EXPECT_THROW(parse_experiment_config(R"({"seed": "abc"})"), FormatError);
  ExperimentConfig c = tiny_config("bad");
  c.preference = {1, 1};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny_config("bad");
  c.splits = {0.5, 0.5, 0.5};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny_config("bad");
  c.objectives = {"a", "a"};
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny_config("bad");
  c.search.method = "annealing";
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Config, SeedsAreFixedOffsetsOfTheMaster) {
  const StageSeeds a = StageSeeds::derive(11, 3);
  const StageSeeds b = StageSeeds::derive(11, 3);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.split, Rng::derive(11, 1));
  EXPECT_EQ(a.train[2], Rng::derive(11, 102));
  EXPECT_NE(a.split, a.init);
  EXPECT_NE(StageSeeds::derive(12, 3).split, a.split);
}

// -- pipeline ----------------------------------------------------------------------

TEST(Pipeline, ProducesCompleteArtifacts) {
  const ExperimentConfig c = tiny_config("complete");
  const PipelineResult r = run_pipeline(c);
  const RunLayout layout{c.output_dir};
  const json m = json::parse(slurp(layout.manifest()));
  for (const char* stage : {"ingest", "bootstrap", "train", "search", "generate", "eval"}) {
    EXPECT_EQ(m["stages"][stage], "done") << stage;
  }
  EXPECT_FALSE(m.contains("error"));
  EXPECT_EQ(m["seeds"]["split"].get<std::uint64_t>(), StageSeeds::derive(c.seed, 3).split);

  // Every recorded artifact exists and parses.
  std::vector<std::string> paths;
  std::function<void(const json&)> collect = [&](const json& j) {
    if (j.is_string()) paths.push_back(j.get<std::string>());
    if (j.is_object() || j.is_array()) {
      for (const auto& v : j) collect(v);
    }
  };
  collect(m["artifacts"]);
  EXPECT_GE(paths.size(), 13u);
  for (const auto& rel : paths) {
    const fs::path p = layout.root / rel;
    ASSERT_TRUE(fs::exists(p)) << rel;
    const std::string text = slurp(p);
    if (p.extension() == ".json") {
      EXPECT_TRUE(json::accept(text)) << rel;
    } else if (p.extension() == ".csv") {
      EXPECT_GE(parse_csv(text).size(), 2u) << rel;
    } else if (p.extension() == ".jsonl") {
      EXPECT_NO_THROW(parse_corpus(text)) << rel;
    }
  }

  // Trace schema: iteration, utility, w1..wd, one score per objective.
  const auto trace = parse_csv(slurp(layout.trace()));
  EXPECT_EQ(trace.front().size(), 2u + 3u + 3u);
  EXPECT_EQ(trace.size() - 1, r.search.evaluations);
  EXPECT_EQ(r.search.evaluations, 54u);  // 3^3 points x 2 iterations

  for (std::size_t i = 0; i < r.training.size(); ++i) {
    EXPECT_EQ(parse_csv(slurp(layout.curve(c.objectives[i]))).size() - 1, r.training[i].steps);
  }
}

TEST(Pipeline, RerunIsBitIdentical) {
  ExperimentConfig a = tiny_config("det_a");
  ExperimentConfig b = tiny_config("det_b");
  a.threads = 3;
  const PipelineResult ra = run_pipeline(a);
  const PipelineResult rb = run_pipeline(b);
  EXPECT_EQ(ra.weights, rb.weights);
  const RunLayout la{a.output_dir}, lb{b.output_dir};
  json ma = json::parse(slurp(la.manifest()));
  json mb = json::parse(slurp(lb.manifest()));
  ma["config"].erase("threads");
  mb["config"].erase("threads");
  EXPECT_EQ(ma, mb);
  EXPECT_EQ(slurp(la.generations()), slurp(lb.generations()));
  EXPECT_EQ(slurp(la.trace()), slurp(lb.trace()));
  EXPECT_EQ(slurp(la.base()), slurp(lb.base()));
  for (const auto& o : a.objectives) EXPECT_EQ(slurp(la.adapter(o)), slurp(lb.adapter(o))) << o;
}

TEST(Pipeline, StageThreeReRunReproducesOutputs) {
  const ExperimentConfig c = tiny_config("isolation");
  run_pipeline(c);
  const RunLayout layout{c.output_dir};
  const std::string generations = slurp(layout.generations());
  const std::string metrics = slurp(layout.metrics());
  fs::remove_all(layout.root / "inference");
  stage_generate(c);
  stage_eval(c);
  EXPECT_EQ(slurp(layout.generations()), generations);
  EXPECT_EQ(slurp(layout.metrics()), metrics);
}

TEST(Pipeline, PaperScaleSearchTraceHas135Rows) {
  ExperimentConfig c = tiny_config("trace135");
  c.search.iterations = 5;
  c.search.max_prompts = 1;
  c.max_new_tokens = 3;
  run_pipeline(c);
  const auto trace = parse_csv(slurp(RunLayout{c.output_dir}.trace()));
  EXPECT_EQ(trace.size() - 1, 135u);
}

TEST(Pipeline, SingleObjectiveDegeneratesToOneDimensionalSearch) {
  ExperimentConfig c = tiny_config("single");
  // Fluency is positive for any non-empty text, so only w = 0 scores zero.
  c.objectives = {"fluency"};
  const PipelineResult r = run_pipeline(c);
  ASSERT_EQ(r.weights.size(), 1u);
  EXPECT_EQ(r.search.evaluations, 6u);
  EXPECT_GT(r.weights[0], 0.0);
  // A positive scale of one hidden state leaves every argmax unchanged.
  const RunLayout layout{c.output_dir};
  const Ensemble e = load_ensemble(layout.ensemble());
  const auto rows = parse_csv(slurp(layout.generations()));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto ids = clamp_prompt(e.base().vocab.tokenize(rows[i][1]), e.base().config);
    EXPECT_EQ(rows[i][2], e.base().vocab.detokenize(e.member(0).greedy_generate(ids, c.max_new_tokens)));
  }
}

TEST(Pipeline, OtherSearchMethodsRun) {
  for (const char* method : {"grid", "bayesian"}) {
    ExperimentConfig c = tiny_config(std::string("method_") + method);
    c.objectives = {"reflection", "empathy"};
    c.search.method = method;
    c.search.step = 0.25;
    c.search.budget = 8;
    const PipelineResult r = run_pipeline(c);
    EXPECT_EQ(r.search.evaluations, method == std::string("grid") ? 16u : 8u);
  }
}

TEST(Pipeline, FailureIsRecordedAndPartialArtifactsKept) {
  ExperimentConfig c = tiny_config("failure");
  c.objectives = {"reflection", "no_such_scorer"};
  EXPECT_THROW(run_pipeline(c), InvalidArgument);
  const RunLayout layout{c.output_dir};
  const json m = json::parse(slurp(layout.manifest()));
  EXPECT_EQ(m["stages"]["ingest"], "done");
  EXPECT_EQ(m["stages"]["train"], "failed");
  EXPECT_EQ(m["error"]["stage"], "train");
  EXPECT_EQ(m["error"]["kind"], "invalid_argument");
  EXPECT_NE(m["error"]["message"].get<std::string>().find("no_such_scorer"), std::string::npos);
  EXPECT_TRUE(fs::exists(layout.split("fine_tune")));
  EXPECT_TRUE(fs::exists(layout.base()));
}

TEST(Pipeline, MalformedCorpusFailsAtIngest) {
  ExperimentConfig c = tiny_config("bad_corpus");
  const fs::path corpus = c.output_dir.parent_path() / "emorl_test_bad_corpus.jsonl";
  write_text_file(corpus, jsonl({record(1), "not json", record(3)}));
  c.corpus = corpus;
  EXPECT_THROW(run_pipeline(c), FormatError);
  const json m = json::parse(slurp(RunLayout{c.output_dir}.manifest()));
  EXPECT_EQ(m["stages"]["ingest"], "failed");
  EXPECT_NE(m["error"]["message"].get<std::string>().find("line 2"), std::string::npos);
}

TEST(Pipeline, StagesNeedTheirInputs) {
  const ExperimentConfig c = tiny_config("missing_inputs");
  EXPECT_THROW(stage_search(c), IoError);
  EXPECT_THROW(stage_generate(c), IoError);
  EXPECT_THROW(stage_eval(c), IoError);
}

// -- report ------------------------------------------------------------------------

TEST(Report, EmptyDirectoryListsExpectedArtifacts) {
  const fs::path dir = scratch("report_empty");
  fs::create_directories(dir);
  try {
    write_report(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string what = e.what();
    for (const char* name : {"manifest.json", "search/trace.csv", "inference/metrics.json", "curves/"}) {
      EXPECT_NE(what.find(name), std::string::npos) << name;
    }
  }
}

TEST(Report, WritesPlotReadyTables) {
  const ExperimentConfig c = tiny_config("report_ok");
  const PipelineResult r = run_pipeline(c);
  const ReportOutput out = write_report(c.output_dir);
  EXPECT_EQ(out.files.size(), 4u);
  const auto curves = parse_csv(slurp(c.output_dir / "report" / "curves.csv"));
  std::size_t steps = 0;
  for (const auto& t : r.training) steps += t.steps;
  EXPECT_EQ(curves.size() - 1, steps);
  const auto trace = parse_csv(slurp(c.output_dir / "report" / "trace.csv"));
  EXPECT_EQ(trace.front().size(), 2u + 3u + 3u);
  const auto metrics = parse_csv(slurp(c.output_dir / "report" / "metrics.csv"));
  EXPECT_EQ(metrics.size(), 2u);
  EXPECT_NE(out.summary.find("weight search"), std::string::npos);

  fs::remove(c.output_dir / "search" / "trace.csv");
  fs::remove(c.output_dir / "curves" / "empathy.csv");
  try {
    write_report(c.output_dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("search/trace.csv"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("curves/empathy.csv"), std::string::npos);
  }
}

// -- bench -------------------------------------------------------------------------

TEST(Bench, OneHotEnsembleMatchesSingleModelAndAccountsTime) {
  ExperimentConfig c = tiny_config("bench");
  c.bench_methods = {"single:empathy", "hidden@0,1,0", "logit@0,1,0", "parameter@0,1,0", "hidden", "uniform"};
  c.search.iterations = 1;
  const BenchResult r = bench(c);
  ASSERT_EQ(r.records.size(), 6u);
  for (const auto& rec : r.records) {
    EXPECT_TRUE(rec.error.empty()) << rec.method << ": " << rec.error;
    ASSERT_FALSE(rec.train_times.empty());
    EXPECT_EQ(rec.t_total, *std::max_element(rec.train_times.begin(), rec.train_times.end()) + rec.agg_seconds)
        << rec.method;
    for (double s : rec.score_mean) {
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
    }
  }
  EXPECT_EQ(r.records[0].generations, r.records[1].generations);
  EXPECT_EQ(r.records[0].generations, r.records[2].generations);
  EXPECT_EQ(r.records[0].generations, r.records[3].generations);
  EXPECT_GT(r.records[4].agg_seconds, 0.0);
  EXPECT_EQ(r.records[1].agg_seconds, 0.0);
  EXPECT_EQ(r.records[1].train_times.size(), 3u);
  EXPECT_EQ(r.complexity.hierarchical, 135u);
  EXPECT_EQ(r.complexity.grid, 32768u);

  const RunLayout layout{c.output_dir};
  const auto table = parse_csv(slurp(layout.bench_table()));
  EXPECT_EQ(table.size(), 7u);
  const auto complexity = parse_csv(slurp(layout.bench_complexity()));
  EXPECT_EQ(complexity[1], (std::vector<std::string>{"3", "0.03125", "135", "32768"}));
  EXPECT_EQ(parse_csv(slurp(layout.bench_samples())).size(), 1u + 6u * c.bench_samples);
}

TEST(Bench, FailingMethodIsReportedWhileOthersContinue) {
  ExperimentConfig c = tiny_config("bench_fail");
  c.bench_methods = {"single:reflection", "hidden@2,0,0"};
  const BenchResult r = bench(c);
  EXPECT_TRUE(r.records[0].error.empty());
  EXPECT_FALSE(r.records[0].generations.empty());
  EXPECT_FALSE(r.records[1].error.empty());
}

TEST(Bench, ReplicatesCombineIntoMeanAndSd) {
  ExperimentConfig c = tiny_config("bench_reps");
  c.bench_methods = {"single:reflection", "hidden@1,0,0"};
  c.replicates = 2;
  const BenchResult r = bench(c);
  for (const auto& rec : r.records) {
    EXPECT_TRUE(rec.error.empty()) << rec.error;
    EXPECT_EQ(rec.t_total, *std::max_element(rec.train_times.begin(), rec.train_times.end()) + rec.agg_seconds);
    for (double sd : rec.score_sd) EXPECT_GE(sd, 0.0);
  }
  EXPECT_TRUE(fs::exists(c.output_dir / "bench" / "replicate_1" / "manifest.json"));
}

TEST(Bench, NeedsTwoMethods) {
  ExperimentConfig c = tiny_config("bench_one");
  c.bench_methods = {"uniform"};
  EXPECT_THROW(bench(c), InvalidArgument);
  c.bench_methods = {"uniform", "single:nope"};
  EXPECT_THROW(bench(c), InvalidArgument);
}
