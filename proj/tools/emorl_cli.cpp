// Command-line front end over the pipeline stages.
//
// Every flag mirrors an ExperimentConfig field. A --config file is applied on
// top of the flags (JSON merge patch), so values in the file win.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emorl/checkpoint.hpp"
#include "emorl/error.hpp"
#include "emorl/pipeline.hpp"
#include "emorl/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags {
  json doc = json::object();

  // Registers --name writing into doc at the given JSON pointer.
  template <typename T>
  CLI::Option* add(CLI::App& app, const std::string& name, const std::string& pointer, const std::string& help) {
    return app.add_option_function<T>(
        name, [this, pointer](const T& v) { doc[json::json_pointer(pointer)] = v; }, help);
  }

  CLI::Option* add_path(CLI::App& app, const std::string& name, const std::string& pointer, const std::string& help) {
    return app.add_option_function<std::string>(
        name, [this, pointer](const std::string& v) { doc[json::json_pointer(pointer)] = fs::absolute(v).string(); },
        help);
  }
};

void print_error(const std::string& command, const std::string& kind, const std::string& message) {
  const json record{{"error", {{"command", command}, {"kind", kind}, {"message", message}}}};
  std::cerr << record.dump() << "\n";
}

emorl::ExperimentConfig resolve_config(const Flags& flags, const std::string& config_path) {
  json doc = flags.doc;
  fs::path base = fs::current_path();
  if (!config_path.empty()) {
    const fs::path path = fs::absolute(config_path);
    json file;
    try {
      file = json::parse(emorl::read_text_file(path));
    } catch (const json::exception& e) {
      throw emorl::FormatError(path.string() + ": " + e.what());
    }
    doc.merge_patch(file);
    base = path.parent_path();
  }
  return emorl::parse_experiment_config(doc.dump(), base);
}

json record_json(const emorl::RunRecord& r) {
  json scores = json::object();
  for (std::size_t i = 0; i < r.objectives.size(); ++i) scores[r.objectives[i]] = r.score_mean[i];
  return {{"method", r.method},
          {"scores", scores},
          {"diversity2", r.diversity2 ? json(*r.diversity2) : json(nullptr)},
          {"edit_rate", r.edit_rate ? json(*r.edit_rate) : json(nullptr)},
          {"weights", r.weights}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble multi-objective RL harness: train one adapter per objective, search aggregation "
               "weights, generate and evaluate."};
  app.require_subcommand(1);
  app.fallthrough();

  Flags flags;
  std::string config_path;
  app.add_option("-c,--config", config_path, "JSON experiment config; its values override flags")
      ->check(CLI::ExistingFile);

  flags.add_path(app, "--corpus", "/corpus", "line-delimited {prompt, response} records");
  app.add_option_function<std::vector<std::string>>(
      "--extra-inference",
      [&](const std::vector<std::string>& v) {
        json paths = json::array();
        for (const auto& p : v) paths.push_back(fs::absolute(p).string());
        flags.doc["extra_inference"] = paths;
      },
      "further corpora scored alongside the inference split");
  flags.add<double>(app, "--split-fine-tune", "/splits/fine_tune", "fine-tuning share");
  flags.add<double>(app, "--split-aggregation", "/splits/aggregation", "aggregation (weight search) share");
  flags.add<double>(app, "--split-inference", "/splits/inference", "inference share");
  flags.add_path(app, "--scorers", "/scorers", "scorer definitions (JSON)");
  flags.add<std::size_t>(app, "--d-model", "/model/d_model", "hidden width");
  flags.add<std::size_t>(app, "--n-heads", "/model/n_heads", "attention heads");
  flags.add<std::size_t>(app, "--enc-layers", "/model/n_enc_layers", "encoder layers");
  flags.add<std::size_t>(app, "--dec-layers", "/model/n_dec_layers", "decoder layers");
  flags.add<std::size_t>(app, "--d-ff", "/model/d_ff", "feed-forward width");
  flags.add<std::size_t>(app, "--max-seq-len", "/model/max_seq_len", "longest encoder or decoder sequence");
  flags.add<std::size_t>(app, "--vocab-cap", "/vocab_cap", "vocabulary size limit");
  flags.add<std::size_t>(app, "--pretrain-steps", "/pretrain/steps", "supervised warm-start steps (0 disables)");
  flags.add<std::size_t>(app, "--pretrain-batch", "/pretrain/batch_size", "warm-start batch size");
  flags.add<double>(app, "--pretrain-lr", "/pretrain/learning_rate", "warm-start Adam learning rate");
  flags.add<std::vector<std::string>>(app, "--objectives", "/objectives", "scorer names, one adapter each");
  flags.add<std::vector<double>>(app, "--preference", "/preference", "utility weights over objectives");
  flags.add<std::size_t>(app, "--rl-batch", "/rl/batch_size", "prompts per RL step");
  flags.add<std::size_t>(app, "--rl-k", "/rl/k", "sampled candidates per prompt");
  flags.add<double>(app, "--beta", "/rl/beta", "KL penalty coefficient");
  flags.add<double>(app, "--rl-lr", "/rl/learning_rate", "adapter SGD learning rate");
  flags.add<std::size_t>(app, "--max-steps", "/rl/max_steps", "RL step limit");
  flags.add<std::size_t>(app, "--ma-window", "/rl/ma_window", "moving-average window");
  flags.add<double>(app, "--threshold", "/rl/threshold", "minimum moving-average gain that resets patience");
  flags.add<std::size_t>(app, "--patience", "/rl/patience", "steps without gain before stopping");
  flags.add<double>(app, "--temperature", "/rl/temperature", "sampling temperature");
  flags.add<std::size_t>(app, "--rl-max-new", "/rl/max_new_tokens", "generation length during training");
  flags.add<std::string>(app, "--kl-mode", "/rl/kl_mode", "sampled | full");
  flags.add<std::size_t>(app, "--lora-rank", "/rl/lora_rank", "adapter rank");
  flags.add<double>(app, "--lora-alpha", "/rl/lora_alpha", "adapter scaling");
  flags.add<std::vector<std::string>>(app, "--targets", "/rl/targets", "parameters receiving adapters");
  flags.add<std::string>(app, "--search-method", "/search/method", "hierarchical | grid | bayesian");
  flags.add<std::size_t>(app, "--iterations", "/search/iterations", "hierarchical search iterations");
  flags.add<double>(app, "--step", "/search/step", "exhaustive grid step");
  flags.add<std::size_t>(app, "--budget", "/search/budget", "bayesian evaluation budget");
  flags.add<std::string>(app, "--strategy", "/search/strategy", "hidden | logit | parameter");
  flags.add<std::size_t>(app, "--max-prompts", "/search/max_prompts", "aggregation prompts per evaluation (0 = all)");
  flags.add<std::size_t>(app, "--max-new-tokens", "/max_new_tokens", "generation length at inference");
  flags.add<std::vector<std::string>>(app, "--bench-methods", "/bench/methods", "methods compared by bench");
  flags.add<std::size_t>(app, "--bench-samples", "/bench/samples", "sample generations kept per method");
  flags.add_path(app, "-o,--output", "/output_dir", "run directory");
  flags.add<std::uint64_t>(app, "--seed", "/seed", "master seed");
  flags.add<std::size_t>(app, "--replicates", "/replicates", "master-seed replicates per bench method");
  flags.add<std::size_t>(app, "--threads", "/threads", "parallel training jobs");

  app.add_subcommand("ingest", "shuffle and split the corpus, write split files and stats");
  app.add_subcommand("train", "train one adapter per objective (bootstraps the base model if needed)");
  app.add_subcommand("search", "search ensemble weights on the aggregation split");
  app.add_subcommand("generate", "generate on the inference corpora with the searched weights");
  app.add_subcommand("eval", "score generations and write metrics");
  app.add_subcommand("run", "all stages in order");
  app.add_subcommand("bench", "compare methods on the inference split");
  auto* report = app.add_subcommand("report", "summarise a run directory as delimited text");
  std::string run_dir;
  report->add_option("run_dir", run_dir, "run directory (defaults to --output)");
  app.add_subcommand("print-config", "print the resolved config as JSON");

  std::string command = "emorl";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error(command, "usage", e.what());
    return 2;
  }
  command = app.get_subcommands().front()->get_name();

  emorl::ExperimentConfig config;
  bool have_config = false;
  try {
    if (command == "report") {
      fs::path dir = run_dir;
      if (dir.empty()) {
        const json out = flags.doc.value("output_dir", json());
        emorl::require(out.is_string(), "report needs a run directory (positional or --output)");
        dir = out.get<std::string>();
      }
      std::cout << emorl::write_report(dir).summary;
      return 0;
    }

    config = resolve_config(flags, config_path);
    have_config = true;
    if (command == "print-config") {
      std::cout << emorl::experiment_config_to_json(config) << "\n";
      return 0;
    }

    json out{{"command", command}, {"output_dir", config.output_dir.string()}};
    if (command == "ingest") {
      const auto splits = emorl::stage_ingest(config);
      out["records"] = splits.stats.records;
      out["avg_words"] = splits.stats.avg_words;
      out["splits"] = {splits.fine_tune.size(), splits.aggregation.size(), splits.inference.size()};
    } else if (command == "train") {
      for (const auto& r : emorl::stage_train(config)) {
        out["training"][r.objective] = {{"steps", r.steps},
                                        {"data_points", r.data_points},
                                        {"final_moving_average", r.final_moving_average()},
                                        {"seconds", r.wall_seconds}};
      }
    } else if (command == "search") {
      const auto result = emorl::stage_search(config);
      out["weights"] = result.best_point;
      out["best_score"] = result.best_score;
      out["evaluations"] = result.evaluations;
    } else if (command == "generate") {
      out["generations"] = emorl::stage_generate(config).size();
    } else if (command == "eval") {
      out["record"] = record_json(emorl::stage_eval(config));
    } else if (command == "run") {
      const auto result = emorl::run_pipeline(config);
      out["weights"] = result.weights;
      out["record"] = record_json(result.record);
    } else if (command == "bench") {
      const auto result = emorl::bench(config);
      std::cout << emorl::run_records_csv(result.records);
      for (const auto& r : result.records) {
        if (!r.error.empty()) print_error(command + ":" + r.method, "method", r.error);
      }
      return 0;
    }
    std::cout << out.dump(2) << "\n";
    return 0;
  } catch (const std::exception& e) {
    const auto* err = dynamic_cast<const emorl::Error*>(&e);
    if (have_config && command != "run" && command != "bench") {
      try {
        emorl::record_stage_failure(config, command, e);
      } catch (const std::exception&) {
        // the error record on stderr still goes out
      }
    }
    print_error(command, err ? err->kind() : "internal", e.what());
    return 1;
  }
}
