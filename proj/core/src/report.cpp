#include "emorl/report.hpp"

#include <sstream>

#include <json.hpp>

#include "emorl/checkpoint.hpp"
#include "emorl/csv.hpp"
#include "emorl/error.hpp"

namespace emorl {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* const kExpected[] = {"manifest.json",          "base.json",           "ensemble.json",
                                 "adapters/<objective>.json", "curves/<objective>.csv", "search/trace.csv",
                                 "search/result.json",     "inference/generations.csv", "inference/metrics.json"};

std::string expected_list() {
  std::string out;
  for (const char* e : kExpected) out += std::string("\n  ") + e;
  return out;
}

std::string cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_number()) return format_number(v.get<double>());
  return v.is_string() ? v.get<std::string>() : v.dump();
}

}  // namespace

ReportOutput write_report(const fs::path& run_dir) {
  const fs::path manifest_path = run_dir / "manifest.json";
  require<IoError>(fs::exists(manifest_path), "no run manifest in ", run_dir.string(),
                   "; a completed run contains:", expected_list());
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }

  const std::vector<std::string> objectives = manifest.value("objectives", std::vector<std::string>{});
  const json artifacts = manifest.value("artifacts", json::object());
  std::vector<std::string> missing;
  auto need = [&](const std::string& label, const json& where) -> fs::path {
    if (!where.is_string()) {
      missing.push_back(label + " (not recorded in the manifest)");
      return {};
    }
    const fs::path p = run_dir / where.get<std::string>();
    if (!fs::exists(p)) missing.push_back(label + " (" + p.string() + ")");
    return p;
  };
  std::vector<std::pair<std::string, fs::path>> curves;
  for (const auto& o : objectives) {
    const json entry = artifacts.contains("curves") ? artifacts["curves"].value(o, json()) : json();
    curves.emplace_back(o, need("curves/" + o + ".csv", entry));
  }
  const fs::path trace = need("search/trace.csv", artifacts.value("trace", json()));
  const fs::path metrics_path = need("inference/metrics.json", artifacts.value("metrics", json()));
  if (!missing.empty()) {
    std::string msg = "run directory " + run_dir.string() + " is missing artifacts:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw IoError(msg);
  }

  ReportOutput out;
  const fs::path dir = run_dir / "report";

  CsvTable curve_table({"objective", "step", "data_points", "mean_reward", "moving_average", "kl"});
  std::ostringstream summary;
  summary << "run: " << run_dir.string() << "\n\ntraining\n";
  for (const auto& [objective, path] : curves) {
    const auto rows = parse_csv(read_text_file(path));
    require<FormatError>(!rows.empty() && rows.front().size() == 6, "unexpected curve header in ", path.string());
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      require<FormatError>(r.size() == 6, path.string(), " row ", i, " has ", r.size(), " fields");
      curve_table.add_row({objective, r[0], r[5], r[1], r[4], r[3]});
    }
    const std::size_t steps = rows.size() - 1;
    summary << "  " << objective << ": " << steps << " steps";
    if (steps > 0) summary << ", final moving-average reward " << rows.back()[4];
    summary << "\n";
  }
  write_text_file(dir / "curves.csv", curve_table.str());
  out.files.push_back(dir / "curves.csv");

  const std::string trace_text = read_text_file(trace);
  const auto trace_rows = parse_csv(trace_text);
  require<FormatError>(!trace_rows.empty(), "empty search trace ", trace.string());
  write_text_file(dir / "trace.csv", trace_text);
  out.files.push_back(dir / "trace.csv");

  const json search = manifest.value("search", json::object());
  summary << "\nweight search (" << search.value("method", std::string("?")) << ", "
          << search.value("strategy", std::string("?")) << ")\n"
          << "  evaluations: " << trace_rows.size() - 1 << "\n"
          << "  best utility: " << cell(search.value("best_score", json())) << "\n"
          << "  weights:";
  for (const auto& w : search.value("weights", json::array())) summary << ' ' << cell(w);
  summary << "\n";

  json metrics;
  try {
    metrics = json::parse(read_text_file(metrics_path));
  } catch (const json::exception& e) {
    throw FormatError(metrics_path.string() + ": " + e.what());
  }
  std::vector<std::string> header{"corpus"};
  for (const auto& o : objectives) header.push_back(o);
  for (const char* h : {"utility", "diversity2", "edit_rate", "prompts"}) header.emplace_back(h);
  CsvTable metric_table(header);
  summary << "\ninference\n";
  for (const auto& [name, m] : metrics.at("corpora").items()) {
    std::vector<std::string> row{name};
    summary << "  " << name << ":";
    for (const auto& o : objectives) {
      row.push_back(cell(m.at("scores").value(o, json())));
      summary << ' ' << o << '=' << row.back();
    }
    for (const char* k : {"utility", "diversity2", "edit_rate", "prompts"}) row.push_back(cell(m.value(k, json())));
    summary << " utility=" << row[objectives.size() + 1] << " diversity2=" << row[objectives.size() + 2]
            << " edit_rate=" << row[objectives.size() + 3] << "\n";
    metric_table.add_row(std::move(row));
  }
  write_text_file(dir / "metrics.csv", metric_table.str());
  out.files.push_back(dir / "metrics.csv");

  out.summary = summary.str();
  write_text_file(dir / "summary.txt", out.summary);
  out.files.push_back(dir / "summary.txt");
  return out;
}

}  // namespace emorl
