#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace emorl {

struct ReportOutput {
  std::string summary;
  std::vector<std::filesystem::path> files;
};

/// Reads a run directory and writes plot-ready tables under <run>/report:
///   curves.csv   objective, step, data_points, mean_reward, moving_average, kl
///   trace.csv    the weight-search trace (iteration, utility, weights, scores)
///   metrics.csv  one row per scored corpus
///   summary.txt  the returned text
/// Throws IoError naming every expected artifact that is missing.
ReportOutput write_report(const std::filesystem::path& run_dir);

}  // namespace emorl
