#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "emorl/error.hpp"

namespace emorl {

using Point = std::vector<double>;

struct Interval {
  double lo = 0.0;
  double hi = 1.0;

  double width() const noexcept { return hi - lo; }
  double mid() const noexcept { return (lo + hi) / 2.0; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

/// Axis-aligned box, one interval per weight.
using Bounds = std::vector<Interval>;

Bounds unit_bounds(std::size_t dimension);

/// Utility at a point, optionally with the per-objective scores behind it.
struct Evaluation {
  double utility = 0.0;
  std::vector<double> scores;
};

using Objective = std::function<double(const Point&)>;
using DetailedObjective = std::function<Evaluation(const Point&)>;

DetailedObjective detailed(Objective objective);

/// One algorithmic objective request, in request order.
struct TraceRecord {
  std::size_t iteration = 0;
  Point point;
  double utility = 0.0;
  std::vector<double> scores;
  bool cached = false;
};

struct SearchResult {
  Point best_point;
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<TraceRecord> trace;
  std::size_t evaluations = 0;
  /// Bounds before each iteration followed by the final bounds (hierarchical only).
  std::vector<Bounds> bounds_history;
};

/// Raised when the objective throws; carries the point being evaluated.
class SearchError : public Error {
 public:
  SearchError(const std::string& what, Point point) : Error(what, "search"), point_(std::move(point)) {}
  const Point& point() const noexcept { return point_; }

 private:
  Point point_;
};

struct SearchSpec {
  std::size_t dimension = 3;
  std::size_t iterations = 5;
  Bounds initial;  // empty means [0, 1]^dimension
  DetailedObjective objective;
  /// Serve recurring grid points from memory. Every request is still counted
  /// and traced.
  bool cache = true;

  void validate() const;
};

/// 3^d points: {lo, mid, hi} per axis, first axis most significant.
std::vector<Point> generate_grid(const Bounds& bounds);

/// Sub-cube selector: 0 picks [lo, mid], 1 picks [mid, hi] on each axis.
using CellIndex = std::vector<int>;

/// The one of 2^d sub-cubes whose corner scores have the largest sum. Ties go
/// to the lexicographically smallest index. Every corner must be in `results`.
CellIndex find_best_region(const std::map<Point, double>& results, const Bounds& bounds);

/// Bounds of the chosen sub-cube; every axis halves.
Bounds compute_bounds(const CellIndex& cell, const Bounds& bounds);

/// Iterated 3-point grid refinement. Performs exactly 3^d * iterations
/// objective requests.
SearchResult hierarchical_search(const SearchSpec& spec);

inline constexpr std::uint64_t kMaxGridEvaluations = 10'000'000;

/// Full lattice with 1/step points per axis, {0, step, ..., 1 - step}, so
/// that the count is (1/step)^d. Lexicographically first argmax wins.
SearchResult exhaustive_grid(const DetailedObjective& objective, std::size_t dimension, double step);
SearchResult exhaustive_grid(const Objective& objective, std::size_t dimension, double step);

/// Index of the width-`step` cell holding x, with x = 1 folded into the last cell.
std::size_t lattice_cell(double x, double step);

struct ComplexityCounts {
  std::uint64_t hierarchical = 0;
  std::uint64_t grid = 0;
  friend bool operator==(const ComplexityCounts&, const ComplexityCounts&) = default;
};

/// (3^d * log2(1/step), (1/step)^d); 1/step must be a power of two >= 2.
ComplexityCounts complexity_counts(std::size_t dimension, double step);

// -- Bayesian optimisation baseline -------------------------------------------

struct GpHyperparameters {
  double length_scale = 0.2;
  double signal_variance = 1.0;
  double noise_variance = 1e-4;
};

/// Exact GP regression with a squared-exponential kernel and fixed
/// hyperparameters. Targets are standardised internally.
class GaussianProcess {
 public:
  explicit GaussianProcess(GpHyperparameters hp = {});
  ~GaussianProcess();
  GaussianProcess(GaussianProcess&&) noexcept;
  GaussianProcess& operator=(GaussianProcess&&) noexcept;

  /// Refits on all observations. Escalates diagonal jitter up to 1e-6 before
  /// giving up with NumericError.
  void fit(const std::vector<Point>& points, const std::vector<double>& values);

  struct Prediction {
    double mean = 0.0;      // in objective units
    double variance = 0.0;  // in standardised units
  };
  Prediction predict(const Point& x) const;

  /// Jitter that made the covariance factorisable on the last fit.
  double jitter() const noexcept;
  const GpHyperparameters& hyperparameters() const noexcept;
  /// Standardised incumbent (max of observed targets).
  double best_standardized() const noexcept;
  double standardize(double value) const noexcept;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// EI for maximisation in standardised units.
double expected_improvement(double mean, double variance, double best, double xi);

struct BayesOptions {
  std::size_t initial_points = 0;  // 0 means 2d + 1
  GpHyperparameters gp;
  std::size_t candidates = 200;
  std::size_t restarts = 5;
  double xi = 0.01;
};

/// GP/EI sequential optimiser. Reproducible per seed.
SearchResult bayesian_search(const DetailedObjective& objective, std::size_t dimension, std::size_t budget,
                             std::uint64_t seed, const BayesOptions& options = {});
SearchResult bayesian_search(const Objective& objective, std::size_t dimension, std::size_t budget,
                             std::uint64_t seed, const BayesOptions& options = {});

std::size_t default_initial_points(std::size_t dimension);

}  // namespace emorl
