#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "emorl/rng.hpp"
#include "emorl/search.hpp"

namespace emorl {

struct GaussianProcess::Impl {
  GpHyperparameters hp;
  std::vector<Point> x;
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::VectorXd alpha;
  double y_mean = 0.0;
  double y_scale = 1.0;
  double best = 0.0;
  double jitter = 0.0;

  double kernel(const Point& a, const Point& b) const {
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
    return hp.signal_variance * std::exp(-sq / (2.0 * hp.length_scale * hp.length_scale));
  }
};

GaussianProcess::GaussianProcess(GpHyperparameters hp) : impl_(std::make_unique<Impl>()) {
  require(hp.length_scale > 0.0 && hp.signal_variance > 0.0 && hp.noise_variance >= 0.0,
          "GP hyperparameters must be positive");
  impl_->hp = hp;
}

GaussianProcess::~GaussianProcess() = default;
GaussianProcess::GaussianProcess(GaussianProcess&&) noexcept = default;
GaussianProcess& GaussianProcess::operator=(GaussianProcess&&) noexcept = default;

void GaussianProcess::fit(const std::vector<Point>& points, const std::vector<double>& values) {
  require(!points.empty(), "GP fit needs at least one observation");
  require(points.size() == values.size(), "GP fit: ", points.size(), " points for ", values.size(), " values");
  Impl& s = *impl_;
  const auto n = static_cast<Eigen::Index>(points.size());

  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  s.y_mean = mean;
  s.y_scale = var > 1e-24 ? std::sqrt(var) : 1.0;

  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = (values[static_cast<std::size_t>(i)] - s.y_mean) / s.y_scale;
  s.best = y.maxCoeff();

  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      k(i, j) = k(j, i) = s.kernel(points[static_cast<std::size_t>(i)], points[static_cast<std::size_t>(j)]);
    }
  }
  k.diagonal().array() += s.hp.noise_variance;

  for (double jitter : {0.0, 1e-10, 1e-8, 1e-6}) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    s.llt.compute(kj);
    if (s.llt.info() == Eigen::Success) {
      s.jitter = jitter;
      s.x = points;
      s.alpha = s.llt.solve(y);
      return;
    }
  }
  fail<NumericError>("GP covariance is not positive definite even with jitter 1e-6");
}

GaussianProcess::Prediction GaussianProcess::predict(const Point& x) const {
  const Impl& s = *impl_;
  require(!s.x.empty(), "GP predict before fit");
  const auto n = static_cast<Eigen::Index>(s.x.size());
  Eigen::VectorXd ks(n);
  for (Eigen::Index i = 0; i < n; ++i) ks(i) = s.kernel(s.x[static_cast<std::size_t>(i)], x);
  const double mean_std = ks.dot(s.alpha);
  const Eigen::VectorXd v = s.llt.matrixL().solve(ks);
  const double variance = std::max(0.0, s.hp.signal_variance - v.squaredNorm());
  return {s.y_mean + s.y_scale * mean_std, variance};
}

double GaussianProcess::jitter() const noexcept { return impl_->jitter; }
const GpHyperparameters& GaussianProcess::hyperparameters() const noexcept { return impl_->hp; }
double GaussianProcess::best_standardized() const noexcept { return impl_->best; }
double GaussianProcess::standardize(double value) const noexcept {
  return (value - impl_->y_mean) / impl_->y_scale;
}

double expected_improvement(double mean, double variance, double best, double xi) {
  const double sigma = std::sqrt(std::max(variance, 0.0));
  const double gain = mean - best - xi;
  if (sigma < 1e-12) return std::max(gain, 0.0);
  const double z = gain / sigma;
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * 3.141592653589793);
  return gain * cdf + sigma * pdf;
}

std::size_t default_initial_points(std::size_t dimension) { return 2 * dimension + 1; }

namespace {

Evaluation evaluate_at(const DetailedObjective& f, const Point& p) {
  Evaluation e;
  try {
    e = f(p);
  } catch (const std::exception& ex) {
    throw SearchError(std::string("objective failed during Bayesian search: ") + ex.what(), p);
  }
  if (!std::isfinite(e.utility)) throw SearchError("objective returned a non-finite utility", p);
  return e;
}

Point random_point(Rng& rng, std::size_t d) {
  Point p(d);
  for (double& v : p) v = rng.uniform();
  return p;
}

double acquisition(const GaussianProcess& gp, const Point& p, double xi) {
  const auto pred = gp.predict(p);
  return expected_improvement(gp.standardize(pred.mean), pred.variance, gp.best_standardized(), xi);
}

// Compass search from `start`, keeping the point inside the unit box.
Point refine(const GaussianProcess& gp, Point start, double& value, double xi) {
  double step = 0.05;
  for (int iter = 0; iter < 40 && step > 1e-4; ++iter) {
    bool moved = false;
    for (std::size_t axis = 0; axis < start.size() && !moved; ++axis) {
      for (double dir : {1.0, -1.0}) {
        Point trial = start;
        trial[axis] = std::clamp(trial[axis] + dir * step, 0.0, 1.0);
        const double v = acquisition(gp, trial, xi);
        if (v > value) {
          start = std::move(trial);
          value = v;
          moved = true;
          break;
        }
      }
    }
    if (!moved) step /= 2.0;
  }
  return start;
}

}  // namespace

SearchResult bayesian_search(const DetailedObjective& objective, std::size_t dimension, std::size_t budget,
                             std::uint64_t seed, const BayesOptions& options) {
  require(static_cast<bool>(objective), "bayesian_search: empty objective");
  require(dimension >= 1, "bayesian_search: dimension must be at least 1");
  const std::size_t n0 = options.initial_points ? options.initial_points : default_initial_points(dimension);
  require(budget >= n0, "bayesian_search: budget ", budget, " is below the initial design size ", n0);
  require(options.candidates >= 1 && options.restarts >= 1, "bayesian_search: needs candidates and restarts");

  Rng rng(seed);
  SearchResult result;
  std::vector<Point> xs;
  std::vector<double> ys;
  auto observe = [&](Point p, std::size_t iteration) {
    Evaluation e = evaluate_at(objective, p);
    ++result.evaluations;
    if (e.utility > result.best_score) {
      result.best_score = e.utility;
      result.best_point = p;
    }
    xs.push_back(p);
    ys.push_back(e.utility);
    result.trace.push_back(TraceRecord{iteration, std::move(p), e.utility, std::move(e.scores), false});
  };

  for (std::size_t i = 0; i < n0; ++i) observe(random_point(rng, dimension), 0);

  GaussianProcess gp(options.gp);
  for (std::size_t round = 1; result.evaluations < budget; ++round) {
    gp.fit(xs, ys);
    std::vector<std::pair<double, Point>> pool;
    pool.reserve(options.candidates);
    for (std::size_t c = 0; c < options.candidates; ++c) {
      Point p = random_point(rng, dimension);
      const double v = acquisition(gp, p, options.xi);
      pool.emplace_back(v, std::move(p));
    }
    const std::size_t keep = std::min(options.restarts, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    Point best = pool.front().second;
    double best_value = pool.front().first;
    for (std::size_t r = 0; r < keep; ++r) {
      double v = pool[r].first;
      Point p = refine(gp, pool[r].second, v, options.xi);
      if (v > best_value) {
        best_value = v;
        best = std::move(p);
      }
    }
    // A repeat observation adds no information; sample elsewhere instead.
    const bool repeat = std::any_of(xs.begin(), xs.end(), [&](const Point& x) {
      double sq = 0.0;
      for (std::size_t i = 0; i < dimension; ++i) sq += (x[i] - best[i]) * (x[i] - best[i]);
      return sq < 1e-16;
    });
    if (repeat) best = random_point(rng, dimension);
    observe(std::move(best), round);
  }
  return result;
}

SearchResult bayesian_search(const Objective& objective, std::size_t dimension, std::size_t budget,
                             std::uint64_t seed, const BayesOptions& options) {
  return bayesian_search(detailed(objective), dimension, budget, seed, options);
}

}  // namespace emorl
