#include <algorithm>
#include <cmath>
#include <map>

#include "emorl/search.hpp"

namespace emorl {

Bounds unit_bounds(std::size_t dimension) { return Bounds(dimension, Interval{0.0, 1.0}); }

DetailedObjective detailed(Objective objective) {
  require(static_cast<bool>(objective), "empty objective");
  return [f = std::move(objective)](const Point& p) { return Evaluation{f(p), {}}; };
}

namespace {

void validate_bounds(const Bounds& bounds) {
  require(!bounds.empty(), "bounds need at least one axis");
  for (std::size_t i = 0; i < bounds.size(); ++i) {
    const Interval& b = bounds[i];
    require(std::isfinite(b.lo) && std::isfinite(b.hi), "axis ", i, " has non-finite bounds");
    require(b.lo <= b.hi, "axis ", i, ": lo ", b.lo, " > hi ", b.hi);
  }
}

std::uint64_t checked_pow(std::uint64_t base, std::size_t exp) {
  std::uint64_t out = 1;
  for (std::size_t i = 0; i < exp; ++i) {
    require(out <= UINT64_MAX / base, "count ", base, "^", exp, " overflows");
    out *= base;
  }
  return out;
}

// Integer n with n * step == 1, or 0 if there is none.
std::uint64_t inverse_step(double step) {
  if (!(step > 0.0 && step <= 1.0)) return 0;
  const double inv = 1.0 / step;
  const double rounded = std::round(inv);
  if (std::abs(inv - rounded) > 1e-9 * rounded) return 0;
  return static_cast<std::uint64_t>(rounded);
}

Evaluation evaluate(const DetailedObjective& f, const Point& p) {
  Evaluation e;
  try {
    e = f(p);
  } catch (const std::exception& ex) {
    std::string where = "(";
    for (std::size_t i = 0; i < p.size(); ++i) where += (i ? ", " : "") + std::to_string(p[i]);
    throw SearchError("objective failed at " + where + "): " + ex.what(), p);
  }
  if (!std::isfinite(e.utility)) throw SearchError("objective returned a non-finite utility", p);
  return e;
}

}  // namespace

std::vector<Point> generate_grid(const Bounds& bounds) {
  validate_bounds(bounds);
  const std::size_t d = bounds.size();
  const std::size_t total = static_cast<std::size_t>(checked_pow(3, d));
  std::vector<Point> out;
  out.reserve(total);
  for (std::size_t k = 0; k < total; ++k) {
    Point p(d);
    std::size_t rest = k;
    for (std::size_t axis = d; axis-- > 0;) {
      const Interval& b = bounds[axis];
      const std::size_t digit = rest % 3;
      rest /= 3;
      p[axis] = digit == 0 ? b.lo : digit == 1 ? b.mid() : b.hi;
    }
    out.push_back(std::move(p));
  }
  return out;
}

CellIndex find_best_region(const std::map<Point, double>& results, const Bounds& bounds) {
  validate_bounds(bounds);
  const std::size_t d = bounds.size();
  const std::size_t cells = static_cast<std::size_t>(checked_pow(2, d));
  CellIndex best;
  double best_sum = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cells; ++c) {
    CellIndex cell(d);
    for (std::size_t axis = 0; axis < d; ++axis) cell[axis] = static_cast<int>((c >> (d - 1 - axis)) & 1U);
    double sum = 0.0;
    for (std::size_t corner = 0; corner < cells; ++corner) {
      Point p(d);
      for (std::size_t axis = 0; axis < d; ++axis) {
        const bool upper = ((corner >> (d - 1 - axis)) & 1U) != 0;
        const Interval& b = bounds[axis];
        p[axis] = cell[axis] == 0 ? (upper ? b.mid() : b.lo) : (upper ? b.hi : b.mid());
      }
      auto it = results.find(p);
      require(it != results.end(), "find_best_region: grid point missing from results");
      sum += it->second;
    }
    if (best.empty() || sum > best_sum) {
      best_sum = sum;
      best = std::move(cell);
    }
  }
  return best;
}

Bounds compute_bounds(const CellIndex& cell, const Bounds& bounds) {
  validate_bounds(bounds);
  require(cell.size() == bounds.size(), "cell index has ", cell.size(), " axes, bounds have ", bounds.size());
  Bounds out(bounds.size());
  for (std::size_t axis = 0; axis < bounds.size(); ++axis) {
    require(cell[axis] == 0 || cell[axis] == 1, "cell index entries must be 0 or 1");
    const Interval& b = bounds[axis];
    out[axis] = cell[axis] == 0 ? Interval{b.lo, b.mid()} : Interval{b.mid(), b.hi};
  }
  return out;
}

void SearchSpec::validate() const {
  require(dimension >= 1, "search dimension must be at least 1");
  require(iterations >= 1, "search needs at least one iteration");
  require(static_cast<bool>(objective), "search spec has no objective");
  if (!initial.empty()) {
    require(initial.size() == dimension, "initial bounds have ", initial.size(), " axes for dimension ", dimension);
    validate_bounds(initial);
    for (const Interval& b : initial) require(b.lo >= 0.0 && b.hi <= 1.0, "initial bounds must lie within [0, 1]");
  }
}

SearchResult hierarchical_search(const SearchSpec& spec) {
  spec.validate();
  Bounds bounds = spec.initial.empty() ? unit_bounds(spec.dimension) : spec.initial;
  SearchResult result;
  std::map<Point, Evaluation> cache;
  for (std::size_t iter = 1; iter <= spec.iterations; ++iter) {
    result.bounds_history.push_back(bounds);
    std::map<Point, double> scores;
    for (const Point& p : generate_grid(bounds)) {
      TraceRecord rec{iter, p, 0.0, {}, false};
      auto hit = spec.cache ? cache.find(p) : cache.end();
      Evaluation e;
      if (hit != cache.end()) {
        e = hit->second;
        rec.cached = true;
      } else {
        e = evaluate(spec.objective, p);
        if (spec.cache) cache.emplace(p, e);
      }
      rec.utility = e.utility;
      rec.scores = e.scores;
      ++result.evaluations;
      scores[p] = e.utility;
      if (e.utility > result.best_score) {
        result.best_score = e.utility;
        result.best_point = p;
      }
      result.trace.push_back(std::move(rec));
    }
    bounds = compute_bounds(find_best_region(scores, bounds), bounds);
  }
  result.bounds_history.push_back(bounds);
  return result;
}

std::size_t lattice_cell(double x, double step) {
  const std::uint64_t n = inverse_step(step);
  require(n >= 1, "step ", step, " does not divide 1");
  require(x >= 0.0 && x <= 1.0, "lattice_cell: ", x, " outside [0, 1]");
  const auto k = static_cast<std::uint64_t>(std::floor(x * static_cast<double>(n)));
  return static_cast<std::size_t>(std::min(k, n - 1));
}

SearchResult exhaustive_grid(const DetailedObjective& objective, std::size_t dimension, double step) {
  require(static_cast<bool>(objective), "exhaustive_grid: empty objective");
  require(dimension >= 1, "exhaustive_grid: dimension must be at least 1");
  const std::uint64_t n = inverse_step(step);
  require(n >= 1, "exhaustive_grid: 1/step must be an integer, got step ", step);
  double total_d = 1.0;
  for (std::size_t i = 0; i < dimension; ++i) total_d *= static_cast<double>(n);
  require(total_d <= static_cast<double>(kMaxGridEvaluations), "exhaustive_grid: ", total_d,
          " evaluations exceed the limit of ", kMaxGridEvaluations);
  const std::uint64_t total = checked_pow(n, dimension);

  SearchResult result;
  result.trace.reserve(total);
  std::vector<std::uint64_t> idx(dimension, 0);
  for (std::uint64_t k = 0; k < total; ++k) {
    Point p(dimension);
    for (std::size_t a = 0; a < dimension; ++a) p[a] = static_cast<double>(idx[a]) / static_cast<double>(n);
    Evaluation e = evaluate(objective, p);
    ++result.evaluations;
    if (e.utility > result.best_score) {
      result.best_score = e.utility;
      result.best_point = p;
    }
    result.trace.push_back(TraceRecord{1, std::move(p), e.utility, std::move(e.scores), false});
    for (std::size_t a = dimension; a-- > 0;) {
      if (++idx[a] < n) break;
      idx[a] = 0;
    }
  }
  return result;
}

SearchResult exhaustive_grid(const Objective& objective, std::size_t dimension, double step) {
  return exhaustive_grid(detailed(objective), dimension, step);
}

ComplexityCounts complexity_counts(std::size_t dimension, double step) {
  require(dimension >= 1, "complexity_counts: dimension must be at least 1");
  const std::uint64_t n = inverse_step(step);
  require(n >= 2 && (n & (n - 1)) == 0, "complexity_counts: 1/step must be a power of two >= 2, got step ", step);
  std::uint64_t log2n = 0;
  while ((std::uint64_t{1} << log2n) < n) ++log2n;
  return ComplexityCounts{checked_pow(3, dimension) * log2n, checked_pow(n, dimension)};
}

}  // namespace emorl
