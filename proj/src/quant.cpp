#include "cdl/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cdl::quant {

namespace {
// exp(x) == 0 in double for x below this; skipping the call is exact.
constexpr double kExpUnderflow = -745.2;
}  // namespace

int QuantGrid::nearest_index(double theta) const {
  const double r = theta / step;
  if (r <= static_cast<double>(min_index())) return min_index();
  if (r >= static_cast<double>(max_index())) return max_index();
  return static_cast<int>(std::llround(r));
}

std::vector<double> QuantGrid::levels() const {
  std::vector<double> out(static_cast<std::size_t>(size()));
  for (int i = 0; i < size(); ++i) out[static_cast<std::size_t>(i)] = level(min_index() + i);
  return out;
}

void QuantGrid::validate() const {
  if (bits < 1 || bits > 12) throw std::domain_error("QuantGrid: bits out of range [1,12]");
  if (!std::isfinite(step) || step <= 0.0) throw std::domain_error("QuantGrid: step must be positive");
}

std::vector<double> Cpmf::dense() const {
  std::vector<double> out(static_cast<std::size_t>(grid.size()), 0.0);
  for (int j = 0; j < support_size(); ++j)
    out[static_cast<std::size_t>(support_first - grid.min_index() + j)] =
        probs[static_cast<std::size_t>(j)];
  return out;
}

int topk_support_first(double theta, const QuantGrid& grid, int k) {
  k = std::min(k, grid.size());
  int lo = grid.nearest_index(theta);
  int hi = lo;
  // Grow the window one level at a time toward the closer side; on a uniform
  // grid this yields the k smallest distances, which is also the k largest
  // masses for any sharpness.
  while (hi - lo + 1 < k) {
    const bool can_left = lo > grid.min_index();
    const bool can_right = hi < grid.max_index();
    if (!can_left) {
      ++hi;
    } else if (!can_right) {
      --lo;
    } else {
      const double dl = std::abs(theta - grid.level(lo - 1));
      const double dr = std::abs(theta - grid.level(hi + 1));
      if (dl <= dr) --lo; else ++hi;
    }
  }
  return lo;
}

void softmax_window(double theta, const QuantGrid& grid, double sharpness, int first,
                    int count, double* probs) {
  // max exponent = -sharpness * min distance^2, attained at the window level
  // nearest theta (clamped into the window).
  const int near = std::clamp(grid.nearest_index(theta), first, first + count - 1);
  const double dn = theta - grid.level(near);
  const double emax = -sharpness * dn * dn;
  double z = 0.0;
  for (int j = 0; j < count; ++j) {
    const double d = theta - grid.level(first + j);
    const double e = -sharpness * d * d - emax;
    const double w = (e < kExpUnderflow) ? 0.0 : std::exp(e);
    probs[j] = w;
    z += w;
  }
  const double inv = 1.0 / z;
  for (int j = 0; j < count; ++j) probs[j] *= inv;
}

QuantMoments window_moments(const double* probs, int first, int count,
                            const QuantGrid& grid) {
  double m1 = 0.0, m2 = 0.0, m3 = 0.0;
  for (int j = 0; j < count; ++j) {
    const double p = probs[j];
    if (p == 0.0) continue;
    const double x = grid.level(first + j);
    const double px = p * x;
    m1 += px;
    m2 += px * x;
    m3 += px * x * x;
  }
  QuantMoments m;
  m.mean = m1;
  double var = m2 - m1 * m1;
  if (var < 0.0) {
    // Cancellation noise scales with m2; anything more negative than that is
    // a genuine inconsistency, not rounding.
    const double tol = std::max(1e-15, 64.0 * std::numeric_limits<double>::epsilon() * m2);
    if (var < -tol) throw std::logic_error("window_moments: negative variance beyond rounding noise");
    var = 0.0;
  }
  m.var = var;
  m.skew_u = m3 - m1 * m2;
  return m;
}

double window_dqd_dtheta(double sharpness, const QuantMoments& m) {
  return 2.0 * sharpness * m.var;
}

double window_dqd_dstep(double theta, double sharpness, const QuantMoments& m,
                        const QuantGrid& grid) {
  if (grid.step <= 0.0) throw std::domain_error("dqd_dq: step must be positive");
  return (m.mean + 2.0 * sharpness * theta * m.var - 2.0 * sharpness * m.skew_u) / grid.step;
}

double window_dqd_dsharpness(double theta, const double* probs, int first, int count,
                             const QuantGrid& grid) {
  // -Cov(X, D^2) with D = theta - X: sharpening pulls the expectation toward
  // the levels closest to theta.
  double ex = 0.0, ed2 = 0.0, exd2 = 0.0;
  for (int j = 0; j < count; ++j) {
    const double p = probs[j];
    if (p == 0.0) continue;
    const double x = grid.level(first + j);
    const double d = theta - x;
    const double d2 = d * d;
    ex += p * x;
    ed2 += p * d2;
    exd2 += p * x * d2;
  }
  return -(exd2 - ex * ed2);
}

int sample_window_index(const double* probs, int first, int count, Rng& rng) {
  const double u = rng.uniform01();
  double acc = 0.0;
  for (int j = 0; j < count; ++j) {
    acc += probs[j];
    if (u < acc) return first + j;
  }
  // u fell into the rounding gap past the accumulated total: last nonzero level.
  for (int j = count - 1; j >= 0; --j)
    if (probs[j] > 0.0) return first + j;
  return first;
}

Cpmf make_cpmf(double theta, const QuantGrid& grid, double sharpness) {
  grid.validate();
  if (!std::isfinite(theta)) throw std::invalid_argument("make_cpmf: theta must be finite");
  if (!std::isfinite(sharpness) || sharpness <= 0.0)
    throw std::domain_error("make_cpmf: sharpness must be positive");
  Cpmf c;
  c.grid = grid;
  c.input = theta;
  c.sharpness = sharpness;
  c.support_first = grid.min_index();
  c.probs.resize(static_cast<std::size_t>(grid.size()));
  softmax_window(theta, grid, sharpness, c.support_first, grid.size(), c.probs.data());
  return c;
}

int sample_qp_index(const Cpmf& cpmf, Rng& rng) {
  return sample_window_index(cpmf.probs.data(), cpmf.support_first, cpmf.support_size(), rng);
}

double sample_qp(const Cpmf& cpmf, Rng& rng) {
  return cpmf.grid.level(sample_qp_index(cpmf, rng));
}

double qd(const Cpmf& cpmf) {
  return window_moments(cpmf.probs.data(), cpmf.support_first, cpmf.support_size(), cpmf.grid)
      .mean;
}

QuantMoments moments(const Cpmf& cpmf) {
  return window_moments(cpmf.probs.data(), cpmf.support_first, cpmf.support_size(), cpmf.grid);
}

double dqd_dtheta(const Cpmf& cpmf) {
  return window_dqd_dtheta(cpmf.sharpness, moments(cpmf));
}

double dqd_dq(const Cpmf& cpmf) {
  return window_dqd_dstep(cpmf.input, cpmf.sharpness, moments(cpmf), cpmf.grid);
}

double dqd_dsharpness(const Cpmf& cpmf) {
  return window_dqd_dsharpness(cpmf.input, cpmf.probs.data(), cpmf.support_first,
                               cpmf.support_size(), cpmf.grid);
}

Cpmf truncate_topk(const Cpmf& cpmf, int k) {
  if (k < 1 || k > cpmf.grid.size()) throw std::invalid_argument("truncate_topk: k out of range");
  if (k >= cpmf.support_size()) return cpmf;

  // The k largest masses of a distance-softmax form a contiguous window, but
  // select honestly by probability so the operation is correct for any Cpmf.
  // Ties (typically underflowed zeros) go to the level nearest the input,
  // which keeps the nearest-argmax invariant and matches the window kernels.
  std::vector<int> order(static_cast<std::size_t>(cpmf.support_size()));
  for (int j = 0; j < cpmf.support_size(); ++j) order[static_cast<std::size_t>(j)] = j;
  std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), [&](int a, int b) {
    if (cpmf.probs[static_cast<std::size_t>(a)] != cpmf.probs[static_cast<std::size_t>(b)])
      return cpmf.probs[static_cast<std::size_t>(a)] > cpmf.probs[static_cast<std::size_t>(b)];
    const double da = std::abs(cpmf.input - cpmf.grid.level(cpmf.support_first + a));
    const double db = std::abs(cpmf.input - cpmf.grid.level(cpmf.support_first + b));
    if (da != db) return da < db;
    return a < b;
  });

  int jlo = cpmf.support_size(), jhi = -1;
  for (int r = 0; r < k; ++r) {
    jlo = std::min(jlo, order[static_cast<std::size_t>(r)]);
    jhi = std::max(jhi, order[static_cast<std::size_t>(r)]);
  }

  Cpmf out;
  out.grid = cpmf.grid;
  out.input = cpmf.input;
  out.sharpness = cpmf.sharpness;
  out.support_first = cpmf.support_first + jlo;
  out.probs.assign(cpmf.probs.begin() + jlo, cpmf.probs.begin() + jhi + 1);
  // Zero anything in the window that did not make the top k (possible only
  // when the kept set is non-contiguous, which a softmax Cpmf never produces).
  if (jhi - jlo + 1 > k) {
    std::vector<bool> keep(static_cast<std::size_t>(jhi - jlo + 1), false);
    for (int r = 0; r < k; ++r)
      keep[static_cast<std::size_t>(order[static_cast<std::size_t>(r)] - jlo)] = true;
    for (std::size_t j = 0; j < out.probs.size(); ++j)
      if (!keep[j]) out.probs[j] = 0.0;
  }
  double z = 0.0;
  for (double p : out.probs) z += p;
  const double inv = 1.0 / z;
  for (double& p : out.probs) p *= inv;
  return out;
}

}  // namespace cdl::quant
