#include <doctest.h>

#include <cmath>

#include "cdl/quant.hpp"
#include "cdl/rng.hpp"
#include "oracles.hpp"

using namespace cdl;
using quant::Cpmf;
using quant::QuantGrid;
using quant::Signedness;

namespace {
QuantGrid grid(int bits, double step, Signedness s = Signedness::kSigned) {
  return {bits, step, s};
}
}  // namespace

TEST_SUITE("quant.grid") {
  TEST_CASE("levels are 2^b, uniform, increasing; signed contains 0; unsigned starts at 0") {
    for (int b = 1; b <= 6; ++b) {
      for (auto s : {Signedness::kSigned, Signedness::kUnsigned}) {
        const QuantGrid g = grid(b, 0.37, s);
        const auto lv = g.levels();
        REQUIRE(static_cast<int>(lv.size()) == (1 << b));
        bool has_zero = false;
        for (std::size_t i = 1; i < lv.size(); ++i) {
          CHECK(lv[i] > lv[i - 1]);
          CHECK(lv[i] - lv[i - 1] == doctest::Approx(0.37).epsilon(1e-12));
        }
        for (double v : lv) has_zero = has_zero || v == 0.0;
        CHECK(has_zero);
        if (s == Signedness::kUnsigned) CHECK(lv.front() == 0.0);
      }
    }
  }

  TEST_CASE("validate rejects bad grids") {
    CHECK_THROWS_AS(grid(0, 1.0).validate(), std::domain_error);
    CHECK_THROWS_AS(grid(4, 0.0).validate(), std::domain_error);
    CHECK_THROWS_AS(grid(4, -1.0).validate(), std::domain_error);
  }

  TEST_CASE("nearest_index clamps to the grid") {
    const QuantGrid g = grid(3, 0.1);
    CHECK(g.nearest_index(-100.0) == g.min_index());
    CHECK(g.nearest_index(100.0) == g.max_index());
    CHECK(g.nearest_index(0.16) == 2);
  }
}

TEST_SUITE("quant.make_cpmf") {
  TEST_CASE("frozen vector: b=2, q=1, theta=0.3, alpha=1") {
    const Cpmf c = quant::make_cpmf(0.3, grid(2, 1.0), 1.0);
    // softmax of {-5.29, -1.69, -0.09, -0.49} over levels {-2,-1,0,1}
    const double expect[4] = {0.0029378852282972680, 0.10752141235384184,
                              0.53255704170533611, 0.35698366071252478};
    for (int i = 0; i < 4; ++i)
      CHECK(c.probs[static_cast<std::size_t>(i)] == doctest::Approx(expect[i]).epsilon(1e-14));
  }

  TEST_CASE("huge sharpness concentrates all mass on the input level") {
    const QuantGrid g = grid(4, 0.25);
    const Cpmf c = quant::make_cpmf(g.level(3), g, 1e6);
    CHECK(c.prob_at(3) == doctest::Approx(1.0).epsilon(1e-12));
    for (int i = g.min_index(); i <= g.max_index(); ++i)
      if (i != 3) CHECK(c.prob_at(i) <= 1e-10);
  }

  TEST_CASE("exact midpoint splits the two nearest masses equally") {
    const QuantGrid g = grid(3, 0.1);
    const Cpmf c = quant::make_cpmf(0.05, g, 37.0);
    CHECK(c.prob_at(0) == doctest::Approx(c.prob_at(1)).epsilon(1e-14));
  }

  TEST_CASE("input and domain errors") {
    CHECK_THROWS_AS(quant::make_cpmf(std::nan(""), grid(3, 0.1), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(quant::make_cpmf(0.1, grid(3, 0.1), 0.0), std::domain_error);
    CHECK_THROWS_AS(quant::make_cpmf(0.1, grid(3, 0.1), -2.0), std::domain_error);
  }

  TEST_CASE("invariants on random instances: normalization, nearest argmax, distance monotonicity") {
    Rng rng(123);
    for (int it = 0; it < 500; ++it) {
      const QuantGrid g = {rng.uniform_int(2, 6), rng.log_uniform(1e-3, 1.0),
                           it % 2 ? Signedness::kSigned : Signedness::kUnsigned};
      const double a = rng.log_uniform(1.0, 1e4);
      const double theta = rng.uniform(g.min_level(), g.max_level());
      const Cpmf c = quant::make_cpmf(theta, g, a);
      double sum = 0.0;
      for (double p : c.probs) sum += p;
      CHECK(std::abs(sum - 1.0) < 1e-12);
      int best = c.support_first;
      for (int i = g.min_index(); i <= g.max_index(); ++i)
        if (c.prob_at(i) > c.prob_at(best)) best = i;
      const double d_best = std::abs(theta - g.level(best));
      const double d_near = std::abs(theta - g.level(g.nearest_index(theta)));
      CHECK(d_best == doctest::Approx(d_near).epsilon(1e-12));
      // larger squared distance never gets more mass
      for (int i = g.min_index(); i < g.max_index(); ++i) {
        for (int j = i + 1; j <= g.max_index(); ++j) {
          const double di = std::abs(theta - g.level(i)), dj = std::abs(theta - g.level(j));
          if (di < dj) CHECK(c.prob_at(i) >= c.prob_at(j) - 1e-15);
          if (dj < di) CHECK(c.prob_at(j) >= c.prob_at(i) - 1e-15);
        }
      }
    }
  }
}

TEST_SUITE("quant.sample") {
  TEST_CASE("one-hot cpmf always draws that level") {
    const QuantGrid g = grid(3, 0.5);
    const Cpmf c = quant::make_cpmf(g.level(-2), g, 1e9);
    Rng rng(7);
    for (int i = 0; i < 100; ++i) CHECK(quant::sample_qp(c, rng) == g.level(-2));
  }

  TEST_CASE("half-half cpmf frequencies within 3 standard errors over 1e6 draws") {
    Cpmf c;
    c.grid = grid(2, 1.0);
    c.input = -1.5;
    c.sharpness = 1.0;
    c.support_first = c.grid.min_index();
    c.probs = {0.5, 0.5, 0.0, 0.0};
    Rng rng(99);
    const int n = 1000000;
    int lo = 0;
    for (int i = 0; i < n; ++i)
      if (quant::sample_qp_index(c, rng) == -2) ++lo;
    const double freq = static_cast<double>(lo) / n;
    const double se = std::sqrt(0.25 / n);
    CHECK(std::abs(freq - 0.5) < 3.0 * se);
  }

  TEST_CASE("large sharpness draws the nearest level with prob > 0.99") {
    // alpha=700, b=3, q=0.1; theta 0.04 from the midpoint where the exact
    // nearest-level mass is 0.99609 (the bound degrades toward midpoints).
    const QuantGrid g = grid(3, 0.1);
    const Cpmf c = quant::make_cpmf(0.09, g, 700.0);
    CHECK(c.prob_at(1) > 0.995);  // exact mass backing the threshold
    Rng rng(4242);
    int hit = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
      if (quant::sample_qp_index(c, rng) == 1) ++hit;
    CHECK(static_cast<double>(hit) / n > 0.99);
  }

  TEST_CASE("identical seeds give identical draw sequences") {
    const Cpmf c = quant::make_cpmf(0.123, grid(4, 0.07), 55.0);
    Rng a(31415), b(31415);
    for (int i = 0; i < 1000; ++i) CHECK(quant::sample_qp_index(c, a) == quant::sample_qp_index(c, b));
  }
}

TEST_SUITE("quant.qd_and_moments") {
  TEST_CASE("one-hot: qd = level, var = 0, skew_u = 0") {
    const QuantGrid g = grid(3, 0.2);
    const Cpmf c = quant::make_cpmf(g.level(2), g, 1e8);
    CHECK(quant::qd(c) == doctest::Approx(g.level(2)).epsilon(1e-12));
    const quant::QuantMoments m = quant::moments(c);
    CHECK(m.var == doctest::Approx(0.0));
    CHECK(m.skew_u == doctest::Approx(0.0));
  }

  TEST_CASE("two-point half-half: Bernoulli moments") {
    Cpmf c;
    c.grid = grid(2, 1.0);
    c.input = -1.5;
    c.sharpness = 1.0;
    c.support_first = -2;
    c.probs = {0.5, 0.5};
    const quant::QuantMoments m = quant::moments(c);
    CHECK(m.mean == doctest::Approx(-1.5).epsilon(1e-15));
    CHECK(m.var == doctest::Approx(0.25).epsilon(1e-12));
  }

  TEST_CASE("frozen b=2 vector matches brute-force moments") {
    const Cpmf c = quant::make_cpmf(0.3, grid(2, 1.0), 1.0);
    const quant::QuantMoments m = quant::moments(c);
    CHECK(m.mean == doctest::Approx(0.2435864779020884).epsilon(1e-13));
    CHECK(m.var == doctest::Approx(0.41692224176281109).epsilon(1e-13));
    CHECK(m.skew_u == doctest::Approx(0.10994949535545030).epsilon(1e-13));
    // cross-check against the extended-precision oracle
    const oracle::Pmf p = oracle::cpmf(0.3, c.grid, 1.0);
    CHECK(m.mean == doctest::Approx(static_cast<double>(oracle::mean(p))).epsilon(1e-14));
    CHECK(m.var == doctest::Approx(static_cast<double>(oracle::variance(p))).epsilon(1e-12));
  }

  TEST_CASE("center-of-grid midpoint is an exact fixed point of qd") {
    // the midpoint of the two central levels is the symmetry center of the
    // whole signed grid, so tails cancel exactly at any sharpness
    for (double a : {3.0, 40.0, 300.0}) {
      const Cpmf c = quant::make_cpmf(-0.1, grid(3, 0.2), a);
      CHECK(quant::qd(c) == doctest::Approx(-0.1).epsilon(1e-13));
    }
  }

  TEST_CASE("qd converges to the hard uniform quantizer as sharpness grows") {
    const QuantGrid g = grid(3, 0.1);
    // pointwise deviation shrinks across alpha = 100..700 away from midpoints
    for (double theta : {-0.331, -0.18, 0.042, 0.213, 0.27}) {
      double prev = 1e9;
      for (double a : {100.0, 300.0, 500.0, 700.0}) {
        const double dev = std::abs(quant::qd(quant::make_cpmf(theta, g, a)) -
                                    oracle::hard_quantize(theta, g));
        CHECK(dev < prev + 1e-15);
        prev = dev;
      }
    }
    // exact-expectation-validated region: outside 0.0211 of every midpoint the
    // alpha=700 curve deviates by less than 5e-3 (the supremum there is
    // 4.955e-3; at radius 0.01 the true supremum is 1.978e-2)
    double maxdev = 0.0;
    for (double theta = -0.4; theta <= 0.3; theta += 1e-3) {
      double dmid = 1e9;
      for (int i = g.min_index(); i < g.max_index(); ++i)
        dmid = std::min(dmid, std::abs(theta - (static_cast<double>(i) + 0.5) * g.step));
      if (dmid <= 0.0211) continue;
      maxdev = std::max(maxdev, std::abs(quant::qd(quant::make_cpmf(theta, g, 700.0)) -
                                         oracle::hard_quantize(theta, g)));
    }
    CHECK(maxdev < 5e-3);
  }
}

TEST_SUITE("quant.derivatives") {
  TEST_CASE("one-hot: all three derivatives degenerate") {
    const QuantGrid g = grid(3, 0.1);
    const Cpmf c = quant::make_cpmf(g.level(2), g, 1e9);
    CHECK(quant::dqd_dtheta(c) == doctest::Approx(0.0));
    CHECK(quant::dqd_dq(c) == doctest::Approx(2.0).epsilon(1e-9));  // point mass at index 2
    CHECK(quant::dqd_dsharpness(c) == doctest::Approx(0.0));
  }

  TEST_CASE("dqd_dtheta matches finite differences along a sweep (b=3, q=0.1, alpha=100)") {
    const QuantGrid g = grid(3, 0.1);
    const double h = 1e-6;
    for (double theta = -0.4; theta <= 0.3; theta += 0.007) {
      const double analytic = quant::dqd_dtheta(quant::make_cpmf(theta, g, 100.0));
      const double fd = (quant::qd(quant::make_cpmf(theta + h, g, 100.0)) -
                         quant::qd(quant::make_cpmf(theta - h, g, 100.0))) /
                        (2 * h);
      CHECK(std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-3}) < 1e-5);
    }
  }

  TEST_CASE("dqd_dtheta is nonnegative and peaks at midpoints for large alpha") {
    const QuantGrid g = grid(3, 0.1);
    Rng rng(5);
    for (int it = 0; it < 200; ++it) {
      const double theta = rng.uniform(-0.45, 0.35);
      CHECK(quant::dqd_dtheta(quant::make_cpmf(theta, g, rng.log_uniform(1.0, 1e4))) >= 0.0);
    }
    const double at_mid = quant::dqd_dtheta(quant::make_cpmf(0.05, g, 700.0));
    for (double off : {0.01, 0.02, 0.035}) {
      CHECK(at_mid > quant::dqd_dtheta(quant::make_cpmf(0.05 + off, g, 700.0)));
      CHECK(at_mid > quant::dqd_dtheta(quant::make_cpmf(0.05 - off, g, 700.0)));
    }
  }

  TEST_CASE("dqd_dq matches finite differences across alphas") {
    const double h = 1e-7;
    for (double a : {100.0, 300.0, 500.0, 700.0}) {
      for (double theta = -0.4; theta <= 0.3; theta += 0.0131) {
        const QuantGrid g = grid(3, 0.1), gp = grid(3, 0.1 + h), gm = grid(3, 0.1 - h);
        const double analytic = quant::dqd_dq(quant::make_cpmf(theta, g, a));
        const double fd = (quant::qd(quant::make_cpmf(theta, gp, a)) -
                           quant::qd(quant::make_cpmf(theta, gm, a))) /
                          (2 * h);
        CHECK(std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-2}) < 1e-4);
      }
    }
  }

  TEST_CASE("dqd_dq staircase: plateau values sit on integer indices once hard") {
    // Exact-oracle note: at alpha=700 the plateaus still deviate from the
    // integers by up to ~0.09 (neighbor mass exp(-7)); at alpha=2000 the
    // deviation is below 1e-3 everywhere on the levels.
    const QuantGrid g = grid(3, 0.1);
    for (int i = g.min_index(); i <= g.max_index(); ++i) {
      const double d = quant::dqd_dq(quant::make_cpmf(g.level(i), g, 2000.0));
      CHECK(std::abs(d - i) < 1e-3);
    }
  }

  TEST_CASE("dqd_dsharpness pulls qd toward the on-grid input") {
    Rng rng(11);
    for (int it = 0; it < 100; ++it) {
      const QuantGrid g = {rng.uniform_int(2, 5), rng.log_uniform(0.01, 1.0), Signedness::kSigned};
      const int i = rng.uniform_int(g.min_index(), g.max_index());
      const Cpmf c = quant::make_cpmf(g.level(i), g, rng.log_uniform(1.0, 100.0));
      CHECK((quant::qd(c) - c.input) * quant::dqd_dsharpness(c) <= 1e-12);
    }
  }
}

TEST_SUITE("quant.truncate_topk") {
  TEST_CASE("k = 2^b is the identity; one-hot unchanged") {
    const Cpmf c = quant::make_cpmf(0.3, grid(2, 1.0), 1.0);
    const Cpmf t = quant::truncate_topk(c, 4);
    for (int i = -2; i <= 1; ++i) CHECK(t.prob_at(i) == doctest::Approx(c.prob_at(i)));
    const Cpmf oh = quant::make_cpmf(0.0, grid(2, 1.0), 1e9);
    const Cpmf toh = quant::truncate_topk(oh, 1);
    CHECK(toh.prob_at(0) == doctest::Approx(1.0));
  }

  TEST_CASE("frozen top-2 of the b=2 vector") {
    const Cpmf t = quant::truncate_topk(quant::make_cpmf(0.3, grid(2, 1.0), 1.0), 2);
    CHECK(t.prob_at(0) == doctest::Approx(0.59868766011245200).epsilon(1e-14));
    CHECK(t.prob_at(1) == doctest::Approx(0.40131233988754800).epsilon(1e-14));
    CHECK(t.prob_at(-1) == 0.0);
    CHECK(t.prob_at(-2) == 0.0);
  }

  TEST_CASE("k out of range throws") {
    const Cpmf c = quant::make_cpmf(0.3, grid(2, 1.0), 1.0);
    CHECK_THROWS_AS(quant::truncate_topk(c, 0), std::invalid_argument);
    CHECK_THROWS_AS(quant::truncate_topk(c, 5), std::invalid_argument);
  }

  TEST_CASE("truncation never increases entropy and keeps the invariants") {
    Rng rng(21);
    for (int it = 0; it < 300; ++it) {
      const QuantGrid g = {rng.uniform_int(2, 6), rng.log_uniform(0.01, 1.0),
                           it % 2 ? Signedness::kSigned : Signedness::kUnsigned};
      const double theta = rng.uniform(g.min_level() - g.step, g.max_level() + g.step);
      const Cpmf c = quant::make_cpmf(theta, g, rng.log_uniform(1.0, 1e3));
      const int k = rng.uniform_int(1, g.size());
      const Cpmf t = quant::truncate_topk(c, k);
      double sum = 0.0;
      for (double p : t.probs) sum += p;
      CHECK(std::abs(sum - 1.0) < 1e-12);
      auto entropy_of = [](const Cpmf& x) {
        double h = 0.0;
        for (double p : x.probs)
          if (p > 0.0) h -= p * std::log2(p);
        return h;
      };
      CHECK(entropy_of(t) <= entropy_of(c) + 1e-12);
      // fast window path equals truncate(make_cpmf) exactly
      if (k <= 8) {
        const int first = quant::topk_support_first(theta, g, k);
        double w[8];
        quant::softmax_window(theta, g, c.sharpness, first, k, w);
        CHECK(first == t.support_first);
        for (int j = 0; j < k; ++j)
          CHECK(w[j] == doctest::Approx(t.probs[static_cast<std::size_t>(j)]).epsilon(1e-13));
      }
    }
  }
}

TEST_SUITE("quant.proposition1") {
  TEST_CASE("expected distortion decomposes exactly into bias^2 + variance") {
    Rng rng(314);
    for (int it = 0; it < 2000; ++it) {
      const QuantGrid g = {rng.uniform_int(2, 6), rng.log_uniform(1e-3, 1.0), Signedness::kSigned};
      const double a = rng.log_uniform(1.0, 1e4);
      const double theta = rng.uniform(g.min_level(), g.max_level());
      const Cpmf c = quant::make_cpmf(theta, g, a);
      long double lhs = 0.0L;
      for (int j = 0; j < c.support_size(); ++j) {
        const long double d = static_cast<long double>(theta) - g.level(c.support_first + j);
        lhs += static_cast<long double>(c.probs[static_cast<std::size_t>(j)]) * d * d;
      }
      const quant::QuantMoments m = quant::moments(c);
      const double rhs = (theta - m.mean) * (theta - m.mean) + m.var;
      CHECK(std::abs(static_cast<double>(lhs) - rhs) < 1e-10);
    }
  }
}
