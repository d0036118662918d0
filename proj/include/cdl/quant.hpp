#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cdl/rng.hpp"

namespace cdl::quant {

enum class Signedness { kSigned, kUnsigned };

// Uniform b-bit reproduction alphabet: level(i) = i * step over a signed
// index set {-2^(b-1), ..., 2^(b-1)-1} or an unsigned one {0, ..., 2^b-1}.
struct QuantGrid {
  int bits = 8;
  double step = 1.0;
  Signedness sign = Signedness::kSigned;

  int size() const { return 1 << bits; }
  int min_index() const { return sign == Signedness::kSigned ? -(1 << (bits - 1)) : 0; }
  int max_index() const {
    return sign == Signedness::kSigned ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
  }
  double level(int index) const { return step * static_cast<double>(index); }
  double min_level() const { return level(min_index()); }
  double max_level() const { return level(max_index()); }

  // Index of the closest level, clamped to the grid. Exact midpoints round
  // away from zero (deterministic; the softmax itself never special-cases ties).
  int nearest_index(double theta) const;

  std::vector<double> levels() const;

  // Throws std::domain_error / std::invalid_argument on a malformed grid.
  void validate() const;
};

struct QuantMoments {
  double mean = 0.0;    // E{Q_p(theta) | theta} = Q_d(theta)
  double var = 0.0;     // Var{Q_p(theta) | theta}
  double skew_u = 0.0;  // Sum x^3 p - (Sum x p)(Sum x^2 p)
};

// Conditional PMF over a contiguous window of grid levels. probs[j] is the
// mass of grid index support_first + j; everything outside the window is
// exactly zero (either truncated or underflowed). A freshly built Cpmf spans
// the whole grid; truncate_topk narrows the window.
struct Cpmf {
  QuantGrid grid;
  double input = 0.0;      // the scalar theta this PMF conditions on
  double sharpness = 1.0;  // alpha (weights) or beta (activations)
  int support_first = 0;   // grid index of probs[0]
  std::vector<double> probs;

  int support_size() const { return static_cast<int>(probs.size()); }
  double prob_at(int grid_index) const {
    const int j = grid_index - support_first;
    return (j >= 0 && j < support_size()) ? probs[static_cast<std::size_t>(j)] : 0.0;
  }
  // Dense 2^b vector indexed from grid.min_index().
  std::vector<double> dense() const;
};

// ---------------------------------------------------------------------------
// Window kernels. These operate on raw (probs, first, count) windows and are
// the single implementation of the softmax/moments/derivative math; the Cpmf
// operations below and the hot paths in net/entropy all go through them.
// ---------------------------------------------------------------------------

// First grid index of the contiguous k-level window nearest to theta
// (the k largest CPMF masses always form such a window on a uniform grid).
int topk_support_first(double theta, const QuantGrid& grid, int k);

// Fills probs[0..count) with softmax(-sharpness * (theta - level)^2) over the
// window, max-subtracted; exponents below the exp underflow threshold are
// skipped (the result is identical to calling std::exp).
void softmax_window(double theta, const QuantGrid& grid, double sharpness, int first,
                    int count, double* probs);

QuantMoments window_moments(const double* probs, int first, int count,
                            const QuantGrid& grid);

double window_dqd_dtheta(double sharpness, const QuantMoments& m);
double window_dqd_dstep(double theta, double sharpness, const QuantMoments& m,
                        const QuantGrid& grid);
double window_dqd_dsharpness(double theta, const double* probs, int first, int count,
                             const QuantGrid& grid);

int sample_window_index(const double* probs, int first, int count, Rng& rng);

// ---------------------------------------------------------------------------
// Cpmf-level operations
// ---------------------------------------------------------------------------

// CPMF of the probabilistic quantizer: softmax of -sharpness*(theta-level)^2
// over the full grid. Throws std::invalid_argument for non-finite theta and
// std::domain_error when sharpness <= 0.
Cpmf make_cpmf(double theta, const QuantGrid& grid, double sharpness);

// One draw from the CPMF; returns the reproduction level. The index form is
// what the entropy coder consumes (symbols stay exact integers end to end).
int sample_qp_index(const Cpmf& cpmf, Rng& rng);
double sample_qp(const Cpmf& cpmf, Rng& rng);

// Soft deterministic quantizer Q_d = E{Q_p(theta) | theta}.
double qd(const Cpmf& cpmf);

QuantMoments moments(const Cpmf& cpmf);

// dQ_d/dtheta = 2 * sharpness * Var
double dqd_dtheta(const Cpmf& cpmf);

// dQ_d/dq = (1/q) (E + 2*sharpness*theta*Var - 2*sharpness*Skew_u)
double dqd_dq(const Cpmf& cpmf);

// dQ_d/dsharpness = -Cov(Q_p, (theta - Q_p)^2); validated against finite
// differences (the reference text only states that this derivative exists).
double dqd_dsharpness(const Cpmf& cpmf);

// Keeps the k largest masses, renormalizes proportionally.
Cpmf truncate_topk(const Cpmf& cpmf, int k);

}  // namespace cdl::quant
