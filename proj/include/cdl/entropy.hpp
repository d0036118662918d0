#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdl/quant.hpp"

namespace cdl::entropy {

// Marginal PMF of a randomly quantized population: the average of the
// per-element CPMFs. probs is dense, indexed from grid.min_index().
struct Mpmf {
  quant::QuantGrid grid;
  std::vector<double> probs;
  std::int64_t population_size = 0;
};

// topk <= 0 keeps the full CPMF support (weights); activations pass 5.
Mpmf layer_mpmf(std::span<const double> values, const quant::QuantGrid& grid,
                double sharpness, int topk = 0);

double shannon_entropy_bits(std::span<const double> probs);
double shannon_entropy_bits(const Mpmf& m);

// Exact gradients of the layer bit count |values| * H(MPMF) with respect to
// every value, the step size, and the sharpness.
struct PenaltyGrads {
  std::vector<double> d_values;
  double d_step = 0.0;
  double d_sharpness = 0.0;
};
PenaltyGrads entropy_penalty_gradients(std::span<const double> values,
                                       const quant::QuantGrid& grid, double sharpness,
                                       int topk = 0);

// ---------------------------------------------------------------------------
// Window kernels shared with the network backward pass.
// ---------------------------------------------------------------------------

// g[k] = -(ln p[k] + 1) / ln 2 where p[k] > 0, else 0. Inner-producting g with
// d p_bar / d(param) gives dH/d(param) in bits; zero-mass cells stay zero to
// first order, so skipping them is exact.
void mpmf_loggrad(std::span<const double> mpmf, std::span<double> g_out);

struct ElemGrads {
  double d_value = 0.0;
  double d_step = 0.0;
  double d_sharpness = 0.0;
};

// Contribution of one population element (CPMF window `probs`) to the layer
// bit-count gradient, given g_dense = mpmf_loggrad of the layer MPMF.
ElemGrads element_entropy_grads(double theta, const quant::QuantGrid& grid,
                                double sharpness, const double* probs, int first,
                                int count, const double* g_dense);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct WeightLayerView {
  std::span<const double> values;
  quant::QuantGrid grid;
  double sharpness = 1.0;
  std::string name;
};

// Per-sample activation entropies collected from one forward batch.
struct ActivationLayerStats {
  std::int64_t size = 0;  // |x_l|
  std::vector<double> per_sample_entropy_bits;  // H(MPMF) per sample, bits/element
  std::string name;
};

struct EntropyReport {
  std::vector<double> per_layer_weight_bits;       // H(w_l) = |w_l| * H(MPMF_l)
  std::vector<double> per_layer_activation_bits;   // |x_l| * mean_sample H
  std::vector<double> weight_entropy_per_symbol;   // H(MPMF_l), bits
  std::vector<double> activation_entropy_per_symbol;
  std::vector<std::string> weight_layer_names;
  std::vector<std::string> activation_layer_names;
  double total_weight_bits = 0.0;      // H(w)
  double total_activation_bits = 0.0;  // H(x)

  std::string to_json() const;  // schema cdl.entropy_report v1
};

EntropyReport entropy_report(std::span<const WeightLayerView> weight_layers,
                             std::span<const ActivationLayerStats> activation_layers);

}  // namespace cdl::entropy
