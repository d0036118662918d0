#include "cdl/entropy.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cdl::entropy {

namespace {
constexpr double kLn2 = 0.6931471805599453094172321;

// One scratch CPMF evaluation per element: window selection + softmax.
struct ElemPmf {
  int first = 0;
  int count = 0;
};

ElemPmf elem_window(double theta, const quant::QuantGrid& grid, int topk) {
  ElemPmf e;
  if (topk > 0 && topk < grid.size()) {
    e.first = quant::topk_support_first(theta, grid, topk);
    e.count = topk;
  } else {
    e.first = grid.min_index();
    e.count = grid.size();
  }
  return e;
}
}  // namespace

Mpmf layer_mpmf(std::span<const double> values, const quant::QuantGrid& grid,
                double sharpness, int topk) {
  grid.validate();
  if (values.empty()) throw std::invalid_argument("layer_mpmf: empty population");
  if (!(sharpness > 0.0)) throw std::domain_error("layer_mpmf: sharpness must be positive");
  Mpmf m;
  m.grid = grid;
  m.population_size = static_cast<std::int64_t>(values.size());
  m.probs.assign(static_cast<std::size_t>(grid.size()), 0.0);
  std::vector<double> scratch(static_cast<std::size_t>(grid.size()));
  for (double v : values) {
    const ElemPmf e = elem_window(v, grid, topk);
    quant::softmax_window(v, grid, sharpness, e.first, e.count, scratch.data());
    const int base = e.first - grid.min_index();
    for (int j = 0; j < e.count; ++j) m.probs[static_cast<std::size_t>(base + j)] += scratch[static_cast<std::size_t>(j)];
  }
  const double inv = 1.0 / static_cast<double>(values.size());
  for (double& p : m.probs) p *= inv;
  return m;
}

double shannon_entropy_bits(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log2(p);
  return h;
}

double shannon_entropy_bits(const Mpmf& m) { return shannon_entropy_bits(m.probs); }

void mpmf_loggrad(std::span<const double> mpmf, std::span<double> g_out) {
  for (std::size_t k = 0; k < mpmf.size(); ++k)
    g_out[k] = mpmf[k] > 0.0 ? -(std::log(mpmf[k]) + 1.0) / kLn2 : 0.0;
}

ElemGrads element_entropy_grads(double theta, const quant::QuantGrid& grid,
                                double sharpness, const double* probs, int first,
                                int count, const double* g_dense) {
  // dp_k/dtheta = 2a p_k (E[d] - d_k)
  // dp_k/dq     = 2a p_k (k d_k - E[k d])
  // dp_k/da     =    p_k (E[d^2] - d_k^2)
  double ed = 0.0, ekd = 0.0, ed2 = 0.0;
  double sg = 0.0, sgd = 0.0, sgkd = 0.0, sgd2 = 0.0;
  const int gbase = first - grid.min_index();
  for (int j = 0; j < count; ++j) {
    const double p = probs[j];
    if (p == 0.0) continue;
    const int idx = first + j;
    const double d = theta - grid.level(idx);
    const double kd = static_cast<double>(idx) * d;
    const double d2 = d * d;
    ed += p * d;
    ekd += p * kd;
    ed2 += p * d2;
    const double gp = g_dense[gbase + j] * p;
    sg += gp;
    sgd += gp * d;
    sgkd += gp * kd;
    sgd2 += gp * d2;
  }
  ElemGrads out;
  out.d_value = 2.0 * sharpness * (sg * ed - sgd);
  out.d_step = 2.0 * sharpness * (sgkd - sg * ekd);
  out.d_sharpness = sg * ed2 - sgd2;
  return out;
}

PenaltyGrads entropy_penalty_gradients(std::span<const double> values,
                                       const quant::QuantGrid& grid, double sharpness,
                                       int topk) {
  const Mpmf m = layer_mpmf(values, grid, sharpness, topk);
  std::vector<double> g(static_cast<std::size_t>(grid.size()));
  mpmf_loggrad(m.probs, g);

  PenaltyGrads out;
  out.d_values.resize(values.size());
  std::vector<double> scratch(static_cast<std::size_t>(grid.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    const ElemPmf e = elem_window(v, grid, topk);
    quant::softmax_window(v, grid, sharpness, e.first, e.count, scratch.data());
    const ElemGrads eg =
        element_entropy_grads(v, grid, sharpness, scratch.data(), e.first, e.count, g.data());
    out.d_values[i] = eg.d_value;
    out.d_step += eg.d_step;
    out.d_sharpness += eg.d_sharpness;
  }
  return out;
}

EntropyReport entropy_report(std::span<const WeightLayerView> weight_layers,
                             std::span<const ActivationLayerStats> activation_layers) {
  EntropyReport r;
  for (const auto& wl : weight_layers) {
    const Mpmf m = layer_mpmf(wl.values, wl.grid, wl.sharpness, /*topk=*/0);
    const double h = shannon_entropy_bits(m);
    r.weight_entropy_per_symbol.push_back(h);
    r.per_layer_weight_bits.push_back(h * static_cast<double>(wl.values.size()));
    r.weight_layer_names.push_back(wl.name);
    r.total_weight_bits += r.per_layer_weight_bits.back();
  }
  for (const auto& al : activation_layers) {
    if (al.per_sample_entropy_bits.empty())
      throw std::invalid_argument("entropy_report: missing activation statistics");
    double h = 0.0;
    for (double v : al.per_sample_entropy_bits) h += v;
    h /= static_cast<double>(al.per_sample_entropy_bits.size());
    r.activation_entropy_per_symbol.push_back(h);
    r.per_layer_activation_bits.push_back(h * static_cast<double>(al.size));
    r.activation_layer_names.push_back(al.name);
    r.total_activation_bits += r.per_layer_activation_bits.back();
  }
  return r;
}

std::string EntropyReport::to_json() const {
  nlohmann::json j;
  j["schema"] = "cdl.entropy_report";
  j["schema_version"] = 1;
  j["total_weight_bits"] = total_weight_bits;
  j["total_activation_bits"] = total_activation_bits;
  auto layers = nlohmann::json::array();
  for (std::size_t i = 0; i < per_layer_weight_bits.size(); ++i) {
    layers.push_back({{"name", weight_layer_names[i]},
                      {"weight_bits", per_layer_weight_bits[i]},
                      {"weight_entropy_per_symbol", weight_entropy_per_symbol[i]}});
  }
  j["weight_layers"] = layers;
  auto alayers = nlohmann::json::array();
  for (std::size_t i = 0; i < per_layer_activation_bits.size(); ++i) {
    alayers.push_back({{"name", activation_layer_names[i]},
                       {"activation_bits", per_layer_activation_bits[i]},
                       {"activation_entropy_per_symbol", activation_entropy_per_symbol[i]}});
  }
  j["activation_layers"] = alayers;
  return j.dump(2);
}

}  // namespace cdl::entropy
