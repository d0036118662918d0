#include "cdl/net.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cdl::net {

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kFp: return "fp";
    case Mode::kCdl: return "cdl";
    case Mode::kRcdl: return "rcdl";
  }
  return "?";
}

std::optional<Mode> parse_mode(const std::string& s) {
  if (s == "fp") return Mode::kFp;
  if (s == "cdl") return Mode::kCdl;
  if (s == "rcdl") return Mode::kRcdl;
  return std::nullopt;
}

namespace {

Shape dense_out(int out_features) { return {out_features, 1, 1}; }

Shape conv_out(const Shape& in, int out_ch, int k, int stride, int pad) {
  const int oh = (in.h + 2 * pad - k) / stride + 1;
  const int ow = (in.w + 2 * pad - k) / stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: output shape collapsed");
  return {out_ch, oh, ow};
}

// Walks the node list, fills shapes and block bookkeeping. Shared by the
// builders and the checkpoint loader.
void finalize_model(Model& m) {
  Shape cur = m.input_shape;
  m.blocks.clear();
  for (std::size_t n = 0; n < m.layers.size(); ++n) {
    Layer& L = m.layers[n];
    L.in_shape = cur;
    switch (L.kind) {
      case LayerKind::kDense:
        if (cur.count() != L.in_features) throw std::invalid_argument("dense: shape mismatch");
        L.out_shape = dense_out(L.out_features);
        break;
      case LayerKind::kConv2d:
        if (cur.c != L.in_ch) throw std::invalid_argument("conv2d: channel mismatch");
        L.out_shape = conv_out(cur, L.out_ch, L.ksize, L.stride, L.pad);
        break;
      case LayerKind::kRelu:
      case LayerKind::kFlatten:
        L.out_shape = L.kind == LayerKind::kFlatten
                          ? Shape{static_cast<int>(cur.count()), 1, 1}
                          : cur;
        break;
    }
    cur = L.out_shape;
    if (L.param_layer >= 0) {
      if (L.param_layer != static_cast<int>(m.blocks.size()))
        throw std::invalid_argument("model: weight layers must be numbered in order");
      QuantBlock pl;
      pl.weight_node = static_cast<int>(n);
      pl.weight_count = L.weights.size();
      pl.name = std::string(L.kind == LayerKind::kConv2d ? "conv" : "fc") +
                std::to_string(m.blocks.size() + 1);
      m.blocks.push_back(pl);
    }
    if (L.kind == LayerKind::kRelu && L.act_param_layer >= 0) {
      QuantBlock& pl = m.blocks[static_cast<std::size_t>(L.act_param_layer)];
      pl.relu_node = static_cast<int>(n);
      pl.act_count = L.out_shape.count();
    }
  }
  if (m.qp.size() != m.blocks.size())
    m.qp.resize(m.blocks.size());
}

void he_init(Tensor& w, std::int64_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : w.data) v = std * rng.normal();
}

Layer dense_layer(int in, int out, int param_layer, Rng& rng) {
  Layer L;
  L.kind = LayerKind::kDense;
  L.in_features = in;
  L.out_features = out;
  L.param_layer = param_layer;
  L.weights = Tensor({out, in, 1});
  he_init(L.weights, in, rng);
  return L;
}

Layer conv_layer(int in_ch, int out_ch, int k, int stride, int param_layer, Rng& rng) {
  Layer L;
  L.kind = LayerKind::kConv2d;
  L.in_ch = in_ch;
  L.out_ch = out_ch;
  L.ksize = k;
  L.stride = stride;
  L.pad = 0;
  L.param_layer = param_layer;
  L.weights = Tensor({out_ch, in_ch * k, k});
  he_init(L.weights, static_cast<std::int64_t>(in_ch) * k * k, rng);
  return L;
}

Layer relu_layer(int act_param_layer) {
  Layer L;
  L.kind = LayerKind::kRelu;
  L.act_param_layer = act_param_layer;
  return L;
}

Layer flatten_layer() {
  Layer L;
  L.kind = LayerKind::kFlatten;
  return L;
}

void apply_bit_widths(Model& m, bool exempt_first_last) {
  const int last = m.num_blocks() - 1;
  for (int l = 0; l <= last; ++l) {
    LayerQuantParams& p = m.qp[static_cast<std::size_t>(l)];
    p.weight_bits = m.bits;
    p.act_bits = m.bits;
    if (exempt_first_last && (l == 0 || l == last)) {
      p.weight_bits = 8;
      m.layers[static_cast<std::size_t>(m.blocks[static_cast<std::size_t>(l)].weight_node)]
          .exempt_8bit = true;
    }
  }
}

}  // namespace

Model make_mlp(Shape input, const std::vector<int>& hidden, int classes, int bits,
               bool exempt_first_last, Rng& rng) {
  Model m;
  m.input_shape = input;
  m.bits = bits;
  int in = static_cast<int>(input.count());
  int pl = 0;
  if (input.h != 1 || input.w != 1) m.layers.push_back(flatten_layer());
  for (int hdim : hidden) {
    m.layers.push_back(dense_layer(in, hdim, pl, rng));
    m.layers.push_back(relu_layer(pl));
    in = hdim;
    ++pl;
  }
  m.layers.push_back(dense_layer(in, classes, pl, rng));
  m.qp.resize(static_cast<std::size_t>(pl + 1));
  finalize_model(m);
  apply_bit_widths(m, exempt_first_last);
  return m;
}

Model make_cnn(Shape input, int classes, int bits, bool exempt_first_last, Rng& rng) {
  Model m;
  m.input_shape = input;
  m.bits = bits;
  m.layers.push_back(conv_layer(input.c, 6, 3, 2, 0, rng));
  m.layers.push_back(relu_layer(0));
  m.layers.push_back(conv_layer(6, 12, 3, 2, 1, rng));
  m.layers.push_back(relu_layer(1));
  m.layers.push_back(flatten_layer());
  const Shape c2 = conv_out(conv_out(input, 6, 3, 2, 0), 12, 3, 2, 0);
  m.layers.push_back(dense_layer(static_cast<int>(c2.count()), 48, 2, rng));
  m.layers.push_back(relu_layer(2));
  m.layers.push_back(dense_layer(48, classes, 3, rng));
  m.qp.resize(4);
  finalize_model(m);
  apply_bit_widths(m, exempt_first_last);
  return m;
}

// ---------------------------------------------------------------------------

std::vector<WeightQuantOp> quantize_weights(const Model& model, Mode mode, Rng* rng) {
  std::vector<WeightQuantOp> ops(model.blocks.size());
  if (mode == Mode::kFp) {
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      ops[l].identity = true;
      ops[l].values = model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)]
                          .weights.data;
    }
    return ops;
  }
  if (mode == Mode::kCdl && rng == nullptr)
    throw std::invalid_argument("quantize_weights: cdl mode needs an rng");
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& w =
        model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
    const quant::QuantGrid grid = model.weight_grid(static_cast<int>(l));
    const double a = model.qp[l].alpha;
    WeightQuantOp& op = ops[l];
    const std::size_t n = w.size();
    op.values.resize(n);
    op.d_theta.resize(n);
    op.d_step.resize(n);
    op.d_sharp.resize(n);
    if (mode == Mode::kCdl) op.symbols.resize(n);
    std::vector<double> probs(static_cast<std::size_t>(grid.size()));
    for (std::size_t i = 0; i < n; ++i) {
      quant::softmax_window(w[i], grid, a, grid.min_index(), grid.size(), probs.data());
      const quant::QuantMoments mo =
          quant::window_moments(probs.data(), grid.min_index(), grid.size(), grid);
      op.d_theta[i] = quant::window_dqd_dtheta(a, mo);
      op.d_step[i] = quant::window_dqd_dstep(w[i], a, mo, grid);
      op.d_sharp[i] = quant::window_dqd_dsharpness(w[i], probs.data(), grid.min_index(),
                                                   grid.size(), grid);
      if (mode == Mode::kCdl) {
        const int sym =
            quant::sample_window_index(probs.data(), grid.min_index(), grid.size(), *rng);
        op.symbols[i] = static_cast<std::int16_t>(sym);
        op.values[i] = grid.level(sym);
      } else {
        op.values[i] = mo.mean;
      }
    }
  }
  return ops;
}

// ---------------------------------------------------------------------------

namespace {

void check_finite(const Tensor& t, const char* where) {
  for (double v : t.data)
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value after ") + where);
}

void dense_forward(const Layer& L, std::span<const double> w, const Tensor& in, Tensor& out) {
  for (int o = 0; o < L.out_features; ++o) {
    const double* wr = w.data() + static_cast<std::size_t>(o) * L.in_features;
    double acc = 0.0;
    for (int i = 0; i < L.in_features; ++i) acc += wr[i] * in.data[static_cast<std::size_t>(i)];
    out.data[static_cast<std::size_t>(o)] = acc;
  }
}

void conv_forward(const Layer& L, std::span<const double> w, const Tensor& in, Tensor& out) {
  const int K = L.ksize, S = L.stride, P = L.pad;
  const int ih = L.in_shape.h, iw = L.in_shape.w;
  for (int oc = 0; oc < L.out_ch; ++oc) {
    for (int oy = 0; oy < L.out_shape.h; ++oy) {
      for (int ox = 0; ox < L.out_shape.w; ++ox) {
        double acc = 0.0;
        for (int ic = 0; ic < L.in_ch; ++ic) {
          const double* wk = w.data() + ((static_cast<std::size_t>(oc) * L.in_ch + ic) * K) * K;
          for (int ky = 0; ky < K; ++ky) {
            const int iy = oy * S + ky - P;
            if (iy < 0 || iy >= ih) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int ix = ox * S + kx - P;
              if (ix < 0 || ix >= iw) continue;
              acc += wk[ky * K + kx] * in.at(ic, iy, ix);
            }
          }
        }
        out.at(oc, oy, ox) = acc;
      }
    }
  }
}

}  // namespace

ForwardTrace forward(const Model& model, const Tensor& input, int label, Mode mode,
                     const std::vector<WeightQuantOp>* wq, double gamma, Rng* act_rng,
                     bool track_entropy) {
  if (input.shape.count() != model.input_shape.count())
    throw std::invalid_argument("forward: input shape mismatch");
  if (mode != Mode::kFp && wq == nullptr)
    throw std::invalid_argument("forward: quantized mode needs per-batch weight quantization");
  if (mode == Mode::kCdl && act_rng == nullptr)
    throw std::invalid_argument("forward: cdl mode needs an rng");
  track_entropy = track_entropy || gamma > 0.0;

  ForwardTrace tr;
  tr.mode = mode;
  tr.input = input;
  tr.input.shape = model.input_shape;
  tr.label = label;
  tr.node_out.resize(model.layers.size());
  tr.act.resize(model.layers.size());

  const Tensor* cur = &tr.input;
  for (std::size_t n = 0; n < model.layers.size(); ++n) {
    const Layer& L = model.layers[n];
    Tensor& out = tr.node_out[n];
    out = Tensor(L.out_shape);
    switch (L.kind) {
      case LayerKind::kDense: {
        std::span<const double> w =
            mode == Mode::kFp ? std::span<const double>(L.weights.data)
                              : std::span<const double>((*wq)[static_cast<std::size_t>(L.param_layer)].values);
        dense_forward(L, w, *cur, out);
        break;
      }
      case LayerKind::kConv2d: {
        std::span<const double> w =
            mode == Mode::kFp ? std::span<const double>(L.weights.data)
                              : std::span<const double>((*wq)[static_cast<std::size_t>(L.param_layer)].values);
        conv_forward(L, w, *cur, out);
        break;
      }
      case LayerKind::kFlatten:
        out.data = cur->data;
        break;
      case LayerKind::kRelu: {
        const std::size_t count = cur->data.size();
        for (std::size_t i = 0; i < count; ++i) out.data[i] = std::max(0.0, cur->data[i]);
        if (mode != Mode::kFp && L.act_param_layer >= 0) {
          const int pl = L.act_param_layer;
          const quant::QuantGrid grid = model.act_grid(pl);
          const double beta = model.qp[static_cast<std::size_t>(pl)].beta;
          const int k = std::min({model.topk, grid.size(), kMaxActWindow});
          ActTrace& at = tr.act[n];
          at.block = pl;
          at.pre = out.data;
          at.pmf.resize(count);
          if (mode == Mode::kCdl) at.symbols.resize(count);
          if (track_entropy) at.mpmf.assign(static_cast<std::size_t>(grid.size()), 0.0);
          for (std::size_t i = 0; i < count; ++i) {
            const double a = at.pre[i];
            WindowPmf& pm = at.pmf[i];
            pm.first = static_cast<std::int16_t>(quant::topk_support_first(a, grid, k));
            pm.count = static_cast<std::int16_t>(k);
            quant::softmax_window(a, grid, beta, pm.first, k, pm.p);
            if (mode == Mode::kCdl) {
              const int sym = quant::sample_window_index(pm.p, pm.first, k, *act_rng);
              at.symbols[i] = static_cast<std::int16_t>(sym);
              out.data[i] = grid.level(sym);
            } else {
              double mean = 0.0;
              for (int j = 0; j < k; ++j) mean += pm.p[j] * grid.level(pm.first + j);
              out.data[i] = mean;
            }
            if (track_entropy) {
              const int base = pm.first - grid.min_index();
              for (int j = 0; j < k; ++j) at.mpmf[static_cast<std::size_t>(base + j)] += pm.p[j];
            }
          }
          if (track_entropy) {
            const double inv = 1.0 / static_cast<double>(count);
            for (double& p : at.mpmf) p *= inv;
            at.entropy_bits_total =
                entropy::shannon_entropy_bits(at.mpmf) * static_cast<double>(count);
            tr.entropy_bits_total += at.entropy_bits_total;
          }
        }
        break;
      }
    }
    check_finite(out, "node");
    cur = &out;
  }

  if (label >= 0) tr.loss_ce = loss_ce(tr.logits().data, label);
  tr.loss_total = tr.loss_ce + gamma * tr.entropy_bits_total;
  return tr;
}

void ParamGrads::init_like(const Model& model) {
  w.resize(model.blocks.size());
  for (std::size_t l = 0; l < model.blocks.size(); ++l)
    w[l].assign(static_cast<std::size_t>(model.blocks[l].weight_count), 0.0);
  q.assign(model.blocks.size(), 0.0);
  s.assign(model.blocks.size(), 0.0);
  alpha.assign(model.blocks.size(), 0.0);
  beta.assign(model.blocks.size(), 0.0);
}

void ParamGrads::add_scaled(const ParamGrads& other, double c) {
  for (std::size_t l = 0; l < w.size(); ++l)
    for (std::size_t i = 0; i < w[l].size(); ++i) w[l][i] += c * other.w[l][i];
  for (std::size_t l = 0; l < q.size(); ++l) {
    q[l] += c * other.q[l];
    s[l] += c * other.s[l];
    alpha[l] += c * other.alpha[l];
    beta[l] += c * other.beta[l];
  }
}

void ParamGrads::scale(double c) {
  for (auto& wl : w)
    for (double& v : wl) v *= c;
  for (std::size_t l = 0; l < q.size(); ++l) {
    q[l] *= c;
    s[l] *= c;
    alpha[l] *= c;
    beta[l] *= c;
  }
}

ParamGrads backward(const ForwardTrace& tr, const Model& model,
                    const std::vector<WeightQuantOp>* wq, double gamma) {
  if (tr.label < 0) throw std::invalid_argument("backward: trace has no label");
  if (tr.mode != Mode::kFp && wq == nullptr)
    throw std::invalid_argument("backward: quantized mode needs weight quantization ops");

  ParamGrads g;
  g.init_like(model);

  // dL/dlogits
  const Tensor& logits = tr.logits();
  std::vector<double> grad(logits.data.size());
  {
    double m = logits.data[0];
    for (double v : logits.data) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits.data) z += std::exp(v - m);
    for (std::size_t i = 0; i < grad.size(); ++i)
      grad[i] = std::exp(logits.data[i] - m) / z;
    grad[static_cast<std::size_t>(tr.label)] -= 1.0;
  }

  std::vector<double> grad_prev;
  for (int n = static_cast<int>(model.layers.size()) - 1; n >= 0; --n) {
    const Layer& L = model.layers[static_cast<std::size_t>(n)];
    const Tensor& in_t = n == 0 ? tr.input : tr.node_out[static_cast<std::size_t>(n - 1)];
    switch (L.kind) {
      case LayerKind::kDense: {
        const int pl = L.param_layer;
        std::span<const double> w =
            tr.mode == Mode::kFp
                ? std::span<const double>(L.weights.data)
                : std::span<const double>((*wq)[static_cast<std::size_t>(pl)].values);
        grad_prev.assign(static_cast<std::size_t>(L.in_features), 0.0);
        auto& dw = g.w[static_cast<std::size_t>(pl)];
        for (int o = 0; o < L.out_features; ++o) {
          const double go = grad[static_cast<std::size_t>(o)];
          if (go == 0.0) continue;
          const std::size_t row = static_cast<std::size_t>(o) * L.in_features;
          for (int i = 0; i < L.in_features; ++i) {
            dw[row + i] += go * in_t.data[static_cast<std::size_t>(i)];
            grad_prev[static_cast<std::size_t>(i)] += go * w[row + i];
          }
        }
        grad.swap(grad_prev);
        break;
      }
      case LayerKind::kConv2d: {
        const int pl = L.param_layer;
        std::span<const double> w =
            tr.mode == Mode::kFp
                ? std::span<const double>(L.weights.data)
                : std::span<const double>((*wq)[static_cast<std::size_t>(pl)].values);
        grad_prev.assign(in_t.data.size(), 0.0);
        auto& dw = g.w[static_cast<std::size_t>(pl)];
        const int K = L.ksize, S = L.stride, P = L.pad;
        const int ih = L.in_shape.h, iw = L.in_shape.w;
        const int oh = L.out_shape.h, ow = L.out_shape.w;
        for (int oc = 0; oc < L.out_ch; ++oc) {
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              const double go = grad[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox];
              if (go == 0.0) continue;
              for (int ic = 0; ic < L.in_ch; ++ic) {
                const std::size_t wbase = ((static_cast<std::size_t>(oc) * L.in_ch + ic) * K) * K;
                for (int ky = 0; ky < K; ++ky) {
                  const int iy = oy * S + ky - P;
                  if (iy < 0 || iy >= ih) continue;
                  for (int kx = 0; kx < K; ++kx) {
                    const int ix = ox * S + kx - P;
                    if (ix < 0 || ix >= iw) continue;
                    const std::size_t iidx = (static_cast<std::size_t>(ic) * ih + iy) * iw + ix;
                    dw[wbase + ky * K + kx] += go * in_t.data[iidx];
                    grad_prev[iidx] += go * w[wbase + ky * K + kx];
                  }
                }
              }
            }
          }
        }
        grad.swap(grad_prev);
        break;
      }
      case LayerKind::kFlatten:
        break;  // gradient passes through unchanged
      case LayerKind::kRelu: {
        const ActTrace& at = tr.act[static_cast<std::size_t>(n)];
        if (tr.mode != Mode::kFp && at.block >= 0) {
          const int pl = at.block;
          const quant::QuantGrid grid = model.act_grid(pl);
          const double beta = model.qp[static_cast<std::size_t>(pl)].beta;
          std::vector<double> loggrad;
          if (gamma > 0.0) {
            loggrad.resize(static_cast<std::size_t>(grid.size()));
            entropy::mpmf_loggrad(at.mpmf, loggrad);
          }
          double ds = 0.0, dbeta = 0.0;
          for (std::size_t i = 0; i < at.pre.size(); ++i) {
            const WindowPmf& pm = at.pmf[i];
            const quant::QuantMoments mo =
                quant::window_moments(pm.p, pm.first, pm.count, grid);
            const double go = grad[i];
            ds += go * quant::window_dqd_dstep(at.pre[i], beta, mo, grid);
            dbeta += go * quant::window_dqd_dsharpness(at.pre[i], pm.p, pm.first, pm.count, grid);
            double ga = go * quant::window_dqd_dtheta(beta, mo);
            if (gamma > 0.0) {
              const entropy::ElemGrads eg = entropy::element_entropy_grads(
                  at.pre[i], grid, beta, pm.p, pm.first, pm.count, loggrad.data());
              ga += gamma * eg.d_value;
              ds += gamma * eg.d_step;
              dbeta += gamma * eg.d_sharpness;
            }
            grad[i] = ga;
          }
          g.s[static_cast<std::size_t>(pl)] += ds;
          g.beta[static_cast<std::size_t>(pl)] += dbeta;
        }
        // relu mask from the pre-activation sign
        for (std::size_t i = 0; i < grad.size(); ++i)
          if (in_t.data[i] <= 0.0) grad[i] = 0.0;
        break;
      }
    }
  }

  // Convert quantized-weight gradients to master space and fold in the
  // quantizer-parameter contributions.
  if (tr.mode != Mode::kFp) {
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      const WeightQuantOp& op = (*wq)[l];
      auto& dw = g.w[l];
      double dq = 0.0, dalpha = 0.0;
      for (std::size_t i = 0; i < dw.size(); ++i) {
        const double dqw = dw[i];  // dL/d(quantized weight)
        dq += dqw * op.d_step[i];
        dalpha += dqw * op.d_sharp[i];
        dw[i] = dqw * op.d_theta[i];
      }
      g.q[l] += dq;
      g.alpha[l] += dalpha;
    }
  }
  return g;
}

double loss_ce(std::span<const double> logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw std::invalid_argument("loss_ce: label out of range");
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return std::log(z) + m - logits[static_cast<std::size_t>(label)];
}

int argmax(std::span<const double> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'D', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kVersion);
    put<std::int32_t>(os, model.bits);
    put<std::int32_t>(os, model.topk);
    put<std::int32_t>(os, model.input_shape.c);
    put<std::int32_t>(os, model.input_shape.h);
    put<std::int32_t>(os, model.input_shape.w);
    put<std::int32_t>(os, static_cast<std::int32_t>(model.layers.size()));
    for (const Layer& L : model.layers) {
      put<std::int32_t>(os, static_cast<std::int32_t>(L.kind));
      put<std::int32_t>(os, L.param_layer);
      put<std::int32_t>(os, L.act_param_layer);
      put<std::uint8_t>(os, L.exempt_8bit ? 1 : 0);
      if (L.kind == LayerKind::kDense) {
        put<std::int32_t>(os, L.in_features);
        put<std::int32_t>(os, L.out_features);
      } else if (L.kind == LayerKind::kConv2d) {
        put<std::int32_t>(os, L.in_ch);
        put<std::int32_t>(os, L.out_ch);
        put<std::int32_t>(os, L.ksize);
        put<std::int32_t>(os, L.stride);
        put<std::int32_t>(os, L.pad);
      }
    }
    put<std::int32_t>(os, static_cast<std::int32_t>(model.qp.size()));
    for (const LayerQuantParams& p : model.qp) {
      put<double>(os, p.q);
      put<double>(os, p.s);
      put<double>(os, p.alpha);
      put<double>(os, p.beta);
      put<std::int32_t>(os, p.weight_bits);
      put<std::int32_t>(os, p.act_bits);
    }
    for (const Layer& L : model.layers) {
      if (L.kind != LayerKind::kDense && L.kind != LayerKind::kConv2d) continue;
      put<std::uint64_t>(os, static_cast<std::uint64_t>(L.weights.data.size()));
      os.write(reinterpret_cast<const char*>(L.weights.data.data()),
               static_cast<std::streamsize>(L.weights.data.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: rename failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  Model m;
  m.bits = get<std::int32_t>(is);
  m.topk = get<std::int32_t>(is);
  m.input_shape.c = get<std::int32_t>(is);
  m.input_shape.h = get<std::int32_t>(is);
  m.input_shape.w = get<std::int32_t>(is);
  const int nodes = get<std::int32_t>(is);
  m.layers.resize(static_cast<std::size_t>(nodes));
  for (Layer& L : m.layers) {
    L.kind = static_cast<LayerKind>(get<std::int32_t>(is));
    L.param_layer = get<std::int32_t>(is);
    L.act_param_layer = get<std::int32_t>(is);
    L.exempt_8bit = get<std::uint8_t>(is) != 0;
    if (L.kind == LayerKind::kDense) {
      L.in_features = get<std::int32_t>(is);
      L.out_features = get<std::int32_t>(is);
      L.weights = Tensor({L.out_features, L.in_features, 1});
    } else if (L.kind == LayerKind::kConv2d) {
      L.in_ch = get<std::int32_t>(is);
      L.out_ch = get<std::int32_t>(is);
      L.ksize = get<std::int32_t>(is);
      L.stride = get<std::int32_t>(is);
      L.pad = get<std::int32_t>(is);
      L.weights = Tensor({L.out_ch, L.in_ch * L.ksize, L.ksize});
    }
  }
  const int np = get<std::int32_t>(is);
  m.qp.resize(static_cast<std::size_t>(np));
  for (LayerQuantParams& p : m.qp) {
    p.q = get<double>(is);
    p.s = get<double>(is);
    p.alpha = get<double>(is);
    p.beta = get<double>(is);
    p.weight_bits = get<std::int32_t>(is);
    p.act_bits = get<std::int32_t>(is);
  }
  for (Layer& L : m.layers) {
    if (L.kind != LayerKind::kDense && L.kind != LayerKind::kConv2d) continue;
    const auto count = get<std::uint64_t>(is);
    if (count != L.weights.data.size()) throw std::runtime_error("checkpoint: weight count mismatch");
    is.read(reinterpret_cast<char*>(L.weights.data.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated weights");
  }
  finalize_model(m);
  return m;
}

}  // namespace cdl::net
