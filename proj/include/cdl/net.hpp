#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdl/entropy.hpp"
#include "cdl/quant.hpp"
#include "cdl/rng.hpp"
#include "cdl/tensor.hpp"

namespace cdl::net {

// fp: plain network. cdl: sampled probabilistic quantization of weights (one
// draw per mini-batch) and activations (per sample). rcdl: the soft
// deterministic quantizer everywhere, exactly differentiable.
enum class Mode { kFp, kCdl, kRcdl };

const char* mode_name(Mode m);
std::optional<Mode> parse_mode(const std::string& s);

enum class LayerKind { kDense, kConv2d, kRelu, kFlatten };

struct Layer {
  LayerKind kind = LayerKind::kDense;
  Shape in_shape, out_shape;

  // dense
  int in_features = 0, out_features = 0;
  // conv2d
  int in_ch = 0, out_ch = 0, ksize = 0, stride = 1, pad = 0;

  Tensor weights;            // dense: [out,in]; conv: [oc][ic][k][k]
  int param_layer = -1;      // weight-quantizer index (dense/conv nodes)
  int act_param_layer = -1;  // activation-quantizer index (relu nodes; -1 = none)
  bool exempt_8bit = false;
};

// Trainable quantizer state for one weight layer and its output activations.
// Positivity of all four parameters is maintained by the optimizer (log-space
// updates); this module only consumes the values.
struct LayerQuantParams {
  double q = 1.0;
  double s = 1.0;
  double alpha = 500.0;
  double beta = 500.0;
  int weight_bits = 6;
  int act_bits = 6;
};

// Name + bookkeeping for one "block" (a weight layer plus the quantized
// activations it produces).
struct QuantBlock {
  int weight_node = -1;
  int relu_node = -1;  // -1 for the logits layer
  std::int64_t weight_count = 0;
  std::int64_t act_count = 0;  // 0 for the logits layer
  std::string name;
};

struct Model {
  std::vector<Layer> layers;
  std::vector<LayerQuantParams> qp;     // one per block
  std::vector<QuantBlock> blocks;
  Shape input_shape;
  int bits = 6;
  int topk = 5;  // activation CPMF truncation (applied to sampling and gradients)

  int num_blocks() const { return static_cast<int>(blocks.size()); }
  quant::QuantGrid weight_grid(int l) const {
    return {qp[static_cast<std::size_t>(l)].weight_bits, qp[static_cast<std::size_t>(l)].q,
            quant::Signedness::kSigned};
  }
  quant::QuantGrid act_grid(int l) const {
    return {qp[static_cast<std::size_t>(l)].act_bits, qp[static_cast<std::size_t>(l)].s,
            quant::Signedness::kUnsigned};
  }
};

// 784-<hidden...>-classes MLP. He-initialized, no biases.
Model make_mlp(Shape input, const std::vector<int>& hidden, int classes, int bits,
               bool exempt_first_last, Rng& rng);
// Desk-scale CNN: conv 6@3x3/2 - conv 12@3x3/2 - fc 48 - fc classes.
Model make_cnn(Shape input, int classes, int bits, bool exempt_first_last, Rng& rng);

// ---------------------------------------------------------------------------
// Per-batch weight quantization (Algorithm step: weights are quantized once
// per mini-batch and shared across its samples).
// ---------------------------------------------------------------------------

struct WeightQuantOp {
  bool identity = false;          // fp mode
  std::vector<double> values;     // quantized weights used in forward
  std::vector<std::int16_t> symbols;  // grid indices (cdl)
  std::vector<double> d_theta, d_step, d_sharp;  // Q_d partials at the masters
};

// rng required in cdl mode, ignored otherwise.
std::vector<WeightQuantOp> quantize_weights(const Model& model, Mode mode, Rng* rng);

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

inline constexpr int kMaxActWindow = 8;

struct WindowPmf {
  std::int16_t first = 0;
  std::int16_t count = 0;
  double p[kMaxActWindow] = {};
};

struct ActTrace {
  int block = -1;
  std::vector<double> pre;            // relu output before quantization
  std::vector<WindowPmf> pmf;
  std::vector<std::int16_t> symbols;  // cdl draws
  std::vector<double> mpmf;           // this sample's MPMF (entropy tracking only)
  double entropy_bits_total = 0.0;    // |x_l| * H(MPMF)
};

struct ForwardTrace {
  Mode mode = Mode::kFp;
  Tensor input;
  int label = -1;
  std::vector<Tensor> node_out;
  std::vector<ActTrace> act;          // parallel to node list
  double loss_ce = 0.0;
  double entropy_bits_total = 0.0;    // sum over quantized activation layers
  double loss_total = 0.0;            // ce + gamma * entropy_bits_total
  const Tensor& logits() const { return node_out.back(); }
};

// label = -1 runs inference only (no loss). wq may be null in fp mode.
// track_entropy additionally fills per-layer sample MPMFs and entropy values;
// it is implied by gamma > 0.
ForwardTrace forward(const Model& model, const Tensor& input, int label, Mode mode,
                     const std::vector<WeightQuantOp>* wq, double gamma, Rng* act_rng,
                     bool track_entropy = false);

struct ParamGrads {
  std::vector<std::vector<double>> w;  // per block, flat master-space grads
  std::vector<double> q, s, alpha, beta;
  void init_like(const Model& model);
  void add_scaled(const ParamGrads& other, double c);
  void scale(double c);
};

// Gradients of loss_total for one sample: master-weight grads plus the four
// quantizer-parameter groups, via the Q_d proxy chain rule. In cdl mode the
// loss-side factors are evaluated at the sampled quantized values while every
// Q_d partial comes from the pre-quantization inputs; in rcdl mode the same
// code is the exact chain rule.
ParamGrads backward(const ForwardTrace& trace, const Model& model,
                    const std::vector<WeightQuantOp>* wq, double gamma);

// Numerically stable softmax cross-entropy.
double loss_ce(std::span<const double> logits, int label);

int argmax(std::span<const double> v);

// ---------------------------------------------------------------------------
// Checkpoint I/O: documented little-endian binary layout (docs/formats.md);
// round-trips bit-exactly. Writes are atomic (temp file + rename).
// ---------------------------------------------------------------------------
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace cdl::net
