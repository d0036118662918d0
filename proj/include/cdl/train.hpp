#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdl/dataset.hpp"
#include "cdl/entropy.hpp"
#include "cdl/net.hpp"

namespace cdl::train {

struct TrainConfig {
  net::Mode mode = net::Mode::kRcdl;
  double lambda = 0.0;  // weight-entropy coefficient
  double gamma = 0.0;   // activation-entropy coefficient
  int bits = 6;
  int epochs = 20;
  int batch_size = 64;
  double lr_w = 0.02, lr_q = 0.02, lr_s = 0.02, lr_alpha = 0.02, lr_beta = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // weights only
  std::vector<double> lr_milestones = {0.5, 0.75};  // fractions of epochs
  double lr_drop = 10.0;
  std::uint64_t seed = 1;
  bool exempt_first_last = true;  // first/last weight layers at 8 bits
  std::string arch = "cnn";       // cnn | mlp
  std::string dataset = "synthetic";
  bool measure_huffman = true;
  int probe_batch = 0;  // unshuffled batch index used for all per-epoch probes

  void validate() const;  // throws std::invalid_argument
  std::string to_json() const;
  static TrainConfig from_json_file(const std::string& path);
};

enum class ParamKind { kWeightStep, kActStep, kWeightSharpness, kActSharpness };

// Layer-wise learning-rate scaling for the quantizer parameters.
double scaled_lr(ParamKind kind, double base_lr, std::int64_t weight_count,
                 std::int64_t act_count, int bits);

// Sets q/s from the mean absolute weight/activation of each layer (activations
// from an fp forward over the first batch) and alpha = beta = 500. Returns
// warnings for degenerate layers that fell back to step = 1/2^(b-1).
std::vector<std::string> init_quant_params(net::Model& model, const data::Dataset& train_set,
                                           int batch_size);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;  // mean per-sample objective term (ce + gamma*H(x))
  double test_acc = 0.0;
  double hw_bits_per_w = 0.0;  // entropy-model estimate, bits/weight
  double hx_bits_per_x = 0.0;
  double huff_w_bits = 0.0;  // codec-measured bits/weight (payload only)
  double huff_x_bits = 0.0;
  double objective = 0.0;  // J on the probe batch
};

struct WeightHistogram {
  int epoch = 0;
  // counts per grid index (sampled Q_p symbols), one vector per block
  std::vector<std::vector<std::int64_t>> per_layer_counts;
};

struct TrainResult {
  net::Model model;
  std::vector<EpochMetrics> history;
  std::vector<WeightHistogram> histograms;
  std::vector<std::string> warnings;
  bool aborted = false;
  std::string abort_reason;
  double final_test_acc() const { return history.empty() ? 0.0 : history.back().test_acc; }
};

// ---------------------------------------------------------------------------
// Observer hooks (communication simulation attaches here).
// ---------------------------------------------------------------------------

struct BoundaryCapture {
  int block = -1;
  std::int64_t width = 0;  // |x_l| per sample
  int batch = 0;           // samples in this step
  std::vector<std::int32_t> symbols;  // batch * width sampled Q_p indices
};

struct BatchEvent {
  int epoch = 0;
  int step_in_epoch = 0;
  std::int64_t global_step = 0;
  int batch_size = 0;
  net::Model* model = nullptr;  // mutable: coded weight sync is lossy by design
  const std::vector<BoundaryCapture>* captures = nullptr;
  std::uint64_t rng_salt = 0;
};

struct EpochEvent {
  int epoch = 0;
  int steps_in_epoch = 0;
  net::Model* model = nullptr;
  const EpochMetrics* metrics = nullptr;
  std::uint64_t rng_salt = 0;
};

class StepObserver {
 public:
  virtual ~StepObserver() = default;
  // Block indices whose post-relu activations should be captured.
  virtual std::vector<int> boundary_cuts() const { return {}; }
  virtual void on_batch(const BatchEvent&) {}
  virtual void on_epoch(const EpochEvent&) {}
};

// ---------------------------------------------------------------------------

// Runs Algorithm-style training. When out_dir is non-empty, writes
// metrics.csv (appended per epoch), metrics.json, model.ckpt, and on a
// non-finite abort a diagnostic snapshot. Identical config + seed reproduces
// identical files byte for byte.
TrainResult train(const data::Dataset& train_set, const data::Dataset& test_set,
                  const TrainConfig& cfg, const std::string& out_dir = "",
                  const std::vector<StepObserver*>& observers = {});

double evaluate_accuracy(const net::Model& model, const data::Dataset& test, net::Mode mode,
                         std::uint64_t eval_seed);

// J on the probe batch: lambda*H(w) + mean_sample(ce + gamma*H(x)).
double objective_probe(const net::Model& model, const data::Dataset& train_set,
                       const TrainConfig& cfg, std::uint64_t salt);

entropy::EntropyReport entropy_report_for(const net::Model& model,
                                          const data::Dataset& train_set,
                                          const TrainConfig& cfg, std::uint64_t salt);

struct SweepRow {
  double lambda = 0.0, gamma = 0.0;
  double final_acc = 0.0;
  double avg_bits_w = 0.0, avg_bits_x = 0.0;
};
std::vector<SweepRow> sweep(const data::Dataset& train_set, const data::Dataset& test_set,
                            const std::vector<TrainConfig>& configs,
                            const std::string& out_root = "");

}  // namespace cdl::train
