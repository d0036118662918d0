#include "cdl/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "cdl/model_codec.hpp"

namespace cdl::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (lambda < 0.0 || gamma < 0.0)
    throw std::invalid_argument("config: lambda and gamma must be >= 0");
  if (bits < 1 || bits > 8) throw std::invalid_argument("config: bits must be in [1,8]");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  for (double lr : {lr_w, lr_q, lr_s, lr_alpha, lr_beta})
    if (!(lr >= 0.0)) throw std::invalid_argument("config: learning rates must be >= 0");
  if (arch != "cnn" && arch != "mlp") throw std::invalid_argument("config: arch must be cnn or mlp");
}

std::string TrainConfig::to_json() const {
  json j;
  j["schema"] = "cdl.train_config";
  j["schema_version"] = 1;
  j["mode"] = net::mode_name(mode);
  j["lambda"] = lambda;
  j["gamma"] = gamma;
  j["bits"] = bits;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr_w"] = lr_w;
  j["lr_q"] = lr_q;
  j["lr_s"] = lr_s;
  j["lr_alpha"] = lr_alpha;
  j["lr_beta"] = lr_beta;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["lr_milestones"] = lr_milestones;
  j["lr_drop"] = lr_drop;
  j["seed"] = seed;
  j["exempt_first_last"] = exempt_first_last;
  j["arch"] = arch;
  j["dataset"] = dataset;
  j["measure_huffman"] = measure_huffman;
  j["probe_batch"] = probe_batch;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  json j = json::parse(is);
  if (j.contains("schema_version") && j["schema_version"].get<int>() > 1)
    throw std::runtime_error("config: unsupported schema_version");
  TrainConfig c;
  if (j.contains("mode")) {
    const auto m = net::parse_mode(j["mode"].get<std::string>());
    if (!m) throw std::runtime_error("config: bad mode");
    c.mode = *m;
  }
  auto load = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j[k].get<std::decay_t<decltype(field)>>();
  };
  load("lambda", c.lambda);
  load("gamma", c.gamma);
  load("bits", c.bits);
  load("epochs", c.epochs);
  load("batch_size", c.batch_size);
  load("lr_w", c.lr_w);
  load("lr_q", c.lr_q);
  load("lr_s", c.lr_s);
  load("lr_alpha", c.lr_alpha);
  load("lr_beta", c.lr_beta);
  load("momentum", c.momentum);
  load("weight_decay", c.weight_decay);
  load("lr_milestones", c.lr_milestones);
  load("lr_drop", c.lr_drop);
  load("seed", c.seed);
  load("exempt_first_last", c.exempt_first_last);
  load("arch", c.arch);
  load("dataset", c.dataset);
  load("measure_huffman", c.measure_huffman);
  load("probe_batch", c.probe_batch);
  c.validate();
  return c;
}

double scaled_lr(ParamKind kind, double base_lr, std::int64_t weight_count,
                 std::int64_t act_count, int bits) {
  switch (kind) {
    case ParamKind::kWeightStep:
      return base_lr / std::sqrt(static_cast<double>(weight_count) * std::pow(2.0, bits - 1));
    case ParamKind::kActStep:
      return base_lr / std::sqrt(static_cast<double>(act_count) * std::pow(2.0, bits));
    case ParamKind::kWeightSharpness:
      return base_lr / std::sqrt(static_cast<double>(weight_count));
    case ParamKind::kActSharpness:
      return base_lr / std::sqrt(static_cast<double>(act_count));
  }
  return base_lr;
}

std::vector<std::string> init_quant_params(net::Model& model, const data::Dataset& train_set,
                                           int batch_size) {
  std::vector<std::string> warnings;
  const int nb = static_cast<int>(std::min<std::int64_t>(batch_size, train_set.count));

  // mean |x_l| per block from an fp forward over the first batch
  std::vector<double> act_sum(model.blocks.size(), 0.0);
  std::vector<std::int64_t> act_n(model.blocks.size(), 0);
  net::Tensor x;
  for (int i = 0; i < nb; ++i) {
    train_set.fill_sample(i, x);
    const net::ForwardTrace tr = net::forward(model, x, -1, net::Mode::kFp, nullptr, 0.0, nullptr);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      const int rn = model.blocks[l].relu_node;
      if (rn < 0) continue;
      for (double v : tr.node_out[static_cast<std::size_t>(rn)].data) {
        act_sum[l] += std::abs(v);
        ++act_n[l];
      }
    }
  }

  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    net::LayerQuantParams& p = model.qp[l];
    const auto& w = model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
    double wsum = 0.0;
    for (double v : w) wsum += std::abs(v);
    const double wmean = wsum / static_cast<double>(w.size());
    if (wmean > 0.0) {
      p.q = 2.0 * wmean / std::sqrt(std::pow(2.0, p.weight_bits - 1));
    } else {
      p.q = 1.0 / std::pow(2.0, p.weight_bits - 1);
      warnings.push_back(model.blocks[l].name + ": all-zero weights, fallback step");
    }
    if (model.blocks[l].relu_node >= 0) {
      const double xmean = act_n[l] > 0 ? act_sum[l] / static_cast<double>(act_n[l]) : 0.0;
      if (xmean > 0.0) {
        p.s = 2.0 * xmean / std::sqrt(std::pow(2.0, p.act_bits - 1));
      } else {
        p.s = 1.0 / std::pow(2.0, p.act_bits - 1);
        warnings.push_back(model.blocks[l].name + ": zero activations, fallback step");
      }
    }
    p.alpha = 500.0;
    p.beta = 500.0;
  }
  return warnings;
}

// ---------------------------------------------------------------------------

namespace {

struct OptState {
  std::vector<std::vector<double>> vw;
  std::vector<double> vq, vs, valpha, vbeta;  // momenta on log-space parameters

  void init_like(const net::Model& m) {
    vw.resize(m.blocks.size());
    for (std::size_t l = 0; l < m.blocks.size(); ++l)
      vw[l].assign(static_cast<std::size_t>(m.blocks[l].weight_count), 0.0);
    vq.assign(m.blocks.size(), 0.0);
    vs.assign(m.blocks.size(), 0.0);
    valpha.assign(m.blocks.size(), 0.0);
    vbeta.assign(m.blocks.size(), 0.0);
  }
};

double lr_factor(const TrainConfig& cfg, int epoch) {
  double f = 1.0;
  for (double ms : cfg.lr_milestones)
    if (epoch > ms * cfg.epochs) f /= cfg.lr_drop;
  return f;
}

// One SGD + momentum step. The quantizer parameters live in log space so the
// unconstrained update preserves positivity; gradients are chain-ruled
// through the exp.
void apply_update(net::Model& model, const net::ParamGrads& g, OptState& opt,
                  const TrainConfig& cfg, double fac) {
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    auto& w = model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
    auto& vw = opt.vw[l];
    const double lrw = cfg.lr_w * fac;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double grad = g.w[l][i] + cfg.weight_decay * w[i];
      vw[i] = cfg.momentum * vw[i] + grad;
      w[i] -= lrw * vw[i];
    }

    net::LayerQuantParams& p = model.qp[l];
    const std::int64_t nw = model.blocks[l].weight_count;
    const std::int64_t nx = model.blocks[l].act_count;

    auto log_step = [&](double& param, double grad_param, double& vel, double lr) {
      const double gu = grad_param * param;  // d/d(ln p) = p * d/dp
      vel = cfg.momentum * vel + gu;
      param = std::exp(std::log(param) - lr * fac * vel);
    };
    log_step(p.q, g.q[l], opt.vq[l],
             scaled_lr(ParamKind::kWeightStep, cfg.lr_q, nw, nx, p.weight_bits));
    log_step(p.alpha, g.alpha[l], opt.valpha[l],
             scaled_lr(ParamKind::kWeightSharpness, cfg.lr_alpha, nw, nx, p.weight_bits));
    if (nx > 0) {
      log_step(p.s, g.s[l], opt.vs[l],
               scaled_lr(ParamKind::kActStep, cfg.lr_s, nw, nx, p.act_bits));
      log_step(p.beta, g.beta[l], opt.vbeta[l],
               scaled_lr(ParamKind::kActSharpness, cfg.lr_beta, nw, nx, p.act_bits));
    }
  }
}

void add_weight_entropy_grads(const net::Model& model, double lambda, net::ParamGrads& g) {
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& w = model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
    const entropy::PenaltyGrads pg = entropy::entropy_penalty_gradients(
        w, model.weight_grid(static_cast<int>(l)), model.qp[l].alpha, /*topk=*/0);
    for (std::size_t i = 0; i < w.size(); ++i) g.w[l][i] += lambda * pg.d_values[i];
    g.q[l] += lambda * pg.d_step;
    g.alpha[l] += lambda * pg.d_sharpness;
  }
}

double weight_entropy_bits(const net::Model& model) {
  double total = 0.0;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& w = model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
    const entropy::Mpmf m =
        entropy::layer_mpmf(w, model.weight_grid(static_cast<int>(l)), model.qp[l].alpha);
    total += entropy::shannon_entropy_bits(m) * static_cast<double>(w.size());
  }
  return total;
}

class MetricsWriter {
 public:
  MetricsWriter(const std::string& dir, const TrainConfig& cfg) : dir_(dir), cfg_(cfg) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_);
    csv_.open(dir_ + "/metrics.csv", std::ios::trunc);
    csv_ << "# schema=cdl.metrics schema_version=1\n";
    csv_ << "epoch,train_loss,test_acc,H_w_bits_per_weight,H_x_bits_per_activation,"
            "huffman_w_bits,huffman_x_bits,objective\n";
    csv_.flush();
  }

  void epoch(const EpochMetrics& m) {
    if (dir_.empty()) return;
    char line[512];
    std::snprintf(line, sizeof(line), "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", m.epoch,
                  m.train_loss, m.test_acc, m.hw_bits_per_w, m.hx_bits_per_x, m.huff_w_bits,
                  m.huff_x_bits, m.objective);
    csv_ << line;
    csv_.flush();
  }

  void finalize(const TrainResult& res) {
    if (dir_.empty()) return;
    json j;
    j["schema"] = "cdl.metrics";
    j["schema_version"] = 1;
    j["config"] = json::parse(cfg_.to_json());
    j["aborted"] = res.aborted;
    j["abort_reason"] = res.abort_reason;
    j["warnings"] = res.warnings;
    auto hist = json::array();
    for (const EpochMetrics& m : res.history) {
      hist.push_back({{"epoch", m.epoch},
                      {"train_loss", m.train_loss},
                      {"test_acc", m.test_acc},
                      {"H_w_bits_per_weight", m.hw_bits_per_w},
                      {"H_x_bits_per_activation", m.hx_bits_per_x},
                      {"huffman_w_bits", m.huff_w_bits},
                      {"huffman_x_bits", m.huff_x_bits},
                      {"objective", m.objective}});
    }
    j["epochs"] = hist;
    auto hists = json::array();
    for (const WeightHistogram& wh : res.histograms) {
      json h;
      h["epoch"] = wh.epoch;
      h["per_layer_counts"] = wh.per_layer_counts;
      hists.push_back(h);
    }
    j["weight_histograms"] = hists;
    std::ofstream os(dir_ + "/metrics.json", std::ios::trunc);
    os << j.dump(2) << "\n";
  }

 private:
  std::string dir_;
  TrainConfig cfg_;
  std::ofstream csv_;
};

}  // namespace

double evaluate_accuracy(const net::Model& model, const data::Dataset& test, net::Mode mode,
                         std::uint64_t eval_seed) {
  std::vector<net::WeightQuantOp> wq;
  if (mode != net::Mode::kFp) {
    Rng wrng(Rng::mix({eval_seed, 0x657761u}));
    wq = net::quantize_weights(model, mode, &wrng);
  }
  std::int64_t correct = 0;
  net::Tensor x;
  for (std::int64_t i = 0; i < test.count; ++i) {
    test.fill_sample(i, x);
    Rng arng(Rng::mix({eval_seed, 0x6561u, static_cast<std::uint64_t>(i)}));
    const net::ForwardTrace tr = net::forward(model, x, -1, mode,
                                              mode == net::Mode::kFp ? nullptr : &wq, 0.0,
                                              mode == net::Mode::kCdl ? &arng : nullptr);
    if (net::argmax(tr.logits().data) == test.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.count);
}

double objective_probe(const net::Model& model, const data::Dataset& train_set,
                       const TrainConfig& cfg, std::uint64_t salt) {
  const std::int64_t first =
      std::min<std::int64_t>(static_cast<std::int64_t>(cfg.probe_batch) * cfg.batch_size,
                             std::max<std::int64_t>(0, train_set.count - cfg.batch_size));
  const int count = static_cast<int>(std::min<std::int64_t>(cfg.batch_size, train_set.count));

  std::vector<net::WeightQuantOp> wq;
  if (cfg.mode != net::Mode::kFp) {
    Rng wrng(Rng::mix({cfg.seed, 0x70726f62u, salt}));
    wq = net::quantize_weights(model, cfg.mode, &wrng);
  }
  double acc = 0.0;
  net::Tensor x;
  for (int i = 0; i < count; ++i) {
    train_set.fill_sample(first + i, x);
    Rng arng(Rng::mix({cfg.seed, 0x70726fu, salt, static_cast<std::uint64_t>(i)}));
    const net::ForwardTrace tr = net::forward(
        model, x, train_set.labels[static_cast<std::size_t>(first + i)], cfg.mode,
        cfg.mode == net::Mode::kFp ? nullptr : &wq, cfg.gamma,
        cfg.mode == net::Mode::kCdl ? &arng : nullptr);
    acc += tr.loss_total;
  }
  acc /= count;
  if (cfg.lambda > 0.0) acc += cfg.lambda * weight_entropy_bits(model);
  return acc;
}

entropy::EntropyReport entropy_report_for(const net::Model& model,
                                          const data::Dataset& train_set,
                                          const TrainConfig& cfg, std::uint64_t salt) {
  std::vector<entropy::WeightLayerView> wviews;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& w = model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
    wviews.push_back({std::span<const double>(w), model.weight_grid(static_cast<int>(l)),
                      model.qp[l].alpha, model.blocks[l].name});
  }

  const std::int64_t first =
      std::min<std::int64_t>(static_cast<std::int64_t>(cfg.probe_batch) * cfg.batch_size,
                             std::max<std::int64_t>(0, train_set.count - cfg.batch_size));
  const int count = static_cast<int>(std::min<std::int64_t>(cfg.batch_size, train_set.count));
  const net::Mode mode = cfg.mode == net::Mode::kFp ? net::Mode::kRcdl : cfg.mode;

  std::vector<entropy::ActivationLayerStats> astats;
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    if (model.blocks[l].relu_node < 0) continue;
    entropy::ActivationLayerStats st;
    st.size = model.blocks[l].act_count;
    st.name = model.blocks[l].name;
    astats.push_back(std::move(st));
  }

  std::vector<net::WeightQuantOp> wq;
  Rng wrng(Rng::mix({cfg.seed, 0x656e74u, salt}));
  wq = net::quantize_weights(model, mode, &wrng);
  net::Tensor x;
  for (int i = 0; i < count; ++i) {
    train_set.fill_sample(first + i, x);
    Rng arng(Rng::mix({cfg.seed, 0x656e74u, salt, static_cast<std::uint64_t>(i)}));
    const net::ForwardTrace tr = net::forward(model, x, -1, mode, &wq, 0.0,
                                              mode == net::Mode::kCdl ? &arng : nullptr,
                                              /*track_entropy=*/true);
    std::size_t ai = 0;
    for (std::size_t n = 0; n < tr.act.size(); ++n) {
      const net::ActTrace& at = tr.act[n];
      if (at.block < 0) continue;
      astats[ai].per_sample_entropy_bits.push_back(
          at.entropy_bits_total / static_cast<double>(at.pre.size()));
      ++ai;
    }
  }
  return entropy::entropy_report(wviews, astats);
}

TrainResult train(const data::Dataset& train_set, const data::Dataset& test_set,
                  const TrainConfig& cfg, const std::string& out_dir,
                  const std::vector<StepObserver*>& observers) {
  cfg.validate();
  if (train_set.count < 1) throw std::invalid_argument("train: empty dataset");

  TrainResult res;
  Rng init_rng(Rng::mix({cfg.seed, 0x696e6974u}));
  const net::Shape in_shape = train_set.sample_shape();
  if (cfg.arch == "cnn") {
    res.model = net::make_cnn(in_shape, train_set.classes, cfg.bits, cfg.exempt_first_last,
                              init_rng);
  } else {
    res.model = net::make_mlp(in_shape, {128}, train_set.classes, cfg.bits,
                              cfg.exempt_first_last, init_rng);
  }
  res.warnings = init_quant_params(res.model, train_set, cfg.batch_size);

  OptState opt;
  opt.init_like(res.model);
  MetricsWriter writer(out_dir, cfg);

  std::vector<int> cuts;
  for (StepObserver* ob : observers)
    for (int c : ob->boundary_cuts()) cuts.push_back(c);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  const std::int64_t n = train_set.count;
  const int steps = static_cast<int>((n + cfg.batch_size - 1) / cfg.batch_size);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  net::ParamGrads grads;
  grads.init_like(res.model);
  std::int64_t global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // deterministic shuffle
    {
      Rng srng(Rng::mix({cfg.seed, 0x73687566u, static_cast<std::uint64_t>(epoch)}));
      for (std::int64_t i = n - 1; i > 0; --i) {
        const std::int64_t j = static_cast<std::int64_t>(srng.next_u64() %
                                                         static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
      }
    }
    const double fac = lr_factor(cfg, epoch);
    double loss_sum = 0.0;
    std::int64_t loss_n = 0;

    try {
      for (int step = 0; step < steps; ++step) {
        const std::int64_t lo = static_cast<std::int64_t>(step) * cfg.batch_size;
        const std::int64_t hi = std::min<std::int64_t>(lo + cfg.batch_size, n);
        const int bsz = static_cast<int>(hi - lo);

        Rng wrng(Rng::mix({cfg.seed, 0x7771u, static_cast<std::uint64_t>(epoch),
                           static_cast<std::uint64_t>(step)}));
        const auto wq = net::quantize_weights(res.model, cfg.mode,
                                              cfg.mode == net::Mode::kCdl ? &wrng : nullptr);

        for (auto& wl : grads.w) std::fill(wl.begin(), wl.end(), 0.0);
        std::fill(grads.q.begin(), grads.q.end(), 0.0);
        std::fill(grads.s.begin(), grads.s.end(), 0.0);
        std::fill(grads.alpha.begin(), grads.alpha.end(), 0.0);
        std::fill(grads.beta.begin(), grads.beta.end(), 0.0);

        std::vector<BoundaryCapture> captures;
        for (int c : cuts) {
          BoundaryCapture bc;
          bc.block = c;
          bc.width = res.model.blocks[static_cast<std::size_t>(c)].act_count;
          bc.batch = bsz;
          bc.symbols.reserve(static_cast<std::size_t>(bc.width) * bsz);
          captures.push_back(std::move(bc));
        }

        net::Tensor x;
        const double inv_b = 1.0 / bsz;
        for (int k = 0; k < bsz; ++k) {
          const std::int64_t idx = order[static_cast<std::size_t>(lo + k)];
          train_set.fill_sample(idx, x);
          Rng arng(Rng::mix({cfg.seed, 0x6163u, static_cast<std::uint64_t>(epoch),
                             static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(k)}));
          const net::ForwardTrace tr = net::forward(
              res.model, x, train_set.labels[static_cast<std::size_t>(idx)], cfg.mode,
              cfg.mode == net::Mode::kFp ? nullptr : &wq, cfg.gamma,
              cfg.mode == net::Mode::kCdl ? &arng : nullptr);
          const net::ParamGrads bg =
              net::backward(tr, res.model, cfg.mode == net::Mode::kFp ? nullptr : &wq, cfg.gamma);
          grads.add_scaled(bg, inv_b);
          loss_sum += tr.loss_total;
          ++loss_n;

          // boundary captures for the parallelism ledger
          for (BoundaryCapture& bc : captures) {
            const int rn = res.model.blocks[static_cast<std::size_t>(bc.block)].relu_node;
            const net::ActTrace& at = tr.act[static_cast<std::size_t>(rn)];
            if (!at.symbols.empty()) {
              for (std::int16_t s : at.symbols) bc.symbols.push_back(s);
            } else {
              // sampled draw of the boundary activations (rcdl/fp paths)
              const quant::QuantGrid grid = res.model.act_grid(bc.block);
              const double beta = res.model.qp[static_cast<std::size_t>(bc.block)].beta;
              const int kw = std::min({res.model.topk, grid.size(), net::kMaxActWindow});
              Rng crng(Rng::mix({cfg.seed, 0x636170u, static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(k),
                                 static_cast<std::uint64_t>(bc.block)}));
              const std::vector<double>& pre =
                  at.pre.empty() ? tr.node_out[static_cast<std::size_t>(rn)].data : at.pre;
              double probs[net::kMaxActWindow];
              for (double a : pre) {
                const int firsti = quant::topk_support_first(a, grid, kw);
                quant::softmax_window(a, grid, beta, firsti, kw, probs);
                bc.symbols.push_back(quant::sample_window_index(probs, firsti, kw, crng));
              }
            }
          }
        }

        if (cfg.lambda > 0.0) add_weight_entropy_grads(res.model, cfg.lambda, grads);
        apply_update(res.model, grads, opt, cfg, fac);
        ++global_step;

        if (!observers.empty()) {
          BatchEvent ev;
          ev.epoch = epoch;
          ev.step_in_epoch = step;
          ev.global_step = global_step;
          ev.batch_size = bsz;
          ev.model = &res.model;
          ev.captures = &captures;
          ev.rng_salt = Rng::mix({cfg.seed, 0x6576u, static_cast<std::uint64_t>(global_step)});
          for (StepObserver* ob : observers) ob->on_batch(ev);
        }
      }
    } catch (const std::runtime_error& e) {
      res.aborted = true;
      res.abort_reason = e.what();
      if (!out_dir.empty()) net::save_checkpoint(res.model, out_dir + "/abort_snapshot.ckpt");
      writer.finalize(res);
      return res;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : 0.0;
    m.test_acc = evaluate_accuracy(res.model, test_set, cfg.mode,
                                   Rng::mix({cfg.seed, 0x6576616cu, static_cast<std::uint64_t>(epoch)}));
    const entropy::EntropyReport er =
        entropy_report_for(res.model, train_set, cfg, static_cast<std::uint64_t>(epoch));
    {
      double wtot = 0.0, xtot = 0.0;
      std::int64_t wn = 0, xn = 0;
      for (std::size_t l = 0; l < res.model.blocks.size(); ++l) wn += res.model.blocks[l].weight_count;
      for (std::size_t l = 0; l < res.model.blocks.size(); ++l) xn += res.model.blocks[l].act_count;
      wtot = er.total_weight_bits;
      xtot = er.total_activation_bits;
      m.hw_bits_per_w = wn > 0 ? wtot / static_cast<double>(wn) : 0.0;
      m.hx_bits_per_x = xn > 0 ? xtot / static_cast<double>(xn) : 0.0;
    }
    if (cfg.measure_huffman) {
      const std::int64_t first =
          std::min<std::int64_t>(static_cast<std::int64_t>(cfg.probe_batch) * cfg.batch_size,
                                 std::max<std::int64_t>(0, train_set.count - cfg.batch_size));
      const int count = static_cast<int>(std::min<std::int64_t>(cfg.batch_size, train_set.count));
      const codec::AvgBits ab = codec::avg_bits_metrics(
          res.model, train_set, first, count,
          Rng::mix({cfg.seed, 0x68756666u, static_cast<std::uint64_t>(epoch)}));
      m.huff_w_bits = ab.per_weight;
      m.huff_x_bits = ab.per_activation;
    }
    m.objective = objective_probe(res.model, train_set, cfg, static_cast<std::uint64_t>(epoch));
    res.history.push_back(m);

    WeightHistogram wh;
    wh.epoch = epoch;
    const auto syms = codec::sample_weight_symbols(
        res.model, Rng::mix({cfg.seed, 0x68697374u, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t l = 0; l < syms.size(); ++l) {
      const quant::QuantGrid grid = res.model.weight_grid(static_cast<int>(l));
      std::vector<std::int64_t> counts(static_cast<std::size_t>(grid.size()), 0);
      for (std::int32_t s : syms[l]) ++counts[static_cast<std::size_t>(s - grid.min_index())];
      wh.per_layer_counts.push_back(std::move(counts));
    }
    res.histograms.push_back(std::move(wh));

    writer.epoch(m);
    if (!observers.empty()) {
      EpochEvent ev;
      ev.epoch = epoch;
      ev.steps_in_epoch = steps;
      ev.model = &res.model;
      ev.metrics = &res.history.back();
      ev.rng_salt = Rng::mix({cfg.seed, 0x65706576u, static_cast<std::uint64_t>(epoch)});
      for (StepObserver* ob : observers) ob->on_epoch(ev);
    }
  }

  writer.finalize(res);
  if (!out_dir.empty()) {
    net::save_checkpoint(res.model, out_dir + "/model.ckpt");
    const entropy::EntropyReport er =
        entropy_report_for(res.model, train_set, cfg, static_cast<std::uint64_t>(cfg.epochs));
    std::ofstream os(out_dir + "/entropy_report.json", std::ios::trunc);
    os << er.to_json() << "\n";
  }
  return res;
}

std::vector<SweepRow> sweep(const data::Dataset& train_set, const data::Dataset& test_set,
                            const std::vector<TrainConfig>& configs,
                            const std::string& out_root) {
  std::vector<SweepRow> rows;
  int idx = 0;
  for (const TrainConfig& cfg : configs) {
    std::string dir;
    if (!out_root.empty()) dir = out_root + "/run" + std::to_string(idx);
    const TrainResult r = train(train_set, test_set, cfg, dir);
    if (r.aborted) throw std::runtime_error("sweep: run aborted: " + r.abort_reason);
    SweepRow row;
    row.lambda = cfg.lambda;
    row.gamma = cfg.gamma;
    row.final_acc = r.final_test_acc();
    const codec::AvgBits ab = codec::avg_bits_metrics(
        r.model, train_set, 0, static_cast<int>(std::min<std::int64_t>(cfg.batch_size, train_set.count)),
        Rng::mix({cfg.seed, 0x7377u}));
    row.avg_bits_w = ab.per_weight;
    row.avg_bits_x = ab.per_activation;
    rows.push_back(row);
    ++idx;
  }
  return rows;
}

}  // namespace cdl::train
