// cdl — entropy-constrained quantized training, compression, and
// communication-cost simulation. One subcommand per workflow; every command
// is deterministic given its flags and seed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdl/dataset.hpp"
#include "cdl/gradcheck.hpp"
#include "cdl/model_codec.hpp"
#include "cdl/net.hpp"
#include "cdl/parsim.hpp"
#include "cdl/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TrainFlags {
  cdl::train::TrainConfig cfg;
  std::string mode_str = "rcdl";
  std::string config_path;
  std::string out_dir = "run";
};

void add_train_flags(CLI::App* cmd, TrainFlags& tf) {
  cmd->add_option("--config", tf.config_path, "JSON config file; flags override its values");
  cmd->add_option("--mode", tf.mode_str, "fp | cdl | rcdl")->check(CLI::IsMember({"fp", "cdl", "rcdl"}));
  cmd->add_option("--lambda", tf.cfg.lambda, "weight-entropy coefficient")->check(CLI::NonNegativeNumber);
  cmd->add_option("--gamma", tf.cfg.gamma, "activation-entropy coefficient")->check(CLI::NonNegativeNumber);
  cmd->add_option("--bits", tf.cfg.bits, "quantization bit width b")->check(CLI::Range(1, 8));
  cmd->add_option("--epochs", tf.cfg.epochs)->check(CLI::PositiveNumber);
  cmd->add_option("--batch-size", tf.cfg.batch_size)->check(CLI::PositiveNumber);
  cmd->add_option("--lr-w", tf.cfg.lr_w);
  cmd->add_option("--lr-q", tf.cfg.lr_q);
  cmd->add_option("--lr-s", tf.cfg.lr_s);
  cmd->add_option("--lr-alpha", tf.cfg.lr_alpha);
  cmd->add_option("--lr-beta", tf.cfg.lr_beta);
  cmd->add_option("--momentum", tf.cfg.momentum);
  cmd->add_option("--weight-decay", tf.cfg.weight_decay);
  cmd->add_option("--seed", tf.cfg.seed);
  cmd->add_option("--arch", tf.cfg.arch, "cnn | mlp")->check(CLI::IsMember({"cnn", "mlp"}));
  cmd->add_option("--dataset", tf.cfg.dataset,
                  "synthetic[:train=N,test=N,classes=C,seed=S] or mnist[:dir]");
  cmd->add_flag("--no-exempt-first-last", [&tf](std::int64_t) { tf.cfg.exempt_first_last = false; },
                "quantize first/last layers at b bits instead of 8");
  cmd->add_flag("--no-huffman", [&tf](std::int64_t) { tf.cfg.measure_huffman = false; },
                "skip per-epoch Huffman measurement");
  cmd->add_option("--probe-batch", tf.cfg.probe_batch, "unshuffled batch index used for probes");
}

cdl::train::TrainConfig resolve_config(CLI::App* cmd, TrainFlags& tf) {
  cdl::train::TrainConfig cfg;
  if (!tf.config_path.empty()) cfg = cdl::train::TrainConfig::from_json_file(tf.config_path);
  // flags override file values only when explicitly given
  auto touched = [&](const std::string& name) { return cmd->count(name) > 0; };
  if (tf.config_path.empty()) cfg = tf.cfg;
  else {
    if (touched("--lambda")) cfg.lambda = tf.cfg.lambda;
    if (touched("--gamma")) cfg.gamma = tf.cfg.gamma;
    if (touched("--bits")) cfg.bits = tf.cfg.bits;
    if (touched("--epochs")) cfg.epochs = tf.cfg.epochs;
    if (touched("--batch-size")) cfg.batch_size = tf.cfg.batch_size;
    if (touched("--lr-w")) cfg.lr_w = tf.cfg.lr_w;
    if (touched("--lr-q")) cfg.lr_q = tf.cfg.lr_q;
    if (touched("--lr-s")) cfg.lr_s = tf.cfg.lr_s;
    if (touched("--lr-alpha")) cfg.lr_alpha = tf.cfg.lr_alpha;
    if (touched("--lr-beta")) cfg.lr_beta = tf.cfg.lr_beta;
    if (touched("--momentum")) cfg.momentum = tf.cfg.momentum;
    if (touched("--weight-decay")) cfg.weight_decay = tf.cfg.weight_decay;
    if (touched("--seed")) cfg.seed = tf.cfg.seed;
    if (touched("--arch")) cfg.arch = tf.cfg.arch;
    if (touched("--dataset")) cfg.dataset = tf.cfg.dataset;
    if (touched("--no-exempt-first-last")) cfg.exempt_first_last = false;
    if (touched("--no-huffman")) cfg.measure_huffman = false;
    if (touched("--probe-batch")) cfg.probe_batch = tf.cfg.probe_batch;
  }
  if (cmd->count("--mode") > 0 || tf.config_path.empty()) {
    const auto m = cdl::net::parse_mode(tf.mode_str);
    if (m) cfg.mode = *m;
  }
  cfg.validate();
  return cfg;
}

int run_train(TrainFlags& tf, CLI::App* cmd) {
  const cdl::train::TrainConfig cfg = resolve_config(cmd, tf);
  const cdl::data::DatasetPair ds = cdl::data::load_dataset(cfg.dataset);
  std::printf("dataset: %s  arch=%s mode=%s b=%d lambda=%g gamma=%g seed=%llu\n",
              ds.description.c_str(), cfg.arch.c_str(), cdl::net::mode_name(cfg.mode), cfg.bits,
              cfg.lambda, cfg.gamma, static_cast<unsigned long long>(cfg.seed));
  const cdl::train::TrainResult res = cdl::train::train(ds.train, ds.test, cfg, tf.out_dir);
  for (const std::string& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  if (res.aborted) {
    std::fprintf(stderr, "training aborted: %s (snapshot in %s)\n", res.abort_reason.c_str(),
                 tf.out_dir.c_str());
    return 1;
  }
  for (const auto& m : res.history)
    std::printf("epoch %3d  loss %.4f  acc %.4f  Hw %.3f  Hx %.3f  huffW %.3f  huffX %.3f  J %.4f\n",
                m.epoch, m.train_loss, m.test_acc, m.hw_bits_per_w, m.hx_bits_per_x,
                m.huff_w_bits, m.huff_x_bits, m.objective);
  std::printf("final accuracy %.4f; artifacts in %s\n", res.final_test_acc(), tf.out_dir.c_str());
  return 0;
}

int run_sweep(TrainFlags& tf, CLI::App* cmd, const std::string& pairs) {
  cdl::train::TrainConfig base = resolve_config(cmd, tf);
  std::vector<cdl::train::TrainConfig> cfgs;
  std::stringstream ss(pairs);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto colon = tok.find(':');
    if (colon == std::string::npos) throw CLI::ValidationError("--pairs", "expected l:g[,l:g...]");
    cdl::train::TrainConfig c = base;
    c.lambda = std::stod(tok.substr(0, colon));
    c.gamma = std::stod(tok.substr(colon + 1));
    c.validate();
    cfgs.push_back(c);
  }
  const cdl::data::DatasetPair ds = cdl::data::load_dataset(base.dataset);
  const auto rows = cdl::train::sweep(ds.train, ds.test, cfgs, tf.out_dir);
  fs::create_directories(tf.out_dir);
  std::ofstream os(tf.out_dir + "/sweep.csv", std::ios::trunc);
  os << "# schema=cdl.sweep schema_version=1\n";
  os << "lambda,gamma,final_acc,avg_bits_w,avg_bits_x\n";
  for (const auto& r : rows) {
    os << r.lambda << ',' << r.gamma << ',' << r.final_acc << ',' << r.avg_bits_w << ','
       << r.avg_bits_x << "\n";
    std::printf("lambda=%g gamma=%g acc=%.4f bits/w=%.3f bits/x=%.3f\n", r.lambda, r.gamma,
                r.final_acc, r.avg_bits_w, r.avg_bits_x);
  }
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& dataset, const std::string& mode_str,
             std::uint64_t seed) {
  const cdl::net::Model model = cdl::net::load_checkpoint(ckpt);
  const cdl::data::DatasetPair ds = cdl::data::load_dataset(dataset);
  const auto mode = cdl::net::parse_mode(mode_str);
  const double acc = cdl::train::evaluate_accuracy(model, ds.test, *mode, seed);
  std::printf("test accuracy: %.4f (%s, %s)\n", acc, mode_str.c_str(), ds.description.c_str());
  return 0;
}

int run_compress(const std::string& ckpt, const std::string& out, const std::string& dataset,
                 int batch, std::uint64_t seed) {
  const cdl::net::Model model = cdl::net::load_checkpoint(ckpt);
  const cdl::codec::CompressedModel cm = cdl::codec::compress_weights(model, seed);
  cdl::codec::save_compressed(cm, out);
  const cdl::data::DatasetPair ds = cdl::data::load_dataset(dataset);
  const cdl::codec::AvgBits ab = cdl::codec::avg_bits_metrics(
      model, ds.train, 0, static_cast<int>(std::min<std::int64_t>(batch, ds.train.count)), seed);
  std::printf("avg bits per weight: %.4f (payload), codebooks %llu bytes\n", ab.per_weight,
              static_cast<unsigned long long>(ab.weight_overhead_bytes));
  std::printf("avg bits per activation: %.4f (payload), codebooks %llu bytes\n",
              ab.per_activation, static_cast<unsigned long long>(ab.activation_overhead_bytes));
  std::printf("wrote %s (%llu payload bytes)\n", out.c_str(),
              static_cast<unsigned long long>(cm.total_payload_bytes()));
  return 0;
}

int run_verify(const std::string& path) {
  try {
    const cdl::codec::CompressedModel cm = cdl::codec::load_compressed(path);
    std::uint64_t bits = 0;
    std::int64_t syms = 0;
    for (std::size_t l = 0; l < cm.layers.size(); ++l) {
      const auto& L = cm.layers[l];
      const auto decoded =
          cdl::codec::decode_layer(L.payload.bytes, L.payload.bit_count, L.codebook, L.symbol_count);
      const cdl::codec::Payload re = cdl::codec::encode_layer(decoded, L.codebook);
      if (re.bit_count != L.payload.bit_count || re.bytes != L.payload.bytes) {
        std::fprintf(stderr, "verify: layer %zu (%s) re-encode mismatch\n", l, L.name.c_str());
        return 1;
      }
      bits += L.payload.bit_count;
      syms += L.symbol_count;
    }
    std::printf("verify OK: %zu layers, %lld symbols, avg %.4f bits/weight\n", cm.layers.size(),
                static_cast<long long>(syms),
                syms ? static_cast<double>(bits) / static_cast<double>(syms) : 0.0);
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "verify FAILED: %s\n", e.what());
    return 1;
  }
}

int run_gradcheck(const std::string& suites_csv, int instances, std::uint64_t seed, bool corrupt) {
  cdl::gradcheck::Options opt;
  opt.seed = seed;
  opt.instances = instances;
  opt.corrupt = corrupt;
  std::vector<std::string> names;
  if (suites_csv.empty() || suites_csv == "all") {
    names = cdl::gradcheck::suite_names();
  } else {
    std::stringstream ss(suites_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) names.push_back(tok);
  }
  const auto results = cdl::gradcheck::run_suites(names, opt);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-12s %-4s  max err %.3e  (tol %.0e, %lld checks)\n", r.name.c_str(),
                r.pass ? "PASS" : "FAIL", r.max_err, r.tolerance,
                static_cast<long long>(r.instances));
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

int run_parsim(TrainFlags& tf, CLI::App* cmd, const std::string& plan_mode, int workers,
               const std::string& policy_str, int cadence, const std::string& cuts_csv) {
  const cdl::train::TrainConfig cfg = resolve_config(cmd, tf);
  cdl::parsim::ParallelPlan plan;
  plan.mode = plan_mode == "pipeline" ? cdl::parsim::ParallelMode::kPipeline
                                      : cdl::parsim::ParallelMode::kDataParallel;
  plan.workers = workers;
  plan.sync_every_steps = cadence;
  if (policy_str == "fp64") plan.policy = cdl::parsim::PayloadPolicy::kRawFp64;
  else if (policy_str == "fixedb") plan.policy = cdl::parsim::PayloadPolicy::kRawFixedB;
  else plan.policy = cdl::parsim::PayloadPolicy::kHuffmanCoded;
  if (!cuts_csv.empty()) {
    std::stringstream ss(cuts_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) plan.stage_cuts.push_back(std::stoi(tok));
  }

  const cdl::data::DatasetPair ds = cdl::data::load_dataset(cfg.dataset);
  fs::create_directories(tf.out_dir);

  const int blocks = cfg.arch == "cnn" ? 4 : 2;
  plan.validate(blocks);
  std::unique_ptr<cdl::train::StepObserver> sim;
  const cdl::parsim::CommLedger* ledger = nullptr;
  if (plan.mode == cdl::parsim::ParallelMode::kDataParallel) {
    auto* dp = new cdl::parsim::DataParallelSim(plan, cfg.seed);
    ledger = &dp->ledger();
    sim.reset(dp);
  } else {
    auto* pp = new cdl::parsim::PipelineSim(plan, cfg.seed);
    ledger = &pp->ledger();
    sim.reset(pp);
  }

  const cdl::train::TrainResult res =
      cdl::train::train(ds.train, ds.test, cfg, tf.out_dir, {sim.get()});
  if (res.aborted) {
    std::fprintf(stderr, "training aborted: %s\n", res.abort_reason.c_str());
    return 1;
  }
  ledger->write_csv(tf.out_dir + "/comm_ledger.csv");
  ledger->write_json_summary(tf.out_dir + "/comm_summary.json");
  std::printf("communication total: %llu bytes over %zu events; ledger in %s\n",
              static_cast<unsigned long long>(ledger->cumulative_bytes), ledger->events.size(),
              tf.out_dir.c_str());
  for (const auto& [epoch, bytes] : ledger->per_epoch_bytes)
    std::printf("epoch %3d: %llu bytes\n", epoch, static_cast<unsigned long long>(bytes));
  return 0;
}

int run_export(const std::string& run_dir, const std::string& out_dir) {
  std::vector<fs::path> metric_files;
  const fs::path root(run_dir);
  if (fs::exists(root / "metrics.json")) metric_files.push_back(root / "metrics.json");
  if (fs::exists(root)) {
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "metrics.json"))
        metric_files.push_back(e.path() / "metrics.json");
  }
  if (metric_files.empty()) {
    std::fprintf(stderr,
                 "export-metrics: no metrics found under %s\n"
                 "expected %s/metrics.json (written by `cdl train --out %s`)\n"
                 "or per-run subdirectories <run>/metrics.json\n",
                 run_dir.c_str(), run_dir.c_str(), run_dir.c_str());
    return 1;
  }
  fs::create_directories(out_dir);

  std::ofstream frontier(out_dir + "/frontier.csv", std::ios::trunc);
  frontier << "# schema=cdl.frontier schema_version=1\n";
  frontier << "run,lambda,gamma,final_acc,huffman_w_bits,huffman_x_bits\n";
  std::ofstream bve(out_dir + "/bits_vs_epoch.csv", std::ios::trunc);
  bve << "# schema=cdl.bits_vs_epoch schema_version=1\n";
  bve << "run,epoch,H_w_bits_per_weight,H_x_bits_per_activation,huffman_w_bits,huffman_x_bits\n";
  std::ofstream ove(out_dir + "/objective_vs_epoch.csv", std::ios::trunc);
  ove << "# schema=cdl.objective_vs_epoch schema_version=1\n";
  ove << "run,epoch,objective\n";
  std::ofstream hist(out_dir + "/weight_histograms.csv", std::ios::trunc);
  hist << "# schema=cdl.weight_histograms schema_version=1\n";
  hist << "run,epoch,layer,bin,count\n";

  for (const fs::path& mf : metric_files) {
    std::ifstream is(mf);
    json j = json::parse(is);
    if (j.value("schema_version", 1) > 1) {
      std::fprintf(stderr, "export-metrics: %s has unsupported schema_version\n", mf.c_str());
      return 1;
    }
    const std::string run = mf.parent_path().filename().string();
    const auto& cfg = j["config"];
    const auto& epochs = j["epochs"];
    if (!epochs.empty()) {
      const auto& last = epochs.back();
      frontier << run << ',' << cfg.value("lambda", 0.0) << ',' << cfg.value("gamma", 0.0) << ','
               << last.value("test_acc", 0.0) << ',' << last.value("huffman_w_bits", 0.0) << ','
               << last.value("huffman_x_bits", 0.0) << "\n";
    }
    for (const auto& e : epochs) {
      bve << run << ',' << e.value("epoch", 0) << ',' << e.value("H_w_bits_per_weight", 0.0)
          << ',' << e.value("H_x_bits_per_activation", 0.0) << ','
          << e.value("huffman_w_bits", 0.0) << ',' << e.value("huffman_x_bits", 0.0) << "\n";
      ove << run << ',' << e.value("epoch", 0) << ',' << e.value("objective", 0.0) << "\n";
    }
    for (const auto& wh : j.value("weight_histograms", json::array())) {
      const int epoch = wh.value("epoch", 0);
      const auto& layers = wh["per_layer_counts"];
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& counts = layers[l];
        for (std::size_t b = 0; b < counts.size(); ++b)
          hist << run << ',' << epoch << ',' << l << ',' << b << ','
               << counts[b].get<std::int64_t>() << "\n";
      }
    }
  }
  std::printf("exported %zu run(s) to %s\n", metric_files.size(), out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coded quantized training and compression toolkit"};
  app.require_subcommand(1);

  TrainFlags tf_train, tf_sweep, tf_parsim;
  std::string pairs = "0:0";

  CLI::App* c_train = app.add_subcommand("train", "train a model and write metrics + checkpoint");
  add_train_flags(c_train, tf_train);
  c_train->add_option("--out", tf_train.out_dir, "output directory");

  CLI::App* c_sweep = app.add_subcommand("sweep", "train over (lambda,gamma) pairs");
  add_train_flags(c_sweep, tf_sweep);
  c_sweep->add_option("--out", tf_sweep.out_dir, "output directory");
  c_sweep->add_option("--pairs", pairs, "comma list of lambda:gamma pairs");

  std::string ckpt, dataset = "synthetic", mode_str = "rcdl", cm_path = "model.cdlc";
  std::uint64_t seed = 0xC0DEC;
  int batch = 64;
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  c_eval->add_option("--checkpoint", ckpt)->required();
  c_eval->add_option("--dataset", dataset);
  c_eval->add_option("--mode", mode_str)->check(CLI::IsMember({"fp", "cdl", "rcdl"}));
  c_eval->add_option("--seed", seed);

  std::string cp_ckpt, cp_out = "model.cdlc", cp_dataset = "synthetic";
  std::uint64_t cp_seed = 0xC0DEC;
  CLI::App* c_compress = app.add_subcommand("compress", "entropy-code a checkpoint's weights");
  c_compress->add_option("--checkpoint", cp_ckpt)->required();
  c_compress->add_option("--out", cp_out);
  c_compress->add_option("--dataset", cp_dataset, "dataset for the activation-bits metric");
  c_compress->add_option("--batch", batch, "mini-batch size for the activation metric");
  c_compress->add_option("--seed", cp_seed, "sampling seed for Q_p draws");

  CLI::App* c_verify = app.add_subcommand("verify", "decode and checksum a compressed model");
  c_verify->add_option("--file", cm_path)->required();

  std::string suites = "all";
  int instances = 1000;
  std::uint64_t gc_seed = 42;
  bool corrupt = false;
  CLI::App* c_gc = app.add_subcommand("gradcheck", "finite-difference derivative suites");
  c_gc->add_option("--suites", suites, "comma list: prop1,dtheta,dstep,dsharpness,entropy,rcdl");
  c_gc->add_option("--instances", instances)->check(CLI::PositiveNumber);
  c_gc->add_option("--seed", gc_seed);
  c_gc->add_flag("--corrupt-derivative", corrupt,
                 "test hook: perturb analytic values to prove the harness detects errors");

  std::string plan_mode = "data", policy = "huffman", cuts;
  int workers = 2, cadence = 0;
  CLI::App* c_parsim = app.add_subcommand("parsim", "simulate parallel-training communication");
  add_train_flags(c_parsim, tf_parsim);
  c_parsim->add_option("--out", tf_parsim.out_dir, "output directory");
  c_parsim->add_option("--plan-mode", plan_mode)->check(CLI::IsMember({"data", "pipeline"}));
  c_parsim->add_option("--workers", workers, "workers (data) or stages (pipeline)");
  c_parsim->add_option("--policy", policy)->check(CLI::IsMember({"fp64", "fixedb", "huffman"}));
  c_parsim->add_option("--cadence", cadence, "sync every N steps (0 = per epoch)");
  c_parsim->add_option("--cuts", cuts, "pipeline stage cuts, comma list of layer indices");

  std::string run_dir, export_out = "export";
  CLI::App* c_export = app.add_subcommand("export-metrics", "plot-ready CSVs from run outputs");
  c_export->add_option("--run", run_dir)->required();
  c_export->add_option("--out", export_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_train->parsed()) return run_train(tf_train, c_train);
    if (c_sweep->parsed()) return run_sweep(tf_sweep, c_sweep, pairs);
    if (c_eval->parsed()) return run_eval(ckpt, dataset, mode_str, seed);
    if (c_compress->parsed()) return run_compress(cp_ckpt, cp_out, cp_dataset, batch, cp_seed);
    if (c_verify->parsed()) return run_verify(cm_path);
    if (c_gc->parsed()) return run_gradcheck(suites, instances, gc_seed, corrupt);
    if (c_parsim->parsed())
      return run_parsim(tf_parsim, c_parsim, plan_mode, workers, policy, cadence, cuts);
    if (c_export->parsed()) return run_export(run_dir, export_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
