#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cdl/dataset.hpp"
#include "cdl/train.hpp"
#include "oracles.hpp"

using namespace cdl;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

data::DatasetPair tiny_data(std::int64_t train = 600, std::int64_t test = 200) {
  return data::load_dataset("synthetic:train=" + std::to_string(train) +
                            ",test=" + std::to_string(test));
}

train::TrainConfig quick_cfg() {
  train::TrainConfig cfg;
  cfg.mode = net::Mode::kRcdl;
  cfg.bits = 4;
  cfg.epochs = 2;
  cfg.batch_size = 50;
  cfg.seed = 11;
  cfg.measure_huffman = false;
  return cfg;
}

}  // namespace

TEST_SUITE("train.init") {
  TEST_CASE("unit-magnitude weights at b=4 give q0 = 2/sqrt(8)") {
    Rng rng(1);
    net::Model m = net::make_mlp({4, 1, 1}, {6}, 3, 4, false, rng);
    for (std::size_t l = 0; l < 2; ++l) {
      auto& w = m.layers[static_cast<std::size_t>(m.blocks[l].weight_node)].weights.data;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i % 2) ? 1.0 : -1.0;
    }
    // the 4-input mlp takes a hand-built 2x2 batch; varied pixels keep the
    // relu outputs of the alternating-sign rows away from zero
    data::Dataset tiny;
    tiny.rows = 2;
    tiny.cols = 2;
    tiny.classes = 3;
    tiny.count = 4;
    tiny.images = {0.1f, 0.7f, 0.4f, 0.9f, 0.2f, 0.8f, 0.3f, 0.6f,
                   0.0f, 0.5f, 0.1f, 0.9f, 0.3f, 0.7f, 0.2f, 0.8f};
    tiny.labels.assign(4, 0);
    const auto warnings = train::init_quant_params(m, tiny, 4);
    CHECK(warnings.empty());
    CHECK(m.qp[0].q == doctest::Approx(2.0 / std::sqrt(8.0)).epsilon(1e-12));
    CHECK(m.qp[1].q == doctest::Approx(2.0 / std::sqrt(8.0)).epsilon(1e-12));
    for (const auto& p : m.qp) {
      CHECK(p.alpha == 500.0);
      CHECK(p.beta == 500.0);
    }
  }

  TEST_CASE("all-zero weight layer falls back to 1/2^(b-1) with a warning") {
    Rng rng(2);
    net::Model m = net::make_mlp({4, 1, 1}, {6}, 3, 4, false, rng);
    auto& w = m.layers[0].weights.data;
    std::fill(w.begin(), w.end(), 0.0);
    data::Dataset tiny;
    tiny.rows = 2;
    tiny.cols = 2;
    tiny.classes = 3;
    tiny.count = 4;
    tiny.images.assign(16, 0.5f);
    tiny.labels.assign(4, 0);
    const auto warnings = train::init_quant_params(m, tiny, 4);
    CHECK(m.qp[0].q == doctest::Approx(1.0 / 8.0));
    REQUIRE(!warnings.empty());
    CHECK(warnings[0].find("fc1") != std::string::npos);
  }
}

TEST_SUITE("train.scaled_lr") {
  TEST_CASE("unit layer at b=1 keeps the base rate") {
    CHECK(train::scaled_lr(train::ParamKind::kWeightStep, 0.3, 1, 1, 1) == doctest::Approx(0.3));
  }
  TEST_CASE("64 weights at b=3 scale the step rate by 1/16") {
    CHECK(train::scaled_lr(train::ParamKind::kWeightStep, 0.8, 64, 0, 3) ==
          doctest::Approx(0.8 / 16.0));
  }
  TEST_CASE("100 activations scale the activation-sharpness rate by 1/10") {
    CHECK(train::scaled_lr(train::ParamKind::kActSharpness, 0.8, 1, 100, 6) ==
          doctest::Approx(0.08));
  }
  TEST_CASE("activation step rate uses 2^b") {
    CHECK(train::scaled_lr(train::ParamKind::kActStep, 1.0, 1, 25, 4) ==
          doctest::Approx(1.0 / std::sqrt(25.0 * 16.0)));
  }
}

TEST_SUITE("train.loop") {
  TEST_CASE("zero learning rates leave the model untouched") {
    const auto ds = tiny_data();
    train::TrainConfig cfg = quick_cfg();
    cfg.lr_w = cfg.lr_q = cfg.lr_s = cfg.lr_alpha = cfg.lr_beta = 0.0;
    cfg.weight_decay = 0.0;
    cfg.epochs = 1;
    const std::string d1 = "/tmp/cdl_train_zlr1", d2 = "/tmp/cdl_train_zlr2";
    const auto r1 = train::train(ds.train, ds.test, cfg, d1);
    cfg.epochs = 2;
    const auto r2 = train::train(ds.train, ds.test, cfg, d2);
    CHECK(!r1.aborted);
    CHECK(!r2.aborted);
    CHECK(slurp(d1 + "/model.ckpt") == slurp(d2 + "/model.ckpt"));
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
  }

  TEST_CASE("identical config and seed reproduce identical artifacts") {
    const auto ds = tiny_data();
    const train::TrainConfig cfg = quick_cfg();
    const std::string d1 = "/tmp/cdl_train_det1", d2 = "/tmp/cdl_train_det2";
    const auto r1 = train::train(ds.train, ds.test, cfg, d1);
    const auto r2 = train::train(ds.train, ds.test, cfg, d2);
    CHECK(slurp(d1 + "/model.ckpt") == slurp(d2 + "/model.ckpt"));
    CHECK(slurp(d1 + "/metrics.csv") == slurp(d2 + "/metrics.csv"));
    CHECK(r1.final_test_acc() == r2.final_test_acc());
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
  }

  TEST_CASE("quantizer parameters stay strictly positive through aggressive updates") {
    const auto ds = tiny_data();
    train::TrainConfig cfg = quick_cfg();
    cfg.lr_q = cfg.lr_s = cfg.lr_alpha = cfg.lr_beta = 5.0;
    cfg.lambda = 0.01;
    cfg.gamma = 0.01;
    const auto r = train::train(ds.train, ds.test, cfg);
    CHECK(!r.aborted);
    for (const auto& p : r.model.qp) {
      CHECK(p.q > 0.0);
      CHECK(p.s > 0.0);
      CHECK(p.alpha > 0.0);
      CHECK(p.beta > 0.0);
    }
  }

  TEST_CASE("first/last 8-bit exemption is honored") {
    const auto ds = tiny_data();
    train::TrainConfig cfg = quick_cfg();
    cfg.exempt_first_last = true;
    const auto r = train::train(ds.train, ds.test, cfg);
    CHECK(r.model.qp.front().weight_bits == 8);
    CHECK(r.model.qp.back().weight_bits == 8);
    CHECK(r.model.qp[1].weight_bits == 4);
    train::TrainConfig cfg2 = quick_cfg();
    cfg2.exempt_first_last = false;
    const auto r2 = train::train(ds.train, ds.test, cfg2);
    for (const auto& p : r2.model.qp) CHECK(p.weight_bits == 4);
  }

  TEST_CASE("a dominant weight-entropy penalty collapses the per-symbol entropy") {
    const auto ds = tiny_data(900, 200);
    train::TrainConfig cfg = quick_cfg();
    cfg.epochs = 3;
    cfg.lambda = 0.9;  // far past the sweep range
    const auto r = train::train(ds.train, ds.test, cfg);
    CHECK(!r.aborted);
    CHECK(r.history.back().hw_bits_per_w < 0.5);
  }

  TEST_CASE("non-finite loss aborts with a diagnostic snapshot") {
    const auto ds = tiny_data();
    train::TrainConfig cfg = quick_cfg();
    cfg.mode = net::Mode::kFp;
    cfg.lr_w = 1e12;  // guaranteed blow-up
    cfg.epochs = 2;
    const std::string d = "/tmp/cdl_train_abort";
    const auto r = train::train(ds.train, ds.test, cfg, d);
    CHECK(r.aborted);
    CHECK(!r.abort_reason.empty());
    CHECK(std::filesystem::exists(d + "/abort_snapshot.ckpt"));
    std::filesystem::remove_all(d);
  }

  TEST_CASE("rcdl at 8 bits tracks the fp trajectory") {
    const auto ds = tiny_data(1500, 500);
    train::TrainConfig fp = quick_cfg();
    fp.mode = net::Mode::kFp;
    fp.epochs = 6;
    fp.seed = 3;
    train::TrainConfig rc = fp;
    rc.mode = net::Mode::kRcdl;
    rc.bits = 8;
    const auto rf = train::train(ds.train, ds.test, fp);
    const auto rr = train::train(ds.train, ds.test, rc);
    CHECK(rr.final_test_acc() > rf.final_test_acc() - 0.025);
  }

  TEST_CASE("metrics files carry schema tags and parse") {
    const auto ds = tiny_data();
    train::TrainConfig cfg = quick_cfg();
    cfg.measure_huffman = true;
    const std::string d = "/tmp/cdl_train_metrics";
    const auto r = train::train(ds.train, ds.test, cfg, d);
    CHECK(!r.aborted);
    const std::string csv = slurp(d + "/metrics.csv");
    CHECK(csv.find("# schema=cdl.metrics") != std::string::npos);
    CHECK(csv.find("huffman_w_bits") != std::string::npos);
    CHECK(std::filesystem::exists(d + "/metrics.json"));
    CHECK(std::filesystem::exists(d + "/model.ckpt"));
    const net::Model m = net::load_checkpoint(d + "/model.ckpt");
    CHECK(m.blocks.size() == r.model.blocks.size());
    // histogram conservation: counts sum to the weight total each epoch
    std::int64_t total_w = 0;
    for (const auto& pl : r.model.blocks) total_w += pl.weight_count;
    for (const auto& wh : r.histograms) {
      std::int64_t s = 0;
      for (const auto& layer : wh.per_layer_counts)
        for (std::int64_t c : layer) s += c;
      CHECK(s == total_w);
    }
    std::filesystem::remove_all(d);
  }
}

TEST_SUITE("train.config") {
  TEST_CASE("validation rejects bad values") {
    train::TrainConfig cfg;
    cfg.lambda = -0.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.bits = 9;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.arch = "transformer";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }

  TEST_CASE("json round trip") {
    train::TrainConfig cfg;
    cfg.lambda = 0.03;
    cfg.gamma = 0.01;
    cfg.bits = 5;
    cfg.mode = net::Mode::kCdl;
    cfg.dataset = "synthetic:train=100,test=50";
    const std::string path = "/tmp/cdl_cfg_test.json";
    std::ofstream(path) << cfg.to_json();
    const train::TrainConfig c2 = train::TrainConfig::from_json_file(path);
    CHECK(c2.lambda == cfg.lambda);
    CHECK(c2.gamma == cfg.gamma);
    CHECK(c2.bits == cfg.bits);
    CHECK(c2.mode == net::Mode::kCdl);
    CHECK(c2.dataset == cfg.dataset);
    std::filesystem::remove(path);
  }
}

TEST_SUITE("train.sweep") {
  TEST_CASE("single-config sweep equals a single run; zero penalty keeps the most bits") {
    const auto ds = tiny_data(900, 200);
    train::TrainConfig base = quick_cfg();
    base.epochs = 3;
    base.measure_huffman = true;
    std::vector<train::TrainConfig> cfgs = {base, base};
    cfgs[1].lambda = 0.05;
    cfgs[1].gamma = 0.05;
    const auto rows = train::sweep(ds.train, ds.test, cfgs);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].lambda == 0.0);
    CHECK(rows[0].avg_bits_w > rows[1].avg_bits_w);  // no pressure keeps more bits
    // accuracy-vs-bits frontier is nonincreasing as bits shrink
    CHECK(rows[0].final_acc >= rows[1].final_acc);
  }
}

TEST_SUITE("train.entropy_fixture") {
  TEST_CASE("report on a trained checkpoint matches an oracle recomputation") {
    const auto ds = tiny_data(600, 150);
    train::TrainConfig cfg = quick_cfg();
    cfg.arch = "mlp";
    cfg.epochs = 1;
    const std::string d = "/tmp/cdl_entropy_fixture";
    const auto r = train::train(ds.train, ds.test, cfg, d);
    REQUIRE(!r.aborted);
    const net::Model m = net::load_checkpoint(d + "/model.ckpt");
    const auto er = train::entropy_report_for(m, ds.train, cfg, cfg.epochs);
    // re-derive every weight CPMF from the checkpoint in extended precision
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
      const auto& w = m.layers[static_cast<std::size_t>(m.blocks[l].weight_node)].weights.data;
      const quant::QuantGrid g = m.weight_grid(static_cast<int>(l));
      std::vector<long double> avg(static_cast<std::size_t>(g.size()), 0.0L);
      for (double v : w) {
        const oracle::Pmf p = oracle::cpmf(v, g, m.qp[l].alpha);
        for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += p.probs[k];
      }
      for (auto& x : avg) x /= static_cast<long double>(w.size());
      const double expect =
          static_cast<double>(oracle::entropy_bits(avg)) * static_cast<double>(w.size());
      CHECK(er.per_layer_weight_bits[l] == doctest::Approx(expect).epsilon(1e-9));
    }
    CHECK(std::filesystem::exists(d + "/entropy_report.json"));
    std::filesystem::remove_all(d);
  }
}
