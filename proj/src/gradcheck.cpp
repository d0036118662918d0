#include "cdl/gradcheck.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "cdl/entropy.hpp"
#include "cdl/net.hpp"
#include "cdl/quant.hpp"
#include "cdl/rng.hpp"

namespace cdl::gradcheck {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
constexpr double kNoiseC = 16.0;  // evaluation rounding allowance, in ulps

double err_vs(double analytic, double fd, double atol, double rtol) {
  return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), atol / rtol});
}

quant::QuantGrid random_grid(Rng& rng, int max_bits = 6,
                             quant::Signedness sign = quant::Signedness::kSigned) {
  quant::QuantGrid g;
  g.bits = rng.uniform_int(2, max_bits);
  g.step = rng.log_uniform(1e-3, 1.0);
  g.sign = sign;
  return g;
}

double grid_scale(const quant::QuantGrid& g) {
  return std::max({1.0, std::abs(g.min_level()), std::abs(g.max_level())});
}

}  // namespace

SuiteResult run_prop1(const Options& opt) {
  SuiteResult r{"prop1", 0.0, 1e-10, std::max<std::int64_t>(opt.instances, 10000), false};
  Rng rng(Rng::mix({opt.seed, 0x7031u}));
  for (std::int64_t n = 0; n < r.instances; ++n) {
    const quant::QuantGrid g = random_grid(rng);
    const double alpha = rng.log_uniform(1.0, 1e4);
    const double theta = rng.uniform(g.min_level(), g.max_level());
    const quant::Cpmf c = quant::make_cpmf(theta, g, alpha);
    // exhaustive expected distortion, summed in extended precision
    long double lhs = 0.0L;
    for (int j = 0; j < c.support_size(); ++j) {
      const long double d = static_cast<long double>(theta) - g.level(c.support_first + j);
      lhs += static_cast<long double>(c.probs[static_cast<std::size_t>(j)]) * d * d;
    }
    const quant::QuantMoments m = quant::moments(c);
    double rhs = (theta - m.mean) * (theta - m.mean) + m.var;
    if (opt.corrupt) rhs += 1e-9;
    r.max_err = std::max(r.max_err, std::abs(static_cast<double>(lhs) - rhs));
  }
  r.pass = r.max_err < r.tolerance;
  return r;
}

SuiteResult run_quant_dtheta(const Options& opt) {
  SuiteResult r{"dtheta", 0.0, 1e-5, opt.instances, false};
  Rng rng(Rng::mix({opt.seed, 0x6474u}));
  const double h = 1e-6;
  for (std::int64_t n = 0; n < r.instances; ++n) {
    const quant::QuantGrid g = random_grid(rng);
    const double alpha = rng.log_uniform(1.0, 1e4);
    const double theta = rng.uniform(g.min_level(), g.max_level());
    double a = quant::dqd_dtheta(quant::make_cpmf(theta, g, alpha));
    if (opt.corrupt) a *= 1.001;
    const double fd = (quant::qd(quant::make_cpmf(theta + h, g, alpha)) -
                       quant::qd(quant::make_cpmf(theta - h, g, alpha))) /
                      (2.0 * h);
    const double atol = kNoiseC * kEps * grid_scale(g) / h;
    r.max_err = std::max(r.max_err, err_vs(a, fd, atol, r.tolerance));
  }
  r.pass = r.max_err < r.tolerance;
  return r;
}

SuiteResult run_quant_dstep(const Options& opt) {
  SuiteResult r{"dstep", 0.0, 1e-4, opt.instances, false};
  Rng rng(Rng::mix({opt.seed, 0x6471u}));
  const double h = 1e-7;
  for (std::int64_t n = 0; n < r.instances; ++n) {
    quant::QuantGrid g = random_grid(rng);
    const double alpha = rng.log_uniform(1.0, 1e4);
    const double theta = rng.uniform(g.min_level(), g.max_level());
    double a = quant::dqd_dq(quant::make_cpmf(theta, g, alpha));
    if (opt.corrupt) a *= 1.001;
    quant::QuantGrid gp = g, gm = g;
    gp.step = g.step + h;
    gm.step = g.step - h;
    const double fd = (quant::qd(quant::make_cpmf(theta, gp, alpha)) -
                       quant::qd(quant::make_cpmf(theta, gm, alpha))) /
                      (2.0 * h);
    const double atol = kNoiseC * kEps * grid_scale(g) / h;
    r.max_err = std::max(r.max_err, err_vs(a, fd, atol, r.tolerance));
  }
  r.pass = r.max_err < r.tolerance;
  return r;
}

SuiteResult run_quant_dsharpness(const Options& opt) {
  SuiteResult r{"dsharpness", 0.0, 1e-4, opt.instances, false};
  Rng rng(Rng::mix({opt.seed, 0x6461u}));
  for (std::int64_t n = 0; n < r.instances; ++n) {
    const quant::QuantGrid g = random_grid(rng);
    const double alpha = rng.log_uniform(1.0, 1e4);
    const double theta = rng.uniform(g.min_level(), g.max_level());
    double a = quant::dqd_dsharpness(quant::make_cpmf(theta, g, alpha));
    if (opt.corrupt) a *= 1.001;
    const double h = 1e-5 * alpha;
    const double fd = (quant::qd(quant::make_cpmf(theta, g, alpha + h)) -
                       quant::qd(quant::make_cpmf(theta, g, alpha - h))) /
                      (2.0 * h);
    const double atol = kNoiseC * kEps * grid_scale(g) / h;
    r.max_err = std::max(r.max_err, err_vs(a, fd, atol, r.tolerance));
  }
  r.pass = r.max_err < r.tolerance;
  return r;
}

SuiteResult run_entropy_grads(const Options& opt) {
  SuiteResult r{"entropy", 0.0, 1e-4, std::max(opt.instances / 10, 20), false};
  Rng rng(Rng::mix({opt.seed, 0x656eu}));
  for (std::int64_t it = 0; it < r.instances; ++it) {
    const bool act_like = (it % 2) == 1;
    quant::QuantGrid g;
    g.bits = rng.uniform_int(2, 4);
    g.step = rng.log_uniform(1e-2, 1.0);
    g.sign = act_like ? quant::Signedness::kUnsigned : quant::Signedness::kSigned;
    const int topk = act_like ? std::min(5, g.size()) : 0;
    const double sharp = rng.log_uniform(1.0, 1e3);
    const int n = rng.uniform_int(3, 50);
    std::vector<double> values(static_cast<std::size_t>(n));
    for (double& v : values) v = rng.uniform(g.min_level(), g.max_level());

    auto total_bits = [&](const std::vector<double>& vals, double step, double a) {
      quant::QuantGrid gg = g;
      gg.step = step;
      const entropy::Mpmf m = entropy::layer_mpmf(vals, gg, a, topk);
      return entropy::shannon_entropy_bits(m) * static_cast<double>(vals.size());
    };

    const entropy::PenaltyGrads pg = entropy::entropy_penalty_gradients(values, g, sharp, topk);
    const double hscale = static_cast<double>(n) * g.bits;

    // values
    {
      const double h = 1e-6;
      const double atol = kNoiseC * kEps * hscale / h;
      std::vector<double> v = values;
      for (std::size_t i = 0; i < values.size(); ++i) {
        v[i] = values[i] + h;
        const double up = total_bits(v, g.step, sharp);
        v[i] = values[i] - h;
        const double dn = total_bits(v, g.step, sharp);
        v[i] = values[i];
        double a = pg.d_values[i];
        if (opt.corrupt) a *= 1.001;
        r.max_err = std::max(r.max_err, err_vs(a, (up - dn) / (2.0 * h), atol, r.tolerance));
      }
    }
    // step
    {
      const double h = 1e-7;
      const double atol = kNoiseC * kEps * hscale / h;
      const double fd =
          (total_bits(values, g.step + h, sharp) - total_bits(values, g.step - h, sharp)) /
          (2.0 * h);
      r.max_err = std::max(r.max_err, err_vs(pg.d_step, fd, atol, r.tolerance));
    }
    // sharpness
    {
      const double h = 1e-5 * sharp;
      const double atol = kNoiseC * kEps * hscale / h;
      const double fd =
          (total_bits(values, g.step, sharp + h) - total_bits(values, g.step, sharp - h)) /
          (2.0 * h);
      r.max_err = std::max(r.max_err, err_vs(pg.d_sharpness, fd, atol, r.tolerance));
    }
  }
  r.pass = r.max_err < r.tolerance;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

struct TinyProblem {
  net::Model model;
  std::vector<net::Tensor> xs;
  std::vector<int> ys;
  double lambda = 0.05, gamma = 0.05;
};

TinyProblem make_tiny(std::uint64_t seed) {
  TinyProblem P;
  Rng rng(Rng::mix({seed, 0x74696e79u}));
  P.model = net::make_mlp({6, 1, 1}, {8}, 4, /*bits=*/3, /*exempt=*/false, rng);
  // data-driven step/sharpness initialization, as in training
  const int batch = 8;
  for (int i = 0; i < batch; ++i) {
    net::Tensor x({6, 1, 1});
    for (double& v : x.data) v = rng.normal();
    P.xs.push_back(std::move(x));
    P.ys.push_back(rng.uniform_int(0, 3));
  }
  for (std::size_t l = 0; l < P.model.blocks.size(); ++l) {
    net::LayerQuantParams& p = P.model.qp[l];
    const auto& w =
        P.model.layers[static_cast<std::size_t>(P.model.blocks[l].weight_node)].weights.data;
    double s = 0.0;
    for (double v : w) s += std::abs(v);
    p.q = 2.0 * (s / static_cast<double>(w.size())) / std::sqrt(std::pow(2.0, p.weight_bits - 1));
    p.s = 0.3;
    p.alpha = 500.0;
    p.beta = 500.0;
  }
  return P;
}

double weight_entropy_total_bits(const net::Model& m) {
  double total = 0.0;
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& w = m.layers[static_cast<std::size_t>(m.blocks[l].weight_node)].weights.data;
    const entropy::Mpmf mp =
        entropy::layer_mpmf(w, m.weight_grid(static_cast<int>(l)), m.qp[l].alpha);
    total += entropy::shannon_entropy_bits(mp) * static_cast<double>(w.size());
  }
  return total;
}

double eval_objective(const TinyProblem& P) {
  const auto wq = net::quantize_weights(P.model, net::Mode::kRcdl, nullptr);
  double acc = 0.0;
  for (std::size_t i = 0; i < P.xs.size(); ++i) {
    const net::ForwardTrace tr =
        net::forward(P.model, P.xs[i], P.ys[i], net::Mode::kRcdl, &wq, P.gamma, nullptr);
    acc += tr.loss_total;
  }
  acc /= static_cast<double>(P.xs.size());
  return acc + P.lambda * weight_entropy_total_bits(P.model);
}

net::ParamGrads analytic_objective_grads(const TinyProblem& P) {
  const auto wq = net::quantize_weights(P.model, net::Mode::kRcdl, nullptr);
  net::ParamGrads g;
  g.init_like(P.model);
  const double inv = 1.0 / static_cast<double>(P.xs.size());
  for (std::size_t i = 0; i < P.xs.size(); ++i) {
    const net::ForwardTrace tr =
        net::forward(P.model, P.xs[i], P.ys[i], net::Mode::kRcdl, &wq, P.gamma, nullptr);
    const net::ParamGrads bg = net::backward(tr, P.model, &wq, P.gamma);
    g.add_scaled(bg, inv);
  }
  for (std::size_t l = 0; l < P.model.blocks.size(); ++l) {
    const auto& w =
        P.model.layers[static_cast<std::size_t>(P.model.blocks[l].weight_node)].weights.data;
    const entropy::PenaltyGrads pg = entropy::entropy_penalty_gradients(
        w, P.model.weight_grid(static_cast<int>(l)), P.model.qp[l].alpha);
    for (std::size_t i = 0; i < w.size(); ++i) g.w[l][i] += P.lambda * pg.d_values[i];
    g.q[l] += P.lambda * pg.d_step;
    g.alpha[l] += P.lambda * pg.d_sharpness;
  }
  return g;
}

}  // namespace

SuiteResult run_rcdl_end_to_end(const Options& opt) {
  SuiteResult r{"rcdl", 0.0, 1e-4, 0, false};
  TinyProblem P = make_tiny(opt.seed);
  const net::ParamGrads g = analytic_objective_grads(P);

  const double jscale = std::max(1.0, std::abs(eval_objective(P)));
  auto fd_for = [&](double* param, double h) {
    const double save = *param;
    *param = save + h;
    const double up = eval_objective(P);
    *param = save - h;
    const double dn = eval_objective(P);
    *param = save;
    return (up - dn) / (2.0 * h);
  };

  for (std::size_t l = 0; l < P.model.blocks.size(); ++l) {
    auto& w = P.model.layers[static_cast<std::size_t>(P.model.blocks[l].weight_node)].weights.data;
    {
      const double h = 1e-6;
      const double atol = kNoiseC * kEps * jscale / h;
      for (std::size_t i = 0; i < w.size(); ++i) {
        double a = g.w[l][i];
        if (opt.corrupt) a *= 1.001;
        r.max_err = std::max(r.max_err, err_vs(a, fd_for(&w[i], h), atol, r.tolerance));
        ++r.instances;
      }
    }
    net::LayerQuantParams& p = P.model.qp[l];
    {
      const double h = 1e-7;
      const double atol = kNoiseC * kEps * jscale / h;
      r.max_err = std::max(r.max_err, err_vs(g.q[l], fd_for(&p.q, h), atol, r.tolerance));
      ++r.instances;
      if (P.model.blocks[l].act_count > 0) {
        r.max_err = std::max(r.max_err, err_vs(g.s[l], fd_for(&p.s, h), atol, r.tolerance));
        ++r.instances;
      }
    }
    {
      const double ha = 1e-5 * p.alpha;
      const double atol = kNoiseC * kEps * jscale / ha;
      r.max_err = std::max(r.max_err, err_vs(g.alpha[l], fd_for(&p.alpha, ha), atol, r.tolerance));
      ++r.instances;
      if (P.model.blocks[l].act_count > 0) {
        const double hb = 1e-5 * p.beta;
        r.max_err = std::max(r.max_err, err_vs(g.beta[l], fd_for(&p.beta, hb), atol, r.tolerance));
        ++r.instances;
      }
    }
  }
  r.pass = r.max_err < r.tolerance;
  return r;
}

std::vector<std::string> suite_names() {
  return {"prop1", "dtheta", "dstep", "dsharpness", "entropy", "rcdl"};
}

std::vector<SuiteResult> run_suites(const std::vector<std::string>& names, const Options& opt) {
  std::vector<SuiteResult> out;
  for (const std::string& n : names) {
    if (n == "prop1") out.push_back(run_prop1(opt));
    else if (n == "dtheta") out.push_back(run_quant_dtheta(opt));
    else if (n == "dstep") out.push_back(run_quant_dstep(opt));
    else if (n == "dsharpness") out.push_back(run_quant_dsharpness(opt));
    else if (n == "entropy") out.push_back(run_entropy_grads(opt));
    else if (n == "rcdl") out.push_back(run_rcdl_end_to_end(opt));
    else throw std::invalid_argument("unknown gradcheck suite: " + n);
  }
  return out;
}

}  // namespace cdl::gradcheck
