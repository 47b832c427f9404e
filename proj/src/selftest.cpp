#include "eluq/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>

#include "eluq/analysis.hpp"
#include "eluq/generator.hpp"
#include "eluq/gradcheck.hpp"
#include "eluq/layers.hpp"
#include "eluq/model.hpp"
#include "eluq/random.hpp"
#include "eluq/tensor.hpp"

namespace eluq {
namespace {

CheckResult below(std::string name, double measured, double tolerance, std::string detail = {}) {
  return {std::move(name), measured, tolerance, measured < tolerance, std::move(detail)};
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi, double avoid_zero = 0.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) {
    do {
      x = u(rng);
    } while (std::abs(x) < avoid_zero);
  }
  return Tensor(std::move(shape), std::move(v), true);
}

void perturb(const ParameterList& params, std::mt19937_64& rng, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.data()) v += u(rng);
  }
}

// Records the noise of one evaluation and replays it for every later call.
std::function<Tensor()> frozen(NoiseSource& noise, std::function<Tensor()> objective) {
  noise.record();
  objective();
  return [&noise, objective] {
    noise.rewind();
    return objective();
  };
}

std::vector<Tensor> leaves_of(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

CheckResult from_report(std::string name, const GradCheckReport& r) {
  return {std::move(name), r.max_rel_error, r.tolerance, r.passed,
          std::to_string(r.elements_checked) + " elements, worst at " + r.worst_location};
}

// log |det A| by Gaussian elimination with partial pivoting.
double log_abs_det(std::vector<double> a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (piv != c)
      for (std::size_t k = 0; k < n; ++k) std::swap(a[c * n + k], a[piv * n + k]);
    const double d = a[c * n + c];
    acc += std::log(std::abs(d));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r * n + c] / d;
      for (std::size_t k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
    }
  }
  return acc;
}

// KL(N(mu, s2) || N(0, 1)) by Simpson quadrature of q log(q / p).
double kl_quadrature(double mu, double s2) {
  const double s = std::sqrt(s2);
  const double lo = mu - 12.0 * s, hi = mu + 12.0 * s;
  const int n = 20000;
  const double h = (hi - lo) / n;
  auto f = [&](double w) {
    const double lq = -0.5 * std::log(2 * std::numbers::pi * s2) - 0.5 * (w - mu) * (w - mu) / s2;
    const double lp = -0.5 * std::log(2 * std::numbers::pi) - 0.5 * w * w;
    return std::exp(lq) * (lq - lp);
  };
  double acc = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

Tensor row(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

struct SeluCorruption {
  explicit SeluCorruption(bool on) : on_(on) {
    if (on_) testing_hooks::set_selu_backward_scale_factor(1.01);
  }
  ~SeluCorruption() {
    if (on_) testing_hooks::set_selu_backward_scale_factor(1.0);
  }
  SeluCorruption(const SeluCorruption&) = delete;
  SeluCorruption& operator=(const SeluCorruption&) = delete;
  bool on_;
};

}  // namespace

std::vector<CheckResult> gradient_suite(const SelfTestOptions& opt) {
  constexpr double kTol = 1e-5;
  SeluCorruption corruption(opt.corrupt_selu);
  std::vector<CheckResult> out;
  std::mt19937_64 rng(2024);

  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&, const Tensor&)> f;
    double lo, hi, avoid_zero;
  };
  const std::vector<Case> cases = {
      {"matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }, -2, 2, 0},
      {"add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, -2, 2, 0},
      {"sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, -2, 2, 0},
      {"mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, -2, 2, 0},
      {"div", [](const Tensor& a, const Tensor& b) { return div(a, b); }, 0.5, 2, 0},
      {"exp", [](const Tensor& a, const Tensor&) { return exp(a); }, -2, 2, 0},
      {"log", [](const Tensor& a, const Tensor&) { return log(a); }, 0.2, 3, 0},
      {"sqrt", [](const Tensor& a, const Tensor&) { return sqrt(a); }, 0.2, 3, 0},
      {"square", [](const Tensor& a, const Tensor&) { return square(a); }, -2, 2, 0},
      {"tanh", [](const Tensor& a, const Tensor&) { return tanh(a); }, -2, 2, 0},
      {"selu", [](const Tensor& a, const Tensor&) { return selu(a); }, -2, 2, 1e-3},
      {"softplus", [](const Tensor& a, const Tensor&) { return softplus(a, 3.0); }, -2, 2, 0},
      {"sum_axis", [](const Tensor& a, const Tensor& b) { return mul(sum(a, 0), sum(b, 0)); }, -2, 2, 0},
      {"mean_axis", [](const Tensor& a, const Tensor& b) { return mul(mean(a, 1), mean(b, 1)); }, -2, 2, 0},
      {"broadcast", [](const Tensor& a, const Tensor& b) { return mul(a, sum(b, 0)); }, -2, 2, 0},
      {"reshape", [](const Tensor& a, const Tensor&) { return square(reshape(a, {12})); }, -2, 2, 0},
      {"batch_norm",
       [](const Tensor& a, const Tensor& b) {
         BatchNormStats stats(4);
         return mul(batch_norm(a, sum(b, 0), mean(b, 0), stats, true), b);
       },
       -2, 2, 0},
  };
  for (const Case& c : cases) {
    GradCheckReport worst;
    worst.passed = true;
    std::size_t elements = 0;
    for (std::size_t trial = 0; trial < opt.primitive_trials; ++trial) {
      Tensor a = random_tensor(rng, {3, 4}, c.lo, c.hi, c.avoid_zero);
      Tensor b = random_tensor(rng, {3, 4}, c.lo, c.hi, c.avoid_zero);
      Tensor probe;
      {
        NoGradGuard guard;
        const Tensor o = c.f(a, b);
        probe = random_tensor(rng, o.shape(), -2, 2).detach();
      }
      const GradCheckReport r = gradient_check([&] { return sum(mul(c.f(a, b), probe)); }, {a, b}, kTol);
      elements += r.elements_checked;
      const bool passed = worst.passed && r.passed;
      if (r.max_rel_error >= worst.max_rel_error) worst = r;
      worst.passed = passed;
    }
    worst.elements_checked = elements;
    worst.tolerance = kTol;
    out.push_back(from_report(std::string("grad.") + c.name, worst));
  }

  {
    MnfOptions o;
    o.flow_hidden = 6;
    o.init_log_var = -2.0;
    MnfDense layer(3, 2, o, rng);
    ParameterList params;
    layer.append_parameters(params, "mnf");
    perturb(params, rng, 0.4);
    Tensor x = random_tensor(rng, {4, 3}, -0.8, 0.8);
    NoiseSource noise(18);
    auto fwd = frozen(noise, [&] { return mean(square(layer.forward(x, noise).out)); });
    auto leaves = leaves_of(params);
    leaves.push_back(x);
    out.push_back(from_report("grad.mnf_forward", gradient_check(fwd, leaves, kTol)));

    NoiseSource noise2(19);
    auto kl = frozen(noise2, [&] {
      auto f = layer.forward(x, noise2);
      return layer.kl_term(f.context, noise2);
    });
    out.push_back(from_report("grad.mnf_kl_term", gradient_check(kl, leaves_of(params), kTol)));
  }

  {
    NetworkConfig cfg;
    cfg.trunk_widths = {4, 4};
    cfg.head_widths = {3};
    cfg.mnf.flow_hidden = 4;
    cfg.mnf.init_log_var = -3.0;
    EluqNetwork net(cfg, 35);
    perturb(net.parameters(), rng, 0.3);
    TargetScaler ts;
    ts.fit({{1e-3, 300.0, 0.05}, {0.5, 2e4, 0.7}, {0.02, 1e3, 0.3}});
    const std::size_t batch = 4;
    Tensor x = random_tensor(rng, {batch, kNumFeatures}, -1, 1).detach();
    Tensor target = random_tensor(rng, {batch, 3}, -0.9, 0.9).detach();
    const std::vector<double> s(batch, BeamConfig().s());
    NoiseSource noise(77);
    auto loss = frozen(noise, [&] {
      Prediction p = net.forward_train(x, noise, true);
      return total_loss(regression_loss(p.value, p.log_var, target), physics_loss_scaled(p.value, ts, s), p.kl, 1.0,
                        0.01, 3.0);
    });
    out.push_back(from_report("grad.full_loss", gradient_check(loss, leaves_of(net.parameters()), kTol)));
  }
  return out;
}

std::vector<CheckResult> flow_suite() {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  double worst_inverse = 0.0, worst_logdet = 0.0;
  for (std::size_t dim = 2; dim <= 6; ++dim) {
    CouplingFlow flow(dim, 2, 16, rng);
    ParameterList params;
    flow.append_parameters(params, "f");
    std::uniform_real_distribution<double> u(-0.6, 0.6);
    for (const auto& p : params) {
      Tensor t = p.tensor;
      for (double& v : t.data()) v = u(rng);
    }
    std::vector<double> z0(dim);
    for (double& v : z0) v = g(rng);

    const auto fwd = flow.forward(row(z0));
    const auto back = flow.inverse(fwd.z);
    for (std::size_t i = 0; i < dim; ++i) worst_inverse = std::max(worst_inverse, std::abs(back.z.values()[i] - z0[i]));
    worst_inverse = std::max(worst_inverse, std::abs(fwd.log_det.values()[0] + back.log_det.values()[0]));

    const double h = 1e-6;
    std::vector<double> jac(dim * dim);
    for (std::size_t c = 0; c < dim; ++c) {
      auto zp = z0, zm = z0;
      zp[c] += h;
      zm[c] -= h;
      const Tensor tp = flow.forward(row(zp)).z;
      const Tensor tm = flow.forward(row(zm)).z;
      for (std::size_t r = 0; r < dim; ++r) jac[r * dim + c] = (tp.values()[r] - tm.values()[r]) / (2 * h);
    }
    worst_logdet = std::max(worst_logdet, std::abs(fwd.log_det.values()[0] - log_abs_det(jac, dim)));
  }
  out.push_back(below("flow.inverse_round_trip", worst_inverse, 1e-10, "dims 2-6"));
  out.push_back(below("flow.log_det_vs_jacobian", worst_logdet, 1e-6, "dims 2-6, central differences h=1e-6"));
  return out;
}

std::vector<CheckResult> kl_suite() {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(8);
  MnfOptions opt;
  opt.deterministic_z0 = true;
  {
    MnfDense layer(3, 2, opt, rng);
    for (Tensor* t : {&layer.mean_weights(), &layer.mean_bias(), &layer.log_var_weights(), &layer.log_var_bias(),
                      &layer.aux_mean_scale(), &layer.aux_log_var_scale()})
      for (double& v : t->data()) v = 0.0;
    for (double& v : layer.q_z0_log_var().data()) v = 1.0;
    NoiseSource noise(14);
    auto f = layer.forward(Tensor::zeros({2, 3}), noise);
    out.push_back(below("kl.matching_prior", std::abs(layer.kl_term(f.context, noise).item()), 1e-12));
  }
  {
    MnfDense layer(1, 1, opt, rng);
    layer.mean_weights().data()[0] = 1.0;
    layer.log_var_weights().data()[0] = 0.0;
    layer.mean_bias().data()[0] = 0.0;
    layer.log_var_bias().data()[0] = 0.0;
    NoiseSource noise(15);
    auto f = layer.forward(Tensor::zeros({1, 1}), noise);
    out.push_back(below("kl.single_weight_one_half", std::abs(layer.gaussian_kl(f.context).item() - 0.5), 1e-12));
  }
  {
    MnfDense layer(3, 2, opt, rng);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    for (Tensor* t : {&layer.mean_weights(), &layer.mean_bias(), &layer.log_var_weights(), &layer.log_var_bias()})
      for (double& v : t->data()) v = u(rng);
    NoiseSource noise(16);
    auto f = layer.forward(Tensor::zeros({1, 3}), noise);
    double expected = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        expected += kl_quadrature(layer.mean_weights().values()[i * 2 + j] * f.context.z_t.values()[i],
                                  std::exp(layer.log_var_weights().values()[i * 2 + j]));
    for (std::size_t j = 0; j < 2; ++j)
      expected += kl_quadrature(layer.mean_bias().values()[j], std::exp(layer.log_var_bias().values()[j]));
    out.push_back(below("kl.gaussian_vs_quadrature", std::abs(layer.gaussian_kl(f.context).item() - expected), 1e-8,
                        "Simpson rule, 20000 intervals"));
  }
  return out;
}

std::vector<CheckResult> weighted_average_suite() {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(1.0, 0.3);
  std::uniform_real_distribution<double> u(0.01, 2.0);
  std::vector<double> v(10000), s(10000);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = g(rng);
    s[i] = u(rng);
  }
  const auto rel = [](double a, double b) { return std::abs(a - b) / std::abs(b); };

  const std::vector<double> equal(v.size(), 0.37);
  const WeightedMean e = weighted_average(v, equal);
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  out.push_back(below("wavg.equal_sigma_is_arithmetic_mean", rel(e.mean, mean), 1e-12));
  out.push_back(below("wavg.event_sigma_identity", rel(e.event_sigma, 0.37), 1e-12));

  double sw = 0.0, swv = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    sw += 1.0 / (s[i] * s[i]);
    swv += v[i] / (s[i] * s[i]);
  }
  const WeightedMean w = weighted_average(v, s);
  out.push_back(below("wavg.naive_sum_oracle", std::max(rel(w.mean, swv / sw), rel(w.sigma, 1.0 / std::sqrt(sw))),
                      1e-12, "10000 random values"));
  return out;
}

std::vector<CheckResult> kinematics_suite(std::size_t n_events) {
  std::vector<CheckResult> out;
  GeneratorConfig cfg;
  std::mt19937_64 rng(derive_seed(cfg.seed, "selftest_kinematics"));
  std::uniform_real_distribution<double> phi(-std::numbers::pi, std::numbers::pi);
  std::array<double, kNumMethods> worst{};
  std::size_t failures = 0;
  double worst_sxy = 0.0;
  for (std::size_t i = 0; i < n_events; ++i) {
    const KinematicTriplet t = sample_truth(cfg, rng);
    worst_sxy = std::max(worst_sxy, std::abs(t.q2 - cfg.beam.s() * t.x * t.y) / t.q2);
    const auto [e, h] = build_states(t, cfg.beam, phi(rng));
    const FeatureVector f = compute_features(e, h, std::nullopt, cfg.beam);
    for (std::size_t m = 0; m < kNumMethods; ++m) {
      const Reconstruction r = reconstruct(static_cast<Method>(m), f, cfg.beam);
      if (!r.ok) {
        ++failures;
        continue;
      }
      const Triplet a = as_array(r.triplet), b = as_array(t);
      for (std::size_t j = 0; j < kNumTargets; ++j) worst[m] = std::max(worst[m], std::abs(a[j] - b[j]) / b[j]);
    }
  }
  const std::string n = std::to_string(n_events) + " noiseless events";
  for (std::size_t m = 0; m < kNumMethods; ++m) {
    CheckResult c = below("kinematics." + std::string(method_name(static_cast<Method>(m))), worst[m], 1e-9, n);
    if (failures > 0) {
      c.passed = false;
      c.detail += ", " + std::to_string(failures) + " reconstructions failed";
    }
    out.push_back(c);
  }
  out.push_back(below("kinematics.q2_equals_sxy", worst_sxy, 1e-12, n));
  return out;
}

std::vector<CheckResult> run_selftest(const SelfTestOptions& opt) {
  std::vector<CheckResult> all;
  for (auto part : {gradient_suite(opt), flow_suite(), kl_suite(), weighted_average_suite(),
                    kinematics_suite(opt.kinematics_events)}) {
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

}  // namespace eluq
