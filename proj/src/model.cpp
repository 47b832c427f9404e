#include "eluq/model.hpp"

#include <algorithm>
#include <limits>
#include <numbers>

#include "eluq/errors.hpp"
#include "eluq/text.hpp"

namespace eluq {
namespace {

constexpr double kLn10 = std::numbers::ln10;

Tensor rows_to_tensor(std::size_t batch, const std::vector<double>& values) {
  return Tensor({batch, 1}, values);
}

}  // namespace

// ---- scalers ----------------------------------------------------------------

void FeatureScaler::fit(const std::vector<FeatureVector>& rows) {
  if (rows.empty()) throw ContractError("FeatureScaler::fit: no rows");
  lo_.fill(std::numeric_limits<double>::infinity());
  hi_.fill(-std::numeric_limits<double>::infinity());
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < kNumFeatures; ++j) {
      lo_[j] = std::min(lo_[j], r[j]);
      hi_[j] = std::max(hi_[j], r[j]);
    }
  }
  fitted_ = true;
}

FeatureVector FeatureScaler::transform(const FeatureVector& f) const {
  if (!fitted_) throw ContractError("FeatureScaler: not fitted");
  FeatureVector out{};
  for (std::size_t j = 0; j < kNumFeatures; ++j) {
    const double range = hi_[j] - lo_[j];
    const double v = range > 0.0 ? 2.0 * (f[j] - lo_[j]) / range - 1.0 : 0.0;
    out[j] = std::clamp(v, -kInputLimit, kInputLimit);
  }
  return out;
}

std::vector<double> FeatureScaler::state() const {
  std::vector<double> v(lo_.begin(), lo_.end());
  v.insert(v.end(), hi_.begin(), hi_.end());
  return v;
}

void FeatureScaler::set_state(const std::vector<double>& v) {
  if (v.size() != 2 * kNumFeatures) throw FormatError("feature scaler state has the wrong length");
  std::copy_n(v.begin(), kNumFeatures, lo_.begin());
  std::copy_n(v.begin() + kNumFeatures, kNumFeatures, hi_.begin());
  fitted_ = true;
}

void TargetScaler::fit(const std::vector<KinematicTriplet>& rows) {
  if (rows.empty()) throw ContractError("TargetScaler::fit: no rows");
  lo_.fill(std::numeric_limits<double>::infinity());
  hi_.fill(-std::numeric_limits<double>::infinity());
  for (const auto& t : rows) {
    const double u[3] = {std::log10(t.x), std::log10(t.q2), std::log10(t.y)};
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      lo_[j] = std::min(lo_[j], u[j]);
      hi_[j] = std::max(hi_[j], u[j]);
    }
  }
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    if (!(hi_[j] > lo_[j])) throw ContractError("TargetScaler::fit: constant target column");
  }
  fitted_ = true;
}

std::array<double, kNumTargets> TargetScaler::transform(const KinematicTriplet& t) const {
  if (!fitted_) throw ContractError("TargetScaler: not fitted");
  const double u[3] = {std::log10(t.x), std::log10(t.q2), std::log10(t.y)};
  std::array<double, kNumTargets> out{};
  for (std::size_t j = 0; j < kNumTargets; ++j) out[j] = (u[j] - log10_offset(j)) / log10_slope(j);
  return out;
}

KinematicTriplet TargetScaler::inverse(const std::array<double, kNumTargets>& scaled) const {
  if (!fitted_) throw ContractError("TargetScaler: not fitted");
  double v[3];
  for (std::size_t j = 0; j < kNumTargets; ++j) v[j] = std::pow(10.0, log10_offset(j) + log10_slope(j) * scaled[j]);
  return {v[0], v[1], v[2]};
}

std::vector<double> TargetScaler::state() const {
  std::vector<double> v(lo_.begin(), lo_.end());
  v.insert(v.end(), hi_.begin(), hi_.end());
  return v;
}

void TargetScaler::set_state(const std::vector<double>& v) {
  if (v.size() != 2 * kNumTargets) throw FormatError("target scaler state has the wrong length");
  std::copy_n(v.begin(), kNumTargets, lo_.begin());
  std::copy_n(v.begin() + kNumTargets, kNumTargets, hi_.begin());
  fitted_ = true;
}

// ---- configuration ----------------------------------------------------------

std::string model_kind_name(ModelKind k) { return k == ModelKind::kEluq ? "eluq" : "dnn"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "eluq") return ModelKind::kEluq;
  if (s == "dnn") return ModelKind::kDnn;
  throw ConfigError("model must be 'eluq' or 'dnn', got '" + s + "'");
}

KeyValues NetworkConfig::to_key_values() const {
  return {
      {"model", model_kind_name(kind)},
      {"trunk_widths", format_list(trunk_widths)},
      {"head_widths", format_list(head_widths)},
      {"flow_steps", std::to_string(mnf.flow_steps)},
      {"flow_hidden", std::to_string(mnf.flow_hidden)},
      {"init_log_var", format_double(mnf.init_log_var)},
      {"posterior", mnf.mode == PosteriorMode::kMultiplicativeFlow ? "mnf" : "mean_field"},
      {"log_var_cap", mnf.log_var_cap ? format_double(*mnf.log_var_cap) : "none"},
      {"deterministic_z0", mnf.deterministic_z0 ? "1" : "0"},
      {"log_var_head", log_var_head ? "1" : "0"},
      {"s_min", format_double(s_min)},
      {"s_max", format_double(s_max)},
      {"clamp_sharpness", format_double(clamp_sharpness)},
  };
}

void NetworkConfig::set(const std::string& key, const std::string& value) {
  if (key == "model") {
    kind = parse_model_kind(value);
  } else if (key == "trunk_widths") {
    trunk_widths = parse_size_list(key, value);
  } else if (key == "head_widths") {
    head_widths = parse_size_list(key, value);
  } else if (key == "flow_steps") {
    mnf.flow_steps = parse_u64(key, value);
  } else if (key == "flow_hidden") {
    mnf.flow_hidden = parse_u64(key, value);
  } else if (key == "init_log_var") {
    mnf.init_log_var = parse_double(key, value);
  } else if (key == "posterior") {
    if (value == "mnf") {
      mnf.mode = PosteriorMode::kMultiplicativeFlow;
    } else if (value == "mean_field") {
      mnf.mode = PosteriorMode::kMeanField;
    } else {
      throw ConfigError("posterior must be 'mnf' or 'mean_field', got '" + value + "'");
    }
  } else if (key == "log_var_cap") {
    if (value == "none") {
      mnf.log_var_cap.reset();
    } else {
      mnf.log_var_cap = parse_double(key, value);
    }
  } else if (key == "deterministic_z0") {
    mnf.deterministic_z0 = parse_bool(key, value);
  } else if (key == "log_var_head") {
    log_var_head = parse_bool(key, value);
  } else if (key == "s_min") {
    s_min = parse_double(key, value);
  } else if (key == "s_max") {
    s_max = parse_double(key, value);
  } else if (key == "clamp_sharpness") {
    clamp_sharpness = parse_double(key, value);
  } else {
    throw ConfigError("unknown network key '" + key + "'");
  }
}

// ---- networks ---------------------------------------------------------------

std::pair<Tensor, double> clamp_log_variance(const Tensor& raw, double s_min, double s_max, double sharpness) {
  Tensor lower = add_scalar(softplus(add_scalar(raw, -s_min), sharpness), s_min);
  Tensor both = add_scalar(neg(softplus(add_scalar(neg(lower), s_max), sharpness)), s_max);
  Tensor s = clamp(both, s_min, s_max);
  std::size_t moved = 0;
  auto rv = raw.values();
  auto sv = s.values();
  for (std::size_t i = 0; i < rv.size(); ++i) moved += std::abs(sv[i] - rv[i]) > 1e-3;
  return {s, rv.empty() ? 0.0 : static_cast<double>(moved) / static_cast<double>(rv.size())};
}

void Regressor::check_input(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != kNumFeatures) {
    throw ShapeError("network input: expected [batch, 15], got " + shape_string(x.shape()));
  }
  auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(std::abs(v[i]) <= kInputLimit)) {
      throw ContractError("network input is not scaled: |value| > 1.5 at row " + std::to_string(i / kNumFeatures) +
                          ", feature " + std::to_string(i % kNumFeatures));
    }
  }
}

EluqNetwork::EluqNetwork(const NetworkConfig& cfg, std::uint64_t init_seed) : Regressor(cfg) {
  config_.kind = ModelKind::kEluq;
  if (cfg.trunk_widths.empty()) throw ConfigError("network needs at least one trunk layer");
  std::mt19937_64 rng(init_seed);
  std::size_t in = kNumFeatures;
  for (std::size_t w : cfg.trunk_widths) {
    trunk_.emplace_back(in, w, cfg.mnf, rng);
    norms_.emplace_back(w);
    in = w;
  }
  const std::size_t trunk_out = in;
  for (auto* head : {&value_head_, &log_var_head_}) {
    in = trunk_out;
    for (std::size_t w : cfg.head_widths) {
      head->emplace_back(in, w, cfg.mnf, rng);
      in = w;
    }
    head->emplace_back(in, kNumTargets, cfg.mnf, rng);
  }
}

template <class Self>
Prediction EluqNetwork::run(Self& self, const Tensor& x, NoiseSource& noise, bool training, bool with_kl) {
  self.check_input(x);
  std::vector<std::pair<const MnfDense*, MnfDense::SampleContext>> contexts;
  Tensor h = x;
  for (std::size_t i = 0; i < self.trunk_.size(); ++i) {
    auto out = self.trunk_[i].forward(h, noise);
    contexts.emplace_back(&self.trunk_[i], std::move(out.context));
    Tensor normed;
    if constexpr (std::is_const_v<Self>) {
      normed = self.norms_[i].forward_eval(out.out);
    } else {
      normed = training ? self.norms_[i].forward_train(out.out) : self.norms_[i].forward_eval(out.out);
    }
    h = selu(normed);
  }
  auto head = [&](const std::vector<MnfDense>& layers) {
    Tensor g = h;
    for (std::size_t j = 0; j < layers.size(); ++j) {
      auto out = layers[j].forward(g, noise);
      contexts.emplace_back(&layers[j], std::move(out.context));
      g = (j + 1 < layers.size()) ? selu(out.out) : out.out;
    }
    return g;
  };
  Prediction p;
  p.value = head(self.value_head_);
  Tensor raw = head(self.log_var_head_);
  const NetworkConfig& cfg = self.config_;
  std::tie(p.log_var, p.clamp_active_fraction) = clamp_log_variance(raw, cfg.s_min, cfg.s_max, cfg.clamp_sharpness);
  if (with_kl) {
    for (const auto& [layer, ctx] : contexts) {
      Tensor k = layer->kl_term(ctx, noise);
      p.kl = p.kl.defined() ? add(p.kl, k) : k;
    }
  } else {
    p.kl = Tensor::scalar(0.0);
  }
  return p;
}

Prediction EluqNetwork::forward_train(const Tensor& x, NoiseSource& noise, bool with_kl) {
  return run(*this, x, noise, true, with_kl);
}

Prediction EluqNetwork::forward_eval(const Tensor& x, NoiseSource& noise, bool with_kl) const {
  return run(*this, x, noise, false, with_kl);
}

ParameterList EluqNetwork::parameters() const {
  ParameterList out;
  for (std::size_t i = 0; i < trunk_.size(); ++i) {
    trunk_[i].append_parameters(out, "trunk" + std::to_string(i));
    norms_[i].append_parameters(out, "trunk" + std::to_string(i) + ".bn");
  }
  for (std::size_t i = 0; i < value_head_.size(); ++i) value_head_[i].append_parameters(out, "value" + std::to_string(i));
  for (std::size_t i = 0; i < log_var_head_.size(); ++i)
    log_var_head_[i].append_parameters(out, "logvar" + std::to_string(i));
  return out;
}

std::vector<BatchNorm*> EluqNetwork::batch_norms() {
  std::vector<BatchNorm*> out;
  for (auto& bn : norms_) out.push_back(&bn);
  return out;
}

void EluqNetwork::mark_updated() {
  for (auto* group : {&trunk_, &value_head_, &log_var_head_})
    for (auto& layer : *group) layer.mark_updated();
}

DnnBaseline::DnnBaseline(const NetworkConfig& cfg, std::uint64_t init_seed) : Regressor(cfg) {
  config_.kind = ModelKind::kDnn;
  if (cfg.trunk_widths.empty()) throw ConfigError("network needs at least one trunk layer");
  std::mt19937_64 rng(init_seed);
  std::size_t in = kNumFeatures;
  for (std::size_t w : cfg.trunk_widths) {
    trunk_.emplace_back(in, w, rng);
    norms_.emplace_back(w);
    in = w;
  }
  const std::size_t trunk_out = in;
  for (auto* head : {&value_head_, &log_var_head_}) {
    if (head == &log_var_head_ && !cfg.log_var_head) break;
    in = trunk_out;
    for (std::size_t w : cfg.head_widths) {
      head->emplace_back(in, w, rng);
      in = w;
    }
    head->emplace_back(in, kNumTargets, rng);
  }
}

template <class Self>
Prediction DnnBaseline::run(Self& self, const Tensor& x, bool training) {
  self.check_input(x);
  Tensor h = x;
  for (std::size_t i = 0; i < self.trunk_.size(); ++i) {
    Tensor pre = self.trunk_[i].forward(h);
    Tensor normed;
    if constexpr (std::is_const_v<Self>) {
      normed = self.norms_[i].forward_eval(pre);
    } else {
      normed = training ? self.norms_[i].forward_train(pre) : self.norms_[i].forward_eval(pre);
    }
    h = selu(normed);
  }
  auto head = [&](const std::vector<Dense>& layers) {
    Tensor g = h;
    for (std::size_t j = 0; j < layers.size(); ++j) {
      Tensor out = layers[j].forward(g);
      g = (j + 1 < layers.size()) ? selu(out) : out;
    }
    return g;
  };
  Prediction p;
  p.value = head(self.value_head_);
  if (!self.log_var_head_.empty()) {
    const NetworkConfig& cfg = self.config_;
    std::tie(p.log_var, p.clamp_active_fraction) =
        clamp_log_variance(head(self.log_var_head_), cfg.s_min, cfg.s_max, cfg.clamp_sharpness);
  }
  p.kl = Tensor::scalar(0.0);
  return p;
}

Prediction DnnBaseline::forward_train(const Tensor& x, NoiseSource&, bool) { return run(*this, x, true); }

Prediction DnnBaseline::forward_eval(const Tensor& x, NoiseSource&, bool) const { return run(*this, x, false); }

ParameterList DnnBaseline::parameters() const {
  ParameterList out;
  for (std::size_t i = 0; i < trunk_.size(); ++i) {
    trunk_[i].append_parameters(out, "trunk" + std::to_string(i));
    norms_[i].append_parameters(out, "trunk" + std::to_string(i) + ".bn");
  }
  for (std::size_t i = 0; i < value_head_.size(); ++i) value_head_[i].append_parameters(out, "value" + std::to_string(i));
  for (std::size_t i = 0; i < log_var_head_.size(); ++i)
    log_var_head_[i].append_parameters(out, "logvar" + std::to_string(i));
  return out;
}

std::vector<BatchNorm*> DnnBaseline::batch_norms() {
  std::vector<BatchNorm*> out;
  for (auto& bn : norms_) out.push_back(&bn);
  return out;
}

void DnnBaseline::copy_means_from(const EluqNetwork& net) {
  if (net.config().trunk_widths != config_.trunk_widths || net.config().head_widths != config_.head_widths ||
      !config_.log_var_head) {
    throw ContractError("copy_means_from: topologies differ");
  }
  auto copy = [](const Tensor& from, const Tensor& to) {
    Tensor dst = to;
    std::copy(from.values().begin(), from.values().end(), dst.data().begin());
  };
  auto copy_layers = [&](const std::vector<MnfDense>& src, std::vector<Dense>& dst) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      copy(src[i].mean_weights(), dst[i].weights());
      copy(src[i].mean_bias(), dst[i].bias());
    }
  };
  copy_layers(net.trunk(), trunk_);
  copy_layers(net.value_head(), value_head_);
  copy_layers(net.log_var_head(), log_var_head_);
  ParameterList src_params, dst_params;
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    net.trunk_norms()[i].append_parameters(src_params, "");
    norms_[i].append_parameters(dst_params, "");
    norms_[i].stats() = net.trunk_norms()[i].stats();
  }
  for (std::size_t i = 0; i < src_params.size(); ++i) copy(src_params[i].tensor, dst_params[i].tensor);
}

std::unique_ptr<Regressor> make_regressor(const NetworkConfig& cfg, std::uint64_t init_seed) {
  if (cfg.kind == ModelKind::kEluq) return std::make_unique<EluqNetwork>(cfg, init_seed);
  return std::make_unique<DnnBaseline>(cfg, init_seed);
}

// ---- losses -----------------------------------------------------------------

Tensor regression_loss(const Tensor& v_hat, const Tensor& log_var, const Tensor& v_true) {
  if (v_hat.shape() != v_true.shape() || v_hat.rank() != 2) {
    throw ShapeError("regression_loss: incompatible shapes " + shape_string(v_hat.shape()) + " and " +
                     shape_string(v_true.shape()));
  }
  const double inv_batch = 1.0 / static_cast<double>(v_hat.dim(0));
  Tensor sq = square(sub(v_true, v_hat));
  if (!log_var.defined()) return scale(sum(sq), 0.5 * inv_batch);
  if (log_var.shape() != v_hat.shape()) {
    throw ShapeError("regression_loss: incompatible shapes " + shape_string(v_hat.shape()) + " and " +
                     shape_string(log_var.shape()));
  }
  return scale(sum(add(mul(exp(neg(log_var)), sq), log_var)), 0.5 * inv_batch);
}

Tensor physics_loss(const Tensor& physical, const std::vector<double>& mandelstam_s, std::size_t* clamped) {
  if (physical.rank() != 2 || physical.dim(1) != kNumTargets || physical.dim(0) != mandelstam_s.size()) {
    throw ShapeError("physics_loss: expected [batch, 3] with one s per event, got " + shape_string(physical.shape()));
  }
  constexpr double kFloor = 1e-12;
  std::size_t n_clamped = 0;
  for (double v : physical.values()) n_clamped += !(v > kFloor);
  if (clamped) *clamped += n_clamped;
  Tensor safe = n_clamped ? clamp(physical, kFloor, std::numeric_limits<double>::infinity()) : physical;
  std::vector<double> log_s(mandelstam_s.size());
  for (std::size_t i = 0; i < log_s.size(); ++i) log_s[i] = std::log(mandelstam_s[i]);
  Tensor signs({kNumTargets, 1}, {-1.0, 1.0, -1.0});
  Tensor residual = sub(matmul(log(safe), signs), rows_to_tensor(log_s.size(), log_s));
  return mean(square(residual));
}

Tensor physics_loss_scaled(const Tensor& v_hat, const TargetScaler& scaler, const std::vector<double>& mandelstam_s) {
  if (v_hat.rank() != 2 || v_hat.dim(1) != kNumTargets || v_hat.dim(0) != mandelstam_s.size()) {
    throw ShapeError("physics_loss_scaled: expected [batch, 3] with one s per event, got " +
                     shape_string(v_hat.shape()));
  }
  // ln Q2 - ln x - ln y = ln10 * (u_Q - u_x - u_y) with u = offset + slope * v_hat.
  Tensor w({kNumTargets, 1}, {-kLn10 * scaler.log10_slope(0), kLn10 * scaler.log10_slope(1),
                              -kLn10 * scaler.log10_slope(2)});
  const double c = kLn10 * (scaler.log10_offset(1) - scaler.log10_offset(0) - scaler.log10_offset(2));
  std::vector<double> shift(mandelstam_s.size());
  for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = c - std::log(mandelstam_s[i]);
  Tensor residual = add(matmul(v_hat, w), rows_to_tensor(shift.size(), shift));
  return mean(square(residual));
}

Tensor total_loss(const Tensor& reg, const Tensor& phys, const Tensor& kl, double alpha, double beta,
                  double n_batches) {
  if (alpha < 0.0 || beta < 0.0) throw ConfigError("total_loss: alpha and beta must be non-negative");
  Tensor total = reg;
  if (alpha != 0.0 && phys.defined()) total = add(total, scale(phys, alpha));
  if (beta != 0.0 && kl.defined()) total = add(total, scale(kl, beta / n_batches));
  return total;
}

}  // namespace eluq
