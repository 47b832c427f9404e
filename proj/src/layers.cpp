#include "eluq/layers.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "eluq/errors.hpp"

namespace eluq {
namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Sum over elements of log N(value; mean, exp(log_var)).
Tensor gaussian_log_density(const Tensor& value, const Tensor& mean, const Tensor& log_var) {
  Tensor quad = mul(square(sub(value, mean)), exp(neg(log_var)));
  Tensor per_elem = add_scalar(scale(add(log_var, quad), -0.5), -kHalfLog2Pi);
  return sum(per_elem);
}

}  // namespace

std::size_t count_parameters(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

Tensor fan_in_uniform(std::size_t fan_in, Shape shape, std::mt19937_64& rng) {
  return uniform_tensor(std::move(shape), std::sqrt(3.0 / static_cast<double>(fan_in)), rng);
}

// ---- Dense ------------------------------------------------------------------

Dense::Dense(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng)
    : weights_(fan_in_uniform(in_dim, {in_dim, out_dim}, rng)), bias_(Tensor::zeros({out_dim}, true)) {}

Tensor Dense::forward(const Tensor& x) const { return add(matmul(x, weights_), bias_); }

void Dense::append_parameters(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weights", weights_});
  out.push_back({prefix + ".bias", bias_});
}

// ---- BatchNorm ------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t features)
    : gamma_(Tensor::full({features}, 1.0, true)), beta_(Tensor::zeros({features}, true)), stats_(features) {}

Tensor BatchNorm::forward_train(const Tensor& x) { return batch_norm(x, gamma_, beta_, stats_, true); }

Tensor BatchNorm::forward_eval(const Tensor& x) const { return batch_norm_eval(x, gamma_, beta_, stats_); }

void BatchNorm::append_parameters(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma_});
  out.push_back({prefix + ".beta", beta_});
}

// ---- CouplingFlow -----------------------------------------------------------

Tensor CouplingFlow::Net::operator()(const Tensor& in) const {
  return add(matmul(tanh(add(matmul(in, w1), b1)), w2), b2);
}

CouplingFlow::CouplingFlow(std::size_t dim, std::size_t steps, std::size_t hidden, std::mt19937_64& rng)
    : dim_(dim) {
  if (dim == 0 || steps == 0 || hidden == 0) throw ConfigError("CouplingFlow: dimensions must be positive");
  for (std::size_t k = 0; k < steps; ++k) {
    Step step;
    step.mask.resize(dim);
    std::vector<double> inverse(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      step.mask[j] = ((j + k) % 2 == 0) ? 1.0 : 0.0;
      inverse[j] = 1.0 - step.mask[j];
    }
    step.keep = Tensor({1, dim}, step.mask);
    step.transform = Tensor({1, dim}, inverse);
    for (Net* net : {&step.scale, &step.shift}) {
      net->w1 = fan_in_uniform(dim, {dim, hidden}, rng);
      net->b1 = Tensor::zeros({hidden}, true);
      net->w2 = Tensor::zeros({hidden, dim}, true);
      net->b2 = Tensor::zeros({dim}, true);
    }
    steps_.push_back(std::move(step));
  }
}

CouplingFlow::Result CouplingFlow::forward(const Tensor& z) const {
  if (z.rank() != 2 || z.dim(1) != dim_) {
    throw ContractError("CouplingFlow::forward: expected [n, " + std::to_string(dim_) + "], got " +
                        shape_string(z.shape()));
  }
  Tensor cur = z;
  Tensor log_det;
  for (const Step& step : steps_) {
    Tensor kept = mul(cur, step.keep);
    Tensor s = mul(step.scale(kept), step.transform);
    Tensor t = mul(step.shift(kept), step.transform);
    cur = add(mul(cur, exp(s)), t);
    Tensor ld = sum(s, 1);
    log_det = log_det.defined() ? add(log_det, ld) : ld;
  }
  return {cur, log_det};
}

CouplingFlow::Result CouplingFlow::inverse(const Tensor& z) const {
  if (z.rank() != 2 || z.dim(1) != dim_) {
    throw ContractError("CouplingFlow::inverse: expected [n, " + std::to_string(dim_) + "], got " +
                        shape_string(z.shape()));
  }
  Tensor cur = z;
  Tensor log_det;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    const Step& step = *it;
    Tensor kept = mul(cur, step.keep);
    Tensor s = mul(step.scale(kept), step.transform);
    Tensor t = mul(step.shift(kept), step.transform);
    cur = mul(sub(cur, t), exp(neg(s)));
    Tensor ld = neg(sum(s, 1));
    log_det = log_det.defined() ? add(log_det, ld) : ld;
  }
  return {cur, log_det};
}

void CouplingFlow::append_parameters(ParameterList& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < steps_.size(); ++k) {
    const std::string p = prefix + ".step" + std::to_string(k);
    const Step& s = steps_[k];
    out.push_back({p + ".scale.w1", s.scale.w1});
    out.push_back({p + ".scale.b1", s.scale.b1});
    out.push_back({p + ".scale.w2", s.scale.w2});
    out.push_back({p + ".scale.b2", s.scale.b2});
    out.push_back({p + ".shift.w1", s.shift.w1});
    out.push_back({p + ".shift.b1", s.shift.b1});
    out.push_back({p + ".shift.w2", s.shift.w2});
    out.push_back({p + ".shift.b2", s.shift.b2});
  }
}

// ---- MnfDense ---------------------------------------------------------------

MnfDense::MnfDense(std::size_t in_dim, std::size_t out_dim, const MnfOptions& options, std::mt19937_64& rng)
    : in_dim_(in_dim),
      out_dim_(out_dim),
      options_(options),
      mean_weights_(fan_in_uniform(in_dim, {in_dim, out_dim}, rng)),
      log_var_weights_(Tensor::full({in_dim, out_dim}, options.init_log_var, true)),
      mean_bias_(Tensor::zeros({out_dim}, true)),
      log_var_bias_(Tensor::full({out_dim}, options.init_log_var, true)),
      q_z0_mean_(Tensor::full({in_dim}, 1.0, true)),
      q_z0_log_var_(Tensor::full({in_dim}, options.init_log_var, true)),
      q_flow_(in_dim, options.flow_steps, options.flow_hidden, rng),
      r_flow_(in_dim, options.flow_steps, options.flow_hidden, rng),
      aux_c_(uniform_tensor({out_dim, 1}, 1.0 / std::sqrt(static_cast<double>(out_dim)), rng)),
      aux_b1_(uniform_tensor({in_dim}, 0.1, rng)),
      aux_b2_(uniform_tensor({in_dim}, 0.1, rng)) {
  if (in_dim == 0 || out_dim == 0) throw ConfigError("MnfDense: dimensions must be positive");
}

Tensor MnfDense::effective_log_var(const Tensor& raw) const {
  if (!options_.log_var_cap) return raw;
  return clamp(raw, -std::numeric_limits<double>::infinity(), *options_.log_var_cap);
}

std::pair<Tensor, Tensor> MnfDense::variances() const {
  if (grad_enabled()) return {exp(effective_log_var(log_var_weights_)), exp(effective_log_var(log_var_bias_))};
  VarianceCache& c = *variance_cache_;
  std::lock_guard lock(c.mutex);
  const void* wn = log_var_weights_.node().get();
  const void* bn = log_var_bias_.node().get();
  if (!c.weights.defined() || c.weights_node != wn || c.bias_node != bn ||
      c.weights_revision != log_var_weights_.revision() || c.bias_revision != log_var_bias_.revision()) {
    c.weights = exp(effective_log_var(log_var_weights_));
    c.bias = exp(effective_log_var(log_var_bias_));
    c.weights_node = wn;
    c.bias_node = bn;
    c.weights_revision = log_var_weights_.revision();
    c.bias_revision = log_var_bias_.revision();
  }
  return {c.weights, c.bias};
}

MnfDense::Output MnfDense::forward(const Tensor& x, NoiseSource& noise) const {
  if (x.rank() != 2 || x.dim(1) != in_dim_) {
    throw ShapeError("MnfDense::forward: expected [batch, " + std::to_string(in_dim_) + "], got " +
                     shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  SampleContext ctx;
  ctx.owner = this;
  ctx.version = version_;
  if (options_.mode == PosteriorMode::kMeanField) {
    ctx.z0 = Tensor::full({1, in_dim_}, 1.0);
    ctx.z_t = ctx.z0;
    ctx.log_det_q = Tensor::scalar(0.0);
  } else {
    Tensor mu = reshape(q_z0_mean_, {1, in_dim_});
    if (options_.deterministic_z0) {
      ctx.z0 = mu;
    } else {
      Tensor sigma = exp(scale(reshape(q_z0_log_var_, {1, in_dim_}), 0.5));
      ctx.z0 = reparameterize(mu, sigma, noise.normal(in_dim_));
    }
    auto flowed = q_flow_.forward(ctx.z0);
    ctx.z_t = flowed.z;
    ctx.log_det_q = sum(flowed.log_det);
  }

  Tensor mean = add(matmul(mul(x, ctx.z_t), mean_weights_), mean_bias_);
  auto [var_w, var_b] = variances();
  Tensor variance = add(matmul(square(x), var_w), var_b);
  Tensor std_dev = sqrt(variance);
  Tensor out = reparameterize(mean, std_dev, noise.normal(batch * out_dim_));
  return {out, mean, variance, std::move(ctx)};
}

void MnfDense::check_context(const SampleContext& context) const {
  if (context.owner != this) throw ContractError("MnfDense::kl_term: context belongs to another layer");
  if (context.version != version_) {
    throw ContractError("MnfDense::kl_term: stale sample context (parameters updated since the forward pass)");
  }
}

Tensor MnfDense::gaussian_kl(const SampleContext& context) const {
  check_context(context);
  Tensor means = mul(mean_weights_, reshape(context.z_t, {in_dim_, 1}));
  Tensor lv_w = effective_log_var(log_var_weights_);
  Tensor lv_b = effective_log_var(log_var_bias_);
  // 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2) per element
  Tensor kl_w = sum(add_scalar(sub(add(square(means), exp(lv_w)), lv_w), -1.0));
  Tensor kl_b = sum(add_scalar(sub(add(square(mean_bias_), exp(lv_b)), lv_b), -1.0));
  return scale(add(kl_w, kl_b), 0.5);
}

Tensor MnfDense::kl_term(const SampleContext& context, NoiseSource& noise) const {
  Tensor kl = gaussian_kl(context);
  if (options_.mode == PosteriorMode::kMeanField) return kl;

  // One weight sample from q(W | z_T) conditions the auxiliary inverse model.
  Tensor means = mul(mean_weights_, reshape(context.z_t, {in_dim_, 1}));
  Tensor sigma_w = exp(scale(effective_log_var(log_var_weights_), 0.5));
  Tensor weights = reparameterize(means, sigma_w, noise.normal(in_dim_ * out_dim_));
  Tensor xi = reshape(tanh(matmul(weights, aux_c_)), {1, in_dim_});
  Tensor r_mean = mul(xi, aux_b1_);
  Tensor r_log_var = mul(xi, aux_b2_);
  auto back = r_flow_.forward(context.z_t);
  Tensor log_r = add(gaussian_log_density(back.z, r_mean, r_log_var), sum(back.log_det));

  Tensor q_mu = reshape(q_z0_mean_, {1, in_dim_});
  Tensor q_lv = reshape(q_z0_log_var_, {1, in_dim_});
  Tensor log_q = sub(gaussian_log_density(context.z0, q_mu, q_lv), context.log_det_q);

  return add(sub(kl, log_r), log_q);
}

void MnfDense::append_parameters(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".mean_weights", mean_weights_});
  out.push_back({prefix + ".log_var_weights", log_var_weights_});
  out.push_back({prefix + ".mean_bias", mean_bias_});
  out.push_back({prefix + ".log_var_bias", log_var_bias_});
  if (options_.mode == PosteriorMode::kMeanField) return;
  out.push_back({prefix + ".q_z0_mean", q_z0_mean_});
  out.push_back({prefix + ".q_z0_log_var", q_z0_log_var_});
  q_flow_.append_parameters(out, prefix + ".q_flow");
  r_flow_.append_parameters(out, prefix + ".r_flow");
  out.push_back({prefix + ".aux_c", aux_c_});
  out.push_back({prefix + ".aux_b1", aux_b1_});
  out.push_back({prefix + ".aux_b2", aux_b2_});
}

}  // namespace eluq
