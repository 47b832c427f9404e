#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "eluq/random.hpp"
#include "eluq/tensor.hpp"

namespace eluq {

struct Parameter {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<Parameter>;

std::size_t count_parameters(const ParameterList& params);

/// Fan-in scaled uniform init with unit-variance-preserving bounds (LeCun).
Tensor fan_in_uniform(std::size_t fan_in, Shape shape, std::mt19937_64& rng);

/// Ordinary affine layer x W + b.
class Dense {
 public:
  Dense(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  void append_parameters(ParameterList& out, const std::string& prefix) const;

  std::size_t in_dim() const { return weights_.dim(0); }
  std::size_t out_dim() const { return weights_.dim(1); }
  const Tensor& weights() const { return weights_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weights_;
  Tensor bias_;
};

class BatchNorm {
 public:
  explicit BatchNorm(std::size_t features);

  Tensor forward_train(const Tensor& x);
  Tensor forward_eval(const Tensor& x) const;
  void append_parameters(ParameterList& out, const std::string& prefix) const;

  BatchNormStats& stats() { return stats_; }
  const BatchNormStats& stats() const { return stats_; }

 private:
  Tensor gamma_;
  Tensor beta_;
  BatchNormStats stats_;
};

/// Affine coupling flow (two-way alternating masks). Each step keeps the
/// masked coordinates and maps the others as z -> z * exp(s) + t, where the
/// scale and shift nets (one tanh hidden layer each) see only the masked
/// coordinates. Final layers start at zero, so a fresh flow is the identity.
class CouplingFlow {
 public:
  struct Result {
    Tensor z;        // [n, dim]
    Tensor log_det;  // [n]
  };

  CouplingFlow(std::size_t dim, std::size_t steps, std::size_t hidden, std::mt19937_64& rng);

  Result forward(const Tensor& z) const;
  Result inverse(const Tensor& z) const;

  std::size_t dim() const { return dim_; }
  std::size_t num_steps() const { return steps_.size(); }
  const std::vector<double>& mask(std::size_t step) const { return steps_.at(step).mask; }
  void append_parameters(ParameterList& out, const std::string& prefix) const;

 private:
  struct Net {
    Tensor w1, b1, w2, b2;
    Tensor operator()(const Tensor& in) const;
  };
  struct Step {
    std::vector<double> mask;
    Tensor keep;       // mask as a [1, dim] constant
    Tensor transform;  // 1 - mask
    Net scale;
    Net shift;
  };

  std::size_t dim_;
  std::vector<Step> steps_;
};

enum class PosteriorMode {
  /// Gaussian weights whose means are scaled by a flow-transformed auxiliary z.
  kMultiplicativeFlow,
  /// z fixed to 1 and no auxiliary model: plain factorized Gaussian posterior.
  kMeanField,
};

struct MnfOptions {
  std::size_t flow_steps = 2;
  std::size_t flow_hidden = 50;
  double init_log_var = -9.0;
  PosteriorMode mode = PosteriorMode::kMultiplicativeFlow;
  /// When set, effective log-variances are min(parameter, cap) with no
  /// gradient above the cap. -30 emulates the zero-variance limit.
  std::optional<double> log_var_cap;
  /// Use z0 = mean of q(z0) instead of sampling it.
  bool deterministic_z0 = false;
};

/// Bayesian dense layer with a multiplicative-normalizing-flow posterior.
///
/// forward() uses local reparameterization: with z_T the flowed auxiliary
/// sample (one per call, shared by the batch),
///   mean     = (x * z_T) M + b_mu
///   variance = x^2 exp(log_var_W) + exp(log_var_b)
/// and returns mean + sqrt(variance) * eps with eps drawn per element. The full
/// weight matrix is only sampled inside kl_term().
///
/// Noise draw order per forward call: in_dim values for z0 (unless
/// deterministic), then batch*out_dim pre-activation values. kl_term() draws
/// in_dim*out_dim values for the weight sample.
class MnfDense {
 public:
  struct SampleContext {
    Tensor z0;         // [1, in]
    Tensor z_t;        // [1, in]
    Tensor log_det_q;  // scalar
    const MnfDense* owner = nullptr;
    std::uint64_t version = 0;
  };
  struct Output {
    Tensor out;       // sampled pre-activations [batch, out]
    Tensor mean;      // [batch, out]
    Tensor variance;  // [batch, out]
    SampleContext context;
  };

  MnfDense(std::size_t in_dim, std::size_t out_dim, const MnfOptions& options, std::mt19937_64& rng);

  Output forward(const Tensor& x, NoiseSource& noise) const;

  /// Single-sample estimate of KL(q(W) || p(W)) expanded with the auxiliary
  /// variable: KL(q(W|z_T) || p(W)) - log r(z_T | W) + log q(z_T), returned as
  /// a positive penalty. Prior p(W) is a standard normal per weight and bias.
  Tensor kl_term(const SampleContext& context, NoiseSource& noise) const;

  /// Closed-form Gaussian part KL(q(W|z_T) || p(W)) over weights and biases.
  Tensor gaussian_kl(const SampleContext& context) const;

  /// Must be called after every parameter update; invalidates older contexts.
  void mark_updated() { ++version_; }

  void append_parameters(ParameterList& out, const std::string& prefix) const;

  std::size_t in_dim() const { return in_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  const MnfOptions& options() const { return options_; }

  const Tensor& mean_weights() const { return mean_weights_; }
  const Tensor& mean_bias() const { return mean_bias_; }
  Tensor& mean_weights() { return mean_weights_; }
  Tensor& log_var_weights() { return log_var_weights_; }
  Tensor& mean_bias() { return mean_bias_; }
  Tensor& log_var_bias() { return log_var_bias_; }
  Tensor& q_z0_mean() { return q_z0_mean_; }
  Tensor& q_z0_log_var() { return q_z0_log_var_; }
  Tensor& aux_projection() { return aux_c_; }
  Tensor& aux_mean_scale() { return aux_b1_; }
  Tensor& aux_log_var_scale() { return aux_b2_; }
  const CouplingFlow& q_flow() const { return q_flow_; }
  const CouplingFlow& r_flow() const { return r_flow_; }

 private:
  // exp of the effective log-variances, reused by gradient-free passes until
  // either parameter tensor is written.
  struct VarianceCache {
    std::mutex mutex;
    const void* weights_node = nullptr;
    const void* bias_node = nullptr;
    std::uint64_t weights_revision = 0;
    std::uint64_t bias_revision = 0;
    Tensor weights;
    Tensor bias;
  };

  Tensor effective_log_var(const Tensor& raw) const;
  std::pair<Tensor, Tensor> variances() const;
  void check_context(const SampleContext& context) const;

  std::size_t in_dim_;
  std::size_t out_dim_;
  MnfOptions options_;
  Tensor mean_weights_;     // [in, out]
  Tensor log_var_weights_;  // [in, out]
  Tensor mean_bias_;        // [out]
  Tensor log_var_bias_;     // [out]
  Tensor q_z0_mean_;        // [in]
  Tensor q_z0_log_var_;     // [in]
  CouplingFlow q_flow_;
  CouplingFlow r_flow_;
  Tensor aux_c_;   // [out, 1]
  Tensor aux_b1_;  // [in]
  Tensor aux_b2_;  // [in]
  std::uint64_t version_ = 0;
  std::shared_ptr<VarianceCache> variance_cache_ = std::make_shared<VarianceCache>();
};

}  // namespace eluq
