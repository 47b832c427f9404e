#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "eluq/generator.hpp"
#include "eluq/layers.hpp"

namespace eluq {

inline constexpr std::size_t kNumTargets = 3;  // x, Q2, y
inline constexpr double kInputLimit = 1.5;

/// Min-max map of each feature onto (-1, 1) from training-set extrema.
/// Constant features map to 0; values outside the fitted range are clipped
/// to +-kInputLimit.
class FeatureScaler {
 public:
  void fit(const std::vector<FeatureVector>& rows);
  bool fitted() const { return fitted_; }
  FeatureVector transform(const FeatureVector& f) const;

  std::vector<double> state() const;  // lo then hi
  void set_state(const std::vector<double>& v);
  const std::array<double, kNumFeatures>& lo() const { return lo_; }
  const std::array<double, kNumFeatures>& hi() const { return hi_; }

 private:
  std::array<double, kNumFeatures> lo_{};
  std::array<double, kNumFeatures> hi_{};
  bool fitted_ = false;
};

/// Targets are regressed as log10 values mapped affinely onto (-1, 1).
class TargetScaler {
 public:
  void fit(const std::vector<KinematicTriplet>& rows);
  bool fitted() const { return fitted_; }

  std::array<double, kNumTargets> transform(const KinematicTriplet& t) const;
  KinematicTriplet inverse(const std::array<double, kNumTargets>& scaled) const;

  /// d(log10 v) / d(scaled) for observable j.
  double log10_slope(std::size_t j) const { return 0.5 * (hi_[j] - lo_[j]); }
  double log10_offset(std::size_t j) const { return 0.5 * (hi_[j] + lo_[j]); }
  /// Physical sigma from a scaled-space sigma at physical value v (delta method).
  double physical_sigma(std::size_t j, double value, double scaled_sigma) const {
    return value * std::log(10.0) * log10_slope(j) * scaled_sigma;
  }

  std::vector<double> state() const;
  void set_state(const std::vector<double>& v);

 private:
  std::array<double, kNumTargets> lo_{};
  std::array<double, kNumTargets> hi_{};
  bool fitted_ = false;
};

enum class ModelKind { kEluq, kDnn };

std::string model_kind_name(ModelKind k);
ModelKind parse_model_kind(const std::string& s);

struct NetworkConfig {
  ModelKind kind = ModelKind::kEluq;
  std::vector<std::size_t> trunk_widths{128, 128, 128};
  std::vector<std::size_t> head_widths{64};
  MnfOptions mnf;
  /// DNN only: whether it carries a log-variance head. Without one the
  /// baseline is fit on squared error.
  bool log_var_head = false;
  double s_min = std::log(1e-6);
  double s_max = std::log(4.0);
  double clamp_sharpness = 10.0;

  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  void set(const std::string& key, const std::string& value);
};

/// One stochastic pass.
struct Prediction {
  Tensor value;    // scaled-space v_hat [batch, 3]
  Tensor log_var;  // s = log sigma^2 [batch, 3]; undefined without a head
  Tensor kl;       // scalar sum of layer penalties; zero when not requested
  double clamp_active_fraction = 0.0;
};

/// Smooth two-sided clamp of raw log-variances into [s_min, s_max] followed
/// by a hard clamp as a guarantee. Returns the clamped tensor and the share of
/// elements moved by more than 1e-3.
std::pair<Tensor, double> clamp_log_variance(const Tensor& raw, double s_min, double s_max, double sharpness);

class Regressor {
 public:
  virtual ~Regressor() = default;

  /// Training pass: batch-norm uses batch statistics and updates the running ones.
  virtual Prediction forward_train(const Tensor& x, NoiseSource& noise, bool with_kl) = 0;
  /// Pass with frozen batch-norm statistics. Safe to call concurrently from
  /// several threads with separate noise sources.
  virtual Prediction forward_eval(const Tensor& x, NoiseSource& noise, bool with_kl = false) const = 0;

  virtual ParameterList parameters() const = 0;
  virtual std::vector<BatchNorm*> batch_norms() = 0;
  virtual void mark_updated() {}

  const NetworkConfig& config() const { return config_; }
  bool has_log_var() const { return config_.kind == ModelKind::kEluq || config_.log_var_head; }
  std::size_t parameter_count() const { return count_parameters(parameters()); }

 protected:
  explicit Regressor(NetworkConfig cfg) : config_(std::move(cfg)) {}
  void check_input(const Tensor& x) const;

  NetworkConfig config_;
};

/// Bicephalous Bayesian network: MNF trunk blocks (MNF -> batch norm -> SELU)
/// feeding a value head and a log-variance head built from MNF layers.
class EluqNetwork final : public Regressor {
 public:
  EluqNetwork(const NetworkConfig& cfg, std::uint64_t init_seed);

  Prediction forward_train(const Tensor& x, NoiseSource& noise, bool with_kl) override;
  Prediction forward_eval(const Tensor& x, NoiseSource& noise, bool with_kl = false) const override;
  ParameterList parameters() const override;
  std::vector<BatchNorm*> batch_norms() override;
  void mark_updated() override;

  const std::vector<MnfDense>& trunk() const { return trunk_; }
  const std::vector<MnfDense>& value_head() const { return value_head_; }
  const std::vector<MnfDense>& log_var_head() const { return log_var_head_; }
  const std::vector<BatchNorm>& trunk_norms() const { return norms_; }

 private:
  template <class Self>
  static Prediction run(Self& self, const Tensor& x, NoiseSource& noise, bool training, bool with_kl);

  std::vector<MnfDense> trunk_;
  std::vector<BatchNorm> norms_;
  std::vector<MnfDense> value_head_;
  std::vector<MnfDense> log_var_head_;
};

/// Deterministic counterpart with ordinary dense layers.
class DnnBaseline final : public Regressor {
 public:
  DnnBaseline(const NetworkConfig& cfg, std::uint64_t init_seed);

  Prediction forward_train(const Tensor& x, NoiseSource& noise, bool with_kl) override;
  Prediction forward_eval(const Tensor& x, NoiseSource& noise, bool with_kl = false) const override;
  ParameterList parameters() const override;
  std::vector<BatchNorm*> batch_norms() override;

  /// Copies posterior means, biases and batch-norm state from a network of
  /// identical topology.
  void copy_means_from(const EluqNetwork& net);

 private:
  template <class Self>
  static Prediction run(Self& self, const Tensor& x, bool training);

  std::vector<Dense> trunk_;
  std::vector<BatchNorm> norms_;
  std::vector<Dense> value_head_;
  std::vector<Dense> log_var_head_;
};

std::unique_ptr<Regressor> make_regressor(const NetworkConfig& cfg, std::uint64_t init_seed);

// ---- losses -----------------------------------------------------------------

/// Mean over the batch of sum_j 0.5 (exp(-s_j) (v_j - v_hat_j)^2 + s_j).
/// Without a log-variance (undefined s) this is 0.5 * squared error.
Tensor regression_loss(const Tensor& v_hat, const Tensor& log_var, const Tensor& v_true);

/// Mean over the batch of (log Q2 - log s - log x - log y)^2 on physical
/// predictions [batch, 3] (x, Q2, y). Non-positive entries are replaced by
/// 1e-12 and counted in `clamped` when given.
Tensor physics_loss(const Tensor& physical, const std::vector<double>& mandelstam_s, std::size_t* clamped = nullptr);

/// The same penalty evaluated from scaled log10-space predictions, which is
/// how training applies it (no clamping can occur).
Tensor physics_loss_scaled(const Tensor& v_hat, const TargetScaler& scaler, const std::vector<double>& mandelstam_s);

/// reg + alpha phys + beta kl / n_batches.
Tensor total_loss(const Tensor& reg, const Tensor& phys, const Tensor& kl, double alpha, double beta,
                  double n_batches);

}  // namespace eluq
