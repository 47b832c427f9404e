#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "eluq/generator.hpp"
#include "eluq/model.hpp"
#include "eluq/text.hpp"

namespace eluq {

struct TrainConfig {
  std::size_t max_epochs = 100;
  std::size_t batch_size = 1024;
  double initial_lr = 5e-4;
  std::size_t decay_step = 50;
  double decay_factor = 0.1;
  double alpha = 1.0;
  double beta = 0.01;
  std::size_t patience = 10;
  double min_delta = 1e-5;
  double train_fraction = 0.70;
  double validation_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 1;

  void validate() const;
  /// Learning rate of a 1-based epoch.
  double lr_at(std::size_t epoch) const;
  KeyValues to_key_values() const;
  void set(const std::string& key, const std::string& value);
};

/// Adam with bias correction. A parameter without a gradient counts as a
/// zero gradient.
class Adam {
 public:
  Adam(ParameterList params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::uint64_t steps() const { return t_; }

 private:
  ParameterList params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

/// Indices into a dataset's event list. Unusable events never enter a split.
struct DataSplit {
  std::vector<std::size_t> train, validation, test;
};

DataSplit make_split(const Dataset& data, const TrainConfig& cfg);

/// Scaled network inputs and targets for a list of events, row-major.
struct PreparedData {
  std::size_t rows = 0;
  std::vector<double> features;  // rows x 15, scaled
  std::vector<double> targets;   // rows x 3, scaled
  std::vector<double> mandelstam_s;
  std::vector<std::size_t> event_index;

  Tensor feature_batch(std::span<const std::size_t> rows_in_batch) const;
  Tensor target_batch(std::span<const std::size_t> rows_in_batch) const;
  std::vector<double> s_batch(std::span<const std::size_t> rows_in_batch) const;
};

PreparedData prepare_data(const Dataset& data, const std::vector<std::size_t>& events, const FeatureScaler& fs,
                          const TargetScaler& ts);

struct LossTerms {
  double total = 0.0;
  double reg = 0.0;
  double phys = 0.0;
  double kl = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossTerms train;
  LossTerms validation;
  double clamp_active_fraction = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::string stop_reason;

  void write_csv(const std::filesystem::path& path, const KeyValues& header) const;
};

class Trainer {
 public:
  /// Splits the dataset and fits both scalers on the training split only.
  Trainer(Regressor& model, const TrainConfig& cfg, const Dataset& data);

  /// One optimizer update on the given training rows. Returns the loss terms
  /// before the update.
  LossTerms step(std::span<const std::size_t> rows, NoiseSource& noise);

  /// Mean loss terms over a prepared set with frozen batch-norm statistics
  /// and a fixed noise stream.
  LossTerms evaluate(const PreparedData& set) const;

  /// Full training loop. Leaves the best-validation parameters in the model.
  TrainLog fit();

  const DataSplit& split() const { return split_; }
  const FeatureScaler& feature_scaler() const { return feature_scaler_; }
  const TargetScaler& target_scaler() const { return target_scaler_; }
  const PreparedData& train_data() const { return train_; }
  const PreparedData& validation_data() const { return validation_; }
  const TrainConfig& config() const { return cfg_; }
  double batches_per_epoch() const { return n_batches_; }
  Adam& optimizer() { return optimizer_; }

 private:
  struct Snapshot {
    std::vector<std::vector<double>> params;
    std::vector<BatchNormStats> stats;
  };
  Snapshot snapshot() const;
  void restore(const Snapshot& s);

  Regressor& model_;
  TrainConfig cfg_;
  DataSplit split_;
  FeatureScaler feature_scaler_;
  TargetScaler target_scaler_;
  PreparedData train_;
  PreparedData validation_;
  double n_batches_;
  Adam optimizer_;
  double last_clamp_fraction_ = 0.0;
};

// ---- checkpoints ------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  NetworkConfig network;
  TrainConfig train;
  FeatureScaler features;
  TargetScaler targets;
  DataSplit split;
  std::string code_version = ELUQ_VERSION;
  KeyValues info;  // provenance: dataset config, command, ...
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  std::vector<Entry> tensors;  // parameters and batch-norm statistics
};

Checkpoint make_checkpoint(Regressor& model, const FeatureScaler& fs, const TargetScaler& ts, const TrainConfig& cfg,
                           const DataSplit& split, KeyValues info = {});
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws FormatError on a bad magic, version, checksum or truncated payload.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Builds a model from the checkpoint; nothing is returned unless every tensor
/// matched by name and shape.
std::unique_ptr<Regressor> restore_model(const Checkpoint& ckpt);

}  // namespace eluq
