#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "eluq/kinematics.hpp"

namespace eluq {

enum class SamplingLaw {
  /// log x and log Q^2 uniform; y = Q^2 / (s x) must land in the y range.
  kLogXLogQ2,
  /// log x and log y uniform; Q^2 = s x y must land in the Q^2 range.
  kLogXLogY,
};

struct SmearingConfig {
  double electron_stochastic = 0.10;  // a in a/sqrt(E) (+) b
  double electron_constant = 0.01;
  double electron_angle = 0.002;  // rad, applied to theta and phi
  double hfs_stochastic = 0.50;
  double hfs_constant = 0.05;
  double hfs_angle = 0.020;

  /// Relative energy resolution sqrt(a^2 / E + b^2).
  static double relative_resolution(double stochastic, double constant, double energy);
};

struct RadiationConfig {
  double isr_probability = 0.1;
  /// Photon energies follow dE/E between these fractions of E0.
  double photon_min_fraction = 0.01;
  double photon_max_fraction = 0.5;
  double photon_eta_mean = -4.0;
  double photon_eta_spread = 0.5;
  /// Share of radiative events whose photon overlaps the electron cluster.
  double fsr_fraction = 0.3;
  /// Mean of the Poisson law for extra ECAL clusters in radiative events.
  double extra_cluster_mean = 1.0;
};

struct GeneratorConfig {
  BeamConfig beam;
  double x_min = 2e-4;
  double x_max = 1.0;
  double y_min = 0.01;
  double y_max = 0.8;
  double q2_min = 200.0;
  double q2_max = 5e4;
  SamplingLaw law = SamplingLaw::kLogXLogQ2;
  SmearingConfig smearing;
  RadiationConfig radiation;
  std::uint64_t seed = 1;

  void validate() const;
  /// Ordered key=value view; round-trips through set().
  std::vector<std::pair<std::string, std::string>> to_key_values() const;
  /// Sets one key. Unknown keys or unparsable values throw ConfigError.
  void set(const std::string& key, const std::string& value);
};

/// Per-event flag bits.
enum EventFlag : std::uint8_t {
  kElectronFailed = 1u << 0,
  kDoubleAngleFailed = 1u << 1,
  kJacquetBlondelFailed = 1u << 2,
  kRadiative = 1u << 3,
  kUnusable = 1u << 4,
};

std::uint8_t failure_flag(Method m);

struct GeneratedEvent {
  KinematicTriplet truth;
  FeatureVector features{};
  std::uint8_t flags = 0;

  bool radiative() const { return (flags & kRadiative) != 0; }
  bool usable() const { return (flags & kUnusable) == 0; }
};

KinematicTriplet sample_truth(const GeneratorConfig& cfg, std::mt19937_64& rng);

/// Exact electron and hadronic-final-state momenta for a truth triplet, with
/// the electron at azimuth phi_e. Throws DomainError for y outside (0, 1).
std::pair<ElectronState, HfsState> build_states(const KinematicTriplet& truth, const BeamConfig& beam,
                                                double phi_e = 0.0);

/// Smeared copies of the states, or nullopt when 100 attempts in a row give
/// an unphysical configuration. Zero resolutions leave the states bit-exact.
std::optional<std::pair<ElectronState, HfsState>> apply_smearing(const ElectronState& e, const HfsState& h,
                                                                 const SmearingConfig& cfg, std::mt19937_64& rng);

/// Draws whether the event radiates and, if so, the photon. The returned
/// electron beam energy is the one to build the detector-level states with.
struct RadiationDraw {
  double effective_e0;
  std::optional<PhotonRecord> photon;
  bool overlaps_electron = false;
};
RadiationDraw draw_radiation(const RadiationConfig& cfg, const BeamConfig& beam, std::mt19937_64& rng);

/// One event from the stream derived from (cfg.seed, index).
GeneratedEvent generate_event(const GeneratorConfig& cfg, std::uint64_t index);

/// Events 0..n-1 in index order; parallel over contiguous index ranges.
std::vector<GeneratedEvent> generate_events(const GeneratorConfig& cfg, std::size_t n, unsigned threads = 0);

struct Dataset {
  GeneratorConfig config;
  std::vector<GeneratedEvent> events;
};

inline constexpr int kDatasetFormatVersion = 1;

/// Text header then rows of 18 little-endian float64 values (features, x, Q^2,
/// y) followed by one flag byte.
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);

/// generate_events + write_dataset. n == 0 is a configuration error.
Dataset generate_dataset(const GeneratorConfig& cfg, std::size_t n, const std::filesystem::path& path,
                         unsigned threads = 0);

}  // namespace eluq
