#pragma once

// DIS kinematics, the detector-level feature vector and the classical
// reconstruction methods. The z axis points along the proton beam; the
// electron beam travels towards -z with energy E0.

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace eluq {

class BeamConfig {
 public:
  BeamConfig(double electron_energy = 27.6, double proton_energy = 920.0);

  double electron_energy() const { return e0_; }
  double proton_energy() const { return ep_; }
  /// Massless-beam squared centre-of-mass energy 4 E0 Ep.
  double s() const { return s_; }

  void set_energies(double electron_energy, double proton_energy);

 private:
  double e0_;
  double ep_;
  double s_;
};

struct KinematicTriplet {
  double x = 0.0;
  double q2 = 0.0;
  double y = 0.0;
};

inline constexpr std::size_t kNumFeatures = 15;

enum Feature : std::size_t {
  kPtBal,
  kPzBal,
  kGammaEnergy,
  kGammaEta,
  kGammaDphi,
  kEcalConeRatio,
  kEcalClusterCount,
  kPtE,
  kPzE,
  kEE,
  kT,
  kPzH,
  kEH,
  kDphiEH,
  kDeltaSigma,
};

/// Canonical column names, in feature order.
const std::array<std::string_view, kNumFeatures>& feature_names();

using FeatureVector = std::array<double, kNumFeatures>;

struct ElectronState {
  double pt = 0.0;
  double pz = 0.0;
  double energy = 0.0;
  double phi = 0.0;
  double sigma() const { return energy - pz; }
};

struct HfsState {
  double pt = 0.0;  // T
  double pz = 0.0;
  double energy = 0.0;
  double phi = 0.0;
  double sigma() const { return energy - pz; }
};

/// Radiated photon and calorimeter proxies attached to a radiative event.
struct PhotonRecord {
  double energy = 0.0;
  double eta = 0.0;
  double dphi = 0.0;  // relative to the scattered electron
  double cone_ratio = 1.0;
  double cluster_count = 1.0;
};

/// Maps an angle into (-pi, pi].
double wrap_angle(double phi);

/// Q^2 = s x y. Throws DomainError unless 0 < x < 1 and 0 < y < 1.
double q2_from_sxy(double x, double y, const BeamConfig& beam);

FeatureVector compute_features(const ElectronState& e, const HfsState& h, const std::optional<PhotonRecord>& photon,
                               const BeamConfig& beam);

enum class Method { kElectron, kDoubleAngle, kJacquetBlondel };

std::string_view method_name(Method m);

/// Outcome of a classical reconstruction. `ok` is false when the inputs fall
/// outside the method's domain; the triplet is then zero-filled, never NaN.
struct Reconstruction {
  bool ok = false;
  KinematicTriplet triplet;
};

Reconstruction electron_method(const FeatureVector& f, const BeamConfig& beam);
Reconstruction jb_method(const FeatureVector& f, const BeamConfig& beam);
Reconstruction da_method(const FeatureVector& f, const BeamConfig& beam);
Reconstruction reconstruct(Method m, const FeatureVector& f, const BeamConfig& beam);

}  // namespace eluq
