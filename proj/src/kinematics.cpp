#include "eluq/kinematics.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "eluq/errors.hpp"

namespace eluq {
namespace {

bool finite_all(const KinematicTriplet& t) {
  return std::isfinite(t.x) && std::isfinite(t.q2) && std::isfinite(t.y);
}

// Completes the triplet from (Q^2, y) and rejects anything unphysical.
Reconstruction finish(double q2, double y, const BeamConfig& beam) {
  Reconstruction r;
  if (!(y > 0.0 && y < 1.0) || !(q2 > 0.0)) return r;
  KinematicTriplet t{q2 / (beam.s() * y), q2, y};
  if (!finite_all(t) || !(t.x > 0.0)) return r;
  r.ok = true;
  r.triplet = t;
  return r;
}

double electron_sigma(const FeatureVector& f) { return f[kEE] - f[kPzE]; }
double hadron_sigma(const FeatureVector& f) { return electron_sigma(f) - f[kDeltaSigma]; }

}  // namespace

BeamConfig::BeamConfig(double electron_energy, double proton_energy) { set_energies(electron_energy, proton_energy); }

void BeamConfig::set_energies(double electron_energy, double proton_energy) {
  if (!(electron_energy > 0.0) || !(proton_energy > 0.0)) {
    throw ConfigError("BeamConfig: beam energies must be positive");
  }
  e0_ = electron_energy;
  ep_ = proton_energy;
  s_ = 4.0 * e0_ * ep_;
}

const std::array<std::string_view, kNumFeatures>& feature_names() {
  static const std::array<std::string_view, kNumFeatures> names = {
      "pT_bal", "pz_bal", "gamma_energy", "gamma_eta", "gamma_dphi", "ecal_cone_ratio", "ecal_cluster_count", "pT_e",
      "pz_e",   "E_e",    "T",            "Pz_h",      "E_h",        "dphi_eh",         "delta_sigma"};
  return names;
}

double wrap_angle(double phi) {
  constexpr double pi = std::numbers::pi;
  double w = std::remainder(phi, 2.0 * pi);  // [-pi, pi]
  if (w <= -pi) w += 2.0 * pi;
  return w;
}

double q2_from_sxy(double x, double y, const BeamConfig& beam) {
  if (!(x > 0.0 && x < 1.0)) throw DomainError("q2_from_sxy: x must lie in (0, 1), got " + std::to_string(x));
  if (!(y > 0.0 && y < 1.0)) throw DomainError("q2_from_sxy: y must lie in (0, 1), got " + std::to_string(y));
  return beam.s() * x * y;
}

FeatureVector compute_features(const ElectronState& e, const HfsState& h, const std::optional<PhotonRecord>& photon,
                               const BeamConfig& beam) {
  if (!(h.pt > 0.0)) throw DomainError("compute_features: hadronic transverse momentum T must be positive");
  FeatureVector f{};
  const double sigma_e = e.sigma();
  const double sigma_h = h.sigma();
  f[kPtBal] = 1.0 - e.pt / h.pt;
  f[kPzBal] = 1.0 - (sigma_e + sigma_h) / (2.0 * beam.electron_energy());
  if (photon) {
    f[kGammaEnergy] = photon->energy;
    f[kGammaEta] = photon->eta;
    f[kGammaDphi] = wrap_angle(photon->dphi);
    f[kEcalConeRatio] = photon->cone_ratio;
    f[kEcalClusterCount] = photon->cluster_count;
  } else {
    f[kEcalConeRatio] = 1.0;
    f[kEcalClusterCount] = 1.0;
  }
  f[kPtE] = e.pt;
  f[kPzE] = e.pz;
  f[kEE] = e.energy;
  f[kT] = h.pt;
  f[kPzH] = h.pz;
  f[kEH] = h.energy;
  f[kDphiEH] = wrap_angle(e.phi - h.phi);
  f[kDeltaSigma] = sigma_e - sigma_h;
  return f;
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kElectron: return "EL";
    case Method::kDoubleAngle: return "DA";
    case Method::kJacquetBlondel: return "JB";
  }
  return "?";
}

Reconstruction electron_method(const FeatureVector& f, const BeamConfig& beam) {
  const double sigma_e = electron_sigma(f);
  const double pt = f[kPtE];
  if (!(pt > 0.0) || !(sigma_e > 0.0)) return {};
  const double y = 1.0 - sigma_e / (2.0 * beam.electron_energy());
  if (!(y > 0.0 && y < 1.0)) return {};
  return finish(pt * pt / (1.0 - y), y, beam);
}

Reconstruction jb_method(const FeatureVector& f, const BeamConfig& beam) {
  const double sigma = hadron_sigma(f);
  const double t = f[kT];
  if (!(t > 0.0) || !(sigma > 0.0)) return {};
  const double y = sigma / (2.0 * beam.electron_energy());
  if (!(y > 0.0 && y < 1.0)) return {};
  return finish(t * t / (1.0 - y), y, beam);
}

Reconstruction da_method(const FeatureVector& f, const BeamConfig& beam) {
  const double sigma_e = electron_sigma(f);
  const double sigma = hadron_sigma(f);
  const double pt = f[kPtE];
  const double t = f[kT];
  if (!(pt > 0.0) || !(t > 0.0) || !(sigma_e > 0.0) || !(sigma > 0.0)) return {};
  const double tan_theta = sigma_e / pt;  // tan(theta_e / 2)
  const double tan_gamma = sigma / t;     // tan(gamma_h / 2)
  const double denom = tan_theta + tan_gamma;
  if (!(denom > 0.0)) return {};
  const double y = tan_gamma / denom;
  const double e0 = beam.electron_energy();
  const double q2 = 4.0 * e0 * e0 / (tan_theta * denom);
  return finish(q2, y, beam);
}

Reconstruction reconstruct(Method m, const FeatureVector& f, const BeamConfig& beam) {
  switch (m) {
    case Method::kElectron: return electron_method(f, beam);
    case Method::kDoubleAngle: return da_method(f, beam);
    case Method::kJacquetBlondel: return jb_method(f, beam);
  }
  return {};
}

}  // namespace eluq
