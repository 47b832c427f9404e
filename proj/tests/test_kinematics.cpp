#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "eluq/errors.hpp"
#include "eluq/generator.hpp"
#include "eluq/kinematics.hpp"

using namespace eluq;

namespace {

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

FeatureVector noiseless_features(const KinematicTriplet& t, const BeamConfig& beam, double phi = 0.3) {
  auto [e, h] = build_states(t, beam, phi);
  return compute_features(e, h, std::nullopt, beam);
}

KinematicTriplet truth_at(double x, double y, const BeamConfig& beam) { return {x, beam.s() * x * y, y}; }

}  // namespace

TEST_CASE("Q2 from s, x and y") {
  BeamConfig unit(0.5, 50.0);  // s = 100
  CHECK(unit.s() == 100.0);
  CHECK(q2_from_sxy(0.1, 0.1, unit) == doctest::Approx(1.0).epsilon(1e-15));
  BeamConfig hera;
  CHECK(hera.s() == doctest::Approx(101568.0).epsilon(1e-15));
  CHECK(rel(q2_from_sxy(0.019691, 0.5, hera), 1000.0) < 1e-4);
  CHECK_THROWS_AS(q2_from_sxy(0.0, 0.5, hera), DomainError);
  CHECK_THROWS_AS(q2_from_sxy(0.1, 1.0, hera), DomainError);
}

TEST_CASE("beam energies recompute s") {
  BeamConfig b;
  b.set_energies(10.0, 100.0);
  CHECK(b.s() == 4000.0);
  CHECK_THROWS_AS(b.set_energies(-1.0, 100.0), ConfigError);
}

TEST_CASE("classical methods invert a noiseless event") {
  BeamConfig beam;
  KinematicTriplet t{1000.0 / (beam.s() * 0.5), 1000.0, 0.5};
  auto f = noiseless_features(t, beam);
  for (Method m : {Method::kElectron, Method::kDoubleAngle, Method::kJacquetBlondel}) {
    auto r = reconstruct(m, f, beam);
    INFO(method_name(m));
    REQUIRE(r.ok);
    CHECK(rel(r.triplet.x, t.x) < 1e-9);
    CHECK(rel(r.triplet.q2, t.q2) < 1e-9);
    CHECK(rel(r.triplet.y, t.y) < 1e-9);
  }
}

TEST_CASE("classical methods invert a grid of noiseless events") {
  BeamConfig beam;
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    for (int j = 0; j < 10; ++j) {
      const double y = 0.01 * std::pow(80.0, j / 9.0);
      const double x = 2e-3 * std::pow(100.0, i / 9.0) * 0.99;
      const KinematicTriplet t = truth_at(x, y, beam);
      auto f = noiseless_features(t, beam, 0.1 * i - 0.4);
      for (Method m : {Method::kElectron, Method::kDoubleAngle, Method::kJacquetBlondel}) {
        auto r = reconstruct(m, f, beam);
        REQUIRE(r.ok);
        worst = std::max({worst, rel(r.triplet.x, t.x), rel(r.triplet.q2, t.q2), rel(r.triplet.y, t.y)});
      }
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("reconstructed triplets satisfy Q2 = s x y") {
  GeneratorConfig cfg;
  for (std::uint64_t i = 0; i < 2000; ++i) {
    auto ev = generate_event(cfg, i);
    for (Method m : {Method::kElectron, Method::kDoubleAngle, Method::kJacquetBlondel}) {
      auto r = reconstruct(m, ev.features, cfg.beam);
      if (!r.ok) {
        CHECK(r.triplet.x == 0.0);
        continue;
      }
      CHECK(std::isfinite(r.triplet.x));
      CHECK(rel(cfg.beam.s() * r.triplet.x * r.triplet.y, r.triplet.q2) < 1e-14);
    }
  }
}

TEST_CASE("electron method boundaries and homogeneity") {
  BeamConfig beam;
  auto f = noiseless_features(truth_at(0.01, 0.3, beam), beam);
  FeatureVector edge = f;
  // Sigma_e = E - pz = 2 E0 gives y = 0.
  edge[kPzE] = edge[kEE] - 2.0 * beam.electron_energy();
  CHECK_FALSE(electron_method(edge, beam).ok);

  auto base = electron_method(f, beam);
  FeatureVector scaled = f;
  scaled[kPtE] *= 1.7;
  auto r = electron_method(scaled, beam);
  REQUIRE(r.ok);
  CHECK(r.triplet.y == base.triplet.y);
  CHECK(r.triplet.q2 == doctest::Approx(base.triplet.q2 * 1.7 * 1.7).epsilon(1e-13));
}

TEST_CASE("Jacquet-Blondel fails when the hadronic Sigma vanishes") {
  BeamConfig beam;
  auto f = noiseless_features(truth_at(0.01, 0.3, beam), beam);
  f[kDeltaSigma] = f[kEE] - f[kPzE];
  CHECK_FALSE(jb_method(f, beam).ok);
}

TEST_CASE("double angle is energy-scale invariant and symmetric") {
  BeamConfig beam;
  auto f = noiseless_features(truth_at(0.02, 0.4, beam), beam);
  auto base = da_method(f, beam);
  FeatureVector scaled = f;
  const double lambda = 1.3;
  for (auto k : {kPtE, kPzE, kEE, kT, kDeltaSigma}) scaled[k] *= lambda;
  auto r = da_method(scaled, beam);
  REQUIRE(r.ok);
  CHECK(rel(r.triplet.x, base.triplet.x) < 1e-13);
  CHECK(rel(r.triplet.q2, base.triplet.q2) < 1e-13);
  CHECK(rel(r.triplet.y, base.triplet.y) < 1e-13);

  // tan(theta/2) = Sigma_e / pT_e equal to tan(gamma/2) = Sigma / T.
  FeatureVector sym{};
  sym[kPtE] = 10.0;
  sym[kEE] = 6.0;
  sym[kPzE] = 1.0;  // Sigma_e = 5
  sym[kT] = 4.0;
  sym[kDeltaSigma] = 3.0;  // Sigma = 2
  auto s = da_method(sym, beam);
  REQUIRE(s.ok);
  CHECK(s.triplet.y == 0.5);

  FeatureVector degenerate{};
  CHECK_FALSE(da_method(degenerate, beam).ok);
}

TEST_CASE("noiseless features are balanced and back to back") {
  BeamConfig beam;
  for (double y : {0.02, 0.2, 0.7}) {
    auto f = noiseless_features(truth_at(0.05, y, beam), beam, 2.9);
    CHECK(f[kPtBal] == 0.0);
    CHECK(std::abs(f[kPzBal]) < 1e-14);
    CHECK(std::abs(f[kDphiEH]) == doctest::Approx(std::numbers::pi).epsilon(1e-15));
    CHECK(f[kGammaEnergy] == 0.0);
    CHECK(f[kEcalClusterCount] == 1.0);
  }
}

TEST_CASE("feature order matches the canonical names") {
  const auto& names = feature_names();
  CHECK(names[kPtBal] == "pT_bal");
  CHECK(names[kEcalClusterCount] == "ecal_cluster_count");
  CHECK(names[kDeltaSigma] == "delta_sigma");
  CHECK(names.size() == 15);
}

TEST_CASE("zero hadronic transverse momentum is a domain error") {
  ElectronState e{10.0, -5.0, 20.0, 0.0};
  HfsState h{0.0, 5.0, 30.0, 0.0};
  CHECK_THROWS_AS(compute_features(e, h, std::nullopt, BeamConfig{}), DomainError);
}

TEST_CASE("wrapped angles lie in (-pi, pi]") {
  const double pi = std::numbers::pi;
  CHECK(wrap_angle(pi) == pi);
  CHECK(wrap_angle(-pi) == pi);
  CHECK(wrap_angle(3 * pi) == doctest::Approx(pi));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int i = 0; i < 10000; ++i) {
    const double a = u(rng);
    const double w = wrap_angle(a);
    CHECK(w > -pi);
    CHECK(w <= pi);
    CHECK(std::abs(std::remainder(a - w, 2 * pi)) < 1e-9);
  }
}

TEST_CASE("smeared pT balance spread matches the injected energy resolution") {
  // Energy smearing only: pT_bal = 1 - f_e / f_h with independent factors, so
  // to first order its variance is sigma_e^2 + sigma_h^2 per event.
  GeneratorConfig cfg;
  cfg.smearing.electron_angle = 0.0;
  cfg.smearing.hfs_angle = 0.0;
  cfg.radiation.isr_probability = 0.0;
  std::mt19937_64 rng(44);
  const int n = 100000;
  double s = 0, s2 = 0, predicted = 0;
  for (int i = 0; i < n; ++i) {
    auto t = sample_truth(cfg, rng);
    auto [e, h] = build_states(t, cfg.beam);
    auto sm = apply_smearing(e, h, cfg.smearing, rng);
    REQUIRE(sm);
    auto f = compute_features(sm->first, sm->second, std::nullopt, cfg.beam);
    s += f[kPtBal];
    s2 += f[kPtBal] * f[kPtBal];
    const double se = SmearingConfig::relative_resolution(0.10, 0.01, e.energy);
    const double sh = SmearingConfig::relative_resolution(0.50, 0.05, h.energy);
    predicted += se * se + sh * sh;
  }
  const double mean = s / n;
  const double rms = std::sqrt(s2 / n - mean * mean);
  const double expected = std::sqrt(predicted / n);
  CHECK(std::abs(mean) < 0.1 * expected);
  CHECK(std::abs(rms / expected - 1.0) < 0.10);
}
