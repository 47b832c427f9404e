#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <cstring>
#include <random>

#include "doctest.h"
#include "eluq/errors.hpp"
#include "eluq/generator.hpp"

using namespace eluq;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "eluq_test_generator";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

GeneratorConfig noiseless() {
  GeneratorConfig cfg;
  cfg.smearing = SmearingConfig{0, 0, 0, 0, 0, 0};
  cfg.radiation.isr_probability = 0.0;
  return cfg;
}

double rms(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s / v.size());
}

}  // namespace

TEST_CASE("degenerate ranges force the sampled point") {
  GeneratorConfig cfg;
  cfg.law = SamplingLaw::kLogXLogY;
  cfg.x_min = cfg.x_max = 0.02;
  cfg.y_min = cfg.y_max = 0.5;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) {
    auto t = sample_truth(cfg, rng);
    CHECK(t.x == 0.02);
    CHECK(t.y == 0.5);
    CHECK(t.q2 == doctest::Approx(1015.68).epsilon(1e-13));
  }
}

TEST_CASE("log x marginal is uniform under the log-uniform law") {
  GeneratorConfig cfg;
  cfg.law = SamplingLaw::kLogXLogY;
  cfg.q2_min = 1e-12;
  cfg.q2_max = 1e12;
  cfg.x_max = 0.999;
  std::mt19937_64 rng(2);
  const int n = 1000000;
  std::vector<double> u(n);
  const double lo = std::log(cfg.x_min), hi = std::log(cfg.x_max);
  for (double& v : u) v = (std::log(sample_truth(cfg, rng).x) - lo) / (hi - lo);
  std::sort(u.begin(), u.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) ks = std::max({ks, std::abs(u[i] - double(i) / n), std::abs(u[i] - double(i + 1) / n)});
  CHECK(ks < 0.01);
}

TEST_CASE("default sampling stays in the analysis y range and Q2 window") {
  GeneratorConfig cfg;
  std::mt19937_64 rng(3);
  int bins[5] = {0, 0, 0, 0, 0};
  const double edges[6] = {0.01, 0.05, 0.1, 0.2, 0.5, 0.8};
  for (int i = 0; i < 20000; ++i) {
    auto t = sample_truth(cfg, rng);
    REQUIRE(t.y >= 0.01);
    REQUIRE(t.y <= 0.8);
    REQUIRE(t.q2 >= 200.0);
    REQUIRE(t.q2 <= 5e4);
    for (int b = 0; b < 5; ++b)
      if (t.y >= edges[b] && t.y < edges[b + 1]) ++bins[b];
  }
  for (int b = 0; b < 5; ++b) CHECK(bins[b] > 0);
}

TEST_CASE("empty phase space is a configuration error") {
  GeneratorConfig cfg;
  cfg.law = SamplingLaw::kLogXLogY;
  cfg.x_min = cfg.x_max = 1e-3;
  cfg.y_min = cfg.y_max = 0.01;  // Q2 ~ 1, below q2_min
  std::mt19937_64 rng(4);
  CHECK_THROWS_AS(sample_truth(cfg, rng), ConfigError);
}

TEST_CASE("build_states reproduces the reference event") {
  BeamConfig beam;
  KinematicTriplet t{0.019691, 1000.0, 0.5};
  auto [e, h] = build_states(t, beam);
  CHECK(e.sigma() == doctest::Approx(27.6).epsilon(1e-14));
  CHECK(e.pt == doctest::Approx(std::sqrt(500.0)).epsilon(1e-14));
  CHECK(h.sigma() == doctest::Approx(2.0 * 27.6 * 0.5).epsilon(1e-12));
  CHECK(e.energy + h.energy == 27.6 + 920.0);
  CHECK(e.pz + h.pz == doctest::Approx(920.0 - 27.6).epsilon(1e-15));
  auto r = electron_method(compute_features(e, h, std::nullopt, beam), beam);
  REQUIRE(r.ok);
  CHECK(std::abs(r.triplet.q2 / 1000.0 - 1.0) < 1e-9);
  CHECK(std::abs(r.triplet.y / 0.5 - 1.0) < 1e-9);

  auto [e0, h0] = build_states({1e-4, 1000.0, 1e-7}, beam);
  CHECK(e0.pt == doctest::Approx(std::sqrt(1000.0)).epsilon(1e-6));
  CHECK(e0.sigma() == doctest::Approx(2 * 27.6).epsilon(1e-6));
  CHECK_THROWS_AS(build_states({0.1, 1000.0, 1.0}, beam), DomainError);
}

TEST_CASE("zero resolutions leave the states bit-exact") {
  BeamConfig beam;
  auto [e, h] = build_states({0.01, 800.0, 0.3}, beam, 1.1);
  std::mt19937_64 rng(5);
  auto sm = apply_smearing(e, h, SmearingConfig{0, 0, 0, 0, 0, 0}, rng);
  REQUIRE(sm);
  CHECK(std::memcmp(&sm->first, &e, sizeof e) == 0);
  CHECK(std::memcmp(&sm->second, &h, sizeof h) == 0);
}

TEST_CASE("electron energy smearing matches the resolution model") {
  GeneratorConfig cfg;
  std::mt19937_64 rng(6);
  double resid2 = 0.0, pred2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto t = sample_truth(cfg, rng);
    auto [e, h] = build_states(t, cfg.beam);
    auto sm = apply_smearing(e, h, cfg.smearing, rng);
    REQUIRE(sm);
    const double r = sm->first.energy / e.energy - 1.0;
    resid2 += r * r;
    const double s = SmearingConfig::relative_resolution(0.10, 0.01, e.energy);
    pred2 += s * s;
  }
  CHECK(std::abs(std::sqrt(resid2 / pred2) - 1.0) < 0.05);
}

TEST_CASE("resolution hierarchy across y") {
  GeneratorConfig cfg;
  cfg.radiation.isr_probability = 0.0;
  auto events = generate_events(cfg, 60000);
  std::vector<double> jb_low, el_high, el_low;
  for (const auto& ev : events) {
    if (!ev.usable()) continue;
    auto el = electron_method(ev.features, cfg.beam);
    auto jb = jb_method(ev.features, cfg.beam);
    if (ev.truth.y < 0.05) {
      if (jb.ok) jb_low.push_back(jb.triplet.y / ev.truth.y - 1.0);
      if (el.ok) el_low.push_back(el.triplet.y / ev.truth.y - 1.0);
    } else if (ev.truth.y > 0.5) {
      if (el.ok) el_high.push_back(el.triplet.y / ev.truth.y - 1.0);
    }
  }
  REQUIRE(jb_low.size() > 100);
  REQUIRE(el_high.size() > 100);
  CHECK(rms(jb_low) > rms(el_high));
  // Heteroskedastic: the electron method's spread varies by more than 2x.
  CHECK(rms(el_low) > 2.0 * rms(el_high));
}

TEST_CASE("no radiation means empty photon features and balanced pz") {
  GeneratorConfig cfg = noiseless();
  for (std::uint64_t i = 0; i < 500; ++i) {
    auto ev = generate_event(cfg, i);
    CHECK_FALSE(ev.radiative());
    CHECK(ev.features[kGammaEnergy] == 0.0);
    CHECK(ev.features[kGammaEta] == 0.0);
    CHECK(ev.features[kGammaDphi] == 0.0);
    CHECK(std::abs(ev.features[kPzBal]) < 1e-13);
  }
}

TEST_CASE("radiated noiseless events carry pz imbalance E_gamma / E0") {
  GeneratorConfig cfg = noiseless();
  cfg.radiation.isr_probability = 1.0;
  int overlapping = 0;
  for (std::uint64_t i = 0; i < 500; ++i) {
    auto ev = generate_event(cfg, i);
    REQUIRE(ev.radiative());
    const double eg = ev.features[kGammaEnergy];
    CHECK(eg > 0.0);
    CHECK(ev.features[kPzBal] == doctest::Approx(eg / 27.6).epsilon(1e-11));
    CHECK(ev.features[kEcalClusterCount] >= 1.0);
    if (ev.features[kEcalConeRatio] > 1.0) {
      ++overlapping;
      CHECK(ev.features[kEcalConeRatio] == doctest::Approx(1.0 + eg / ev.features[kEE]));
    }
  }
  CHECK(overlapping > 100);
  CHECK(overlapping < 200);
}

TEST_CASE("radiation biases the electron method upwards in y") {
  GeneratorConfig cfg;
  cfg.radiation.isr_probability = 0.5;
  auto events = generate_events(cfg, 100000);
  const double edges[6] = {0.01, 0.05, 0.1, 0.2, 0.5, 0.8};
  for (int b = 0; b < 5; ++b) {
    double bias[2] = {0, 0};
    int count[2] = {0, 0};
    for (const auto& ev : events) {
      if (!ev.usable() || ev.truth.y < edges[b] || ev.truth.y >= edges[b + 1]) continue;
      auto r = electron_method(ev.features, cfg.beam);
      if (!r.ok) continue;
      const int k = ev.radiative() ? 1 : 0;
      bias[k] += r.triplet.y - ev.truth.y;
      ++count[k];
    }
    INFO("y bin " << b);
    REQUIRE(count[0] > 50);
    REQUIRE(count[1] > 50);
    CHECK(bias[1] / count[1] > bias[0] / count[0]);
  }
}

TEST_CASE("dataset files are deterministic and round-trip") {
  GeneratorConfig cfg;
  cfg.seed = 77;
  auto a = temp_path("a.bin");
  auto b = temp_path("b.bin");
  auto data = generate_dataset(cfg, 3000, a, 4);
  generate_dataset(cfg, 3000, b, 1);
  CHECK(slurp(a) == slurp(b));

  Dataset back = read_dataset(a);
  REQUIRE(back.events.size() == 3000);
  CHECK(back.config.seed == 77);
  CHECK(back.config.to_key_values() == cfg.to_key_values());
  for (std::size_t i = 0; i < 3000; ++i) {
    CHECK(back.events[i].features == data.events[i].features);
    CHECK(back.events[i].truth.q2 == data.events[i].truth.q2);
    CHECK(back.events[i].flags == data.events[i].flags);
  }

  cfg.seed = 78;
  generate_dataset(cfg, 3000, b, 1);
  CHECK(slurp(a) != slurp(b));
}

TEST_CASE("dataset errors") {
  GeneratorConfig cfg;
  CHECK_THROWS_AS(generate_dataset(cfg, 0, temp_path("zero.bin")), ConfigError);
  CHECK_THROWS_AS(generate_dataset(cfg, 10, "/nonexistent_dir_eluq/x.bin"), IoError);
  CHECK_THROWS_AS(read_dataset(temp_path("missing.bin")), IoError);

  auto p = temp_path("trunc.bin");
  generate_dataset(cfg, 20, p);
  std::string bytes = slurp(p);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() - 30);
  }
  CHECK_THROWS_AS(read_dataset(p), FormatError);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << "not a dataset\n";
  }
  CHECK_THROWS_AS(read_dataset(p), FormatError);
}

TEST_CASE("config keys round-trip and unknown keys are rejected") {
  GeneratorConfig cfg;
  GeneratorConfig other;
  other.x_min = 0.5;
  other.law = SamplingLaw::kLogXLogY;
  for (const auto& [k, v] : cfg.to_key_values()) other.set(k, v);
  CHECK(other.to_key_values() == cfg.to_key_values());
  CHECK_THROWS_AS(other.set("bogus", "1"), ConfigError);
  CHECK_THROWS_AS(other.set("x_min", "abc"), ConfigError);
  other.radiation.isr_probability = 1.5;
  CHECK_THROWS_AS(other.validate(), ConfigError);
}

TEST_CASE("a million default events all satisfy Q2 = s x y") {
  GeneratorConfig cfg;
  auto events = generate_events(cfg, 1000000);
  double worst = 0.0;
  std::size_t finite = 0;
  for (const auto& ev : events) {
    worst = std::max(worst, std::abs(cfg.beam.s() * ev.truth.x * ev.truth.y - ev.truth.q2) / ev.truth.q2);
    bool ok = true;
    for (double f : ev.features) ok = ok && std::isfinite(f);
    finite += ok;
  }
  CHECK(worst < 1e-12);
  CHECK(finite == events.size());
}

TEST_CASE("CSV export has a header and one line per event") {
  GeneratorConfig cfg;
  Dataset d{cfg, generate_events(cfg, 5)};
  auto p = temp_path("x.csv");
  write_dataset_csv(p, d);
  std::string s = slurp(p);
  CHECK(std::count(s.begin(), s.end(), '\n') == 6);
  CHECK(s.rfind("pT_bal,pz_bal,", 0) == 0);
}
