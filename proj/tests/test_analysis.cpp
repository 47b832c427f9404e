#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "eluq/analysis.hpp"
#include "eluq/errors.hpp"

using namespace eluq;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  Dataset data;
  std::vector<std::size_t> events;
  FeatureScaler features;
  TargetScaler targets;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.data.config.seed = 11;
    out.data.events = generate_events(out.data.config, 400, 1);
    std::vector<FeatureVector> fv;
    std::vector<KinematicTriplet> tv;
    for (std::size_t i = 0; i < out.data.events.size(); ++i) {
      if (!out.data.events[i].usable()) continue;
      out.events.push_back(i);
      fv.push_back(out.data.events[i].features);
      tv.push_back(out.data.events[i].truth);
    }
    out.features.fit(fv);
    out.targets.fit(tv);
    return out;
  }();
  return f;
}

NetworkConfig tiny(ModelKind kind = ModelKind::kEluq) {
  NetworkConfig cfg;
  cfg.kind = kind;
  cfg.trunk_widths = {16, 16};
  cfg.head_widths = {8};
  cfg.mnf.flow_hidden = 4;
  cfg.mnf.init_log_var = -7.0;
  cfg.log_var_head = true;
  return cfg;
}

std::vector<std::size_t> first_events(std::size_t n) {
  const auto& ev = fixture().events;
  return {ev.begin(), ev.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<PredictionRecord> run(const Regressor& model, const std::vector<std::size_t>& events,
                                  std::size_t n_samples, std::uint64_t seed = 1, std::size_t batch = 100,
                                  unsigned threads = 1) {
  InferenceConfig cfg;
  cfg.n_samples = n_samples;
  cfg.seed = seed;
  cfg.batch_size = batch;
  cfg.threads = threads;
  const Fixture& f = fixture();
  return sample_posterior(model, f.features, f.targets, f.data, events, cfg);
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// Records whose predictions scatter around truth with a known relative width.
PredictionRecord synthetic_record(std::uint64_t id, const KinematicTriplet& truth, double width, double shift,
                                  double draw_x, double draw_q2, double draw_y) {
  PredictionRecord r;
  r.event_id = id;
  r.truth = as_array(truth);
  const Triplet draws{draw_x, draw_q2, draw_y};
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    r.prediction[j] = r.truth[j] * (1.0 + shift + width * draws[j]);
    r.sigma_ale[j] = width * r.truth[j];
    r.sigma_epi[j] = 0.1 * width * r.truth[j];
    r.sigma_tot[j] = std::hypot(r.sigma_ale[j], r.sigma_epi[j]);
  }
  for (std::size_t m = 0; m < kNumMethods; ++m) {
    r.classical_ok[m] = true;
    for (std::size_t j = 0; j < kNumTargets; ++j) r.classical[m][j] = r.truth[j] * (1.0 + 0.01 * (m + 1) * draws[j]);
  }
  return r;
}

std::vector<PredictionRecord> synthetic_records(std::size_t n, std::uint64_t seed, double width = 0.05) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ly(std::log(0.01), std::log(0.8));
  std::uniform_real_distribution<double> lx(std::log(1e-3), std::log(0.5));
  std::normal_distribution<double> g;
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    KinematicTriplet t;
    t.y = std::exp(ly(rng));
    t.x = std::exp(lx(rng));
    t.q2 = 101200.0 * t.x * t.y;
    const double a = g(rng), b = g(rng), c = g(rng);
    out.push_back(synthetic_record(i, t, width, 0.0, a, b, c));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "eluq_test_analysis" / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

}  // namespace

// ---- posterior sampling -----------------------------------------------------

TEST_CASE("degenerate posterior gives no spread and the deterministic prediction") {
  NetworkConfig cfg = tiny();
  cfg.mnf.mode = PosteriorMode::kMeanField;
  cfg.mnf.log_var_cap = -60.0;
  EluqNetwork net(cfg, 5);
  for (const auto& p : net.parameters()) {
    if (p.name.ends_with("log_var_weights") || p.name.ends_with("log_var_bias")) {
      Tensor t = p.tensor;
      for (double& v : t.data()) v = -80.0;
    }
  }
  NetworkConfig dcfg = cfg;
  dcfg.kind = ModelKind::kDnn;
  DnnBaseline dnn(dcfg, 1);
  dnn.copy_means_from(net);

  const auto events = first_events(50);
  const auto a = run(net, events, 20);
  const auto b = run(dnn, events, 20);
  double worst_epi = 0.0, worst_pred = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      worst_epi = std::max(worst_epi, a[i].sigma_epi[j]);
      worst_pred = std::max(worst_pred, rel(a[i].prediction[j], b[i].prediction[j]));
    }
  }
  CHECK(worst_epi < 1e-6);
  CHECK(worst_pred < 1e-9);
}

TEST_CASE("aleatoric sigma matches a numerical derivative of the inverse target map") {
  DnnBaseline dnn(tiny(ModelKind::kDnn), 3);
  const auto events = first_events(30);
  const auto rec = run(dnn, events, 2);
  const Fixture& f = fixture();

  std::vector<double> x;
  for (std::size_t e : events) {
    const FeatureVector fv = f.features.transform(f.data.events[e].features);
    x.insert(x.end(), fv.begin(), fv.end());
  }
  NoiseSource noise(0);
  const Prediction p = dnn.forward_eval(Tensor({events.size(), kNumFeatures}, x), noise);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    std::array<double, 3> v{p.value.values()[3 * i], p.value.values()[3 * i + 1], p.value.values()[3 * i + 2]};
    const Triplet centre = as_array(f.targets.inverse(v));
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      auto up = v, down = v;
      up[j] += h;
      down[j] -= h;
      const double deriv = (as_array(f.targets.inverse(up))[j] - as_array(f.targets.inverse(down))[j]) / (2 * h);
      const double oracle = deriv * std::exp(0.5 * p.log_var.values()[3 * i + j]);
      worst = std::max(worst, rel(rec[i].sigma_ale[j], oracle));
      CHECK(rec[i].prediction[j] == centre[j]);
      CHECK(rec[i].sigma_epi[j] == 0.0);
    }
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("sample means converge within the standard-error bound") {
  EluqNetwork net(tiny(), 8);
  const auto events = first_events(10);
  const auto few = run(net, events, 10, 100);
  const auto many = run(net, events, 2000, 200);
  for (std::size_t i = 0; i < events.size(); ++i) {
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      const double bound = 4.0 * many[i].sigma_epi[j] / std::sqrt(10.0);
      CHECK(std::abs(few[i].prediction[j] - many[i].prediction[j]) <= bound);
    }
  }
}

TEST_CASE("epistemic sigma is stable between N and 2N samples") {
  EluqNetwork net(tiny(), 9);
  const auto events = first_events(100);
  const std::size_t n = 200;
  const auto a = run(net, events, n, 1);
  const auto b = run(net, events, 2 * n, 2);
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    std::vector<double> sa, sb;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sa.push_back(a[i].sigma_epi[j]);
      sb.push_back(b[i].sigma_epi[j]);
    }
    const double ma = median(sa), mb = median(sb);
    CHECK(ma > 0.0);
    CHECK(std::abs(ma - mb) <= 5.0 * ma / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("records satisfy the quadrature identity and carry classical estimates") {
  EluqNetwork net(tiny(), 10);
  const auto events = first_events(120);
  const auto rec = run(net, events, 30);
  const Fixture& f = fixture();
  for (std::size_t i = 0; i < rec.size(); ++i) {
    const PredictionRecord& r = rec[i];
    CHECK(r.event_id == events[i]);
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      CHECK(r.sigma_ale[j] > 0.0);
      CHECK(r.sigma_epi[j] >= 0.0);
      const double a2 = r.sigma_ale[j] * r.sigma_ale[j], e2 = r.sigma_epi[j] * r.sigma_epi[j];
      CHECK(std::abs(r.sigma_tot[j] * r.sigma_tot[j] - (a2 + e2)) <= 1e-12 * (a2 + e2));
    }
    const auto da = da_method(f.data.events[events[i]].features, f.data.config.beam);
    CHECK(r.classical_ok[1] == da.ok);
    CHECK(r.classical[1] == as_array(da.triplet));
  }
}

TEST_CASE("sampling is deterministic and independent of the thread count") {
  EluqNetwork net(tiny(), 12);
  const auto events = first_events(40);
  const auto a = run(net, events, 15, 4, 7, 1);
  const auto b = run(net, events, 15, 4, 7, 3);
  const auto c = run(net, events, 15, 4, 7, 1);
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same = same && a[i].prediction == b[i].prediction && a[i].sigma_tot == b[i].sigma_tot &&
           a[i].prediction == c[i].prediction && a[i].sigma_ale == c[i].sigma_ale;
  }
  CHECK(same);
  const auto d = run(net, events, 15, 5, 7, 1);
  CHECK(d[0].prediction != a[0].prediction);
}

TEST_CASE("inference rejects fewer than two samples") {
  EluqNetwork net(tiny(), 1);
  CHECK_THROWS_AS(run(net, first_events(3), 1), ConfigError);
  InferenceConfig cfg;
  CHECK(cfg.n_samples == 10000);
  CHECK(cfg.batch_size == 100);
  CHECK_THROWS_AS(cfg.set("samples", "3"), ConfigError);
}

TEST_CASE("prediction file round trip and corruption") {
  EluqNetwork net(tiny(), 13);
  PredictionFile file;
  file.inference.n_samples = 5;
  file.info = {{"model", "eluq"}, {"checkpoint", "a.ckpt"}};
  file.records = run(net, first_events(25), 5);
  const fs::path dir = scratch("records");
  fs::create_directories(dir);
  write_predictions(dir / "a.pred", file);
  const PredictionFile back = read_predictions(dir / "a.pred");
  REQUIRE(back.records.size() == file.records.size());
  CHECK(back.inference.n_samples == 5);
  bool same = true;
  for (std::size_t i = 0; i < back.records.size(); ++i) {
    const auto& x = back.records[i];
    const auto& y = file.records[i];
    same = same && x.event_id == y.event_id && x.flags == y.flags && x.truth == y.truth &&
           x.prediction == y.prediction && x.sigma_ale == y.sigma_ale && x.sigma_epi == y.sigma_epi &&
           x.sigma_tot == y.sigma_tot && x.classical == y.classical && x.classical_ok == y.classical_ok;
  }
  CHECK(same);
  write_predictions(dir / "b.pred", back);
  CHECK(slurp(dir / "a.pred") == slurp(dir / "b.pred"));

  std::string bytes = slurp(dir / "a.pred");
  bytes[bytes.size() - 3] ^= 0x10;
  std::ofstream(dir / "c.pred", std::ios::binary) << bytes;
  CHECK_THROWS_AS(read_predictions(dir / "c.pred"), FormatError);
  bytes = slurp(dir / "a.pred");
  std::ofstream(dir / "d.pred", std::ios::binary) << bytes.substr(0, bytes.size() - 10);
  CHECK_THROWS_AS(read_predictions(dir / "d.pred"), FormatError);
  CHECK_THROWS_AS(read_predictions(dir / "missing.pred"), IoError);
}

// ---- weighted average -------------------------------------------------------

TEST_CASE("weighted average examples") {
  const std::vector<double> v{1.0, 3.0};
  WeightedMean w = weighted_average(v, std::vector<double>{1.0, 1.0});
  CHECK(w.mean == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(w.sigma == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(w.event_sigma == doctest::Approx(1.0).epsilon(1e-15));
  w = weighted_average(v, std::vector<double>{1.0, 1000.0});
  CHECK(w.mean == doctest::Approx(1.000002).epsilon(1e-9));

  CHECK_THROWS_AS(weighted_average(v, std::vector<double>{1.0, 0.0}), DomainError);
  CHECK_THROWS_AS(weighted_average(v, std::vector<double>{1.0, -2.0}), DomainError);
  CHECK_THROWS_AS(weighted_average({}, {}), ContractError);
}

TEST_CASE("weighted average against a naive two-pass oracle") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(1.0, 0.3);
  std::uniform_real_distribution<double> u(0.01, 2.0);
  std::vector<double> v(10000), s(10000);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = g(rng);
    s[i] = u(rng);
  }
  double sw = 0.0;
  for (double x : s) sw += 1.0 / (x * x);
  double swv = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) swv += v[i] / (s[i] * s[i]);
  const WeightedMean w = weighted_average(v, s);
  CHECK(rel(w.mean, swv / sw) < 1e-12);
  CHECK(rel(w.sigma, 1.0 / std::sqrt(sw)) < 1e-12);

  // Equal sigmas: arithmetic mean and sigma_w sqrt(N) = sigma0.
  const std::vector<double> same(v.size(), 0.37);
  const WeightedMean e = weighted_average(v, same);
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  CHECK(rel(e.mean, mean) < 1e-12);
  CHECK(rel(e.event_sigma, 0.37) < 1e-12);
}

TEST_CASE("pairwise sum is exact on integers and close to a compensated sum") {
  std::vector<double> v(1000);
  std::iota(v.begin(), v.end(), 1.0);
  CHECK(pairwise_sum(v) == 500500.0);
  std::vector<double> tiny(1 << 20, 0.1);
  CHECK(rel(pairwise_sum(tiny), 0.1 * (1 << 20)) < 1e-14);
}

// ---- rank correlation -------------------------------------------------------

TEST_CASE("spearman with ties uses average ranks") {
  // Ranks (1, 2.5, 2.5, 5, 4) and (1, 3, 2, 4.5, 4.5): r = 9 / 9.5.
  const auto r = spearman(std::vector<double>{0.3, 1.2, 1.2, 4.0, 2.2}, std::vector<double>{1, 3, 2, 5, 5});
  REQUIRE(r.has_value());
  CHECK(*r == doctest::Approx(18.0 / 19.0).epsilon(1e-14));
  CHECK(*spearman(std::vector<double>{1, 2, 3}, std::vector<double>{30, 20, 10}) == doctest::Approx(-1.0));
  CHECK_FALSE(spearman(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}).has_value());
  CHECK_FALSE(spearman(std::vector<double>{1}, std::vector<double>{1}).has_value());
}

// ---- binned tables ----------------------------------------------------------

TEST_CASE("perfect predictor gives unit ratios and zero RMS") {
  auto recs = synthetic_records(3000, 1);
  for (auto& r : recs) {
    r.prediction = r.truth;
    for (auto& c : r.classical) c = r.truth;
  }
  const BinnedAnalysis b = binned_analysis(recs, kDefaultBinEdges, recs);
  std::size_t total = 0;
  for (const MethodTable& t : b.tables) {
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      for (const BinStat& s : t.bins[j]) {
        REQUIRE(s.count > 0);
        CHECK(s.mean_ratio == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(s.rms < 1e-14);
        if (t.has_sigma) CHECK(s.weighted_ratio == doctest::Approx(1.0).epsilon(1e-14));
      }
    }
  }
  for (const BinStat& s : b.table("eluq").bins[0]) total += s.count;
  CHECK(total == recs.size());
  CHECK(b.tables.size() == 6);
}

TEST_CASE("equal sigmas make the weighted ratio the arithmetic one") {
  auto recs = synthetic_records(2000, 2);
  for (auto& r : recs) r.sigma_tot = r.truth;  // ratio sigma 1 for everyone
  const MethodTable t = binned_table(recs, kDefaultBinEdges, Source::kNetwork, "eluq", true);
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    for (const BinStat& s : t.bins[j]) {
      CHECK(rel(s.weighted_ratio, s.mean_ratio) < 1e-12);
      CHECK(rel(s.event_sigma, 1.0) < 1e-12);
    }
  }
}

TEST_CASE("binning edge cases") {
  CHECK(find_bin(kDefaultBinEdges, 0.01) == 0u);
  CHECK(find_bin(kDefaultBinEdges, 0.05) == 1u);
  CHECK(find_bin(kDefaultBinEdges, 0.8) == 4u);
  CHECK_FALSE(find_bin(kDefaultBinEdges, 0.009).has_value());
  CHECK_FALSE(find_bin(kDefaultBinEdges, 0.81).has_value());

  auto recs = synthetic_records(500, 3);
  std::erase_if(recs, [](const PredictionRecord& r) { return r.truth[2] >= 0.5; });
  recs[0].classical_ok[2] = false;
  const BinnedAnalysis b = binned_analysis(recs, kDefaultBinEdges);
  CHECK(b.common_events == recs.size() - 1);
  const BinStat& empty = b.table("eluq").bins[0][4];
  CHECK(empty.count == 0);
  CHECK(std::isnan(empty.rms));
  CHECK(std::isnan(empty.weighted_ratio));

  auto shuffled = recs;
  std::swap(shuffled[0], shuffled[1]);
  CHECK_THROWS_AS(binned_analysis(recs, kDefaultBinEdges, shuffled), ContractError);
}

// ---- closure tests ----------------------------------------------------------

TEST_CASE("aleatoric closure recovers an injected ratio width and applies the gates") {
  const std::array<double, 5> width{0.02, 0.04, 0.06, 0.08, 0.10};
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  std::student_t_distribution<double> t3(3.0);
  std::vector<PredictionRecord> eluq, dnn;
  for (std::size_t b = 0; b < 5; ++b) {
    std::uniform_real_distribution<double> y(kDefaultBinEdges[b], kDefaultBinEdges[b + 1]);
    for (int k = 0; k < 4000; ++k) {
      KinematicTriplet t{0.01, 0.0, y(rng)};
      t.q2 = 101200.0 * t.x * t.y;
      const std::uint64_t id = eluq.size();
      eluq.push_back(synthetic_record(id, t, width[b], 0.0, g(rng), g(rng), g(rng)));
      // Bin 3 is biased and bin 4 heavy-tailed for the DNN.
      const double shift = b == 3 ? 0.5 * width[b] : 0.0;
      const double w = b == 4 ? width[b] / std::sqrt(3.0) : width[b];
      const auto draw = [&] { return b == 4 ? t3(rng) : g(rng); };
      const double dx = draw(), dq = draw(), dy = draw();
      dnn.push_back(synthetic_record(id, t, w, shift, dx, dq, dy));
    }
  }
  const auto rows = closure_aleatoric(eluq, dnn, kDefaultBinEdges);
  REQUIRE(rows.size() == 5);
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      const AleatoricCell& c = rows[b].cells[j];
      CHECK(rel(c.sigma_ale, width[b]) < 1e-12);
      if (b != 4) CHECK(rel(c.rms_dnn, width[b]) < 0.1);
      CHECK(c.centred == (b != 3));
      CHECK(c.gaussian == (b != 4));
      if (c.gated()) CHECK(std::abs(c.sigma_ale / c.rms_dnn - 1.0) < 0.05);
      CHECK(c.rms_el == doctest::Approx(0.01).epsilon(0.1));
      CHECK(c.rms_da == doctest::Approx(0.02).epsilon(0.1));
    }
  }
  dnn.pop_back();
  CHECK_THROWS_AS(closure_aleatoric(eluq, dnn, kDefaultBinEdges), ContractError);
}

TEST_CASE("epistemic closure: correlation, medians and degenerate input") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  auto large = synthetic_records(2000, 4);
  auto small = large;
  for (std::size_t i = 0; i < large.size(); ++i) {
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      const double err = std::abs(large[i].prediction[j] - large[i].truth[j]);
      large[i].sigma_epi[j] = err * u(rng);
      small[i].sigma_epi[j] = 2.0 * large[i].sigma_epi[j];
    }
  }
  const EpistemicReport rep = closure_epistemic(large, small, kDefaultBinEdges);
  CHECK(rep.has_small);
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    REQUIRE(rep.spearman[j].has_value());
    CHECK(*rep.spearman[j] > 0.8);
    CHECK(rel(rep.median_small[j], 2.0 * rep.median_large[j]) < 1e-12);
    for (const EpistemicPoint& p : rep.points[j]) CHECK(p.count > 0);
  }

  std::vector<PredictionRecord> dup(10, large[0]);
  const EpistemicReport d = closure_epistemic(dup, {}, kDefaultBinEdges);
  CHECK_FALSE(d.has_small);
  for (const auto& s : d.spearman) CHECK_FALSE(s.has_value());
  CHECK_THROWS_AS(closure_epistemic(large, dup, kDefaultBinEdges), ContractError);
}

// ---- cuts -------------------------------------------------------------------

TEST_CASE("uncertainty cuts: limits, monotonicity and zero predictions") {
  auto recs = synthetic_records(5000, 6);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.001, 0.8);
  for (auto& r : recs)
    for (std::size_t j = 0; j < kNumTargets; ++j) r.sigma_tot[j] = u(rng) * r.prediction[j];

  const double inf = std::numeric_limits<double>::infinity();
  const double tiny = std::numeric_limits<double>::denorm_min();
  CutResult none = uncertainty_cut(recs, {inf, inf, inf}, kDefaultBinEdges);
  CutResult all = uncertainty_cut(recs, {tiny, tiny, tiny}, kDefaultBinEdges);
  CHECK(none.rejected.empty());
  CHECK(all.kept.empty());
  for (std::size_t b = 0; b < 5; ++b) {
    CHECK(none.rejected_fraction[b] == 0.0);
    CHECK(all.rejected_fraction[b] == 1.0);
  }

  // Tighten one observable at a time over a ten-point ladder.
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    std::vector<double> prev(5, 0.0);
    for (double t : {1.0, 0.7, 0.5, 0.4, 0.3, 0.2, 0.15, 0.1, 0.05, 0.01}) {
      Triplet th{0.6, 0.6, 0.6};
      th[j] = t;
      const CutResult c = uncertainty_cut(recs, th, kDefaultBinEdges);
      CHECK(c.kept.size() + c.rejected.size() == recs.size());
      for (std::size_t b = 0; b < 5; ++b) {
        CHECK(c.rejected_fraction[b] >= prev[b]);
        prev[b] = c.rejected_fraction[b];
      }
    }
  }

  recs[7].prediction[1] = 0.0;
  const CutResult z = uncertainty_cut(recs, {inf, inf, inf}, kDefaultBinEdges);
  CHECK(z.zero_prediction == 1);
  CHECK(z.rejected == std::vector<std::size_t>{7});
  CHECK_THROWS_AS(uncertainty_cut(recs, {0.1, 0.0, 0.1}, kDefaultBinEdges), ContractError);
}

// ---- report -----------------------------------------------------------------

TEST_CASE("report files: schema, determinism and notices") {
  auto recs = synthetic_records(3000, 9);
  auto dnn = synthetic_records(3000, 10);
  auto small = recs;
  for (auto& r : small)
    for (double& s : r.sigma_epi) s *= 3.0;
  AnalysisConfig cfg;
  const KeyValues header{{"code_version", "test"}, {"records", "synthetic"}};

  const fs::path a = scratch("report_a"), b = scratch("report_b"), c = scratch("report_c");
  const Report rep = analyze(recs, dnn, small, cfg);
  const auto files = emit_report(rep, a, header);
  emit_report(analyze(recs, dnn, small, cfg), b, header);
  CHECK(files.size() == 7);
  for (const fs::path& f : files) CHECK(slurp(f) == slurp(b / f.filename()));

  const auto data_lines = [](const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);)
      if (!line.starts_with("#")) out.push_back(line);
    return out;
  };
  const auto res = data_lines(a / "resolution.csv");
  CHECK(res.size() == 1 + 15);
  const auto closure = data_lines(a / "closure_aleatoric.csv");
  REQUIRE(closure.size() == 1 + 5);
  CHECK(std::count(closure[0].begin(), closure[0].end(), ',') == 12);
  CHECK(closure[0] ==
        "y_bin,rms_x_da,rms_x_el,rms_x_dnn,sigma_x,rms_Q2_da,rms_Q2_el,rms_Q2_dnn,sigma_Q2,"
        "rms_y_da,rms_y_el,rms_y_dnn,sigma_y");
  CHECK(slurp(a / "resolution.csv").starts_with("# code_version=test\n# records=synthetic\n# analysis.bins="));
  CHECK(data_lines(a / "cuts.csv").size() == 1 + 5 * (1 + cfg.thresholds.size()));
  CHECK(slurp(a / "notices.txt").empty());

  const Report bare = analyze(recs, {}, {}, cfg);
  emit_report(bare, c, header);
  CHECK_FALSE(fs::exists(c / "closure_aleatoric.csv"));
  const std::string notices = slurp(c / "notices.txt");
  CHECK(notices.find("aleatoric closure skipped") != std::string::npos);
  CHECK(notices.find("epistemic comparison skipped") != std::string::npos);
  CHECK(slurp(c / "epistemic.csv").find("median_sigma_epi_small=skipped") != std::string::npos);
}

TEST_CASE("analysis config keys") {
  AnalysisConfig cfg;
  cfg.set("thresholds", "0.5,0.2,0.1,0.05");
  CHECK(cfg.thresholds == kDefaultThresholds);
  CHECK(cfg.bin_edges == std::vector<double>{0.01, 0.05, 0.1, 0.2, 0.5, 0.8});
  AnalysisConfig other;
  for (const auto& [k, v] : cfg.to_key_values()) other.set(k, v);
  CHECK(other.to_key_values() == cfg.to_key_values());
  CHECK_THROWS_AS(cfg.set("bin_edges", "0.1,0.2"), ConfigError);
  cfg.set("bins", "0.2,0.1");
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
