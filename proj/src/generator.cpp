#include "eluq/generator.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <thread>

#include "eluq/errors.hpp"
#include "eluq/random.hpp"
#include "eluq/text.hpp"

namespace eluq {
namespace {

constexpr int kMaxTruthDraws = 1'000'000;
constexpr int kMaxSmearAttempts = 100;
constexpr std::size_t kColumns = kNumFeatures + 3;

// Uniform in log between lo and hi; a degenerate range returns lo exactly.
double log_uniform(double lo, double hi, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (lo == hi) return lo;
  return std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
}

void put_f64(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.write(buf, 8);
}

double get_f64(const char* p) {
  std::uint64_t bits;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

std::string column_list() {
  std::string s;
  for (auto name : feature_names()) {
    s += name;
    s += ',';
  }
  return s + "x,Q2,y,flags";
}

}  // namespace

double SmearingConfig::relative_resolution(double stochastic, double constant, double energy) {
  return std::sqrt(stochastic * stochastic / energy + constant * constant);
}

// ---- configuration ----------------------------------------------------------

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("generator config: " + m); };
  if (!(x_min > 0.0 && x_min <= x_max && x_max <= 1.0)) fail("need 0 < x_min <= x_max <= 1");
  if (!(y_min > 0.0 && y_min <= y_max && y_max < 1.0)) fail("need 0 < y_min <= y_max < 1");
  if (!(q2_min > 0.0 && q2_min <= q2_max)) fail("need 0 < q2_min <= q2_max");
  const SmearingConfig& s = smearing;
  for (double v : {s.electron_stochastic, s.electron_constant, s.electron_angle, s.hfs_stochastic, s.hfs_constant,
                   s.hfs_angle}) {
    if (!(v >= 0.0)) fail("resolutions must be non-negative");
  }
  const RadiationConfig& r = radiation;
  if (!(r.isr_probability >= 0.0 && r.isr_probability <= 1.0)) fail("isr_probability must lie in [0, 1]");
  if (!(r.fsr_fraction >= 0.0 && r.fsr_fraction <= 1.0)) fail("fsr_fraction must lie in [0, 1]");
  if (!(r.photon_min_fraction > 0.0 && r.photon_min_fraction <= r.photon_max_fraction &&
        r.photon_max_fraction < 1.0)) {
    fail("need 0 < photon_min_fraction <= photon_max_fraction < 1");
  }
  if (!(r.extra_cluster_mean >= 0.0)) fail("extra_cluster_mean must be non-negative");
  if (!(r.photon_eta_spread >= 0.0)) fail("photon_eta_spread must be non-negative");
}

std::vector<std::pair<std::string, std::string>> GeneratorConfig::to_key_values() const {
  const char* law_name = law == SamplingLaw::kLogXLogQ2 ? "log_x_log_q2" : "log_x_log_y";
  return {
      {"electron_beam_energy", format_double(beam.electron_energy())},
      {"proton_beam_energy", format_double(beam.proton_energy())},
      {"x_min", format_double(x_min)},
      {"x_max", format_double(x_max)},
      {"y_min", format_double(y_min)},
      {"y_max", format_double(y_max)},
      {"q2_min", format_double(q2_min)},
      {"q2_max", format_double(q2_max)},
      {"sampling_law", law_name},
      {"electron_stochastic", format_double(smearing.electron_stochastic)},
      {"electron_constant", format_double(smearing.electron_constant)},
      {"electron_angle", format_double(smearing.electron_angle)},
      {"hfs_stochastic", format_double(smearing.hfs_stochastic)},
      {"hfs_constant", format_double(smearing.hfs_constant)},
      {"hfs_angle", format_double(smearing.hfs_angle)},
      {"isr_probability", format_double(radiation.isr_probability)},
      {"photon_min_fraction", format_double(radiation.photon_min_fraction)},
      {"photon_max_fraction", format_double(radiation.photon_max_fraction)},
      {"photon_eta_mean", format_double(radiation.photon_eta_mean)},
      {"photon_eta_spread", format_double(radiation.photon_eta_spread)},
      {"fsr_fraction", format_double(radiation.fsr_fraction)},
      {"extra_cluster_mean", format_double(radiation.extra_cluster_mean)},
      {"seed", std::to_string(seed)},
  };
}

void GeneratorConfig::set(const std::string& key, const std::string& value) {
  auto num = [&] { return parse_double(key, value); };
  if (key == "electron_beam_energy") {
    beam.set_energies(num(), beam.proton_energy());
  } else if (key == "proton_beam_energy") {
    beam.set_energies(beam.electron_energy(), num());
  } else if (key == "sampling_law") {
    if (value == "log_x_log_q2") {
      law = SamplingLaw::kLogXLogQ2;
    } else if (value == "log_x_log_y") {
      law = SamplingLaw::kLogXLogY;
    } else {
      throw ConfigError("sampling_law must be log_x_log_q2 or log_x_log_y, got '" + value + "'");
    }
  } else if (key == "seed") {
    seed = parse_u64(key, value);
  } else {
    static const std::map<std::string, double GeneratorConfig::*> top = {
        {"x_min", &GeneratorConfig::x_min}, {"x_max", &GeneratorConfig::x_max},
        {"y_min", &GeneratorConfig::y_min}, {"y_max", &GeneratorConfig::y_max},
        {"q2_min", &GeneratorConfig::q2_min}, {"q2_max", &GeneratorConfig::q2_max}};
    static const std::map<std::string, double SmearingConfig::*> smear = {
        {"electron_stochastic", &SmearingConfig::electron_stochastic},
        {"electron_constant", &SmearingConfig::electron_constant},
        {"electron_angle", &SmearingConfig::electron_angle},
        {"hfs_stochastic", &SmearingConfig::hfs_stochastic},
        {"hfs_constant", &SmearingConfig::hfs_constant},
        {"hfs_angle", &SmearingConfig::hfs_angle}};
    static const std::map<std::string, double RadiationConfig::*> rad = {
        {"isr_probability", &RadiationConfig::isr_probability},
        {"photon_min_fraction", &RadiationConfig::photon_min_fraction},
        {"photon_max_fraction", &RadiationConfig::photon_max_fraction},
        {"photon_eta_mean", &RadiationConfig::photon_eta_mean},
        {"photon_eta_spread", &RadiationConfig::photon_eta_spread},
        {"fsr_fraction", &RadiationConfig::fsr_fraction},
        {"extra_cluster_mean", &RadiationConfig::extra_cluster_mean}};
    if (auto it = top.find(key); it != top.end()) {
      this->*(it->second) = num();
    } else if (auto is = smear.find(key); is != smear.end()) {
      smearing.*(is->second) = num();
    } else if (auto ir = rad.find(key); ir != rad.end()) {
      radiation.*(ir->second) = num();
    } else {
      throw ConfigError("unknown generator key '" + key + "'");
    }
  }
}

std::uint8_t failure_flag(Method m) {
  switch (m) {
    case Method::kElectron: return kElectronFailed;
    case Method::kDoubleAngle: return kDoubleAngleFailed;
    case Method::kJacquetBlondel: return kJacquetBlondelFailed;
  }
  return 0;
}

// ---- physics ----------------------------------------------------------------

KinematicTriplet sample_truth(const GeneratorConfig& cfg, std::mt19937_64& rng) {
  const double s = cfg.beam.s();
  for (int attempt = 0; attempt < kMaxTruthDraws; ++attempt) {
    const double x = log_uniform(cfg.x_min, cfg.x_max, rng);
    double y;
    if (cfg.law == SamplingLaw::kLogXLogQ2) {
      const double q2 = log_uniform(cfg.q2_min, cfg.q2_max, rng);
      y = q2 / (s * x);
      if (!(y >= cfg.y_min && y <= cfg.y_max)) continue;
    } else {
      y = log_uniform(cfg.y_min, cfg.y_max, rng);
    }
    if (!(x < 1.0 && y < 1.0)) continue;
    const double q2 = s * x * y;
    if (!(q2 >= cfg.q2_min && q2 <= cfg.q2_max)) continue;
    return {x, q2, y};
  }
  throw ConfigError("sample_truth: no accepted phase-space point after 1e6 draws");
}

std::pair<ElectronState, HfsState> build_states(const KinematicTriplet& truth, const BeamConfig& beam,
                                                double phi_e) {
  if (!(truth.y > 0.0 && truth.y < 1.0)) throw DomainError("build_states: y must lie in (0, 1)");
  if (!(truth.q2 > 0.0)) throw DomainError("build_states: Q2 must be positive");
  const double e0 = beam.electron_energy();
  const double ep = beam.proton_energy();
  const double sigma_e = 2.0 * e0 * (1.0 - truth.y);
  const double pt2 = truth.q2 * (1.0 - truth.y);

  ElectronState e;
  e.pt = std::sqrt(pt2);
  e.pz = (pt2 - sigma_e * sigma_e) / (2.0 * sigma_e);
  e.energy = (pt2 + sigma_e * sigma_e) / (2.0 * sigma_e);
  e.phi = wrap_angle(phi_e);

  HfsState h;
  h.energy = e0 + ep - e.energy;
  h.pz = (ep - e0) - e.pz;
  h.pt = e.pt;
  h.phi = wrap_angle(phi_e + std::numbers::pi);
  return {e, h};
}

std::optional<std::pair<ElectronState, HfsState>> apply_smearing(const ElectronState& e, const HfsState& h,
                                                                 const SmearingConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double sig_e = SmearingConfig::relative_resolution(cfg.electron_stochastic, cfg.electron_constant, e.energy);
  const double sig_h = SmearingConfig::relative_resolution(cfg.hfs_stochastic, cfg.hfs_constant, h.energy);
  const double theta_e = std::atan2(e.pt, e.pz);
  const double p_h = std::hypot(h.pt, h.pz);
  const double theta_h = std::atan2(h.pt, h.pz);

  for (int attempt = 0; attempt < kMaxSmearAttempts; ++attempt) {
    double g[6];
    for (double& v : g) v = gauss(rng);

    ElectronState es = e;
    if (sig_e > 0.0) {
      const double f = 1.0 + sig_e * g[0];
      es.energy *= f;
      es.pt *= f;
      es.pz *= f;
    }
    if (cfg.electron_angle > 0.0) {
      const double th = theta_e + cfg.electron_angle * g[1];
      if (!(th > 0.0 && th < std::numbers::pi)) continue;
      es.pt = es.energy * std::sin(th);
      es.pz = es.energy * std::cos(th);
      es.phi = wrap_angle(e.phi + cfg.electron_angle * g[2]);
    }

    HfsState hs = h;
    double p = p_h;
    if (sig_h > 0.0) {
      const double f = 1.0 + sig_h * g[3];
      hs.energy *= f;
      hs.pt *= f;
      hs.pz *= f;
      p *= f;
    }
    if (cfg.hfs_angle > 0.0) {
      const double th = theta_h + cfg.hfs_angle * g[4];
      if (!(th > 0.0 && th < std::numbers::pi)) continue;
      hs.pt = p * std::sin(th);
      hs.pz = p * std::cos(th);
      hs.phi = wrap_angle(h.phi + cfg.hfs_angle * g[5]);
    }

    if (!(es.energy > 0.0 && es.pt > 0.0 && es.sigma() > 0.0)) continue;
    if (!(hs.energy > 0.0 && hs.pt > 0.0 && hs.sigma() > 0.0)) continue;
    return std::make_pair(es, hs);
  }
  return std::nullopt;
}

RadiationDraw draw_radiation(const RadiationConfig& cfg, const BeamConfig& beam, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double e0 = beam.electron_energy();
  RadiationDraw draw{e0, std::nullopt, false};
  if (!(unit(rng) < cfg.isr_probability)) return draw;

  double e_gamma;
  do {
    e_gamma = log_uniform(cfg.photon_min_fraction * e0, cfg.photon_max_fraction * e0, rng);
  } while (e_gamma >= e0);
  PhotonRecord photon;
  photon.energy = e_gamma;
  photon.eta = cfg.photon_eta_mean + cfg.photon_eta_spread * std::normal_distribution<double>(0.0, 1.0)(rng);
  photon.dphi = wrap_angle(std::numbers::pi * (2.0 * unit(rng) - 1.0));
  draw.overlaps_electron = unit(rng) < cfg.fsr_fraction;
  photon.cluster_count = 1.0 + std::poisson_distribution<int>(cfg.extra_cluster_mean)(rng);
  draw.effective_e0 = e0 - e_gamma;
  draw.photon = photon;
  return draw;
}

GeneratedEvent generate_event(const GeneratorConfig& cfg, std::uint64_t index) {
  std::mt19937_64 rng(derive_seed(cfg.seed, "gen", index));
  GeneratedEvent ev;
  ev.truth = sample_truth(cfg, rng);
  const double phi_e = std::numbers::pi * (2.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng) - 1.0);
  RadiationDraw rad = draw_radiation(cfg.radiation, cfg.beam, rng);

  const BeamConfig detector_beam =
      rad.photon ? BeamConfig(rad.effective_e0, cfg.beam.proton_energy()) : cfg.beam;
  auto [e, h] = build_states(ev.truth, detector_beam, phi_e);

  if (rad.photon) {
    ev.flags |= kRadiative;
    rad.photon->cone_ratio = rad.overlaps_electron ? 1.0 + rad.photon->energy / e.energy : 1.0;
  }

  auto smeared = apply_smearing(e, h, cfg.smearing, rng);
  if (smeared) {
    e = smeared->first;
    h = smeared->second;
  } else {
    ev.flags |= kUnusable;
  }
  ev.features = compute_features(e, h, rad.photon, cfg.beam);
  for (Method m : {Method::kElectron, Method::kDoubleAngle, Method::kJacquetBlondel}) {
    if (!reconstruct(m, ev.features, cfg.beam).ok) ev.flags |= failure_flag(m);
  }
  return ev;
}

std::vector<GeneratedEvent> generate_events(const GeneratorConfig& cfg, std::size_t n, unsigned threads) {
  cfg.validate();
  std::vector<GeneratedEvent> events(n);
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(1, n / 1024)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) events[i] = generate_event(cfg, i);
    return events;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t lo = t * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) events[i] = generate_event(cfg, i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
  return events;
}

// ---- files ------------------------------------------------------------------

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "ELUQ-DATASET\n";
  out << "format_version=" << kDatasetFormatVersion << "\n";
  for (const auto& [k, v] : data.config.to_key_values()) out << k << '=' << v << '\n';
  out << "columns=" << column_list() << "\n";
  out << "rows=" << data.events.size() << "\n";
  out << "end_header\n";
  for (const GeneratedEvent& ev : data.events) {
    for (double f : ev.features) put_f64(out, f);
    put_f64(out, ev.truth.x);
    put_f64(out, ev.truth.q2);
    put_f64(out, ev.truth.y);
    out.put(static_cast<char>(ev.flags));
  }
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "ELUQ-DATASET") {
    throw FormatError("'" + path.string() + "' is not a dataset file");
  }
  Dataset data;
  std::size_t rows = 0;
  bool have_rows = false;
  bool have_version = false;
  while (true) {
    if (!std::getline(in, line)) throw FormatError("dataset header is truncated");
    if (line == "end_header") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed dataset header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "format_version") {
      if (value != std::to_string(kDatasetFormatVersion)) {
        throw FormatError("unsupported dataset format version " + value);
      }
      have_version = true;
    } else if (key == "columns") {
      if (value != column_list()) throw FormatError("dataset columns do not match the canonical order");
    } else if (key == "rows") {
      try {
        rows = parse_u64(key, value);
      } catch (const ConfigError& e) {
        throw FormatError(e.what());
      }
      have_rows = true;
    } else {
      try {
        data.config.set(key, value);
      } catch (const ConfigError& e) {
        throw FormatError(std::string("dataset header: ") + e.what());
      }
    }
  }
  if (!have_rows || !have_version) throw FormatError("dataset header lacks rows or format_version");

  constexpr std::size_t kRowBytes = kColumns * 8 + 1;
  std::vector<char> buf(kRowBytes);
  data.events.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!in.read(buf.data(), kRowBytes)) throw FormatError("dataset truncated at row " + std::to_string(r));
    GeneratedEvent& ev = data.events[r];
    for (std::size_t j = 0; j < kNumFeatures; ++j) ev.features[j] = get_f64(buf.data() + 8 * j);
    ev.truth.x = get_f64(buf.data() + 8 * kNumFeatures);
    ev.truth.q2 = get_f64(buf.data() + 8 * (kNumFeatures + 1));
    ev.truth.y = get_f64(buf.data() + 8 * (kNumFeatures + 2));
    ev.flags = static_cast<std::uint8_t>(buf[kRowBytes - 1]);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after the last dataset row");
  return data;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << column_list() << '\n';
  for (const GeneratedEvent& ev : data.events) {
    for (double f : ev.features) out << format_double(f) << ',';
    out << format_double(ev.truth.x) << ',' << format_double(ev.truth.q2) << ',' << format_double(ev.truth.y) << ','
        << static_cast<int>(ev.flags) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Dataset generate_dataset(const GeneratorConfig& cfg, std::size_t n, const std::filesystem::path& path,
                         unsigned threads) {
  if (n == 0) throw ConfigError("generate_dataset: n_events must be positive");
  Dataset data{cfg, generate_events(cfg, n, threads)};
  write_dataset(path, data);
  return data;
}

}  // namespace eluq
