#include "eluq/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <boost/math/statistics/bivariate_statistics.hpp>

#include "binary_io.hpp"
#include "eluq/errors.hpp"
#include "eluq/random.hpp"

namespace eluq {
namespace {

using detail::append_le;

constexpr std::size_t kRecordDoubles = 5 * kNumTargets + kNumMethods * kNumTargets;

std::string cell(double v) { return std::isnan(v) ? "null" : format_double(v); }

// Sums in a fixed pairwise order so results do not depend on the caller.
double pairwise(const double* p, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise(p, h) + pairwise(p + h, n - h);
}

double mean_of(const std::vector<double>& v) { return pairwise_sum(v) / static_cast<double>(v.size()); }

double rms_of(const std::vector<double>& v, double mean) {
  std::vector<double> d(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) d[i] = (v[i] - mean) * (v[i] - mean);
  return std::sqrt(pairwise_sum(d) / static_cast<double>(v.size()));
}

void require_same_events(std::span<const PredictionRecord> a, std::span<const PredictionRecord> b,
                         const char* what) {
  bool same = a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].event_id == b[i].event_id;
  if (!same) throw ContractError(std::string(what) + ": record lists cover different events");
}

std::vector<std::size_t> common_indices(std::span<const PredictionRecord> records) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].all_classical_ok()) out.push_back(i);
  return out;
}

template <class T>
std::vector<T> pick(std::span<const T> v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

const std::array<std::string, kNumTargets>& observable_names() {
  static const std::array<std::string, kNumTargets> names{"x", "Q2", "y"};
  return names;
}

// ---- InferenceConfig --------------------------------------------------------

void InferenceConfig::validate() const {
  if (n_samples < 2) throw ConfigError("n_samples must be at least 2");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

KeyValues InferenceConfig::to_key_values() const {
  return {{"n_samples", std::to_string(n_samples)},
          {"batch_size", std::to_string(batch_size)},
          {"seed", std::to_string(seed)},
          {"threads", std::to_string(threads)}};
}

void InferenceConfig::set(const std::string& key, const std::string& value) {
  if (key == "n_samples") n_samples = parse_u64(key, value);
  else if (key == "batch_size") batch_size = parse_u64(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "threads") threads = static_cast<unsigned>(parse_u64(key, value));
  else throw ConfigError("unknown inference key '" + key + "'");
}

// ---- sampling ---------------------------------------------------------------

std::vector<PredictionRecord> sample_posterior(const Regressor& model, const FeatureScaler& fs,
                                               const TargetScaler& ts, const Dataset& data,
                                               std::span<const std::size_t> events, const InferenceConfig& cfg) {
  cfg.validate();
  if (!fs.fitted() || !ts.fitted()) throw ContractError("sample_posterior: scalers are not fitted");
  const std::size_t n = events.size();
  std::vector<PredictionRecord> records(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (events[i] >= data.events.size()) throw ContractError("sample_posterior: event index out of range");
    const GeneratedEvent& ev = data.events[events[i]];
    PredictionRecord& r = records[i];
    r.event_id = events[i];
    r.flags = ev.flags;
    r.truth = as_array(ev.truth);
    for (std::size_t m = 0; m < kNumMethods; ++m) {
      const Reconstruction rec = reconstruct(static_cast<Method>(m), ev.features, data.config.beam);
      r.classical[m] = as_array(rec.triplet);
      r.classical_ok[m] = rec.ok;
    }
  }

  const bool stochastic = model.config().kind == ModelKind::kEluq;
  const bool has_log_var = model.has_log_var();
  const std::size_t passes = stochastic ? cfg.n_samples : 1;
  const std::size_t n_batches = (n + cfg.batch_size - 1) / cfg.batch_size;

  auto run_batch = [&](std::size_t b) {
    NoGradGuard guard;
    const std::size_t begin = b * cfg.batch_size;
    const std::size_t m = std::min(n, begin + cfg.batch_size) - begin;
    std::vector<double> x(m * kNumFeatures);
    for (std::size_t r = 0; r < m; ++r) {
      const FeatureVector f = fs.transform(data.events[events[begin + r]].features);
      std::copy(f.begin(), f.end(), x.begin() + static_cast<std::ptrdiff_t>(r * kNumFeatures));
    }
    const Tensor input({m, kNumFeatures}, std::move(x));
    NoiseSource noise(derive_seed(cfg.seed, "sampling", b));

    std::vector<double> mean(m * kNumTargets, 0.0), m2(m * kNumTargets, 0.0), ale(m * kNumTargets, 0.0);
    for (std::size_t s = 0; s < passes; ++s) {
      const Prediction p = model.forward_eval(input, noise);
      const auto v = p.value.values();
      const double k = static_cast<double>(s + 1);
      for (std::size_t r = 0; r < m; ++r) {
        const KinematicTriplet phys = ts.inverse({v[r * 3], v[r * 3 + 1], v[r * 3 + 2]});
        const Triplet pv = as_array(phys);
        for (std::size_t j = 0; j < kNumTargets; ++j) {
          const std::size_t c = r * kNumTargets + j;
          const double d = pv[j] - mean[c];
          mean[c] += d / k;
          m2[c] += d * (pv[j] - mean[c]);
          if (has_log_var) ale[c] += ts.physical_sigma(j, pv[j], std::exp(0.5 * p.log_var.values()[c]));
        }
      }
    }
    for (std::size_t r = 0; r < m; ++r) {
      PredictionRecord& rec = records[begin + r];
      for (std::size_t j = 0; j < kNumTargets; ++j) {
        const std::size_t c = r * kNumTargets + j;
        rec.prediction[j] = mean[c];
        rec.sigma_epi[j] = passes > 1 ? std::sqrt(m2[c] / static_cast<double>(passes - 1)) : 0.0;
        rec.sigma_ale[j] = ale[c] / static_cast<double>(passes);
        rec.sigma_tot[j] = std::hypot(rec.sigma_ale[j], rec.sigma_epi[j]);
      }
    }
  };

  unsigned threads = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.threads;
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n_batches, 1)));
  if (threads <= 1) {
    for (std::size_t b = 0; b < n_batches; ++b) run_batch(b);
    return records;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t b = next++; b < n_batches; b = next++) run_batch(b);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return records;
}

// ---- prediction files -------------------------------------------------------

void write_predictions(const std::filesystem::path& path, const PredictionFile& file) {
  std::string payload;
  for (const PredictionRecord& r : file.records) {
    append_le<std::uint64_t>(payload, r.event_id);
    std::uint8_t ok = 0;
    for (std::size_t m = 0; m < kNumMethods; ++m) ok |= static_cast<std::uint8_t>(r.classical_ok[m] ? 1u << m : 0u);
    payload.push_back(static_cast<char>(r.flags));
    payload.push_back(static_cast<char>(ok));
    for (const Triplet* t : {&r.truth, &r.prediction, &r.sigma_ale, &r.sigma_epi, &r.sigma_tot})
      for (double v : *t) append_le<double>(payload, v);
    for (const Triplet& t : r.classical)
      for (double v : t) append_le<double>(payload, v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "ELUQ-PREDICTIONS\n";
  out << "format_version=" << kPredictionFormatVersion << '\n';
  out << "code_version=" << file.code_version << '\n';
  for (const auto& [k, v] : file.inference.to_key_values()) out << "inference." << k << '=' << v << '\n';
  for (const auto& [k, v] : file.info) out << "info." << k << '=' << v << '\n';
  out << "rows=" << file.records.size() << '\n';
  out << "payload_bytes=" << payload.size() << '\n';
  out << "payload_crc32=" << detail::crc32_of(payload) << '\n';
  out << "end_header\n";
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

PredictionFile read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "ELUQ-PREDICTIONS") {
    throw FormatError("'" + path.string() + "' is not a prediction file");
  }
  PredictionFile file;
  std::optional<std::uint64_t> rows, payload_bytes, payload_crc;
  bool have_version = false;
  while (true) {
    if (!std::getline(in, line)) throw FormatError("prediction header is truncated");
    if (line == "end_header") break;
    std::string key, value;
    if (!split_key_value(line, key, value)) throw FormatError("malformed prediction header line '" + line + "'");
    try {
      if (key == "format_version") {
        if (value != std::to_string(kPredictionFormatVersion)) {
          throw FormatError("unsupported prediction format version " + value);
        }
        have_version = true;
      } else if (key == "code_version") {
        file.code_version = value;
      } else if (key.starts_with("inference.")) {
        file.inference.set(key.substr(10), value);
      } else if (key.starts_with("info.")) {
        file.info.emplace_back(key.substr(5), value);
      } else if (key == "rows") {
        rows = parse_u64(key, value);
      } else if (key == "payload_bytes") {
        payload_bytes = parse_u64(key, value);
      } else if (key == "payload_crc32") {
        payload_crc = parse_u64(key, value);
      } else {
        throw FormatError("unknown prediction header key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      throw FormatError(std::string("prediction header: ") + e.what());
    }
  }
  if (!have_version || !rows || !payload_bytes || !payload_crc) {
    throw FormatError("prediction header lacks format_version, rows or payload fields");
  }
  constexpr std::size_t kRecordBytes = 8 + 2 + 8 * kRecordDoubles;
  if (*payload_bytes != *rows * kRecordBytes) throw FormatError("prediction payload size does not match rows");
  std::string payload(*payload_bytes, '\0');
  if (!in.read(payload.data(), static_cast<std::streamsize>(payload.size()))) {
    throw FormatError("prediction payload is truncated");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after the prediction payload");
  if (detail::crc32_of(payload) != *payload_crc) throw FormatError("prediction checksum mismatch");

  detail::PayloadReader rd(payload, "prediction");
  file.records.resize(*rows);
  for (PredictionRecord& r : file.records) {
    r.event_id = rd.read<std::uint64_t>();
    r.flags = rd.read<std::uint8_t>();
    const auto ok = rd.read<std::uint8_t>();
    for (std::size_t m = 0; m < kNumMethods; ++m) r.classical_ok[m] = (ok >> m) & 1u;
    for (Triplet* t : {&r.truth, &r.prediction, &r.sigma_ale, &r.sigma_epi, &r.sigma_tot})
      for (double& v : *t) v = rd.read<double>();
    for (Triplet& t : r.classical)
      for (double& v : t) v = rd.read<double>();
  }
  return file;
}

// ---- statistics -------------------------------------------------------------

double pairwise_sum(std::span<const double> v) { return pairwise(v.data(), v.size()); }

WeightedMean weighted_average(std::span<const double> values, std::span<const double> sigmas) {
  if (values.empty()) throw ContractError("weighted_average: empty input");
  if (values.size() != sigmas.size()) throw ContractError("weighted_average: values and sigmas differ in length");
  std::vector<double> wv(values.size()), w(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (!(sigmas[k] > 0.0) || !std::isfinite(sigmas[k])) {
      throw DomainError("weighted_average: sigma must be positive and finite");
    }
    w[k] = 1.0 / (sigmas[k] * sigmas[k]);
    wv[k] = values[k] * w[k];
  }
  const double sw = pairwise_sum(w);
  WeightedMean out;
  out.n = values.size();
  out.mean = pairwise_sum(wv) / sw;
  out.sigma = 1.0 / std::sqrt(sw);
  out.event_sigma = out.sigma * std::sqrt(static_cast<double>(out.n));
  return out;
}

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("spearman: columns differ in length");
  if (a.size() < 2) return std::nullopt;
  const std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  const auto same = [](const std::vector<double>& r) {
    return std::all_of(r.begin(), r.end(), [&](double v) { return v == r.front(); });
  };
  if (same(ra) || same(rb)) return std::nullopt;
  return boost::math::statistics::correlation_coefficient(ra, rb);
}

double median(std::vector<double> v) {
  if (v.empty()) return kNull;
  const std::size_t h = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  const double hi = v[h];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h));
  return 0.5 * (lo + hi);
}

// ---- binned tables ----------------------------------------------------------

std::optional<std::size_t> find_bin(const std::vector<double>& edges, double y) {
  if (edges.size() < 2 || !(y >= edges.front()) || !(y <= edges.back())) return std::nullopt;
  const auto it = std::upper_bound(edges.begin(), edges.end(), y);
  const auto k = static_cast<std::size_t>(it - edges.begin());
  return std::min(k, edges.size() - 1) - 1;
}

MethodTable binned_table(std::span<const PredictionRecord> records, const std::vector<double>& edges, Source source,
                         const std::string& name, bool with_sigma) {
  const std::size_t nb = edges.size() - 1;
  const bool network = source == Source::kNetwork;
  const auto method = static_cast<std::size_t>(source) - 1;
  std::array<std::vector<std::vector<double>>, kNumTargets> ratio, sigma;
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    ratio[j].resize(nb);
    sigma[j].resize(nb);
  }
  for (const PredictionRecord& r : records) {
    if (!network && !r.classical_ok[method]) continue;
    const auto b = find_bin(edges, r.truth[2]);
    if (!b) continue;
    const Triplet& est = network ? r.prediction : r.classical[method];
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      ratio[j][*b].push_back(est[j] / r.truth[j]);
      sigma[j][*b].push_back(r.sigma_tot[j] / r.truth[j]);
    }
  }

  MethodTable t;
  t.name = name;
  t.has_sigma = with_sigma;
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    t.bins[j].resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      BinStat& s = t.bins[j][b];
      s.y_lo = edges[b];
      s.y_hi = edges[b + 1];
      const auto& rv = ratio[j][b];
      s.count = rv.size();
      if (rv.empty()) continue;
      s.mean_ratio = mean_of(rv);
      s.rms = rms_of(rv, s.mean_ratio);
      if (with_sigma) {
        const WeightedMean w = weighted_average(rv, sigma[j][b]);
        s.weighted_ratio = w.mean;
        s.sigma_w = w.sigma;
        s.event_sigma = w.event_sigma;
      }
    }
  }
  return t;
}

const MethodTable& BinnedAnalysis::table(const std::string& name) const {
  for (const MethodTable& t : tables)
    if (t.name == name) return t;
  throw ContractError("no binned table named '" + name + "'");
}

BinnedAnalysis binned_analysis(std::span<const PredictionRecord> records, const std::vector<double>& edges,
                               std::span<const PredictionRecord> dnn) {
  if (records.empty()) throw ContractError("binned_analysis: no records");
  if (edges.size() < 2) throw ContractError("binned_analysis: need at least two bin edges");
  if (!dnn.empty()) require_same_events(records, dnn, "binned_analysis");
  BinnedAnalysis out;
  out.network_events = records.size();
  out.tables.push_back(binned_table(records, edges, Source::kNetwork, "eluq", true));

  const std::vector<std::size_t> idx = common_indices(records);
  out.common_events = idx.size();
  const std::vector<PredictionRecord> common = pick(records, idx);
  out.tables.push_back(binned_table(common, edges, Source::kNetwork, "eluq_common", true));
  if (!dnn.empty()) out.tables.push_back(binned_table(pick(dnn, idx), edges, Source::kNetwork, "dnn", false));
  out.tables.push_back(binned_table(common, edges, Source::kElectron, "el", false));
  out.tables.push_back(binned_table(common, edges, Source::kDoubleAngle, "da", false));
  out.tables.push_back(binned_table(common, edges, Source::kJacquetBlondel, "jb", false));
  return out;
}

// ---- closure tests ----------------------------------------------------------

std::vector<AleatoricRow> closure_aleatoric(std::span<const PredictionRecord> records,
                                            std::span<const PredictionRecord> dnn, const std::vector<double>& edges,
                                            const ClosureGates& gates) {
  require_same_events(records, dnn, "closure_aleatoric");
  const std::size_t nb = edges.size() - 1;
  const std::vector<std::size_t> idx = common_indices(records);
  const std::vector<PredictionRecord> common = pick(records, idx);
  const std::vector<PredictionRecord> dnn_common = pick(dnn, idx);
  const MethodTable el = binned_table(common, edges, Source::kElectron, "el", false);
  const MethodTable da = binned_table(common, edges, Source::kDoubleAngle, "da", false);

  std::array<std::vector<std::vector<double>>, kNumTargets> dnn_ratio, rel_ale;
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    dnn_ratio[j].resize(nb);
    rel_ale[j].resize(nb);
  }
  for (std::size_t i = 0; i < common.size(); ++i) {
    const auto b = find_bin(edges, common[i].truth[2]);
    if (!b) continue;
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      dnn_ratio[j][*b].push_back(dnn_common[i].prediction[j] / common[i].truth[j]);
      rel_ale[j][*b].push_back(common[i].sigma_ale[j] / common[i].truth[j]);
    }
  }

  std::vector<AleatoricRow> rows(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    AleatoricRow& row = rows[b];
    row.y_lo = edges[b];
    row.y_hi = edges[b + 1];
    row.count = dnn_ratio[0][b].size();
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      AleatoricCell& c = row.cells[j];
      c.rms_el = el.bins[j][b].rms;
      c.rms_da = da.bins[j][b].rms;
      const auto& r = dnn_ratio[j][b];
      if (r.empty()) continue;
      const double mean = mean_of(r);
      c.rms_dnn = rms_of(r, mean);
      c.sigma_ale = mean_of(rel_ale[j][b]);
      c.centred = std::abs(mean - 1.0) <= gates.max_bias * c.rms_dnn;
      const double med = median(r);
      std::vector<double> dev(r.size());
      for (std::size_t k = 0; k < r.size(); ++k) dev[k] = std::abs(r[k] - med);
      const double robust = 1.482602218505602 * median(std::move(dev));
      c.gaussian = robust > 0.0 && std::abs(c.rms_dnn / robust - 1.0) <= gates.max_mad_excess;
    }
  }
  return rows;
}

EpistemicReport closure_epistemic(std::span<const PredictionRecord> large, std::span<const PredictionRecord> small,
                                  const std::vector<double>& edges) {
  if (large.empty()) throw ContractError("closure_epistemic: no records");
  if (!small.empty()) require_same_events(large, small, "closure_epistemic");
  const std::size_t nb = edges.size() - 1;
  EpistemicReport rep;
  for (std::size_t j = 0; j < kNumTargets; ++j) {
    std::vector<double> epi(large.size()), inacc(large.size());
    std::vector<std::vector<double>> w(nb), we(nb), wi(nb);
    for (std::size_t i = 0; i < large.size(); ++i) {
      const PredictionRecord& r = large[i];
      epi[i] = r.sigma_epi[j];
      inacc[i] = std::abs(r.truth[j] - r.prediction[j]);
      const auto b = find_bin(edges, r.truth[2]);
      if (!b || !(r.sigma_tot[j] > 0.0)) continue;
      const double wt = 1.0 / (r.sigma_tot[j] * r.sigma_tot[j]);
      w[*b].push_back(wt);
      we[*b].push_back(wt * epi[i]);
      wi[*b].push_back(wt * inacc[i]);
    }
    rep.points[j].resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      EpistemicPoint& p = rep.points[j][b];
      p.y_lo = edges[b];
      p.y_hi = edges[b + 1];
      p.count = w[b].size();
      if (w[b].empty()) continue;
      const double sw = pairwise_sum(w[b]);
      p.sigma_epi = pairwise_sum(we[b]) / sw;
      p.inaccuracy = pairwise_sum(wi[b]) / sw;
    }
    rep.spearman[j] = spearman(epi, inacc);
    rep.median_large[j] = median(epi);
    if (!small.empty()) {
      std::vector<double> es(small.size());
      for (std::size_t i = 0; i < small.size(); ++i) es[i] = small[i].sigma_epi[j];
      rep.median_small[j] = median(std::move(es));
    }
  }
  rep.has_small = !small.empty();
  return rep;
}

// ---- cuts -------------------------------------------------------------------

CutResult uncertainty_cut(std::span<const PredictionRecord> records, const Triplet& thresholds,
                          const std::vector<double>& edges) {
  for (double t : thresholds)
    if (!(t > 0.0)) throw ContractError("uncertainty_cut: thresholds must be positive");
  const std::size_t nb = edges.size() - 1;
  std::vector<std::size_t> total(nb, 0), rejected(nb, 0);
  CutResult out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const PredictionRecord& r = records[i];
    bool reject = false;
    bool zero = false;
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      const double mag = std::abs(r.prediction[j]);
      if (mag == 0.0) zero = true;
      else if (r.sigma_tot[j] / mag > thresholds[j]) reject = true;
    }
    if (zero) {
      reject = true;
      ++out.zero_prediction;
    }
    (reject ? out.rejected : out.kept).push_back(i);
    if (const auto b = find_bin(edges, r.truth[2])) {
      ++total[*b];
      if (reject) ++rejected[*b];
    }
  }
  out.rejected_fraction.resize(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    out.rejected_fraction[b] =
        total[b] == 0 ? kNull : static_cast<double>(rejected[b]) / static_cast<double>(total[b]);
  }
  return out;
}

// ---- report -----------------------------------------------------------------

void AnalysisConfig::validate() const {
  if (bin_edges.size() < 2) throw ConfigError("bins needs at least two edges");
  for (std::size_t k = 0; k < bin_edges.size(); ++k) {
    if (!(bin_edges[k] > 0.0) || !(bin_edges[k] < 1.0)) throw ConfigError("bins edges must lie in (0, 1)");
    if (k > 0 && !(bin_edges[k] > bin_edges[k - 1])) throw ConfigError("bins edges must increase");
  }
  for (double t : thresholds)
    if (!(t > 0.0)) throw ConfigError("thresholds must be positive");
  if (!(gates.max_bias > 0.0) || !(gates.max_mad_excess > 0.0)) throw ConfigError("gate tolerances must be positive");
}

KeyValues AnalysisConfig::to_key_values() const {
  return {{"bins", format_list(bin_edges)},
          {"thresholds", format_list(thresholds)},
          {"gate_max_bias", format_double(gates.max_bias)},
          {"gate_max_mad_excess", format_double(gates.max_mad_excess)}};
}

void AnalysisConfig::set(const std::string& key, const std::string& value) {
  if (key == "bins") bin_edges = parse_double_list(key, value);
  else if (key == "thresholds") thresholds = parse_double_list(key, value);
  else if (key == "gate_max_bias") gates.max_bias = parse_double(key, value);
  else if (key == "gate_max_mad_excess") gates.max_mad_excess = parse_double(key, value);
  else throw ConfigError("unknown analysis key '" + key + "'");
}

Report analyze(std::span<const PredictionRecord> records, std::span<const PredictionRecord> dnn,
               std::span<const PredictionRecord> small, const AnalysisConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.config = cfg;
  const auto& edges = cfg.bin_edges;
  rep.binned = binned_analysis(records, edges, dnn);
  rep.has_dnn = !dnn.empty();
  if (rep.has_dnn) {
    rep.aleatoric = closure_aleatoric(records, dnn, edges, cfg.gates);
  } else {
    rep.notices.push_back("no DNN records given: DNN resolution column and aleatoric closure skipped");
  }
  rep.epistemic = closure_epistemic(records, small, edges);
  if (small.empty()) {
    rep.notices.push_back("no second record set given: small-vs-large epistemic comparison skipped");
  }

  std::vector<double> ladder{std::numeric_limits<double>::infinity()};
  ladder.insert(ladder.end(), cfg.thresholds.begin(), cfg.thresholds.end());
  for (double t : ladder) {
    CutStep step;
    step.threshold = t;
    step.result = uncertainty_cut(records, {t, t, t}, edges);
    const std::vector<PredictionRecord> kept = pick(records, step.result.kept);
    step.table = binned_table(kept, edges, Source::kNetwork, "eluq", true);
    rep.cuts.push_back(std::move(step));
  }
  const std::size_t common = rep.binned.common_events;
  if (common < records.size()) {
    rep.notices.push_back(std::to_string(records.size() - common) + " of " + std::to_string(records.size()) +
                          " events fail a classical method and are left out of cross-method tables");
  }
  return rep;
}

namespace {

class CsvFile {
 public:
  CsvFile(const std::filesystem::path& path, const KeyValues& header, const AnalysisConfig& cfg) : path_(path) {
    for (const auto& [k, v] : header) text_ << "# " << k << '=' << v << '\n';
    for (const auto& [k, v] : cfg.to_key_values()) text_ << "# analysis." << k << '=' << v << '\n';
    text_ << "# ratio=prediction/truth; ratio_sigma=sigma_tot/truth; rms=standard deviation of the ratio\n";
    text_ << "# sigma_ale=mean over samples of v*ln(10)*dlog10v/dscaled*exp(s/2)\n";
  }
  std::ostringstream& out() { return text_; }
  std::filesystem::path write() {
    std::ofstream f(path_, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path_.string() + "' for writing");
    f << text_.str();
    if (!f.flush()) throw IoError("write failed for '" + path_.string() + "'");
    return path_;
  }

 private:
  std::filesystem::path path_;
  std::ostringstream text_;
};

std::string threshold_text(double t) { return std::isinf(t) ? "none" : format_double(t); }

}  // namespace

std::vector<std::filesystem::path> emit_report(const Report& rep, const std::filesystem::path& dir,
                                               const KeyValues& header) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const auto& names = observable_names();
  const std::size_t nb = rep.config.bin_edges.size() - 1;
  std::vector<std::filesystem::path> written;

  {
    CsvFile f(dir / "resolution.csv", header, rep.config);
    f.out() << "# events=" << rep.binned.network_events << " common_events=" << rep.binned.common_events << '\n';
    f.out() << "y_lo,y_hi,observable,count_eluq,rms_eluq,count_common,rms_eluq_common,rms_dnn,rms_el,rms_da,rms_jb\n";
    const auto& all = rep.binned.table("eluq");
    const auto& com = rep.binned.table("eluq_common");
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t j = 0; j < kNumTargets; ++j) {
        f.out() << cell(all.bins[j][b].y_lo) << ',' << cell(all.bins[j][b].y_hi) << ',' << names[j] << ','
                << all.bins[j][b].count << ',' << cell(all.bins[j][b].rms) << ',' << com.bins[j][b].count << ','
                << cell(com.bins[j][b].rms) << ','
                << cell(rep.has_dnn ? rep.binned.table("dnn").bins[j][b].rms : kNull);
        for (const char* m : {"el", "da", "jb"}) f.out() << ',' << cell(rep.binned.table(m).bins[j][b].rms);
        f.out() << '\n';
      }
    }
    written.push_back(f.write());
  }
  {
    CsvFile f(dir / "ratio.csv", header, rep.config);
    f.out() << "method,y_lo,y_hi,observable,count,mean_ratio,rms,weighted_ratio,sigma_w,event_sigma\n";
    for (const MethodTable& t : rep.binned.tables) {
      for (std::size_t j = 0; j < kNumTargets; ++j) {
        for (const BinStat& s : t.bins[j]) {
          f.out() << t.name << ',' << cell(s.y_lo) << ',' << cell(s.y_hi) << ',' << names[j] << ',' << s.count << ','
                  << cell(s.mean_ratio) << ',' << cell(s.rms) << ',' << cell(s.weighted_ratio) << ','
                  << cell(s.sigma_w) << ',' << cell(s.event_sigma) << '\n';
        }
      }
    }
    written.push_back(f.write());
  }
  if (rep.has_dnn) {
    CsvFile f(dir / "closure_aleatoric.csv", header, rep.config);
    f.out() << "y_bin";
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      f.out() << ",rms_" << names[j] << "_da,rms_" << names[j] << "_el,rms_" << names[j] << "_dnn,sigma_" << names[j];
    }
    f.out() << '\n';
    for (const AleatoricRow& row : rep.aleatoric) {
      f.out() << cell(row.y_lo) << '-' << cell(row.y_hi);
      for (const AleatoricCell& c : row.cells) {
        f.out() << ',' << cell(c.rms_da) << ',' << cell(c.rms_el) << ',' << cell(c.rms_dnn) << ',' << cell(c.sigma_ale);
      }
      f.out() << '\n';
    }
    written.push_back(f.write());

    CsvFile g(dir / "closure_gates.csv", header, rep.config);
    g.out() << "y_lo,y_hi,observable,count,sigma_ale,rms_dnn,sigma_over_rms,centred,gaussian,gated\n";
    for (const AleatoricRow& row : rep.aleatoric) {
      for (std::size_t j = 0; j < kNumTargets; ++j) {
        const AleatoricCell& c = row.cells[j];
        g.out() << cell(row.y_lo) << ',' << cell(row.y_hi) << ',' << names[j] << ',' << row.count << ','
                << cell(c.sigma_ale) << ',' << cell(c.rms_dnn) << ',' << cell(c.sigma_ale / c.rms_dnn) << ','
                << c.centred << ',' << c.gaussian << ',' << c.gated() << '\n';
      }
    }
    written.push_back(g.write());
  }
  {
    CsvFile f(dir / "epistemic.csv", header, rep.config);
    const auto& e = rep.epistemic;
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      f.out() << "# " << names[j] << ": spearman=" << (e.spearman[j] ? format_double(*e.spearman[j]) : "undefined")
              << " median_sigma_epi=" << cell(e.median_large[j])
              << " median_sigma_epi_small=" << (e.has_small ? cell(e.median_small[j]) : "skipped") << '\n';
    }
    f.out() << "y_lo,y_hi,observable,count,weighted_sigma_epi,weighted_inaccuracy\n";
    for (std::size_t j = 0; j < kNumTargets; ++j) {
      for (const EpistemicPoint& p : e.points[j]) {
        f.out() << cell(p.y_lo) << ',' << cell(p.y_hi) << ',' << names[j] << ',' << p.count << ','
                << cell(p.sigma_epi) << ',' << cell(p.inaccuracy) << '\n';
      }
    }
    written.push_back(f.write());
  }
  {
    CsvFile f(dir / "cuts.csv", header, rep.config);
    f.out() << "threshold,y_lo,y_hi,kept,rejected_fraction,weighted_ratio_x,weighted_ratio_Q2,weighted_ratio_y\n";
    for (const CutStep& s : rep.cuts) {
      for (std::size_t b = 0; b < nb; ++b) {
        f.out() << threshold_text(s.threshold) << ',' << cell(rep.config.bin_edges[b]) << ','
                << cell(rep.config.bin_edges[b + 1]) << ',' << s.table.bins[0][b].count << ','
                << cell(s.result.rejected_fraction[b]);
        for (std::size_t j = 0; j < kNumTargets; ++j) f.out() << ',' << cell(s.table.bins[j][b].weighted_ratio);
        f.out() << '\n';
      }
    }
    written.push_back(f.write());
  }
  {
    const auto path = dir / "notices.txt";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    for (const std::string& n : rep.notices) f << n << '\n';
    if (!f.flush()) throw IoError("write failed for '" + path.string() + "'");
    written.push_back(path);
  }
  return written;
}

}  // namespace eluq
