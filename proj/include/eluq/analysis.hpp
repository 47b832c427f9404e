#pragma once

// Posterior sampling and the uncertainty analyses built on its output.

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eluq/generator.hpp"
#include "eluq/model.hpp"
#include "eluq/text.hpp"

namespace eluq {

using Triplet = std::array<double, kNumTargets>;

inline Triplet as_array(const KinematicTriplet& t) { return {t.x, t.q2, t.y}; }

/// Observable names in triplet order: "x", "Q2", "y".
const std::array<std::string, kNumTargets>& observable_names();

inline constexpr std::size_t kNumMethods = 3;  // indexed by Method

struct InferenceConfig {
  std::size_t n_samples = 10000;
  std::size_t batch_size = 100;
  std::uint64_t seed = 1;
  unsigned threads = 1;  // 0 = hardware concurrency

  void validate() const;
  KeyValues to_key_values() const;
  void set(const std::string& key, const std::string& value);
};

/// Per-event inference output. Everything is in physical units.
struct PredictionRecord {
  std::uint64_t event_id = 0;
  std::uint8_t flags = 0;  // generator flags of the event
  Triplet truth{};
  Triplet prediction{};
  Triplet sigma_ale{};
  Triplet sigma_epi{};
  Triplet sigma_tot{};
  std::array<Triplet, kNumMethods> classical{};
  std::array<bool, kNumMethods> classical_ok{};

  bool all_classical_ok() const { return classical_ok[0] && classical_ok[1] && classical_ok[2]; }
};

/// N stochastic passes per event. The prediction is the mean of the unscaled
/// samples and sigma_epi their standard deviation. sigma_ale is the mean over
/// samples of the log-variance head carried to physical units by the delta
/// method: sigma = v ln(10) (d log10 v / d scaled) exp(s / 2). Event batches
/// of cfg.batch_size draw from their own noise stream, so the output does not
/// depend on the thread count. A DNN is deterministic and is run once.
std::vector<PredictionRecord> sample_posterior(const Regressor& model, const FeatureScaler& fs,
                                               const TargetScaler& ts, const Dataset& data,
                                               std::span<const std::size_t> events, const InferenceConfig& cfg);

inline constexpr int kPredictionFormatVersion = 1;

struct PredictionFile {
  InferenceConfig inference;
  std::string code_version = ELUQ_VERSION;
  KeyValues info;  // provenance
  std::vector<PredictionRecord> records;
};

void write_predictions(const std::filesystem::path& path, const PredictionFile& file);
PredictionFile read_predictions(const std::filesystem::path& path);

// ---- statistics -------------------------------------------------------------

/// Pairwise (cascade) sum in index order.
double pairwise_sum(std::span<const double> v);

struct WeightedMean {
  double mean = 0.0;
  double sigma = 0.0;        // 1 / sqrt(sum 1/sigma_k^2)
  double event_sigma = 0.0;  // sigma * sqrt(N)
  std::size_t n = 0;
};

/// Inverse-variance weighted mean. Non-positive or non-finite sigmas throw
/// DomainError; empty input throws ContractError.
WeightedMean weighted_average(std::span<const double> values, std::span<const double> sigmas);

/// Spearman rank correlation with average ranks for ties. nullopt when either
/// column is constant or fewer than two pairs are given.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

double median(std::vector<double> v);

// ---- binned tables ----------------------------------------------------------

inline const std::vector<double> kDefaultBinEdges{0.01, 0.05, 0.1, 0.2, 0.5, 0.8};

/// Index of the bin holding truth y, or nullopt outside the edges. Bins are
/// half-open except the last, which includes its upper edge.
std::optional<std::size_t> find_bin(const std::vector<double>& edges, double y);

inline constexpr double kNull = std::numeric_limits<double>::quiet_NaN();

/// Statistics of the predicted-to-true ratio in one y bin. Empty bins keep
/// count 0 and NaN statistics.
struct BinStat {
  double y_lo = 0.0;
  double y_hi = 0.0;
  std::size_t count = 0;
  double mean_ratio = kNull;
  double rms = kNull;  // standard deviation of the ratio
  // Only for sources with event-level uncertainty; ratio sigma = sigma_tot / truth.
  double weighted_ratio = kNull;
  double sigma_w = kNull;
  double event_sigma = kNull;
};

enum class Source { kNetwork, kElectron, kDoubleAngle, kJacquetBlondel };

struct MethodTable {
  std::string name;
  bool has_sigma = false;
  std::array<std::vector<BinStat>, kNumTargets> bins;  // per observable
};

/// One source's ratio table. Classical sources skip events where the method
/// failed.
MethodTable binned_table(std::span<const PredictionRecord> records, const std::vector<double>& edges, Source source,
                         const std::string& name, bool with_sigma);

struct BinnedAnalysis {
  std::size_t network_events = 0;
  std::size_t common_events = 0;  // events every classical method reconstructs
  /// "eluq" on all events, then "eluq_common", "dnn" (when given), "el",
  /// "da" and "jb" on the common events.
  std::vector<MethodTable> tables;

  const MethodTable& table(const std::string& name) const;
};

/// Throws ContractError when the DNN records cover a different event list.
BinnedAnalysis binned_analysis(std::span<const PredictionRecord> records, const std::vector<double>& edges,
                               std::span<const PredictionRecord> dnn = {});

// ---- closure tests ----------------------------------------------------------

/// Gates deciding whether a bin's DNN ratio is centred and Gaussian enough
/// for the aleatoric comparison.
struct ClosureGates {
  double max_bias = 0.25;       // |mean ratio - 1| <= max_bias * rms
  double max_mad_excess = 0.25; // |rms / (1.4826 MAD) - 1| <= max_mad_excess
};

struct AleatoricCell {
  double rms_da = kNull;
  double rms_el = kNull;
  double rms_dnn = kNull;
  double sigma_ale = kNull;  // mean of sigma_ale / truth
  bool centred = false;
  bool gaussian = false;
  bool gated() const { return centred && gaussian; }
};

struct AleatoricRow {
  double y_lo = 0.0;
  double y_hi = 0.0;
  std::size_t count = 0;
  std::array<AleatoricCell, kNumTargets> cells;
};

/// Mean relative aleatoric uncertainty of the network against the ratio RMS
/// of the DNN and of the DA and electron methods, over events every method
/// reconstructs. The lists must cover the same events.
std::vector<AleatoricRow> closure_aleatoric(std::span<const PredictionRecord> records,
                                            std::span<const PredictionRecord> dnn, const std::vector<double>& edges,
                                            const ClosureGates& gates = {});

struct EpistemicPoint {
  double y_lo = 0.0;
  double y_hi = 0.0;
  std::size_t count = 0;
  double sigma_epi = kNull;    // weighted mean, weights 1/sigma_tot^2
  double inaccuracy = kNull;   // weighted mean of |v - v_hat|
};

struct EpistemicReport {
  std::array<std::vector<EpistemicPoint>, kNumTargets> points;  // from the large-data records
  std::array<std::optional<double>, kNumTargets> spearman;      // sigma_epi vs |v - v_hat|
  std::array<double, kNumTargets> median_large{kNull, kNull, kNull};
  bool has_small = false;
  std::array<double, kNumTargets> median_small{kNull, kNull, kNull};
};

/// Epistemic checks on `large`; the small-vs-large median comparison runs
/// only when `small` is non-empty and covers the same events.
EpistemicReport closure_epistemic(std::span<const PredictionRecord> large, std::span<const PredictionRecord> small,
                                  const std::vector<double>& edges);

// ---- uncertainty cuts -------------------------------------------------------

inline const std::vector<double> kDefaultThresholds{0.5, 0.2, 0.1, 0.05};

struct CutResult {
  std::vector<std::size_t> kept;      // indices into the input records
  std::vector<std::size_t> rejected;
  std::size_t zero_prediction = 0;    // rejected because some |prediction| is 0
  std::vector<double> rejected_fraction;  // per y bin; NaN for empty bins
};

/// Rejects an event when sigma_tot / |prediction| exceeds the threshold for
/// any observable. Thresholds must be positive (infinity keeps everything).
CutResult uncertainty_cut(std::span<const PredictionRecord> records, const Triplet& thresholds,
                          const std::vector<double>& edges);

// ---- report -----------------------------------------------------------------

struct AnalysisConfig {
  std::vector<double> bin_edges = kDefaultBinEdges;
  std::vector<double> thresholds = kDefaultThresholds;
  ClosureGates gates;

  void validate() const;
  KeyValues to_key_values() const;
  void set(const std::string& key, const std::string& value);
};

struct CutStep {
  double threshold = 0.0;  // std::numeric_limits<double>::infinity() for "no cut"
  CutResult result;
  MethodTable table;  // network table on the kept events
};

struct Report {
  AnalysisConfig config;
  BinnedAnalysis binned;
  bool has_dnn = false;
  std::vector<AleatoricRow> aleatoric;
  EpistemicReport epistemic;
  std::vector<CutStep> cuts;
  std::vector<std::string> notices;
};

/// Runs every analysis. `dnn` and `small` may be empty; the analyses needing
/// them are skipped with a notice.
Report analyze(std::span<const PredictionRecord> records, std::span<const PredictionRecord> dnn,
               std::span<const PredictionRecord> small, const AnalysisConfig& cfg);

/// Writes resolution.csv, ratio.csv, closure_aleatoric.csv,
/// closure_gates.csv, epistemic.csv, cuts.csv and notices.txt into `dir`.
/// Every CSV starts with "# key=value" lines from `header` and the analysis
/// config. Returns the written paths.
std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir,
                                               const KeyValues& header);

}  // namespace eluq
