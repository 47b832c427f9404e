#include "eluq/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "eluq/errors.hpp"
#include "eluq/random.hpp"
#include "binary_io.hpp"

namespace eluq {
namespace {

using detail::append_le;

bool finite_terms(const LossTerms& t) {
  return std::isfinite(t.total) && std::isfinite(t.reg) && std::isfinite(t.phys) && std::isfinite(t.kl);
}

std::vector<double> indices_to_doubles(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

std::vector<std::size_t> doubles_to_indices(const std::vector<double>& v) {
  std::vector<std::size_t> out;
  out.reserve(v.size());
  for (double d : v) {
    if (!(d >= 0.0) || d != std::floor(d)) throw FormatError("checkpoint split index is not a non-negative integer");
    out.push_back(static_cast<std::size_t>(d));
  }
  return out;
}

}  // namespace

// ---- TrainConfig ------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(initial_lr > 0.0)) fail("initial_lr must be positive");
  if (decay_step == 0) fail("decay_step must be positive");
  if (!(decay_factor > 0.0)) fail("decay_factor must be positive");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) fail("alpha and beta must be non-negative");
  if (!(min_delta >= 0.0)) fail("min_delta must be non-negative");
  for (double f : {train_fraction, validation_fraction, test_fraction}) {
    if (!(f >= 0.0 && f <= 1.0)) fail("split fractions must lie in [0, 1]");
  }
  if (!(train_fraction > 0.0 && validation_fraction > 0.0)) fail("train and validation fractions must be positive");
  if (std::abs(train_fraction + validation_fraction + test_fraction - 1.0) > 1e-9) fail("split fractions must sum to 1");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  if (epoch == 0) throw ContractError("epochs are numbered from 1");
  return initial_lr * std::pow(decay_factor, static_cast<double>((epoch - 1) / decay_step));
}

KeyValues TrainConfig::to_key_values() const {
  return {
      {"max_epochs", std::to_string(max_epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"initial_lr", format_double(initial_lr)},
      {"decay_step", std::to_string(decay_step)},
      {"decay_factor", format_double(decay_factor)},
      {"alpha", format_double(alpha)},
      {"beta", format_double(beta)},
      {"patience", std::to_string(patience)},
      {"min_delta", format_double(min_delta)},
      {"train_fraction", format_double(train_fraction)},
      {"validation_fraction", format_double(validation_fraction)},
      {"test_fraction", format_double(test_fraction)},
      {"seed", std::to_string(seed)},
  };
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "max_epochs") max_epochs = parse_u64(key, value);
  else if (key == "batch_size") batch_size = parse_u64(key, value);
  else if (key == "initial_lr") initial_lr = parse_double(key, value);
  else if (key == "decay_step") decay_step = parse_u64(key, value);
  else if (key == "decay_factor") decay_factor = parse_double(key, value);
  else if (key == "alpha") alpha = parse_double(key, value);
  else if (key == "beta") beta = parse_double(key, value);
  else if (key == "patience") patience = parse_u64(key, value);
  else if (key == "min_delta") min_delta = parse_double(key, value);
  else if (key == "train_fraction") train_fraction = parse_double(key, value);
  else if (key == "validation_fraction") validation_fraction = parse_double(key, value);
  else if (key == "test_fraction") test_fraction = parse_double(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else throw ConfigError("unknown train config key '" + key + "'");
}

// ---- Adam -------------------------------------------------------------------

Adam::Adam(ParameterList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Parameter& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = params_[k].tensor;
    auto data = w.data();
    const bool has = w.has_grad();
    std::span<const double> g = has ? w.grad() : std::span<const double>{};
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      data[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

// ---- data -------------------------------------------------------------------

DataSplit make_split(const Dataset& data, const TrainConfig& cfg) {
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.events.size(); ++i) {
    if (data.events[i].usable()) usable.push_back(i);
  }
  std::mt19937_64 rng(derive_seed(cfg.seed, "split"));
  std::shuffle(usable.begin(), usable.end(), rng);
  const std::size_t n = usable.size();
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(n))));
  DataSplit s;
  s.train.assign(usable.begin(), usable.begin() + n_train);
  s.validation.assign(usable.begin() + n_train, usable.begin() + n_train + n_val);
  s.test.assign(usable.begin() + n_train + n_val, usable.end());
  return s;
}

PreparedData prepare_data(const Dataset& data, const std::vector<std::size_t>& events, const FeatureScaler& fs,
                          const TargetScaler& ts) {
  PreparedData p;
  p.rows = events.size();
  p.features.reserve(p.rows * kNumFeatures);
  p.targets.reserve(p.rows * kNumTargets);
  p.mandelstam_s.assign(p.rows, data.config.beam.s());
  p.event_index = events;
  for (std::size_t i : events) {
    const GeneratedEvent& ev = data.events.at(i);
    const FeatureVector f = fs.transform(ev.features);
    p.features.insert(p.features.end(), f.begin(), f.end());
    const auto t = ts.transform(ev.truth);
    p.targets.insert(p.targets.end(), t.begin(), t.end());
  }
  return p;
}

namespace {
Tensor gather_rows(const std::vector<double>& src, std::size_t width, std::span<const std::size_t> rows) {
  std::vector<double> out(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width, out.begin() + r * width);
  }
  return Tensor({rows.size(), width}, std::move(out));
}
}  // namespace

Tensor PreparedData::feature_batch(std::span<const std::size_t> r) const { return gather_rows(features, kNumFeatures, r); }
Tensor PreparedData::target_batch(std::span<const std::size_t> r) const { return gather_rows(targets, kNumTargets, r); }

std::vector<double> PreparedData::s_batch(std::span<const std::size_t> r) const {
  std::vector<double> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = mandelstam_s[r[i]];
  return out;
}

// ---- TrainLog ---------------------------------------------------------------

void TrainLog::write_csv(const std::filesystem::path& path, const KeyValues& header) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& [k, v] : header) out << "# " << k << '=' << v << '\n';
  out << "# best_epoch=" << best_epoch << '\n';
  out << "# stop_reason=" << stop_reason << '\n';
  out << "epoch,lr,train_total,train_reg,train_phys,train_kl,validation_total,validation_reg,validation_phys,"
         "validation_kl,clamp_active_fraction,seconds\n";
  for (const EpochRecord& e : epochs) {
    out << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train.total) << ','
        << format_double(e.train.reg) << ',' << format_double(e.train.phys) << ',' << format_double(e.train.kl) << ','
        << format_double(e.validation.total) << ',' << format_double(e.validation.reg) << ','
        << format_double(e.validation.phys) << ',' << format_double(e.validation.kl) << ','
        << format_double(e.clamp_active_fraction) << ',' << format_double(e.seconds) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---- Trainer ----------------------------------------------------------------

Trainer::Trainer(Regressor& model, const TrainConfig& cfg, const Dataset& data)
    : model_(model), cfg_(cfg), n_batches_(1.0), optimizer_(model.parameters(), cfg.initial_lr) {
  cfg_.validate();
  split_ = make_split(data, cfg_);
  const std::size_t usable = split_.train.size() + split_.validation.size() + split_.test.size();
  if (usable < 10 * cfg_.batch_size) {
    throw ConfigError("training needs at least 10 x batch_size usable events (have " + std::to_string(usable) +
                      ", batch_size " + std::to_string(cfg_.batch_size) + ")");
  }
  std::vector<FeatureVector> f;
  std::vector<KinematicTriplet> t;
  f.reserve(split_.train.size());
  t.reserve(split_.train.size());
  for (std::size_t i : split_.train) {
    f.push_back(data.events[i].features);
    t.push_back(data.events[i].truth);
  }
  feature_scaler_.fit(f);
  target_scaler_.fit(t);
  train_ = prepare_data(data, split_.train, feature_scaler_, target_scaler_);
  validation_ = prepare_data(data, split_.validation, feature_scaler_, target_scaler_);
  n_batches_ = std::ceil(static_cast<double>(train_.rows) / static_cast<double>(cfg_.batch_size));
}

LossTerms Trainer::step(std::span<const std::size_t> rows, NoiseSource& noise) {
  const bool with_kl = model_.config().kind == ModelKind::kEluq && cfg_.beta > 0.0;
  optimizer_.zero_grad();
  Prediction p = model_.forward_train(train_.feature_batch(rows), noise, with_kl);
  Tensor reg = regression_loss(p.value, p.log_var, train_.target_batch(rows));
  Tensor phys = physics_loss_scaled(p.value, target_scaler_, train_.s_batch(rows));
  Tensor total = total_loss(reg, phys, p.kl, cfg_.alpha, cfg_.beta, n_batches_);
  LossTerms terms{total.item(), reg.item(), phys.item(), p.kl.item()};
  if (!finite_terms(terms)) throw DivergenceError("non-finite training loss");
  total.backward();
  optimizer_.step();
  model_.mark_updated();
  last_clamp_fraction_ = p.clamp_active_fraction;
  return terms;
}

LossTerms Trainer::evaluate(const PreparedData& set) const {
  NoGradGuard guard;
  NoiseSource noise(derive_seed(cfg_.seed, "validation"));
  const bool want_kl = model_.config().kind == ModelKind::kEluq && cfg_.beta > 0.0;
  LossTerms sum;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < set.rows; start += cfg_.batch_size) {
    const std::size_t end = std::min(set.rows, start + cfg_.batch_size);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    // The network KL does not depend on the batch; one estimate per pass.
    Prediction p = model_.forward_eval(set.feature_batch(rows), noise, want_kl && start == 0);
    const double w = static_cast<double>(rows.size());
    sum.reg += w * regression_loss(p.value, p.log_var, set.target_batch(rows)).item();
    sum.phys += w * physics_loss_scaled(p.value, target_scaler_, set.s_batch(rows)).item();
    if (start == 0) sum.kl = p.kl.item();
  }
  const double n = static_cast<double>(std::max<std::size_t>(set.rows, 1));
  sum.reg /= n;
  sum.phys /= n;
  sum.total = sum.reg + cfg_.alpha * sum.phys + cfg_.beta * sum.kl / n_batches_;
  return sum;
}

Trainer::Snapshot Trainer::snapshot() const {
  Snapshot s;
  for (const Parameter& p : model_.parameters()) s.params.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  for (BatchNorm* bn : model_.batch_norms()) s.stats.push_back(bn->stats());
  return s;
}

void Trainer::restore(const Snapshot& s) {
  ParameterList params = model_.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) std::ranges::copy(s.params[k], params[k].tensor.data().begin());
  auto norms = model_.batch_norms();
  for (std::size_t k = 0; k < norms.size(); ++k) norms[k]->stats() = s.stats[k];
  model_.mark_updated();
}

TrainLog Trainer::fit() {
  using Clock = std::chrono::steady_clock;
  TrainLog log;
  Snapshot best = snapshot();
  double plateau_ref = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::vector<std::size_t> order(train_.rows);
  std::size_t epoch = 1;
  auto diverge = [&](const char* what) {
    restore(best);
    log.diverged = true;
    log.stop_reason = std::string("diverged at epoch ") + std::to_string(epoch) + ": " + what +
                      "; restored parameters from epoch " + std::to_string(log.best_epoch);
    return log;
  };

  for (; epoch <= cfg_.max_epochs; ++epoch) {
    const auto t0 = Clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cfg_.lr_at(epoch);
    optimizer_.set_lr(rec.lr);

    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg_.seed, "shuffle", epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    NoiseSource noise(derive_seed(cfg_.seed, "train_noise", epoch));

    try {
      double weight = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
        std::span<const std::size_t> rows(order.data() + start, end - start);
        const LossTerms t = step(rows, noise);
        const double w = static_cast<double>(rows.size());
        rec.train.total += w * t.total;
        rec.train.reg += w * t.reg;
        rec.train.phys += w * t.phys;
        rec.train.kl += w * t.kl;
        rec.clamp_active_fraction += w * last_clamp_fraction_;
        weight += w;
      }
      rec.train.total /= weight;
      rec.train.reg /= weight;
      rec.train.phys /= weight;
      rec.train.kl /= weight;
      rec.clamp_active_fraction /= weight;
      rec.validation = evaluate(validation_);
      if (!finite_terms(rec.validation)) throw DivergenceError("non-finite validation loss");
    } catch (const DivergenceError& e) {
      return diverge(e.what());
    } catch (const DomainError& e) {  // an op overflowed
      return diverge(e.what());
    }
    rec.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    log.epochs.push_back(rec);

    if (rec.validation.total < log.best_validation) {
      log.best_validation = rec.validation.total;
      log.best_epoch = epoch;
      best = snapshot();
    }
    if (rec.validation.total < plateau_ref - cfg_.min_delta) {
      plateau_ref = rec.validation.total;
      stale = 0;
    } else if (++stale >= cfg_.patience && cfg_.patience > 0) {
      log.stop_reason = "validation loss plateaued for " + std::to_string(cfg_.patience) + " epochs";
      break;
    }
  }
  if (log.stop_reason.empty()) log.stop_reason = "reached max_epochs";
  restore(best);
  return log;
}

// ---- checkpoints ------------------------------------------------------------

Checkpoint make_checkpoint(Regressor& model, const FeatureScaler& fs, const TargetScaler& ts, const TrainConfig& cfg,
                           const DataSplit& split, KeyValues info) {
  Checkpoint c;
  c.network = model.config();
  c.train = cfg;
  c.features = fs;
  c.targets = ts;
  c.split = split;
  c.info = std::move(info);
  for (const Parameter& p : model.parameters()) {
    c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  }
  auto norms = model.batch_norms();
  for (std::size_t k = 0; k < norms.size(); ++k) {
    const BatchNormStats& st = norms[k]->stats();
    const std::string prefix = "bn" + std::to_string(k);
    c.tensors.push_back({prefix + ".running_mean", {st.running_mean.size()}, st.running_mean});
    c.tensors.push_back({prefix + ".running_var", {st.running_var.size()}, st.running_var});
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<Checkpoint::Entry> entries = ckpt.tensors;
  entries.push_back({"scaler.features", {2 * kNumFeatures}, ckpt.features.state()});
  entries.push_back({"scaler.targets", {2 * kNumTargets}, ckpt.targets.state()});
  entries.push_back({"split.train", {ckpt.split.train.size()}, indices_to_doubles(ckpt.split.train)});
  entries.push_back({"split.validation", {ckpt.split.validation.size()}, indices_to_doubles(ckpt.split.validation)});
  entries.push_back({"split.test", {ckpt.split.test.size()}, indices_to_doubles(ckpt.split.test)});

  std::string payload;
  append_le<std::uint64_t>(payload, entries.size());
  for (const auto& e : entries) {
    append_le<std::uint32_t>(payload, static_cast<std::uint32_t>(e.name.size()));
    payload += e.name;
    append_le<std::uint32_t>(payload, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) append_le<std::uint64_t>(payload, d);
    for (double v : e.values) append_le<double>(payload, v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "ELUQ-CHECKPOINT\n";
  out << "format_version=" << kCheckpointFormatVersion << '\n';
  out << "code_version=" << ckpt.code_version << '\n';
  for (const auto& [k, v] : ckpt.network.to_key_values()) out << "network." << k << '=' << v << '\n';
  for (const auto& [k, v] : ckpt.train.to_key_values()) out << "train." << k << '=' << v << '\n';
  for (const auto& [k, v] : ckpt.info) out << "info." << k << '=' << v << '\n';
  out << "payload_bytes=" << payload.size() << '\n';
  out << "payload_crc32=" << detail::crc32_of(payload) << '\n';
  out << "end_header\n";
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "ELUQ-CHECKPOINT") {
    throw FormatError("'" + path.string() + "' is not a checkpoint file");
  }
  Checkpoint c;
  std::optional<std::uint64_t> payload_bytes, payload_crc;
  bool have_version = false;
  while (true) {
    if (!std::getline(in, line)) throw FormatError("checkpoint header is truncated");
    if (line == "end_header") break;
    std::string key, value;
    if (!split_key_value(line, key, value)) throw FormatError("malformed checkpoint header line '" + line + "'");
    try {
      if (key == "format_version") {
        if (value != std::to_string(kCheckpointFormatVersion)) {
          throw FormatError("unsupported checkpoint format version " + value);
        }
        have_version = true;
      } else if (key == "code_version") {
        c.code_version = value;
      } else if (key.starts_with("network.")) {
        c.network.set(key.substr(8), value);
      } else if (key.starts_with("train.")) {
        c.train.set(key.substr(6), value);
      } else if (key.starts_with("info.")) {
        c.info.emplace_back(key.substr(5), value);
      } else if (key == "payload_bytes") {
        payload_bytes = parse_u64(key, value);
      } else if (key == "payload_crc32") {
        payload_crc = parse_u64(key, value);
      } else {
        throw FormatError("unknown checkpoint header key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      throw FormatError(std::string("checkpoint header: ") + e.what());
    }
  }
  if (!have_version || !payload_bytes || !payload_crc) {
    throw FormatError("checkpoint header lacks format_version or payload fields");
  }
  std::string payload(*payload_bytes, '\0');
  if (!in.read(payload.data(), static_cast<std::streamsize>(payload.size()))) {
    throw FormatError("checkpoint payload is truncated");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after the checkpoint payload");
  if (detail::crc32_of(payload) != *payload_crc) throw FormatError("checkpoint checksum mismatch");

  detail::PayloadReader r(payload, "checkpoint");
  const auto n = r.read<std::uint64_t>();
  std::map<std::string, std::vector<double>> special;
  for (std::uint64_t k = 0; k < n; ++k) {
    Checkpoint::Entry e;
    e.name = r.read_string(r.read<std::uint32_t>());
    const auto rank = r.read<std::uint32_t>();
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      e.shape.push_back(r.read<std::uint64_t>());
      count *= e.shape.back();
    }
    if (count > payload.size() / 8) throw FormatError("checkpoint tensor '" + e.name + "' is larger than the payload");
    e.values.resize(count);
    for (double& v : e.values) v = r.read<double>();
    if (e.name.starts_with("scaler.") || e.name.starts_with("split.")) {
      special[e.name] = std::move(e.values);
    } else {
      c.tensors.push_back(std::move(e));
    }
  }
  if (!r.done()) throw FormatError("checkpoint payload has unread bytes");
  for (const char* name : {"scaler.features", "scaler.targets", "split.train", "split.validation", "split.test"}) {
    if (!special.contains(name)) throw FormatError(std::string("checkpoint lacks '") + name + "'");
  }
  c.features.set_state(special["scaler.features"]);
  c.targets.set_state(special["scaler.targets"]);
  c.split.train = doubles_to_indices(special["split.train"]);
  c.split.validation = doubles_to_indices(special["split.validation"]);
  c.split.test = doubles_to_indices(special["split.test"]);
  return c;
}

std::unique_ptr<Regressor> restore_model(const Checkpoint& ckpt) {
  auto model = make_regressor(ckpt.network, 0);
  std::map<std::string, const Checkpoint::Entry*> by_name;
  for (const auto& e : ckpt.tensors) {
    if (!by_name.emplace(e.name, &e).second) throw FormatError("duplicate checkpoint tensor '" + e.name + "'");
  }
  std::size_t used = 0;
  auto take = [&](const std::string& name, const Shape& shape) -> const Checkpoint::Entry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape != shape) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_string(it->second->shape) +
                        ", expected " + shape_string(shape));
    }
    ++used;
    return *it->second;
  };
  for (Parameter& p : model->parameters()) {
    const auto& e = take(p.name, p.tensor.shape());
    std::ranges::copy(e.values, p.tensor.data().begin());
  }
  auto norms = model->batch_norms();
  for (std::size_t k = 0; k < norms.size(); ++k) {
    BatchNormStats& st = norms[k]->stats();
    const std::string prefix = "bn" + std::to_string(k);
    st.running_mean = take(prefix + ".running_mean", {st.running_mean.size()}).values;
    st.running_var = take(prefix + ".running_var", {st.running_var.size()}).values;
  }
  if (used != by_name.size()) throw FormatError("checkpoint holds tensors the network does not use");
  model->mark_updated();
  return model;
}

}  // namespace eluq
