// eluq: generate | train | infer | analyze | selftest

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eluq/analysis.hpp"
#include "eluq/errors.hpp"
#include "eluq/generator.hpp"
#include "eluq/model.hpp"
#include "eluq/random.hpp"
#include "eluq/selftest.hpp"
#include "eluq/text.hpp"
#include "eluq/trainer.hpp"

namespace {

using namespace eluq;

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,
  kDiverged = 4,
  kSelftestFailed = 5,
  kBadFormat = 6,
};

// A group of keys owned by one config struct. Flags and config-file keys map
// onto these one-to-one.
struct Section {
  std::string prefix;  // used when echoing the resolved config
  KeyValues defaults;
  std::function<void(const std::string&, const std::string&)> set;
};

// Key registry of one subcommand: defaults < config file < flags.
class RunConfig {
 public:
  void add(Section s) {
    for (const auto& [k, v] : s.defaults) {
      if (owner_.count(k)) throw ContractError("duplicate key '" + k + "'");
      owner_[k] = sections_.size();
      order_.push_back(k);
    }
    sections_.push_back(std::move(s));
  }

  void register_flags(CLI::App& app) {
    for (const std::string& key : order_) {
      app.add_option("--" + key, flag_values_[key], "default: " + default_of(key));
    }
    app.add_option("--config", config_path_, "key=value file; flags override it");
  }

  void add_alias(CLI::App& app, const std::string& alias, const std::string& key) {
    app.add_option("--" + alias, flag_values_[key], "alias of --" + key);
  }

  // Applies the config file, then any flags that were given.
  void resolve(const CLI::App& app) {
    std::map<std::string, std::string> chosen;
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw IoError("cannot open config '" + config_path_ + "'");
      std::string line, key, value;
      for (int n = 1; std::getline(in, line); ++n) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        if (!split_key_value(line, key, value)) {
          throw ConfigError(config_path_ + ":" + std::to_string(n) + ": expected key=value");
        }
        if (!owner_.count(key)) throw ConfigError("unknown key '" + key + "' in " + config_path_);
        chosen[key] = value;
      }
    }
    for (const auto& [key, value] : flag_values_) {
      if (app.count("--" + key) > 0 || !value.empty()) chosen[key] = value;
    }
    for (const std::string& key : order_) {
      if (auto it = chosen.find(key); it != chosen.end()) sections_[owner_.at(key)].set(key, it->second);
    }
  }

  const std::string& config_path() const { return config_path_; }

 private:
  std::string default_of(const std::string& key) const {
    for (const auto& [k, v] : sections_[owner_.at(key)].defaults)
      if (k == key) return v;
    return {};
  }

  std::vector<Section> sections_;
  std::map<std::string, std::size_t> owner_;
  std::vector<std::string> order_;
  std::map<std::string, std::string> flag_values_;
  std::string config_path_;
};

template <class Config>
Section section_of(const std::string& prefix, Config& cfg) {
  return {prefix, cfg.to_key_values(), [&cfg](const std::string& k, const std::string& v) { cfg.set(k, v); }};
}

void append_prefixed(KeyValues& out, const std::string& prefix, const KeyValues& kv) {
  for (const auto& [k, v] : kv) out.emplace_back(prefix + k, v);
}

void write_sidecar(const std::filesystem::path& path, const KeyValues& kv) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---- generate ---------------------------------------------------------------

struct GenerateRun {
  std::size_t events = 100000;
  std::string out = "events.bin";
  std::string csv;
  unsigned threads = 0;

  KeyValues to_key_values() const {
    return {{"events", std::to_string(events)}, {"out", out}, {"csv", csv}, {"threads", std::to_string(threads)}};
  }
  void set(const std::string& k, const std::string& v) {
    if (k == "events") events = parse_u64(k, v);
    else if (k == "out") out = v;
    else if (k == "csv") csv = v;
    else if (k == "threads") threads = static_cast<unsigned>(parse_u64(k, v));
    else throw ConfigError("unknown key '" + k + "'");
  }
};

int cmd_generate(GeneratorConfig& gen, const GenerateRun& run) {
  if (run.events == 0) throw ConfigError("events: must be positive");
  gen.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset data = generate_dataset(gen, run.events, run.out, run.threads);
  if (!run.csv.empty()) write_dataset_csv(run.csv, data);

  KeyValues echo{{"code_version", ELUQ_VERSION}};
  append_prefixed(echo, "run.", run.to_key_values());
  append_prefixed(echo, "generator.", gen.to_key_values());
  write_sidecar(run.out + ".config", echo);

  std::size_t usable = 0;
  for (const GeneratedEvent& e : data.events) usable += e.usable() ? 1 : 0;
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("wrote %zu events (%zu usable) to %s in %.2f s\n", data.events.size(), usable, run.out.c_str(), s);
  return kOk;
}

// ---- train ------------------------------------------------------------------

struct TrainRun {
  std::string data = "events.bin";
  std::string out = "model.ckpt";
  std::string log;

  KeyValues to_key_values() const { return {{"data", data}, {"out", out}, {"log", log}}; }
  void set(const std::string& k, const std::string& v) {
    if (k == "data") data = v;
    else if (k == "out") out = v;
    else if (k == "log") log = v;
    else throw ConfigError("unknown key '" + k + "'");
  }
};

int cmd_train(NetworkConfig& net, TrainConfig& train, const TrainRun& run) {
  train.validate();
  const Dataset data = read_dataset(run.data);
  auto model = make_regressor(net, derive_seed(train.seed, "init"));
  Trainer trainer(*model, train, data);

  KeyValues echo{{"code_version", ELUQ_VERSION}};
  append_prefixed(echo, "run.", run.to_key_values());
  append_prefixed(echo, "network.", net.to_key_values());
  append_prefixed(echo, "train.", train.to_key_values());
  KeyValues info = echo;
  append_prefixed(info, "dataset.", data.config.to_key_values());
  info.emplace_back("dataset.events", std::to_string(data.events.size()));

  std::printf("training %s: %zu parameters, %zu/%zu/%zu train/validation/test events\n",
              model_kind_name(net.kind).c_str(), model->parameter_count(), trainer.split().train.size(),
              trainer.split().validation.size(), trainer.split().test.size());
  const TrainLog log = trainer.fit();
  for (const EpochRecord& e : log.epochs) {
    std::printf("epoch %3zu lr %.1e train %.5f val %.5f (reg %.5f phys %.5f kl %.3f) %.1f s\n", e.epoch, e.lr,
                e.train.total, e.validation.total, e.validation.reg, e.validation.phys, e.validation.kl, e.seconds);
  }
  std::printf("%s; best epoch %zu\n", log.stop_reason.c_str(), log.best_epoch);

  // On divergence the trainer has restored the last good parameters.
  if (log.diverged && log.best_epoch == 0) {
    std::fprintf(stderr, "error: diverged before any epoch completed; no checkpoint written\n");
    return kDiverged;
  }
  info.emplace_back("train.best_epoch", std::to_string(log.best_epoch));
  info.emplace_back("train.stop_reason", log.stop_reason);
  save_checkpoint(run.out, make_checkpoint(*model, trainer.feature_scaler(), trainer.target_scaler(), train,
                                           trainer.split(), info));
  const std::string log_path = run.log.empty() ? run.out + ".log.csv" : run.log;
  log.write_csv(log_path, echo);
  std::printf("wrote %s and %s\n", run.out.c_str(), log_path.c_str());
  if (log.diverged) {
    std::fprintf(stderr, "error: %s\n", log.stop_reason.c_str());
    return kDiverged;
  }
  return kOk;
}

// ---- infer ------------------------------------------------------------------

struct InferRun {
  std::string checkpoint = "model.ckpt";
  std::string data = "events.bin";
  std::string out = "predictions.bin";
  std::string events = "test";  // test | validation | train | all

  KeyValues to_key_values() const {
    return {{"checkpoint", checkpoint}, {"data", data}, {"out", out}, {"events", events}};
  }
  void set(const std::string& k, const std::string& v) {
    if (k == "checkpoint") checkpoint = v;
    else if (k == "data") data = v;
    else if (k == "out") out = v;
    else if (k == "events") {
      if (v != "test" && v != "validation" && v != "train" && v != "all")
        throw ConfigError("events: expected test, validation, train or all, got '" + v + "'");
      events = v;
    } else throw ConfigError("unknown key '" + k + "'");
  }
};

int cmd_infer(InferenceConfig& inf, const InferRun& run) {
  inf.validate();
  const Checkpoint ckpt = load_checkpoint(run.checkpoint);
  const Dataset data = read_dataset(run.data);
  auto model = restore_model(ckpt);

  std::vector<std::size_t> events;
  if (run.events == "test") events = ckpt.split.test;
  else if (run.events == "validation") events = ckpt.split.validation;
  else if (run.events == "train") events = ckpt.split.train;
  else
    for (std::size_t i = 0; i < data.events.size(); ++i)
      if (data.events[i].usable()) events.push_back(i);
  for (std::size_t i : events) {
    if (i >= data.events.size()) throw FormatError("checkpoint split does not match dataset '" + run.data + "'");
  }

  const auto t0 = std::chrono::steady_clock::now();
  PredictionFile file;
  file.inference = inf;
  file.records = sample_posterior(*model, ckpt.features, ckpt.targets, data, events, inf);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  file.info.emplace_back("code_version", ELUQ_VERSION);
  append_prefixed(file.info, "run.", run.to_key_values());
  append_prefixed(file.info, "network.", ckpt.network.to_key_values());
  file.info.emplace_back("checkpoint.code_version", ckpt.code_version);
  append_prefixed(file.info, "checkpoint.", ckpt.info);
  write_predictions(run.out, file);

  const bool stochastic = ckpt.network.kind == ModelKind::kEluq;
  const double n = static_cast<double>(file.records.size());
  const double passes = stochastic ? static_cast<double>(inf.n_samples) : 1.0;
  std::printf("%zu events, %zu samples each, %.3f s\n", file.records.size(), stochastic ? inf.n_samples : 1, s);
  std::printf("throughput: %.1f events/s, %.1f samples/s\n", n / s, n * passes / s);
  std::printf("wrote %s\n", run.out.c_str());
  return kOk;
}

// ---- analyze ----------------------------------------------------------------

struct AnalyzeRun {
  std::string predictions = "predictions.bin";
  std::string dnn;
  std::string small;
  std::string out = "report";

  KeyValues to_key_values() const {
    return {{"predictions", predictions}, {"dnn", dnn}, {"small", small}, {"out", out}};
  }
  void set(const std::string& k, const std::string& v) {
    if (k == "predictions") predictions = v;
    else if (k == "dnn") dnn = v;
    else if (k == "small") small = v;
    else if (k == "out") out = v;
    else throw ConfigError("unknown key '" + k + "'");
  }
};

int cmd_analyze(AnalysisConfig& cfg, const AnalyzeRun& run) {
  cfg.validate();
  const PredictionFile main_file = read_predictions(run.predictions);
  PredictionFile dnn, small;
  if (!run.dnn.empty()) dnn = read_predictions(run.dnn);
  if (!run.small.empty()) small = read_predictions(run.small);

  const Report report = analyze(main_file.records, dnn.records, small.records, cfg);

  KeyValues header{{"code_version", ELUQ_VERSION}};
  append_prefixed(header, "run.", run.to_key_values());
  append_prefixed(header, "predictions.", main_file.info);
  if (!run.dnn.empty()) append_prefixed(header, "dnn.", dnn.info);
  if (!run.small.empty()) append_prefixed(header, "small.", small.info);

  std::filesystem::create_directories(run.out);
  for (const auto& p : emit_report(report, run.out, header)) std::printf("wrote %s\n", p.string().c_str());
  for (const std::string& n : report.notices) std::printf("notice: %s\n", n.c_str());
  return kOk;
}

// ---- selftest ---------------------------------------------------------------

int cmd_selftest(const SelfTestOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<CheckResult> results = run_selftest(opt);
  std::size_t failed = 0;
  for (const CheckResult& r : results) {
    std::printf("%-4s %-36s measured %.3e tolerance %.1e%s%s\n", r.passed ? "ok" : "FAIL", r.name.c_str(),
                r.measured, r.tolerance, r.detail.empty() ? "" : "  ", r.detail.c_str());
    failed += r.passed ? 0 : 1;
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu checks, %zu failed, %.1f s\n", results.size(), failed, s);
  return failed == 0 ? kOk : kSelftestFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ELUQ: DIS kinematics regression with uncertainty quantification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ELUQ_VERSION);

  GeneratorConfig gen;
  GenerateRun gen_run;
  RunConfig gen_keys;
  auto* generate = app.add_subcommand("generate", "Generate a synthetic event dataset");

  NetworkConfig net;
  TrainConfig train;
  TrainRun train_run;
  RunConfig train_keys;
  auto* train_cmd = app.add_subcommand("train", "Train ELUQ or the DNN baseline");

  InferenceConfig inf;
  InferRun infer_run;
  RunConfig infer_keys;
  auto* infer = app.add_subcommand("infer", "Sample the posterior on a dataset");

  AnalysisConfig ana;
  AnalyzeRun ana_run;
  RunConfig ana_keys;
  auto* analyze_cmd = app.add_subcommand("analyze", "Write resolution, closure and cut tables");

  SelfTestOptions st;
  auto* selftest = app.add_subcommand("selftest", "Run the built-in numerical checks");

  try {
    gen_keys.add(section_of("run.", gen_run));
    gen_keys.add(section_of("generator.", gen));
    gen_keys.register_flags(*generate);

    train_keys.add(section_of("run.", train_run));
    train_keys.add(section_of("network.", net));
    train_keys.add(section_of("train.", train));
    train_keys.register_flags(*train_cmd);

    infer_keys.add(section_of("run.", infer_run));
    infer_keys.add(section_of("inference.", inf));
    infer_keys.register_flags(*infer);
    infer_keys.add_alias(*infer, "samples", "n_samples");
    infer_keys.add_alias(*infer, "batch", "batch_size");

    ana_keys.add(section_of("run.", ana_run));
    ana_keys.add(section_of("analysis.", ana));
    ana_keys.register_flags(*analyze_cmd);

    selftest->add_flag("--corrupt-selu", st.corrupt_selu, "Perturb the SELU backward pass (mutation check)");
    selftest->add_option("--trials", st.primitive_trials, "Random trials per primitive");
    selftest->add_option("--kinematics-events", st.kinematics_events, "Events in the reconstruction check");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kInternal;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (generate->parsed()) {
      gen_keys.resolve(*generate);
      return cmd_generate(gen, gen_run);
    }
    if (train_cmd->parsed()) {
      train_keys.resolve(*train_cmd);
      return cmd_train(net, train, train_run);
    }
    if (infer->parsed()) {
      infer_keys.resolve(*infer);
      return cmd_infer(inf, infer_run);
    }
    if (analyze_cmd->parsed()) {
      ana_keys.resolve(*analyze_cmd);
      return cmd_analyze(ana, ana_run);
    }
    if (selftest->parsed()) return cmd_selftest(st);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kBadFormat;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInternal;
  }
  return kUsage;
}
