#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <numeric>
#include <set>

#include "doctest.h"
#include "eluq/errors.hpp"
#include "eluq/generator.hpp"
#include "eluq/trainer.hpp"

using namespace eluq;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "eluq_test_trainer";
  fs::create_directories(dir);
  return dir / name;
}

NetworkConfig small_net(ModelKind kind = ModelKind::kEluq) {
  NetworkConfig cfg;
  cfg.kind = kind;
  cfg.trunk_widths = {32, 32};
  cfg.head_widths = {16};
  cfg.mnf.flow_hidden = 8;
  cfg.log_var_head = true;
  return cfg;
}

const Dataset& generated() {
  static const Dataset data = [] {
    Dataset d;
    d.config.seed = 42;
    d.events = generate_events(d.config, 6000, 1);
    return d;
  }();
  return data;
}

// log10 targets linear in the features plus Gaussian noise of known width.
struct LinearTask {
  Dataset data;
  std::array<double, 3> log10_sigma{0.05, 0.08, 0.03};
};

LinearTask linear_task(std::size_t n, std::uint64_t seed) {
  LinearTask task;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  std::array<std::array<double, kNumFeatures>, 3> w{};
  for (auto& row : w)
    for (double& v : row) v = 0.15 * u(rng);
  task.data.events.resize(n);
  for (auto& ev : task.data.events) {
    for (double& f : ev.features) f = u(rng);
    std::array<double, 3> lg{-2.0, 3.0, -0.7};
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t k = 0; k < kNumFeatures; ++k) lg[j] += w[j][k] * ev.features[k];
      lg[j] += task.log10_sigma[j] * g(rng);
    }
    ev.truth = {std::pow(10.0, lg[0]), std::pow(10.0, lg[1]), std::pow(10.0, lg[2])};
  }
  return task;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.batch_size = 256;
  cfg.initial_lr = 2e-3;
  cfg.seed = 7;
  return cfg;
}

std::vector<double> flat_values(Regressor& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace

TEST_CASE("learning-rate schedule is a step function") {
  TrainConfig cfg;
  for (std::size_t e = 1; e <= 100; ++e) {
    CHECK(cfg.lr_at(e) == (e <= 50 ? 5e-4 : 5e-4 * 0.1));
  }
  CHECK_THROWS_AS(cfg.lr_at(0), ContractError);

  TrainConfig quick = quick_config();
  quick.max_epochs = 5;
  quick.decay_step = 2;
  quick.decay_factor = 0.5;
  quick.patience = 100;
  auto model = make_regressor(small_net(ModelKind::kDnn), 1);
  Trainer trainer(*model, quick, generated());
  const TrainLog log = trainer.fit();
  REQUIRE(log.epochs.size() == 5);
  const double lr0 = quick.initial_lr;
  const std::array<double, 5> expected{lr0, lr0, lr0 * 0.5, lr0 * 0.5, lr0 * 0.25};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(log.epochs[i].epoch == i + 1);
    CHECK(log.epochs[i].lr == expected[i]);
  }
}

TEST_CASE("configuration validation and key round trip") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.test_fraction = 0.2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.initial_lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(cfg.set("learning_rate", "1"), ConfigError);

  TrainConfig other;
  other.max_epochs = 1;
  other.seed = 99;
  for (const auto& [k, v] : cfg.to_key_values()) other.set(k, v);
  CHECK(other.to_key_values() == cfg.to_key_values());
}

TEST_CASE("split is 70/15/15 over usable events and scalers see only the training part") {
  Dataset data = generated();
  data.events[3].flags |= kUnusable;
  data.events[10].flags |= kUnusable;
  TrainConfig cfg = quick_config();
  auto model = make_regressor(small_net(ModelKind::kDnn), 1);
  Trainer trainer(*model, cfg, data);
  const DataSplit& s = trainer.split();
  const std::size_t usable = data.events.size() - 2;
  CHECK(s.train.size() + s.validation.size() + s.test.size() == usable);
  CHECK(std::abs(static_cast<double>(s.train.size()) - 0.70 * usable) <= 1.0);
  CHECK(std::abs(static_cast<double>(s.validation.size()) - 0.15 * usable) <= 1.0);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == usable);
  CHECK(!all.contains(3));
  CHECK(!all.contains(10));

  FeatureScaler train_only, val_only;
  std::vector<FeatureVector> tf, vf;
  for (std::size_t i : s.train) tf.push_back(data.events[i].features);
  for (std::size_t i : s.validation) vf.push_back(data.events[i].features);
  train_only.fit(tf);
  val_only.fit(vf);
  CHECK(trainer.feature_scaler().state() == train_only.state());
  CHECK(val_only.state() != train_only.state());

  TrainConfig big = cfg;
  big.batch_size = 1024;
  CHECK_THROWS_AS(Trainer(*model, big, data), ConfigError);
}

TEST_CASE("same configuration and seed give bit-identical runs") {
  auto run = [] {
    auto model = make_regressor(small_net(), derive_seed(7, "init"));
    TrainConfig cfg = quick_config();
    cfg.max_epochs = 2;
    Trainer trainer(*model, cfg, generated());
    TrainLog log = trainer.fit();
    return std::make_pair(log, flat_values(*model));
  };
  auto [a, pa] = run();
  auto [b, pb] = run();
  REQUIRE(a.epochs.size() == b.epochs.size());
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    CHECK(std::memcmp(&a.epochs[i].train, &b.epochs[i].train, sizeof(LossTerms)) == 0);
    CHECK(std::memcmp(&a.epochs[i].validation, &b.epochs[i].validation, sizeof(LossTerms)) == 0);
  }
  CHECK(pa == pb);
}

TEST_CASE("returned parameters are the best validation epoch") {
  auto model = make_regressor(small_net(), 5);
  TrainConfig cfg = quick_config();
  cfg.max_epochs = 6;
  cfg.initial_lr = 2e-2;  // noisy enough that the last epoch is rarely the best
  Trainer trainer(*model, cfg, generated());
  const TrainLog log = trainer.fit();
  REQUIRE(!log.epochs.empty());
  const LossTerms now = trainer.evaluate(trainer.validation_data());
  CHECK(now.total == log.best_validation);
  for (const auto& e : log.epochs) CHECK(now.total <= e.validation.total);
  CHECK(log.epochs[log.best_epoch - 1].validation.total == log.best_validation);
}

TEST_CASE("early stopping ends a plateaued run") {
  auto model = make_regressor(small_net(ModelKind::kDnn), 5);
  TrainConfig cfg = quick_config();
  cfg.max_epochs = 50;
  cfg.initial_lr = 1e-12;  // nothing moves, so validation never improves by min_delta
  cfg.patience = 2;
  Trainer trainer(*model, cfg, generated());
  const TrainLog log = trainer.fit();
  CHECK(log.epochs.size() < cfg.max_epochs);
  CHECK(log.stop_reason.find("plateaued") != std::string::npos);
  // The last `patience` epochs never beat the earlier best by min_delta.
  const std::size_t n = log.epochs.size();
  double ref = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + cfg.patience < n; ++i) ref = std::min(ref, log.epochs[i].validation.total);
  for (std::size_t i = n - cfg.patience; i < n; ++i) CHECK(log.epochs[i].validation.total >= ref - cfg.min_delta);
}

TEST_CASE("linear task approaches the entropy floor and the baseline keeps up") {
  LinearTask task = linear_task(40000, 3);
  TrainConfig cfg;
  cfg.max_epochs = 20;
  cfg.batch_size = 256;
  cfg.initial_lr = 2e-3;
  cfg.alpha = 0.0;
  cfg.seed = 11;

  auto eluq = make_regressor(small_net(), derive_seed(cfg.seed, "init"));
  Trainer t_eluq(*eluq, cfg, task.data);
  const TrainLog log_eluq = t_eluq.fit();

  double floor = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    const double sigma_scaled = task.log10_sigma[j] / t_eluq.target_scaler().log10_slope(j);
    floor += 0.5 * (1.0 + std::log(sigma_scaled * sigma_scaled));
  }
  const double reg_eluq = t_eluq.evaluate(t_eluq.validation_data()).reg;
  INFO("floor " << floor << " eluq " << reg_eluq);
  CHECK(std::abs(reg_eluq - floor) <= 0.05 * std::abs(floor));

  auto dnn = make_regressor(small_net(ModelKind::kDnn), derive_seed(cfg.seed, "init"));
  TrainConfig dcfg = cfg;
  dcfg.beta = 0.0;
  Trainer t_dnn(*dnn, dcfg, task.data);
  t_dnn.fit();
  const double reg_dnn = t_dnn.evaluate(t_dnn.validation_data()).reg;
  INFO("dnn " << reg_dnn);
  CHECK(reg_dnn <= reg_eluq + 0.05 * std::abs(reg_eluq));
}

TEST_CASE("degenerate posterior training tracks the baseline step by step") {
  NetworkConfig ncfg = small_net();
  ncfg.mnf.mode = PosteriorMode::kMeanField;
  ncfg.mnf.log_var_cap = -30.0;
  EluqNetwork eluq(ncfg, 8);
  NetworkConfig dcfg = ncfg;
  dcfg.kind = ModelKind::kDnn;
  DnnBaseline dnn(dcfg, 9);
  dnn.copy_means_from(eluq);

  TrainConfig cfg = quick_config();
  cfg.beta = 0.0;
  Trainer te(eluq, cfg, generated());
  Trainer td(dnn, cfg, generated());
  NoiseSource ne(1), nd(1);
  std::vector<std::size_t> order(te.train_data().rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(3);
  std::shuffle(order.begin(), order.end(), rng);
  double worst = 0.0;
  for (std::size_t step = 0; step < 50; ++step) {
    const std::size_t start = (step * cfg.batch_size) % (order.size() - cfg.batch_size);
    std::span<const std::size_t> rows(order.data() + start, cfg.batch_size);
    const LossTerms a = te.step(rows, ne);
    const LossTerms b = td.step(rows, nd);
    worst = std::max(worst, std::abs(a.total - b.total));
  }
  INFO("worst per-step difference " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round trip reproduces forward passes bit for bit") {
  auto model = make_regressor(small_net(), 4);
  TrainConfig cfg = quick_config();
  cfg.max_epochs = 1;
  Trainer trainer(*model, cfg, generated());
  trainer.fit();
  const fs::path path = temp_path("roundtrip.ckpt");
  Checkpoint ckpt = make_checkpoint(*model, trainer.feature_scaler(), trainer.target_scaler(), cfg, trainer.split(),
                                    {{"dataset_seed", "42"}});
  save_checkpoint(path, ckpt);
  const Checkpoint loaded = load_checkpoint(path);
  auto restored = restore_model(loaded);

  CHECK(loaded.split.train == trainer.split().train);
  CHECK(loaded.split.validation == trainer.split().validation);
  CHECK(loaded.split.test == trainer.split().test);
  CHECK(loaded.features.state() == trainer.feature_scaler().state());
  CHECK(loaded.targets.state() == trainer.target_scaler().state());
  CHECK(loaded.train.to_key_values() == cfg.to_key_values());
  CHECK(loaded.network.to_key_values() == model->config().to_key_values());

  std::vector<std::size_t> rows(50);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Tensor x = trainer.validation_data().feature_batch(rows);
  NoiseSource n1(5), n2(5);
  Prediction a = model->forward_eval(x, n1, true);
  Prediction b = restored->forward_eval(x, n2, true);
  CHECK(std::ranges::equal(a.value.values(), b.value.values()));
  CHECK(std::ranges::equal(a.log_var.values(), b.log_var.values()));
  CHECK(a.kl.item() == b.kl.item());

  // Saving the restored model gives the same bytes.
  const fs::path again = temp_path("roundtrip2.ckpt");
  save_checkpoint(again, make_checkpoint(*restored, loaded.features, loaded.targets, loaded.train, loaded.split,
                                         {{"dataset_seed", "42"}}));
  std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
}

TEST_CASE("corrupted checkpoints raise format errors") {
  auto model = make_regressor(small_net(ModelKind::kDnn), 4);
  TrainConfig cfg = quick_config();
  Trainer trainer(*model, cfg, generated());
  const fs::path path = temp_path("corrupt.ckpt");
  save_checkpoint(path, make_checkpoint(*model, trainer.feature_scaler(), trainer.target_scaler(), cfg,
                                        trainer.split()));
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();
  auto write = [&](const std::string& b) {
    const fs::path p = temp_path("corrupt_variant.ckpt");
    std::ofstream(p, std::ios::binary | std::ios::trunc) << b;
    return p;
  };

  std::string flipped = bytes;
  flipped[flipped.size() - 20] ^= 0x5a;
  CHECK_THROWS_AS(load_checkpoint(write(flipped)), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write(bytes.substr(0, bytes.size() - 9))), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write(bytes + "x")), FormatError);
  std::string version = bytes;
  version.replace(version.find("format_version=1"), 16, "format_version=9");
  CHECK_THROWS_AS(load_checkpoint(write(version)), FormatError);
  CHECK_THROWS_AS(load_checkpoint(write("ELUQ-DATASET\n")), FormatError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("does_not_exist.ckpt")), IoError);

  // Shape mismatch is caught before any model is handed out.
  Checkpoint c = load_checkpoint(path);
  c.network.trunk_widths = {16, 32};
  CHECK_THROWS_AS(restore_model(c), FormatError);
}

TEST_CASE("a non-finite loss stops training and restores the last good parameters") {
  Dataset data = generated();
  auto model = make_regressor(small_net(ModelKind::kDnn), 4);
  TrainConfig cfg = quick_config();
  Trainer probe(*model, cfg, data);
  data.events[probe.split().train[5]].truth.x = std::nan("");
  const std::vector<double> before = flat_values(*model);
  Trainer trainer(*model, cfg, data);
  const TrainLog log = trainer.fit();
  CHECK(log.diverged);
  CHECK(log.stop_reason.find("diverged") != std::string::npos);
  const std::vector<double> after = flat_values(*model);
  CHECK(after == before);
  for (double v : after) CHECK(std::isfinite(v));
}

TEST_CASE("an overflowing op during training counts as divergence") {
  const Dataset data = generated();
  auto model = make_regressor(small_net(), 4);
  TrainConfig cfg = quick_config();
  cfg.initial_lr = 1e200;
  const std::vector<double> before = flat_values(*model);
  Trainer trainer(*model, cfg, data);
  TrainLog log;
  REQUIRE_NOTHROW(log = trainer.fit());
  CHECK(log.diverged);
  CHECK(flat_values(*model) == before);
}

TEST_CASE("training log CSV") {
  TrainLog log;
  EpochRecord r;
  r.epoch = 1;
  r.lr = 5e-4;
  r.train = {1.5, 1.0, 0.5, 10.0};
  log.epochs.push_back(r);
  log.best_epoch = 1;
  log.stop_reason = "reached max_epochs";
  const fs::path p = temp_path("log.csv");
  log.write_csv(p, {{"model", "eluq"}});
  std::ifstream in(p);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "# model=eluq");
  CHECK(lines[3].starts_with("epoch,lr,train_total"));
  CHECK(lines[4].starts_with("1,5e-04,1.5,1,0.5,10,"));
}
