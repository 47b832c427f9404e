#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>

namespace eluq {

/// Derives an independent 64-bit seed for a named sub-stream. All randomness in
/// a run flows from one seed through these derivations (generator, init,
/// shuffle, sampling, ...), so every stage is reproducible on its own.
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

/// Standard-normal noise supply for the stochastic parts of a forward pass.
///
/// In live mode values come from the engine. After `record()` every drawn value
/// is also appended to a tape; `rewind()` switches to replay, after which draws
/// return the taped values in order. Replay is what freezes the reparameterized
/// noise for gradient checks and paired-network comparisons.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed);

  void fill_normal(std::span<double> out);
  std::vector<double> normal(std::size_t n);

  /// Clears the tape and starts recording live draws.
  void record();
  /// Restarts replay from the beginning of the tape.
  void rewind();
  /// Back to live draws; the tape is discarded.
  void go_live();

  bool replaying() const { return mode_ == Mode::kReplay; }
  std::size_t tape_size() const { return tape_.size(); }

 private:
  enum class Mode { kLive, kRecord, kReplay };

  // Boost's ziggurat sampler; noise generation dominates inference cost.
  boost::random::mt19937_64 engine_;
  boost::random::normal_distribution<double> normal_{0.0, 1.0};
  Mode mode_ = Mode::kLive;
  std::vector<double> tape_;
  std::size_t cursor_ = 0;
};

}  // namespace eluq
