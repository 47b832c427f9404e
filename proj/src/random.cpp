#include "eluq/random.hpp"

#include "eluq/errors.hpp"

namespace eluq {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index) {
  // FNV-1a over the stream name, then mixed with the base seed and index.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(base ^ h) + splitmix64(index + 0x632be59bd9b4e019ULL));
}

NoiseSource::NoiseSource(std::uint64_t seed) : engine_(seed) {}

void NoiseSource::fill_normal(std::span<double> out) {
  if (mode_ == Mode::kReplay) {
    if (cursor_ + out.size() > tape_.size()) {
      throw ContractError("NoiseSource: replay requested more values than were recorded");
    }
    for (double& v : out) v = tape_[cursor_++];
    return;
  }
  for (double& v : out) v = normal_(engine_);
  if (mode_ == Mode::kRecord) tape_.insert(tape_.end(), out.begin(), out.end());
}

std::vector<double> NoiseSource::normal(std::size_t n) {
  std::vector<double> out(n);
  fill_normal(out);
  return out;
}

void NoiseSource::record() {
  tape_.clear();
  cursor_ = 0;
  mode_ = Mode::kRecord;
}

void NoiseSource::rewind() {
  if (mode_ == Mode::kLive) throw ContractError("NoiseSource: rewind() without a recorded tape");
  cursor_ = 0;
  mode_ = Mode::kReplay;
}

void NoiseSource::go_live() {
  tape_.clear();
  cursor_ = 0;
  mode_ = Mode::kLive;
}

}  // namespace eluq
