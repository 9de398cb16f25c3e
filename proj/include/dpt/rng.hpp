#pragma once

#include <cstdint>
#include <initializer_list>

namespace dpt {

// Counter-based random stream. Draw n of the stream keyed by K is a pure
// function of (K, n), so a site keyed by (seed, layer, head, step) sees the
// same noise no matter how many other sites drew before it.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key = 0) : key_(key) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static CounterRng keyed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t key = 0x243F6A8885A308D3ULL;
    for (auto p : parts) key = mix(key ^ mix(p + 0x9E3779B97F4A7C15ULL));
    return CounterRng(key);
  }

  CounterRng split(std::uint64_t tag) const { return CounterRng(mix(key_ ^ mix(tag + 0x632BE59BD9B4E019ULL))); }

  std::uint64_t bits_at(std::uint64_t counter) const { return mix(key_ + (counter + 1) * 0x9E3779B97F4A7C15ULL); }

  // Uniform on the open interval (0, 1).
  double uniform_at(std::uint64_t counter) const {
    return (static_cast<double>(bits_at(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform() { return uniform_at(counter_++); }
  std::uint64_t key() const { return key_; }
  std::uint64_t position() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dpt
