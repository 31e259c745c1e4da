// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace warpgrad {

// Counter-based generator: Philox4x32 with 10 rounds (Salmon et al., "Parallel
// random numbers: as easy as 1, 2, 3"). Chosen because streams are pure
// functions of (seed, stream id, counter): no hidden state, bit-exact across
// platforms, and checkpoint/resume needs nothing beyond the integers below.
struct Philox4x32 {
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
      const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
      const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }
};

/// One independent random stream, identified by (seed, stream id). Draws are
/// indexed by an internal 64-bit block counter; two streams with different ids
/// never overlap because the id occupies its own counter words.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32)},
        stream_lo_(static_cast<std::uint32_t>(stream_id)),
        stream_hi_(static_cast<std::uint32_t>(stream_id >> 32)) {}

  std::uint32_t next_u32() {
    if (cursor_ == 4) refill();
    return buf_[cursor_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return (hi << 32) | lo;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive, unbiased via rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<std::int64_t>(next_u64());  // full span
    const std::uint64_t min = (0 - range) % range;
    std::uint64_t x = next_u64();
    while (x < min) x = next_u64();
    return lo + static_cast<std::int64_t>(x % range);
  }

 private:
  void refill() {
    buf_ = Philox4x32::block({static_cast<std::uint32_t>(block_),
                              static_cast<std::uint32_t>(block_ >> 32),
                              stream_lo_, stream_hi_},
                             key_);
    ++block_;
    cursor_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint32_t stream_lo_, stream_hi_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int cursor_ = 4;
};

/// Derive an independent stream for (seed, id). Same pair twice gives the same
/// draws; distinct ids give disjoint streams.
inline RngStream split_rng(std::uint64_t seed, std::uint64_t stream_id) {
  return RngStream(seed, stream_id);
}

// Stream-id packing used by the trainers and experiments so every draw in a
// run is addressable as a pure function of (purpose, meta step, task, step).
namespace stream {

enum Purpose : std::uint64_t {
  kInit = 1,         // parameter initialisation
  kTaskSample = 2,   // task distribution draws
  kTaskBatch = 3,    // inner-loop mini-batches
  kMetaBatch = 4,    // meta-objective mini-batches
  kInitPoint = 5,    // 2-D initialisation points
  kShuffle = 6,      // replay buffer sweep permutations
  kEval = 7,         // held-out evaluation draws
  kTest = 8,         // unit-test scratch streams
};

/// purpose:8 | a:24 | b:16 | c:16
inline std::uint64_t pack(Purpose purpose, std::uint64_t a = 0,
                          std::uint64_t b = 0, std::uint64_t c = 0) {
  return (static_cast<std::uint64_t>(purpose) << 56) | ((a & 0xFFFFFFull) << 32) |
         ((b & 0xFFFFull) << 16) | (c & 0xFFFFull);
}

}  // namespace stream

}  // namespace warpgrad
