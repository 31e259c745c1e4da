// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "warpgrad/rng.hpp"

using namespace warpgrad;

TEST_CASE("philox4x32-10 known-answer vectors") {
  // Reference vectors from the Random123 known-answer tests.
  auto r0 = Philox4x32::block({0, 0, 0, 0}, {0, 0});
  CHECK(r0[0] == 0x6627e8d5u);
  CHECK(r0[1] == 0xe169c58du);
  CHECK(r0[2] == 0xbc57ac4cu);
  CHECK(r0[3] == 0x9b00dbd8u);

  auto r1 = Philox4x32::block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                              {0xffffffffu, 0xffffffffu});
  CHECK(r1[0] == 0x408f276du);
  CHECK(r1[1] == 0x41c83b0eu);
  CHECK(r1[2] == 0xa20bc7c6u);
  CHECK(r1[3] == 0x6d5451fdu);

  auto r2 = Philox4x32::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                              {0xa4093822u, 0x299f31d0u});
  CHECK(r2[0] == 0xd16cfe09u);
  CHECK(r2[1] == 0x94fdccebu);
  CHECK(r2[2] == 0x5001e420u);
  CHECK(r2[3] == 0x24126ea1u);
}

TEST_CASE("same (seed, id) reproduces the stream") {
  RngStream a = split_rng(42, 7);
  RngStream b = split_rng(42, 7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("different ids give different streams") {
  RngStream a = split_rng(42, 7);
  RngStream b = split_rng(42, 8);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  CHECK(same == 0);
}

TEST_CASE("golden first draws of (seed=0, id=0)") {
  // Frozen from the philox4x32-10 all-zero block: the first u32s are the
  // known-answer words, so these values are pinned for all platforms.
  RngStream s = split_rng(0, 0);
  CHECK(s.next_u32() == 0x6627e8d5u);
  CHECK(s.next_u32() == 0xe169c58du);
  CHECK(s.next_u32() == 0xbc57ac4cu);
  CHECK(s.next_u32() == 0x9b00dbd8u);
  RngStream t = split_rng(0, 0);
  CHECK(t.next_u64() == ((static_cast<std::uint64_t>(0xe169c58du) << 32) |
                         0x6627e8d5u));
}

TEST_CASE("uniform draws live in [0,1) and respect bounds") {
  RngStream s = split_rng(9, 1);
  double mn = 1.0, mx = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double u = s.uniform();
    mn = std::min(mn, u);
    mx = std::max(mx, u);
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  CHECK(mn < 0.01);
  CHECK(mx > 0.99);
  for (int i = 0; i < 1000; ++i) {
    double v = s.uniform(-3.0, 3.0);
    REQUIRE(v >= -3.0);
    REQUIRE(v < 3.0);
  }
}

TEST_CASE("uniform_int covers the inclusive range") {
  RngStream s = split_rng(5, 2);
  int counts[11] = {0};
  for (int i = 0; i < 11000; ++i) {
    auto v = s.uniform_int(-5, 5);
    REQUIRE(v >= -5);
    REQUIRE(v <= 5);
    counts[v + 5]++;
  }
  for (int c : counts) CHECK(c > 800);
}

TEST_CASE("stream id packing keeps purposes distinct") {
  auto a = stream::pack(stream::kTaskBatch, 3, 10, 2);
  auto b = stream::pack(stream::kMetaBatch, 3, 10, 2);
  auto c = stream::pack(stream::kTaskBatch, 3, 10, 3);
  CHECK(a != b);
  CHECK(a != c);
}
