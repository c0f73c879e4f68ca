// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#include "nvlog/pmem.hpp"

#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

using namespace nvlog;

namespace {

std::vector<u8> bytes(std::initializer_list<int> v) {
  std::vector<u8> out;
  for (int b : v) out.push_back(u8(b));
  return out;
}

std::vector<u8> read_durable(const PmemDevice &dev, PmemAddr addr, u64 len) {
  std::vector<u8> out(len);
  dev.load_durable(addr, out);
  return out;
}

}  // namespace

TEST_CASE("pmem: unflushed stores are lost on crash") {
  PmemDevice dev(8, PmemMode::kAdr);
  auto data = bytes({1, 2, 3, 4});
  dev.store(page_base(5), data);
  CrashImageView img(dev, {});  // drop all unfenced
  std::vector<u8> got(4);
  img.read(page_base(5), got);
  CHECK(got == bytes({0, 0, 0, 0}));
  // but the volatile view sees them
  dev.load(page_base(5), got);
  CHECK(got == data);
}

TEST_CASE("pmem: store + clwb + sfence persists") {
  PmemDevice dev(8, PmemMode::kAdr);
  auto data = bytes({9, 8, 7, 6, 5, 4, 3, 2});
  dev.store(page_base(5), data);
  dev.clwb(page_base(5), data.size());
  dev.sfence();
  CHECK(read_durable(dev, page_base(5), 8) == data);
}

TEST_CASE("pmem: eadr mode persists at every store") {
  PmemDevice dev(8, PmemMode::kEadr);
  auto data = bytes({0xde, 0xad});
  dev.store(100, data);
  CHECK(read_durable(dev, 100, 2) == data);
  CHECK(dev.pending_lines().empty());
}

TEST_CASE("pmem: clwb over a line never stored is a no-op") {
  PmemDevice dev(8, PmemMode::kAdr);
  dev.clwb(page_base(3), 256);
  dev.sfence();
  CHECK(dev.pending_lines().empty());
  CHECK(read_durable(dev, page_base(3), 16) == std::vector<u8>(16, 0));
}

TEST_CASE("pmem: flushed-unfenced lines may persist or not") {
  PmemDevice dev(8, PmemMode::kAdr);
  dev.store(0x40, bytes({0xaa}));
  dev.clwb(0x40, 1);
  // no fence: the crash enumerator must produce both outcomes
  CrashImageSet set(dev, CrashPolicy::kEnumerateSubsets);
  REQUIRE(set.count() == 2);
  bool saw_present = false, saw_absent = false;
  for (u64 i = 0; i < set.count(); i++) {
    auto img = set.image(i);
    u8 b[1];
    img.read(0x40, b);
    (b[0] == 0xaa ? saw_present : saw_absent) = true;
  }
  CHECK(saw_present);
  CHECK(saw_absent);
}

TEST_CASE("pmem: fence ordering never persists a later store while dropping a fenced one") {
  PmemDevice dev(8, PmemMode::kAdr);
  dev.store(0x00, bytes({1}));
  dev.clwb(0x00, 1);
  dev.sfence();
  dev.store(0x80, bytes({2}));
  CrashImageSet set(dev, CrashPolicy::kEnumerateSubsets);
  for (u64 i = 0; i < set.count(); i++) {
    auto img = set.image(i);
    u8 a[1], b[1];
    img.read(0x00, a);
    img.read(0x80, b);
    if (b[0] == 2) CHECK(a[0] == 1);  // second store durable implies first durable
    CHECK(a[0] == 1);                 // fenced line is in every image
  }
}

TEST_CASE("pmem: partial flush enumerates only the unfenced line") {
  // two stores to different lines, clwb+sfence on the first only
  PmemDevice dev(8, PmemMode::kAdr);
  dev.store(0x00, bytes({1}));
  dev.store(0x100, bytes({2}));
  dev.clwb(0x00, 1);
  dev.sfence();
  CrashImageSet set(dev, CrashPolicy::kEnumerateSubsets);
  REQUIRE(set.count() == 2);  // only the second line is pending
  for (u64 i = 0; i < set.count(); i++) {
    u8 a[1];
    set.image(i).read(0x00, a);
    CHECK(a[0] == 1);
  }
}

TEST_CASE("pmem: enumerate_subsets yields 2^k images") {
  PmemDevice dev(8, PmemMode::kAdr);
  for (int i = 0; i < 5; i++) dev.store(u64(i) * 128, bytes({i + 1}));
  CrashImageSet set(dev, CrashPolicy::kEnumerateSubsets);
  CHECK(set.count() == 32);
  std::set<std::string> distinct;
  for (u64 i = 0; i < set.count(); i++) {
    std::string sig;
    for (int l = 0; l < 5; l++) {
      u8 b[1];
      set.image(i).read(u64(l) * 128, b);
      sig += char('0' + b[0]);
    }
    distinct.insert(sig);
  }
  CHECK(distinct.size() == 32);
}

TEST_CASE("pmem: enumeration cap falls back to seeded random subsets") {
  PmemDevice dev(8, PmemMode::kAdr);
  for (int i = 0; i < 20; i++) dev.store(u64(i) * 64, bytes({1}));
  CrashImageSet set(dev, CrashPolicy::kEnumerateSubsets, /*enum_cap=*/64, /*seed=*/9);
  CHECK(set.count() == 64);
}

TEST_CASE("pmem: 8-byte aligned stores are never torn") {
  PmemDevice dev(8, PmemMode::kAdr);
  dev.store_u64(0x40, 0x1111111111111111ull);
  dev.clwb(0x40, 8);
  dev.sfence();
  dev.store_u64(0x40, 0x2222222222222222ull);
  CrashImageSet set(dev, CrashPolicy::kEnumerateSubsets);
  for (u64 i = 0; i < set.count(); i++) {
    auto img = set.image(i);
    u64 v = img.read_u64(0x40);
    CHECK((v == 0x1111111111111111ull || v == 0x2222222222222222ull));
  }
}

TEST_CASE("pmem: persistence monotonicity under random traffic") {
  // shadow the model at line granularity: a drained line persists every
  // pending byte it holds, and durable values only change via such drains
  PmemDevice dev(4, PmemMode::kAdr);
  std::mt19937_64 rng(7);
  std::map<u64, u8> latest;         // addr -> volatile value
  std::map<u64, u8> durable_floor;  // addr -> value known durable
  std::set<u64> marked_lines;
  for (int step = 0; step < 400; step++) {
    u64 addr = (rng() % (4 * kPageSize)) & ~7ull;
    u8 val = u8(rng());
    dev.store(addr, {&val, 1});
    latest[addr] = val;
    if (rng() % 2) {
      dev.clwb(addr, 1);
      marked_lines.insert(line_of(addr));
    }
    if (rng() % 2) {
      dev.sfence();
      for (auto &[a, v] : latest)
        if (marked_lines.count(line_of(a))) durable_floor[a] = v;
      marked_lines.clear();
    }
    if (rng() % 8 == 0) {
      // whatever was fenced must still be readable in a drop-all crash image
      CrashImageView img(dev, {});
      for (auto &[a, v] : durable_floor) {
        u8 b[1];
        img.read(a, {b, 1});
        CHECK(b[0] == v);
      }
    }
  }
}

TEST_CASE("pmem: out-of-range access fails") {
  PmemDevice dev(2, PmemMode::kAdr);
  std::vector<u8> b(16);
  CHECK_THROWS_AS(dev.store(2 * kPageSize - 8, b), IoError);
  CHECK_THROWS_AS(dev.load(2 * kPageSize, {b.data(), 1}), IoError);
  CHECK_THROWS_AS(dev.clwb(3 * kPageSize, 1), IoError);
}

TEST_CASE("pmem: image file round trip matches the durable array") {
  PmemDevice dev(4, PmemMode::kAdr);
  dev.store(123, bytes({42, 43}));
  dev.clwb(123, 2);
  dev.sfence();
  auto path = std::filesystem::temp_directory_path() / "nvlog_pmem_test.img";
  dev.save_image(path.string());
  auto loaded = PmemDevice::load_image(path.string());
  CHECK(loaded == dev.durable_bytes());
  CHECK(loaded.size() == 4 * kPageSize);
  std::filesystem::remove(path);
}

TEST_CASE("pmem: random_subset policy is reproducible by seed") {
  PmemDevice dev(4, PmemMode::kAdr);
  for (int i = 0; i < 10; i++) dev.store(u64(i) * 64, bytes({i}));
  CrashImageSet a(dev, CrashPolicy::kRandomSubset, 0, 1234, 8);
  CrashImageSet b(dev, CrashPolicy::kRandomSubset, 0, 1234, 8);
  for (u64 i = 0; i < a.count(); i++) {
    std::vector<u8> va(10 * 64), vb(10 * 64);
    a.image(i).read(0, va);
    b.image(i).read(0, vb);
    CHECK(va == vb);
  }
}
