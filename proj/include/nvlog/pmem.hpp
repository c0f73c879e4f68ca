// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <mutex>
#include <bit>
#include <random>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "nvlog/common.hpp"
#include "nvlog/config.hpp"
#include "nvlog/metrics.hpp"

namespace nvlog {

inline void simulated_delay_ns(u64 ns) {
  if (ns == 0) return;
  if (ns < 100000) {
    auto until = std::chrono::steady_clock::now() + std::chrono::nanoseconds(ns);
    while (std::chrono::steady_clock::now() < until) {
    }
  } else {
    std::this_thread::sleep_for(std::chrono::nanoseconds(ns));
  }
}

enum class CrashPolicy { kDropAllUnfenced, kEnumerateSubsets, kRandomSubset };

// Emulated byte-addressable persistent memory with an x86-style persistence
// model: stores land in a volatile store buffer (per 64B line), clwb marks
// lines for write-back, sfence drains marked lines to the durable array.
// In eADR mode every store is durable immediately.
//
// A crash exposes the durable array plus an arbitrary subset of the pending
// lines (written and/or flushed but not yet fenced); policies below choose
// that subset. Line granularity: a pending line persists entirely or not at
// all, and a line holds its latest buffered value.
class PmemDevice {
public:
  PmemDevice(u32 capacity_pages, PmemMode mode, Metrics *metrics = nullptr)
      : capacity_pages_(capacity_pages),
        mode_(mode),
        durable_(u64(capacity_pages) * kPageSize, 0),
        metrics_(metrics) {}

  u32 capacity_pages() const { return capacity_pages_; }
  u64 size_bytes() const { return durable_.size(); }
  PmemMode mode() const { return mode_; }

  void set_store_latency_ns(u64 ns) { store_latency_ns_ = ns; }

  // Test hook: when set, sfence stops draining (the fences are "dropped").
  void set_drop_fences(bool v) { drop_fences_ = v; }

  // Fired on every sfence before the drain; this is the crash-injection
  // boundary. Single-threaded callers only.
  void set_fence_hook(std::function<void()> pre_drain) { pre_fence_ = std::move(pre_drain); }
  // Fired after the drain with the fence sequence number.
  void set_post_fence_hook(std::function<void(u64)> post) { post_fence_ = std::move(post); }

  void store(PmemAddr addr, ByteSpan bytes) {
    check_range(addr, bytes.size());
    std::lock_guard lk(mu_);
    if (metrics_) metrics_->nvm_stores.fetch_add(1, std::memory_order_relaxed);
    u64 pos = 0;
    u64 lines = 0;
    while (pos < bytes.size()) {
      u64 at = addr + pos;
      u32 page = page_of(at);
      u64 page_end = page_base(page) + kPageSize;
      u64 n = std::min<u64>(page_end - at, bytes.size() - pos);
      PageBuf &pb = page_for_update(page);
      u64 first_lane = (at % kPageSize) / kCacheline;
      u64 last_lane = ((at + n - 1) % kPageSize) / kCacheline;
      for (u64 l = first_lane; l <= last_lane; l++) {
        u64 bit = u64(1) << l;
        if (pb.buffered_mask & bit) continue;
        u64 lane_at = page_base(page) + l * kCacheline;
        // lanes the store covers end to end need no init from durable
        if (!(at <= lane_at && lane_at + kCacheline <= at + n))
          std::memcpy(pb.bytes.data() + l * kCacheline, durable_.data() + lane_at, kCacheline);
        pb.buffered_mask |= bit;
      }
      std::memcpy(pb.bytes.data() + (at % kPageSize), bytes.data() + pos, n);
      lines += last_lane - first_lane + 1;
      if (mode_ == PmemMode::kEadr) drain_page(page);
      pos += n;
    }
    simulated_delay_ns(store_latency_ns_ * lines);
  }

  void store_u64(PmemAddr addr, u64 v) {
    if (addr % 8 != 0) throw IoError("unaligned 8-byte store");
    u8 b[8];
    store_le64(b, v);
    store(addr, {b, 8});
  }

  void store_u32(PmemAddr addr, u32 v) {
    if (addr / 8 != (addr + 3) / 8) throw IoError("u32 store straddles 8-byte unit");
    u8 b[4];
    store_le32(b, v);
    store(addr, {b, 4});
  }

  void store_u16(PmemAddr addr, u16 v) {
    if (addr / 8 != (addr + 1) / 8) throw IoError("u16 store straddles 8-byte unit");
    u8 b[2];
    store_le16(b, v);
    store(addr, {b, 2});
  }

  void clwb(PmemAddr addr, u64 len) {
    check_range(addr, len);
    std::lock_guard lk(mu_);
    u64 pos = 0;
    while (pos < len) {
      u64 at = addr + pos;
      u32 page = page_of(at);
      u64 page_end = page_base(page) + kPageSize;
      u64 n = std::min<u64>(page_end - at, len - pos);
      auto it = buffered_.find(page);
      if (it != buffered_.end()) {
        u64 first_lane = (at % kPageSize) / kCacheline;
        u64 last_lane = ((at + n - 1) % kPageSize) / kCacheline;
        u64 span = (last_lane - first_lane + 1 == 64)
                       ? ~u64(0)
                       : (((u64(1) << (last_lane - first_lane + 1)) - 1) << first_lane);
        u64 newly = it->second.buffered_mask & span & ~it->second.flushed_mask;
        if (newly) {
          it->second.flushed_mask |= newly;
          flush_pages_.insert(page);
          if (metrics_)
            metrics_->nvm_lines_flushed.fetch_add(std::popcount(newly),
                                                  std::memory_order_relaxed);
        }
      }
      pos += n;
    }
  }

  void sfence() {
    std::unique_lock lk(mu_);
    if (pre_fence_) {
      lk.unlock();
      pre_fence_();
      lk.lock();
    }
    if (!drop_fences_) {
      // Drain every flush-marked lane; unflushed buffered lanes stay pending.
      for (u32 page : flush_pages_) {
        auto it = buffered_.find(page);
        if (it == buffered_.end()) continue;
        PageBuf &pb = it->second;
        copy_lanes(durable_.data() + page_base(page), pb.bytes.data(), pb.flushed_mask);
        pb.buffered_mask &= ~pb.flushed_mask;
        pb.flushed_mask = 0;
        if (pb.buffered_mask == 0) buffered_.erase(it);
      }
      flush_pages_.clear();
    }
    u64 seq = ++fence_seq_;
    if (metrics_) metrics_->nvm_fences.fetch_add(1, std::memory_order_relaxed);
    if (post_fence_) {
      lk.unlock();
      post_fence_(seq);
    }
  }

  u64 fence_count() const {
    std::lock_guard lk(mu_);
    return fence_seq_;
  }

  // Volatile load: buffered content over durable.
  void load(PmemAddr addr, MutByteSpan out) const {
    check_range(addr, out.size());
    std::lock_guard lk(mu_);
    if (metrics_) metrics_->nvm_loads.fetch_add(1, std::memory_order_relaxed);
    std::memcpy(out.data(), durable_.data() + addr, out.size());
    if (buffered_.empty()) return;
    u64 pos = 0;
    while (pos < out.size()) {
      u64 at = addr + pos;
      u32 page = page_of(at);
      u64 page_end = page_base(page) + kPageSize;
      u64 n = std::min<u64>(page_end - at, out.size() - pos);
      auto it = buffered_.find(page);
      if (it != buffered_.end()) {
        const PageBuf &pb = it->second;
        u64 first_lane = (at % kPageSize) / kCacheline;
        u64 last_lane = ((at + n - 1) % kPageSize) / kCacheline;
        for (u64 l = first_lane; l <= last_lane; l++) {
          if (!(pb.buffered_mask & (u64(1) << l))) continue;
          u64 lane_base = page_base(page) + l * kCacheline;
          u64 from = std::max<u64>(lane_base, addr + pos);
          u64 to = std::min<u64>(lane_base + kCacheline, at + n);
          std::memcpy(out.data() + (from - addr),
                      pb.bytes.data() + (from - page_base(page)), to - from);
        }
      }
      pos += n;
    }
  }

  void load_durable(PmemAddr addr, MutByteSpan out) const {
    check_range(addr, out.size());
    std::lock_guard lk(mu_);
    std::memcpy(out.data(), durable_.data() + addr, out.size());
  }

  struct PendingLine {
    u64 addr;
    std::array<u8, kCacheline> bytes;
    bool flushed;
  };

  // Snapshot of the store buffer, sorted by address. Caller must hold the
  // engine quiesced (crash-testing contract).
  std::vector<PendingLine> pending_lines() const {
    std::lock_guard lk(mu_);
    std::vector<PendingLine> out;
    for (auto &[page, pb] : buffered_) {
      u64 m = pb.buffered_mask;
      while (m) {
        u64 l = u64(std::countr_zero(m));
        m &= m - 1;
        PendingLine pl;
        pl.addr = page_base(page) + l * kCacheline;
        std::memcpy(pl.bytes.data(), pb.bytes.data() + l * kCacheline, kCacheline);
        pl.flushed = (pb.flushed_mask >> l) & 1;
        out.push_back(pl);
      }
    }
    std::sort(out.begin(), out.end(),
              [](const PendingLine &a, const PendingLine &b) { return a.addr < b.addr; });
    return out;
  }

  const std::vector<u8> &durable_bytes() const { return durable_; }

  void save_image(const std::string &path) const {
    std::lock_guard lk(mu_);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write image file: " + path);
    out.write(reinterpret_cast<const char *>(durable_.data()), durable_.size());
    if (!out) throw IoError("short write to image file: " + path);
  }

  static std::vector<u8> load_image(const std::string &path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open image file: " + path);
    auto size = in.tellg();
    if (size <= 0 || u64(size) % kPageSize != 0)
      throw IoError("image file size is not a whole number of pages: " + path);
    std::vector<u8> bytes(size_t(size), 0);
    in.seekg(0);
    in.read(reinterpret_cast<char *>(bytes.data()), size);
    if (!in) throw IoError("short read from image file: " + path);
    return bytes;
  }

  void restore_durable(const std::vector<u8> &bytes) {
    std::lock_guard lk(mu_);
    if (bytes.size() != durable_.size()) throw IoError("image size mismatch");
    durable_ = bytes;
    buffered_.clear();
    flush_pages_.clear();
  }

  // Clean-shutdown helper: persist everything still buffered.
  void drain_all() {
    std::lock_guard lk(mu_);
    for (auto &[page, pb] : buffered_)
      copy_lanes(durable_.data() + page_base(page), pb.bytes.data(), pb.buffered_mask);
    buffered_.clear();
    flush_pages_.clear();
  }

private:
  void check_range(PmemAddr addr, u64 len) const {
    if (addr + len > durable_.size() || addr + len < addr)
      throw IoError("pmem access out of range: addr=" + std::to_string(addr) +
                    " len=" + std::to_string(len));
  }

  // Store buffer bucketed by page: one map lookup per page touched, with a
  // bit per 64-byte lane.
  struct PageBuf {
    std::array<u8, kPageSize> bytes;
    u64 buffered_mask = 0;
    u64 flushed_mask = 0;
  };

  PageBuf &page_for_update(u32 page) {
    auto it = buffered_.find(page);
    if (it == buffered_.end()) it = buffered_.emplace(page, PageBuf{}).first;
    return it->second;
  }

  void drain_page(u32 page) {
    auto it = buffered_.find(page);
    if (it == buffered_.end()) return;
    copy_lanes(durable_.data() + page_base(page), it->second.bytes.data(),
               it->second.buffered_mask);
    buffered_.erase(it);
    flush_pages_.erase(page);
  }

  // Copies the lanes selected by `mask`, merging contiguous runs.
  static void copy_lanes(u8 *dst_page, const u8 *src_page, u64 mask) {
    u64 lane = 0;
    while (mask) {
      u64 skip = u64(std::countr_zero(mask));
      lane += skip;
      mask >>= skip;
      u64 run = u64(std::countr_one(mask));
      std::memcpy(dst_page + lane * kCacheline, src_page + lane * kCacheline, run * kCacheline);
      lane += run;
      mask = (run >= 64) ? 0 : (mask >> run);
    }
  }

  u32 capacity_pages_;
  PmemMode mode_;
  std::vector<u8> durable_;
  std::unordered_map<u32, PageBuf> buffered_;
  std::unordered_set<u32> flush_pages_;
  mutable std::recursive_mutex mu_;
  u64 fence_seq_ = 0;
  u64 store_latency_ns_ = 0;
  bool drop_fences_ = false;
  std::function<void()> pre_fence_;
  std::function<void(u64)> post_fence_;
  Metrics *metrics_;
};

// Durable-only view of a live device.
class DurableView : public MemView {
public:
  explicit DurableView(const PmemDevice &dev) : dev_(dev) {}
  void read(PmemAddr addr, MutByteSpan out) const override { dev_.load_durable(addr, out); }
  u64 size_bytes() const override { return dev_.size_bytes(); }

private:
  const PmemDevice &dev_;
};

// Live (volatile) view: what a running CPU would observe.
class VolatileView : public MemView {
public:
  explicit VolatileView(const PmemDevice &dev) : dev_(dev) {}
  void read(PmemAddr addr, MutByteSpan out) const override { dev_.load(addr, out); }
  u64 size_bytes() const override { return dev_.size_bytes(); }

private:
  const PmemDevice &dev_;
};

// View over a plain byte vector (e.g. an image file loaded from disk).
class OwnedImageView : public MemView {
public:
  explicit OwnedImageView(std::vector<u8> bytes) : bytes_(std::move(bytes)) {}
  void read(PmemAddr addr, MutByteSpan out) const override {
    if (addr + out.size() > bytes_.size()) throw IoError("image read out of range");
    std::memcpy(out.data(), bytes_.data() + addr, out.size());
  }
  u64 size_bytes() const override { return bytes_.size(); }

private:
  std::vector<u8> bytes_;
};

// Crash image: the durable array plus a chosen subset of pending lines,
// overlaid without copying the device.
class CrashImageView : public MemView {
public:
  CrashImageView(const PmemDevice &dev, std::vector<PmemDevice::PendingLine> persisted)
      : dev_(dev) {
    for (auto &l : persisted) overlay_.emplace(l.addr, l.bytes);
  }

  void read(PmemAddr addr, MutByteSpan out) const override {
    dev_.load_durable(addr, out);
    for (u64 line = line_of(addr); line < addr + out.size(); line += kCacheline) {
      auto it = overlay_.find(line);
      if (it == overlay_.end()) continue;
      u64 from = std::max<u64>(line, addr);
      u64 to = std::min<u64>(line + kCacheline, addr + out.size());
      std::memcpy(out.data() + (from - addr), it->second.data() + (from - line), to - from);
    }
  }
  u64 size_bytes() const override { return dev_.size_bytes(); }

  size_t overlay_lines() const { return overlay_.size(); }

private:
  const PmemDevice &dev_;
  std::unordered_map<u64, std::array<u8, kCacheline>> overlay_;
};

// Generates crash images for one crash point.
class CrashImageSet {
public:
  CrashImageSet(const PmemDevice &dev, CrashPolicy policy, u32 enum_cap = 1u << 12,
                u64 seed = 0, u32 random_count = 16)
      : dev_(dev), pending_(dev.pending_lines()), policy_(policy), seed_(seed) {
    switch (policy_) {
      case CrashPolicy::kDropAllUnfenced:
        count_ = 1;
        break;
      case CrashPolicy::kEnumerateSubsets: {
        u64 k = pending_.size();
        if (k < 32 && (u64(1) << k) <= enum_cap) {
          count_ = u64(1) << k;
          exhaustive_ = true;
        } else {
          count_ = enum_cap;  // fall back to seeded random subsets
        }
        break;
      }
      case CrashPolicy::kRandomSubset:
        count_ = random_count;
        break;
    }
  }

  u64 count() const { return count_; }

  CrashImageView image(u64 index) const {
    std::vector<PmemDevice::PendingLine> chosen;
    if (policy_ == CrashPolicy::kDropAllUnfenced) {
      // nothing pending survives
    } else if (exhaustive_) {
      for (size_t i = 0; i < pending_.size(); i++)
        if (index >> i & 1) chosen.push_back(pending_[i]);
    } else {
      std::mt19937_64 rng(seed_ ^ (index * 0x9e3779b97f4a7c15ULL + 1));
      for (auto &l : pending_)
        if (rng() & 1) chosen.push_back(l);
    }
    return CrashImageView(dev_, std::move(chosen));
  }

private:
  const PmemDevice &dev_;
  std::vector<PmemDevice::PendingLine> pending_;
  CrashPolicy policy_;
  u64 seed_;
  u64 count_ = 0;
  bool exhaustive_ = false;
};

}  // namespace nvlog
