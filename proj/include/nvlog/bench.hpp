// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iostream>

#include "nvlog/engine.hpp"

namespace nvlog {

// FIO-style synthetic workload: mixed reads/writes at a configurable sync
// percentage, sequential or seeded-random access, one file per thread.
struct WorkloadSpec {
  u32 read_parts = 0;    // reads per mix unit
  u32 write_parts = 10;  // writes per mix unit
  u32 sync_pct = 0;      // % of writes that are synchronized
  u64 io_size = 4096;
  bool random_access = false;
  u64 seed = 42;
  u32 threads = 1;
  u64 total_bytes = 8ull << 20;  // written bytes across all threads
  u64 file_size = 4ull << 20;    // per-thread file, pre-warmed
  bool use_osync = true;         // false: fsync after each synced write

  void validate() const {
    if (io_size < 1) throw IoError("io_size must be >= 1");
    if (sync_pct > 100) throw IoError("sync_pct must be 0..100");
    if (threads < 1) throw IoError("threads must be >= 1");
    if (read_parts + write_parts == 0) throw IoError("rw ratio cannot be 0:0");
    if (file_size < io_size) throw IoError("file_size smaller than io_size");
  }

  static std::pair<u32, u32> parse_ratio(const std::string &s) {
    auto colon = s.find(':');
    if (colon == std::string::npos) throw IoError("rw ratio must look like R:W");
    return {u32(std::stoul(s.substr(0, colon))), u32(std::stoul(s.substr(colon + 1)))};
  }
};

struct MetricsRow {
  double t_sec = 0;
  double ops_per_sec = 0;
  double bytes_per_sec = 0;
  u64 nvm_pages_in_use = 0;
  u64 dirty_pages = 0;
  bool fallback_active = false;
};

struct BenchResult {
  double seconds = 0;
  u64 ops = 0;
  u64 read_ops = 0;
  u64 write_ops = 0;
  u64 sync_ops = 0;
  u64 bytes_written = 0;
  std::vector<MetricsRow> rows;

  double ops_per_sec() const { return seconds > 0 ? double(ops) / seconds : 0; }
  double write_bytes_per_sec() const { return seconds > 0 ? double(bytes_written) / seconds : 0; }
};

inline void write_csv_header(std::ostream &os) {
  os << "timestamp_sec,ops_per_sec,bytes_per_sec,nvm_pages_in_use,dirty_pages,fallback_active\n";
}

inline void write_csv_row(std::ostream &os, const MetricsRow &r) {
  os << r.t_sec << "," << r.ops_per_sec << "," << r.bytes_per_sec << "," << r.nvm_pages_in_use
     << "," << r.dirty_pages << "," << (r.fallback_active ? 1 : 0) << "\n";
}

// Pre-warms each thread's file into the cache, runs the workload, samples
// metrics at a fixed cadence. Identical seed and spec give an identical op
// sequence.
inline BenchResult run_bench(Engine &eng, const WorkloadSpec &spec, u64 interval_ms = 500,
                             std::ostream *csv = nullptr) {
  spec.validate();
  for (u32 t = 0; t < spec.threads; t++) {
    u64 ino = t + 1;
    std::vector<u8> warm(kPageSize, 0);
    for (u64 off = 0; off < spec.file_size; off += kPageSize) eng.write(ino, off, warm);
    eng.quiesce();
    eng.prewarm(ino, spec.file_size);
  }

  std::atomic<u64> ops{0}, reads{0}, writes{0}, syncs{0}, bytes{0};
  std::atomic<bool> stop{false};
  u64 per_thread_bytes = spec.total_bytes / spec.threads;

  auto worker = [&](u32 tidx) {
    u64 ino = tidx + 1;
    std::mt19937_64 rng(spec.seed + tidx * 101);
    std::vector<u8> buf(spec.io_size);
    for (size_t i = 0; i < buf.size(); i++) buf[i] = u8(rng() >> (i % 8));
    u64 written = 0;
    u64 seq_off = 0;
    u64 mix = 0;
    u64 unit = spec.read_parts + spec.write_parts;
    while (written < per_thread_bytes && !stop.load(std::memory_order_relaxed)) {
      bool do_read = (mix++ % unit) < spec.read_parts;
      u64 max_off = spec.file_size - spec.io_size;
      u64 off = spec.random_access ? (max_off ? rng() % max_off : 0) : seq_off;
      if (!spec.random_access) {
        seq_off += spec.io_size;
        if (seq_off + spec.io_size > spec.file_size) seq_off = 0;
      }
      if (do_read) {
        eng.read(ino, off, buf);
        reads.fetch_add(1, std::memory_order_relaxed);
      } else {
        bool synced = spec.sync_pct && (rng() % 100) < spec.sync_pct;
        if (synced && spec.use_osync) {
          eng.set_o_sync(ino, true);
          eng.write(ino, off, buf);
          eng.set_o_sync(ino, false);
        } else {
          eng.write(ino, off, buf);
          if (synced) eng.fsync(ino);
        }
        if (synced) syncs.fetch_add(1, std::memory_order_relaxed);
        writes.fetch_add(1, std::memory_order_relaxed);
        written += spec.io_size;
        bytes.fetch_add(spec.io_size, std::memory_order_relaxed);
      }
      ops.fetch_add(1, std::memory_order_relaxed);
    }
  };

  BenchResult res;
  std::atomic<u32> running{spec.threads};
  std::atomic<u64> end_ns{0};
  auto t0 = std::chrono::steady_clock::now();
  std::vector<std::thread> threads;
  for (u32 t = 0; t < spec.threads; t++)
    threads.emplace_back([&, t] {
      worker(t);
      if (running.fetch_sub(1) == 1) {
        auto dt = std::chrono::steady_clock::now() - t0;
        end_ns.store(u64(std::chrono::duration_cast<std::chrono::nanoseconds>(dt).count()));
      }
    });

  if (csv) write_csv_header(*csv);
  u64 last_ops = 0, last_bytes = 0;
  auto last_t = t0;
  while (running.load() > 0) {
    std::this_thread::sleep_for(std::chrono::milliseconds(std::min<u64>(interval_ms, 50)));
    auto now = std::chrono::steady_clock::now();
    if (std::chrono::duration<double, std::milli>(now - last_t).count() < double(interval_ms))
      continue;
    MetricsRow row;
    row.t_sec = std::chrono::duration<double>(now - t0).count();
    double dt = std::chrono::duration<double>(now - last_t).count();
    u64 o = ops.load(), b = bytes.load();
    row.ops_per_sec = dt > 0 ? double(o - last_ops) / dt : 0;
    row.bytes_per_sec = dt > 0 ? double(b - last_bytes) / dt : 0;
    row.nvm_pages_in_use = eng.log().pool().used_pages();
    row.dirty_pages = eng.metrics().dirty_pages.load();
    row.fallback_active = eng.fallback_active();
    res.rows.push_back(row);
    if (csv) write_csv_row(*csv, row);
    last_ops = o;
    last_bytes = b;
    last_t = now;
  }
  for (auto &th : threads) th.join();

  res.seconds = double(end_ns.load()) / 1e9;  // measured when the last worker finished
  res.ops = ops.load();
  res.read_ops = reads.load();
  res.write_ops = writes.load();
  res.sync_ops = syncs.load();
  res.bytes_written = bytes.load();
  return res;
}

}  // namespace nvlog
