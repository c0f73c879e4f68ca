// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "nvlog/common.hpp"

namespace nvlog {

enum class PmemMode { kAdr, kEadr };
enum class ActSyncScope { kFile, kGlobal };

struct EngineConfig {
  u32 nvm_size_pages = 16384;
  PmemMode pmem_mode = PmemMode::kAdr;
  u64 nvm_store_latency_ns = 0;       // bench mode only; 0 disables modeling
  u64 disk_latency_us = 0;            // async write-back page write
  u64 disk_sync_latency_us = 0;       // synchronous (fallback/baseline) page or meta write
  u64 writeback_interval_ms = 500;
  u32 writeback_batch = 64;
  u64 gc_interval_ms = 10000;
  u32 sensitivity = 2;
  ActSyncScope actsync_scope = ActSyncScope::kFile;
  u32 pool_refill_batch = 16;
  u32 record_reserve_pages = 2;
  u32 cache_cap_pages = 0;            // 0 = unbounded
  u32 crash_enum_cap = 1u << 12;      // max enumerated images per crash point
  bool nvlog_enabled = true;          // false = sync-to-disk baseline

  static EngineConfig bench_defaults() {
    EngineConfig c;
    c.nvm_store_latency_ns = 300;     // per 64B line
    c.disk_latency_us = 80;
    c.disk_sync_latency_us = 80;
    return c;
  }

  void set(const std::string &key, const std::string &val);
  static EngineConfig from_file(const std::string &path);
};

inline void EngineConfig::set(const std::string &key, const std::string &val) {
  auto as_u64 = [&] { return std::stoull(val); };
  if (key == "nvm_size_pages") nvm_size_pages = u32(as_u64());
  else if (key == "pmem_mode") {
    if (val == "adr") pmem_mode = PmemMode::kAdr;
    else if (val == "eadr") pmem_mode = PmemMode::kEadr;
    else throw IoError("bad pmem_mode: " + val);
  } else if (key == "nvm_store_latency_ns") nvm_store_latency_ns = as_u64();
  else if (key == "disk_latency_us") disk_latency_us = as_u64();
  else if (key == "disk_sync_latency_us") disk_sync_latency_us = as_u64();
  else if (key == "writeback_interval_ms") writeback_interval_ms = as_u64();
  else if (key == "writeback_batch") writeback_batch = u32(as_u64());
  else if (key == "gc_interval_ms") gc_interval_ms = as_u64();
  else if (key == "sensitivity") sensitivity = u32(as_u64());
  else if (key == "actsync_scope") {
    if (val == "file") actsync_scope = ActSyncScope::kFile;
    else if (val == "global") actsync_scope = ActSyncScope::kGlobal;
    else throw IoError("bad actsync_scope: " + val);
  } else if (key == "pool_refill_batch") pool_refill_batch = u32(as_u64());
  else if (key == "record_reserve_pages") record_reserve_pages = u32(as_u64());
  else if (key == "cache_cap_pages") cache_cap_pages = u32(as_u64());
  else if (key == "crash_enum_cap") crash_enum_cap = u32(as_u64());
  else if (key == "nvlog_enabled") nvlog_enabled = (val == "1" || val == "true" || val == "on");
  else throw IoError("unknown config key: " + key);
}

inline EngineConfig EngineConfig::from_file(const std::string &path) {
  EngineConfig c;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string kv;
    if (!(ls >> kv)) continue;
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw IoError("bad config line: " + line);
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return c;
}

}  // namespace nvlog
