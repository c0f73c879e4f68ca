// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>

#include "nvlog/common.hpp"

namespace nvlog {

struct Metrics {
  std::atomic<u64> nvm_loads{0};
  std::atomic<u64> nvm_stores{0};
  std::atomic<u64> nvm_lines_flushed{0};
  std::atomic<u64> nvm_fences{0};

  std::atomic<u64> cache_hits{0};
  std::atomic<u64> cache_misses{0};
  std::atomic<u64> dirty_pages{0};
  std::atomic<u64> absorbed_pages{0};

  std::atomic<u64> txns_committed{0};
  std::atomic<u64> txns_aborted{0};
  std::atomic<u64> entries_appended{0};
  std::atomic<u64> payload_bytes_logged{0};

  std::atomic<u64> wb_pages_written{0};
  std::atomic<u64> records_appended{0};

  std::atomic<u64> gc_passes{0};
  std::atomic<u64> data_pages_freed{0};
  std::atomic<u64> log_pages_freed{0};

  std::atomic<u64> fallback_enters{0};
  std::atomic<u64> fallback_ns{0};
  std::atomic<bool> fallback_active{false};

  std::atomic<u64> ops_reads{0};
  std::atomic<u64> ops_writes{0};
  std::atomic<u64> ops_syncs{0};
};

}  // namespace nvlog
