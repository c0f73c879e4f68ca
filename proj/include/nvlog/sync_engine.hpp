// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "nvlog/log_format.hpp"

namespace nvlog {

struct Segment {
  u64 offset = 0;
  u64 len = 0;
  bool oop = false;  // page-aligned full page
};

// Splits a write at page boundaries: aligned full-page parts become OOP
// segments, the unaligned remainders IP segments. IP segments larger than
// the in-place payload cap are split further; replay is ordered, so two
// consecutive IP entries are equivalent to one.
inline std::vector<Segment> segment_write(u64 offset, u64 len) {
  std::vector<Segment> out;
  u64 pos = offset;
  u64 end = offset + len;
  while (pos < end) {
    u64 page_end = (pos / kPageSize + 1) * kPageSize;
    u64 take = std::min(end, page_end) - pos;
    if (take == kPageSize && pos % kPageSize == 0) {
      out.push_back({pos, kPageSize, true});
    } else {
      u64 left = take;
      u64 at = pos;
      while (left > kMaxIpPayload) {
        out.push_back({at, kMaxIpPayload, false});
        at += kMaxIpPayload;
        left -= kMaxIpPayload;
      }
      out.push_back({at, left, false});
    }
    pos += take;
  }
  return out;
}

struct ActiveSyncState {
  u32 should_active_cnt = 0;
  u32 should_deact_cnt = 0;
};

// Called on each sync: when past syncs wrote far fewer bytes than whole
// dirtied pages, byte-granular O_SYNC logging is predicted to win and the
// flag is applied. Returns true if the flag was turned on.
inline bool mark_sync(ActiveSyncState &st, bool &o_sync_flag, u64 written_bytes,
                      u64 dirty_pages, u32 sensitivity) {
  if (written_bytes < dirty_pages * kPageSize) {
    st.should_active_cnt++;
    if (st.should_active_cnt >= sensitivity) {
      bool was = o_sync_flag;
      o_sync_flag = true;
      st.should_deact_cnt = 0;
      return !was;
    }
  }
  return false;
}

// Called on each write: the mirror image, withdrawing the flag when writes
// are page-sized or larger. Returns true if the flag was turned off.
inline bool clear_sync(ActiveSyncState &st, bool &o_sync_flag, u64 written_bytes,
                       u64 dirty_pages, u32 sensitivity) {
  if (written_bytes >= dirty_pages * kPageSize) {
    st.should_deact_cnt++;
    if (st.should_deact_cnt >= sensitivity) {
      bool was = o_sync_flag;
      o_sync_flag = false;
      st.should_active_cnt = 0;
      return was;
    }
  }
  return false;
}

}  // namespace nvlog
