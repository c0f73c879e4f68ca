// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <map>

#include "nvlog/disk.hpp"
#include "nvlog/log_store.hpp"

#include <json.hpp>

namespace nvlog {

struct RecoveryOptions {
  // Test hooks for mutation experiments: ignore all writeback records, or
  // ignore the nth record encountered (0-based), as if expiry never happened.
  bool expiry_enabled = true;
  std::optional<u64> skip_record_index;
};

struct RecoveryReport {
  u64 files_scanned = 0;
  u64 entries_committed = 0;
  u64 entries_dropped_uncommitted = 0;
  u64 entries_replayed = 0;
  u64 bytes_replayed = 0;
  u64 records_seen = 0;
  u64 metadata_applied = 0;
  u64 live_pages = 0;
  u64 free_pages = 0;
  double duration_ms = 0;
  std::map<u64, u64> committed_txn_bytes;  // tid -> total write-entry payload

  nlohmann::json to_json() const {
    nlohmann::json j{{"files_scanned", files_scanned},
                     {"entries_committed", entries_committed},
                     {"entries_dropped_uncommitted", entries_dropped_uncommitted},
                     {"entries_replayed", entries_replayed},
                     {"bytes_replayed", bytes_replayed},
                     {"records_seen", records_seen},
                     {"metadata_applied", metadata_applied},
                     {"live_pages", live_pages},
                     {"free_pages", free_pages},
                     {"duration_ms", duration_ms}};
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "recovery: files=" << files_scanned << " committed_entries=" << entries_committed
       << " dropped_uncommitted=" << entries_dropped_uncommitted
       << " replayed_entries=" << entries_replayed << " replayed_bytes=" << bytes_replayed
       << " records=" << records_seen << " metadata_applied=" << metadata_applied
       << " live_pages=" << live_pages << " free_pages=" << free_pages << " ("
       << duration_ms << " ms)";
    return os.str();
  }
};

struct RecoverResult {
  RecoveryReport report;
  RebuildState rebuild;
};

// Crash replay. Pass 1 walks each inode log up to committed_log_tail,
// linking same-page entries (volatile side map standing in for the on-media
// last_write field) and indexing the latest entry per file page. Pass 2
// backtracks from each latest entry until a writeback record or an OOP entry
// halts the walk — earlier data is expired or overwritten — then replays the
// traversed entries oldest to newest onto the disk page. The halting OOP is
// replayed; the halting record is not.
inline RecoverResult recover(const MemView &image, DiskBackend &disk,
                             const RecoveryOptions &opts = {}) {
  auto t0 = std::chrono::steady_clock::now();
  RecoverResult res;
  RecoveryReport &rep = res.report;
  LogReader reader(image);

  u64 total_pages = image.size_bytes() / kPageSize;
  res.rebuild.live.assign(total_pages, false);
  res.rebuild.live[kSuperLogHeadPage] = true;

  auto supers = reader.super_pages();
  for (u32 p : supers) res.rebuild.live[p] = true;
  res.rebuild.super_pages = supers;

  u64 record_counter = 0;

  for (const auto &[super_addr, se] : reader.super_entries()) {
    rep.files_scanned++;
    RebuildInode ri;
    ri.s_dev = se.s_dev;
    ri.ino = se.i_ino;
    ri.super_addr = super_addr;
    ri.head_page = se.head_log_page;
    ri.tail = se.committed_log_tail;

    ri.chain_pages = reader.committed_chain_pages(se.head_log_page, se.committed_log_tail);
    for (u32 p : ri.chain_pages) {
      if (p >= total_pages) throw CorruptImage("chain page out of range");
      res.rebuild.live[p] = true;
    }

    auto slots = reader.committed_slots(se.head_log_page, se.committed_log_tail);
    rep.entries_committed += slots.size();

    // pass 1: per-page chains + latest index
    struct Node {
      size_t idx;
      PmemAddr prev;  // last_write link (volatile)
    };
    std::map<u64, PmemAddr> latest;           // file page -> latest entry addr
    std::map<PmemAddr, size_t> by_addr;       // entry addr -> slot index
    std::map<PmemAddr, PmemAddr> last_write;  // entry addr -> previous same-page entry
    std::optional<size_t> latest_meta;

    for (size_t i = 0; i < slots.size(); i++) {
      const auto &cs = slots[i];
      const InodeLogEntry &e = cs.entry;
      by_addr[cs.addr] = i;
      res.rebuild.max_tid = std::max(res.rebuild.max_tid, e.tid);
      switch (e.kind()) {
        case EntryKind::kWrite: {
          rep.committed_txn_bytes[e.tid] += e.data_len;
          if (e.is_oop() && e.page_index < total_pages) res.rebuild.live[e.page_index] = true;
          last_write[cs.addr] = latest.count(e.file_page()) ? latest[e.file_page()] : 0;
          latest[e.file_page()] = cs.addr;
          break;
        }
        case EntryKind::kWritebackRecord: {
          rep.records_seen++;
          bool skip = !opts.expiry_enabled ||
                      (opts.skip_record_index && *opts.skip_record_index == record_counter);
          record_counter++;
          if (skip) break;  // mutation hook: pretend the record is not there
          last_write[cs.addr] = latest.count(e.file_page()) ? latest[e.file_page()] : 0;
          latest[e.file_page()] = cs.addr;
          break;
        }
        case EntryKind::kMetadata:
          latest_meta = i;
          break;
      }
    }

    // informational: plausible entries sitting beyond the committed tail
    if (se.committed_log_tail != 0) {
      u32 tp = page_of(se.committed_log_tail);
      u32 ts = slot_of(se.committed_log_tail);
      InodeLogEntry tail_e = reader.entry_at(se.committed_log_tail);
      u32 s = ts + tail_e.total_slots();
      while (s <= kUsableSlots) {
        InodeLogEntry e = reader.entry_at(slot_addr(tp, s));
        if (!e.valid()) break;
        rep.entries_dropped_uncommitted++;
        s += e.total_slots();
      }
    }

    // pass 2: backtrack per page, then replay forward
    for (auto &[fpage, latest_addr] : latest) {
      std::vector<size_t> to_replay;  // newest first while collecting
      PmemAddr walk = latest_addr;
      bool live_entry_exists = false;
      while (walk != 0) {
        const auto &cs = slots[by_addr[walk]];
        if (cs.entry.kind() == EntryKind::kWritebackRecord) break;  // expired below here
        to_replay.push_back(by_addr[walk]);
        if (cs.entry.is_oop()) break;  // full overwrite below here
        walk = last_write.count(walk) ? last_write[walk] : 0;
      }
      live_entry_exists = !to_replay.empty();
      ri.unexpired[fpage] = live_entry_exists;
      if (to_replay.empty()) continue;

      std::array<u8, kPageSize> page{};
      disk.read_page(se.i_ino, fpage, {page.data(), kPageSize});
      for (auto it = to_replay.rbegin(); it != to_replay.rend(); ++it) {
        const auto &cs = slots[*it];
        const InodeLogEntry &e = cs.entry;
        if (e.is_oop()) {
          reader.data_page(e.page_index, {page.data(), kPageSize});
          rep.bytes_replayed += kPageSize;
        } else {
          auto payload = reader.ip_payload(cs.addr, e);
          u64 in_page = e.file_offset % kPageSize;
          std::memcpy(page.data() + in_page, payload.data(), payload.size());
          rep.bytes_replayed += payload.size();
        }
        rep.entries_replayed++;
        ri.replay_extent = std::max(ri.replay_extent, e.file_offset + e.data_len);
      }
      disk.write_page(se.i_ino, fpage, {page.data(), kPageSize});
    }

    // metadata: latest committed entry wins; sizes never shrink below what
    // the disk or the replay already holds
    DiskMeta m = disk.read_meta(se.i_ino);
    DiskMeta updated = m;
    if (latest_meta) {
      MetadataPayload mp = MetadataPayload::decode(slots[*latest_meta].entry.inline_zone.data());
      updated.size = std::max(updated.size, mp.new_size);
      updated.mtime_ns = std::max(updated.mtime_ns, mp.mtime_ns);
      updated.ctime_ns = std::max(updated.ctime_ns, mp.ctime_ns);
      ri.has_meta = true;
      ri.latest_meta = mp;
      rep.metadata_applied++;
    }
    updated.size = std::max(updated.size, ri.replay_extent);
    if (!(updated == m)) disk.write_meta(se.i_ino, updated);

    res.rebuild.inodes.push_back(std::move(ri));
  }

  for (bool b : res.rebuild.live)
    if (b) rep.live_pages++;
  rep.free_pages = total_pages - rep.live_pages;

  rep.duration_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// Running recovery twice must be a no-op the second time; used by tests.
inline bool recovery_idempotent(const MemView &image, DiskBackend &disk) {
  OverlayDisk once(disk);
  recover(image, once);
  OverlayDisk twice(disk);
  recover(image, twice);
  recover(image, twice);
  for (u64 ino : once.inos()) {
    for (u64 p : once.pages_of(ino)) {
      std::array<u8, kPageSize> a{}, b{};
      once.read_page(ino, p, {a.data(), kPageSize});
      twice.read_page(ino, p, {b.data(), kPageSize});
      if (a != b) return false;
    }
  }
  return true;
}

}  // namespace nvlog
