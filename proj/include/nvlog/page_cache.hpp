// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <set>
#include <shared_mutex>

#include "nvlog/disk.hpp"
#include "nvlog/sync_engine.hpp"

namespace nvlog {

struct CachedPage {
  std::array<u8, kPageSize> bytes{};
  bool dirty = false;
  // Every dirty byte of the page is covered by committed log entries; such a
  // page is skipped by fsync and, when written back, gets an expiry record.
  bool nvlog_absorbed = false;
  u64 last_dirty_tid = 0;
  u64 dirty_stamp = 0;
  u64 access_stamp = 0;
};

struct FileState {
  u64 ino = 0;
  u64 s_dev = 1;
  u64 size = 0;
  u64 mtime_ns = 0;
  u64 ctime_ns = 0;
  bool user_o_sync = false;
  bool act_o_sync = false;
  std::map<u64, CachedPage> pages;

  // counters between two sync operations (active-sync predictor inputs)
  u64 win_written_bytes = 0;
  std::set<u64> win_touched_pages;
  ActiveSyncState actsync;

  u64 last_logged_size = 0;
  bool meta_dirty = false;
  std::set<u64> dirty_unabsorbed;  // pages collect_dirty would return

  std::shared_mutex mu;

  bool effective_o_sync() const { return user_o_sync || act_o_sync; }
  u64 win_dirty_pages() const { return win_touched_pages.size(); }
  void reset_window() {
    win_written_bytes = 0;
    win_touched_pages.clear();
  }
};

// Volatile page cache: serves all reads, buffers all writes; the cache is
// the source of truth for program-visible bytes. Reads never touch NVM.
class PageCache {
public:
  PageCache(DiskBackend &disk, const EngineConfig &cfg, Metrics &metrics)
      : disk_(disk), cfg_(cfg), metrics_(metrics) {}

  // Fired on a clean->dirty transition (write-back queueing).
  void set_dirty_hook(std::function<void(u64, u64)> fn) { on_first_dirty_ = std::move(fn); }

  FileState &file(u64 ino) {
    std::lock_guard lk(files_mu_);
    auto it = files_.find(ino);
    if (it == files_.end()) {
      auto fs = std::make_unique<FileState>();
      fs->ino = ino;
      DiskMeta m = disk_.read_meta(ino);
      fs->size = m.size;
      fs->mtime_ns = m.mtime_ns;
      fs->ctime_ns = m.ctime_ns;
      fs->last_logged_size = m.size;
      it = files_.emplace(ino, std::move(fs)).first;
    }
    return *it->second;
  }

  std::vector<u64> file_list() const {
    std::lock_guard lk(files_mu_);
    std::vector<u64> out;
    for (auto &[ino, fs] : files_) out.push_back(ino);
    return out;
  }

  struct PageTouch {
    u64 pno;
    bool was_clean;
    bool was_absorbed;
  };

  // Caller holds fs.mu exclusively. Updates bytes, dirty flags and the sync
  // window counters; absorbed is cleared on re-dirty (the engine may set it
  // back right after an O_SYNC absorption).
  std::vector<PageTouch> write(FileState &fs, u64 offset, ByteSpan data) {
    std::vector<PageTouch> touches;
    u64 pos = 0;
    while (pos < data.size()) {
      u64 off = offset + pos;
      u64 pno = off / kPageSize;
      u64 in_page = off % kPageSize;
      u64 take = std::min<u64>(kPageSize - in_page, data.size() - pos);
      CachedPage &pg = page_for_write(fs, pno, in_page == 0 && take == kPageSize);
      PageTouch t{pno, !pg.dirty, pg.nvlog_absorbed};
      std::memcpy(pg.bytes.data() + in_page, data.data() + pos, take);
      if (!pg.dirty) {
        pg.dirty = true;
        metrics_.dirty_pages.fetch_add(1, std::memory_order_relaxed);
        if (on_first_dirty_) on_first_dirty_(fs.ino, pno);
      }
      if (pg.nvlog_absorbed) {
        pg.nvlog_absorbed = false;
        metrics_.absorbed_pages.fetch_sub(1, std::memory_order_relaxed);
      }
      fs.dirty_unabsorbed.insert(pno);
      pg.dirty_stamp = ++stamp_seq_;
      pg.access_stamp = stamp_seq_;
      touches.push_back(t);
      pos += take;
    }
    fs.win_written_bytes += data.size();
    for (auto &t : touches) fs.win_touched_pages.insert(t.pno);
    if (offset + data.size() > fs.size) fs.size = offset + data.size();
    fs.mtime_ns = ++stamp_seq_;  // logical clock; real time is uninteresting here
    fs.meta_dirty = true;        // size and/or mtime changed
    maybe_evict(fs);
    return touches;
  }

  // Read-only fast path: succeeds only when every touched page is already
  // cached and no LRU bookkeeping is needed, so a shared lock suffices.
  std::optional<u64> try_read_cached(const FileState &fs, u64 offset, MutByteSpan out) const {
    if (cfg_.cache_cap_pages != 0) return std::nullopt;
    if (offset >= fs.size) return 0;
    u64 len = std::min<u64>(out.size(), fs.size - offset);
    for (u64 p = offset / kPageSize; p <= (offset + len - 1) / kPageSize; p++)
      if (!fs.pages.count(p)) return std::nullopt;
    u64 pos = 0;
    while (pos < len) {
      u64 off = offset + pos;
      u64 in_page = off % kPageSize;
      u64 take = std::min<u64>(kPageSize - in_page, len - pos);
      std::memcpy(out.data() + pos, fs.pages.at(off / kPageSize).bytes.data() + in_page, take);
      pos += take;
    }
    metrics_.cache_hits.fetch_add(1, std::memory_order_relaxed);
    return len;
  }

  // Caller holds fs.mu exclusively (misses mutate the page map). Returns
  // bytes read; short reads past the file size. Misses load from the disk
  // backend, never from NVM.
  u64 read(FileState &fs, u64 offset, MutByteSpan out) {
    if (offset >= fs.size) return 0;
    u64 len = std::min<u64>(out.size(), fs.size - offset);
    u64 pos = 0;
    while (pos < len) {
      u64 off = offset + pos;
      u64 pno = off / kPageSize;
      u64 in_page = off % kPageSize;
      u64 take = std::min<u64>(kPageSize - in_page, len - pos);
      auto it = fs.pages.find(pno);
      if (it == fs.pages.end()) {
        metrics_.cache_misses.fetch_add(1, std::memory_order_relaxed);
        CachedPage fresh;
        disk_.read_page(fs.ino, pno, {fresh.bytes.data(), kPageSize});
        fresh.access_stamp = ++stamp_seq_;
        it = fs.pages.emplace(pno, fresh).first;
      } else {
        metrics_.cache_hits.fetch_add(1, std::memory_order_relaxed);
        it->second.access_stamp = ++stamp_seq_;
      }
      std::memcpy(out.data() + pos, it->second.bytes.data() + in_page, take);
      pos += take;
    }
    maybe_evict(fs);
    return len;
  }

  // Dirty pages not yet absorbed since their last dirtying. Caller holds fs.mu.
  std::vector<u64> collect_dirty(FileState &fs) const {
    return {fs.dirty_unabsorbed.begin(), fs.dirty_unabsorbed.end()};
  }

  // Write-back durably completed on disk. Clears dirty and absorbed unless
  // the page was re-dirtied after the snapshot was taken. Caller holds fs.mu.
  // Returns true if the page is now clean.
  bool mark_written_back(FileState &fs, u64 pno, u64 snapshot_stamp) {
    auto it = fs.pages.find(pno);
    if (it == fs.pages.end()) return true;
    CachedPage &pg = it->second;
    if (!pg.dirty) return true;
    if (pg.dirty_stamp != snapshot_stamp) return false;  // re-dirtied meanwhile
    pg.dirty = false;
    fs.dirty_unabsorbed.erase(pno);
    metrics_.dirty_pages.fetch_sub(1, std::memory_order_relaxed);
    if (pg.nvlog_absorbed) {
      pg.nvlog_absorbed = false;
      metrics_.absorbed_pages.fetch_sub(1, std::memory_order_relaxed);
    }
    return true;
  }

  void set_absorbed(FileState &fs, u64 pno, u64 tid) {
    auto it = fs.pages.find(pno);
    if (it == fs.pages.end()) return;
    if (!it->second.nvlog_absorbed) {
      it->second.nvlog_absorbed = true;
      metrics_.absorbed_pages.fetch_add(1, std::memory_order_relaxed);
    }
    fs.dirty_unabsorbed.erase(pno);
    it->second.last_dirty_tid = tid;
  }

  const CachedPage *find_page(const FileState &fs, u64 pno) const {
    auto it = fs.pages.find(pno);
    return it == fs.pages.end() ? nullptr : &it->second;
  }

  // Loads pages [0, bytes) as clean cache content (bench warm-up).
  void prewarm(FileState &fs, u64 bytes) {
    for (u64 pno = 0; pno * kPageSize < bytes; pno++) {
      auto it = fs.pages.find(pno);
      if (it != fs.pages.end()) continue;
      CachedPage fresh;
      disk_.read_page(fs.ino, pno, {fresh.bytes.data(), kPageSize});
      fresh.access_stamp = ++stamp_seq_;
      fs.pages.emplace(pno, fresh);
    }
    if (bytes > fs.size) fs.size = bytes;
  }

  u64 dirty_count(FileState &fs) const {
    u64 n = 0;
    for (auto &[pno, pg] : fs.pages)
      if (pg.dirty) n++;
    return n;
  }

private:
  CachedPage &page_for_write(FileState &fs, u64 pno, bool full_overwrite) {
    auto it = fs.pages.find(pno);
    if (it == fs.pages.end()) {
      CachedPage fresh;
      if (!full_overwrite && pno * kPageSize < fs.size) {
        metrics_.cache_misses.fetch_add(1, std::memory_order_relaxed);
        disk_.read_page(fs.ino, pno, {fresh.bytes.data(), kPageSize});
      }
      it = fs.pages.emplace(pno, fresh).first;
    }
    return it->second;
  }

  void maybe_evict(FileState &fs) {
    if (cfg_.cache_cap_pages == 0) return;
    while (fs.pages.size() > cfg_.cache_cap_pages) {
      auto victim = fs.pages.end();
      for (auto it = fs.pages.begin(); it != fs.pages.end(); ++it) {
        if (it->second.dirty) continue;
        if (victim == fs.pages.end() || it->second.access_stamp < victim->second.access_stamp)
          victim = it;
      }
      if (victim == fs.pages.end()) return;  // everything dirty, nothing to evict
      fs.pages.erase(victim);
    }
  }

  DiskBackend &disk_;
  const EngineConfig &cfg_;
  Metrics &metrics_;
  mutable std::mutex files_mu_;
  std::map<u64, std::unique_ptr<FileState>> files_;
  std::atomic<u64> stamp_seq_{0};
  std::function<void(u64, u64)> on_first_dirty_;
};

}  // namespace nvlog
