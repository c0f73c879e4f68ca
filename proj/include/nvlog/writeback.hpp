// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>

#include "nvlog/log_store.hpp"
#include "nvlog/page_cache.hpp"
#include "nvlog/trace.hpp"

namespace nvlog {

enum class WbResult { kDone, kDeferred, kFailed, kSkipped };

// Asynchronous write-back: checkpoints dirty cache pages to disk, oldest
// dirty first, and persists a write-back record after each durable
// checkpoint when (and only when) a valid previous log entry for the page
// exists. The record slot is claimed before the disk write — see
// docs/consistency.md for why both orderings matter.
class WritebackEngine {
public:
  WritebackEngine(LogStore &log, PageCache &cache, DiskBackend &disk, Metrics &metrics,
                  std::atomic<u64> &tid_counter)
      : log_(log), cache_(cache), disk_(disk), metrics_(metrics), tid_counter_(tid_counter) {}

  void set_trace_emit(std::function<void(const TraceEvent &)> fn) { emit_ = std::move(fn); }

  void enqueue(u64 ino, u64 pno) {
    std::lock_guard lk(mu_);
    if (queued_.insert({ino, pno}).second) queue_.push_back({ino, pno});
  }

  u64 queue_depth() const {
    std::lock_guard lk(mu_);
    return queue_.size();
  }

  // Drains up to `max_pages` dirty pages. Returns the number durably written.
  u32 tick(u32 max_pages) {
    u32 written = 0;
    std::vector<std::pair<u64, u64>> again;
    std::set<u64> touched_inos;
    for (u32 n = 0; n < max_pages; n++) {
      std::pair<u64, u64> item;
      {
        std::lock_guard lk(mu_);
        if (queue_.empty()) break;
        item = queue_.front();
        queue_.pop_front();
        queued_.erase(item);
      }
      WbResult r = writeback_page(item.first, item.second);
      if (r == WbResult::kDone) {
        written++;
        touched_inos.insert(item.first);
      } else if (r == WbResult::kDeferred || r == WbResult::kFailed) {
        again.push_back(item);
      }
    }
    for (auto &it : again) enqueue(it.first, it.second);
    // aggregate the metadata updates of everything written this tick
    for (u64 ino : touched_inos) flush_meta(ino);
    return written;
  }

  // Checkpoints one page. When `prelocked` names the file, its lock is held
  // by the caller (synchronous fallback path) and disk latency runs under
  // it; the background path drops the lock around the disk write.
  WbResult writeback_page(u64 ino, u64 pno, FileState *prelocked = nullptr) {
    FileState &fs = prelocked ? *prelocked : cache_.file(ino);
    std::unique_lock<std::shared_mutex> lk;
    if (!prelocked) lk = std::unique_lock(fs.mu);

    const CachedPage *pg = cache_.find_page(fs, pno);
    if (!pg || !pg->dirty) return WbResult::kSkipped;

    bool needs_record = log_.has_inode(ino) && log_.page_has_unexpired(ino, pno);
    LogStore::RecordClaim claim;
    if (needs_record) {
      auto key = std::make_pair(ino, pno);
      {
        std::lock_guard slk(mu_);
        auto stashed = stashed_claims_.find(key);
        if (stashed != stashed_claims_.end()) {
          claim = stashed->second;
          stashed_claims_.erase(stashed);
        }
      }
      if (!claim.valid()) {
        auto c = log_.claim_record_slot(ino);
        if (!c) return WbResult::kDeferred;  // no NVM space for the expiry record
        claim = *c;
      }
    }

    std::array<u8, kPageSize> snapshot = pg->bytes;
    u64 stamp = pg->dirty_stamp;
    if (!prelocked) lk.unlock();

    try {
      if (prelocked)
        disk_.write_page_sync(ino, pno, {snapshot.data(), kPageSize});
      else
        disk_.write_page(ino, pno, {snapshot.data(), kPageSize});
    } catch (const IoError &) {
      if (claim.valid()) {
        std::lock_guard slk(mu_);
        stashed_claims_[{ino, pno}] = claim;
      }
      return WbResult::kFailed;  // page stays dirty; retried on a later tick
    }
    metrics_.wb_pages_written.fetch_add(1, std::memory_order_relaxed);
    if (emit_) {
      TraceEvent ev;
      ev.kind = TraceEvent::Kind::kWbDurable;
      ev.ino = ino;
      ev.page_no = pno;
      emit_(ev);
    }

    if (claim.valid()) {
      u64 tid = tid_counter_.fetch_add(1) + 1;
      log_.fill_record(ino, claim, pno, tid, [&] {
        if (emit_) {
          TraceEvent ev;
          ev.kind = TraceEvent::Kind::kRecordIssued;
          ev.ino = ino;
          ev.page_no = pno;
          ev.tid = tid;
          emit_(ev);
        }
      });
    }

    if (!prelocked) lk.lock();
    bool cleaned = cache_.mark_written_back(fs, pno, stamp);
    if (!cleaned) return WbResult::kFailed;  // re-dirtied during the write; go again
    return WbResult::kDone;
  }

  void flush_meta(u64 ino) {
    FileState &fs = cache_.file(ino);
    std::unique_lock lk(fs.mu);
    flush_meta_locked(fs);
  }

  void flush_meta_locked(FileState &fs) {
    if (!fs.meta_dirty) return;
    DiskMeta m{fs.size, fs.mtime_ns, fs.ctime_ns};
    disk_.write_meta(fs.ino, m);
    fs.meta_dirty = false;
  }

private:
  LogStore &log_;
  PageCache &cache_;
  DiskBackend &disk_;
  Metrics &metrics_;
  std::atomic<u64> &tid_counter_;
  std::function<void(const TraceEvent &)> emit_;
  mutable std::mutex mu_;
  std::deque<std::pair<u64, u64>> queue_;
  std::set<std::pair<u64, u64>> queued_;
  std::map<std::pair<u64, u64>, LogStore::RecordClaim> stashed_claims_;
};

}  // namespace nvlog
