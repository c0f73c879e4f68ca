// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <condition_variable>

#include "nvlog/gc.hpp"
#include "nvlog/recovery.hpp"
#include "nvlog/writeback.hpp"

namespace nvlog {

// The storage engine: a DRAM page cache serving all reads and buffering all
// writes, an NVM write-ahead log absorbing synchronous writes beside it, an
// asynchronous disk write-back path, recovery and GC. Opening an image
// always runs recovery first; a fresh engine formats the super log.
class Engine {
public:
  explicit Engine(const EngineConfig &cfg)
      : Engine(cfg, std::make_unique<MemDisk>(), /*fresh=*/true) {}

  Engine(const EngineConfig &cfg, std::unique_ptr<DiskBackend> disk, bool fresh)
      : cfg_(cfg),
        pmem_(cfg.nvm_size_pages, cfg.pmem_mode, &metrics_),
        disk_(std::move(disk)),
        log_(pmem_, cfg_, metrics_),
        cache_(*disk_, cfg_, metrics_),
        wb_(log_, cache_, *disk_, metrics_, tid_counter_) {
    pmem_.set_store_latency_ns(cfg_.nvm_store_latency_ns);
    disk_->set_write_latency_us(cfg_.disk_latency_us);
    disk_->set_sync_write_latency_us(cfg_.disk_sync_latency_us);
    cache_.set_dirty_hook([this](u64 ino, u64 pno) { wb_.enqueue(ino, pno); });
    wb_.set_trace_emit([this](const TraceEvent &ev) { emit(ev); });
    pmem_.set_post_fence_hook([this](u64 seq) {
      if (!sink_) return;
      TraceEvent ev;
      ev.kind = TraceEvent::Kind::kFence;
      ev.fence_seq = seq;
      emit(ev);
    });
    if (fresh) log_.format_fresh();
  }

  ~Engine() { stop_background(); }

  // Loads an image file plus its disk directory, recovers, and resumes.
  static std::unique_ptr<Engine> open_files(EngineConfig cfg, const std::string &image_path,
                                            const std::string &disk_dir) {
    auto bytes = PmemDevice::load_image(image_path);
    cfg.nvm_size_pages = u32(bytes.size() / kPageSize);
    auto eng = std::make_unique<Engine>(cfg, std::make_unique<FileDisk>(disk_dir), false);
    eng->pmem_.restore_durable(bytes);
    DurableView view(eng->pmem_);
    auto res = recover(view, *eng->disk_);
    eng->log_.attach(res.rebuild);
    eng->tid_counter_.store(res.rebuild.max_tid);
    eng->image_path_ = image_path;
    return eng;
  }

  // Recover + attach over the current device state (tests).
  RecoveryReport recover_and_attach() {
    DurableView view(pmem_);
    auto res = recover(view, *disk_);
    log_.attach(res.rebuild);
    tid_counter_.store(res.rebuild.max_tid);
    return res.report;
  }

  void save_image() {
    if (image_path_.empty()) throw IoError("engine has no image path");
    save_image(image_path_);
  }
  void save_image(const std::string &path) {
    pmem_.drain_all();
    pmem_.save_image(path);
  }

  // ---- file operations -------------------------------------------------

  // Files exist implicitly; open just materializes the state and reports
  // the current size.
  u64 open(u64 ino) {
    FileState &fs = cache_.file(ino);
    std::shared_lock lk(fs.mu);
    return fs.size;
  }

  u64 write(u64 ino, u64 offset, ByteSpan data) {
    if (data.empty()) return 0;
    metrics_.ops_writes.fetch_add(1, std::memory_order_relaxed);
    FileState &fs = cache_.file(ino);
    std::unique_lock lk(fs.mu);
    auto touches = cache_.write(fs, offset, data);
    if (sink_) {
      TraceEvent ev;
      ev.kind = TraceEvent::Kind::kWrite;
      ev.ino = ino;
      ev.offset = offset;
      ev.data.assign(data.begin(), data.end());
      emit(ev);
    }
    if (cfg_.nvlog_enabled && !fs.user_o_sync)
      clear_sync(actsync_state(fs), fs.act_o_sync, fs.win_written_bytes, fs.win_dirty_pages(),
                 cfg_.sensitivity);
    if (fs.effective_o_sync()) o_sync_write(fs, offset, data, touches);
    return data.size();
  }

  u64 read(u64 ino, u64 offset, MutByteSpan out) {
    metrics_.ops_reads.fetch_add(1, std::memory_order_relaxed);
    FileState &fs = cache_.file(ino);
    {
      std::shared_lock lk(fs.mu);
      auto fast = cache_.try_read_cached(fs, offset, out);
      if (fast) return *fast;
    }
    std::unique_lock lk(fs.mu);
    return cache_.read(fs, offset, out);
  }

  void fsync(u64 ino) { sync_file(ino, /*datasync=*/false); }
  void fdatasync(u64 ino) { sync_file(ino, /*datasync=*/true); }

  void set_o_sync(u64 ino, bool on) {
    FileState &fs = cache_.file(ino);
    std::unique_lock lk(fs.mu);
    fs.user_o_sync = on;
    if (on)
      fs.actsync.should_deact_cnt = 0;
    else
      fs.actsync.should_active_cnt = 0;
  }

  u64 file_size(u64 ino) {
    FileState &fs = cache_.file(ino);
    std::shared_lock lk(fs.mu);
    return fs.size;
  }

  void prewarm(u64 ino, u64 bytes) {
    FileState &fs = cache_.file(ino);
    std::unique_lock lk(fs.mu);
    cache_.prewarm(fs, bytes);
  }

  // ---- maintenance -----------------------------------------------------

  u32 writeback_tick(u32 max_pages = 0) {
    return wb_.tick(max_pages ? max_pages : cfg_.writeback_batch);
  }

  GcStats gc_pass() {
    GcStats st = gc_.pass();
    if (metrics_.fallback_active.load() && log_.pool().has_free_for_alloc()) exit_fallback();
    return st;
  }

  // Drains every dirty page (and metadata sidecar) to disk.
  void quiesce() {
    for (int rounds = 0; rounds < 100000; rounds++) {
      u32 n = wb_.tick(cfg_.writeback_batch);
      if (wb_.queue_depth() == 0 && metrics_.dirty_pages.load() == 0) {
        for (u64 ino : cache_.file_list()) wb_.flush_meta(ino);
        return;
      }
      if (n == 0) gc_.pass();  // deferred pages are waiting for log space
    }
    throw IoError("quiesce made no progress");
  }

  void start_background() {
    if (bg_running_) return;
    bg_running_ = true;
    stop_ = false;
    wb_thread_ = std::thread([this] {
      std::unique_lock lk(bg_mu_);
      while (!stop_) {
        bg_cv_.wait_for(lk, std::chrono::milliseconds(cfg_.writeback_interval_ms));
        if (stop_) break;
        lk.unlock();
        wb_.tick(cfg_.writeback_batch);
        lk.lock();
      }
    });
    gc_thread_ = std::thread([this] {
      std::unique_lock lk(bg_mu_);
      while (!stop_) {
        bg_cv_.wait_for(lk, std::chrono::milliseconds(cfg_.gc_interval_ms));
        if (stop_) break;
        lk.unlock();
        gc_pass();
        lk.lock();
      }
    });
  }

  void stop_background() {
    if (!bg_running_) return;
    {
      std::lock_guard lk(bg_mu_);
      stop_ = true;
    }
    bg_cv_.notify_all();
    if (wb_thread_.joinable()) wb_thread_.join();
    if (gc_thread_.joinable()) gc_thread_.join();
    bg_running_ = false;
  }

  // ---- wiring ----------------------------------------------------------

  void set_trace_sink(TraceSink sink) { sink_ = std::move(sink); }

  PmemDevice &pmem() { return pmem_; }
  DiskBackend &disk() { return *disk_; }
  LogStore &log() { return log_; }
  PageCache &cache() { return cache_; }
  WritebackEngine &writeback() { return wb_; }
  GarbageCollector &gc() { return gc_; }
  Metrics &metrics() { return metrics_; }
  const EngineConfig &config() const { return cfg_; }

  bool fallback_active() const { return metrics_.fallback_active.load(); }
  u64 last_txn_payload() const { return last_txn_payload_.load(); }
  u64 current_tid() const { return tid_counter_.load(); }

private:
  ActiveSyncState &actsync_state(FileState &fs) {
    if (cfg_.actsync_scope == ActSyncScope::kGlobal) return global_actsync_;
    return fs.actsync;
  }

  void emit(const TraceEvent &ev) {
    if (sink_) sink_(ev);
  }

  void o_sync_write(FileState &fs, u64 offset, ByteSpan data,
                    const std::vector<PageCache::PageTouch> &touches) {
    metrics_.ops_syncs.fetch_add(1, std::memory_order_relaxed);
    bool logged = cfg_.nvlog_enabled && try_log_o_sync(fs, offset, data, touches);
    if (!logged) {
      std::vector<u64> pnos;
      for (u64 p = offset / kPageSize; p <= (offset + data.size() - 1) / kPageSize; p++)
        pnos.push_back(p);
      fallback_sync(fs, pnos, /*flush_meta=*/false);
    }
    finish_sync_point(fs);
  }

  bool try_log_o_sync(FileState &fs, u64 offset, ByteSpan data,
                      const std::vector<PageCache::PageTouch> &touches) {
    if (!ensure_inode_log(fs)) return false;
    if (metrics_.fallback_active.load()) {
      if (!log_.pool().has_free_for_alloc()) return false;
      exit_fallback();
    }
    auto segs = segment_write(offset, data.size());
    u64 tid = tid_counter_.fetch_add(1) + 1;
    auto txn = log_.begin(fs.ino, tid);
    for (const Segment &s : segs) {
      bool ok;
      if (s.oop) {
        const CachedPage *pg = cache_.find_page(fs, s.offset / kPageSize);
        ok = log_.append_oop(txn, s.offset, {pg->bytes.data(), kPageSize});
      } else {
        ok = log_.append_ip(txn, s.offset, data.subspan(s.offset - offset, s.len));
      }
      if (!ok) {
        log_.abort(txn);
        enter_fallback();
        return false;
      }
    }
    if (sink_) {
      TraceEvent ev;
      ev.kind = TraceEvent::Kind::kSyncPrepare;
      ev.ino = fs.ino;
      ev.tid = tid;
      for (const Segment &s : segs) ev.segs.push_back({s.offset, s.len});
      emit(ev);
    }
    log_.commit(txn, [&] {
      if (sink_) {
        TraceEvent ev;
        ev.kind = TraceEvent::Kind::kSyncCommitIssued;
        ev.ino = fs.ino;
        ev.tid = tid;
        emit(ev);
      }
    });
    std::map<u64, const PageCache::PageTouch *> by_page;
    for (const auto &t : touches) by_page[t.pno] = &t;
    for (const Segment &s : segs) {
      u64 pno = s.offset / kPageSize;
      if (s.oop) {
        cache_.set_absorbed(fs, pno, tid);
      } else {
        const auto *t = by_page[pno];
        // absorbed only when every dirty byte of the page is now logged
        if (t && (t->was_clean || t->was_absorbed)) cache_.set_absorbed(fs, pno, tid);
      }
    }
    last_txn_payload_.store(data.size());
    return true;
  }

  void sync_file(u64 ino, bool datasync) {
    metrics_.ops_syncs.fetch_add(1, std::memory_order_relaxed);
    FileState &fs = cache_.file(ino);
    std::unique_lock lk(fs.mu);
    auto dirty = cache_.collect_dirty(fs);
    bool size_changed = fs.size != fs.last_logged_size;
    bool want_meta_entry = datasync ? size_changed : true;
    bool need_txn = !dirty.empty() || size_changed;

    if (need_txn) {
      bool logged = cfg_.nvlog_enabled && try_log_sync(fs, dirty, want_meta_entry, size_changed);
      if (!logged) {
        fallback_sync(fs, dirty, /*flush_meta=*/true);
      }
    }
    finish_sync_point(fs);
  }

  bool try_log_sync(FileState &fs, const std::vector<u64> &dirty, bool want_meta_entry,
                    bool size_changed) {
    if (!ensure_inode_log(fs)) return false;
    if (metrics_.fallback_active.load()) {
      if (!log_.pool().has_free_for_alloc()) return false;
      exit_fallback();
    }
    bool meta_entry = want_meta_entry && (size_changed || !dirty.empty());
    if (dirty.empty() && !meta_entry) return true;  // nothing to log
    u64 tid = tid_counter_.fetch_add(1) + 1;
    auto txn = log_.begin(fs.ino, tid);
    u64 payload = 0;
    std::vector<TraceSeg> segs;
    for (u64 pno : dirty) {
      const CachedPage *pg = cache_.find_page(fs, pno);
      if (!log_.append_oop(txn, pno * kPageSize, {pg->bytes.data(), kPageSize})) {
        log_.abort(txn);
        enter_fallback();
        return false;
      }
      segs.push_back({pno * kPageSize, kPageSize});
      payload += kPageSize;
    }
    if (meta_entry) {
      MetadataPayload mp{fs.size, fs.mtime_ns, fs.ctime_ns};
      if (!log_.append_meta(txn, mp)) {
        log_.abort(txn);
        enter_fallback();
        return false;
      }
    }
    if (sink_) {
      TraceEvent ev;
      ev.kind = TraceEvent::Kind::kSyncPrepare;
      ev.ino = fs.ino;
      ev.tid = tid;
      ev.segs = segs;
      emit(ev);
    }
    log_.commit(txn, [&] {
      if (sink_) {
        TraceEvent ev;
        ev.kind = TraceEvent::Kind::kSyncCommitIssued;
        ev.ino = fs.ino;
        ev.tid = tid;
        emit(ev);
      }
    });
    for (u64 pno : dirty) cache_.set_absorbed(fs, pno, tid);
    if (meta_entry) fs.last_logged_size = fs.size;
    last_txn_payload_.store(payload);
    return true;
  }

  bool ensure_inode_log(FileState &fs) {
    if (log_.has_inode(fs.ino)) return true;
    switch (log_.create_inode_log(fs.s_dev, fs.ino)) {
      case LogStatus::kOk:
      case LogStatus::kExists:
        return true;
      default:
        enter_fallback();
        return false;
    }
  }

  // Degraded path: synchronous disk write of the affected pages (and the
  // metadata sidecar for fsync). Still a write-back event: expiry records
  // are appended for pages with valid previous entries.
  void fallback_sync(FileState &fs, const std::vector<u64> &pnos, bool flush_meta) {
    for (u64 pno : pnos) {
      for (int attempt = 0;; attempt++) {
        WbResult r = wb_.writeback_page(fs.ino, pno, &fs);
        if (r == WbResult::kDone || r == WbResult::kSkipped) break;
        if (r == WbResult::kDeferred) {
          if (attempt >= 8) throw IoError("fallback sync: no NVM space for expiry record");
          gc_.pass();
          continue;
        }
        if (attempt >= 8) throw IoError("fallback sync: disk keeps failing");
      }
    }
    if (flush_meta) wb_.flush_meta_locked(fs);
    last_txn_payload_.store(0);
  }

  void finish_sync_point(FileState &fs) {
    if (cfg_.nvlog_enabled && !fs.user_o_sync)
      mark_sync(actsync_state(fs), fs.act_o_sync, fs.win_written_bytes, fs.win_dirty_pages(),
                cfg_.sensitivity);
    fs.reset_window();
  }

  void enter_fallback() {
    if (!metrics_.fallback_active.exchange(true)) {
      metrics_.fallback_enters.fetch_add(1, std::memory_order_relaxed);
      fallback_since_ns_.store(now_ns());
    }
  }

  void exit_fallback() {
    if (metrics_.fallback_active.exchange(false))
      metrics_.fallback_ns.fetch_add(now_ns() - fallback_since_ns_.load(),
                                     std::memory_order_relaxed);
  }

  static u64 now_ns() {
    return u64(std::chrono::duration_cast<std::chrono::nanoseconds>(
                   std::chrono::steady_clock::now().time_since_epoch())
                   .count());
  }

  EngineConfig cfg_;
  Metrics metrics_;
  PmemDevice pmem_;
  std::unique_ptr<DiskBackend> disk_;
  LogStore log_;
  PageCache cache_;
  WritebackEngine wb_;
  GarbageCollector gc_{log_, metrics_};
  std::atomic<u64> tid_counter_{0};
  std::atomic<u64> last_txn_payload_{0};
  std::atomic<u64> fallback_since_ns_{0};
  ActiveSyncState global_actsync_;
  TraceSink sink_;
  std::string image_path_;

  std::thread wb_thread_, gc_thread_;
  std::mutex bg_mu_;
  std::condition_variable bg_cv_;
  bool stop_ = false;
  bool bg_running_ = false;
};

}  // namespace nvlog
