// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cassert>
#include <memory>
#include <thread>

#include "nvlog/log_format.hpp"
#include "nvlog/pmem.hpp"

namespace nvlog {

// Volatile free-page tracking: a global bitmap plus small per-thread caches
// refilled in batches. Reconstructed from a reachability scan at recovery.
// A handful of pages can be held back as a reserve that only write-back
// record claims may draw from, so an expiry record can always be appended
// for a disk checkpoint even when the pool is otherwise drained.
class PagePool {
public:
  PagePool(u32 capacity_pages, u32 refill_batch, u32 reserve_pages)
      : capacity_(capacity_pages),
        refill_batch_(refill_batch),
        reserve_(reserve_pages),
        free_bit_(capacity_pages, false),
        shards_(std::max(4u, std::thread::hardware_concurrency())) {}

  // All pages free except page 0 (super log head).
  void init_fresh() {
    std::lock_guard lk(mu_);
    free_stack_.clear();
    for (u32 p = capacity_ - 1; p >= 1; p--) {
      free_bit_[p] = true;
      free_stack_.push_back(p);
    }
    free_bit_[0] = false;
  }

  void reset_from_live(const std::vector<bool> &live) {
    std::lock_guard lk(mu_);
    assert(live.size() == capacity_);
    free_stack_.clear();
    for (auto &s : shards_) {
      std::lock_guard slk(s.mu);
      s.cache.clear();
    }
    for (u32 p = capacity_ - 1; p >= 1; p--) {
      free_bit_[p] = !live[p];
      if (!live[p]) free_stack_.push_back(p);
    }
    free_bit_[0] = false;
  }

  std::optional<u32> alloc(bool allow_reserve = false) {
    if (allow_reserve) {
      std::lock_guard lk(mu_);
      return pop_global_locked();
    }
    Shard &sh = my_shard();
    {
      std::lock_guard slk(sh.mu);
      if (!sh.cache.empty()) {
        u32 p = sh.cache.back();
        sh.cache.pop_back();
        return p;
      }
    }
    // refill the shard in a batch, keeping the reserve intact
    {
      std::lock_guard lk(mu_);
      std::lock_guard slk(sh.mu);
      u32 can = free_stack_.size() > reserve_ ? u32(free_stack_.size() - reserve_) : 0;
      u32 take = std::min(refill_batch_, can);
      for (u32 i = 0; i < take; i++) {
        sh.cache.push_back(free_stack_.back());
        free_stack_.pop_back();
      }
      if (take > 0) refills_++;
      if (!sh.cache.empty()) {
        u32 p = sh.cache.back();
        sh.cache.pop_back();
        return p;
      }
    }
    // last resort: steal from another shard
    for (auto &other : shards_) {
      std::lock_guard slk(other.mu);
      if (!other.cache.empty()) {
        u32 p = other.cache.back();
        other.cache.pop_back();
        return p;
      }
    }
    return std::nullopt;
  }

  void free_page(u32 page) {
    assert(page != 0 && page < capacity_);
    Shard &sh = my_shard();
    std::lock_guard slk(sh.mu);
    if (sh.cache.size() < 2 * refill_batch_) {
      sh.cache.push_back(page);
      return;
    }
    std::lock_guard lk(mu_);
    free_bit_[page] = true;
    free_stack_.push_back(page);
  }

  bool has_free_for_alloc() const {
    {
      std::lock_guard lk(mu_);
      if (free_stack_.size() > reserve_) return true;
    }
    for (auto &s : shards_) {
      std::lock_guard slk(s.mu);
      if (!s.cache.empty()) return true;
    }
    return false;
  }

  u64 free_total() const {
    u64 n;
    {
      std::lock_guard lk(mu_);
      n = free_stack_.size();
    }
    for (auto &s : shards_) {
      std::lock_guard slk(s.mu);
      n += s.cache.size();
    }
    return n;
  }

  u64 used_pages() const { return capacity_ - free_total(); }
  u64 refills() const { return refills_; }
  u32 capacity() const { return capacity_; }

  u64 shard_cached() const {
    auto &sh = const_cast<PagePool *>(this)->my_shard();
    std::lock_guard slk(sh.mu);
    return sh.cache.size();
  }

private:
  struct Shard {
    mutable std::mutex mu;
    std::vector<u32> cache;
  };

  Shard &my_shard() {
    size_t h = std::hash<std::thread::id>{}(std::this_thread::get_id());
    return shards_[h % shards_.size()];
  }

  std::optional<u32> pop_global_locked() {
    if (free_stack_.empty()) return std::nullopt;
    u32 p = free_stack_.back();
    free_stack_.pop_back();
    free_bit_[p] = false;
    return p;
  }

  u32 capacity_;
  u32 refill_batch_;
  u32 reserve_;
  std::vector<bool> free_bit_;
  std::vector<u32> free_stack_;
  mutable std::mutex mu_;
  std::vector<Shard> shards_;
  std::atomic<u64> refills_{0};
};

// Rebuild output of the recovery scan, consumed by LogStore::attach.
struct RebuildInode {
  u64 s_dev = 0;
  u64 ino = 0;
  PmemAddr super_addr = 0;
  u32 head_page = 0;
  PmemAddr tail = 0;
  std::vector<u32> chain_pages;
  std::unordered_map<u64, bool> unexpired;  // file page -> committed unexpired entry exists
  bool has_meta = false;
  MetadataPayload latest_meta;
  u64 replay_extent = 0;  // max offset+len over replayed/committed write entries
};

struct RebuildState {
  std::vector<bool> live;
  std::vector<u32> super_pages;
  std::vector<RebuildInode> inodes;
  u64 max_tid = 0;
};

enum class LogStatus { kOk, kExists, kNoSuchInode, kNvmFull };

// Owns the on-media log structure: the super log, per-inode log chains,
// slot allocation, and the transactional commit protocol (flush everything,
// fence, publish committed_log_tail with one atomic 8-byte store, fence).
class LogStore {
  struct InodeRt {
    u64 s_dev = 0;
    u64 ino = 0;
    PmemAddr super_addr = 0;
    std::atomic<u32> head_page{0};
    std::mutex append_mu;
    // guarded by append_mu:
    std::atomic<u32> cursor_page{0};
    u32 cursor_slot = 1;
    std::atomic<PmemAddr> tail_addr{0};
    u64 tail_pos = 0;
    u64 next_pos = 1;
    std::unordered_map<u64, bool> unexpired;
  };

public:
  LogStore(PmemDevice &dev, const EngineConfig &cfg, Metrics &metrics)
      : dev_(dev),
        cfg_(cfg),
        metrics_(metrics),
        pool_(dev.capacity_pages(), cfg.pool_refill_batch, cfg.record_reserve_pages) {}

  PmemDevice &dev() { return dev_; }
  PagePool &pool() { return pool_; }

  void format_fresh() {
    pool_.init_fresh();
    LogPageHeader h;
    h.kind = PageKind::kSuperLog;
    write_header(kSuperLogHeadPage, h);
    dev_.sfence();
    super_pages_ = {kSuperLogHeadPage};
    super_used_ = 0;
  }

  void attach(const RebuildState &rb) {
    pool_.reset_from_live(rb.live);
    super_pages_ = rb.super_pages;
    VolatileView v(dev_);
    LogReader reader(v);
    LogPageHeader last = reader.header(super_pages_.back());
    super_used_ = std::min(last.slot_count, kUsableSlots);
    inodes_.clear();
    for (const auto &ri : rb.inodes) {
      auto rt = std::make_unique<InodeRt>();
      rt->s_dev = ri.s_dev;
      rt->ino = ri.ino;
      rt->super_addr = ri.super_addr;
      rt->head_page.store(ri.head_page);
      rt->tail_addr.store(ri.tail);
      rt->tail_pos = 0;
      rt->next_pos = 1;
      rt->unexpired = ri.unexpired;
      if (ri.tail == 0) {
        rt->cursor_page.store(ri.head_page);
        rt->cursor_slot = 1;
      } else {
        InodeLogEntry te = reader.entry_at(ri.tail);
        rt->cursor_page.store(page_of(ri.tail));
        rt->cursor_slot = slot_of(ri.tail) + te.total_slots();
      }
      inodes_[ri.ino] = std::move(rt);
    }
  }

  bool has_inode(u64 ino) const {
    std::lock_guard lk(super_mu_);
    return inodes_.count(ino) != 0;
  }

  std::vector<u64> inode_list() const {
    std::lock_guard lk(super_mu_);
    std::vector<u64> out;
    for (auto &[ino, rt] : inodes_) out.push_back(ino);
    return out;
  }

  LogStatus create_inode_log(u64 s_dev, u64 ino) {
    std::lock_guard lk(super_mu_);
    if (inodes_.count(ino)) return LogStatus::kExists;

    auto head = pool_.alloc();
    if (!head) return LogStatus::kNvmFull;
    LogPageHeader hh;
    hh.kind = PageKind::kInodeLog;
    hh.owner_ino = ino;
    init_log_page(*head, hh);

    u32 sp = super_pages_.back();
    if (super_used_ >= kUsableSlots) {
      auto np = pool_.alloc();
      if (!np) {
        pool_.free_page(*head);
        return LogStatus::kNvmFull;
      }
      LogPageHeader sh;
      sh.kind = PageKind::kSuperLog;
      init_log_page(*np, sh);
      dev_.sfence();
      dev_.store_u32(page_base(sp) + kHeaderNextPageOff, *np);
      dev_.clwb(page_base(sp) + kHeaderNextPageOff, 4);
      dev_.sfence();
      super_pages_.push_back(*np);
      super_used_ = 0;
      sp = *np;
    }

    u32 slot = super_used_ + 1;
    PmemAddr entry_addr = slot_addr(sp, slot);
    SuperLogEntry se;
    se.s_dev = s_dev;
    se.i_ino = ino;
    se.head_log_page = *head;
    se.committed_log_tail = 0;
    u8 raw[kSlotSize];
    se.encode(raw);
    dev_.store(entry_addr, {raw, kSlotSize});
    dev_.clwb(entry_addr, kSlotSize);
    dev_.sfence();
    // publishing the slot count makes the entry (and the head page) reachable
    dev_.store_u32(page_base(sp) + kHeaderSlotCountOff, slot);
    dev_.clwb(page_base(sp) + kHeaderSlotCountOff, 4);
    dev_.sfence();
    super_used_ = slot;

    auto rt = std::make_unique<InodeRt>();
    rt->s_dev = s_dev;
    rt->ino = ino;
    rt->super_addr = entry_addr;
    rt->head_page.store(*head);
    rt->cursor_page.store(*head);
    rt->cursor_slot = 1;
    inodes_[ino] = std::move(rt);
    return LogStatus::kOk;
  }

  // One in-flight transaction per inode; the guard holds the append lock.
  class Txn {
  public:
    Txn(Txn &&) = default;
    ~Txn() = default;
    u64 tid() const { return tid_; }
    u32 entries() const { return entry_count_; }

  private:
    friend class LogStore;
    Txn(LogStore *ls, InodeRt *rt, u64 tid)
        : ls_(ls), rt_(rt), tid_(tid), lock_(rt->append_mu) {}

    LogStore *ls_;
    InodeRt *rt_;
    u64 tid_;
    std::unique_lock<std::mutex> lock_;
    u32 start_page_ = 0;
    u32 start_slot_ = 0;
    PmemAddr last_entry_ = 0;
    u32 entry_count_ = 0;
    std::vector<u32> new_log_pages_;
    std::vector<u32> data_pages_;
    std::vector<u64> touched_file_pages_;
    bool done_ = false;
  };

  Txn begin(u64 ino, u64 tid) {
    InodeRt *rt = find(ino);
    Txn t(this, rt, tid);
    t.start_page_ = rt->cursor_page.load();
    t.start_slot_ = rt->cursor_slot;
    return t;
  }

  bool append_ip(Txn &t, u64 file_offset, ByteSpan payload) {
    assert(payload.size() > 0 && payload.size() <= kMaxIpPayload);
    assert(file_offset / kPageSize == (file_offset + payload.size() - 1) / kPageSize);
    InodeLogEntry e;
    e.flag = flag_for(EntryKind::kWrite);
    e.data_len = u16(payload.size());
    e.page_index = 0;
    e.file_offset = file_offset;
    e.tid = t.tid_;
    u64 n = std::min<u64>(payload.size(), 32);
    std::memcpy(e.inline_zone.data(), payload.data(), n);
    u32 slots = e.total_slots();
    auto at = reserve_slots(t, slots);
    if (!at) return false;
    u8 raw[kSlotSize];
    e.encode(raw);
    dev_.store(*at, {raw, kSlotSize});
    u64 rest = payload.size() - n;
    for (u32 i = 1; rest > 0; i++) {
      u8 cont[kSlotSize] = {0};
      u64 take = std::min<u64>(rest, kSlotSize);
      std::memcpy(cont, payload.data() + n, take);
      dev_.store(*at + u64(i) * kSlotSize, {cont, kSlotSize});
      n += take;
      rest -= take;
    }
    dev_.clwb(*at, u64(slots) * kSlotSize);
    finish_entry(t, *at, file_offset / kPageSize, payload.size());
    return true;
  }

  bool append_oop(Txn &t, u64 file_offset, ByteSpan page_bytes) {
    assert(page_bytes.size() == kPageSize);
    assert(file_offset % kPageSize == 0);
    auto dp = pool_.alloc();
    if (!dp) return false;
    t.data_pages_.push_back(*dp);
    // data page is filled with fresh bytes before the entry references it
    dev_.store(page_base(*dp), page_bytes);
    dev_.clwb(page_base(*dp), kPageSize);
    InodeLogEntry e;
    e.flag = flag_for(EntryKind::kWrite);
    e.data_len = u16(kPageSize);
    e.page_index = *dp;
    e.file_offset = file_offset;
    e.tid = t.tid_;
    auto at = reserve_slots(t, 1);
    if (!at) {
      pool_.free_page(*dp);
      t.data_pages_.pop_back();
      return false;
    }
    u8 raw[kSlotSize];
    e.encode(raw);
    dev_.store(*at, {raw, kSlotSize});
    dev_.clwb(*at, kSlotSize);
    finish_entry(t, *at, file_offset / kPageSize, kPageSize);
    return true;
  }

  bool append_meta(Txn &t, const MetadataPayload &meta) {
    InodeLogEntry e;
    e.flag = flag_for(EntryKind::kMetadata);
    e.data_len = kMetadataPayloadLen;
    e.page_index = 0;
    e.file_offset = 0;
    e.tid = t.tid_;
    meta.encode(e.inline_zone.data());
    auto at = reserve_slots(t, 1);
    if (!at) return false;
    u8 raw[kSlotSize];
    e.encode(raw);
    dev_.store(*at, {raw, kSlotSize});
    dev_.clwb(*at, kSlotSize);
    finish_entry(t, *at, std::nullopt, 0);
    return true;
  }

  // Exactly two barriers: one sealing the segments before the tail becomes
  // visible, one ordering this commit against the next transaction.
  void commit(Txn &t, const std::function<void()> &on_issue = {}) {
    assert(!t.done_ && t.entry_count_ > 0);
    InodeRt *rt = t.rt_;
    dev_.sfence();
    dev_.store_u64(rt->super_addr + kSuperTailOff, t.last_entry_);
    dev_.clwb(rt->super_addr + kSuperTailOff, 8);
    if (on_issue) on_issue();
    dev_.sfence();
    rt->tail_addr.store(t.last_entry_);
    rt->tail_pos = rt->next_pos - 1;
    for (u64 fp : t.touched_file_pages_) rt->unexpired[fp] = true;
    t.done_ = true;
    t.lock_.unlock();
    metrics_.txns_committed.fetch_add(1, std::memory_order_relaxed);
  }

  // Rewinds the cursor so the consumed slots are reused; stale bytes beyond
  // committed_log_tail are never decoded.
  void abort(Txn &t) {
    if (t.done_) return;
    InodeRt *rt = t.rt_;
    rt->cursor_page.store(t.start_page_);
    rt->cursor_slot = t.start_slot_;
    for (u32 p : t.data_pages_) pool_.free_page(p);
    for (u32 p : t.new_log_pages_) pool_.free_page(p);
    t.done_ = true;
    t.lock_.unlock();
    metrics_.txns_aborted.fetch_add(1, std::memory_order_relaxed);
  }

  struct RecordClaim {
    PmemAddr addr = 0;
    u64 pos = 0;
    bool valid() const { return addr != 0; }
  };

  // Claims (and zeroes) one slot for a future write-back record. Claimed
  // before the disk write so the record's log position precedes any sync
  // committed during the write, and so capacity is guaranteed afterwards.
  // May draw a fresh log page from the reserve.
  std::optional<RecordClaim> claim_record_slot(u64 ino) {
    InodeRt *rt = find(ino);
    std::lock_guard lk(rt->append_mu);
    auto at = reserve_slots_raw(rt, nullptr, 1, /*allow_reserve=*/true);
    if (!at) return std::nullopt;
    u8 zeros[kSlotSize] = {0};
    dev_.store(*at, {zeros, kSlotSize});
    dev_.clwb(*at, kSlotSize);
    RecordClaim c;
    c.addr = *at;
    c.pos = rt->next_pos++;
    return c;
  }

  // Fills a claimed slot after the disk page write is durable, then commits
  // it with the same two-barrier discipline as a transaction: the record
  // bytes (and any freshly chained page) must be durable before the tail can
  // expose them.
  void fill_record(u64 ino, const RecordClaim &claim, u64 file_page, u64 tid,
                   const std::function<void()> &on_issue = {}) {
    InodeRt *rt = find(ino);
    std::lock_guard lk(rt->append_mu);
    InodeLogEntry e;
    e.flag = flag_for(EntryKind::kWritebackRecord);
    e.data_len = u16(kPageSize);
    e.page_index = 0;
    e.file_offset = file_page * kPageSize;
    e.tid = tid;
    u8 raw[kSlotSize];
    e.encode(raw);
    dev_.store(claim.addr, {raw, kSlotSize});
    dev_.clwb(claim.addr, kSlotSize);
    dev_.sfence();
    bool advance = claim.pos > rt->tail_pos;
    if (advance) {
      dev_.store_u64(rt->super_addr + kSuperTailOff, claim.addr);
      dev_.clwb(rt->super_addr + kSuperTailOff, 8);
    }
    if (on_issue) on_issue();
    dev_.sfence();
    if (advance) {
      rt->tail_addr.store(claim.addr);
      rt->tail_pos = claim.pos;
    }
    rt->unexpired[file_page] = false;
    metrics_.records_appended.fetch_add(1, std::memory_order_relaxed);
  }

  bool page_has_unexpired(u64 ino, u64 file_page) {
    InodeRt *rt = find(ino);
    std::lock_guard lk(rt->append_mu);
    auto it = rt->unexpired.find(file_page);
    return it != rt->unexpired.end() && it->second;
  }

  PmemAddr committed_tail(u64 ino) { return find(ino)->tail_addr.load(); }
  u32 head_page(u64 ino) { return find(ino)->head_page.load(); }
  u32 latest_page(u64 ino) { return find(ino)->cursor_page.load(); }
  PmemAddr super_entry_addr(u64 ino) { return find(ino)->super_addr; }
  void set_head_page_runtime(u64 ino, u32 page) { find(ino)->head_page.store(page); }

private:
  InodeRt *find(u64 ino) {
    std::lock_guard lk(super_mu_);
    auto it = inodes_.find(ino);
    if (it == inodes_.end())
      throw IoError("no inode log for ino " + std::to_string(ino));
    return it->second.get();
  }

  void write_header(u32 page, const LogPageHeader &h) {
    u8 raw[kSlotSize];
    h.encode(raw);
    dev_.store(page_base(page), {raw, kSlotSize});
    dev_.clwb(page_base(page), kSlotSize);
  }

  // A freshly allocated log page may be a recycled one whose durable bytes
  // still decode as valid entries; wipe it so unwritten slots stay invalid.
  void init_log_page(u32 page, const LogPageHeader &h) {
    std::array<u8, kPageSize> raw{};
    h.encode(raw.data());
    dev_.store(page_base(page), raw);
    dev_.clwb(page_base(page), kPageSize);
  }

  // Reserves `slots` contiguous slots in the inode's current log page,
  // chaining a fresh page when the current one cannot hold them.
  std::optional<PmemAddr> reserve_slots(Txn &t, u32 slots) {
    return reserve_slots_raw(t.rt_, &t, slots, /*allow_reserve=*/false);
  }

  std::optional<PmemAddr> reserve_slots_raw(InodeRt *rt, Txn *t, u32 slots, bool allow_reserve) {
    assert(slots >= 1 && slots <= kUsableSlots);
    u32 page = rt->cursor_page.load();
    u32 slot = rt->cursor_slot;
    if (slot + slots - 1 > kUsableSlots) {
      auto np = pool_.alloc(allow_reserve);
      if (!np) return std::nullopt;
      LogPageHeader h;
      h.kind = PageKind::kInodeLog;
      h.owner_ino = rt->ino;
      init_log_page(*np, h);
      dev_.store_u32(page_base(page) + kHeaderNextPageOff, *np);
      dev_.clwb(page_base(page) + kHeaderNextPageOff, 4);
      if (t) t->new_log_pages_.push_back(*np);
      rt->cursor_page.store(*np);
      rt->cursor_slot = 1;
      page = *np;
      slot = 1;
    }
    rt->cursor_slot = slot + slots;
    dev_.store_u32(page_base(page) + kHeaderSlotCountOff, rt->cursor_slot - 1);
    dev_.clwb(page_base(page) + kHeaderSlotCountOff, 4);
    return slot_addr(page, slot);
  }

  void finish_entry(Txn &t, PmemAddr at, std::optional<u64> file_page, u64 payload_bytes) {
    t.last_entry_ = at;
    t.entry_count_++;
    if (file_page) t.touched_file_pages_.push_back(*file_page);
    t.rt_->next_pos++;
    metrics_.entries_appended.fetch_add(1, std::memory_order_relaxed);
    if (payload_bytes)
      metrics_.payload_bytes_logged.fetch_add(payload_bytes, std::memory_order_relaxed);
  }

  PmemDevice &dev_;
  const EngineConfig &cfg_;
  Metrics &metrics_;
  PagePool pool_;
  mutable std::mutex super_mu_;
  std::vector<u32> super_pages_{};
  u32 super_used_ = 0;
  std::unordered_map<u64, std::unique_ptr<InodeRt>> inodes_;
};

}  // namespace nvlog
