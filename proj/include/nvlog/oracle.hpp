// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>

#include "nvlog/disk.hpp"
#include "nvlog/trace.hpp"

namespace nvlog {

// Brute-force reference model. Consumes the engine's event trace — nothing
// else — and predicts, per file page, the set of legal post-crash recovered
// contents: the last durable disk checkpoint overlaid with the unexpired
// committed sync events in order. Items whose commit store was issued but
// not yet fenced yield one extra admissible image (all-or-nothing per item).
class OracleModel {
public:
  explicit OracleModel(bool eadr = false) : eadr_(eadr) {}

  using PageKey = std::pair<u64, u64>;  // (ino, page_no)
  using PageBytes = std::array<u8, kPageSize>;

  struct GlobalImage {
    std::map<PageKey, PageBytes> pages;
  };

  struct Prediction {
    std::vector<GlobalImage> admissible;
  };

  void apply(const TraceEvent &ev) {
    switch (ev.kind) {
      case TraceEvent::Kind::kWrite: {
        apply_program_write(ev.ino, ev.offset, ev.data);
        break;
      }
      case TraceEvent::Kind::kSyncPrepare: {
        if (pending_txn_)
          throw IoError("trace out of order: overlapping sync transactions");
        PendingTxn t;
        t.ino = ev.ino;
        t.tid = ev.tid;
        for (const auto &s : ev.segs) slice_segment(ev.ino, s.offset, s.len, t.slices);
        pending_txn_ = std::move(t);
        break;
      }
      case TraceEvent::Kind::kSyncCommitIssued: {
        if (!pending_txn_ || pending_txn_->ino != ev.ino || pending_txn_->tid != ev.tid)
          throw IoError("trace out of order: commit without matching prepare");
        pending_txn_->issued = true;
        if (eadr_) finalize_txn();
        break;
      }
      case TraceEvent::Kind::kWbDurable: {
        checkpoint_[{ev.ino, ev.page_no}] = program_page(ev.ino, ev.page_no);
        break;
      }
      case TraceEvent::Kind::kRecordIssued: {
        if (pending_record_) throw IoError("trace out of order: overlapping records");
        pending_record_ = PendingRecord{ev.ino, ev.page_no, order_seq_, true};
        if (eadr_) finalize_record();
        break;
      }
      case TraceEvent::Kind::kFence: {
        if (ev.fence_seq <= last_fence_ && ev.fence_seq != 0)
          throw IoError("trace out of order: fence sequence regressed");
        last_fence_ = ev.fence_seq;
        if (pending_txn_ && pending_txn_->issued) finalize_txn();
        if (pending_record_ && pending_record_->issued) finalize_record();
        break;
      }
    }
  }

  // Pure function of the trace prefix consumed so far.
  Prediction predict() const {
    Prediction p;
    GlobalImage base = compute_image(false, false);
    p.admissible.push_back(base);
    bool txn_choice = pending_txn_ && pending_txn_->issued && !eadr_;
    bool rec_choice = pending_record_ && pending_record_->issued && !eadr_;
    if (txn_choice && rec_choice)
      throw IoError("oracle: simultaneous pending transaction and record (trace not serialized)");
    if (txn_choice) maybe_add(p, compute_image(true, false));
    if (rec_choice) maybe_add(p, compute_image(false, true));
    return p;
  }

  // Program-visible bytes (what the cache must serve). Used as the live
  // read-check by the harness.
  std::vector<u8> program_read(u64 ino, u64 offset, u64 len) const {
    std::vector<u8> out;
    auto fi = program_.find(ino);
    u64 size = fi == program_.end() ? 0 : fi->second.size;
    if (offset >= size) return out;
    len = std::min(len, size - offset);
    out.resize(len, 0);
    for (u64 pos = 0; pos < len;) {
      u64 off = offset + pos;
      u64 pno = off / kPageSize;
      u64 in_page = off % kPageSize;
      u64 take = std::min<u64>(kPageSize - in_page, len - pos);
      auto pi = fi->second.pages.find(pno);
      if (pi != fi->second.pages.end())
        std::memcpy(out.data() + pos, pi->second.data() + in_page, take);
      pos += take;
    }
    return out;
  }

  u64 program_size(u64 ino) const {
    auto fi = program_.find(ino);
    return fi == program_.end() ? 0 : fi->second.size;
  }

  // The transaction whose commit is issued but unfenced at this instant, if
  // any, with its total payload bytes: a crash image may expose it fully or
  // not at all, never partially.
  std::optional<std::pair<u64, u64>> pending_txn_bytes() const {
    if (!pending_txn_ || !pending_txn_->issued) return std::nullopt;
    u64 bytes = 0;
    for (auto &s : pending_txn_->slices) bytes += s.len;
    return std::make_pair(pending_txn_->tid, bytes);
  }

  u64 multiseg_txn_count() const { return multiseg_txns_; }

private:
  struct Slice {
    u64 pno;
    u64 in_page;
    u64 len;
    std::vector<u8> bytes;
    u64 tid = 0;
    u64 order = 0;
  };

  struct PendingTxn {
    u64 ino = 0;
    u64 tid = 0;
    std::vector<Slice> slices;
    bool issued = false;
  };

  struct PendingRecord {
    u64 ino = 0;
    u64 pno = 0;
    u64 cutoff = 0;  // committed orders at or below are expired
    bool issued = false;
  };

  struct ProgramFile {
    std::map<u64, PageBytes> pages;
    u64 size = 0;
  };

  void apply_program_write(u64 ino, u64 offset, const std::vector<u8> &data) {
    auto &f = program_[ino];
    u64 pos = 0;
    while (pos < data.size()) {
      u64 off = offset + pos;
      u64 pno = off / kPageSize;
      u64 in_page = off % kPageSize;
      u64 take = std::min<u64>(kPageSize - in_page, data.size() - pos);
      auto it = f.pages.find(pno);
      if (it == f.pages.end()) it = f.pages.emplace(pno, PageBytes{}).first;
      std::memcpy(it->second.data() + in_page, data.data() + pos, take);
      pos += take;
    }
    f.size = std::max(f.size, offset + data.size());
  }

  PageBytes program_page(u64 ino, u64 pno) const {
    auto fi = program_.find(ino);
    if (fi != program_.end()) {
      auto pi = fi->second.pages.find(pno);
      if (pi != fi->second.pages.end()) return pi->second;
    }
    return PageBytes{};
  }

  void slice_segment(u64 ino, u64 offset, u64 len, std::vector<Slice> &out) const {
    u64 pos = 0;
    while (pos < len) {
      u64 off = offset + pos;
      u64 pno = off / kPageSize;
      u64 in_page = off % kPageSize;
      u64 take = std::min<u64>(kPageSize - in_page, len - pos);
      Slice s;
      s.pno = pno;
      s.in_page = in_page;
      s.len = take;
      PageBytes pg = program_page(ino, pno);
      s.bytes.assign(pg.data() + in_page, pg.data() + in_page + take);
      out.push_back(std::move(s));
      pos += take;
    }
  }

  void finalize_txn() {
    if (pending_txn_->slices.size() > 1) multiseg_txns_++;
    for (auto &s : pending_txn_->slices) {
      Slice c = s;
      c.tid = pending_txn_->tid;
      c.order = ++order_seq_;
      committed_[{pending_txn_->ino, s.pno}].push_back(std::move(c));
    }
    pending_txn_.reset();
  }

  void finalize_record() {
    auto key = PageKey{pending_record_->ino, pending_record_->pno};
    auto it = committed_.find(key);
    if (it != committed_.end()) {
      auto &evs = it->second;
      evs.erase(std::remove_if(evs.begin(), evs.end(),
                               [&](const Slice &s) { return s.order <= pending_record_->cutoff; }),
                evs.end());
      if (evs.empty()) committed_.erase(it);
    }
    pending_record_.reset();
  }

  GlobalImage compute_image(bool with_pending_txn, bool with_pending_record) const {
    GlobalImage img;
    // pages that can possibly hold post-crash content
    std::map<PageKey, bool> keys;
    for (auto &[k, v] : checkpoint_) keys[k] = true;
    for (auto &[k, v] : committed_) keys[k] = true;
    if (with_pending_txn)
      for (auto &s : pending_txn_->slices) keys[{pending_txn_->ino, s.pno}] = true;
    for (auto &[key, unused] : keys) {
      PageBytes page{};
      auto ci = checkpoint_.find(key);
      if (ci != checkpoint_.end()) page = ci->second;
      auto ei = committed_.find(key);
      if (ei != committed_.end()) {
        for (const Slice &s : ei->second) {
          if (with_pending_record && key.first == pending_record_->ino &&
              key.second == pending_record_->pno && s.order <= pending_record_->cutoff)
            continue;
          std::memcpy(page.data() + s.in_page, s.bytes.data(), s.len);
        }
      }
      if (with_pending_txn && key.first == pending_txn_->ino) {
        for (const Slice &s : pending_txn_->slices)
          if (s.pno == key.second)
            std::memcpy(page.data() + s.in_page, s.bytes.data(), s.len);
      }
      img.pages[key] = page;
    }
    return img;
  }

  static void maybe_add(Prediction &p, GlobalImage img) {
    for (auto &have : p.admissible)
      if (have.pages == img.pages) return;
    p.admissible.push_back(std::move(img));
  }

  bool eadr_;
  std::map<u64, ProgramFile> program_;
  std::map<PageKey, PageBytes> checkpoint_;
  std::map<PageKey, std::vector<Slice>> committed_;
  std::optional<PendingTxn> pending_txn_;
  std::optional<PendingRecord> pending_record_;
  u64 order_seq_ = 0;
  u64 last_fence_ = 0;
  u64 multiseg_txns_ = 0;
};

struct VerifyDiff {
  u64 ino = 0;
  u64 page_no = 0;
  u64 first_mismatch = 0;
  std::string detail;
};

// Byte-compares every file page of the recovered disk against the oracle's
// admissible images; absent pages are all-zeros on both sides.
inline std::optional<VerifyDiff> verify_against(const DiskBackend &disk,
                                                const OracleModel::Prediction &pred) {
  std::map<OracleModel::PageKey, bool> keys;
  for (auto &img : pred.admissible)
    for (auto &[k, v] : img.pages) keys[k] = true;
  for (u64 ino : disk.inos())
    for (u64 p : disk.pages_of(ino)) keys[{ino, p}] = true;

  VerifyDiff first_diff;
  bool have_diff = false;
  for (auto &img : pred.admissible) {
    bool all_ok = true;
    for (auto &[key, unused] : keys) {
      OracleModel::PageBytes want{};
      auto wi = img.pages.find(key);
      if (wi != img.pages.end()) want = wi->second;
      OracleModel::PageBytes got{};
      disk.read_page(key.first, key.second, {got.data(), kPageSize});
      if (want != got) {
        all_ok = false;
        if (!have_diff) {
          have_diff = true;
          first_diff.ino = key.first;
          first_diff.page_no = key.second;
          u64 i = 0;
          while (i < kPageSize && want[i] == got[i]) i++;
          first_diff.first_mismatch = i;
          char buf[96];
          std::snprintf(buf, sizeof(buf), "byte %llu: want 0x%02x got 0x%02x",
                        static_cast<unsigned long long>(i), want[i], got[i]);
          first_diff.detail = buf;
        }
        break;
      }
    }
    if (all_ok) return std::nullopt;
  }
  return first_diff;
}

}  // namespace nvlog
