// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>

#include "nvlog/engine.hpp"
#include "nvlog/oracle.hpp"

namespace nvlog {

// One randomized crash-injection workload: drives a deterministic op
// sequence against an engine, injects a crash at every fence boundary
// (drop-all-unfenced plus N random pending-line subsets), recovers each
// image into throwaway overlays and checks the result against the oracle.
struct HarnessParams {
  u64 seed = 1;
  u32 files = 4;
  u32 pages_per_file = 32;
  u32 ops = 60;
  u32 sync_pct = 60;
  u32 nvm_pages = 2048;
  bool eadr = false;
  u32 random_images = 16;
  double p_tick = 0.20;   // chance of a write-back tick after an op
  double p_gc = 0.08;     // chance of a gc pass after an op
  bool mutate_drop_fences = false;  // sensitivity check: must make trials fail
  u32 max_io = 8192;
};

struct HarnessReport {
  u64 ops = 0;
  u64 boundaries = 0;
  u64 trials = 0;
  u64 failures = 0;
  u64 all_or_nothing_violations = 0;
  u64 multiseg_txns = 0;
  u64 gc_passes = 0;
  u64 gc_boundary_trials = 0;
  u64 fallback_enters = 0;
  u64 live_check_failures = 0;
  std::string first_failure;

  bool ok() const {
    return failures == 0 && all_or_nothing_violations == 0 && live_check_failures == 0;
  }

  void merge(const HarnessReport &o) {
    ops += o.ops;
    boundaries += o.boundaries;
    trials += o.trials;
    failures += o.failures;
    all_or_nothing_violations += o.all_or_nothing_violations;
    multiseg_txns += o.multiseg_txns;
    gc_passes += o.gc_passes;
    gc_boundary_trials += o.gc_boundary_trials;
    fallback_enters += o.fallback_enters;
    live_check_failures += o.live_check_failures;
    if (first_failure.empty()) first_failure = o.first_failure;
  }
};

class CrashHarness {
public:
  explicit CrashHarness(const HarnessParams &p) : p_(p), rng_(p.seed) {
    EngineConfig cfg;
    cfg.nvm_size_pages = p.nvm_pages;
    cfg.pmem_mode = p.eadr ? PmemMode::kEadr : PmemMode::kAdr;
    cfg.record_reserve_pages = 2;
    eng_ = std::make_unique<Engine>(cfg);
    oracle_ = std::make_unique<OracleModel>(p.eadr);
    eng_->set_trace_sink([this](const TraceEvent &ev) { oracle_->apply(ev); });
    eng_->pmem().set_fence_hook([this] { on_boundary(); });
    if (p.mutate_drop_fences) eng_->pmem().set_drop_fences(true);
  }

  HarnessReport run() {
    for (u32 i = 0; i < p_.ops && !stop_early_; i++) {
      step();
      rep_.ops++;
      live_check();
      if (chance(p_.p_tick)) eng_->writeback_tick(1 + u32(rng_() % 4));
      if (chance(p_.p_gc)) {
        eng_->gc_pass();
        rep_.gc_passes++;
        u64 before = rep_.trials;
        on_boundary();  // crash immediately after the pass
        rep_.gc_boundary_trials += rep_.trials - before;
      }
    }
    on_boundary();  // terminal crash point
    rep_.fallback_enters = eng_->metrics().fallback_enters.load();
    rep_.multiseg_txns = oracle_->multiseg_txn_count();
    return rep_;
  }

  Engine &engine() { return *eng_; }

private:
  bool chance(double p) { return std::uniform_real_distribution<>(0, 1)(rng_) < p; }

  void step() {
    u64 ino = 1 + rng_() % p_.files;
    u64 span = u64(p_.pages_per_file) * kPageSize;
    u32 kind = u32(rng_() % 100);
    if (kind < 25) {
      u64 off = rng_() % span;
      u64 len = 1 + rng_() % 4096;
      std::vector<u8> buf(len);
      eng_->read(ino, off, buf);
      return;
    }
    if (kind < 30) {
      eng_->set_o_sync(ino, rng_() % 2 == 0);
      return;
    }
    // write, possibly synchronized
    u64 len = 1 + rng_() % p_.max_io;
    if (rng_() % 4 == 0) len = 1 + rng_() % 64;  // skew small
    u64 off = rng_() % (span - std::min(span - 1, len));
    std::vector<u8> data(len);
    for (auto &b : data) b = u8(rng_());
    bool synced = u32(rng_() % 100) < p_.sync_pct;
    if (!synced) {
      eng_->write(ino, off, data);
      return;
    }
    switch (rng_() % 3) {
      case 0: {  // O_SYNC write
        bool was = file_osync_[ino];
        eng_->set_o_sync(ino, true);
        eng_->write(ino, off, data);
        eng_->set_o_sync(ino, was);
        break;
      }
      case 1:
        eng_->write(ino, off, data);
        eng_->fsync(ino);
        break;
      default:
        eng_->write(ino, off, data);
        eng_->fdatasync(ino);
        break;
    }
  }

  void live_check() {
    // cache supremacy: a read returns the latest program write regardless of
    // sync/NVM/disk state
    u64 ino = 1 + rng_() % p_.files;
    u64 off = rng_() % (u64(p_.pages_per_file) * kPageSize);
    u64 len = 1 + rng_() % 512;
    std::vector<u8> got(len);
    u64 n = eng_->read(ino, off, got);
    auto want = oracle_->program_read(ino, off, len);
    if (n != want.size() || std::memcmp(got.data(), want.data(), n) != 0) {
      rep_.live_check_failures++;
      if (rep_.first_failure.empty())
        rep_.first_failure = "live read mismatch ino=" + std::to_string(ino) +
                             " off=" + std::to_string(off);
    }
  }

  void on_boundary() {
    if (in_trials_) return;
    in_trials_ = true;
    rep_.boundaries++;
    auto pred = oracle_->predict();
    auto pending_txn = oracle_->pending_txn_bytes();
    CrashImageSet set(eng_->pmem(), CrashPolicy::kRandomSubset, 0,
                      p_.seed * 1000003 + rep_.boundaries, p_.random_images);
    for (u64 i = 0; i <= set.count(); i++) {
      // trial 0 drops everything unfenced; the rest are random subsets
      CrashImageView img = (i == 0) ? CrashImageView(eng_->pmem(), {}) : set.image(i - 1);
      run_trial(img, pred, pending_txn);
      rep_.trials++;
      if (!rep_.first_failure.empty() && p_.mutate_drop_fences) break;  // one is enough
    }
    in_trials_ = false;
  }

  void run_trial(const MemView &img, const OracleModel::Prediction &pred,
                 const std::optional<std::pair<u64, u64>> &pending_txn) {
    OverlayDisk od(eng_->disk());
    RecoveryReport rr;
    try {
      rr = recover(img, od).report;
    } catch (const std::exception &e) {
      rep_.failures++;
      if (rep_.first_failure.empty())
        rep_.first_failure = std::string("recovery threw: ") + e.what();
      return;
    }
    auto diff = verify_against(od, pred);
    if (diff) {
      rep_.failures++;
      if (rep_.first_failure.empty())
        rep_.first_failure = "verify mismatch ino=" + std::to_string(diff->ino) +
                             " page=" + std::to_string(diff->page_no) + " " + diff->detail +
                             " at boundary " + std::to_string(rep_.boundaries);
    }
    // all-or-nothing at the decode level for the crash-window transaction
    if (pending_txn) {
      auto it = rr.committed_txn_bytes.find(pending_txn->first);
      if (it != rr.committed_txn_bytes.end() && it->second != pending_txn->second) {
        rep_.all_or_nothing_violations++;
        if (rep_.first_failure.empty())
          rep_.first_failure = "partial transaction tid=" + std::to_string(pending_txn->first);
      }
    }
  }

  HarnessParams p_;
  std::mt19937_64 rng_;
  std::unique_ptr<Engine> eng_;
  std::unique_ptr<OracleModel> oracle_;
  HarnessReport rep_;
  std::map<u64, bool> file_osync_;
  bool in_trials_ = false;
  bool stop_early_ = false;
};

// Canned consistency scenario: a page goes through sync write O1, async
// write O2, an async write-back (which appends the expiry record), then sync
// write O3, and crashes. Correct recovery replays only O3 onto the disk
// checkpoint; with expiry disabled the stale O1 bytes corrupt the page.
struct ExpiryScenarioResult {
  std::string recovered;           // first 6 bytes after normal recovery
  std::string recovered_no_expiry; // same bytes when records are ignored
  bool rollback_at_t7 = false;     // crash before O3 must keep the checkpoint
  bool ok() const {
    return recovered == "a31xyz" && recovered_no_expiry != "a31xyz" && !rollback_at_t7;
  }
};

inline ExpiryScenarioResult run_expiry_scenario() {
  EngineConfig cfg;
  cfg.nvm_size_pages = 64;
  Engine eng(cfg);
  auto put = [&](u64 off, const char *s) {
    eng.write(1, off, {reinterpret_cast<const u8 *>(s), std::strlen(s)});
  };
  put(0, "abcdef");            // V1 in cache
  eng.writeback_tick();        // V1 on disk, no record (no log yet)
  eng.set_o_sync(1, true);
  put(3, "QQ");                // O1, synchronized
  eng.set_o_sync(1, false);
  put(3, "xyz");               // O2, async -> cache holds V3 "abcxyz"

  ExpiryScenarioResult res;
  {
    // crash at t7: before the write-back. The disk still holds V1, the log
    // holds O1; replay must give "abcQQf", never roll back past O1.
    CrashImageView img(eng.pmem(), {});
    OverlayDisk od(eng.disk());
    recover(img, od);
    std::array<u8, kPageSize> pg{};
    od.read_page(1, 0, {pg.data(), kPageSize});
    res.rollback_at_t7 = std::memcmp(pg.data(), "abcQQf", 6) != 0;
  }

  eng.writeback_tick();        // V3 "abcxyz" on disk + record expiring O1
  eng.set_o_sync(1, true);
  put(1, "31");                // O3 -> cache "a31xyz", logged, not written back
  eng.set_o_sync(1, false);

  CrashImageView img(eng.pmem(), {});
  auto read6 = [&](const RecoveryOptions &opts) {
    OverlayDisk od(eng.disk());
    recover(img, od, opts);
    std::array<u8, kPageSize> pg{};
    od.read_page(1, 0, {pg.data(), kPageSize});
    return std::string(reinterpret_cast<char *>(pg.data()), 6);
  };
  res.recovered = read6({});
  RecoveryOptions no_expiry;
  no_expiry.expiry_enabled = false;
  res.recovered_no_expiry = read6(no_expiry);
  return res;
}

// Runs a batch of workloads cycling sync percentages, merging reports.
inline HarnessReport run_crash_campaign(u64 base_seed, u32 workloads,
                                        const HarnessParams &proto = {}) {
  HarnessReport total;
  static const u32 kSyncPcts[] = {0, 20, 40, 60, 80, 100};
  std::mt19937_64 meta(base_seed);
  for (u32 w = 0; w < workloads; w++) {
    HarnessParams p = proto;
    p.seed = base_seed + w * 7919;
    p.sync_pct = kSyncPcts[w % 6];
    p.files = 1 + u32(meta() % 8);
    p.pages_per_file = 1 + u32(meta() % 64);
    p.ops = proto.ops ? proto.ops : 30 + u32(meta() % 70);
    p.eadr = (w % 17 == 16);  // sprinkle some eADR runs in
    CrashHarness h(p);
    total.merge(h.run());
    if (!total.ok() && !proto.mutate_drop_fences) break;
  }
  return total;
}

}  // namespace nvlog
