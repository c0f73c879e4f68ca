// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#include "nvlog/harness.hpp"

#include <doctest.h>

using namespace nvlog;

TEST_CASE("harness: a small campaign verifies every boundary") {
  HarnessParams proto;
  proto.ops = 40;
  auto rep = run_crash_campaign(/*base_seed=*/77, /*workloads=*/18, proto);
  CHECK(rep.ok());
  CHECK(rep.boundaries > 0);
  CHECK(rep.trials > rep.boundaries);
  CHECK(rep.multiseg_txns > 0);
  CHECK(rep.gc_boundary_trials > 0);
  if (!rep.ok()) MESSAGE(rep.first_failure);
}

TEST_CASE("harness: eadr workloads verify too") {
  HarnessParams p;
  p.seed = 5150;
  p.ops = 50;
  p.sync_pct = 70;
  p.eadr = true;
  CrashHarness h(p);
  auto rep = h.run();
  CHECK(rep.ok());
  CHECK(rep.boundaries > 0);
  if (!rep.ok()) MESSAGE(rep.first_failure);
}

TEST_CASE("harness: dropping fences is detected (mutation sensitivity)") {
  HarnessParams p;
  p.seed = 31337;
  p.ops = 60;
  p.sync_pct = 80;
  p.mutate_drop_fences = true;
  CrashHarness h(p);
  auto rep = h.run();
  CHECK(rep.failures > 0);
}

TEST_CASE("harness: sync_pct 0 leaves the log empty") {
  HarnessParams p;
  p.seed = 9;
  p.ops = 40;
  p.sync_pct = 0;
  CrashHarness h(p);
  auto rep = h.run();
  CHECK(rep.ok());
  CHECK(h.engine().metrics().entries_appended.load() == 0);
}

TEST_CASE("harness: tiny NVM forces fallback and still verifies") {
  u64 fallbacks = 0;
  for (u32 w = 0; w < 6; w++) {
    HarnessParams p;
    p.seed = 1200 + w;
    p.files = 2;
    p.pages_per_file = 24;
    p.ops = 70;
    p.sync_pct = 90;
    p.nvm_pages = 36;
    p.p_gc = 0.10;
    CrashHarness h(p);
    auto rep = h.run();
    CHECK(rep.ok());
    if (!rep.ok()) MESSAGE(rep.first_failure);
    fallbacks += rep.fallback_enters;
  }
  CHECK(fallbacks > 0);
}

TEST_CASE("harness: expiry scenario matches the expected strings") {
  auto res = run_expiry_scenario();
  CHECK(res.recovered == "a31xyz");
  CHECK(res.recovered_no_expiry == "a31QQz");
  CHECK_FALSE(res.rollback_at_t7);
  CHECK(res.ok());
}

TEST_CASE("harness: identical seeds give identical outcomes") {
  auto run_once = [] {
    HarnessParams p;
    p.seed = 808;
    p.ops = 30;
    p.sync_pct = 60;
    CrashHarness h(p);
    auto rep = h.run();
    return std::make_tuple(rep.boundaries, rep.trials,
                           h.engine().metrics().entries_appended.load(),
                           h.engine().metrics().txns_committed.load());
  };
  CHECK(run_once() == run_once());
}
