// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <iostream>

#include "nvlog/bench.hpp"
#include "nvlog/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

using namespace nvlog;

namespace {

EngineConfig load_config(const std::string &config_path,
                         const std::vector<std::string> &overrides, bool bench_mode) {
  EngineConfig cfg = bench_mode ? EngineConfig::bench_defaults() : EngineConfig{};
  if (!config_path.empty()) {
    EngineConfig from = EngineConfig::from_file(config_path);
    cfg = from;
  }
  for (const auto &kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw IoError("--set expects key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

int cmd_init(const std::string &nvm_path, u32 size_pages, const std::string &disk_dir,
             bool force, const std::string &mode) {
  if (std::filesystem::exists(nvm_path) && !force)
    throw IoError("image exists (use --force to overwrite): " + nvm_path);
  EngineConfig cfg;
  cfg.nvm_size_pages = size_pages;
  cfg.set("pmem_mode", mode);
  Metrics metrics;
  PmemDevice dev(size_pages, cfg.pmem_mode, &metrics);
  LogStore log(dev, cfg, metrics);
  log.format_fresh();
  dev.drain_all();
  dev.save_image(nvm_path);
  std::filesystem::create_directories(disk_dir);
  std::cout << "initialized " << nvm_path << " (" << size_pages << " pages, "
            << size_pages * kPageSize << " bytes), disk dir " << disk_dir << "\n";
  return 0;
}

int cmd_recover(const std::string &nvm_path, const std::string &disk_dir, bool as_json) {
  OwnedImageView img(PmemDevice::load_image(nvm_path));
  FileDisk disk(disk_dir);
  auto res = recover(img, disk);
  if (as_json)
    std::cout << res.report.to_json().dump(2) << "\n";
  else
    std::cout << res.report.to_text() << "\n";
  if (std::getenv("NVLOG_VERBOSE") && std::atoi(std::getenv("NVLOG_VERBOSE")) > 0) {
    for (auto &ri : res.rebuild.inodes)
      std::cerr << "  ino " << ri.ino << ": head_page " << ri.head_page << " tail "
                << ri.tail << " replay_extent " << ri.replay_extent << "\n";
  }
  return 0;
}

int cmd_gc_stats(const std::string &nvm_path, bool as_json) {
  OwnedImageView img(PmemDevice::load_image(nvm_path));
  MemDisk scratch;
  OverlayDisk od(scratch);
  auto res = recover(img, od);  // reachability scan without touching anything real
  u64 capacity = img.size_bytes() / kPageSize;

  LogReader reader(img);
  u64 entries = 0, records = 0, obsolete = 0;
  for (auto &[addr, se] : reader.super_entries()) {
    auto slots = reader.committed_slots(se.head_log_page, se.committed_log_tail);
    std::map<u64, size_t> last_boundary;
    for (size_t i = 0; i < slots.size(); i++) {
      const auto &e = slots[i].entry;
      entries++;
      if (e.kind() == EntryKind::kWritebackRecord) {
        records++;
        last_boundary[e.file_page()] = i;
      } else if (e.is_oop()) {
        last_boundary[e.file_page()] = i;
      }
    }
    for (size_t i = 0; i < slots.size(); i++) {
      const auto &e = slots[i].entry;
      if (e.kind() != EntryKind::kWrite) continue;
      auto it = last_boundary.find(e.file_page());
      if (it != last_boundary.end() && i < it->second) obsolete++;
    }
  }

  if (as_json) {
    nlohmann::json j{{"nvm_pages_in_use", res.report.live_pages},
                     {"nvm_pages_free", res.report.free_pages},
                     {"capacity_pages", capacity},
                     {"committed_entries", entries},
                     {"writeback_records", records},
                     {"obsolete_entries", obsolete}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "nvm_pages_in_use=" << res.report.live_pages
              << " free=" << res.report.free_pages << " capacity=" << capacity
              << " committed_entries=" << entries << " records=" << records
              << " obsolete_entries=" << obsolete << "\n";
  }
  return 0;
}

const char *kind_name(EntryKind k) {
  switch (k) {
    case EntryKind::kWrite: return "write";
    case EntryKind::kMetadata: return "meta";
    case EntryKind::kWritebackRecord: return "wbrec";
  }
  return "?";
}

int cmd_dump_log(const std::string &nvm_path, std::optional<u64> ino_filter) {
  OwnedImageView img(PmemDevice::load_image(nvm_path));
  LogReader reader(img);
  auto supers = reader.super_entries();
  std::cout << "super log: " << supers.size() << " entries\n";
  for (auto &[addr, se] : supers) {
    if (ino_filter && se.i_ino != *ino_filter) continue;
    std::cout << "inode " << se.i_ino << " (dev " << se.s_dev << "): head_page "
              << se.head_log_page << " committed_tail ";
    if (se.committed_log_tail == 0)
      std::cout << "(none)\n";
    else
      std::cout << page_of(se.committed_log_tail) << "." << slot_of(se.committed_log_tail)
                << "\n";
    u32 page = se.head_log_page;
    std::unordered_set<u32> seen;
    u32 tail_page = se.committed_log_tail ? page_of(se.committed_log_tail) : 0;
    while (page != 0 && seen.insert(page).second) {
      LogPageHeader h = reader.header(page);
      if (h.magic != kMagic) {
        std::cout << "  page " << page << ": bad magic, stopping\n";
        break;
      }
      std::cout << "  page " << page << " (slots " << h.slot_count << ", next " << h.next_page
                << ")\n";
      u32 s = 1;
      while (s <= std::min(h.slot_count, kUsableSlots)) {
        PmemAddr a = slot_addr(page, s);
        InodeLogEntry e = reader.entry_at(a);
        if (!e.valid()) {
          s++;
          continue;
        }
        bool committed = false;
        if (se.committed_log_tail != 0) {
          // committed iff at or before the tail in chain order; chain order
          // here is walk order
          committed = true;
          if (page == tail_page && s > slot_of(se.committed_log_tail)) committed = false;
        }
        std::cout << "    [" << page << "." << s << "] " << kind_name(e.kind())
                  << (e.is_oop() ? "/oop" : (e.is_ip() ? "/ip" : "")) << " tid=" << e.tid
                  << " off=" << e.file_offset << " len=" << e.data_len;
        if (e.is_oop()) std::cout << " data_page=" << e.page_index;
        std::cout << " last_write=" << e.last_write << (committed ? "" : " (uncommitted)")
                  << "\n";
        s += e.total_slots();
      }
      if (se.committed_log_tail != 0 && page == tail_page) break;
      page = h.next_page;
    }
  }
  return 0;
}

int cmd_bench(const EngineConfig &cfg, const std::string &nvm_path, const std::string &disk_dir,
              WorkloadSpec spec, const std::string &csv_path, u64 interval_ms) {
  std::unique_ptr<Engine> eng;
  if (!nvm_path.empty())
    eng = Engine::open_files(cfg, nvm_path, disk_dir);
  else
    eng = std::make_unique<Engine>(cfg);
  eng->start_background();

  std::ofstream csv_file;
  std::ostream *csv = nullptr;
  if (!csv_path.empty()) {
    csv_file.open(csv_path, std::ios::trunc);
    if (!csv_file) throw IoError("cannot open csv output: " + csv_path);
    csv = &csv_file;
  } else {
    csv = &std::cout;
  }

  auto res = run_bench(*eng, spec, interval_ms, csv);
  eng->stop_background();
  eng->quiesce();
  if (!nvm_path.empty()) eng->save_image();

  std::cerr << "bench: " << res.ops << " ops in " << res.seconds << " s (" << res.ops_per_sec()
            << " ops/s, " << res.write_bytes_per_sec() << " write B/s, reads=" << res.read_ops
            << " writes=" << res.write_ops << " syncs=" << res.sync_ops << ")\n";
  auto &m = eng->metrics();
  std::cerr << "cache: hits=" << m.cache_hits.load() << " misses=" << m.cache_misses.load()
            << " dirty=" << m.dirty_pages.load() << " absorbed=" << m.absorbed_pages.load()
            << "\n";
  std::cerr << "gc: passes=" << m.gc_passes.load()
            << " reclaimed_total=" << m.data_pages_freed.load() + m.log_pages_freed.load()
            << " fallback_seconds=" << double(m.fallback_ns.load()) / 1e9 << "\n";
  return 0;
}

int verbosity() {
  const char *v = std::getenv("NVLOG_VERBOSE");
  return v ? std::atoi(v) : 0;
}

int cmd_crashtest(u32 workloads, u64 seed, u32 ops, u32 random_images, const std::string &mutate,
                  bool fig4) {
  if (fig4) {
    auto res = run_expiry_scenario();
    std::cout << "expiry scenario: recovered=\"" << res.recovered << "\" without_expiry=\""
              << res.recovered_no_expiry << "\"\n";
    if (!res.ok()) {
      std::cerr << "error: expiry scenario did not behave as required\n";
      return 1;
    }
    std::cout << "ok\n";
    return 0;
  }
  HarnessParams proto;
  proto.ops = ops;
  proto.random_images = random_images;
  proto.mutate_drop_fences = (mutate == "drop-fence");
  if (verbosity() > 0)
    std::cerr << "crashtest: " << workloads << " workloads, seed " << seed << "\n";
  auto rep = run_crash_campaign(seed, workloads, proto);
  std::cout << "crashtest: workload_ops=" << rep.ops << " boundaries=" << rep.boundaries
            << " trials=" << rep.trials << " failures=" << rep.failures
            << " all_or_nothing_violations=" << rep.all_or_nothing_violations
            << " multiseg_txns=" << rep.multiseg_txns << " gc_passes=" << rep.gc_passes
            << " fallback_enters=" << rep.fallback_enters << "\n";
  if (proto.mutate_drop_fences) {
    if (rep.failures == 0) {
      std::cerr << "error: mutation run detected no failures; the oracle is not sensitive\n";
      return 1;
    }
    std::cout << "mutation detected as expected (" << rep.failures << " failing trials)\n";
    return 0;
  }
  if (!rep.ok()) {
    std::cerr << "error: " << rep.first_failure << "\n";
    return 1;
  }
  std::cout << "all trials verified against the oracle\n";
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"nvlog: NVM write-ahead log storage engine"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--set", overrides, "override a config key (key=value)");

  // init
  auto *init = app.add_subcommand("init", "create a zeroed NVM image and disk directory");
  init->fallthrough();
  std::string nvm_path, disk_dir, mode = "adr";
  u32 size_pages = 16384;
  bool force = false;
  init->add_option("--nvm", nvm_path, "image file path")->required();
  init->add_option("--size-pages", size_pages, "image size in 4KB pages");
  init->add_option("--disk", disk_dir, "disk backing directory")->required();
  init->add_option("--mode", mode, "adr|eadr");
  init->add_flag("--force", force, "overwrite an existing image");

  // bench
  auto *bench = app.add_subcommand("bench", "run a synthetic workload and emit CSV metrics");
  bench->fallthrough();
  std::string b_nvm, b_disk, rw_ratio = "0:10", csv_path, sync_mode = "osync", preset;
  WorkloadSpec spec;
  u64 interval_ms = 500;
  bench->add_option("--nvm", b_nvm, "image file (omit for in-memory)");
  bench->add_option("--disk", b_disk, "disk directory (with --nvm)");
  bench->add_option("--preset", preset, "canned workload: varmail (1:1 read/sync-write, small IO)");
  bench->add_option("--rw-ratio", rw_ratio, "reads:writes, e.g. 7:3");
  bench->add_option("--sync-pct", spec.sync_pct, "percent of writes synchronized");
  bench->add_option("--io-size", spec.io_size, "bytes per op");
  bench->add_flag("--random", spec.random_access, "random offsets (default sequential)");
  bench->add_option("--seed", spec.seed, "workload seed");
  bench->add_option("--threads", spec.threads, "worker threads, one file each");
  bench->add_option("--total-bytes", spec.total_bytes, "bytes written overall");
  bench->add_option("--file-size", spec.file_size, "per-thread file size");
  bench->add_option("--sync-mode", sync_mode, "osync|fsync");
  bench->add_option("--csv", csv_path, "CSV output path (default stdout)");
  bench->add_option("--interval-ms", interval_ms, "metrics cadence");

  // crashtest
  auto *crash = app.add_subcommand("crashtest", "randomized crash-injection campaign");
  crash->fallthrough();
  u32 workloads = 50, ct_ops = 0, random_images = 16;
  u64 ct_seed = 2026;
  std::string mutate = "none";
  bool fig4 = false;
  crash->add_option("--workloads", workloads, "number of workloads");
  crash->add_option("--seed", ct_seed, "campaign seed");
  crash->add_option("--ops", ct_ops, "ops per workload (0 = randomized)");
  crash->add_option("--random-images", random_images, "random crash images per boundary");
  crash->add_option("--mutate", mutate, "none|drop-fence (sensitivity check; must fail)");
  crash->add_flag("--expiry-scenario,--fig4", fig4, "run the canned write-back expiry scenario");

  // recover
  auto *rec = app.add_subcommand("recover", "replay an NVM image onto its disk directory");
  rec->fallthrough();
  std::string r_nvm, r_disk;
  bool r_json = false;
  rec->add_option("--nvm", r_nvm, "image file")->required();
  rec->add_option("--disk", r_disk, "disk directory")->required();
  rec->add_flag("--json", r_json, "JSON report");

  // gc-stats
  auto *gcs = app.add_subcommand("gc-stats", "offline NVM usage and log composition");
  gcs->fallthrough();
  std::string g_nvm;
  bool g_json = false;
  gcs->add_option("--nvm", g_nvm, "image file")->required();
  gcs->add_flag("--json", g_json, "JSON report");

  // dump-log
  auto *dump = app.add_subcommand("dump-log", "pretty-print the log structure of an image");
  dump->fallthrough();
  std::string d_nvm;
  std::optional<u64> d_ino;
  dump->add_option("--nvm", d_nvm, "image file")->required();
  dump->add_option("--ino", d_ino, "restrict to one inode");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) return cmd_init(nvm_path, size_pages, disk_dir, force, mode);
    if (*bench) {
      if (preset == "varmail") {
        rw_ratio = "1:1";
        spec.sync_pct = 100;
        spec.io_size = 2048;
        spec.random_access = true;
        sync_mode = "fsync";
      } else if (!preset.empty()) {
        throw IoError("unknown preset: " + preset);
      }
      auto [r, w] = WorkloadSpec::parse_ratio(rw_ratio);
      spec.read_parts = r;
      spec.write_parts = w;
      spec.use_osync = (sync_mode == "osync");
      if (sync_mode != "osync" && sync_mode != "fsync")
        throw IoError("bad --sync-mode: " + sync_mode);
      EngineConfig cfg = load_config(config_path, overrides, /*bench_mode=*/true);
      return cmd_bench(cfg, b_nvm, b_disk, spec, csv_path, interval_ms);
    }
    if (*crash) return cmd_crashtest(workloads, ct_seed, ct_ops, random_images, mutate, fig4);
    if (*rec) return cmd_recover(r_nvm, r_disk, r_json);
    if (*gcs) return cmd_gc_stats(g_nvm, g_json);
    if (*dump) return cmd_dump_log(d_nvm, d_ino);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
