// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nvlog/engine.hpp"

using namespace nvlog;

#ifndef NVLOG_CLI_PATH
#define NVLOG_CLI_PATH "nvlog"
#endif

namespace {

struct CmdResult {
  int exit_code;
  std::string output;
};

CmdResult run_cli(const std::string &args) {
  std::string cmd = std::string(NVLOG_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf;
  std::string out;
  FILE *p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  while (fgets(buf.data(), int(buf.size()), p)) out += buf.data();
  int status = pclose(p);
  return {WEXITSTATUS(status), out};
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("nvlog_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string operator/(const std::string &name) const { return (path / name).string(); }
  static inline int counter = 0;
};

}  // namespace

TEST_CASE("cli: init creates a formatted image and dump-log reads it back") {
  TempDir tmp;
  auto img = tmp / "nvm.img";
  auto disk = tmp / "disk";
  auto r = run_cli("init --nvm " + img + " --size-pages 64 --disk " + disk);
  CHECK(r.exit_code == 0);
  CHECK(std::filesystem::file_size(img) == 64 * kPageSize);
  CHECK(std::filesystem::is_directory(disk));

  auto dump = run_cli("dump-log --nvm " + img);
  CHECK(dump.exit_code == 0);
  CHECK(dump.output.find("super log: 0 entries") != std::string::npos);

  // re-init without --force fails with a machine-parsable error line
  auto again = run_cli("init --nvm " + img + " --size-pages 64 --disk " + disk);
  CHECK(again.exit_code != 0);
  CHECK(again.output.find("error:") != std::string::npos);
  CHECK(run_cli("init --force --nvm " + img + " --size-pages 64 --disk " + disk).exit_code == 0);
}

TEST_CASE("cli: engine writes an image that recover and gc-stats can process") {
  TempDir tmp;
  auto img = tmp / "nvm.img";
  auto disk = tmp / "disk";
  REQUIRE(run_cli("init --nvm " + img + " --size-pages 128 --disk " + disk).exit_code == 0);
  {
    auto eng = Engine::open_files({}, img, disk);
    eng->set_o_sync(1, true);
    std::vector<u8> d(300, 0x3c);
    eng->write(1, 100, d);
    eng->save_image();
  }
  auto rec = run_cli("recover --nvm " + img + " --disk " + disk + " --json");
  CHECK(rec.exit_code == 0);
  CHECK(rec.output.find("\"entries_replayed\": 1") != std::string::npos);

  // the replayed bytes really are on the disk files now
  {
    FileDisk fd(disk);
    std::array<u8, kPageSize> pg{};
    REQUIRE(fd.read_page(1, 0, {pg.data(), kPageSize}));
    CHECK(pg[100] == 0x3c);
    CHECK(fd.read_meta(1).size == 400);
  }

  auto stats = run_cli("gc-stats --nvm " + img);
  CHECK(stats.exit_code == 0);
  CHECK(stats.output.find("nvm_pages_in_use=") != std::string::npos);

  auto dump = run_cli("dump-log --nvm " + img);
  CHECK(dump.exit_code == 0);
  CHECK(dump.output.find("inode 1") != std::string::npos);
  CHECK(dump.output.find("write/ip") != std::string::npos);
}

TEST_CASE("cli: recover on a clean image replays nothing") {
  TempDir tmp;
  auto img = tmp / "nvm.img";
  auto disk = tmp / "disk";
  REQUIRE(run_cli("init --nvm " + img + " --size-pages 64 --disk " + disk).exit_code == 0);
  auto rec = run_cli("recover --nvm " + img + " --disk " + disk);
  CHECK(rec.exit_code == 0);
  CHECK(rec.output.find("replayed_entries=0") != std::string::npos);
}

TEST_CASE("cli: errors exit nonzero with an error line") {
  auto r = run_cli("recover --nvm /nonexistent/x.img --disk /tmp/nowhere_disk");
  CHECK(r.exit_code != 0);
  CHECK(r.output.find("error:") != std::string::npos);
  auto r2 = run_cli("dump-log --nvm /nonexistent/x.img");
  CHECK(r2.exit_code != 0);
}

TEST_CASE("cli: bench emits stable CSV columns") {
  TempDir tmp;
  auto csv = tmp / "out.csv";
  auto r = run_cli(
      "bench --rw-ratio 5:5 --sync-pct 40 --io-size 1024 --threads 2 --total-bytes 262144 "
      "--file-size 131072 --seed 7 --random --csv " + csv +
      " --interval-ms 20 --set nvm_store_latency_ns=0 --set disk_latency_us=0 "
      "--set disk_sync_latency_us=0");
  CHECK(r.exit_code == 0);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "timestamp_sec,ops_per_sec,bytes_per_sec,nvm_pages_in_use,dirty_pages,fallback_active");
  CHECK(r.output.find("bench:") != std::string::npos);
}

TEST_CASE("cli: crashtest runs a small verified campaign") {
  auto r = run_cli("crashtest --workloads 4 --seed 99 --ops 25");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("all trials verified") != std::string::npos);
}

TEST_CASE("cli: crashtest expiry scenario prints the recovered string") {
  auto r = run_cli("crashtest --expiry-scenario");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("a31xyz") != std::string::npos);
}

TEST_CASE("cli: crashtest mutation mode must detect failures") {
  auto r = run_cli("crashtest --workloads 1 --seed 3 --ops 40 --mutate drop-fence");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("mutation detected") != std::string::npos);
}

TEST_CASE("cli: bench reproducibility, same seed same op counts") {
  auto args =
      "bench --rw-ratio 3:7 --sync-pct 60 --io-size 512 --threads 1 --total-bytes 131072 "
      "--file-size 65536 --seed 11 --random --csv /dev/null --set nvm_store_latency_ns=0 "
      "--set disk_latency_us=0 --set disk_sync_latency_us=0";
  auto a = run_cli(args), b = run_cli(args);
  auto ops_of = [](const std::string &out) {
    auto at = out.find("bench: ");
    REQUIRE(at != std::string::npos);
    return out.substr(at, out.find(" ops", at) - at);
  };
  CHECK(ops_of(a.output) == ops_of(b.output));
}
