// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>

#include "nvlog/pmem.hpp"

#include <json.hpp>

namespace nvlog {

struct DiskMeta {
  u64 size = 0;
  u64 mtime_ns = 0;
  u64 ctime_ns = 0;
  bool operator==(const DiskMeta &) const = default;
};

// Latency-simulated disk of 4096-byte pages plus a per-inode metadata
// sidecar. Page writes are atomic; a completed write is durable. Queued but
// incomplete write-backs simply never reach it.
class DiskBackend {
public:
  virtual ~DiskBackend() = default;

  // Returns false if the page has never been written (callers treat it as zeros).
  virtual bool read_page(u64 ino, u64 page_no, MutByteSpan out4096) const = 0;
  virtual void write_page(u64 ino, u64 page_no, ByteSpan bytes4096) = 0;
  virtual DiskMeta read_meta(u64 ino) const = 0;
  virtual void write_meta(u64 ino, const DiskMeta &meta) = 0;
  virtual std::vector<u64> inos() const = 0;
  virtual std::vector<u64> pages_of(u64 ino) const = 0;

  // Synchronous-caller page write: same atomic write, the sync latency.
  void write_page_sync(u64 ino, u64 page_no, ByteSpan bytes4096) {
    sync_write_ = true;
    try {
      write_page(ino, page_no, bytes4096);
    } catch (...) {
      sync_write_ = false;
      throw;
    }
    sync_write_ = false;
  }

  void set_write_latency_us(u64 us) { write_latency_us_ = us; }
  void set_sync_write_latency_us(u64 us) { sync_write_latency_us_ = us; }

  // Test hook: fail the next n page writes.
  void fail_next_writes(u32 n) { fail_writes_ = n; }

protected:
  void apply_latency() const {
    simulated_delay_ns((sync_write_ ? sync_write_latency_us_ : write_latency_us_) * 1000);
  }
  bool should_fail() {
    std::lock_guard lk(fault_mu_);
    if (fail_writes_ == 0) return false;
    fail_writes_--;
    return true;
  }

private:
  u64 write_latency_us_ = 0;
  u64 sync_write_latency_us_ = 0;
  bool sync_write_ = false;
  u32 fail_writes_ = 0;
  std::mutex fault_mu_;
};

class MemDisk : public DiskBackend {
public:
  bool read_page(u64 ino, u64 page_no, MutByteSpan out4096) const override {
    std::lock_guard lk(mu_);
    auto fi = files_.find(ino);
    if (fi == files_.end()) return false;
    auto pi = fi->second.pages.find(page_no);
    if (pi == fi->second.pages.end()) return false;
    std::memcpy(out4096.data(), pi->second.data(), kPageSize);
    return true;
  }

  void write_page(u64 ino, u64 page_no, ByteSpan bytes4096) override {
    if (should_fail()) throw IoError("injected disk write failure");
    apply_latency();
    std::lock_guard lk(mu_);
    auto &pg = files_[ino].pages[page_no];
    std::memcpy(pg.data(), bytes4096.data(), kPageSize);
  }

  DiskMeta read_meta(u64 ino) const override {
    std::lock_guard lk(mu_);
    auto fi = files_.find(ino);
    return fi == files_.end() ? DiskMeta{} : fi->second.meta;
  }

  void write_meta(u64 ino, const DiskMeta &meta) override {
    apply_latency();
    std::lock_guard lk(mu_);
    files_[ino].meta = meta;
  }

  std::vector<u64> inos() const override {
    std::lock_guard lk(mu_);
    std::vector<u64> out;
    for (auto &[ino, f] : files_) out.push_back(ino);
    return out;
  }

  std::vector<u64> pages_of(u64 ino) const override {
    std::lock_guard lk(mu_);
    std::vector<u64> out;
    auto fi = files_.find(ino);
    if (fi == files_.end()) return out;
    for (auto &[pno, pg] : fi->second.pages) out.push_back(pno);
    return out;
  }

private:
  struct File {
    std::map<u64, std::array<u8, kPageSize>> pages;
    DiskMeta meta;
  };
  std::map<u64, File> files_;
  mutable std::mutex mu_;
};

// Directory of per-inode page files ("<ino>.pages") plus JSON metadata
// sidecars ("<ino>.meta").
class FileDisk : public DiskBackend {
public:
  explicit FileDisk(std::string dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  bool read_page(u64 ino, u64 page_no, MutByteSpan out4096) const override {
    std::lock_guard lk(mu_);
    std::ifstream in(page_path(ino), std::ios::binary);
    if (!in) return false;
    in.seekg(std::streamoff(page_no * kPageSize));
    in.read(reinterpret_cast<char *>(out4096.data()), kPageSize);
    if (in.gcount() <= 0) return false;
    if (u64(in.gcount()) < kPageSize)
      std::memset(out4096.data() + in.gcount(), 0, kPageSize - in.gcount());
    return true;
  }

  void write_page(u64 ino, u64 page_no, ByteSpan bytes4096) override {
    if (should_fail()) throw IoError("injected disk write failure");
    apply_latency();
    std::lock_guard lk(mu_);
    auto path = page_path(ino);
    std::fstream out(path, std::ios::binary | std::ios::in | std::ios::out);
    if (!out) {
      out.open(path, std::ios::binary | std::ios::out);
      if (!out) throw IoError("cannot create disk page file: " + path);
      out.close();
      out.open(path, std::ios::binary | std::ios::in | std::ios::out);
    }
    u64 end = file_size(path);
    if (end < page_no * kPageSize) {
      // extend with zeros up to the page
      out.seekp(0, std::ios::end);
      std::vector<char> zeros(page_no * kPageSize - end, 0);
      out.write(zeros.data(), std::streamsize(zeros.size()));
    }
    out.seekp(std::streamoff(page_no * kPageSize));
    out.write(reinterpret_cast<const char *>(bytes4096.data()), kPageSize);
    if (!out) throw IoError("disk page write failed: " + path);
  }

  DiskMeta read_meta(u64 ino) const override {
    std::lock_guard lk(mu_);
    std::ifstream in(meta_path(ino));
    if (!in) return {};
    nlohmann::json j;
    in >> j;
    DiskMeta m;
    m.size = j.value("size", u64(0));
    m.mtime_ns = j.value("mtime_ns", u64(0));
    m.ctime_ns = j.value("ctime_ns", u64(0));
    return m;
  }

  void write_meta(u64 ino, const DiskMeta &meta) override {
    apply_latency();
    std::lock_guard lk(mu_);
    nlohmann::json j{{"size", meta.size}, {"mtime_ns", meta.mtime_ns}, {"ctime_ns", meta.ctime_ns}};
    std::ofstream out(meta_path(ino), std::ios::trunc);
    if (!out) throw IoError("cannot write meta sidecar for ino " + std::to_string(ino));
    out << j.dump(2) << "\n";
  }

  std::vector<u64> inos() const override {
    std::vector<u64> out;
    for (auto &e : std::filesystem::directory_iterator(dir_)) {
      auto name = e.path().filename().string();
      auto dot = name.find(".pages");
      if (dot == std::string::npos) continue;
      out.push_back(std::stoull(name.substr(0, dot)));
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<u64> pages_of(u64 ino) const override {
    std::vector<u64> out;
    std::error_code ec;
    u64 sz = std::filesystem::file_size(page_path(ino), ec);
    if (ec) return out;
    for (u64 p = 0; p < (sz + kPageSize - 1) / kPageSize; p++) out.push_back(p);
    return out;
  }

private:
  std::string page_path(u64 ino) const { return dir_ + "/" + std::to_string(ino) + ".pages"; }
  std::string meta_path(u64 ino) const { return dir_ + "/" + std::to_string(ino) + ".meta"; }
  static u64 file_size(const std::string &p) {
    std::error_code ec;
    auto s = std::filesystem::file_size(p, ec);
    return ec ? 0 : u64(s);
  }

  std::string dir_;
  mutable std::mutex mu_;
};

// Copy-on-write view for crash trials: reads fall through to the base,
// writes land in a private overlay. The base is never modified.
class OverlayDisk : public DiskBackend {
public:
  explicit OverlayDisk(const DiskBackend &base) : base_(base) {}

  bool read_page(u64 ino, u64 page_no, MutByteSpan out4096) const override {
    auto it = overlay_.find({ino, page_no});
    if (it != overlay_.end()) {
      std::memcpy(out4096.data(), it->second.data(), kPageSize);
      return true;
    }
    return base_.read_page(ino, page_no, out4096);
  }

  void write_page(u64 ino, u64 page_no, ByteSpan bytes4096) override {
    auto &pg = overlay_[{ino, page_no}];
    std::memcpy(pg.data(), bytes4096.data(), kPageSize);
  }

  DiskMeta read_meta(u64 ino) const override {
    auto it = meta_overlay_.find(ino);
    return it != meta_overlay_.end() ? it->second : base_.read_meta(ino);
  }

  void write_meta(u64 ino, const DiskMeta &meta) override { meta_overlay_[ino] = meta; }

  std::vector<u64> inos() const override {
    std::set<u64> all;
    for (u64 i : base_.inos()) all.insert(i);
    for (auto &[k, v] : overlay_) all.insert(k.first);
    for (auto &[k, v] : meta_overlay_) all.insert(k);
    return {all.begin(), all.end()};
  }

  std::vector<u64> pages_of(u64 ino) const override {
    std::set<u64> all;
    for (u64 p : base_.pages_of(ino)) all.insert(p);
    for (auto &[k, v] : overlay_)
      if (k.first == ino) all.insert(k.second);
    return {all.begin(), all.end()};
  }

private:
  const DiskBackend &base_;
  std::map<std::pair<u64, u64>, std::array<u8, kPageSize>> overlay_;
  std::map<u64, DiskMeta> meta_overlay_;
};

}  // namespace nvlog
