// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <sstream>

#include "nvlog/common.hpp"

namespace nvlog {

// Externally observable event stream emitted by the engine. Newline-
// delimited text records; see docs/format.md for the schema. The oracle
// consumes exactly this stream and nothing else.
struct TraceSeg {
  u64 offset = 0;
  u64 len = 0;
};

struct TraceEvent {
  enum class Kind {
    kWrite,            // program write into the cache
    kSyncPrepare,      // transaction segments appended and flushed
    kSyncCommitIssued, // committed_log_tail store issued (durable at next fence)
    kWbDurable,        // disk page checkpoint durably written
    kRecordIssued,     // write-back record store issued (durable at next fence)
    kFence,            // store fence retired
  };

  Kind kind = Kind::kFence;
  u64 ino = 0;
  u64 tid = 0;
  u64 offset = 0;
  u64 page_no = 0;
  u64 fence_seq = 0;
  std::vector<u8> data;        // kWrite payload
  std::vector<TraceSeg> segs;  // kSyncPrepare segments

  std::string to_line() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::kWrite:
        os << "write ino=" << ino << " off=" << offset << " len=" << data.size() << " data=";
        for (u8 b : data) {
          static const char *hex = "0123456789abcdef";
          os << hex[b >> 4] << hex[b & 0xf];
        }
        break;
      case Kind::kSyncPrepare: {
        os << "prepare ino=" << ino << " tid=" << tid << " segs=";
        for (size_t i = 0; i < segs.size(); i++) {
          if (i) os << ",";
          os << segs[i].offset << ":" << segs[i].len;
        }
        break;
      }
      case Kind::kSyncCommitIssued:
        os << "commit ino=" << ino << " tid=" << tid;
        break;
      case Kind::kWbDurable:
        os << "wb_durable ino=" << ino << " page=" << page_no;
        break;
      case Kind::kRecordIssued:
        os << "record ino=" << ino << " page=" << page_no << " tid=" << tid;
        break;
      case Kind::kFence:
        os << "fence seq=" << fence_seq;
        break;
    }
    return os.str();
  }

  static TraceEvent from_line(const std::string &line) {
    std::istringstream is(line);
    std::string word;
    is >> word;
    TraceEvent ev;
    auto field = [&](const std::string &tok, const char *name) -> std::string {
      auto eq = tok.find('=');
      if (eq == std::string::npos || tok.substr(0, eq) != name)
        throw IoError("bad trace field, expected " + std::string(name) + ": " + line);
      return tok.substr(eq + 1);
    };
    std::string tok;
    if (word == "write") {
      ev.kind = Kind::kWrite;
      is >> tok;
      ev.ino = std::stoull(field(tok, "ino"));
      is >> tok;
      ev.offset = std::stoull(field(tok, "off"));
      is >> tok;
      u64 len = std::stoull(field(tok, "len"));
      is >> tok;
      std::string hex = field(tok, "data");
      if (hex.size() != len * 2) throw IoError("trace data length mismatch: " + line);
      ev.data.resize(len);
      auto nib = [](char c) -> u8 {
        if (c >= '0' && c <= '9') return u8(c - '0');
        if (c >= 'a' && c <= 'f') return u8(c - 'a' + 10);
        throw IoError("bad hex digit in trace");
      };
      for (u64 i = 0; i < len; i++) ev.data[i] = u8(nib(hex[2 * i]) << 4 | nib(hex[2 * i + 1]));
    } else if (word == "prepare") {
      ev.kind = Kind::kSyncPrepare;
      is >> tok;
      ev.ino = std::stoull(field(tok, "ino"));
      is >> tok;
      ev.tid = std::stoull(field(tok, "tid"));
      is >> tok;
      std::string segs = field(tok, "segs");
      std::istringstream ss(segs);
      std::string part;
      while (std::getline(ss, part, ',')) {
        auto colon = part.find(':');
        if (colon == std::string::npos) throw IoError("bad trace segment: " + line);
        ev.segs.push_back({std::stoull(part.substr(0, colon)), std::stoull(part.substr(colon + 1))});
      }
    } else if (word == "commit") {
      ev.kind = Kind::kSyncCommitIssued;
      is >> tok;
      ev.ino = std::stoull(field(tok, "ino"));
      is >> tok;
      ev.tid = std::stoull(field(tok, "tid"));
    } else if (word == "wb_durable") {
      ev.kind = Kind::kWbDurable;
      is >> tok;
      ev.ino = std::stoull(field(tok, "ino"));
      is >> tok;
      ev.page_no = std::stoull(field(tok, "page"));
    } else if (word == "record") {
      ev.kind = Kind::kRecordIssued;
      is >> tok;
      ev.ino = std::stoull(field(tok, "ino"));
      is >> tok;
      ev.page_no = std::stoull(field(tok, "page"));
      is >> tok;
      ev.tid = std::stoull(field(tok, "tid"));
    } else if (word == "fence") {
      ev.kind = Kind::kFence;
      is >> tok;
      ev.fence_seq = std::stoull(field(tok, "seq"));
    } else {
      throw IoError("unknown trace event: " + line);
    }
    return ev;
  }
};

using TraceSink = std::function<void(const TraceEvent &)>;

}  // namespace nvlog
