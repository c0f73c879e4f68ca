// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <unordered_set>

#include "nvlog/common.hpp"

// On-media layout. Everything is little-endian, 64-byte slots inside 4KB
// pages, page 0 is the super log head. See docs/format.md.

namespace nvlog {

constexpr u32 kSuperLogHeadPage = 0;
constexpr u32 kMagic = 0x474c564e;  // "NVLG"
constexpr u64 kMaxIpPayload = 32 + u64(kUsableSlots - 1) * kSlotSize;  // 4000

enum class PageKind : u32 { kFree = 0, kSuperLog = 1, kInodeLog = 2 };

enum class EntryKind : u16 { kWrite = 0, kMetadata = 1, kWritebackRecord = 2 };

constexpr u16 kFlagValid = 0x1;
constexpr u16 flag_for(EntryKind k) { return u16(kFlagValid | (u16(k) << 1)); }

// Slot 0 of every log page.
// next_page @0..3 (0 = end of chain), kind @4..7, owner_ino @8..15,
// slot_count @16..19, magic @20..23.
struct LogPageHeader {
  u32 next_page = 0;
  PageKind kind = PageKind::kFree;
  u64 owner_ino = 0;
  u32 slot_count = 0;
  u32 magic = kMagic;

  void encode(u8 *slot) const {
    std::memset(slot, 0, kSlotSize);
    store_le32(slot, next_page);
    store_le32(slot + 4, u32(kind));
    store_le64(slot + 8, owner_ino);
    store_le32(slot + 16, slot_count);
    store_le32(slot + 20, magic);
  }

  static LogPageHeader decode(const u8 *slot) {
    LogPageHeader h;
    h.next_page = load_le32(slot);
    h.kind = PageKind(load_le32(slot + 4));
    h.owner_ino = load_le64(slot + 8);
    h.slot_count = load_le32(slot + 16);
    h.magic = load_le32(slot + 20);
    return h;
  }
};

constexpr u64 kHeaderNextPageOff = 0;
constexpr u64 kHeaderSlotCountOff = 16;

// Super log entry: one per accelerated inode.
// s_dev @0..7, i_ino @8..15, head_log_page @16..19, committed_log_tail @24..31.
struct SuperLogEntry {
  u64 s_dev = 0;
  u64 i_ino = 0;
  u32 head_log_page = 0;
  PmemAddr committed_log_tail = 0;  // 0 = no committed entry yet

  void encode(u8 *slot) const {
    std::memset(slot, 0, kSlotSize);
    store_le64(slot, s_dev);
    store_le64(slot + 8, i_ino);
    store_le32(slot + 16, head_log_page);
    store_le64(slot + 24, committed_log_tail);
  }

  static SuperLogEntry decode(const u8 *slot) {
    SuperLogEntry e;
    e.s_dev = load_le64(slot);
    e.i_ino = load_le64(slot + 8);
    e.head_log_page = load_le32(slot + 16);
    e.committed_log_tail = load_le64(slot + 24);
    return e;
  }
};

constexpr u64 kSuperHeadPageOff = 16;
constexpr u64 kSuperTailOff = 24;

// Inode log entry. flag @0..1, data_len @2..3, page_index @4..7,
// file_offset @8..15, last_write @16..23, tid @24..31, inline zone @32..63.
// page_index == 0 means the entry is in-place (payload in the inline zone
// plus continuation slots); otherwise it names the OOP data page.
struct InodeLogEntry {
  u16 flag = 0;
  u16 data_len = 0;
  u32 page_index = 0;
  u64 file_offset = 0;
  PmemAddr last_write = 0;
  u64 tid = 0;
  std::array<u8, 32> inline_zone{};

  bool valid() const { return flag & kFlagValid; }
  EntryKind kind() const { return EntryKind((flag >> 1) & 0x3); }
  bool is_ip() const { return kind() == EntryKind::kWrite && page_index == 0; }
  bool is_oop() const { return kind() == EntryKind::kWrite && page_index != 0; }
  u64 file_page() const { return file_offset / kPageSize; }

  // Continuation slots carrying raw payload after the entry slot.
  u32 continuation_slots() const {
    if (!is_ip() || data_len <= 32) return 0;
    return u32((u64(data_len) - 32 + kSlotSize - 1) / kSlotSize);
  }
  u32 total_slots() const { return 1 + continuation_slots(); }

  void encode(u8 *slot) const {
    std::memset(slot, 0, kSlotSize);
    store_le16(slot, flag);
    store_le16(slot + 2, data_len);
    store_le32(slot + 4, page_index);
    store_le64(slot + 8, file_offset);
    store_le64(slot + 16, last_write);
    store_le64(slot + 24, tid);
    std::memcpy(slot + 32, inline_zone.data(), 32);
  }

  static InodeLogEntry decode(const u8 *slot) {
    InodeLogEntry e;
    e.flag = load_le16(slot);
    e.data_len = load_le16(slot + 2);
    e.page_index = load_le32(slot + 4);
    e.file_offset = load_le64(slot + 8);
    e.last_write = load_le64(slot + 16);
    e.tid = load_le64(slot + 24);
    std::memcpy(e.inline_zone.data(), slot + 32, 32);
    return e;
  }
};

constexpr u64 kEntryFlagOff = 0;
constexpr u64 kEntryLastWriteOff = 16;

// Packed into the inline zone of a metadata entry.
struct MetadataPayload {
  u64 new_size = 0;
  u64 mtime_ns = 0;
  u64 ctime_ns = 0;

  void encode(u8 *zone32) const {
    store_le64(zone32, new_size);
    store_le64(zone32 + 8, mtime_ns);
    store_le64(zone32 + 16, ctime_ns);
  }
  static MetadataPayload decode(const u8 *zone32) {
    return {load_le64(zone32), load_le64(zone32 + 8), load_le64(zone32 + 16)};
  }
};

constexpr u16 kMetadataPayloadLen = 24;

// Shared decoding over any MemView; used by recovery, GC, stats and dump-log.
class LogReader {
public:
  explicit LogReader(const MemView &view) : view_(view) {}

  const MemView &view() const { return view_; }

  LogPageHeader header(u32 page) const {
    u8 raw[kSlotSize];
    view_.read(page_base(page), {raw, kSlotSize});
    return LogPageHeader::decode(raw);
  }

  InodeLogEntry entry_at(PmemAddr addr) const {
    u8 raw[kSlotSize];
    view_.read(addr, {raw, kSlotSize});
    return InodeLogEntry::decode(raw);
  }

  SuperLogEntry super_entry_at(PmemAddr addr) const {
    u8 raw[kSlotSize];
    view_.read(addr, {raw, kSlotSize});
    return SuperLogEntry::decode(raw);
  }

  // IP payload: inline zone plus continuation slots.
  std::vector<u8> ip_payload(PmemAddr entry_addr, const InodeLogEntry &e) const {
    std::vector<u8> out(e.data_len);
    u64 n = std::min<u64>(e.data_len, 32);
    std::memcpy(out.data(), e.inline_zone.data(), n);
    u64 got = n;
    u32 cont = e.continuation_slots();
    for (u32 i = 1; i <= cont && got < e.data_len; i++) {
      u8 raw[kSlotSize];
      view_.read(entry_addr + u64(i) * kSlotSize, {raw, kSlotSize});
      u64 take = std::min<u64>(kSlotSize, e.data_len - got);
      std::memcpy(out.data() + got, raw, take);
      got += take;
    }
    return out;
  }

  void data_page(u32 page, MutByteSpan out4096) const {
    view_.read(page_base(page), out4096);
  }

  // Walks the super log chain from page 0 and returns every published entry.
  // Super log pages gate entry validity on the fenced slot_count.
  struct SuperItem {
    PmemAddr addr;
    SuperLogEntry entry;
  };
  std::vector<SuperItem> super_entries() const {
    std::vector<SuperItem> out;
    std::unordered_set<u32> seen;
    u32 page = kSuperLogHeadPage;
    while (true) {
      if (!seen.insert(page).second) throw CorruptImage("super log chain contains a cycle");
      LogPageHeader h = header(page);
      if (h.magic != kMagic || h.kind != PageKind::kSuperLog)
        throw CorruptImage("bad super log page header at page " + std::to_string(page));
      u32 n = std::min(h.slot_count, kUsableSlots);
      for (u32 s = 1; s <= n; s++) {
        PmemAddr a = slot_addr(page, s);
        out.push_back({a, super_entry_at(a)});
      }
      if (h.next_page == 0) break;
      if (h.next_page >= view_.size_bytes() / kPageSize)
        throw CorruptImage("super log next_page out of range");
      page = h.next_page;
    }
    return out;
  }

  std::vector<u32> super_pages() const {
    std::vector<u32> pages;
    std::unordered_set<u32> seen;
    u32 page = kSuperLogHeadPage;
    while (true) {
      if (!seen.insert(page).second) throw CorruptImage("super log chain contains a cycle");
      pages.push_back(page);
      LogPageHeader h = header(page);
      if (h.next_page == 0) break;
      page = h.next_page;
    }
    return pages;
  }

  struct CommittedSlot {
    PmemAddr addr;
    u32 chain_pos;  // index of the page within the chain
    InodeLogEntry entry;
  };

  // Decodes the committed region of an inode log: slots from the head chain
  // up to and including `tail`. Invalid slots are skipped (aborted appends,
  // unfilled record claims, GC-invalidated entries). Continuation slots are
  // consumed by their entry. Throws CorruptImage if the tail is unreachable.
  std::vector<CommittedSlot> committed_slots(u32 head_page, PmemAddr tail) const {
    std::vector<CommittedSlot> out;
    if (tail == 0) return out;
    u32 tail_page = page_of(tail);
    u32 tail_slot = slot_of(tail);
    std::unordered_set<u32> seen;
    u32 page = head_page;
    u32 pos = 0;
    while (true) {
      if (page == 0 || page >= view_.size_bytes() / kPageSize)
        throw CorruptImage("inode log chain reaches invalid page " + std::to_string(page));
      if (!seen.insert(page).second) throw CorruptImage("inode log chain contains a cycle");
      LogPageHeader h = header(page);
      if (h.magic != kMagic || h.kind != PageKind::kInodeLog)
        throw CorruptImage("bad inode log page header at page " + std::to_string(page));
      bool is_tail_page = (page == tail_page);
      u32 last = is_tail_page ? tail_slot : kUsableSlots;
      u32 s = 1;
      while (s <= last) {
        PmemAddr a = slot_addr(page, s);
        InodeLogEntry e = entry_at(a);
        if (!e.valid()) {
          s++;
          continue;
        }
        out.push_back({a, pos, e});
        s += e.total_slots();
      }
      if (is_tail_page) return out;
      if (h.next_page == 0)
        throw CorruptImage("committed_log_tail unreachable: chain ends at page " +
                           std::to_string(page));
      page = h.next_page;
      pos++;
    }
  }

  // Pages of the chain from head up to and including the tail's page. When
  // tail == 0 only the head page is trusted.
  std::vector<u32> committed_chain_pages(u32 head_page, PmemAddr tail) const {
    std::vector<u32> pages;
    std::unordered_set<u32> seen;
    u32 stop = (tail == 0) ? head_page : page_of(tail);
    u32 page = head_page;
    while (true) {
      if (!seen.insert(page).second) throw CorruptImage("inode log chain contains a cycle");
      pages.push_back(page);
      if (page == stop) return pages;
      LogPageHeader h = header(page);
      if (h.next_page == 0)
        throw CorruptImage("inode log chain ends before committed tail page");
      page = h.next_page;
    }
  }

private:
  const MemView &view_;
};

}  // namespace nvlog
