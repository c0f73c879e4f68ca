// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvlog {

using u8 = uint8_t;
using u16 = uint16_t;
using u32 = uint32_t;
using u64 = uint64_t;

// Absolute byte address inside the NVM device.
using PmemAddr = u64;

constexpr u64 kPageSize = 4096;
constexpr u64 kCacheline = 64;
constexpr u64 kSlotSize = 64;
constexpr u32 kSlotsPerPage = 64;   // slot 0 is the page header
constexpr u32 kUsableSlots = kSlotsPerPage - 1;

constexpr u64 page_base(u32 page_index) { return u64(page_index) * kPageSize; }
constexpr u32 page_of(PmemAddr a) { return u32(a / kPageSize); }
constexpr u32 slot_of(PmemAddr a) { return u32((a % kPageSize) / kSlotSize); }
constexpr PmemAddr slot_addr(u32 page_index, u32 slot) {
  return page_base(page_index) + u64(slot) * kSlotSize;
}
constexpr u64 line_of(PmemAddr a) { return a & ~(kCacheline - 1); }

using ByteSpan = std::span<const u8>;
using MutByteSpan = std::span<u8>;

inline void store_le16(u8 *p, u16 v) { std::memcpy(p, &v, 2); }
inline void store_le32(u8 *p, u32 v) { std::memcpy(p, &v, 4); }
inline void store_le64(u8 *p, u64 v) { std::memcpy(p, &v, 8); }
inline u16 load_le16(const u8 *p) { u16 v; std::memcpy(&v, p, 2); return v; }
inline u32 load_le32(const u8 *p) { u32 v; std::memcpy(&v, p, 4); return v; }
inline u64 load_le64(const u8 *p) { u64 v; std::memcpy(&v, p, 8); return v; }

struct CorruptImage : std::runtime_error {
  explicit CorruptImage(const std::string &what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string &what) : std::runtime_error(what) {}
};

// Read-only view of NVM byte content. Implementations decide what is
// visible: the durable array, a crash image, or the live buffered state.
class MemView {
public:
  virtual ~MemView() = default;
  virtual void read(PmemAddr addr, MutByteSpan out) const = 0;
  virtual u64 size_bytes() const = 0;

  u64 read_u64(PmemAddr a) const {
    u8 b[8];
    read(a, {b, 8});
    return load_le64(b);
  }
};

}  // namespace nvlog
