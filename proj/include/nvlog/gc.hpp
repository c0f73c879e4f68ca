// Part of the nvlog project, under the Apache License v2.0.
// See https://www.apache.org/licenses/LICENSE-2.0 for license information.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>

#include "nvlog/log_store.hpp"

namespace nvlog {

struct GcStats {
  u64 inodes_scanned = 0;
  u64 entries_scanned = 0;
  u64 entries_obsolete = 0;
  u64 data_pages_freed = 0;
  u64 log_pages_freed = 0;
  u64 pages_in_use_after = 0;
};

// Background reclamation. An entry is obsolete when a later committed
// writeback record expires it or a later committed OOP entry overwrites it;
// obsolete OOP data pages are freed as soon as identified (after their entry
// is durably invalidated so a post-crash pass cannot free them again). A log
// page is unlinked with one atomic next-pointer store and freed once every
// slot in it is obsolete; a record slot holds its page until no older
// committed entry for its file page survives outside the pages reclaimed so
// far. The scan reads committed state only and takes no append locks.
class GarbageCollector {
public:
  GarbageCollector(LogStore &log, Metrics &metrics) : log_(log), metrics_(metrics) {}

  // Test hook: runs between the scan and the reclaim phase of each inode.
  void set_pause_hook(std::function<void()> fn) { pause_ = std::move(fn); }

  GcStats pass() {
    GcStats st;
    VolatileView view(log_.dev());
    LogReader reader(view);

    for (u64 ino : log_.inode_list()) {
      st.inodes_scanned++;
      PmemAddr tail = log_.committed_tail(ino);
      if (tail == 0) continue;
      u32 head = log_.head_page(ino);
      u32 latest = log_.latest_page(ino);
      u32 tail_page = page_of(tail);

      auto slots = reader.committed_slots(head, tail);
      st.entries_scanned += slots.size();

      // Latest superseding event per file page, and the latest metadata.
      struct Boundary {
        size_t last_record = SIZE_MAX;
        size_t last_oop = SIZE_MAX;
      };
      std::map<u64, Boundary> bounds;
      size_t last_meta = SIZE_MAX;
      for (size_t i = 0; i < slots.size(); i++) {
        const InodeLogEntry &e = slots[i].entry;
        if (e.kind() == EntryKind::kWritebackRecord)
          bounds[e.file_page()].last_record = i;
        else if (e.is_oop())
          bounds[e.file_page()].last_oop = i;
        else if (e.kind() == EntryKind::kMetadata)
          last_meta = i;
      }

      auto is_obsolete_entry = [&](size_t i) {
        const InodeLogEntry &e = slots[i].entry;
        if (e.kind() == EntryKind::kMetadata) return last_meta != SIZE_MAX && i < last_meta;
        if (e.kind() == EntryKind::kWrite) {
          auto b = bounds[e.file_page()];
          return (b.last_record != SIZE_MAX && i < b.last_record) ||
                 (b.last_oop != SIZE_MAX && i < b.last_oop);
        }
        return false;  // records handled separately
      };

      // free data pages of obsolete OOP entries right away, invalidating the
      // entries first so the free is crash-idempotent
      std::vector<u32> data_to_free;
      std::vector<size_t> invalidated;
      for (size_t i = 0; i < slots.size(); i++) {
        const InodeLogEntry &e = slots[i].entry;
        if (!e.is_oop() || !is_obsolete_entry(i)) continue;
        log_.dev().store_u16(slots[i].addr + kEntryFlagOff, 0);
        log_.dev().clwb(slots[i].addr + kEntryFlagOff, 2);
        invalidated.push_back(i);
        data_to_free.push_back(e.page_index);
        st.entries_obsolete++;
      }
      if (!data_to_free.empty()) {
        log_.dev().sfence();
        for (u32 p : data_to_free) log_.pool().free_page(p);
        st.data_pages_freed += data_to_free.size();
        metrics_.data_pages_freed.fetch_add(data_to_free.size(), std::memory_order_relaxed);
      }
      std::unordered_set<size_t> invalid_set(invalidated.begin(), invalidated.end());
      for (size_t i = 0; i < slots.size(); i++) {
        if (invalid_set.count(i)) continue;
        const InodeLogEntry &e = slots[i].entry;
        if (e.kind() != EntryKind::kWritebackRecord && is_obsolete_entry(i)) st.entries_obsolete++;
      }

      if (pause_) pause_();

      // Page reclaim, walking the chain head -> tail; never the latest page,
      // never the page holding the committed tail. Reclaims proceed in
      // fenced waves: a record page may be unlinked only once the pages of
      // every entry it expires are durably gone, otherwise a crash between
      // the two unlinks would leave a stale expired entry without its stop
      // marker and recovery would replay it.
      std::vector<u32> survivors = reader.committed_chain_pages(head, tail);
      std::map<u32, std::vector<size_t>> by_page;
      for (size_t i = 0; i < slots.size(); i++) by_page[page_of(slots[i].addr)].push_back(i);

      std::unordered_set<u32> gone;  // durably unlinked in earlier waves
      std::optional<u32> new_head;
      bool progress = true;
      while (progress) {
        progress = false;
        std::vector<u32> wave;
        for (size_t ci = 0; ci < survivors.size(); ci++) {
          u32 pg = survivors[ci];
          if (pg == latest || pg == tail_page) break;
          bool removable = true;
          for (size_t i : by_page[pg]) {
            if (invalid_set.count(i)) continue;
            const InodeLogEntry &e = slots[i].entry;
            if (e.kind() == EntryKind::kWritebackRecord) {
              bool survivor_entry = false;
              for (size_t j = 0; j < i; j++) {
                const InodeLogEntry &je = slots[j].entry;
                if (je.kind() != EntryKind::kWrite || je.file_page() != e.file_page()) continue;
                if (invalid_set.count(j)) continue;
                u32 jpage = page_of(slots[j].addr);
                if (gone.count(jpage) || jpage == pg) continue;
                survivor_entry = true;
                break;
              }
              if (survivor_entry) removable = false;
            } else if (!is_obsolete_entry(i)) {
              removable = false;
            }
            if (!removable) break;
          }
          if (!removable) continue;

          u32 next = reader.header(pg).next_page;
          if (ci == 0) {
            log_.dev().store_u32(log_.super_entry_addr(ino) + kSuperHeadPageOff, next);
            log_.dev().clwb(log_.super_entry_addr(ino) + kSuperHeadPageOff, 4);
            new_head = next;
          } else {
            u32 prev = survivors[ci - 1];
            log_.dev().store_u32(page_base(prev) + kHeaderNextPageOff, next);
            log_.dev().clwb(page_base(prev) + kHeaderNextPageOff, 4);
          }
          wave.push_back(pg);
          survivors.erase(survivors.begin() + long(ci));
          ci--;
        }
        if (!wave.empty()) {
          // relinks must be durable before the pages can be reused
          log_.dev().sfence();
          for (u32 p : wave) {
            log_.pool().free_page(p);
            gone.insert(p);
          }
          st.log_pages_freed += wave.size();
          metrics_.log_pages_freed.fetch_add(wave.size(), std::memory_order_relaxed);
          progress = true;
        }
      }
      if (new_head) log_.set_head_page_runtime(ino, *new_head);
    }

    st.pages_in_use_after = log_.pool().used_pages();
    metrics_.gc_passes.fetch_add(1, std::memory_order_relaxed);
    return st;
  }

private:
  LogStore &log_;
  Metrics &metrics_;
  std::function<void()> pause_;
};

}  // namespace nvlog
