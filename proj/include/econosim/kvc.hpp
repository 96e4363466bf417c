#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <vector>

#include "econosim/common.hpp"

namespace econosim {

enum class AllocMode { Exact, Block };

// One lent sub-interval of a host's allocation. start_offset is measured in
// the host's written-token stream: once the host has written start_offset
// tokens it needs the space back, so deadline_usage == start_offset.
struct HostingSlot {
  RequestId host_id = -1;
  RequestId hosted_id = -1;
  Tokens start_offset = 0;
  Tokens length = 0;
  Tokens deadline_usage = 0;
  Tokens abs_start = 0;  // absolute position in the token space
};

struct KvcRegion {
  Tokens start = 0;
  Tokens len = 0;
};

// Token-denominated cache accounting. The space [0, capacity) is split into a
// general pool and a reserved pool of reserved_fraction * capacity tokens.
// Regions are block-granular; a failed fit with enough total free space
// compacts the pool (fragmentation is not modeled).
class KvcAllocator {
 public:
  KvcAllocator(Tokens capacity, Tokens block_size, double reserved_fraction)
      : capacity_(capacity), block_size_(block_size) {
    if (capacity < 1) throw ConfigError("kvc capacity must be >= 1");
    if (block_size < 1) throw ConfigError("kvc block_size must be >= 1");
    if (reserved_fraction < 0.0 || reserved_fraction >= 1.0)
      throw ConfigError("reserved_fraction must be in [0, 1)");
    reserve_cap_ = static_cast<Tokens>(std::llround(reserved_fraction * static_cast<double>(capacity)));
    general_cap_ = capacity_ - reserve_cap_;
    free_total_ = general_cap_;
    if (general_cap_ > 0) free_[0] = general_cap_;
  }

  Tokens capacity() const { return capacity_; }
  Tokens block_size() const { return block_size_; }
  Tokens general_capacity() const { return general_cap_; }
  Tokens free_tokens() const { return free_total_; }
  Tokens reserved_capacity() const { return reserve_cap_; }
  Tokens reserved_used() const { return reserved_used_; }
  Tokens reserved_free() const { return reserve_cap_ - reserved_used_; }

  bool has_allocation(RequestId id) const { return alloc_.count(id) > 0; }

  Tokens held(RequestId id) const {
    auto it = alloc_.find(id);
    return it == alloc_.end() ? 0 : it->second.total;
  }

  Tokens reserved_held(RequestId id) const {
    auto it = reserved_.find(id);
    return it == reserved_.end() ? 0 : it->second;
  }

  const std::vector<KvcRegion>& regions(RequestId id) const {
    static const std::vector<KvcRegion> kEmpty;
    auto it = alloc_.find(id);
    return it == alloc_.end() ? kEmpty : it->second.regions;
  }

  Tokens allocated_total() const { return general_cap_ - free_total_; }

  double allocated_fraction() const {
    return static_cast<double>(allocated_total() + reserved_used_) / static_cast<double>(capacity_);
  }

  // Fraction of the cache actually written by live requests, wherever the
  // tokens live (own regions, hosted slots, reserve draws).
  double utilization() const {
    return static_cast<double>(written_total_) / static_cast<double>(capacity_);
  }

  void add_written(RequestId id, Tokens delta) {
    written_[id] += delta;
    written_total_ += delta;
  }
  void drop_written(RequestId id, Tokens delta) {
    auto it = written_.find(id);
    if (it == written_.end()) return;
    const Tokens d = std::min(delta, it->second);
    it->second -= d;
    written_total_ -= d;
  }
  Tokens written(RequestId id) const {
    auto it = written_.find(id);
    return it == written_.end() ? 0 : it->second;
  }

  // Reserves a contiguous block-rounded region of at least `length` tokens.
  std::optional<Tokens> allocate_exact(RequestId id, Tokens length) {
    if (length < 1) throw std::logic_error("allocate_exact: length must be >= 1");
    if (alloc_.count(id)) throw std::logic_error("allocate_exact: id already allocated");
    const Tokens need = block_round(length, block_size_);
    auto start = take(need);
    if (!start) return std::nullopt;
    Holding h;
    h.mode = AllocMode::Exact;
    h.regions.push_back({*start, need});
    h.total = need;
    alloc_[id] = std::move(h);
    return *start;
  }

  // Extends an existing exact allocation by a block-rounded region. The old
  // regions (and any hosting slots inside them) stay where they are.
  bool grow_exact(RequestId id, Tokens extra) {
    if (extra < 1) throw std::logic_error("grow_exact: extra must be >= 1");
    auto it = alloc_.find(id);
    if (it == alloc_.end()) throw std::logic_error("grow_exact: id has no allocation");
    const Tokens need = block_round(extra, block_size_);
    auto start = take(need);
    if (!start) return false;
    it = alloc_.find(id);  // take() may compact but does not re-home map nodes
    it->second.regions.push_back({*start, need});
    it->second.total += need;
    return true;
  }

  // Grants one more block to id (block-allocation mode).
  bool allocate_block(RequestId id) {
    auto start = take(block_size_);
    if (!start) return false;
    Holding& h = alloc_[id];
    h.mode = AllocMode::Block;
    h.regions.push_back({*start, block_size_});
    h.total += block_size_;
    return true;
  }

  bool draw_reserved(RequestId id, Tokens tokens) {
    if (tokens < 1) throw std::logic_error("draw_reserved: tokens must be >= 1");
    if (reserved_used_ + tokens > reserve_cap_) return false;
    reserved_used_ += tokens;
    reserved_[id] += tokens;
    return true;
  }

  Tokens release_reserved(RequestId id) {
    auto it = reserved_.find(id);
    if (it == reserved_.end()) return 0;
    const Tokens freed = it->second;
    reserved_used_ -= freed;
    reserved_.erase(it);
    return freed;
  }

  // Frees everything held by id. Hosting slots whose host is released are
  // promoted to independent allocations covering the lent interval; slots
  // nested inside id's own lent slot are re-parented instead (the space
  // still belongs to the enclosing host).
  Tokens release(RequestId id) {
    auto it = alloc_.find(id);
    const bool had_regions = it != alloc_.end();
    if (!had_regions && reserved_.count(id) == 0 && !is_hosted(id))
      throw std::logic_error("release: unknown id");

    remove_slot(id);

    Tokens freed = 0;
    if (had_regions) {
      // Promote live hosted slots out of this host's space first.
      std::vector<KvcRegion> promoted;
      for (auto& slot : slots_) {
        if (slot.host_id != id) continue;
        Holding& hs = alloc_[slot.hosted_id];
        if (hs.regions.empty()) hs.mode = AllocMode::Exact;
        hs.regions.push_back({slot.abs_start, slot.length});
        hs.total += slot.length;
        promoted.push_back({slot.abs_start, slot.length});
      }
      std::erase_if(slots_, [&](const HostingSlot& s) { return s.host_id == id; });

      it = alloc_.find(id);
      std::sort(promoted.begin(), promoted.end(),
                [](const KvcRegion& a, const KvcRegion& b) { return a.start < b.start; });
      for (const KvcRegion& r : it->second.regions) {
        // Free the pieces of r not covered by a promoted interval.
        Tokens cursor = r.start;
        const Tokens end = r.start + r.len;
        for (const KvcRegion& p : promoted) {
          if (p.start >= end || p.start + p.len <= r.start) continue;
          if (p.start > cursor) {
            give_back(cursor, p.start - cursor);
            freed += p.start - cursor;
          }
          cursor = std::max(cursor, p.start + p.len);
        }
        if (cursor < end) {
          give_back(cursor, end - cursor);
          freed += end - cursor;
        }
      }
      alloc_.erase(it);
    }

    freed += release_reserved(id);
    auto wit = written_.find(id);
    if (wit != written_.end()) {
      written_total_ -= wit->second;
      written_.erase(wit);
    }
    return freed;
  }

  void add_slot(const HostingSlot& slot) {
    if (!contained_in(slot.abs_start, slot.length, slot.host_id) &&
        !inside_slot_of(slot.abs_start, slot.length, slot.host_id))
      throw SimulationError("hosting slot outside the host's space");
    slots_.push_back(slot);
  }

  // Removes the slot occupied by hosted_id. Deeper slots the occupant was
  // hosting inside that slot re-parent to the enclosing host: their deadline
  // shifts into the parent's written-token stream.
  void remove_slot(RequestId hosted_id) {
    const auto own = slot_of(hosted_id);
    if (own) {
      for (auto& s : slots_) {
        if (s.host_id != hosted_id) continue;
        if (s.abs_start >= own->abs_start &&
            s.abs_start + s.length <= own->abs_start + own->length) {
          s.host_id = own->host_id;
          s.start_offset += own->start_offset;
          s.deadline_usage = s.start_offset;
        }
      }
    }
    std::erase_if(slots_, [&](const HostingSlot& s) { return s.hosted_id == hosted_id; });
  }

  const std::vector<HostingSlot>& slots() const { return slots_; }

  std::optional<HostingSlot> slot_of(RequestId hosted_id) const {
    for (const auto& s : slots_)
      if (s.hosted_id == hosted_id) return s;
    return std::nullopt;
  }

  bool is_hosted(RequestId id) const { return slot_of(id).has_value(); }

  // Interval-sweep consistency check; throws SimulationError on breach.
  void check_invariants() const {
    std::vector<KvcRegion> all;
    Tokens allocated = 0;
    for (const auto& [id, h] : alloc_) {
      Tokens sum = 0;
      for (const auto& r : h.regions) {
        all.push_back(r);
        sum += r.len;
        if (r.start < 0 || r.start + r.len > general_cap_)
          throw SimulationError("region outside the general pool");
        if (h.mode == AllocMode::Block && r.len % block_size_ != 0)
          throw SimulationError("block-mode region not block-sized");
      }
      if (sum != h.total) throw SimulationError("holding total out of sync");
      allocated += sum;
    }
    std::sort(all.begin(), all.end(),
              [](const KvcRegion& a, const KvcRegion& b) { return a.start < b.start; });
    for (std::size_t i = 1; i < all.size(); ++i)
      if (all[i].start < all[i - 1].start + all[i - 1].len)
        throw SimulationError("overlapping live regions");
    if (allocated + free_total_ != general_cap_)
      throw SimulationError("token conservation violated");
    Tokens rsum = 0;
    for (const auto& [id, t] : reserved_) rsum += t;
    if (rsum != reserved_used_ || reserved_used_ > reserve_cap_ || reserved_used_ < 0)
      throw SimulationError("reserve accounting violated");
    Tokens wsum = 0;
    for (const auto& [id, w] : written_) {
      wsum += w;
      Tokens room = held(id) + reserved_held(id);
      if (auto s = slot_of(id)) room += s->length;
      if (w > room) throw SimulationError("written tokens exceed holdings");
    }
    if (wsum != written_total_) throw SimulationError("written total out of sync");
    // Slots must sit inside their host's space and be disjoint or nested.
    for (const auto& s : slots_) {
      if (!contained_in(s.abs_start, s.length, s.host_id) &&
          !inside_slot_of(s.abs_start, s.length, s.host_id))
        throw SimulationError("slot escaped its host");
      if (s.deadline_usage != s.start_offset)
        throw SimulationError("slot deadline decoupled from start offset");
    }
    for (std::size_t i = 0; i < slots_.size(); ++i)
      for (std::size_t j = i + 1; j < slots_.size(); ++j) {
        const auto& a = slots_[i];
        const auto& b = slots_[j];
        const Tokens ae = a.abs_start + a.length, be = b.abs_start + b.length;
        const bool disjoint = ae <= b.abs_start || be <= a.abs_start;
        const bool nested = (a.abs_start <= b.abs_start && be <= ae) ||
                            (b.abs_start <= a.abs_start && ae <= be);
        if (!disjoint && !nested) throw SimulationError("partially overlapping slots");
      }
  }

 private:
  struct Holding {
    std::vector<KvcRegion> regions;
    AllocMode mode = AllocMode::Exact;
    Tokens total = 0;
  };

  bool contained_in(Tokens start, Tokens len, RequestId id) const {
    auto it = alloc_.find(id);
    if (it == alloc_.end()) return false;
    for (const auto& r : it->second.regions)
      if (start >= r.start && start + len <= r.start + r.len) return true;
    return false;
  }

  // A recursive slot lives inside the slot its host occupies.
  bool inside_slot_of(Tokens start, Tokens len, RequestId id) const {
    for (const auto& s : slots_)
      if (s.hosted_id == id && start >= s.abs_start && start + len <= s.abs_start + s.length)
        return true;
    return false;
  }

  std::optional<Tokens> take(Tokens need) {
    if (need > free_total_) return std::nullopt;
    for (auto it = free_.begin(); it != free_.end(); ++it) {
      if (it->second >= need) {
        const Tokens start = it->first;
        const Tokens rest = it->second - need;
        free_.erase(it);
        if (rest > 0) free_[start + need] = rest;
        free_total_ -= need;
        return start;
      }
    }
    compact();
    return take(need);
  }

  void give_back(Tokens start, Tokens len) {
    if (len <= 0) return;
    auto [it, inserted] = free_.emplace(start, len);
    if (!inserted) throw SimulationError("double free");
    // merge with the next gap
    auto next = std::next(it);
    if (next != free_.end() && it->first + it->second == next->first) {
      it->second += next->second;
      free_.erase(next);
    }
    // merge with the previous gap
    if (it != free_.begin()) {
      auto prev = std::prev(it);
      if (prev->first + prev->second == it->first) {
        prev->second += it->second;
        free_.erase(it);
      }
    }
    free_total_ += len;
  }

  // Slides every region down, preserving order, leaving one tail gap.
  void compact() {
    struct Entry {
      RequestId id;
      std::size_t region_index;
      Tokens old_start;
      Tokens len;
    };
    std::vector<Entry> entries;
    for (auto& [id, h] : alloc_)
      for (std::size_t i = 0; i < h.regions.size(); ++i)
        entries.push_back({id, i, h.regions[i].start, h.regions[i].len});
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.old_start < b.old_start; });
    Tokens cursor = 0;
    for (const Entry& e : entries) {
      const Tokens delta = cursor - e.old_start;
      if (delta != 0) {
        alloc_[e.id].regions[e.region_index].start = cursor;
        for (auto& slot : slots_) {
          if (slot.abs_start >= e.old_start && slot.abs_start < e.old_start + e.len &&
              owner_or_slot_host(slot, e.id))
            slot.abs_start += delta;
        }
      }
      cursor += e.len;
    }
    free_.clear();
    if (cursor < general_cap_) free_[cursor] = general_cap_ - cursor;
    free_total_ = general_cap_ - cursor;
  }

  // Whether `slot` geometrically belongs to region owner `id`: the slot's
  // host either owns the region or occupies a slot carved from it.
  bool owner_or_slot_host(const HostingSlot& slot, RequestId region_owner) const {
    if (slot.host_id == region_owner) return true;
    for (const auto& s : slots_)
      if (s.hosted_id == slot.host_id) return owner_or_slot_host(s, region_owner);
    return false;
  }

  Tokens capacity_;
  Tokens block_size_;
  Tokens reserve_cap_ = 0;
  Tokens general_cap_ = 0;
  Tokens free_total_ = 0;
  std::map<Tokens, Tokens> free_;  // start -> len
  std::map<RequestId, Holding> alloc_;
  std::map<RequestId, Tokens> reserved_;
  Tokens reserved_used_ = 0;
  std::map<RequestId, Tokens> written_;
  Tokens written_total_ = 0;
  std::vector<HostingSlot> slots_;
};

}  // namespace econosim
