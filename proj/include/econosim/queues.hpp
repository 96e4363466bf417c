#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "econosim/common.hpp"

namespace econosim {

// Bucket boundaries partition [0, inf): value v falls in bucket
// upper_bound(bounds, v). Defaults follow the deadline ranges 0.2-0.5s,
// 0.5-2s, >2s and the 0-128/128-256/256-384/384-512 token ranges.
struct OrderingConfig {
  bool enabled = true;  // false -> plain FIFO
  std::vector<Seconds> deadline_bounds = {0.2, 0.5, 2.0};
  std::vector<Tokens> kvc_bounds = {128, 256, 384, 512};
  std::vector<Tokens> length_bounds = {128, 256, 384, 512};

  void validate() const {
    if (!std::is_sorted(deadline_bounds.begin(), deadline_bounds.end()) ||
        !std::is_sorted(kvc_bounds.begin(), kvc_bounds.end()) ||
        !std::is_sorted(length_bounds.begin(), length_bounds.end()))
      throw ConfigError("ordering bucket boundaries must be increasing");
  }
};

template <typename T>
inline int bucket_of(const std::vector<T>& bounds, T v) {
  return static_cast<int>(std::upper_bound(bounds.begin(), bounds.end(), v) - bounds.begin());
}

// Sort key: deadline bucket ascending, occupied-KVC bucket descending,
// length descending, then FIFO.
struct OrderKey {
  int deadline_bucket = 0;
  int kvc_bucket = 0;
  Tokens length = 0;
  std::uint64_t seq = 0;
  bool fifo = false;

  friend bool operator<(const OrderKey& a, const OrderKey& b) {
    if (a.fifo || b.fifo) return a.seq < b.seq;
    if (a.deadline_bucket != b.deadline_bucket) return a.deadline_bucket < b.deadline_bucket;
    if (a.kvc_bucket != b.kvc_bucket) return a.kvc_bucket > b.kvc_bucket;
    if (a.length != b.length) return a.length > b.length;
    return a.seq < b.seq;
  }
};

struct TaskOrderInfo {
  Seconds deadline_slack = 0.0;  // time to deadline at insertion
  Tokens occupied_kvc = 0;
  Tokens length = 0;  // predicted RL for GTs, prompt length for PTs
};

inline OrderKey make_key(const TaskOrderInfo& info, const OrderingConfig& cfg, std::uint64_t seq) {
  OrderKey k;
  k.fifo = !cfg.enabled;
  k.seq = seq;
  if (cfg.enabled) {
    k.deadline_bucket = bucket_of(cfg.deadline_bounds, std::max(0.0, info.deadline_slack));
    k.kvc_bucket = bucket_of(cfg.kvc_bounds, info.occupied_kvc);
    k.length = info.length;
  }
  return k;
}

// ---------------------------------------------------------------------------
// PT waiting queue
// ---------------------------------------------------------------------------

struct PtEntry {
  RequestId id = -1;
  OrderKey key;
};

class PtQueue {
 public:
  explicit PtQueue(OrderingConfig cfg = {}) : cfg_(std::move(cfg)) { cfg_.validate(); }

  // Binary-search insertion; returns the position the task landed at.
  std::size_t insert_ordered(RequestId id, const TaskOrderInfo& info) {
    PtEntry e{id, make_key(info, cfg_, next_seq_++)};
    auto it = std::upper_bound(entries_.begin(), entries_.end(), e,
                               [](const PtEntry& a, const PtEntry& b) { return a.key < b.key; });
    const std::size_t pos = static_cast<std::size_t>(it - entries_.begin());
    entries_.insert(it, e);
    return pos;
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<PtEntry>& entries() const { return entries_; }

  void remove(RequestId id) {
    std::erase_if(entries_, [&](const PtEntry& e) { return e.id == id; });
  }

  const OrderingConfig& config() const { return cfg_; }

 private:
  OrderingConfig cfg_;
  std::vector<PtEntry> entries_;
  std::uint64_t next_seq_ = 0;
};

// ---------------------------------------------------------------------------
// GT waiting queue with same-RL grouping
// ---------------------------------------------------------------------------

struct GtGroup {
  std::uint64_t group_id = 0;
  Tokens padded_rl = 0;
  std::vector<RequestId> members;  // arrival order
  Seconds formed_at = 0.0;
  // Conservative ordering aggregates over members.
  Seconds min_deadline = 0.0;
  Tokens max_occupied = 0;
  OrderKey key;
};

class GtQueue {
 public:
  // grouping=false gives every request its own singleton group.
  explicit GtQueue(OrderingConfig cfg = {}, bool grouping = true)
      : cfg_(std::move(cfg)), grouping_(grouping) {
    cfg_.validate();
  }

  struct MemberInfo {
    Tokens padded_rl = 0;
    Seconds deadline = 0.0;  // absolute
    Tokens occupied_kvc = 0;
  };

  // Joins the queued group with equal padded RL, or forms a new one. The
  // group is (re)placed using its tightest deadline and largest occupied KVC.
  std::uint64_t group_insert_gt(RequestId id, const MemberInfo& info, Seconds now) {
    if (grouping_) {
      for (auto& g : groups_) {
        if (g.padded_rl != info.padded_rl) continue;
        g.members.push_back(id);
        g.min_deadline = std::min(g.min_deadline, info.deadline);
        g.max_occupied = std::max(g.max_occupied, info.occupied_kvc);
        GtGroup moved = g;
        const std::uint64_t gid = moved.group_id;
        remove_group(gid);
        place(std::move(moved), now);
        return gid;
      }
    }
    GtGroup g;
    g.group_id = next_group_id_++;
    g.padded_rl = info.padded_rl;
    g.members.push_back(id);
    g.formed_at = now;
    g.min_deadline = info.deadline;
    g.max_occupied = info.occupied_kvc;
    g.key.seq = next_seq_++;
    const std::uint64_t gid = g.group_id;
    place(std::move(g), now);
    return gid;
  }

  bool empty() const { return groups_.empty(); }
  std::size_t size() const { return groups_.size(); }
  const std::vector<GtGroup>& groups() const { return groups_; }
  std::vector<GtGroup>& groups_mut() { return groups_; }

  void remove_group(std::uint64_t gid) {
    std::erase_if(groups_, [&](const GtGroup& g) { return g.group_id == gid; });
  }

  std::size_t total_members() const {
    std::size_t n = 0;
    for (const auto& g : groups_) n += g.members.size();
    return n;
  }

  const OrderingConfig& config() const { return cfg_; }
  bool grouping() const { return grouping_; }

 private:
  void place(GtGroup&& g, Seconds now) {
    TaskOrderInfo info;
    info.deadline_slack = g.min_deadline - now;
    info.occupied_kvc = g.max_occupied;
    info.length = g.padded_rl;
    const std::uint64_t seq = g.key.seq;  // stability: keep the original seq
    g.key = make_key(info, cfg_, seq);
    auto it = std::upper_bound(groups_.begin(), groups_.end(), g,
                               [](const GtGroup& a, const GtGroup& b) { return a.key < b.key; });
    groups_.insert(it, std::move(g));
  }

  OrderingConfig cfg_;
  bool grouping_ = true;
  std::vector<GtGroup> groups_;
  std::uint64_t next_group_id_ = 1;
  std::uint64_t next_seq_ = 0;
};

// ---------------------------------------------------------------------------
// Selection walks
// ---------------------------------------------------------------------------

struct GtSelection {
  std::vector<GtGroup> groups;              // scheduled groups (split prefix included)
  std::optional<GtGroup> split_remainder;   // what stayed queued after the split
  Tokens demand = 0;
  long examinations = 0;
};

// Walks the ordered queue taking groups in order while their member demand
// fits whole; the first group that does not fit is split member-by-member
// and the walk stops there. Selected members are removed from the queue.
inline GtSelection select_gt_groups(GtQueue& queue, Tokens available_kvc,
                                    const std::function<Tokens(RequestId)>& member_demand) {
  GtSelection out;
  if (available_kvc <= 0) return out;
  Tokens remaining = available_kvc;

  auto& groups = queue.groups_mut();
  for (std::size_t gi = 0; gi < groups.size();) {
    GtGroup& g = groups[gi];
    ++out.examinations;
    Tokens total = 0;
    for (RequestId id : g.members) total += member_demand(id);
    if (total <= remaining) {
      remaining -= total;
      out.demand += total;
      out.groups.push_back(g);
      groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(gi));
      continue;
    }
    // Split the first misfit and stop; later (smaller) groups stay queued
    // and remain available as pipelining candidates.
    GtGroup prefix = g;
    prefix.members.clear();
    Tokens prefix_demand = 0;
    std::size_t taken = 0;
    for (RequestId id : g.members) {
      const Tokens d = member_demand(id);
      ++out.examinations;
      if (prefix_demand + d > remaining) break;
      prefix_demand += d;
      prefix.members.push_back(id);
      ++taken;
    }
    if (taken > 0) {
      g.members.erase(g.members.begin(), g.members.begin() + static_cast<std::ptrdiff_t>(taken));
      remaining -= prefix_demand;
      out.demand += prefix_demand;
      out.groups.push_back(prefix);
      out.split_remainder = g;
    }
    break;
  }
  return out;
}

struct PtTaskInfo {
  Tokens prompt_len = 0;
  Tokens kvc_demand = 0;  // drawn from the reserved pool
};

struct PtSelection {
  std::vector<RequestId> ids;
  Tokens prompt_tokens = 0;
  Tokens kvc_tokens = 0;
  long examinations = 0;
};

// Walks the ordered PT queue taking prompts while both the forward-size
// budget and the reserved-pool budget hold. Selected entries are removed.
inline PtSelection select_pts(PtQueue& queue, Tokens tfs_remaining, Tokens reserved_free,
                              const std::function<PtTaskInfo(RequestId)>& info) {
  PtSelection out;
  if (tfs_remaining <= 0 || reserved_free <= 0) return out;
  Tokens budget = tfs_remaining;
  Tokens reserve = reserved_free;
  std::vector<RequestId> taken;
  for (const PtEntry& e : queue.entries()) {
    ++out.examinations;
    const PtTaskInfo t = info(e.id);
    if (t.prompt_len > budget || t.kvc_demand > reserve) continue;
    budget -= t.prompt_len;
    reserve -= t.kvc_demand;
    out.prompt_tokens += t.prompt_len;
    out.kvc_tokens += t.kvc_demand;
    out.ids.push_back(e.id);
    taken.push_back(e.id);
  }
  for (RequestId id : taken) queue.remove(id);
  return out;
}

}  // namespace econosim
