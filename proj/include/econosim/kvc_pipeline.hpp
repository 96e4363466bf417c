#pragma once

#include <algorithm>
#include <vector>

#include "econosim/common.hpp"
#include "econosim/kvc.hpp"
#include "econosim/queues.hpp"

namespace econosim {

// One member of a freshly scheduled host group, seen by the planner.
struct HostMemberView {
  RequestId id = -1;
  Tokens write_base = 0;  // absolute position its first response token lands at
};

struct HostGroupView {
  Tokens padded_rl = 0;  // l: response tokens the allocation covers
  std::vector<HostMemberView> members;
};

// Plans lending of allocated-but-not-yet-written cache space. For each host
// group with RL l, level k lends the second half of every write region:
// queue groups with RL no more than but closest to l/2^k - b are mapped onto
// the lent sub-intervals at random. Chosen members are removed from the
// queue; no tokens are allocated. Recursion stops at the first level with no
// eligible group or once the bound drops below one token.
inline std::vector<HostingSlot> plan_pipeline(const std::vector<HostGroupView>& host_groups,
                                              GtQueue& gt_queue, double buffer_ratio, Rng& rng,
                                              long* examinations = nullptr) {
  std::vector<HostingSlot> out;
  long exams = 0;

  struct WriteRegion {
    RequestId writer;
    Tokens base;        // absolute start
    Tokens len;
    Tokens usage_base;  // writer's written count when its stream enters base
  };

  for (const HostGroupView& host : host_groups) {
    const Tokens l = host.padded_rl;
    if (l < 2 || host.members.empty()) continue;
    const Tokens b = ceil_tokens(buffer_ratio * static_cast<double>(l));

    std::vector<WriteRegion> regions;
    regions.reserve(host.members.size());
    for (const HostMemberView& m : host.members) regions.push_back({m.id, m.write_base, l, 0});

    for (int level = 1;; ++level) {
      const Tokens bound = l / (Tokens(1) << level) - b;
      if (bound < 1) break;

      struct Candidate {
        std::size_t region_index;
        Tokens abs;
        Tokens usage;
        Tokens len;
      };
      std::vector<Candidate> candidates;
      for (std::size_t ri = 0; ri < regions.size(); ++ri) {
        const WriteRegion& r = regions[ri];
        const Tokens half = r.len / 2;
        if (half < 1) continue;
        candidates.push_back({ri, r.base + (r.len - half), r.usage_base + (r.len - half), half});
      }
      if (candidates.empty()) break;
      std::shuffle(candidates.begin(), candidates.end(), rng);

      // Fill the level's sub-intervals from successive groups, each the one
      // with RL no more than but closest to the bound; FCFS on ties.
      std::vector<RequestId> assigned(regions.size(), -1);
      std::size_t next_slot = 0;
      bool any_group = false;
      while (next_slot < candidates.size()) {
        GtGroup* chosen = nullptr;
        for (auto& g : gt_queue.groups_mut()) {
          ++exams;
          if (g.members.empty() || g.padded_rl > bound) continue;
          if (!chosen || g.padded_rl > chosen->padded_rl ||
              (g.padded_rl == chosen->padded_rl &&
               (g.formed_at < chosen->formed_at ||
                (g.formed_at == chosen->formed_at && g.group_id < chosen->group_id))))
            chosen = &g;
        }
        if (!chosen) break;
        any_group = true;

        const std::size_t take =
            std::min(chosen->members.size(), candidates.size() - next_slot);
        for (std::size_t i = 0; i < take; ++i) {
          const RequestId hosted = chosen->members[i];
          const Candidate& c = candidates[next_slot + i];
          HostingSlot slot;
          slot.host_id = regions[c.region_index].writer;
          slot.hosted_id = hosted;
          slot.start_offset = c.usage;
          slot.deadline_usage = c.usage;
          slot.length = c.len;
          slot.abs_start = c.abs;
          out.push_back(slot);
          assigned[c.region_index] = hosted;
        }
        next_slot += take;
        chosen->members.erase(chosen->members.begin(),
                              chosen->members.begin() + static_cast<std::ptrdiff_t>(take));
        if (chosen->members.empty()) gt_queue.remove_group(chosen->group_id);
      }
      if (!any_group) break;

      // Halve every region for the next level; lent halves are written either
      // by the hosted occupant or, if unassigned, still by the original writer.
      std::vector<WriteRegion> next;
      next.reserve(regions.size() * 2);
      for (std::size_t ri = 0; ri < regions.size(); ++ri) {
        const WriteRegion& r = regions[ri];
        const Tokens half = r.len / 2;
        if (half < 1) {
          next.push_back(r);
          continue;
        }
        const Tokens kept = r.len - half;
        next.push_back({r.writer, r.base, kept, r.usage_base});
        if (assigned[ri] >= 0)
          next.push_back({assigned[ri], r.base + kept, half, 0});
        else
          next.push_back({r.writer, r.base + kept, half, r.usage_base + kept});
      }
      regions = std::move(next);
    }
  }

  if (examinations) *examinations += exams;
  return out;
}

}  // namespace econosim
