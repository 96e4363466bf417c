#include <catch2/catch_amalgamated.hpp>

#include <map>

#include "econosim/queues.hpp"

using namespace econosim;

namespace {

OrderKey key_for(const TaskOrderInfo& info, const OrderingConfig& cfg, std::uint64_t seq) {
  return make_key(info, cfg, seq);
}

}  // namespace

TEST_CASE("deadline orders first") {
  PtQueue q{};
  q.insert_ordered(1, {3.0, 0, 10});
  const auto pos = q.insert_ordered(2, {0.3, 0, 10});
  CHECK(pos == 0);
  REQUIRE(q.entries().size() == 2);
  CHECK(q.entries()[0].id == 2);
  CHECK(q.entries()[1].id == 1);
}

TEST_CASE("identical keys keep arrival order") {
  PtQueue q{};
  for (RequestId id = 0; id < 6; ++id) q.insert_ordered(id, {1.0, 64, 100});
  for (RequestId id = 0; id < 6; ++id) CHECK(q.entries()[static_cast<std::size_t>(id)].id == id);
}

TEST_CASE("occupied KVC breaks deadline-bucket ties, larger first") {
  PtQueue q{};
  q.insert_ordered(1, {1.0, 10, 100});
  q.insert_ordered(2, {1.0, 300, 100});
  CHECK(q.entries()[0].id == 2);
}

TEST_CASE("length breaks kvc-bucket ties, longer first") {
  PtQueue q{};
  q.insert_ordered(1, {1.0, 0, 100});
  q.insert_ordered(2, {1.0, 0, 400});
  CHECK(q.entries()[0].id == 2);
}

TEST_CASE("incremental insertion equals a full comparator sort") {
  OrderingConfig cfg;
  Rng rng(99);
  std::uniform_real_distribution<double> slack(0.0, 4.0);
  std::uniform_int_distribution<Tokens> occ(0, 600);
  std::uniform_int_distribution<Tokens> len(1, 600);
  for (int round = 0; round < 1000; ++round) {
    const int n = 6;
    std::vector<TaskOrderInfo> infos;
    for (int i = 0; i < n; ++i) infos.push_back({slack(rng), occ(rng), len(rng)});

    PtQueue q(cfg);
    for (int i = 0; i < n; ++i) q.insert_ordered(i, infos[static_cast<std::size_t>(i)]);

    // reference: stable sort by the comparator key
    std::vector<std::pair<OrderKey, RequestId>> ref;
    for (int i = 0; i < n; ++i)
      ref.emplace_back(
          key_for(infos[static_cast<std::size_t>(i)], cfg, static_cast<std::uint64_t>(i)), i);
    std::stable_sort(ref.begin(), ref.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (int i = 0; i < n; ++i)
      CHECK(q.entries()[static_cast<std::size_t>(i)].id == ref[static_cast<std::size_t>(i)].second);
  }
}

TEST_CASE("comparator is transitive and antisymmetric over random triples") {
  OrderingConfig cfg;
  Rng rng(7);
  std::uniform_real_distribution<double> slack(0.0, 4.0);
  std::uniform_int_distribution<Tokens> occ(0, 600);
  std::uniform_int_distribution<Tokens> len(1, 600);
  auto random_key = [&](std::uint64_t seq) {
    return key_for({slack(rng), occ(rng), len(rng)}, cfg, seq);
  };
  for (int i = 0; i < 100000; ++i) {
    const OrderKey a = random_key(0), b = random_key(1), c = random_key(2);
    if (a < b && b < c) CHECK(a < c);
    if (a < b) CHECK_FALSE(b < a);
    // strict weak ordering: incomparability is transitive
    const bool ab = !(a < b) && !(b < a);
    const bool bc = !(b < c) && !(c < b);
    if (ab && bc) CHECK((!(a < c) && !(c < a)));
  }
}

TEST_CASE("argmin is invariant under bucket-preserving re-bucketing") {
  OrderingConfig cfg;
  OrderingConfig shifted = cfg;
  // move the boundaries without changing any bucket membership of the values
  // used below (slacks 0.1/0.3/1.0/3.0; occupied 50/200/450)
  shifted.deadline_bounds = {0.15, 0.6, 2.5};
  shifted.kvc_bounds = {100, 260, 390, 520};

  std::vector<TaskOrderInfo> infos = {
      {0.1, 50, 10}, {0.3, 200, 90}, {1.0, 450, 300}, {3.0, 50, 500}, {0.3, 450, 20}};
  PtQueue a(cfg), b(shifted);
  for (RequestId id = 0; id < static_cast<RequestId>(infos.size()); ++id) {
    a.insert_ordered(id, infos[static_cast<std::size_t>(id)]);
    b.insert_ordered(id, infos[static_cast<std::size_t>(id)]);
  }
  CHECK(a.entries()[0].id == b.entries()[0].id);
}

TEST_CASE("grouping joins equal padded RL and partitions the queue") {
  GtQueue q{};
  q.group_insert_gt(1, {64, 10.0, 0}, 0.0);
  q.group_insert_gt(2, {64, 12.0, 0}, 0.0);
  REQUIRE(q.size() == 1);
  CHECK(q.groups()[0].members.size() == 2);

  q.group_insert_gt(3, {65, 9.0, 0}, 0.0);
  CHECK(q.size() == 2);

  // 100 members over two RLs partition into exactly two groups
  GtQueue big{};
  Rng rng(3);
  int n32 = 0;
  for (RequestId id = 0; id < 100; ++id) {
    const Tokens rl = (rng() % 2 == 0) ? 32 : 64;
    if (rl == 32) ++n32;
    big.group_insert_gt(id, {rl, 10.0, 0}, 0.0);
  }
  REQUIRE(big.size() == 2);
  std::map<Tokens, std::size_t> sizes;
  for (const auto& g : big.groups()) sizes[g.padded_rl] = g.members.size();
  CHECK(sizes[32] == static_cast<std::size_t>(n32));
  CHECK(sizes[64] == static_cast<std::size_t>(100 - n32));
  CHECK(big.total_members() == 100);
}

TEST_CASE("select_gt_groups walks greedily and splits the first misfit") {
  OrderingConfig fifo;
  fifo.enabled = false;
  auto unit_demand = [](Tokens per_member) {
    return [per_member](RequestId) { return per_member; };
  };

  SECTION("zero budget selects nothing") {
    GtQueue q(fifo, true);
    q.group_insert_gt(1, {32, 1.0, 0}, 0.0);
    auto sel = select_gt_groups(q, 0, unit_demand(32));
    CHECK(sel.groups.empty());
    CHECK(q.total_members() == 1);
  }

  SECTION("greedy walk with member-granular split") {
    GtQueue q(fifo, true);
    // groups of demand 600 (20x30), 300 (10x30), 200 (10x20)
    for (RequestId id = 0; id < 20; ++id) q.group_insert_gt(id, {600, 1.0, 0}, 0.0);
    for (RequestId id = 20; id < 30; ++id) q.group_insert_gt(id, {300, 1.0, 0}, 1.0);
    for (RequestId id = 30; id < 40; ++id) q.group_insert_gt(id, {200, 1.0, 0}, 2.0);
    auto demand = [](RequestId id) { return id < 20 ? Tokens(30) : (id < 30 ? 30 : 20); };
    auto sel = select_gt_groups(q, 1000, demand);
    // 600 fits, 300 fits, 200 splits to 100 (5 members of 20)
    REQUIRE(sel.groups.size() == 3);
    CHECK(sel.demand == 1000);
    CHECK(sel.groups[2].members.size() == 5);
    REQUIRE(sel.split_remainder.has_value());
    CHECK(sel.split_remainder->members.size() == 5);
    CHECK(q.total_members() == 5);
  }

  SECTION("single group splits to the member prefix that fits") {
    GtQueue q(fifo, true);
    for (RequestId id = 0; id < 10; ++id) q.group_insert_gt(id, {32, 1.0, 0}, 0.0);
    auto sel = select_gt_groups(q, 160, unit_demand(32));
    REQUIRE(sel.groups.size() == 1);
    CHECK(sel.groups[0].members.size() == 5);
    CHECK(q.total_members() == 5);
  }
}

TEST_CASE("select_pts respects both budgets") {
  OrderingConfig fifo;
  fifo.enabled = false;

  SECTION("empty queue") {
    PtQueue q(fifo);
    auto sel = select_pts(q, 100, 1000, [](RequestId) { return PtTaskInfo{10, 10}; });
    CHECK(sel.ids.empty());
  }

  SECTION("greedy walk takes the near fit") {
    PtQueue q(fifo);
    const std::vector<Tokens> prompts = {60, 50, 40, 10};
    for (RequestId id = 0; id < 4; ++id)
      q.insert_ordered(id, {1.0, 0, prompts[static_cast<std::size_t>(id)]});
    auto info = [&](RequestId id) {
      const Tokens p = prompts[static_cast<std::size_t>(id)];
      return PtTaskInfo{p, p};
    };
    auto sel = select_pts(q, 100, 1000, info);
    REQUIRE(sel.ids == std::vector<RequestId>{0, 2});  // 60 + 40 = 100
    CHECK(sel.prompt_tokens == 100);
    CHECK(q.size() == 2);
  }

  SECTION("reserve gate blocks regardless of TFS headroom") {
    PtQueue q(fifo);
    q.insert_ordered(0, {1.0, 0, 60});
    auto sel = select_pts(q, 1000, 0, [](RequestId) { return PtTaskInfo{60, 60}; });
    CHECK(sel.ids.empty());
    CHECK(q.size() == 1);
  }
}

TEST_CASE("preempted members with occupied KVC sort ahead of fresh ones") {
  OrderingConfig cfg;  // enabled
  GtQueue q(cfg, true);
  q.group_insert_gt(1, {64, 5.0, 0}, 0.0);     // fresh GT, no occupied KVC
  q.group_insert_gt(2, {64, 5.0, 400}, 0.0);   // joins and raises the group key
  q.group_insert_gt(3, {32, 5.0, 0}, 0.0);
  REQUIRE(q.size() == 2);
  CHECK(q.groups()[0].padded_rl == 64);  // max occupied 400 outranks the rl-32 group
}
