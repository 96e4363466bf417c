#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "econosim/common.hpp"
#include "econosim/kvc.hpp"
#include "econosim/kvc_pipeline.hpp"
#include "econosim/metrics.hpp"
#include "econosim/policies.hpp"
#include "econosim/queues.hpp"
#include "econosim/request.hpp"
#include "econosim/workload.hpp"

namespace econosim {

struct CostModel {
  Seconds t_base = 0.005;
  Seconds t_token = 1e-4;
  Seconds t_token_over = -1.0;  // <0: same as t_token (linear beyond saturation)
  Tokens tfs = 2048;
  Seconds preempt_offload_penalty = 0.30;
  Seconds preempt_free_penalty = 0.06;
  Seconds reserve_penalty = 0.004;
  Seconds sched_cost_per_exam = 2e-5;
  // Synchronous page copy when a swapped request returns to the GPU; this
  // stalls the whole engine, not just the victim.
  Seconds swap_stall = 0.088;

  Seconds over_rate() const { return t_token_over < 0.0 ? t_token : t_token_over; }

  void validate() const {
    if (!(t_base > 0.0)) throw ConfigError("cost model: t_base must be > 0");
    if (!(t_token > 0.0)) throw ConfigError("cost model: t_token must be > 0");
    if (tfs < 1) throw ConfigError("cost model: tfs must be >= 1");
    if (preempt_offload_penalty < 0.0 || preempt_free_penalty < 0.0 || reserve_penalty < 0.0 ||
        sched_cost_per_exam < 0.0 || swap_stall < 0.0)
      throw ConfigError("cost model: penalties must be >= 0");
  }
};

inline Seconds iteration_time(Tokens forward_size, const CostModel& c) {
  const Tokens base = std::min<Tokens>(forward_size, c.tfs);
  const Tokens over = std::max<Tokens>(0, forward_size - c.tfs);
  return c.t_base + c.t_token * static_cast<double>(base) +
         c.over_rate() * static_cast<double>(over);
}

struct Event {
  long iter = 0;
  Seconds clock = 0.0;
  std::string kind;
  RequestId id = -1;
  std::string detail;

  bool operator==(const Event&) const = default;
};

struct KvcConfig {
  Tokens capacity = 32768;
  Tokens block_size = 32;
};

struct EngineOptions {
  PolicyConfig policy;
  CostModel cost;
  PredictorConfig predictor;
  OrderingConfig ordering;  // bucket bounds; `enabled` is derived from the policy
  KvcConfig kvc;
  double slo_scale = 2.0;
  std::uint64_t seed = 1;
  bool record_events = true;
};

class Engine {
 public:
  Engine(Trace trace, EngineOptions opt)
      : trace_(std::move(trace)),
        opt_(std::move(opt)),
        pol_(opt_.policy),
        cost_(opt_.cost),
        pred_(opt_.predictor),
        kvc_(opt_.kvc.capacity, opt_.kvc.block_size,
             is_econoserve(pol_.kind) ? pol_.reserved_fraction : 0.0),
        rng_(opt_.seed),
        pred_rng_(pred_.seed),
        pt_queue_(queue_config()),
        gt_queue_(queue_config(), pol_.kind != PolicyKind::EconoD),
        waiting_groups_(fifo_config(), true) {
    pol_.validate();
    cost_.validate();
    pred_.validate();
    if (trace_.empty()) throw ConfigError("trace is empty");
    cost_.tfs = pol_.tfs;  // the batching target defines saturation
    init_requests();
  }

  // Advances one engine cycle (one executed iteration or one idle stretch);
  // returns false once every request is done.
  bool step() {
    if (completed_ >= static_cast<long>(reqs_.size())) return false;
    ingest_arrivals();
    form_batch();
    Tokens fs = 0;
    for (const auto& p : pt_iter_) fs += p.tokens;
    if (!decode_pause_) fs += static_cast<Tokens>(running_gts_.size());
    if (fs == 0)
      handle_idle();
    else
      execute_iteration(fs);
    return completed_ < static_cast<long>(reqs_.size());
  }

  MetricsReport run() {
    while (step()) {
    }
    return finalize();
  }

  MetricsReport report() {
    if (completed_ < static_cast<long>(reqs_.size()))
      throw SimulationError("report requested before the run finished");
    return finalize();
  }

  const std::vector<Event>& events() const { return events_; }
  const std::vector<IterationSample>& samples() const { return samples_; }
  const std::vector<Request>& requests() const { return reqs_; }
  const GtQueue& gt_queue() const { return gt_queue_; }
  const PtQueue& pt_queue() const { return pt_queue_; }
  const KvcAllocator& kvc() const { return kvc_; }
  Seconds clock() const { return clock_; }
  Seconds clock_from_samples() const {
    Seconds s = 0.0;
    for (const auto& x : samples_) s += x.dt;
    return s;
  }
  long hosted_slots_created() const { return hosted_total_; }
  long hosted_overruns() const { return hosted_overruns_; }
  Seconds calibrated_prefill_time() const { return t_p_; }
  Seconds calibrated_decode_time() const { return t_g_; }

 private:
  struct PtIterEntry {
    RequestId id;
    Tokens tokens;
  };

  OrderingConfig queue_config() const {
    OrderingConfig c = opt_.ordering;
    c.enabled = pol_.kind == PolicyKind::EconoSDO || pol_.kind == PolicyKind::EconoFull;
    return c;
  }

  OrderingConfig fifo_config() const {
    OrderingConfig c = opt_.ordering;
    c.enabled = false;
    return c;
  }

  void init_requests() {
    reqs_.reserve(trace_.size());
    for (std::size_t i = 1; i < trace_.size(); ++i)
      if (trace_[i].arrival_time < trace_[i - 1].arrival_time)
        throw ConfigError("trace arrival times must be nondecreasing");

    double prompt_sum = 0.0;
    for (const auto& rec : trace_) prompt_sum += static_cast<double>(rec.prompt_len);
    const Tokens mean_prompt =
        std::max<Tokens>(1, static_cast<Tokens>(std::llround(prompt_sum / trace_.size())));
    t_p_ = iteration_time(mean_prompt, cost_);
    t_g_ = iteration_time(cost_.tfs, cost_);

    Tokens max_true = 0;
    for (const auto& rec : trace_) max_true = std::max(max_true, rec.true_rl);
    if (pol_.max_output_len <= 0) pol_.max_output_len = max_true;

    const Tokens B = kvc_.block_size();
    for (std::size_t i = 0; i < trace_.size(); ++i) {
      Request r;
      r.id = static_cast<RequestId>(i);
      r.record = trace_[i];
      r.predicted_rl = predict_rl(r.record.true_rl, pred_, pred_rng_);
      r.padded_rl = apply_padding(r.predicted_rl, pred_.padding_ratio);
      r.prefill_target = r.record.prompt_len;
      r.slo_deadline = r.record.arrival_time +
                       opt_.slo_scale * (t_p_ + t_g_ * static_cast<double>(r.record.true_rl));

      Tokens worst;
      if (pol_.kind == PolicyKind::Orca)
        worst = block_round(r.record.prompt_len + pol_.max_output_len, B);
      else
        worst = block_round(r.record.prompt_len + std::max(r.record.true_rl, r.padded_rl), B);
      if (worst > kvc_.general_capacity())
        throw SimulationError("request " + std::to_string(r.id) +
                              ": KVC demand " + std::to_string(worst) +
                              " exceeds usable capacity " +
                              std::to_string(kvc_.general_capacity()));
      if (is_econoserve(pol_.kind) && r.record.prompt_len > kvc_.reserved_capacity())
        throw SimulationError("request " + std::to_string(r.id) +
                              ": prompt does not fit the reserved pool (" +
                              std::to_string(kvc_.reserved_capacity()) + " tokens)");
      reqs_.push_back(std::move(r));
    }
  }

  void log(const char* kind, RequestId id, std::string detail = {}) {
    if (!opt_.record_events) return;
    events_.push_back({iter_, clock_, kind, id, std::move(detail)});
  }

  void ingest_arrivals() {
    while (arrival_cursor_ < trace_.size() &&
           trace_[arrival_cursor_].arrival_time <= clock_ + 1e-12) {
      const RequestId id = static_cast<RequestId>(arrival_cursor_++);
      Request& r = reqs_[id];
      log("arrive", id);
      if (is_econoserve(pol_.kind)) {
        TaskOrderInfo info;
        info.deadline_slack = r.slo_deadline - clock_;
        info.occupied_kvc = 0;
        info.length = r.record.prompt_len;
        pt_queue_.insert_ordered(id, info);
      } else if (pol_.kind == PolicyKind::SyncCoupled) {
        GtQueue::MemberInfo mi{r.padded_rl, r.slo_deadline, 0};
        waiting_groups_.group_insert_gt(id, mi, clock_);
      } else {
        wait_fifo_.push_back(id);
      }
    }
  }

  // Sequence-token target for the current scheduling epoch.
  Tokens seq_target(const Request& r) const {
    return block_round(r.record.prompt_len + r.generated + r.padded_rl, kvc_.block_size());
  }

  Tokens gt_member_demand(RequestId id) const {
    const Request& r = reqs_[id];
    const Tokens delta = seq_target(r) - kvc_.held(id);
    // Growth is granted in whole blocks.
    return delta > 0 ? block_round(delta, kvc_.block_size()) : 0;
  }

  void form_batch() {
    switch (pol_.kind) {
      case PolicyKind::Orca: form_orca(); break;
      case PolicyKind::Vllm: form_vllm(); break;
      case PolicyKind::Sarathi: form_sarathi(); break;
      case PolicyKind::MultiRes: form_multires(); break;
      case PolicyKind::SyncCoupled: form_sync_coupled(); break;
      default: form_econoserve(); break;
    }
  }

  // -------------------------------------------------------------------------
  // EconoServe family: GT groups, then pipelining, then PTs.
  // -------------------------------------------------------------------------
  void form_econoserve() {
    auto demand = [this](RequestId id) { return gt_member_demand(id); };
    GtSelection sel = select_gt_groups(gt_queue_, kvc_.free_tokens(), demand);
    exam_count_ += sel.examinations;

    for (const GtGroup& g : sel.groups)
      for (RequestId id : g.members) schedule_gt_member(id);

    // Host views are built after every allocation committed: compaction may
    // move regions while the batch is being assembled.
    std::vector<HostGroupView> hosts;
    if (pol_.kind == PolicyKind::EconoFull) {
      for (const GtGroup& g : sel.groups) {
        HostGroupView hv;
        hv.padded_rl = g.padded_rl;
        for (RequestId id : g.members) {
          const Request& r = reqs_[id];
          if (r.generated == 0 && kvc_.regions(id).size() == 1)
            hv.members.push_back({id, kvc_.regions(id)[0].start + r.record.prompt_len});
        }
        if (!hv.members.empty()) hosts.push_back(std::move(hv));
      }
    }

    if (pol_.kind == PolicyKind::EconoFull && !hosts.empty() && !gt_queue_.empty()) {
      auto slots = plan_pipeline(hosts, gt_queue_, pol_.buffer_ratio, rng_, &exam_count_);
      for (const HostingSlot& s : slots) {
        kvc_.add_slot(s);
        ++hosted_total_;
        Request& r = reqs_[s.hosted_id];
        begin_gt_run(r, /*hosted=*/true);
        log("hosted", s.hosted_id,
            "host=" + std::to_string(s.host_id) + " deadline=" + std::to_string(s.deadline_usage));
      }
    }

    const Tokens live = static_cast<Tokens>(running_gts_.size());
    const Tokens tfs_rem = pol_.tfs - live;
    for (const PtEntry& e : pt_queue_.entries()) {
      const Tokens p = reqs_[e.id].record.prompt_len;
      if (p <= tfs_rem && p <= kvc_.reserved_free()) {
        pt_admittable_iter_ = true;
        break;
      }
    }
    auto info = [this](RequestId id) {
      const Request& r = reqs_[id];
      return PtTaskInfo{r.record.prompt_len, r.record.prompt_len};
    };
    PtSelection ps = select_pts(pt_queue_, tfs_rem, kvc_.reserved_free(), info);
    exam_count_ += ps.examinations;
    if (ps.ids.empty() && !pt_queue_.empty() && running_gts_.empty()) {
      // A prompt larger than the forward budget runs alone rather than starving.
      for (const PtEntry& e : pt_queue_.entries()) {
        if (reqs_[e.id].record.prompt_len <= kvc_.reserved_free()) {
          ps.ids.push_back(e.id);
          pt_queue_.remove(e.id);
          break;
        }
      }
    }
    for (RequestId id : ps.ids) dispatch_pt_reserved(id);
  }

  void schedule_gt_member(RequestId id) {
    Request& r = reqs_[id];
    const Tokens target = seq_target(r);
    const Tokens held = kvc_.held(id);
    const Tokens resident = r.record.prompt_len + r.generated;
    bool ok = true;
    if (held == 0)
      ok = kvc_.allocate_exact(id, r.record.prompt_len + r.generated + r.padded_rl).has_value();
    else if (held < target)
      ok = kvc_.grow_exact(id, target - held);
    if (!ok) {
      // Selection guaranteed the demand fits; reaching here is a bug.
      throw SimulationError("exact allocation failed for scheduled request " +
                            std::to_string(id));
    }
    kvc_.release_reserved(id);
    const Tokens cur = kvc_.written(id);
    if (cur < resident) kvc_.add_written(id, resident - cur);
    r.occupied_kvc = resident;
    begin_gt_run(r, /*hosted=*/false);
    log("gt_schedule", id, "rl=" + std::to_string(r.padded_rl));
  }

  void begin_gt_run(Request& r, bool hosted) {
    r.hosted = hosted;
    r.allowance = r.generated + r.padded_rl;  // absolute response-token allowance
    r.generated_at_epoch = r.generated;
    const Seconds wait = std::max(0.0, clock_ - r.last_enqueue_time);
    if (r.was_preempted)
      r.preemption_time += wait;
    else
      r.waiting_time += wait;
    r.was_preempted = false;
    r.state = RequestState::Running;
    running_gts_.push_back(r.id);
    admitted_.push_back(r.id);
  }

  void dispatch_pt_reserved(RequestId id) {
    Request& r = reqs_[id];
    if (!kvc_.draw_reserved(id, r.record.prompt_len))
      throw SimulationError("reserved pool draw failed for selected PT " + std::to_string(id));
    dispatch_pt_common(r, r.record.prompt_len);
  }

  void dispatch_pt_common(Request& r, Tokens tokens_this_iter) {
    r.state = RequestState::Running;
    r.dispatch_time = clock_;
    r.waiting_time += clock_ - r.record.arrival_time;
    pt_iter_.push_back({r.id, tokens_this_iter});
    admitted_.push_back(r.id);
    admit_order_.push_back(r.id);
    ++pts_admitted_iter_;
    log("pt_dispatch", r.id);
  }

  // -------------------------------------------------------------------------
  // Orca: iteration-level FCFS, max-allocation, fixed batch cap.
  // -------------------------------------------------------------------------
  void form_orca() {
    while (!wait_fifo_.empty()) {
      const long active = static_cast<long>(running_gts_.size()) +
                          static_cast<long>(pt_iter_.size()) + ongoing_prefill_count();
      if (active >= pol_.batch_size_cap) break;
      const RequestId id = wait_fifo_.front();
      Request& r = reqs_[id];
      ++exam_count_;
      const Tokens need = r.record.prompt_len + pol_.max_output_len;
      if (kvc_.held(id) > 0) {
        // resumed after an (unusual) preemption: space is still held
        wait_fifo_.erase(wait_fifo_.begin());
        r.allowance = pol_.max_output_len;
        resume_decode(r);
        continue;
      }
      if (!kvc_.allocate_exact(id, need)) break;  // strict FCFS head-of-line
      r.allowance = pol_.max_output_len;
      wait_fifo_.erase(wait_fifo_.begin());
      dispatch_pt_common(r, r.record.prompt_len);
    }
  }

  void resume_decode(Request& r) {
    const Seconds wait = std::max(0.0, clock_ - r.last_enqueue_time);
    if (r.was_preempted)
      r.preemption_time += wait;
    else
      r.waiting_time += wait;
    r.was_preempted = false;
    r.state = RequestState::Running;
    r.generated_at_epoch = r.generated;
    running_gts_.push_back(r.id);
    admitted_.push_back(r.id);
    admit_order_.push_back(r.id);
  }

  // -------------------------------------------------------------------------
  // vLLM: block-allocation, FCFS, swap (or recompute) preemption on failure.
  // -------------------------------------------------------------------------
  void grow_decode_blocks() {
    const std::vector<RequestId> snapshot = running_gts_;
    for (RequestId id : snapshot) {
      Request& r = reqs_[id];
      if (r.state != RequestState::Running) continue;
      if (kvc_.held(id) - kvc_.written(id) >= 1) continue;
      bool flagged = false;
      while (!kvc_.allocate_block(id)) {
        if (!flagged) {
          flagged = true;
          r.alloc_failure_flag = true;
          ++alloc_failures_;
          log("alloc_fail", id);
        }
        const RequestId victim = lifo_victim(id);
        if (victim < 0) {
          preempt_swap(id);  // no one else left to evict
          break;
        }
        preempt_swap(victim);
      }
    }
  }

  // Most-recently-admitted running request other than `exclude`.
  RequestId lifo_victim(RequestId exclude) {
    for (auto it = admit_order_.rbegin(); it != admit_order_.rend(); ++it) {
      if (*it == exclude) continue;
      const Request& r = reqs_[*it];
      if (r.state == RequestState::Running) return *it;
    }
    return -1;
  }

  void preempt_swap(RequestId id) {
    Request& r = reqs_[id];
    const Tokens w = kvc_.written(id);
    kvc_.release(id);
    r.occupied_kvc = 0;
    ++r.preempt_count;
    r.state = RequestState::Preempted;
    r.was_preempted = true;
    r.last_enqueue_time = clock_;
    if (pol_.vllm_recompute) {
      r.prefill_done = 0;
      r.prefill_target = r.record.prompt_len + r.generated;
    }
    drop_running(id);
    std::erase(admit_order_, id);
    std::erase(ongoing_prefills_, id);
    std::erase_if(pt_iter_, [&](const PtIterEntry& e) { return e.id == id; });
    // FCFS: resume position follows arrival order.
    auto it = std::lower_bound(wait_fifo_.begin(), wait_fifo_.end(), id);
    wait_fifo_.insert(it, id);
    log("preempt_swap", id, "written=" + std::to_string(w));
  }

  void form_vllm() {
    grow_decode_blocks();
    Tokens prompts_this_iter = 0;
    while (!wait_fifo_.empty()) {
      const RequestId id = wait_fifo_.front();
      Request& r = reqs_[id];
      ++exam_count_;
      const Tokens prefill_tokens =
          r.prefill_done < r.prefill_target ? r.prefill_target - r.prefill_done : 0;
      const Tokens decodes = static_cast<Tokens>(running_gts_.size());
      if (prefill_tokens > 0 && decodes + prompts_this_iter + prefill_tokens > pol_.tfs &&
          (prompts_this_iter > 0 || decodes > 0))
        break;
      // Swap keeps the processed pages; recompute (prefill_target > prompt)
      // rebuilds them through the prefill.
      const Tokens restored = r.prefill_target > r.record.prompt_len
                                  ? r.prefill_done
                                  : r.prefill_done + r.generated;
      if (prefill_tokens > 0 && restored == 0) {
        // Fresh admission only needs a first block; the rest of the prompt's
        // blocks are claimed during execution and may fail there.
        if (kvc_.free_tokens() < kvc_.block_size()) break;
        if (kvc_.held(id) == 0 && !kvc_.allocate_block(id))
          throw SimulationError("first block grant failed unexpectedly");
      } else {
        // Swap-in restores every page at once.
        const Tokens to_hold = prefill_tokens > 0 ? restored + prefill_tokens : restored + 1;
        const Tokens need = block_round(to_hold, kvc_.block_size()) - kvc_.held(id);
        if (need > kvc_.free_tokens()) break;
        for (Tokens granted = 0; granted < need; granted += kvc_.block_size())
          if (!kvc_.allocate_block(id))
            throw SimulationError("admission block grant failed unexpectedly");
      }
      wait_fifo_.erase(wait_fifo_.begin());
      r.allowance = r.record.true_rl;
      const bool swapping_in = restored > kvc_.written(id);
      if (swapping_in) {
        kvc_.add_written(id, restored - kvc_.written(id));
        r.occupied_kvc = restored;
        pending_stall_ += cost_.swap_stall;  // synchronous copy back to the GPU
        log("swap_in", id);
      }
      if (prefill_tokens == 0) {
        resume_decode(r);
      } else if (r.dispatch_time < 0.0) {
        dispatch_pt_common(r, prefill_tokens);
        prompts_this_iter += prefill_tokens;
      } else {
        resume_prefill(r, prefill_tokens);
        prompts_this_iter += prefill_tokens;
      }
    }
    // Prefills claim the blocks for the tokens they will write this
    // iteration; failures here preempt and can cascade.
    for (const PtIterEntry e : std::vector<PtIterEntry>(pt_iter_)) {
      Request& r = reqs_[e.id];
      if (r.state != RequestState::Running) continue;
      ensure_blocks_for(e.id, r.prefill_done + e.tokens);
    }
    // vLLM steps are either a prefill batch or a decode batch, never mixed;
    // decodes stall while prompts run.
    decode_pause_ = !pt_iter_.empty();
  }

  void resume_prefill(Request& r, Tokens chunk) {
    const Seconds wait = std::max(0.0, clock_ - r.last_enqueue_time);
    if (r.was_preempted)
      r.preemption_time += wait;
    else
      r.waiting_time += wait;
    r.was_preempted = false;
    r.state = RequestState::Running;
    pt_iter_.push_back({r.id, chunk});
    admitted_.push_back(r.id);
    admit_order_.push_back(r.id);
  }

  // -------------------------------------------------------------------------
  // Sarathi: chunked prefill packed with decodes toward TFS.
  // -------------------------------------------------------------------------
  long ongoing_prefill_count() const { return static_cast<long>(ongoing_prefills_.size()); }

  void form_sarathi() {
    grow_decode_blocks();
    Tokens budget = pol_.tfs - static_cast<Tokens>(running_gts_.size());
    // Ongoing prefills first, admission order.
    for (RequestId id : std::vector<RequestId>(ongoing_prefills_)) {
      if (budget <= 0) break;
      Request& r = reqs_[id];
      if (r.state != RequestState::Running) continue;
      Tokens chunk = std::min({pol_.chunk_size, r.prefill_target - r.prefill_done, budget});
      if (chunk <= 0) continue;
      if (!ensure_blocks_for(id, r.prefill_done + chunk)) continue;
      pt_iter_.push_back({id, chunk});
      budget -= chunk;
    }
    // New admissions.
    while (budget >= 1 && !wait_fifo_.empty()) {
      const RequestId id = wait_fifo_.front();
      Request& r = reqs_[id];
      ++exam_count_;
      const Tokens prefill_left = r.prefill_target - r.prefill_done;
      if (prefill_left <= 0) {
        // swapped-out decoder resuming
        const Tokens resident = r.record.prompt_len + r.generated;
        const Tokens need = block_round(resident + 1, kvc_.block_size()) - kvc_.held(id);
        if (need > kvc_.free_tokens()) break;
        for (Tokens g = 0; g < need; g += kvc_.block_size()) kvc_.allocate_block(id);
        kvc_.add_written(id, resident - kvc_.written(id));
        r.occupied_kvc = resident;
        r.allowance = r.record.true_rl;
        pending_stall_ += cost_.swap_stall;
        log("swap_in", id);
        wait_fifo_.erase(wait_fifo_.begin());
        resume_decode(r);
        continue;
      }
      const Tokens chunk = std::min({pol_.chunk_size, prefill_left, budget});
      const Tokens restored = r.prefill_target > r.record.prompt_len ? 0 : r.prefill_done;
      // Admission takes a first block; the chunk's blocks are claimed below
      // and may trigger preemptions.
      if (kvc_.free_tokens() < kvc_.block_size() && kvc_.held(id) == 0) break;
      if (kvc_.held(id) == 0 && !kvc_.allocate_block(id))
        throw SimulationError("first block grant failed unexpectedly");
      r.allowance = r.record.true_rl;
      if (restored > kvc_.written(id)) {
        kvc_.add_written(id, restored - kvc_.written(id));
        r.occupied_kvc = restored;
        pending_stall_ += cost_.swap_stall;
        log("swap_in", id);
      }
      wait_fifo_.erase(wait_fifo_.begin());
      if (r.dispatch_time < 0.0)
        dispatch_pt_common(r, chunk);
      else
        resume_prefill(r, chunk);
      if (r.prefill_done + chunk < r.prefill_target) ongoing_prefills_.push_back(id);
      budget -= chunk;
    }
    for (const PtIterEntry e : std::vector<PtIterEntry>(pt_iter_)) {
      Request& r = reqs_[e.id];
      if (r.state != RequestState::Running) continue;
      ensure_blocks_for(e.id, r.prefill_done + e.tokens);
    }
  }

  bool ensure_blocks_for(RequestId id, Tokens resident_tokens) {
    const Tokens need = block_round(resident_tokens, kvc_.block_size());
    Request& r = reqs_[id];
    bool flagged = false;
    while (kvc_.held(id) < need) {
      if (!kvc_.allocate_block(id)) {
        if (!flagged) {
          flagged = true;
          r.alloc_failure_flag = true;
          ++alloc_failures_;
          log("alloc_fail", id);
        }
        const RequestId victim = lifo_victim(id);
        if (victim < 0) {
          preempt_swap(id);
          return false;
        }
        preempt_swap(victim);
        if (r.state != RequestState::Running) return false;
      }
    }
    return true;
  }

  // -------------------------------------------------------------------------
  // MultiRes: repeated Euclidean nearest-fit admission over both resources.
  // -------------------------------------------------------------------------
  void form_multires() {
    Tokens prompts = 0;
    while (true) {
      const Tokens avail_gpu =
          pol_.tfs - static_cast<Tokens>(running_gts_.size()) - prompts;
      if (avail_gpu <= 0) break;
      std::vector<MultiResCandidate> cands;
      cands.reserve(wait_fifo_.size());
      for (RequestId id : wait_fifo_) {
        const Request& r = reqs_[id];
        const Tokens gpu = r.generated > 0 ? 1 : r.record.prompt_len;
        cands.push_back({id, gpu, gt_member_demand(id)});
      }
      auto pick = multires_select(cands, avail_gpu, kvc_.free_tokens(), pol_.tfs,
                                  kvc_.capacity(), &exam_count_);
      if (!pick) break;
      Request& r = reqs_[*pick];
      std::erase(wait_fifo_, *pick);
      commit_exact_epoch(r);
      if (r.generated > 0) {
        resume_decode(r);
      } else {
        dispatch_pt_common(r, r.record.prompt_len);
        prompts += r.record.prompt_len;
      }
    }
  }

  // Allocates (or grows to) the sequence target for the current epoch.
  void commit_exact_epoch(Request& r) {
    const Tokens target = seq_target(r);
    const Tokens held = kvc_.held(r.id);
    bool ok = true;
    if (held == 0)
      ok = kvc_.allocate_exact(r.id, r.record.prompt_len + r.generated + r.padded_rl).has_value();
    else if (held < target)
      ok = kvc_.grow_exact(r.id, target - held);
    if (!ok)
      throw SimulationError("exact allocation failed for admitted request " +
                            std::to_string(r.id));
    const Tokens written_target = r.prefill_done + r.generated;
    const Tokens cur = kvc_.written(r.id);
    if (cur < written_target) kvc_.add_written(r.id, written_target - cur);
    r.occupied_kvc = written_target;
    r.allowance = r.generated + r.padded_rl;
    r.generated_at_epoch = r.generated;
  }

  // -------------------------------------------------------------------------
  // SyncCoupled: same-RL groups admitted whole, no per-iteration PT top-up.
  // -------------------------------------------------------------------------
  void form_sync_coupled() {
    // A batch boundary: the engine just started, a group completed, or a
    // preemption drained the running set entirely.
    if (running_gts_.empty() && pt_iter_.empty()) admission_open_ = true;
    if (!admission_open_) return;
    auto demand = [this](RequestId id) { return gt_member_demand(id); };
    GtSelection sel = select_gt_groups(waiting_groups_, kvc_.free_tokens(), demand);
    exam_count_ += sel.examinations;
    for (const GtGroup& g : sel.groups) {
      for (RequestId id : g.members) {
        Request& r = reqs_[id];
        commit_exact_epoch(r);
        if (r.generated > 0 || r.prefill_done >= r.record.prompt_len)
          resume_decode(r);
        else
          dispatch_pt_common(r, r.record.prompt_len);
      }
    }
    if (!sel.groups.empty()) admission_open_ = false;
  }

  // -------------------------------------------------------------------------
  // Iteration execution
  // -------------------------------------------------------------------------
  void execute_iteration(Tokens fs) {
    const Seconds dt = iteration_time(fs, cost_) + pending_stall_;
    pending_stall_ = 0.0;
    clock_ += dt;
    ++iter_;

    const Seconds sched = static_cast<Seconds>(exam_count_) * cost_.sched_cost_per_exam;
    if (!admitted_.empty() && sched > 0.0) {
      const Seconds share = sched / static_cast<double>(admitted_.size());
      for (RequestId id : admitted_) sched_share_[id] += share;
    }

    for (const auto& p : pt_iter_) reqs_[p.id].execution_time += dt;
    for (RequestId id : running_gts_) {
      // stalled decodes wait for the GPU rather than execute
      if (decode_pause_)
        reqs_[id].waiting_time += dt;
      else
        reqs_[id].execution_time += dt;
    }

    // Prefill progress.
    std::vector<RequestId> finished_prefill;
    for (const auto& p : pt_iter_) {
      Request& r = reqs_[p.id];
      r.prefill_done += p.tokens;
      kvc_.add_written(p.id, p.tokens);
      r.occupied_kvc += p.tokens;
      if (r.prefill_done >= r.prefill_target) finished_prefill.push_back(p.id);
    }

    // Decode progress.
    if (!decode_pause_) {
      for (RequestId id : running_gts_) {
        Request& r = reqs_[id];
        ++r.generated;
        ++r.occupied_kvc;
        kvc_.add_written(id, 1);
        if (r.generated == 1 && r.first_token_time < 0.0) r.first_token_time = clock_;
      }
    }

    IterationSample s;
    s.iter = iter_;
    s.clock = clock_;
    s.dt = dt;
    s.forward_size = fs;
    s.kvc_written_frac = kvc_.utilization();
    s.kvc_allocated_frac = kvc_.allocated_fraction();
    s.pts_admitted = pts_admitted_iter_;
    s.pt_admittable = pt_admittable_iter_;

    // Completions.
    int completed_now = 0;
    for (RequestId id : std::vector<RequestId>(running_gts_)) {
      Request& r = reqs_[id];
      if (r.generated >= r.record.true_rl) {
        complete(id);
        ++completed_now;
      }
    }

    // Prefill transitions.
    for (RequestId id : finished_prefill) {
      Request& r = reqs_[id];
      if (r.state != RequestState::Running) continue;  // preempted mid-iteration
      std::erase(ongoing_prefills_, id);
      if (is_econoserve(pol_.kind)) {
        r.state = RequestState::WaitingGt;
        r.last_enqueue_time = clock_;
        GtQueue::MemberInfo mi{r.padded_rl, r.slo_deadline, r.occupied_kvc};
        gt_queue_.group_insert_gt(id, mi, clock_);
        log("prefill_done", id, "to-gt-queue");
      } else {
        r.generated_at_epoch = r.generated;
        running_gts_.push_back(id);
        log("prefill_done", id);
      }
    }

    // Underprediction: the epoch allowance ran out short of the true length.
    for (RequestId id : std::vector<RequestId>(running_gts_)) {
      Request& r = reqs_[id];
      if (r.state != RequestState::Running || r.done()) continue;
      if (r.generated >= r.allowance && r.generated < r.record.true_rl)
        handle_underprediction(id);
    }

    // Hosted slot deadlines.
    for (const HostingSlot slot : std::vector<HostingSlot>(kvc_.slots())) {
      Request& host = reqs_[slot.host_id];
      if (host.state != RequestState::Running) continue;  // paused hosts do not advance
      const Tokens usage = host.generated - host.generated_at_epoch;
      if (usage < slot.deadline_usage) continue;
      Request& hosted = reqs_[slot.hosted_id];
      if (hosted.done() || !hosted.hosted) continue;
      handle_hosted_overrun(slot.hosted_id);
    }

    s.completed = completed_now;
    samples_.push_back(s);
    admission_open_ = admission_open_ || completed_now > 0;

    pt_iter_.clear();
    admitted_.clear();
    exam_count_ = 0;
    pts_admitted_iter_ = 0;
    pt_admittable_iter_ = false;
    decode_pause_ = false;
  }

  void complete(RequestId id) {
    Request& r = reqs_[id];
    r.state = RequestState::Done;
    r.completion_clock = clock_;
    kvc_.release(id);
    r.occupied_kvc = 0;
    drop_running(id);
    std::erase(admit_order_, id);
    ++completed_;
    log("complete", id, "rl=" + std::to_string(r.generated));
  }

  void drop_running(RequestId id) { std::erase(running_gts_, id); }

  void handle_underprediction(RequestId id) {
    Request& r = reqs_[id];
    if (is_econoserve(pol_.kind) && kvc_.draw_reserved(id, kvc_.block_size())) {
      r.allowance += kvc_.block_size();
      ++r.reserve_draws;
      penalty_extra_[id] += cost_.reserve_penalty;
      log("reserve_topup", id);
      return;
    }
    // Offload-free preemption: keep the written KV where it is, regroup on
    // the re-predicted remaining length.
    r.alloc_failure_flag = true;
    ++alloc_failures_;
    bool rehomed = true;
    if (r.hosted) rehomed = vacate_slot(id);
    penalty_extra_[id] += rehomed ? cost_.preempt_free_penalty : cost_.preempt_offload_penalty;
    preempt_and_regroup(id, "underprediction");
  }

  void handle_hosted_overrun(RequestId id) {
    Request& r = reqs_[id];
    ++hosted_overruns_;
    const bool rehomed = vacate_slot(id);
    penalty_extra_[id] += rehomed ? cost_.preempt_free_penalty : cost_.preempt_offload_penalty;
    r.alloc_failure_flag = true;
    ++alloc_failures_;
    log("hosted_overrun", id);
    preempt_and_regroup(id, "overrun");
  }

  // Moves the hosted GT's slot-resident tokens to the reserve if it has room;
  // otherwise they leave the cache (the copy is modeled as a time penalty).
  bool vacate_slot(RequestId id) {
    Request& r = reqs_[id];
    const Tokens in_slot =
        std::min(r.generated - r.generated_at_epoch, r.padded_rl);
    bool rehomed = false;
    if (in_slot > 0 && kvc_.draw_reserved(id, in_slot)) {
      rehomed = true;
    } else if (in_slot > 0) {
      kvc_.drop_written(id, in_slot);
      r.occupied_kvc -= in_slot;
    }
    kvc_.remove_slot(id);
    r.hosted = false;
    return rehomed;
  }

  void preempt_and_regroup(RequestId id, const char* why) {
    Request& r = reqs_[id];
    ++r.preempt_count;
    r.state = RequestState::Preempted;
    drop_running(id);
    std::erase(admit_order_, id);
    const Tokens remaining = r.record.true_rl - r.generated;
    r.predicted_rl = predict_rl(remaining, pred_, pred_rng_);
    r.padded_rl = apply_padding(r.predicted_rl, pred_.padding_ratio);
    r.was_preempted = true;
    r.last_enqueue_time = clock_;
    log("preempt", id, std::string(why) + " l_new=" + std::to_string(r.padded_rl));

    r.state = RequestState::WaitingGt;
    if (is_econoserve(pol_.kind)) {
      GtQueue::MemberInfo mi{r.padded_rl, r.slo_deadline, r.occupied_kvc};
      gt_queue_.group_insert_gt(id, mi, clock_);
    } else if (pol_.kind == PolicyKind::SyncCoupled) {
      GtQueue::MemberInfo mi{r.padded_rl, r.slo_deadline, r.occupied_kvc};
      waiting_groups_.group_insert_gt(id, mi, clock_);
    } else {
      auto it = std::lower_bound(wait_fifo_.begin(), wait_fifo_.end(), id);
      wait_fifo_.insert(it, id);
    }
  }

  void handle_idle() {
    if (arrival_cursor_ < trace_.size()) {
      const Seconds next = trace_[arrival_cursor_].arrival_time;
      long k = 1;
      if (next > clock_)
        k = std::max<long>(1, static_cast<long>(std::ceil((next - clock_) / cost_.t_base)));
      const Seconds dt = static_cast<double>(k) * cost_.t_base;
      clock_ += dt;
      iter_ += k;
      IterationSample s;
      s.iter = iter_;
      s.clock = clock_;
      s.dt = dt;
      s.forward_size = 0;
      s.kvc_written_frac = kvc_.utilization();
      s.kvc_allocated_frac = kvc_.allocated_fraction();
      s.idle_repeat = k;
      samples_.push_back(s);
      log("idle", -1, std::to_string(k));
      return;
    }
    // No arrivals left and nothing executable: diagnose the stuck request.
    RequestId stuck = -1;
    for (const auto& r : reqs_)
      if (!r.done()) {
        stuck = r.id;
        break;
      }
    throw SimulationError("simulation stuck: request " + std::to_string(stuck) +
                          " can never be scheduled (demand exceeds what the "
                          "configuration can free)");
  }

  MetricsReport finalize() {
    std::vector<RequestRecord> records;
    records.reserve(reqs_.size());
    for (const Request& r : reqs_) {
      RequestRecord rec;
      rec.id = r.id;
      rec.arrival = r.record.arrival_time;
      const Seconds extra = penalty_extra_[r.id] + sched_share_[r.id];
      rec.completion_time = r.completion_clock + extra;
      rec.first_token_time = r.first_token_time;
      rec.waiting_time = r.waiting_time;
      rec.execution_time = r.execution_time;
      rec.preemption_time = r.preemption_time + penalty_extra_[r.id];
      rec.scheduling_time_share = sched_share_[r.id];
      rec.preempt_count = r.preempt_count;
      rec.reserve_draws = r.reserve_draws;
      rec.met_slo = rec.completion_time <= r.slo_deadline;
      rec.prompt_len = r.record.prompt_len;
      rec.true_rl = r.record.true_rl;
      rec.slo_deadline = r.slo_deadline;
      rec.alloc_failure = r.alloc_failure_flag;
      records.push_back(rec);
    }
    MetricsReport rep = aggregate(records, samples_, pol_.tfs);
    rep.policy = policy_name(pol_.kind);
    std::ostringstream oss;
    write_trace_csv(oss, trace_);
    rep.trace_hash = hash_trace_bytes(oss.str());
    rep.hosted_slots = hosted_total_;
    rep.hosted_overruns = hosted_overruns_;
    return rep;
  }

  Trace trace_;
  EngineOptions opt_;
  PolicyConfig pol_;
  CostModel cost_;
  PredictorConfig pred_;
  KvcAllocator kvc_;
  Rng rng_;
  Rng pred_rng_;

  std::vector<Request> reqs_;
  std::size_t arrival_cursor_ = 0;
  Seconds clock_ = 0.0;
  long iter_ = 0;
  long completed_ = 0;

  PtQueue pt_queue_;
  GtQueue gt_queue_;
  GtQueue waiting_groups_;  // sync-coupled pre-admission grouping
  std::vector<RequestId> wait_fifo_;
  std::vector<RequestId> running_gts_;
  std::vector<RequestId> ongoing_prefills_;
  std::vector<RequestId> admit_order_;
  std::vector<PtIterEntry> pt_iter_;
  std::vector<RequestId> admitted_;
  long exam_count_ = 0;
  int pts_admitted_iter_ = 0;
  bool pt_admittable_iter_ = false;
  bool admission_open_ = true;
  bool decode_pause_ = false;   // vLLM-style prefill-only iteration
  Seconds pending_stall_ = 0.0;  // synchronous swap copies charged to the next iteration

  std::map<RequestId, Seconds> penalty_extra_;
  std::map<RequestId, Seconds> sched_share_;
  long alloc_failures_ = 0;
  long hosted_total_ = 0;
  long hosted_overruns_ = 0;
  Seconds t_p_ = 0.0, t_g_ = 0.0;

  std::vector<Event> events_;
  std::vector<IterationSample> samples_;
};

// One-call entry point.
inline MetricsReport run(Trace trace, const EngineOptions& opt) {
  Engine engine(std::move(trace), opt);
  return engine.run();
}

}  // namespace econosim
