#pragma once

#include <string>

#include "econosim/common.hpp"
#include "econosim/workload.hpp"

namespace econosim {

// Lifecycle: WaitingPt -> Running -> WaitingGt -> Running -> (Preempted -> WaitingGt)* -> Done.
enum class RequestState { WaitingPt, Running, WaitingGt, Preempted, Done };

inline const char* to_string(RequestState s) {
  switch (s) {
    case RequestState::WaitingPt: return "waiting-pt";
    case RequestState::Running: return "running";
    case RequestState::WaitingGt: return "waiting-gt";
    case RequestState::Preempted: return "preempted";
    case RequestState::Done: return "done";
  }
  return "?";
}

struct Request {
  RequestId id = -1;
  TraceRecord record;
  Tokens predicted_rl = 0;
  Tokens padded_rl = 0;   // padded prediction for the current scheduling epoch (L_new after preemption)
  Seconds slo_deadline = 0.0;
  Tokens generated = 0;   // response tokens emitted so far
  RequestState state = RequestState::WaitingPt;
  Tokens occupied_kvc = 0;  // cache-resident tokens: prompt KV plus retained response KV

  // JCT decomposition accumulators.
  Seconds waiting_time = 0.0;
  Seconds preemption_time = 0.0;
  Seconds execution_time = 0.0;
  Seconds scheduling_time = 0.0;

  // Engine bookkeeping.
  Tokens allowance = 0;        // response tokens current holdings can absorb this epoch
  Tokens generated_at_epoch = 0;  // generated count when the current epoch was scheduled
  Tokens prefill_done = 0;     // prefill tokens already processed (chunked prefill)
  Tokens prefill_target = 0;   // prompt length; larger when a recompute resume re-runs it
  Seconds dispatch_time = -1.0;
  Seconds first_token_time = -1.0;
  Seconds completion_clock = -1.0;  // raw engine clock at completion
  Seconds last_enqueue_time = 0.0;
  int preempt_count = 0;
  int reserve_draws = 0;
  bool hosted = false;       // running inside a lent slot rather than its own region
  bool was_preempted = false;  // current queue residency follows a preemption
  bool alloc_failure_flag = false;  // hit at least one in-execution allocation failure

  Tokens remaining_rl() const { return record.true_rl - generated; }
  Tokens padded_remaining() const { return padded_rl; }  // padded_rl always covers the current epoch
  bool done() const { return state == RequestState::Done; }
};

}  // namespace econosim
