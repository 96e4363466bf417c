#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "econosim/common.hpp"

namespace econosim {

enum class PolicyKind {
  Orca,
  Vllm,
  Sarathi,
  MultiRes,
  SyncCoupled,
  EconoD,
  EconoSD,
  EconoSDO,
  EconoFull,
};

inline const std::vector<std::pair<std::string, PolicyKind>>& policy_table() {
  static const std::vector<std::pair<std::string, PolicyKind>> table = {
      {"orca", PolicyKind::Orca},
      {"vllm", PolicyKind::Vllm},
      {"sarathi", PolicyKind::Sarathi},
      {"multires", PolicyKind::MultiRes},
      {"sync-coupled", PolicyKind::SyncCoupled},
      {"econoserve-d", PolicyKind::EconoD},
      {"econoserve-sd", PolicyKind::EconoSD},
      {"econoserve-sdo", PolicyKind::EconoSDO},
      {"econoserve-full", PolicyKind::EconoFull},
  };
  return table;
}

inline std::string policy_name(PolicyKind kind) {
  for (const auto& [name, k] : policy_table())
    if (k == kind) return name;
  return "?";
}

inline std::string valid_policy_names() {
  std::string out;
  for (const auto& [name, k] : policy_table()) {
    if (!out.empty()) out += ", ";
    out += name;
  }
  return out;
}

inline PolicyKind parse_policy(const std::string& name) {
  for (const auto& [n, k] : policy_table())
    if (n == name) return k;
  throw ConfigError("unknown policy '" + name + "'; valid policies: " + valid_policy_names());
}

inline bool is_econoserve(PolicyKind k) {
  return k == PolicyKind::EconoD || k == PolicyKind::EconoSD || k == PolicyKind::EconoSDO ||
         k == PolicyKind::EconoFull;
}

struct PolicyConfig {
  PolicyKind kind = PolicyKind::EconoFull;
  Tokens tfs = 2048;
  int batch_size_cap = 8;      // orca
  Tokens chunk_size = 512;     // sarathi chunked prefill
  double padding_ratio = 0.10;
  double reserved_fraction = 0.03;
  double buffer_ratio = 0.15;
  Tokens max_output_len = 0;   // orca max-allocation bound; 0 derives it from the trace
  bool vllm_recompute = false; // preemption recomputes instead of swapping

  void validate() const {
    if (tfs < 1) throw ConfigError("tfs must be >= 1");
    if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
    if (batch_size_cap < 1) throw ConfigError("batch_size_cap must be >= 1");
    if (padding_ratio < 0.0) throw ConfigError("padding_ratio must be >= 0");
    if (reserved_fraction < 0.0 || reserved_fraction >= 1.0)
      throw ConfigError("reserved_fraction must be in [0, 1)");
    if (buffer_ratio < 0.0) throw ConfigError("buffer_ratio must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// MultiRes candidate selection
// ---------------------------------------------------------------------------

struct MultiResCandidate {
  RequestId id = -1;
  Tokens gpu_demand = 0;  // forward-size tokens this request would add
  Tokens kvc_demand = 0;
};

// Picks the feasible candidate whose (gpu, kvc) demand sits closest to the
// available resources in normalized Euclidean distance. The caller repeats
// the call until nothing fits.
inline std::optional<RequestId> multires_select(const std::vector<MultiResCandidate>& waiting,
                                                Tokens avail_gpu, Tokens avail_kvc,
                                                Tokens gpu_capacity, Tokens kvc_capacity,
                                                long* examinations = nullptr) {
  std::optional<RequestId> best;
  double best_dist = 0.0;
  const double gn = static_cast<double>(std::max<Tokens>(1, gpu_capacity));
  const double kn = static_cast<double>(std::max<Tokens>(1, kvc_capacity));
  long exams = 0;
  for (const auto& c : waiting) {
    ++exams;
    if (c.gpu_demand > avail_gpu || c.kvc_demand > avail_kvc) continue;
    const double dg = (static_cast<double>(c.gpu_demand) - static_cast<double>(avail_gpu)) / gn;
    const double dk = (static_cast<double>(c.kvc_demand) - static_cast<double>(avail_kvc)) / kn;
    const double dist = std::sqrt(dg * dg + dk * dk);
    if (!best || dist < best_dist) {
      best = c.id;
      best_dist = dist;
    }
  }
  if (examinations) *examinations += exams;
  return best;
}

}  // namespace econosim
