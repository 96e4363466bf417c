#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace econosim {

using Tokens = std::int64_t;
using Seconds = double;
using RequestId = std::int32_t;
using Rng = std::mt19937_64;

// Bad inputs: config files, CLI arguments, trace files.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failures while simulating: invariant breaches, non-terminating setups.
struct SimulationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Tokens block_round(Tokens tokens, Tokens block_size) {
  if (tokens <= 0) return 0;
  return (tokens + block_size - 1) / block_size * block_size;
}

// ceil with a guard against binary representation slop (100 * 1.1 must give
// 110, not 111).
inline Tokens ceil_tokens(double v) {
  return static_cast<Tokens>(std::ceil(v - 1e-9));
}

}  // namespace econosim
