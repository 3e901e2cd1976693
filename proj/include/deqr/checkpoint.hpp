#pragma once

#include <cstdint>
#include <string>

#include "deqr/model.hpp"

namespace deqr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  DeqModel model;
  // Free-form text blobs preserved bit-for-bit across round trips.
  std::string train_config_snapshot;
  std::string best_validation_meta;
};

// Binary format: magic "DEQR", u32 version, u32 l/d/C, u8 nonlinearity,
// f64 gamma, then W, U, b, V, c as length-prefixed f64 arrays, then the two
// metadata blobs as length-prefixed strings. All integers and floats are
// little-endian.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace deqr
