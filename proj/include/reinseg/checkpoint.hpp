#pragma once

#include "reinseg/config.hpp"
#include "reinseg/model.hpp"

#include <memory>
#include <string>

namespace reinseg {

struct CheckpointMeta {
  int iteration = 0;
  std::string frozen_digest_hex;  // "none" when the backbone trains
  RunConfig config;
};

/// Versioned checkpoint: a text header (iteration, frozen digest, embedded
/// run config, parameter manifest) followed by the raw little-endian float64
/// parameter data in manifest order. save -> load -> save is bitwise stable.
void save_checkpoint(const std::string& path, SegModel& model, const RunConfig& cfg,
                     int iteration);

struct LoadedCheckpoint {
  std::unique_ptr<SegModel> model;
  CheckpointMeta meta;
};

/// Rebuilds the model from the embedded config, overwrites its parameters
/// from the blob, and verifies the manifest and the frozen-backbone digest.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace reinseg
