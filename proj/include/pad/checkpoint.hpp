#pragma once

// Binary run snapshot: magic, little-endian u64 header length, JSON header,
// then raw float64 blobs described by the header's index.

#include "pad/autograd.hpp"

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace pad {

struct RunState;
struct MetricsReport;
struct ExperimentConfig;

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Blob {
  std::string name;
  bool trainable = false;
  Matrix value;
};

struct Checkpoint {
  nlohmann::json header;
  std::vector<Blob> blobs;

  const Blob* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model, teacher, optimizer and RNG state plus the metrics so far.
Checkpoint capture_checkpoint(const RunState& s, const MetricsReport& metrics);
/// Throws CheckpointError when the stored config hash differs from `cfg`'s.
RunState restore_run_state(const Checkpoint& ckpt, const ExperimentConfig& cfg);
MetricsReport checkpoint_metrics(const Checkpoint& ckpt);
ExperimentConfig checkpoint_config(const Checkpoint& ckpt);
int checkpoint_domain(const Checkpoint& ckpt);

}  // namespace pad
