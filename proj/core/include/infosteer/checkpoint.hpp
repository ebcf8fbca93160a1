#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "infosteer/model.hpp"
#include "infosteer/steering.hpp"

namespace infosteer {

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointState {
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    std::vector<SteeringSpec> steering;          // attachments are not stored
    std::map<std::string, std::string> metadata;
};

template <typename T>
struct LoadedCheckpoint {
    Transformer<T> model;
    CheckpointState state;
    std::vector<NamedTensor<T>> extra;  // optimizer state and other auxiliary tensors
};

/// Writes <dir>/checkpoint.bin: a header line, a JSON manifest (config,
/// precision, tensor names/shapes/offsets, step, seed, steering) and raw
/// little-endian blobs. Refuses to replace an existing checkpoint unless
/// `overwrite` is set.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Transformer<T>& model, const CheckpointState& state,
                     const std::vector<NamedTensor<T>>& extra = {}, bool overwrite = false);

/// Loads a checkpoint; values are converted when the stored precision differs
/// from T.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir);

struct CheckpointInfo {
    ModelConfig config;
    Precision precision = Precision::f32;
    CheckpointState state;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

bool checkpoint_exists(const std::filesystem::path& dir);

}  // namespace infosteer
