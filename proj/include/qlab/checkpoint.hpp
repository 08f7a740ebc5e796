#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qlab/finetune.hpp"
#include "qlab/model.hpp"

namespace qlab {

// Layout: "BQCK", u32 LE version, u64 LE metadata length, JSON metadata, then
// tensor payloads (little-endian, row-major) at the offsets listed in the
// metadata, relative to the first payload byte. Quantized layers carry no
// float weights: only grid indices (two per byte for b <= 4, one otherwise)
// plus s, z, alpha, beta and V.
inline constexpr char kCheckpointMagic[4] = {'B', 'Q', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Malformed or unreadable checkpoint; the message names the failing section.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CheckpointKind { model, quantized };

struct LoadedCheckpoint {
  CheckpointKind kind = CheckpointKind::model;
  /// For quantized checkpoints the quantized layers hold the rebuilt W~.
  Model<float> model;
  std::optional<QuantizedModel> quantized;
  std::map<std::string, std::string> info;
};

std::vector<std::uint8_t> serialize_checkpoint(const Model<float>& model,
                                               const std::map<std::string, std::string>& info = {});
std::vector<std::uint8_t> serialize_checkpoint(const QuantizedModel& quantized);
LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& info = {});
void save_checkpoint(const QuantizedModel& quantized, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Runnable model from either kind of checkpoint.
Model<float> load_model(const std::filesystem::path& path);
/// Throws unless the checkpoint is quantized.
QuantizedModel load_quantized(const std::filesystem::path& path);

}  // namespace qlab
