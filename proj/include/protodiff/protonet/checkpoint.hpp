#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protodiff/dataio.hpp"
#include "protodiff/protonet/bank.hpp"
#include "protodiff/protonet/params.hpp"
#include "protodiff/schedule.hpp"

namespace protodiff::protonet {

inline constexpr char kCheckpointMagic[8] = {'P', 'D', 'I', 'F', 'F', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume sampling: model and schedule configuration,
/// per-domain normalization, trained parameters and the frozen bank.
///
/// Byte layout (little-endian):
///   magic[8] | u32 version | u64 n | n bytes JSON header |
///   u32 arrays | per array: u32 name_len, name, u32 rank, u64 dims[rank], f32 values
/// The bank is stored as the array "bank.P".
struct Checkpoint {
  ModelConfig model;
  schedule::ScheduleConfig schedule;
  dataio::NormTable norms;
  std::uint64_t seed = 0;
  nlohmann::json meta = nlohmann::json::object();
  DenoiserParams params;
  PrototypeBank bank;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
/// Hex FNV-1a of a file's bytes.
std::string file_hash(const std::filesystem::path& path);

}  // namespace protodiff::protonet

namespace protodiff::schedule {
void to_json(nlohmann::json& j, const ScheduleConfig& s);
void from_json(const nlohmann::json& j, ScheduleConfig& s);
}  // namespace protodiff::schedule
