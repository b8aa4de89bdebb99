#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hulm/model.hpp"

namespace hulm {

// Container layout: "HULM", u32 format version, u64 header length, JSON
// header, then raw little-endian f64 tensor payloads at the header's offsets
// (relative to the first payload byte).
inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorContainer {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Matrix> tensors;
};

void write_container(std::ostream& out, const nlohmann::json& metadata,
                     const std::vector<std::pair<std::string, const Matrix*>>& tensors);
TensorContainer read_container(std::istream& in);

struct Checkpoint {
  LmParameters params;
  std::optional<LoraAdapter> adapter;  // stored under the "lora." prefix
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hulm
