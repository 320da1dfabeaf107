#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "nerfloc/nn.hpp"

namespace nerfloc {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

// Checkpoint = directory with manifest.json (tensor names/shapes/dtype plus a
// free-form "config" object) and weights.bin (little-endian float32 values in
// manifest order, each tensor serialized row-major).
template <typename T>
void save_checkpoint(const std::string& dir, const ParamRegistry<T>& reg,
                     const nlohmann::json& config) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = config;
  manifest["tensors"] = nlohmann::json::array();
  std::ofstream blob(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!blob) throw CheckpointError("cannot write weights.bin in " + dir);
  for (const auto& e : reg.entries()) {
    manifest["tensors"].push_back(
        {{"name", e.name}, {"shape", {e.rows, e.cols}}, {"dtype", "f32"}});
    for (Eigen::Index r = 0; r < e.rows; ++r) {
      for (Eigen::Index c = 0; c < e.cols; ++c) {
        const float v = static_cast<float>(e.data[c * e.rows + r]);
        blob.write(reinterpret_cast<const char*>(&v), sizeof(float));
      }
    }
  }
  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw CheckpointError("cannot write manifest.json in " + dir);
  mf << manifest.dump(2) << "\n";
}

inline nlohmann::json load_checkpoint_manifest(const std::string& dir) {
  std::ifstream mf(std::filesystem::path(dir) / "manifest.json");
  if (!mf) throw CheckpointError("missing manifest.json in " + dir);
  nlohmann::json manifest;
  mf >> manifest;
  return manifest;
}

// Loads weights into an already-constructed registry; names and shapes must
// match the manifest exactly.
template <typename T>
void load_checkpoint_into(const std::string& dir, const ParamRegistry<T>& reg) {
  const nlohmann::json manifest = load_checkpoint_manifest(dir);
  const auto& tensors = manifest.at("tensors");
  const auto& entries = reg.entries();
  if (tensors.size() != entries.size()) {
    throw CheckpointError("tensor count mismatch in " + dir);
  }
  std::ifstream blob(std::filesystem::path(dir) / "weights.bin",
                     std::ios::binary);
  if (!blob) throw CheckpointError("missing weights.bin in " + dir);
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& t = tensors[i];
    const auto& e = entries[i];
    if (t.at("name").get<std::string>() != e.name ||
        t.at("shape")[0].get<Eigen::Index>() != e.rows ||
        t.at("shape")[1].get<Eigen::Index>() != e.cols) {
      throw CheckpointError("tensor layout mismatch at " + e.name);
    }
    for (Eigen::Index r = 0; r < e.rows; ++r) {
      for (Eigen::Index c = 0; c < e.cols; ++c) {
        float v;
        blob.read(reinterpret_cast<char*>(&v), sizeof(float));
        if (!blob) throw CheckpointError("truncated weights.bin in " + dir);
        e.data[c * e.rows + r] = static_cast<T>(v);
      }
    }
  }
}

}  // namespace nerfloc
