#pragma once

// Checkpoint archive: one file holding a JSON manifest plus raw little-endian
// float32 arrays, one named entry per tensor.
//
// Layout:
//   8 bytes   magic "IDINVAR1"
//   8 bytes   manifest length M (uint64, little-endian)
//   M bytes   UTF-8 JSON manifest
//   payload   concatenated float32 arrays; offsets in the manifest are
//             relative to the payload start
//
// The manifest has the fields "format_version", "meta" (free-form: kind,
// architecture hyperparameters, training config) and "tensors" (name, shape,
// offset, count for each entry, in insertion order).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "idinvert/autodiff.hpp"
#include "idinvert/nn.hpp"

namespace idinvert::archive {

inline constexpr int kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void put(const std::string& name, const ad::Tensor& tensor);
  const ad::Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, ad::Tensor>>& entries() const { return tensors_; }

  /// Stores every parameter as "<prefix><name>".
  void put_params(const std::string& prefix, const nn::ParamSet& params);
  /// Overwrites the values of `params` from "<prefix><name>" entries; shapes must match.
  void load_params(const std::string& prefix, nn::ParamSet& params) const;

 private:
  std::vector<std::pair<std::string, ad::Tensor>> tensors_;
};

std::vector<std::uint8_t> serialize(const Archive& archive);
Archive deserialize(std::span<const std::uint8_t> bytes);
void save(const std::filesystem::path& path, const Archive& archive);
Archive load(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace idinvert::archive
