#include "idinvert/archive.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

namespace idinvert::archive {

namespace {

constexpr char kMagic[8] = {'I', 'D', 'I', 'N', 'V', 'A', 'R', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, double value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<float>(bits);
}

}  // namespace

void Archive::put(const std::string& name, const ad::Tensor& tensor) {
  for (auto& [n, t] : tensors_) {
    if (n == name) {
      t = tensor;
      return;
    }
  }
  tensors_.emplace_back(name, tensor);
}

const ad::Tensor& Archive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw FormatError("archive has no entry '" + name + "'");
}

bool Archive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

void Archive::put_params(const std::string& prefix, const nn::ParamSet& params) {
  for (const auto& name : params.names()) put(prefix + name, params.at(name).value());
}

void Archive::load_params(const std::string& prefix, nn::ParamSet& params) const {
  for (const auto& name : params.names()) {
    const ad::Tensor& src = get(prefix + name);
    ad::Tensor& dst = params.at(name).mutable_value();
    if (src.shape() != dst.shape()) {
      throw FormatError("entry '" + prefix + name + "' has shape " + ad::shape_str(src.shape()) + ", expected " +
                        ad::shape_str(dst.shape()));
    }
    dst = src;
  }
}

std::vector<std::uint8_t> serialize(const Archive& archive) {
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["meta"] = archive.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.entries()) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += 4 * t.size();
  }
  const std::string text = manifest.dump(1);
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : archive.entries())
    for (double v : t.data()) put_f32(out, v);
  return out;
}

Archive deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("not an idinvert archive");
  const std::uint64_t mlen = get_u64(bytes.data() + 8);
  if (16 + mlen > bytes.size()) throw FormatError("truncated archive manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt archive manifest: ") + e.what());
  }
  if (manifest.value("format_version", 0) != kFormatVersion) {
    throw FormatError("unsupported archive format version " + manifest.value("format_version", nlohmann::json()).dump());
  }
  Archive out;
  out.meta = manifest.value("meta", nlohmann::json::object());
  const std::uint8_t* payload = bytes.data() + 16 + mlen;
  const std::size_t payload_size = bytes.size() - 16 - mlen;
  for (const auto& entry : manifest.at("tensors")) {
    const auto shape = entry.at("shape").get<ad::Shape>();
    const auto off = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    if (count != ad::shape_numel(shape) || off + 4 * count > payload_size) {
      throw FormatError("archive entry '" + entry.at("name").get<std::string>() + "' is inconsistent");
    }
    ad::Tensor t(shape);
    for (std::uint64_t i = 0; i < count; ++i) t[i] = get_f32(payload + off + 4 * i);
    out.put(entry.at("name").get<std::string>(), t);
  }
  return out;
}

void save(const std::filesystem::path& path, const Archive& archive) { write_file(path, serialize(archive)); }

Archive load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so readers never observe a partial file.
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace idinvert::archive
