#pragma once

// Checkpoint layout:
//   8 bytes   magic "CDSTCKPT"
//   8 bytes   header length N, little-endian uint64
//   N bytes   JSON manifest {format_version, dtype, config, tensors[{name, shape, offset, nbytes}], payload_bytes}
//   payload   raw little-endian floats, tensors concatenated in manifest order

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "cdistill/encoder.hpp"
#include "cdistill/error.hpp"

namespace cdistill {

inline constexpr char kCheckpointMagic[8] = {'C', 'D', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <typename U>
void write_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(const char* src) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, src, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(std::begin(bytes), std::end(bytes));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

}  // namespace detail

template <typename T>
void save_checkpoint(const EncoderParams<T>& params, const std::filesystem::path& path) {
  audit_shapes(params);
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["dtype"] = detail::dtype_name<T>();
  header["config"] = params.config;
  auto tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  params.for_each([&](const Parameter<T>& p) {
    const std::uint64_t nbytes = p.value.size() * sizeof(T);
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  });
  header["tensors"] = std::move(tensors);
  header["payload_bytes"] = offset;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointError::Kind::kIo, "checkpoint: cannot write " + tmp.string());
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<char> payload(offset);
    char* dst = payload.data();
    params.for_each([&](const Parameter<T>& p) {
      for (T v : p.value.values()) {
        std::memcpy(dst, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(dst, dst + sizeof(T));
        dst += sizeof(T);
      }
    });
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw CheckpointError(CheckpointError::Kind::kIo, "checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint, converting the stored dtype to T if needed. When
/// `expected_vocab_size` is given, a config with a different vocab is rejected.
template <typename T>
EncoderParams<T> load_checkpoint(const std::filesystem::path& path, std::optional<std::size_t> expected_vocab_size = {}) {
  using Kind = CheckpointError::Kind;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(Kind::kIo, "checkpoint: cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string() + ": ";

  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError(Kind::kCorruptHeader, where + "corrupt header (bad magic)");
  }
  const auto header_len = detail::read_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw CheckpointError(Kind::kCorruptHeader, where + "corrupt header (length exceeds file)");

  nlohmann::json header;
  EncoderConfig config;
  std::string dtype;
  std::uint64_t payload_bytes = 0;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    if (!header.contains("format_version")) throw CheckpointError(Kind::kCorruptHeader, where + "corrupt header (no format_version)");
    if (header.at("format_version").get<int>() != kCheckpointVersion) {
      throw CheckpointError(Kind::kCorruptHeader,
                            where + "unsupported format_version " + header.at("format_version").dump());
    }
    config = header.at("config").get<EncoderConfig>();
    config.validate();
    dtype = header.at("dtype").get<std::string>();
    payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::kCorruptHeader, where + "corrupt header (" + e.what() + ")");
  }
  if (dtype != "f32" && dtype != "f64") throw CheckpointError(Kind::kCorruptHeader, where + "corrupt header (dtype " + dtype + ")");
  const std::size_t elem = dtype == "f32" ? 4 : 8;

  if (expected_vocab_size && *expected_vocab_size != config.vocab_size) {
    throw CheckpointError(Kind::kVocabMismatch, where + "vocab_size " + std::to_string(config.vocab_size) +
                                                    " does not match the supplied vocabulary (" +
                                                    std::to_string(*expected_vocab_size) + ")");
  }

  const auto expected = expected_shapes(config);
  const auto& manifest = header.at("tensors");
  if (!manifest.is_array() || manifest.size() != expected.size()) {
    throw CheckpointError(Kind::kManifestMismatch, where + "shape manifest lists " + std::to_string(manifest.size()) +
                                                       " tensors, config implies " + std::to_string(expected.size()));
  }
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& entry = manifest[i];
    const auto& [name, shape] = expected[i];
    try {
      if (entry.at("name").get<std::string>() != name || entry.at("shape").get<Shape>() != shape ||
          entry.at("offset").get<std::uint64_t>() != offset || entry.at("nbytes").get<std::uint64_t>() != numel(shape) * elem) {
        throw CheckpointError(Kind::kManifestMismatch, where + "shape manifest mismatch at '" + entry.value("name", "?") +
                                                           "': expected '" + name + "' " + to_string(shape));
      }
    } catch (const CheckpointError&) {
      throw;
    } catch (const std::exception& e) {
      throw CheckpointError(Kind::kManifestMismatch, where + "shape manifest entry " + std::to_string(i) + " malformed (" +
                                                         e.what() + ")");
    }
    offset += numel(shape) * elem;
  }
  if (payload_bytes != offset) {
    throw CheckpointError(Kind::kManifestMismatch, where + "payload_bytes " + std::to_string(payload_bytes) +
                                                       " disagrees with manifest total " + std::to_string(offset));
  }
  const std::size_t available = bytes.size() - 16 - header_len;
  if (available < payload_bytes) {
    throw CheckpointError(Kind::kTruncatedPayload, where + "truncated payload: " + std::to_string(available) + " of " +
                                                       std::to_string(payload_bytes) + " bytes present");
  }

  EncoderParams<T> params;
  params.config = config;
  params.blocks.resize(config.num_layers);
  const char* src = bytes.data() + 16 + header_len;
  std::size_t i = 0;
  params.for_each([&](Parameter<T>& p) {
    const auto& [name, shape] = expected[i++];
    Tensor<T> value(shape);
    for (auto& v : value.values()) {
      if (elem == 4) {
        v = static_cast<T>(detail::read_le<float>(src));
      } else {
        v = static_cast<T>(detail::read_le<double>(src));
      }
      src += elem;
    }
    p = Parameter<T>(name, std::move(value));
  });
  return params;
}

}  // namespace cdistill
