#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "patnet/model.hpp"

namespace patnet {

inline constexpr std::uint32_t kWeightFormatVersion = 1;

class WeightFileError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, crc_mismatch, unknown_version, malformed, name_set_mismatch };

  WeightFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string_view to_string(WeightFileError::Kind kind);

/// Serialized form: "PATW", u32 version, u32 count, then per tensor
/// u16 name length, name, u8 dtype (0 = f32), u8 ndim, ndim x u32 dims,
/// payload; trailing u32 CRC-32 of everything before it. All little-endian.
/// Tensors are written in name order, params and buffers interleaved.
std::vector<std::uint8_t> encode_weights(const ParamStore& store);

/// Parses bytes without checking names against any model. Tensors named
/// *.running_mean / *.running_var become buffers; a store without
/// embed.bn.weight but with embed.conv.bias is marked fused.
ParamStore decode_weights(const std::vector<std::uint8_t>& bytes);

std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t size);

void save_weights(const ParamStore& store, const std::filesystem::path& path);

/// Loads and checks the tensor names and shapes against the variant read off
/// the file (see infer_spec).
ParamStore load_weights(const std::filesystem::path& path);
/// Same, but checks against an explicit spec.
ParamStore load_weights(const std::filesystem::path& path, const ModelSpec& spec);

}  // namespace patnet
