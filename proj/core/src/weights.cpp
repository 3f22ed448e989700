#include "patnet/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace patnet {

static_assert(std::endian::native == std::endian::little, "weight I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'A', 'T', 'W'};
constexpr std::size_t kHeaderBytes = 12;
constexpr std::size_t kCrcBytes = 4;

using Kind = WeightFileError::Kind;

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <class T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > size_ - pos_) {
      throw WeightFileError(Kind::malformed, std::string("weight file ends inside ") + what + " at byte " +
                                                 std::to_string(pos_));
    }
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightFileError(Kind::io, "cannot open weight file '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string_view to_string(WeightFileError::Kind kind) {
  switch (kind) {
    case Kind::io: return "io";
    case Kind::bad_magic: return "bad_magic";
    case Kind::crc_mismatch: return "crc_mismatch";
    case Kind::unknown_version: return "unknown_version";
    case Kind::malformed: return "malformed";
    case Kind::name_set_mismatch: return "name_set_mismatch";
  }
  return "?";
}

std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_weights(const ParamStore& store) {
  std::map<std::string, const Tensor4*> all;
  for (const auto* map : {&store.params, &store.buffers}) {
    for (const auto& [name, t] : *map) {
      if (!all.emplace(name, &t).second) {
        throw std::invalid_argument("tensor '" + name + "' is both a parameter and a buffer");
      }
    }
  }
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kWeightFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, t] : all) {
    if (name.size() > 0xffff) throw std::invalid_argument("tensor name longer than 65535 bytes");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, 0);
    const auto dims = t->dims();
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dims.size()));
    for (int d : dims) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t->data());
    out.insert(out.end(), bytes, bytes + t->size() * sizeof(float));
  }
  put<std::uint32_t>(out, crc32_ieee(out.data(), out.size()));
  return out;
}

ParamStore decode_weights(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw WeightFileError(Kind::bad_magic, "not a weight file: magic bytes are not \"PATW\"");
  }
  if (bytes.size() < kHeaderBytes + kCrcBytes) {
    throw WeightFileError(Kind::crc_mismatch, "weight file is truncated (" + std::to_string(bytes.size()) +
                                                  " bytes); CRC cannot be verified");
  }
  const std::size_t body = bytes.size() - kCrcBytes;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, kCrcBytes);
  const std::uint32_t actual = crc32_ieee(bytes.data(), body);
  if (stored != actual) {
    throw WeightFileError(Kind::crc_mismatch, "weight file CRC mismatch (stored " + std::to_string(stored) +
                                                  ", computed " + std::to_string(actual) +
                                                  "); file is corrupt or truncated");
  }

  Reader r(bytes.data() + 4, body - 4);
  const auto version = r.get<std::uint32_t>("header");
  if (version != kWeightFormatVersion) {
    throw WeightFileError(Kind::unknown_version, "unsupported weight file version " + std::to_string(version) +
                                                     " (this build reads version " +
                                                     std::to_string(kWeightFormatVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>("header");
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("tensor name length");
    const auto* name_bytes = r.take(len, "tensor name");
    std::string name(reinterpret_cast<const char*>(name_bytes), len);
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) {
      throw WeightFileError(Kind::malformed, "tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    }
    const auto ndim = r.get<std::uint8_t>("ndim");
    if (ndim < 1 || ndim > 4) {
      throw WeightFileError(Kind::malformed, "tensor '" + name + "' has rank " + std::to_string(ndim) +
                                                 "; ranks 1 to 4 are supported");
    }
    int dims[4] = {1, 1, 1, 1};
    std::size_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto v = r.get<std::uint32_t>("dims");
      if (v == 0 || v > (1u << 30)) {
        throw WeightFileError(Kind::malformed, "tensor '" + name + "' has invalid extent " + std::to_string(v));
      }
      dims[d] = static_cast<int>(v);
      numel *= v;
      if (numel > r.remaining()) {
        throw WeightFileError(Kind::malformed, "tensor '" + name + "' is larger than the file");
      }
    }
    const auto* payload = r.take(numel * sizeof(float), "tensor payload");
    std::vector<float> values(numel);
    std::memcpy(values.data(), payload, numel * sizeof(float));
    Tensor4 t(dims[0], dims[1], dims[2], dims[3], std::move(values));
    t.set_rank(ndim);
    const bool buffer = ends_with(name, ".running_mean") || ends_with(name, ".running_var");
    auto& map = buffer ? store.buffers : store.params;
    if (!map.emplace(name, std::move(t)).second) {
      throw WeightFileError(Kind::malformed, "tensor '" + name + "' appears twice");
    }
  }
  if (r.remaining() != 0) {
    throw WeightFileError(Kind::malformed, std::to_string(r.remaining()) + " unexpected bytes after the last tensor");
  }
  store.fused = !store.contains("embed.bn.weight") && store.contains("embed.conv.bias");
  return store;
}

void save_weights(const ParamStore& store, const std::filesystem::path& path) {
  const auto bytes = encode_weights(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightFileError(Kind::io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WeightFileError(Kind::io, "failed writing '" + path.string() + "'");
}

ParamStore load_weights(const std::filesystem::path& path) {
  ParamStore store = decode_weights(read_file(path));
  try {
    infer_spec(store);
  } catch (const ShapeError& e) {
    throw WeightFileError(Kind::name_set_mismatch, "'" + path.string() + "': " + e.what());
  }
  return store;
}

ParamStore load_weights(const std::filesystem::path& path, const ModelSpec& spec) {
  ParamStore store = decode_weights(read_file(path));
  try {
    validate_store(spec, store);
  } catch (const ShapeError& e) {
    throw WeightFileError(Kind::name_set_mismatch, "'" + path.string() + "': " + e.what());
  }
  return store;
}

}  // namespace patnet
