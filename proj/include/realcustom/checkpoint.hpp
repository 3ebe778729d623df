#pragma once

// RCPP checkpoint: "RCPP", u32 version, u32 tensor count, then per tensor
// (u32 name length, UTF-8 name, u32 rank, u32 extents, little-endian f32
// data), then a u32 CRC-32 of every preceding byte. All integers are
// little-endian.

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <zlib.h>

#include "realcustom/model.hpp"

namespace realcustom {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'R', 'C', 'P', 'P'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline std::uint32_t crc32_bytes(const std::vector<std::uint8_t>& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(n)));
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  detail::put_u32(out, crc32_bytes(out, out.size()));
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic),
                                       bytes.begin())) {
    throw FormatError("not an RCPP checkpoint");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (stored != crc32_bytes(bytes, body)) throw FormatError("checkpoint CRC mismatch");

  detail::ByteReader r(bytes, body);
  (void)r.str(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor nt;
    nt.name = r.str(r.u32());
    const auto rank = r.u32();
    if (rank < 1 || rank > 4) throw FormatError("tensor '" + nt.name + "' has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    std::vector<float> data(shape_volume(shape));
    for (auto& v : data) v = std::bit_cast<float>(r.u32());
    nt.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(nt));
  }
  if (!r.done()) throw FormatError("trailing bytes after tensor table");
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SemanticError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SemanticError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw SemanticError("write failed for '" + path + "'");
}

namespace detail {

// The backbone config travels as a float tensor of small integers; the
// 64-bit seed is split into four 16-bit pieces so it survives exactly.
inline Tensor encode_backbone(const BackboneConfig& c) {
  std::vector<float> v{static_cast<float>(c.latent_size),   static_cast<float>(c.latent_channels),
                       static_cast<float>(c.text_dim),      static_cast<float>(c.image_tokens),
                       static_cast<float>(c.encoder_dim),   static_cast<float>(c.condition_dim),
                       static_cast<float>(c.shallow_layers), static_cast<float>(c.encoder_depth),
                       static_cast<float>(c.heads),         static_cast<float>(c.model_dim),
                       static_cast<float>(c.image_size),    static_cast<float>(c.timesteps)};
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<float>((c.seed >> (16 * i)) & 0xFFFF));
  v.push_back(static_cast<float>(c.block_resolutions.size()));
  for (int r : c.block_resolutions) v.push_back(static_cast<float>(r));
  const auto n = v.size();
  return Tensor({n}, std::move(v));
}

inline BackboneConfig decode_backbone(const Tensor& t) {
  const auto& v = t.values();
  if (v.size() < 17) throw FormatError("meta/backbone too short");
  auto at = [&](std::size_t i) { return static_cast<int>(v[i]); };
  BackboneConfig c;
  c.latent_size = at(0);
  c.latent_channels = at(1);
  c.text_dim = at(2);
  c.image_tokens = at(3);
  c.encoder_dim = at(4);
  c.condition_dim = at(5);
  c.shallow_layers = at(6);
  c.encoder_depth = at(7);
  c.heads = at(8);
  c.model_dim = at(9);
  c.image_size = at(10);
  c.timesteps = at(11);
  c.seed = 0;
  for (int i = 0; i < 4; ++i) c.seed |= static_cast<std::uint64_t>(at(12 + static_cast<std::size_t>(i))) << (16 * i);
  const auto nb = static_cast<std::size_t>(at(16));
  if (v.size() != 17 + nb) throw FormatError("meta/backbone block list length mismatch");
  c.block_resolutions.clear();
  for (std::size_t i = 0; i < nb; ++i) c.block_resolutions.push_back(at(17 + i));
  return c;
}

}  // namespace detail

inline std::vector<NamedTensor> model_tensors(const Model<float>& m) {
  std::vector<NamedTensor> out{{"meta/backbone", detail::encode_backbone(m.config)}};
  auto& mm = const_cast<Model<float>&>(m);  // read-only visit
  auto push = [&](const std::string& name, Tensor& t) { out.push_back({name, t}); };
  mm.frozen.for_each([&](const std::string& n, Tensor& t) { push("frozen/" + n, t); });
  mm.trainable.for_each([&](const std::string& n, Tensor& t) { push("trainable/" + n, t); });
  return out;
}

inline std::vector<std::uint8_t> encode_model(const Model<float>& m) {
  return encode_checkpoint(model_tensors(m));
}

inline Model<float> decode_model(const std::vector<std::uint8_t>& bytes) {
  const auto tensors = decode_checkpoint(bytes);
  if (tensors.empty() || tensors.front().name != "meta/backbone") {
    throw FormatError("checkpoint lacks meta/backbone");
  }
  const auto cfg = detail::decode_backbone(tensors.front().tensor);
  try {
    cfg.validate();
  } catch (const UsageError& e) {
    throw FormatError(std::string("checkpoint backbone invalid: ") + e.what());
  }
  auto m = Model<float>::init(cfg);
  std::size_t k = 1;
  auto assign = [&](const std::string& name, Tensor& t) {
    if (k >= tensors.size() || tensors[k].name != name) {
      throw FormatError("checkpoint tensor " + std::to_string(k) + ": expected '" + name + "'");
    }
    if (tensors[k].tensor.shape() != t.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_string(tensors[k].tensor.shape()) + ", expected " +
                        shape_string(t.shape()));
    }
    t = tensors[k++].tensor;
  };
  m.frozen.for_each([&](const std::string& n, Tensor& t) { assign("frozen/" + n, t); });
  m.trainable.for_each([&](const std::string& n, Tensor& t) { assign("trainable/" + n, t); });
  if (k != tensors.size()) throw FormatError("checkpoint has unexpected extra tensors");
  return m;
}

inline void save_checkpoint(const std::string& path, const Model<float>& m) {
  write_file_bytes(path, encode_model(m));
}

inline Model<float> load_checkpoint(const std::string& path) {
  return decode_model(read_file_bytes(path));
}

}  // namespace realcustom
