#pragma once

// Named parameter storage and the binary checkpoint container.
//
// Layout (all integers little-endian u32):
//   "SEWCKPT1"
//   metadata length, metadata bytes (UTF-8 JSON)
//   per parameter: name length, name bytes, rank, extents[rank], float32 payload
//   CRC32 of every preceding byte

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "sewkit/autodiff.hpp"
#include "sewkit/errors.hpp"
#include "sewkit/io.hpp"

namespace sewkit {

enum class ParamGroup { embed, transformer };

template <std::floating_point T>
struct Param {
  std::string name;
  ad::Array<T> value;
  ParamGroup group = ParamGroup::transformer;
  bool decay = true;
};

template <std::floating_point T>
class ParamStore {
 public:
  ad::Array<T>& add(std::string name, ad::Shape shape, ParamGroup group, bool decay) {
    params_.push_back({std::move(name), ad::Array<T>(std::move(shape)), group, decay});
    return params_.back().value;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t find(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw Error("unknown parameter '" + std::string(name) + "'");
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  template <std::floating_point U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) {
      auto& a = out.add(p.name, p.value.shape, p.group, p.decay);
      for (std::size_t i = 0; i < a.size(); ++i) a.data[i] = static_cast<U>(p.value.data[i]);
    }
    return out;
  }

 private:
  std::vector<Param<T>> params_;
};

inline constexpr std::string_view kCheckpointMagic = "SEWCKPT1";

inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

template <std::floating_point T>
std::string encode_checkpoint(const ParamStore<T>& params, std::string_view metadata) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(metadata.size()));
  w.bytes(metadata);
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.shape.size()));
    for (auto e : p.value.shape) w.u32(static_cast<std::uint32_t>(e));
    for (T v : p.value.data) w.f32(static_cast<float>(v));
  }
  w.u32(crc32_of(w.str()));
  return w.take();
}

struct CheckpointRecord {
  std::string name;
  ad::Array<float> value;
};

struct Checkpoint {
  std::string metadata;
  std::vector<CheckpointRecord> records;
};

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8 || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointCorrupt("missing SEWCKPT1 header");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(body) != stored) throw CheckpointCorrupt("CRC mismatch");
  Checkpoint ck;
  try {
    ByteReader r(body);
    r.bytes(kCheckpointMagic.size());
    ck.metadata = std::string(r.bytes(r.u32()));
    while (r.remaining() > 0) {
      CheckpointRecord rec;
      rec.name = std::string(r.bytes(r.u32()));
      const std::uint32_t rank = r.u32();
      ad::Shape shape(rank);
      for (auto& e : shape) e = r.u32();
      std::vector<float> data(ad::numel(shape));
      for (auto& v : data) v = r.f32();
      rec.value = ad::Array<float>(std::move(shape), std::move(data));
      ck.records.push_back(std::move(rec));
    }
  } catch (const IOError& e) {
    throw CheckpointCorrupt(std::string("truncated record: ") + e.what());
  }
  return ck;
}

/// Copies checkpoint records into `params` by name; shapes must match and
/// every parameter must be present.
template <std::floating_point T>
void load_into(ParamStore<T>& params, const Checkpoint& ck) {
  std::vector<bool> seen(params.size(), false);
  for (const auto& rec : ck.records) {
    const std::size_t i = params.find(rec.name);
    auto& dst = params[i].value;
    if (dst.shape != rec.value.shape)
      throw CheckpointCorrupt("parameter '" + rec.name + "' has shape " + ad::to_string(rec.value.shape) +
                              ", expected " + ad::to_string(dst.shape));
    for (std::size_t j = 0; j < dst.size(); ++j) dst.data[j] = static_cast<T>(rec.value.data[j]);
    seen[i] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw CheckpointCorrupt("parameter '" + params[i].name + "' missing from checkpoint");
}

}  // namespace sewkit
