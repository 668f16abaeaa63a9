#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dtnet/crc32.hpp"
#include "dtnet/model.hpp"

// Checkpoint file, little endian:
//   magic "DTNT" | u32 version = 1 | u32 tensor count
//   per tensor: u32 name length | name (UTF-8) | u8 dtype (0 = f32) |
//               u8 rank | u64 dims[rank] | raw f32 data
//   u32 CRC32 of all preceding bytes
namespace dtnet {

namespace detail {

inline constexpr char kCkptMagic[4] = {'D', 'T', 'N', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

// Logical serialization dims for a tensor of declared rank.
inline std::vector<std::uint64_t> logical_dims(const Shape4& d, int rank) {
  switch (rank) {
    case 1: return {static_cast<std::uint64_t>(d.numel())};
    case 2: return {static_cast<std::uint64_t>(d.h), static_cast<std::uint64_t>(d.w)};
    case 3: return {static_cast<std::uint64_t>(d.c), static_cast<std::uint64_t>(d.h),
                    static_cast<std::uint64_t>(d.w)};
    default:
      return {static_cast<std::uint64_t>(d.n), static_cast<std::uint64_t>(d.c),
              static_cast<std::uint64_t>(d.h), static_cast<std::uint64_t>(d.w)};
  }
}

class CkptReader {
 public:
  CkptReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n, const std::string& what) {
    if (pos_ + n > size_) throw CheckpointError("checkpoint truncated while reading " + what);
  }

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const std::string& what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::uint8_t u8(const std::string& what) {
    need(1, what);
    return data_[pos_++];
  }

  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  float f32(const std::string& what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
void save_checkpoint(DtNetModel<T>& model, const std::string& path) {
  auto entries = model.params();
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), detail::kCkptMagic, detail::kCkptMagic + 4);
  detail::put_u32(buf, detail::kCkptVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_u32(buf, static_cast<std::uint32_t>(e.name.size()));
    buf.insert(buf.end(), e.name.begin(), e.name.end());
    buf.push_back(0);  // dtype f32
    const auto dims = detail::logical_dims(e.value->dims(), e.rank);
    buf.push_back(static_cast<std::uint8_t>(dims.size()));
    for (const auto d : dims) detail::put_u64(buf, d);
    for (Index i = 0; i < e.value->numel(); ++i)
      detail::put_f32(buf, static_cast<float>(e.value->data()[i]));
  }
  detail::put_u32(buf, crc32(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

// Loads into an already constructed model. The file's tensor set must match
// the model's manifest exactly; mismatches name the offending tensor.
template <typename T>
void load_checkpoint(const std::string& path, DtNetModel<T>& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  detail::CkptReader r(buf.data(), buf.size());
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), detail::kCkptMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic");
  const std::uint32_t version = r.u32("version");
  if (version != detail::kCkptVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32("tensor count");

  auto entries = model.params();
  std::map<std::string, ParamEntry<T>*> manifest;
  for (auto& e : entries) {
    if (!manifest.emplace(e.name, &e).second)
      throw InternalError("duplicate parameter name in manifest: " + e.name);
  }
  std::map<std::string, bool> seen;

  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = r.u32("tensor name length");
    const std::string name = r.bytes(name_len, "tensor name");
    const std::uint8_t dtype = r.u8("dtype of tensor '" + name + "'");
    if (dtype != 0) throw CheckpointError("unsupported dtype for tensor '" + name + "'");
    const std::uint8_t rank = r.u8("rank of tensor '" + name + "'");
    std::vector<std::uint64_t> dims;
    std::uint64_t numel = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      dims.push_back(r.u64("dims of tensor '" + name + "'"));
      numel *= dims.back();
    }
    auto it = manifest.find(name);
    if (it == manifest.end()) throw CheckpointError("unknown tensor '" + name + "'");
    if (seen.count(name)) throw CheckpointError("duplicate tensor '" + name + "'");
    ParamEntry<T>* e = it->second;
    const auto expect = detail::logical_dims(e->value->dims(), e->rank);
    if (dims != expect)
      throw CheckpointError("dims mismatch for tensor '" + name + "'");
    r.need(numel * 4, "data of tensor '" + name + "'");
    for (std::uint64_t i = 0; i < numel; ++i)
      e->value->data()[i] = static_cast<T>(r.f32("data of tensor '" + name + "'"));
    seen[name] = true;
  }
  for (const auto& [name, e] : manifest)
    if (!seen.count(name)) throw CheckpointError("missing tensor '" + name + "'");

  const std::size_t body_end = r.pos();
  const std::uint32_t stored = r.u32("checksum");
  if (r.pos() != buf.size()) throw CheckpointError("trailing bytes after checksum");
  if (crc32(buf.data(), body_end) != stored) throw CheckpointError("checksum mismatch");
}

}  // namespace dtnet
