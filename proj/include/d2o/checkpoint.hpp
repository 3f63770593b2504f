#pragma once

#include <fstream>

#include "d2o/nets.hpp"

namespace d2o {

// Checkpoint layout: "D2O1", u32 version, u32 entry count, then per entry
// {u32 name length, name bytes, u32 rank, u32 dims..., f32 values LE},
// and a trailing FNV-1a 64 checksum over all preceding bytes.
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename S>
void save_checkpoint(const ParamRegistry<S>& reg, const std::string& path) {
  std::string buf;
  auto put = [&](const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); };
  buf.append("D2O1");
  uint32_t version = kCheckpointVersion;
  put(&version, 4);
  uint32_t count = static_cast<uint32_t>(reg.params().size());
  put(&count, 4);
  for (const auto& p : reg.params()) {
    uint32_t nlen = static_cast<uint32_t>(p.name.size());
    put(&nlen, 4);
    buf.append(p.name);
    uint32_t rank = static_cast<uint32_t>(p.t.shape().size());
    put(&rank, 4);
    for (int64_t d : p.t.shape()) {
      uint32_t d32 = static_cast<uint32_t>(d);
      put(&d32, 4);
    }
    if constexpr (std::is_same_v<S, float>) {
      put(p.t.data(), sizeof(float) * static_cast<size_t>(p.t.numel()));
    } else {
      for (int64_t i = 0; i < p.t.numel(); ++i) {
        float v = static_cast<float>(p.t.data()[i]);
        put(&v, 4);
      }
    }
  }
  uint64_t sum = fnv1a64(buf.data(), buf.size());
  put(&sum, 8);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write to " + path);
}

template <typename S>
void load_checkpoint(ParamRegistry<S>& reg, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 20 || buf.compare(0, 4, "D2O1") != 0)
    throw IoError(path + ": not a checkpoint file");
  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv1a64(buf.data(), buf.size() - 8))
    throw IoError(path + ": checksum mismatch (corrupted file)");
  size_t off = 4, end = buf.size() - 8;
  auto get = [&](void* p, size_t n) {
    if (off + n > end) throw IoError(path + ": truncated checkpoint");
    std::memcpy(p, buf.data() + off, n);
    off += n;
  };
  uint32_t version, count;
  get(&version, 4);
  if (version != kCheckpointVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  get(&count, 4);

  std::unordered_map<std::string, std::pair<Shape, std::vector<float>>> entries;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t nlen;
    get(&nlen, 4);
    if (off + nlen > end) throw IoError(path + ": truncated checkpoint");
    std::string name(buf.data() + off, nlen);
    off += nlen;
    uint32_t rank;
    get(&rank, 4);
    Shape shape;
    int64_t n = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      uint32_t d;
      get(&d, 4);
      shape.push_back(static_cast<int64_t>(d));
      n *= d;
    }
    std::vector<float> vals(static_cast<size_t>(n));
    get(vals.data(), sizeof(float) * static_cast<size_t>(n));
    entries.emplace(std::move(name), std::make_pair(std::move(shape), std::move(vals)));
  }

  for (auto& p : reg.params()) {
    auto it = entries.find(p.name);
    if (it == entries.end())
      throw IoError(path + ": missing parameter '" + p.name + "'");
    if (it->second.first != p.t.shape())
      throw IoError(path + ": shape mismatch for '" + p.name + "': file has " +
                    shape_str(it->second.first) + ", model expects " + shape_str(p.t.shape()));
    const auto& vals = it->second.second;
    for (int64_t i = 0; i < p.t.numel(); ++i) p.t.data()[i] = static_cast<S>(vals[static_cast<size_t>(i)]);
  }
}

}  // namespace d2o
