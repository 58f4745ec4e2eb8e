#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "spx/tensor.hpp"

// Checkpoint format: little-endian binary, magic "SPXF", u32 format
// version, then repeated records of (u32 name length, UTF-8 name, u32 rank,
// u64 extents x rank, float32 payload).

namespace spx {

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

template <typename U>
void write_le(std::ofstream& out, U v) {
  // host is little-endian; serialize bytes directly
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::ifstream& in, const std::string& path) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  check(in.good(), "checkpoint: truncated read in " + path);
  return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path,
                             const std::vector<CheckpointRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "checkpoint: cannot open " + path + " for writing");
  out.write("SPXF", 4);
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& rec : records) {
    detail::write_le<std::uint32_t>(out,
                                    static_cast<std::uint32_t>(rec.name.size()));
    out.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    detail::write_le<std::uint32_t>(out,
                                    static_cast<std::uint32_t>(rec.shape.size()));
    for (int e : rec.shape)
      detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    out.write(reinterpret_cast<const char*>(rec.data.data()),
              static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
  }
  check(out.good(), "checkpoint: write failed for " + path);
}

inline std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  check(in.good() && std::memcmp(magic, "SPXF", 4) == 0,
        "checkpoint: bad magic in " + path);
  const auto version = detail::read_le<std::uint32_t>(in, path);
  check(version == kCheckpointVersion,
        "checkpoint: unsupported format version " + std::to_string(version) +
            " in " + path);
  std::vector<CheckpointRecord> records;
  while (in.peek() != EOF) {
    CheckpointRecord rec;
    const auto name_len = detail::read_le<std::uint32_t>(in, path);
    rec.name.resize(name_len);
    in.read(rec.name.data(), name_len);
    const auto rank = detail::read_le<std::uint32_t>(in, path);
    rec.shape.resize(rank);
    std::int64_t n = 1;
    for (auto& e : rec.shape) {
      e = static_cast<int>(detail::read_le<std::uint64_t>(in, path));
      n *= e;
    }
    rec.data.resize(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(rec.data.data()),
            static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
    check(in.good(), "checkpoint: truncated payload for record '" + rec.name +
                         "' in " + path);
    records.push_back(std::move(rec));
  }
  return records;
}

template <typename T>
CheckpointRecord to_record(const std::string& name, const Tensor<T>& t) {
  CheckpointRecord rec;
  rec.name = name;
  rec.shape = t.shape();
  rec.data.resize(t.data().size());
  for (std::size_t i = 0; i < rec.data.size(); ++i)
    rec.data[i] = static_cast<float>(t.data()[i]);
  return rec;
}

template <typename T>
void load_record_into(const CheckpointRecord& rec, Tensor<T>& t) {
  check(rec.shape == t.shape(),
        "checkpoint: shape mismatch for '" + rec.name + "': file " +
            shape_str(rec.shape) + " vs model " + shape_str(t.shape()));
  for (std::size_t i = 0; i < rec.data.size(); ++i)
    t.data()[i] = static_cast<T>(rec.data[i]);
}

}  // namespace spx
