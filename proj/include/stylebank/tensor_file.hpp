#pragma once

// ".ten": magic "TEN1" | u32 rank | u32 dims[rank] | f32 payload (little-endian, row-major).

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <vector>

#include "stylebank/binary_io.hpp"
#include "stylebank/matrix.hpp"

namespace stylebank {

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  bool operator==(const Tensor&) const = default;
};

inline std::vector<std::uint8_t> serialize_tensor(const Tensor& t) {
  if (t.element_count() != t.data.size()) throw InvalidArgument("tensor: dims do not match payload length");
  ByteWriter w;
  w.put_magic("TEN1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) w.put<std::uint32_t>(d);
  w.put_floats(t.data);
  return std::move(w.bytes());
}

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file_synced(path, serialize_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader in(bytes, path.string());
  if (!in.magic_is("TEN1")) throw FormatError(FormatErrc::bad_magic, path.string());
  Tensor t;
  t.dims.resize(in.get<std::uint32_t>());
  for (auto& d : t.dims) d = in.get<std::uint32_t>();
  t.data.resize(t.element_count());
  in.get_bytes(t.data.data(), t.data.size() * sizeof(float));
  if (in.remaining() != 0) throw FormatError(FormatErrc::corrupt_index, path.string() + ": trailing bytes");
  return t;
}

inline Tensor to_tensor(const FeatureMatrix& m) {
  return {{static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, m.storage()};
}

inline FeatureMatrix to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw InvalidArgument("tensor: expected rank 2, got " + std::to_string(t.dims.size()));
  return FeatureMatrix(t.dims[0], t.dims[1], t.data);
}

}  // namespace stylebank
