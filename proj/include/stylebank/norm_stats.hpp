#pragma once

// SNRM layout (little-endian):
//   "SNRM" | u32 version | u32 steps | u32 layers | u32 heads | u32 head_dim | u32 latent_channels | u64 seed
//   per key, in (layer, step, head) order: u16 layer | u16 step | u16 head | u16 0 | Q block | K block
//   per step: latent block
// block: u64 n | f32 mean[c] | f32 var[c] | f32 skew[c] | f32 kurt[c] | u8 degenerate[c]

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylebank/attention_cache.hpp"
#include "stylebank/binary_io.hpp"
#include "stylebank/error.hpp"
#include "stylebank/stats.hpp"

namespace stylebank {

/// Reference statistics for query/key and latent alignment.
struct NormStats {
  std::uint64_t seed = 0;
  std::uint32_t steps = 0;
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::uint32_t head_dim = 0;
  std::uint32_t latent_channels = 0;
  std::vector<MomentStats> queries;  ///< indexed by key_index
  std::vector<MomentStats> keys;
  std::vector<MomentStats> latents;  ///< per step, latent after the update

  NormStats() = default;
  NormStats(std::uint32_t steps_, std::uint32_t layers_, std::uint32_t heads_, std::uint32_t head_dim_,
            std::uint32_t latent_channels_, std::uint64_t seed_ = 0)
      : seed(seed_), steps(steps_), layers(layers_), heads(heads_), head_dim(head_dim_),
        latent_channels(latent_channels_), queries(std::size_t{steps_} * layers_ * heads_),
        keys(queries.size()), latents(steps_) {}

  std::size_t key_count() const noexcept { return queries.size(); }

  std::size_t key_index(const CacheKey& k) const {
    if (k.layer >= layers || k.timestep >= steps || k.head >= heads) {
      throw FormatError(FormatErrc::not_found, "norm stats have no entry for " + to_string(k));
    }
    return (std::size_t{k.layer} * steps + k.timestep) * heads + k.head;
  }

  CacheKey key_at(std::size_t i) const {
    const auto head = static_cast<std::uint16_t>(i % heads);
    const auto step = static_cast<std::uint16_t>((i / heads) % steps);
    const auto layer = static_cast<std::uint16_t>(i / (std::size_t{heads} * steps));
    return {layer, step, head};
  }

  const MomentStats& query_stats(const CacheKey& k) const { return queries[key_index(k)]; }
  const MomentStats& key_stats(const CacheKey& k) const { return keys[key_index(k)]; }

  /// Every slot has been filled.
  bool complete() const {
    auto filled = [](const std::vector<MomentStats>& v) {
      for (const auto& s : v)
        if (s.n_samples == 0) return false;
      return true;
    };
    return filled(queries) && filled(keys) && filled(latents);
  }

  bool operator==(const NormStats&) const = default;
};

namespace snrm {
inline constexpr char kMagic[5] = "SNRM";
inline constexpr std::uint32_t kVersion = 1;
}  // namespace snrm

namespace detail {

inline void put_moments(ByteWriter& w, const MomentStats& s, std::size_t channels) {
  if (s.channels() != channels) throw InvalidArgument("norm stats: block has " + std::to_string(s.channels()) + " channels");
  w.put<std::uint64_t>(s.n_samples);
  w.put_floats(s.mean);
  w.put_floats(s.variance);
  w.put_floats(s.skewness);
  w.put_floats(s.excess_kurtosis);
  w.put_bytes(s.degenerate.data(), s.degenerate.size());
}

inline MomentStats get_moments(ByteReader& in, std::size_t channels) {
  MomentStats s;
  s.n_samples = in.get<std::uint64_t>();
  for (auto* v : {&s.mean, &s.variance, &s.skewness, &s.excess_kurtosis}) {
    v->resize(channels);
    in.get_bytes(v->data(), channels * sizeof(float));
  }
  s.degenerate.resize(channels);
  in.get_bytes(s.degenerate.data(), channels);
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_norm_stats(const NormStats& s) {
  if (!s.complete()) throw InvalidArgument("norm stats: refusing to write incomplete statistics");
  ByteWriter w;
  w.put_magic(snrm::kMagic);
  w.put<std::uint32_t>(snrm::kVersion);
  for (auto v : {s.steps, s.layers, s.heads, s.head_dim, s.latent_channels}) w.put<std::uint32_t>(v);
  w.put<std::uint64_t>(s.seed);
  for (std::size_t i = 0; i < s.key_count(); ++i) {
    const CacheKey k = s.key_at(i);
    w.put<std::uint16_t>(k.layer);
    w.put<std::uint16_t>(k.timestep);
    w.put<std::uint16_t>(k.head);
    w.put<std::uint16_t>(0);
    detail::put_moments(w, s.queries[i], s.head_dim);
    detail::put_moments(w, s.keys[i], s.head_dim);
  }
  for (const auto& l : s.latents) detail::put_moments(w, l, s.latent_channels);
  return std::move(w.bytes());
}

inline void write_norm_stats(const NormStats& s, const std::filesystem::path& path) {
  write_file_synced(path, serialize_norm_stats(s));
}

inline NormStats parse_norm_stats(std::span<const std::uint8_t> bytes, const std::string& name) {
  ByteReader in(bytes, name);
  if (bytes.size() < 4 || !in.magic_is(snrm::kMagic)) throw FormatError(FormatErrc::bad_magic, name);
  const auto version = in.get<std::uint32_t>();
  if (version != snrm::kVersion) {
    throw FormatError(FormatErrc::bad_version, name + ": version " + std::to_string(version));
  }
  const auto steps = in.get<std::uint32_t>();
  const auto layers = in.get<std::uint32_t>();
  const auto heads = in.get<std::uint32_t>();
  const auto head_dim = in.get<std::uint32_t>();
  const auto channels = in.get<std::uint32_t>();
  const auto seed = in.get<std::uint64_t>();
  if (steps == 0 || layers == 0 || heads == 0 || head_dim == 0 || channels == 0 || steps > 0xffff ||
      layers > 0xffff || heads > 0xffff) {
    throw FormatError(FormatErrc::corrupt_index, name + ": invalid dimensions");
  }
  const std::uint64_t block = 8 + 17 * std::uint64_t{head_dim};
  const std::uint64_t need = std::uint64_t{steps} * layers * heads * (8 + 2 * block) + steps * (8 + 17 * std::uint64_t{channels});
  if (in.remaining() < need) throw FormatError(FormatErrc::truncated, name + ": payload shorter than header implies");
  NormStats s(steps, layers, heads, head_dim, channels, seed);
  for (std::size_t i = 0; i < s.key_count(); ++i) {
    const CacheKey expect = s.key_at(i);
    CacheKey got;
    got.layer = in.get<std::uint16_t>();
    got.timestep = in.get<std::uint16_t>();
    got.head = in.get<std::uint16_t>();
    in.get<std::uint16_t>();
    if (got != expect) {
      throw FormatError(FormatErrc::unsorted, name + ": expected " + to_string(expect) + ", found " + to_string(got));
    }
    s.queries[i] = detail::get_moments(in, head_dim);
    s.keys[i] = detail::get_moments(in, head_dim);
  }
  for (auto& l : s.latents) l = detail::get_moments(in, channels);
  if (in.remaining() != 0) throw FormatError(FormatErrc::corrupt_index, name + ": trailing bytes");
  return s;
}

inline NormStats read_norm_stats(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_norm_stats(bytes, path.string());
}

}  // namespace stylebank
