#pragma once

// SKVB: distilled style bank.
//
//   header   magic "SKVB" | u32 version | u32 n_style_images | u64 seed |
//            u32 k_policy_kind | f64 k_policy_scale | u32 entry_count                       (36 bytes)
//   index    entry_count x { u16 layer | u16 timestep | u16 head | u32 k | u32 dim | u64 byte_offset }  (22 bytes each)
//   payload  per entry: K (k x dim f32), V (k x dim f32), sources (k x { u32 reader | u32 row })
//
// Little-endian throughout, entries ascending by key, payloads contiguous.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "stylebank/attention_cache.hpp"
#include "stylebank/binary_io.hpp"
#include "stylebank/kmeans.hpp"
#include "stylebank/parallel.hpp"

namespace stylebank {

/// Where a bank row came from: cache position in the distill input and token row in that cache.
struct SourceIndex {
  std::uint32_t reader = 0;
  std::uint32_t row = 0;

  auto operator<=>(const SourceIndex&) const = default;
};

/// How many representatives to keep per key.
struct KPolicy {
  enum class Kind : std::uint32_t { scale = 0, saturate = 1 };

  Kind kind = Kind::scale;
  double scale = 1.0;  ///< multiple of the single-image token count (Kind::scale)

  static KPolicy single_image(double s = 1.0) { return {Kind::scale, s}; }
  static KPolicy saturated() { return {Kind::saturate, 1.0}; }

  /// `single` is the per-image token count at a key, `total` the pooled count.
  std::size_t k_for(std::size_t single, std::size_t total) const {
    if (kind == Kind::saturate) return total;
    const double k = std::round(scale * static_cast<double>(single));
    return static_cast<std::size_t>(std::clamp(k, 1.0, static_cast<double>(total)));
  }

  bool operator==(const KPolicy&) const = default;
};

struct BankEntry {
  CacheKey key;
  FeatureMatrix keys;    ///< k x dim
  FeatureMatrix values;  ///< k x dim
  std::vector<SourceIndex> sources;

  std::size_t k() const noexcept { return keys.rows(); }

  bool operator==(const BankEntry&) const = default;
};

/// Distilled representative key/value pairs per attention site.
struct StyleBank {
  std::uint32_t n_style_images = 0;
  std::uint64_t seed = 0;
  KPolicy policy;
  std::vector<BankEntry> entries;  ///< ascending by key

  const BankEntry* find(const CacheKey& key) const noexcept {
    auto it = std::lower_bound(entries.begin(), entries.end(), key,
                               [](const BankEntry& e, const CacheKey& k) { return e.key < k; });
    return (it != entries.end() && it->key == key) ? &*it : nullptr;
  }

  /// Number of sampling steps covered (largest timestep index + 1).
  std::size_t steps() const noexcept {
    std::size_t s = 0;
    for (const auto& e : entries) s = std::max<std::size_t>(s, e.key.timestep + 1u);
    return s;
  }

  /// Bytes of K and V floats, comparable to CacheReader::payload_bytes.
  std::uint64_t payload_bytes() const noexcept {
    std::uint64_t total = 0;
    for (const auto& e : entries) total += 2ull * e.keys.size() * sizeof(float);
    return total;
  }

  bool operator==(const StyleBank&) const = default;
};

struct DistillOptions {
  KMeansOptions kmeans;
  unsigned threads = 1;
};

namespace detail {

inline std::uint64_t key_salt(const CacheKey& k) {
  return (static_cast<std::uint64_t>(k.layer) << 32) | (static_cast<std::uint64_t>(k.timestep) << 16) | k.head;
}

inline void check_same_key_sets(std::span<const CacheReader* const> caches) {
  std::set<CacheKey> all;
  for (const auto* c : caches)
    for (const auto& r : c->index()) all.insert(r.key);
  std::string missing;
  for (const auto* c : caches) {
    if (c->index().size() == all.size()) continue;
    for (const auto& key : all) {
      if (!c->find(key)) missing += "\n  " + c->path() + " lacks " + to_string(key);
    }
  }
  if (!missing.empty()) throw FormatError(FormatErrc::not_found, "inconsistent key sets:" + missing);
}

}  // namespace detail

/// Compresses the attention features of several style images into one
/// bank. Every key is handled independently: rows from all caches are
/// pooled, the value rows are clustered, and the value row nearest each
/// centroid is kept with its paired key row. Rows are stored in ascending
/// source order. Per-key seeds are derived from `seed` and the key, so the
/// result does not depend on the thread count.
inline StyleBank distill(std::span<const CacheReader* const> caches, KPolicy policy, std::uint64_t seed,
                         const DistillOptions& options = {}) {
  if (caches.empty()) throw InvalidArgument("distill: no caches");
  detail::check_same_key_sets(caches);

  StyleBank bank;
  bank.n_style_images = static_cast<std::uint32_t>(caches.size());
  bank.seed = seed;
  bank.policy = policy;
  const auto index = caches.front()->index();
  bank.entries.resize(index.size());

  parallel_for(index.size(), options.threads, [&](std::size_t i) {
    const CacheKey key = index[i].key;
    CacheEntry pooled = iter_group(caches, key);

    std::vector<SourceIndex> origin;
    origin.reserve(pooled.n_tokens());
    std::size_t token_sum = 0;
    for (std::size_t r = 0; r < caches.size(); ++r) {
      const auto n = caches[r]->require(key).n_tokens;
      token_sum += n;
      for (std::uint32_t t = 0; t < n; ++t) origin.push_back({static_cast<std::uint32_t>(r), t});
    }
    const auto single = static_cast<std::size_t>(
        std::llround(static_cast<double>(token_sum) / static_cast<double>(caches.size())));
    const std::size_t k = policy.k_for(single, pooled.n_tokens());

    const auto clusters = kmeans(pooled.values, k, mix_seed(seed, detail::key_salt(key)), options.kmeans);
    auto reps = select_representatives(pooled.values, pooled.keys, clusters);

    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return reps.rows[a] < reps.rows[b]; });

    BankEntry& e = bank.entries[i];
    e.key = key;
    e.keys = FeatureMatrix(k, pooled.dim());
    e.values = FeatureMatrix(k, pooled.dim());
    e.sources.resize(k);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src = order[j];
      std::copy(reps.keys.row(src).begin(), reps.keys.row(src).end(), e.keys.row(j).begin());
      std::copy(reps.values.row(src).begin(), reps.values.row(src).end(), e.values.row(j).begin());
      e.sources[j] = origin[reps.rows[src]];
    }
  });
  return bank;
}

inline StyleBank distill(std::span<const CacheReader> caches, KPolicy policy, std::uint64_t seed,
                         const DistillOptions& options = {}) {
  std::vector<const CacheReader*> ptrs;
  for (const auto& c : caches) ptrs.push_back(&c);
  return distill(std::span<const CacheReader* const>(ptrs), policy, seed, options);
}

namespace skvb {
inline constexpr char kMagic[5] = "SKVB";
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 36;
inline constexpr std::size_t kIndexEntryBytes = 22;
}  // namespace skvb

inline std::vector<std::uint8_t> serialize_bank(const StyleBank& bank) {
  detail::check_sorted_unique(bank.entries, [](const BankEntry& e) -> const CacheKey& { return e.key; }, "bank");
  ByteWriter w;
  w.put_magic(skvb::kMagic);
  w.put<std::uint32_t>(skvb::kVersion);
  w.put<std::uint32_t>(bank.n_style_images);
  w.put<std::uint64_t>(bank.seed);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bank.policy.kind));
  w.put<double>(bank.policy.scale);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bank.entries.size()));
  std::uint64_t offset = skvb::kHeaderBytes + skvb::kIndexEntryBytes * bank.entries.size();
  for (const auto& e : bank.entries) {
    detail::check_pair_shape(e.keys, e.values, e.key);
    if (e.sources.size() != e.k()) {
      throw FormatError(FormatErrc::shape_mismatch, "source table size differs from k at " + to_string(e.key));
    }
    w.put<std::uint16_t>(e.key.layer);
    w.put<std::uint16_t>(e.key.timestep);
    w.put<std::uint16_t>(e.key.head);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.k()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.keys.cols()));
    w.put<std::uint64_t>(offset);
    offset += 2ull * e.keys.size() * sizeof(float) + e.k() * 8ull;
  }
  for (const auto& e : bank.entries) {
    w.put_floats(e.keys.data());
    w.put_floats(e.values.data());
    for (const auto& s : e.sources) {
      w.put<std::uint32_t>(s.reader);
      w.put<std::uint32_t>(s.row);
    }
  }
  return std::move(w.bytes());
}

/// Absolute payload offset of every entry as laid out by serialize_bank.
inline std::vector<std::uint64_t> bank_offsets(const StyleBank& bank) {
  std::vector<std::uint64_t> out;
  std::uint64_t offset = skvb::kHeaderBytes + skvb::kIndexEntryBytes * bank.entries.size();
  for (const auto& e : bank.entries) {
    out.push_back(offset);
    offset += 2ull * e.keys.size() * sizeof(float) + e.k() * 8ull;
  }
  return out;
}

inline void write_bank(const StyleBank& bank, const std::filesystem::path& path) {
  write_file_synced(path, serialize_bank(bank));
}

inline StyleBank parse_bank(std::span<const std::uint8_t> bytes, const std::string& name) {
  ByteReader in(bytes, name);
  if (bytes.size() < 4 || !in.magic_is(skvb::kMagic)) {
    if (bytes.size() < 4) throw FormatError(FormatErrc::truncated, name + ": shorter than magic");
    throw FormatError(FormatErrc::bad_magic, name);
  }
  const auto version = in.get<std::uint32_t>();
  if (version != skvb::kVersion) throw FormatError(FormatErrc::bad_version, name + ": version " + std::to_string(version));
  StyleBank bank;
  bank.n_style_images = in.get<std::uint32_t>();
  bank.seed = in.get<std::uint64_t>();
  const auto kind = in.get<std::uint32_t>();
  if (kind > 1) throw FormatError(FormatErrc::corrupt_index, name + ": unknown k policy " + std::to_string(kind));
  bank.policy.kind = static_cast<KPolicy::Kind>(kind);
  bank.policy.scale = in.get<double>();
  const auto count = in.get<std::uint32_t>();

  struct Rec {
    CacheKey key;
    std::uint32_t k, dim;
    std::uint64_t offset;
  };
  std::vector<Rec> recs(count);
  std::uint64_t expected = skvb::kHeaderBytes + skvb::kIndexEntryBytes * static_cast<std::uint64_t>(count);
  for (auto& r : recs) {
    r.key.layer = in.get<std::uint16_t>();
    r.key.timestep = in.get<std::uint16_t>();
    r.key.head = in.get<std::uint16_t>();
    r.k = in.get<std::uint32_t>();
    r.dim = in.get<std::uint32_t>();
    r.offset = in.get<std::uint64_t>();
    if (r.k == 0 || r.dim == 0 || r.offset != expected) {
      throw FormatError(FormatErrc::corrupt_index, name + ": bad index record at " + to_string(r.key));
    }
    expected += 2ull * r.k * r.dim * sizeof(float) + r.k * 8ull;
  }
  for (std::size_t i = 1; i < recs.size(); ++i) {
    if (!(recs[i - 1].key < recs[i].key)) {
      throw FormatError(FormatErrc::corrupt_index, name + ": keys out of order at " + to_string(recs[i].key));
    }
  }
  if (bytes.size() < expected) {
    throw FormatError(FormatErrc::truncated, name + ": payload needs " + std::to_string(expected) + " bytes, file has " +
                                                 std::to_string(bytes.size()));
  }
  bank.entries.reserve(count);
  for (const auto& r : recs) {
    BankEntry e{r.key, FeatureMatrix(r.k, r.dim), FeatureMatrix(r.k, r.dim), std::vector<SourceIndex>(r.k)};
    in.get_bytes(e.keys.data().data(), e.keys.size() * sizeof(float));
    in.get_bytes(e.values.data().data(), e.values.size() * sizeof(float));
    for (auto& s : e.sources) {
      s.reader = in.get<std::uint32_t>();
      s.row = in.get<std::uint32_t>();
    }
    bank.entries.push_back(std::move(e));
  }
  return bank;
}

inline StyleBank open_bank(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_bank(bytes, path.string());
}

}  // namespace stylebank
