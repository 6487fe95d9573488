#pragma once

// SKVC: on-disk store of self-attention key/value pairs for one style image.
//
//   header   magic "SKVC" | u32 format_version | u64 source_image_id | u32 entry_count      (20 bytes)
//   index    entry_count x { u16 layer | u16 timestep | u16 head | u32 n_tokens | u32 dim | u64 byte_offset }  (22 bytes each)
//   payload  per entry, at byte_offset: K (n_tokens x dim f32) then V (n_tokens x dim f32)
//
// All integers and floats are little-endian, no padding. Entries are stored in
// ascending (layer, timestep, head) order and payloads are contiguous.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stylebank/binary_io.hpp"
#include "stylebank/error.hpp"
#include "stylebank/matrix.hpp"

namespace stylebank {

/// Identifies one self-attention site. timestep is the sampling schedule
/// index (0 = most noised), not the raw diffusion time.
struct CacheKey {
  std::uint16_t layer = 0;
  std::uint16_t timestep = 0;
  std::uint16_t head = 0;

  auto operator<=>(const CacheKey&) const = default;
};

inline std::string to_string(const CacheKey& k) {
  return "(layer " + std::to_string(k.layer) + ", timestep " + std::to_string(k.timestep) + ", head " +
         std::to_string(k.head) + ")";
}

/// Row i of `keys` and row i of `values` belong to the same token.
struct CacheEntry {
  CacheKey key;
  FeatureMatrix keys;
  FeatureMatrix values;

  std::size_t n_tokens() const noexcept { return keys.rows(); }
  std::size_t dim() const noexcept { return keys.cols(); }
};

namespace skvc {

inline constexpr char kMagic[5] = "SKVC";
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 20;
inline constexpr std::size_t kIndexEntryBytes = 22;

struct IndexRecord {
  CacheKey key;
  std::uint32_t n_tokens = 0;
  std::uint32_t dim = 0;
  std::uint64_t byte_offset = 0;

  std::uint64_t payload_bytes() const noexcept { return 2ull * n_tokens * dim * sizeof(float); }
};

}  // namespace skvc

namespace detail {

/// Shared validation for containers whose entries must be strictly ascending.
template <class Range, class KeyOf>
void check_sorted_unique(const Range& entries, KeyOf key_of, const std::string& what) {
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const CacheKey& prev = key_of(entries[i - 1]);
    const CacheKey& cur = key_of(entries[i]);
    if (cur == prev) throw FormatError(FormatErrc::duplicate_key, what + ": " + to_string(cur));
    if (cur < prev) {
      throw FormatError(FormatErrc::unsorted, what + ": " + to_string(cur) + " follows " + to_string(prev));
    }
  }
}

inline void check_pair_shape(const FeatureMatrix& k, const FeatureMatrix& v, const CacheKey& key) {
  if (k.rows() != v.rows() || k.cols() != v.cols()) {
    throw FormatError(FormatErrc::shape_mismatch, "keys and values differ in shape at " + to_string(key));
  }
  if (k.rows() == 0 || k.cols() == 0) {
    throw FormatError(FormatErrc::shape_mismatch, "empty entry at " + to_string(key));
  }
}

inline std::span<const std::uint8_t> as_bytes(const FeatureMatrix& m) {
  return {reinterpret_cast<const std::uint8_t*>(m.data().data()), m.size() * sizeof(float)};
}

}  // namespace detail

/// Writes `entries` (ascending keys, no duplicates) as an SKVC file and
/// fsyncs it.
inline void write_cache(std::span<const CacheEntry> entries, const std::filesystem::path& path,
                        std::uint64_t source_image_id = 0) {
  detail::check_sorted_unique(entries, [](const CacheEntry& e) -> const CacheKey& { return e.key; },
                              path.string());
  for (const auto& e : entries) detail::check_pair_shape(e.keys, e.values, e.key);

  ByteWriter head;
  head.put_magic(skvc::kMagic);
  head.put<std::uint32_t>(skvc::kVersion);
  head.put<std::uint64_t>(source_image_id);
  head.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = skvc::kHeaderBytes + skvc::kIndexEntryBytes * entries.size();
  for (const auto& e : entries) {
    head.put<std::uint16_t>(e.key.layer);
    head.put<std::uint16_t>(e.key.timestep);
    head.put<std::uint16_t>(e.key.head);
    head.put<std::uint32_t>(static_cast<std::uint32_t>(e.n_tokens()));
    head.put<std::uint32_t>(static_cast<std::uint32_t>(e.dim()));
    head.put<std::uint64_t>(offset);
    offset += 2ull * e.n_tokens() * e.dim() * sizeof(float);
  }

  File f = File::create(path);
  f.write_all(head.bytes());
  for (const auto& e : entries) {
    f.write_all(detail::as_bytes(e.keys));
    f.write_all(detail::as_bytes(e.values));
  }
  f.sync();
}

/// Read handle on an SKVC file. Opening loads header and index only;
/// payloads are fetched per entry with positioned reads, so a reader can be
/// shared by concurrent threads.
class CacheReader {
 public:
  static CacheReader open(const std::filesystem::path& path) {
    CacheReader r;
    r.file_ = File::open_read(path);
    const std::string name = path.string();
    const std::uint64_t file_size = r.file_.size();
    if (file_size < skvc::kHeaderBytes) {
      throw FormatError(FormatErrc::truncated, name + ": header needs " + std::to_string(skvc::kHeaderBytes) +
                                                   " bytes, file has " + std::to_string(file_size));
    }
    std::vector<std::uint8_t> header(skvc::kHeaderBytes);
    r.file_.pread_exact(header, 0);
    ByteReader in(header, name);
    if (!in.magic_is(skvc::kMagic)) throw FormatError(FormatErrc::bad_magic, name);
    const auto version = in.get<std::uint32_t>();
    if (version != skvc::kVersion) {
      throw FormatError(FormatErrc::bad_version, name + ": version " + std::to_string(version));
    }
    r.source_image_id_ = in.get<std::uint64_t>();
    const auto count = in.get<std::uint32_t>();

    const std::uint64_t index_bytes = skvc::kIndexEntryBytes * static_cast<std::uint64_t>(count);
    if (file_size < skvc::kHeaderBytes + index_bytes) {
      throw FormatError(FormatErrc::truncated, name + ": index of " + std::to_string(count) + " entries is cut short");
    }
    std::vector<std::uint8_t> index(index_bytes);
    if (!index.empty()) r.file_.pread_exact(index, skvc::kHeaderBytes);
    ByteReader idx(index, name);
    r.index_.reserve(count);
    std::uint64_t expected_offset = skvc::kHeaderBytes + index_bytes;
    for (std::uint32_t i = 0; i < count; ++i) {
      skvc::IndexRecord rec;
      rec.key.layer = idx.get<std::uint16_t>();
      rec.key.timestep = idx.get<std::uint16_t>();
      rec.key.head = idx.get<std::uint16_t>();
      rec.n_tokens = idx.get<std::uint32_t>();
      rec.dim = idx.get<std::uint32_t>();
      rec.byte_offset = idx.get<std::uint64_t>();
      if (rec.n_tokens == 0 || rec.dim == 0) {
        throw FormatError(FormatErrc::corrupt_index, name + ": empty entry " + to_string(rec.key));
      }
      if (rec.byte_offset != expected_offset) {
        throw FormatError(FormatErrc::corrupt_index, name + ": entry " + to_string(rec.key) + " at offset " +
                                                         std::to_string(rec.byte_offset) + ", expected " +
                                                         std::to_string(expected_offset));
      }
      if (!r.index_.empty() && !(r.index_.back().key < rec.key)) {
        throw FormatError(FormatErrc::corrupt_index, name + ": keys out of order at " + to_string(rec.key));
      }
      expected_offset += rec.payload_bytes();
      r.index_.push_back(rec);
    }
    if (file_size < expected_offset) {
      throw FormatError(FormatErrc::truncated, name + ": payload needs " + std::to_string(expected_offset) +
                                                   " bytes, file has " + std::to_string(file_size));
    }
    return r;
  }

  std::span<const skvc::IndexRecord> index() const noexcept { return index_; }
  std::uint64_t source_image_id() const noexcept { return source_image_id_; }
  const std::string& path() const noexcept { return file_.path(); }
  std::uint64_t bytes_read() const noexcept { return file_.bytes_read(); }

  const skvc::IndexRecord* find(const CacheKey& key) const noexcept {
    auto it = std::lower_bound(index_.begin(), index_.end(), key,
                               [](const skvc::IndexRecord& r, const CacheKey& k) { return r.key < k; });
    return (it != index_.end() && it->key == key) ? &*it : nullptr;
  }

  const skvc::IndexRecord& require(const CacheKey& key) const {
    const auto* rec = find(key);
    if (!rec) throw FormatError(FormatErrc::not_found, path() + ": " + to_string(key));
    return *rec;
  }

  /// Copies the entry's keys and values into caller buffers of
  /// n_tokens x dim floats each.
  void read_into(const skvc::IndexRecord& rec, std::span<float> keys, std::span<float> values) const {
    const std::size_t floats = static_cast<std::size_t>(rec.n_tokens) * rec.dim;
    if (keys.size() != floats || values.size() != floats) {
      throw InvalidArgument("read_into: destination size does not match entry " + to_string(rec.key));
    }
    file_.pread_exact({reinterpret_cast<std::uint8_t*>(keys.data()), keys.size_bytes()}, rec.byte_offset);
    file_.pread_exact({reinterpret_cast<std::uint8_t*>(values.data()), values.size_bytes()},
                      rec.byte_offset + floats * sizeof(float));
  }

  CacheEntry read_entry(const CacheKey& key) const {
    const auto& rec = require(key);
    CacheEntry e{key, FeatureMatrix(rec.n_tokens, rec.dim), FeatureMatrix(rec.n_tokens, rec.dim)};
    read_into(rec, e.keys.data(), e.values.data());
    return e;
  }

  /// Payload size (K and V floats) of the whole file.
  std::uint64_t payload_bytes() const noexcept {
    std::uint64_t total = 0;
    for (const auto& r : index_) total += r.payload_bytes();
    return total;
  }

 private:
  File file_;
  std::uint64_t source_image_id_ = 0;
  std::vector<skvc::IndexRecord> index_;
};

inline CacheReader open_cache(const std::filesystem::path& path) { return CacheReader::open(path); }

inline CacheEntry read_entry(const CacheReader& reader, const CacheKey& key) { return reader.read_entry(key); }

/// Concatenates the rows stored under `key` across `readers`: reader order,
/// then token order. Each reader's payload is read straight into its slice
/// of the output.
inline CacheEntry iter_group(std::span<const CacheReader* const> readers, const CacheKey& key) {
  if (readers.empty()) throw InvalidArgument("iter_group: no readers");
  std::size_t total = 0;
  std::uint32_t dim = 0;
  std::vector<const skvc::IndexRecord*> recs;
  recs.reserve(readers.size());
  for (const CacheReader* r : readers) {
    const auto& rec = r->require(key);
    if (recs.empty()) {
      dim = rec.dim;
    } else if (rec.dim != dim) {
      throw FormatError(FormatErrc::shape_mismatch, r->path() + ": dim " + std::to_string(rec.dim) + " at " +
                                                        to_string(key) + ", group uses " + std::to_string(dim));
    }
    total += rec.n_tokens;
    recs.push_back(&rec);
  }
  CacheEntry out{key, FeatureMatrix(total, dim), FeatureMatrix(total, dim)};
  std::size_t row = 0;
  for (std::size_t i = 0; i < readers.size(); ++i) {
    const std::size_t floats = static_cast<std::size_t>(recs[i]->n_tokens) * dim;
    readers[i]->read_into(*recs[i], out.keys.data().subspan(row * dim, floats),
                          out.values.data().subspan(row * dim, floats));
    row += recs[i]->n_tokens;
  }
  return out;
}

inline CacheEntry iter_group(std::span<const CacheReader> readers, const CacheKey& key) {
  std::vector<const CacheReader*> ptrs;
  ptrs.reserve(readers.size());
  for (const auto& r : readers) ptrs.push_back(&r);
  return iter_group(std::span<const CacheReader* const>(ptrs), key);
}

}  // namespace stylebank
