// Copyright 2026 The lidarclip-cpp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Embedding store keyed by (sample id, modality) and its LCEB file format:
//
//   "LCEB" | u16 version = 1 | u32 d | u64 count |
//   count x { u16 id_len | id bytes | u8 modality | d x f32 }
//
// All integers and floats are little-endian.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lidarclip/binary_io.hpp"
#include "lidarclip/embedding.hpp"
#include "lidarclip/error.hpp"

namespace lidarclip {

/// A read-only view of one modality: (id, vector) pairs in ascending id
/// order. Views borrow from the store and are invalidated by writes.
struct ModalityView {
  struct Entry {
    const std::string* id;
    std::span<const float> vector;
  };
  Modality modality = Modality::kImage;
  std::vector<Entry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

class EmbeddingStore {
 public:
  using Key = std::pair<std::string, Modality>;

  EmbeddingStore() = default;
  explicit EmbeddingStore(std::uint32_t dim) : dim_(dim) {}

  /// Dimension shared by every entry; 0 while the store is empty and no
  /// dimension has been fixed.
  std::uint32_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Insert or replace the entry for (e.id, e.modality).
  void put(const Embedding& e) { put(e.id, e.modality, e.vector); }

  void put(const std::string& id, Modality modality, std::span<const float> vector) {
    if (id.empty()) fail(ErrorCode::kInvalidArgument, "embedding id must be non-empty");
    if (id.size() > 0xffff) fail(ErrorCode::kInvalidArgument, "embedding id longer than 65535 bytes");
    if (vector.empty()) fail(ErrorCode::kDimensionMismatch, "embedding vector is empty");
    if (dim_ != 0 && vector.size() != dim_) {
      fail(ErrorCode::kDimensionMismatch, "embedding '" + id + "' has dimension " + std::to_string(vector.size()) +
                                              ", store has " + std::to_string(dim_));
    }
    for (float v : vector) {
      if (!std::isfinite(v)) fail(ErrorCode::kNumeric, "embedding '" + id + "' contains non-finite values");
    }
    dim_ = static_cast<std::uint32_t>(vector.size());
    entries_[{id, modality}] = std::vector<float>(vector.begin(), vector.end());
  }

  std::optional<Embedding> get(const std::string& id, Modality modality) const {
    auto it = entries_.find({id, modality});
    if (it == entries_.end()) return std::nullopt;
    return Embedding{id, modality, it->second};
  }

  const std::vector<float>* find(const std::string& id, Modality modality) const {
    auto it = entries_.find({id, modality});
    return it == entries_.end() ? nullptr : &it->second;
  }

  bool contains(const std::string& id, Modality modality) const { return entries_.count({id, modality}) != 0; }

  /// Ascending (id, modality) scan.
  const std::map<Key, std::vector<float>>& entries() const { return entries_; }

  ModalityView view(Modality modality) const {
    ModalityView v;
    v.modality = modality;
    for (const auto& [key, vec] : entries_) {
      if (key.second == modality) v.entries.push_back({&key.first, vec});
    }
    return v;
  }

  /// Distinct sample ids holding at least one of the given modalities.
  std::vector<std::string> ids(std::initializer_list<Modality> modalities = {Modality::kImage, Modality::kLidar}) const {
    std::vector<std::string> out;
    for (const auto& [key, _] : entries_) {
      bool want = false;
      for (Modality m : modalities) want = want || key.second == m;
      if (want && (out.empty() || out.back() != key.first)) out.push_back(key.first);
    }
    return out;
  }

  /// Copies every entry of `other` into this store (other wins on conflicts).
  void merge(const EmbeddingStore& other) {
    for (const auto& [key, vec] : other.entries_) put(key.first, key.second, vec);
  }

 private:
  std::uint32_t dim_ = 0;
  std::map<Key, std::vector<float>> entries_;
};

inline constexpr std::uint16_t kStoreVersion = 1;

inline std::vector<std::uint8_t> encode_store(const EmbeddingStore& store) {
  io::ByteWriter w;
  w.magic("LCEB");
  w.put<std::uint16_t>(kStoreVersion);
  w.put<std::uint32_t>(store.dim());
  w.put<std::uint64_t>(store.size());
  for (const auto& [key, vec] : store.entries()) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(key.first.size()));
    w.raw({reinterpret_cast<const std::uint8_t*>(key.first.data()), key.first.size()});
    w.put<std::uint8_t>(static_cast<std::uint8_t>(key.second));
    w.floats(vec);
  }
  return w.bytes();
}

/// Validates magic, version, counts, modality bytes, finiteness and key
/// uniqueness. Never reserves more records than the bytes can hold.
inline EmbeddingStore decode_store(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("LCEB");
  if (r.remaining() < 2) fail(ErrorCode::kTruncated, "LCEB header truncated");
  const auto version = r.get<std::uint16_t>();
  if (version != kStoreVersion) fail(ErrorCode::kUnsupportedVersion, "unsupported LCEB version " + std::to_string(version));
  const auto dim = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (count > 0 && dim == 0) fail(ErrorCode::kFormat, "LCEB declares records with dimension 0");
  const std::uint64_t min_record = 2 + 1 + 1 + 4ull * dim;
  if (count > r.remaining() / min_record) fail(ErrorCode::kTruncated, "LCEB file shorter than its declared record count");

  EmbeddingStore store(dim);
  std::vector<float> vec(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id_len = r.get<std::uint16_t>();
    auto id_bytes = r.take(id_len);
    std::string id(id_bytes.begin(), id_bytes.end());
    const auto mod = r.get<std::uint8_t>();
    if (mod > static_cast<std::uint8_t>(Modality::kText)) {
      fail(ErrorCode::kFormat, "record " + std::to_string(i) + " has unknown modality byte " + std::to_string(mod));
    }
    r.floats(vec);
    if (id.empty()) fail(ErrorCode::kFormat, "record " + std::to_string(i) + " has an empty id");
    if (store.contains(id, static_cast<Modality>(mod))) {
      fail(ErrorCode::kFormat, "duplicate record for '" + id + "'");
    }
    for (float v : vec) {
      if (!std::isfinite(v)) fail(ErrorCode::kFormat, "record '" + id + "' contains non-finite values");
    }
    store.put(id, static_cast<Modality>(mod), vec);
  }
  if (r.remaining() != 0) fail(ErrorCode::kFormat, "trailing bytes after the last LCEB record");
  return store;
}

inline void write_store(const EmbeddingStore& store, const std::string& path) {
  io::write_file_bytes(path, encode_store(store));
}

inline EmbeddingStore read_store(const std::string& path) { return decode_store(io::read_file_bytes(path)); }

}  // namespace lidarclip
