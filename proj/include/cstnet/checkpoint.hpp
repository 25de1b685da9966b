// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cstnet/tensor.hpp"

namespace cstnet {

/// One named tensor inside a checkpoint. Values are always stored as 32-bit
/// little-endian reals regardless of the in-memory scalar type.
struct CkptEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// In-memory checkpoint: version + entries sorted lexicographically by name.
///
/// Binary layout (all integers little-endian):
///   magic "CSTCKPT\0" | u32 version | u64 entry count
///   per entry: u32 name length | name bytes | u32 rank | i64 extents...
///              | f32 values...
///   trailing u64 FNV-1a digest of every byte between the magic and the digest
struct Checkpoint {
  std::uint32_t version = 1;
  std::vector<CkptEntry> entries;

  void sort_entries();
  const CkptEntry* find(const std::string& name) const;
};

inline constexpr char kCkptMagic[8] = {'C', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull);

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint_file(const std::string& path);

/// Drops every entry under the fusion namespace, producing a checkpoint
/// loadable by the small variant. Names are unchanged. If the input has no
/// fusion entries the result is an identical copy and *was_noop is set.
Checkpoint transfer_to_small(const Checkpoint& full, bool* was_noop = nullptr);

inline constexpr const char* kFusionPrefix = "fusion.";

}  // namespace cstnet
