// Copyright 2026 The cstnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "cstnet/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "cstnet/error.hpp"

namespace cstnet {

namespace {

void put_bytes(std::vector<std::uint8_t>& buf, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  buf.insert(buf.end(), b, b + n);
}

template <typename T>
void put_le(std::vector<std::uint8_t>& buf, T v) {
  // Host is little-endian on every supported target; serialize bytes as-is.
  put_bytes(buf, &v, sizeof(T));
}

struct Reader {
  const std::uint8_t* p;
  const std::uint8_t* end;

  void take(void* out, std::size_t n) {
    if (std::size_t(end - p) < n) throw IoError("checkpoint: truncated file");
    std::memcpy(out, p, n);
    p += n;
  }
  template <typename T>
  T le() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
};

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* b = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

void Checkpoint::sort_entries() {
  std::sort(entries.begin(), entries.end(),
            [](const CkptEntry& a, const CkptEntry& b) { return a.name < b.name; });
}

const CkptEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
  Checkpoint sorted = ckpt;
  sorted.sort_entries();

  std::vector<std::uint8_t> payload;
  put_le(payload, sorted.version);
  put_le(payload, std::uint64_t(sorted.entries.size()));
  for (const CkptEntry& e : sorted.entries) {
    if (shape_numel(e.shape) != Index(e.data.size()))
      throw ContractError("checkpoint entry '" + e.name + "': data length " +
                          std::to_string(e.data.size()) + " does not match shape " +
                          shape_str(e.shape));
    put_le(payload, std::uint32_t(e.name.size()));
    put_bytes(payload, e.name.data(), e.name.size());
    put_le(payload, std::uint32_t(e.shape.size()));
    for (Index ext : e.shape) put_le(payload, std::int64_t(ext));
    put_bytes(payload, e.data.data(), e.data.size() * sizeof(float));
  }
  const std::uint64_t digest = fnv1a64(payload.data(), payload.size());

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCkptMagic, sizeof(kCkptMagic));
  os.write(reinterpret_cast<const char*>(payload.data()),
           std::streamsize(payload.size()));
  os.write(reinterpret_cast<const char*>(&digest), sizeof(digest));
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kCkptMagic) + sizeof(std::uint64_t))
    throw IoError("checkpoint: file too short: '" + path + "'");
  if (std::memcmp(bytes.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw IoError("checkpoint: bad magic in '" + path + "'");

  const std::size_t payload_len = bytes.size() - sizeof(kCkptMagic) - sizeof(std::uint64_t);
  const std::uint8_t* payload = bytes.data() + sizeof(kCkptMagic);
  std::uint64_t stored_digest;
  std::memcpy(&stored_digest, payload + payload_len, sizeof(stored_digest));
  const std::uint64_t digest = fnv1a64(payload, payload_len);
  if (digest != stored_digest)
    throw IoError("checkpoint: digest mismatch in '" + path + "' (stored " +
                  std::to_string(stored_digest) + ", computed " + std::to_string(digest) + ")");

  Reader r{payload, payload + payload_len};
  Checkpoint ckpt;
  ckpt.version = r.le<std::uint32_t>();
  if (ckpt.version != 1)
    throw IoError("checkpoint: unsupported format version " + std::to_string(ckpt.version));
  const std::uint64_t count = r.le<std::uint64_t>();
  ckpt.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CkptEntry e;
    const std::uint32_t name_len = r.le<std::uint32_t>();
    e.name.resize(name_len);
    r.take(e.name.data(), name_len);
    const std::uint32_t rank = r.le<std::uint32_t>();
    e.shape.resize(rank);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape[d] = r.le<std::int64_t>();
    const Index numel = shape_numel(e.shape);
    if (rank == 0 || numel < 1) throw IoError("checkpoint: bad shape for entry '" + e.name + "'");
    e.data.resize(std::size_t(numel));
    r.take(e.data.data(), std::size_t(numel) * sizeof(float));
    ckpt.entries.push_back(std::move(e));
  }
  if (r.p != r.end) throw IoError("checkpoint: trailing bytes in '" + path + "'");
  return ckpt;
}

Checkpoint transfer_to_small(const Checkpoint& full, bool* was_noop) {
  Checkpoint out;
  out.version = full.version;
  bool dropped = false;
  for (const CkptEntry& e : full.entries) {
    if (e.name.rfind(kFusionPrefix, 0) == 0) {
      dropped = true;
      continue;
    }
    out.entries.push_back(e);
  }
  if (was_noop) *was_noop = !dropped;
  out.sort_entries();
  return out;
}

}  // namespace cstnet
