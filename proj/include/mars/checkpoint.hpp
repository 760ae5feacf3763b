#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "mars/config.hpp"
#include "mars/detector.hpp"

namespace mars {

/// On-disk layout, all integers little-endian:
///   [0..8)   magic "MARSCKPT"
///   [8..12)  u32 format version (currently 1)
///   [12..20) u64 header length in bytes
///   header   JSON: model config, seed, epoch, ordered tensor table
///   payload  f32 values, one run per table entry, in table order
///   last 32  SHA-256 over everything before it
inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'R', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f32le(std::string& out, float f) {
  put_u32le(out, std::bit_cast<std::uint32_t>(f));
}

inline float get_f32le(const unsigned char* p) {
  return std::bit_cast<float>(get_u32le(p));
}

inline std::array<unsigned char, 32> sha256(const void* data, size_t n) {
  std::array<unsigned char, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(data, n, out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
    throw IoError("sha256: digest computation failed");
  return out;
}

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  const Tensor* tensor = nullptr;  // save side
};

/// Parameters first, then buffers; construction order makes this stable.
inline std::vector<CheckpointEntry> checkpoint_entries(Model& model) {
  std::vector<CheckpointEntry> entries;
  for (Parameter* p : model.parameters())
    entries.push_back({p->name, p->value.shape, &p->value});
  for (auto& [name, tensor] : model.buffers())
    entries.push_back({name, tensor->shape, tensor});
  std::map<std::string, int> seen;
  for (const auto& e : entries)
    if (++seen[e.name] == 2)
      throw DataError("checkpoint: duplicate tensor name " + e.name);
  return entries;
}

}  // namespace detail

inline void save_checkpoint(Model& model, const std::string& path, int epoch = -1) {
  const auto entries = detail::checkpoint_entries(model);

  nlohmann::json header;
  header["format"] = kCheckpointVersion;
  header["model"] = model_config_to_json(model.cfg);
  header["seed"] = model.seed;
  header["epoch"] = epoch;
  auto& table = header["tensors"] = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json row;
    row["name"] = e.name;
    row["shape"] = e.shape;
    table.push_back(std::move(row));
  }
  const std::string header_bytes = header.dump();

  std::string blob;
  blob.reserve(20 + header_bytes.size());
  blob.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32le(blob, kCheckpointVersion);
  detail::put_u64le(blob, header_bytes.size());
  blob += header_bytes;
  for (const auto& e : entries)
    for (real v : e.tensor->data) detail::put_f32le(blob, static_cast<float>(v));

  const auto digest = detail::sha256(blob.data(), blob.size());
  blob.append(reinterpret_cast<const char*>(digest.data()), digest.size());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path + " for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("save_checkpoint: failed writing " + path);
}

struct LoadedCheckpoint {
  Model model;
  std::uint64_t seed = 0;
  int epoch = -1;
};

/// Refuses anything whose digest, layout, or tensor table does not line up
/// exactly with what the stored model config implies.
inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 20 + 32) throw DataError("load_checkpoint: " + path + ": truncated file");

  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const size_t body_size = blob.size() - 32;
  const auto digest = detail::sha256(blob.data(), body_size);
  if (std::memcmp(digest.data(), bytes + body_size, 32) != 0)
    throw DataError("load_checkpoint: " + path + ": content digest mismatch (corrupt or tampered file)");

  if (std::memcmp(blob.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw DataError("load_checkpoint: " + path + ": bad magic, not a checkpoint");
  const std::uint32_t version = detail::get_u32le(bytes + 8);
  if (version != kCheckpointVersion)
    throw DataError("load_checkpoint: " + path + ": unsupported format version " +
                    std::to_string(version));
  const std::uint64_t header_len = detail::get_u64le(bytes + 12);
  if (20 + header_len > body_size)
    throw DataError("load_checkpoint: " + path + ": header overruns file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(20, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_checkpoint: " + path + ": malformed header: " + e.what());
  }

  LoadedCheckpoint loaded;
  try {
    loaded.seed = header.at("seed").get<std::uint64_t>();
    loaded.epoch = header.value("epoch", -1);
    loaded.model = build_model(model_config_from_json(header.at("model")), loaded.seed);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_checkpoint: " + path + ": malformed header: " + e.what());
  }

  auto entries = detail::checkpoint_entries(loaded.model);
  const auto& table = header.at("tensors");

  // The stored table and the rebuilt model must name exactly the same tensors.
  std::map<std::string, const nlohmann::json*> stored;
  for (const auto& row : table) stored[row.at("name").get<std::string>()] = &row;
  std::string missing, unexpected;
  for (const auto& e : entries)
    if (!stored.count(e.name)) missing += (missing.empty() ? "" : ", ") + e.name;
  {
    std::map<std::string, bool> have;
    for (const auto& e : entries) have[e.name] = true;
    for (const auto& [name, row] : stored)
      if (!have.count(name)) unexpected += (unexpected.empty() ? "" : ", ") + name;
  }
  if (!missing.empty() || !unexpected.empty()) {
    std::string msg = "load_checkpoint: " + path + ": tensor table mismatch";
    if (!missing.empty()) msg += "; model expects but file lacks: " + missing;
    if (!unexpected.empty()) msg += "; file has but model lacks: " + unexpected;
    throw DataError(msg);
  }
  if (table.size() != entries.size())
    throw DataError("load_checkpoint: " + path + ": duplicate tensor table rows");

  size_t offset = 20 + header_len;
  size_t i = 0;
  for (const auto& row : table) {
    const auto name = row.at("name").get<std::string>();
    const auto shape = row.at("shape").get<std::vector<int>>();
    auto& e = entries[i++];
    if (name != e.name)
      throw DataError("load_checkpoint: " + path + ": tensor order mismatch at " + name);
    if (shape != e.shape)
      throw DataError("load_checkpoint: " + path + ": shape mismatch for " + name);
    Tensor* dst = const_cast<Tensor*>(e.tensor);
    const size_t need = static_cast<size_t>(dst->numel()) * 4;
    if (offset + need > body_size)
      throw DataError("load_checkpoint: " + path + ": payload truncated at " + name);
    for (auto& v : dst->data) {
      v = static_cast<real>(detail::get_f32le(bytes + offset));
      offset += 4;
    }
  }
  if (offset != body_size)
    throw DataError("load_checkpoint: " + path + ": trailing bytes after payload");
  return loaded;
}

}  // namespace mars
