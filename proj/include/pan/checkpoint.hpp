// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pan/dataset.hpp"
#include "pan/errors.hpp"
#include "pan/model.hpp"
#include "pan/rng.hpp"

namespace pan {

/// Container layout:
///   "PANCKPT1"
///   u64 metadata length, metadata bytes (canonical JSON)
///   repeated until end of file:
///     u64 name length, name bytes, u64 rank, rank x u64 dims, f64 data
/// All integers and floats little-endian.
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& get(std::string_view name) const {
    for (const auto& nt : tensors) {
      if (nt.name == name) return nt.tensor;
    }
    throw FormatError("checkpoint has no tensor '" + std::string(name) + "'");
  }
  bool has(std::string_view name) const {
    for (const auto& nt : tensors) {
      if (nt.name == name) return true;
    }
    return false;
  }
};

inline constexpr std::string_view kCheckpointMagic = "PANCKPT1";

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  const std::string meta = ckpt.metadata.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  for (const auto& nt : ckpt.tensors) {
    detail::put_le<std::uint64_t>(out, nt.name.size());
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    detail::put_le<std::uint64_t>(out, nt.tensor.rank());
    for (std::size_t d : nt.tensor.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : nt.tensor.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw FormatError("not a PANCKPT1 checkpoint (bad magic)");
  }
  std::size_t pos = kCheckpointMagic.size();
  const auto meta_len = detail::get_le<std::uint64_t>(bytes, pos);
  if (meta_len > bytes.size() - pos) throw FormatError("checkpoint metadata length exceeds file size");
  Checkpoint ckpt;
  try {
    ckpt.metadata = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                          bytes.begin() + static_cast<std::ptrdiff_t>(pos + meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  pos += meta_len;
  while (pos < bytes.size()) {
    const auto name_len = detail::get_le<std::uint64_t>(bytes, pos);
    if (name_len > bytes.size() - pos) throw FormatError("checkpoint tensor name runs past end of file");
    std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
    pos += name_len;
    const auto rank = detail::get_le<std::uint64_t>(bytes, pos);
    if (rank > 16) throw FormatError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      shape.push_back(detail::get_le<std::uint64_t>(bytes, pos));
      if (shape.back() == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
      numel *= shape.back();
    }
    if (numel > (bytes.size() - pos) / 8) throw FormatError("tensor '" + name + "' data runs past end of file");
    std::vector<double> data(numel);
    for (double& v : data) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos));
    ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_checkpoint(bytes);
}

inline Checkpoint model_checkpoint(const Model& model, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint c;
  c.metadata = std::move(extra);
  c.metadata["kind"] = c.metadata.value("kind", "model");
  c.metadata["architecture"] = model.architecture();
  c.tensors = model.state();
  return c;
}

/// Rebuilds a model from a checkpoint written by model_checkpoint.
inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  Architecture arch;
  try {
    arch = ckpt.metadata.at("architecture").get<Architecture>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint lacks a valid architecture: ") + e.what());
  }
  Model m(arch, Rng(0));
  m.load_state(ckpt.tensors);
  return m;
}

}  // namespace pan
