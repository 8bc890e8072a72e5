// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pan/corruption.hpp"
#include "pan/errors.hpp"
#include "pan/rng.hpp"
#include "pan/tensor.hpp"

namespace pan {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageValues = kImageChannels * kImageSide * kImageSide;

struct LabeledImage {
  Tensor image;  // [3 x 32 x 32], values in [0, 1]
  std::size_t label = 0;
};

struct CorruptedSample {
  LabeledImage item;
  std::size_t corruption = 0;  // registry id
  Severity severity{1};
};

inline const Tensor& image_of(const LabeledImage& s) { return s.image; }
inline const Tensor& image_of(const CorruptedSample& s) { return s.item.image; }

// ---------------------------------------------------------------------------
// Little-endian byte helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("unexpected end of data at byte " + std::to_string(pos));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[pos + i]) << (8 * i);
  pos += sizeof(U);
  return v;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("short write to '" + path.string() + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CIFAR-10 binary format: per record 1 label byte then 1024 R, 1024 G,
// 1024 B bytes, row-major.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 1 + kImageValues;

inline std::vector<LabeledImage> read_cifar10_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("CIFAR-10 data length " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes) + " (record " + std::to_string(bytes.size() / kCifarRecordBytes) +
                      " truncated)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError("CIFAR-10 record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    }
    std::vector<double> px(kImageValues);
    for (std::size_t i = 0; i < kImageValues; ++i) px[i] = static_cast<double>(rec[1 + i]) / 255.0;
    out.push_back({Tensor({kImageChannels, kImageSide, kImageSide}, std::move(px)), rec[0]});
  }
  return out;
}

inline std::vector<LabeledImage> read_cifar10_file(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return read_cifar10_binary(bytes);
}

/// Inverse of read_cifar10_binary for images whose values are k/255.
inline std::vector<std::uint8_t> write_cifar10_binary(std::span<const LabeledImage> images) {
  std::vector<std::uint8_t> out;
  out.reserve(images.size() * kCifarRecordBytes);
  for (const auto& im : images) {
    if (im.label > 9) throw ParameterError("CIFAR-10 label must be 0-9");
    if (im.image.numel() != kImageValues) throw ShapeError("CIFAR-10 image must be 3x32x32");
    out.push_back(static_cast<std::uint8_t>(im.label));
    for (double v : im.image.data()) {
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural shapes
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 8> kShapeNames = {"circle", "square",  "triangle", "cross",
                                                                "diamond", "ring", "ellipse",  "saltire"};

namespace detail {

// (u, v) are shape-local coordinates scaled so the shape fits the unit box.
inline bool inside_shape(std::size_t cls, double u, double v) {
  switch (cls) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2:
      return v <= 0.75 && v >= -0.9 + (1.65 / 0.9) * std::abs(u);
    case 3:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.95);
    case 4:
      return std::abs(u) + std::abs(v) <= 1.0;
    case 5: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 6:
      return u * u + (v / 0.45) * (v / 0.45) <= 1.0;
    case 7: {
      const double a = (u + v) * std::numbers::sqrt2 / 2, b = (u - v) * std::numbers::sqrt2 / 2;
      return (std::abs(a) <= 0.25 && std::abs(b) <= 1.0) || (std::abs(b) <= 0.25 && std::abs(a) <= 1.0);
    }
    default:
      return false;
  }
}

inline Tensor render_shape(std::size_t cls, Rng& rng) {
  std::array<double, 3> bg{}, fg{}, grad_x{}, grad_y{};
  for (std::size_t c = 0; c < 3; ++c) {
    bg[c] = rng.uniform(0.1, 0.9);
    grad_x[c] = rng.uniform(-0.15, 0.15);
    grad_y[c] = rng.uniform(-0.15, 0.15);
  }
  do {
    for (std::size_t c = 0; c < 3; ++c) fg[c] = rng.uniform(0.05, 0.95);
  } while ((std::abs(fg[0] - bg[0]) + std::abs(fg[1] - bg[1]) + std::abs(fg[2] - bg[2])) / 3.0 < 0.3);
  const double cx = rng.uniform(11.0, 21.0), cy = rng.uniform(11.0, 21.0);
  const double radius = rng.uniform(7.0, 11.5);
  const double angle = rng.uniform(-0.26, 0.26);
  const double ca = std::cos(angle), sa = std::sin(angle);
  Tensor img({kImageChannels, kImageSide, kImageSide});
  auto px = img.data();
  constexpr std::size_t plane = kImageSide * kImageSide;
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      // 2x2 supersampling for anti-aliased edges.
      double cover = 0.0;
      for (double oy : {0.25, 0.75}) {
        for (double ox : {0.25, 0.75}) {
          const double dx = (static_cast<double>(x) + ox - cx) / radius;
          const double dy = (static_cast<double>(y) + oy - cy) / radius;
          cover += inside_shape(cls, ca * dx + sa * dy, -sa * dx + ca * dy) ? 0.25 : 0.0;
        }
      }
      const double gx = (static_cast<double>(x) - 15.5) / 32.0, gy = (static_cast<double>(y) - 15.5) / 32.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double back = std::clamp(bg[c] + grad_x[c] * gx + grad_y[c] * gy, 0.0, 1.0);
        px[c * plane + y * kImageSide + x] = cover * fg[c] + (1.0 - cover) * back;
      }
    }
  }
  return img;
}

}  // namespace detail

/// `n` images of class-determined shapes, label i % num_classes for image i,
/// with random colours, position, scale and a small rotation.
inline std::vector<LabeledImage> procedural_shapes(std::size_t n, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes == 0 || num_classes > kShapeNames.size()) {
    throw ConfigError("procedural_shapes supports 1.." + std::to_string(kShapeNames.size()) + " classes, got " +
                      std::to_string(num_classes));
  }
  if (n < num_classes) throw ConfigError("procedural_shapes needs n >= num_classes");
  const Rng root(seed);
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.derive(i);
    out.push_back({detail::render_shape(i % num_classes, rng), i % num_classes});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Partitions [0, n) into consecutive batches of `batch_size` (the last one
/// may be smaller), optionally after a seeded shuffle.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                        std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  if (batch_size == 0) throw ParameterError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

/// Stacks the selected images into one [B x C x H x W] tensor.
template <typename Sample>
Tensor stack_images(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractViolation("cannot stack an empty batch");
  const Shape& s = image_of(samples[indices[0]]).shape();
  const std::size_t per = shape_numel(s);
  std::vector<double> data;
  data.reserve(per * indices.size());
  for (std::size_t i : indices) {
    const Tensor& im = image_of(samples[i]);
    if (im.shape() != s) throw ShapeError("batch mixes image shapes " + shape_str(s) + " and " + shape_str(im.shape()));
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(data));
}

template <typename Sample>
Tensor stack_images(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
  return stack_images(std::span<const Sample>(samples), indices);
}

// ---------------------------------------------------------------------------
// Corrupted datasets
// ---------------------------------------------------------------------------

/// Applies every requested (type, severity) pair to every clean image.
/// Sample order is type-major, then severity, then image. Each sample gets
/// its own RNG stream derived from (image, type, severity).
inline std::vector<CorruptedSample> build_corrupted_dataset(std::span<const LabeledImage> clean,
                                                            const CorruptionRegistry& registry,
                                                            const std::vector<Corruption>& types,
                                                            const std::vector<Severity>& severities, const Rng& rng) {
  if (types.empty()) throw ConfigError("build_corrupted_dataset: empty corruption type list");
  if (severities.empty()) throw ConfigError("build_corrupted_dataset: empty severity list");
  if (clean.empty()) throw ConfigError("build_corrupted_dataset: empty clean dataset");
  std::vector<CorruptedSample> out;
  out.reserve(clean.size() * types.size() * severities.size());
  for (Corruption kind : types) {
    const std::size_t id = registry.id_of(kind);
    for (Severity s : severities) {
      for (std::size_t i = 0; i < clean.size(); ++i) {
        Rng r = rng.derive(i).derive(static_cast<std::uint64_t>(kind)).derive(static_cast<std::uint64_t>(s.level()));
        out.push_back({{corrupt(clean[i].image, kind, s, r), clean[i].label}, id, s});
      }
    }
  }
  return out;
}

/// On-disk dataset: `header.json` (canonical JSON) plus `images.bin` with
/// fixed-size records: u32 label, u32 corruption id, u32 severity, then
/// 3*32*32 float32 pixels, all little-endian.
struct CorruptedDataset {
  CorruptionRegistry registry;
  std::vector<int> severities;
  std::uint64_t seed = 0;
  std::size_t num_classes = 0;
  std::vector<CorruptedSample> samples;
};

inline constexpr std::size_t kDatasetRecordBytes = 12 + 4 * kImageValues;

inline nlohmann::json dataset_header(const CorruptedDataset& ds) {
  std::map<std::string, std::size_t> counts;
  for (const auto& name : ds.registry.names()) counts[name] = 0;
  for (const auto& s : ds.samples) ++counts[std::string(corruption_name(ds.registry.kind(s.corruption)))];
  return {{"format", "pan-dataset"},
          {"version", 1},
          {"registry", ds.registry.names()},
          {"severities", ds.severities},
          {"seed", ds.seed},
          {"num_classes", ds.num_classes},
          {"count", ds.samples.size()},
          {"counts_per_type", counts},
          {"image_shape", {kImageChannels, kImageSide, kImageSide}},
          {"record_bytes", kDatasetRecordBytes},
          {"record_layout", "u32 label, u32 corruption, u32 severity, f32[3*32*32] pixels; little-endian"}};
}

inline void write_dataset(const std::filesystem::path& dir, const CorruptedDataset& ds) {
  std::filesystem::create_directories(dir);
  std::vector<std::uint8_t> blob;
  blob.reserve(ds.samples.size() * kDatasetRecordBytes);
  for (const auto& s : ds.samples) {
    if (s.item.image.numel() != kImageValues) throw ShapeError("dataset images must be 3x32x32");
    detail::put_le<std::uint32_t>(blob, static_cast<std::uint32_t>(s.item.label));
    detail::put_le<std::uint32_t>(blob, static_cast<std::uint32_t>(s.corruption));
    detail::put_le<std::uint32_t>(blob, static_cast<std::uint32_t>(s.severity.level()));
    for (double v : s.item.image.data()) {
      detail::put_le<std::uint32_t>(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  const std::string header = dataset_header(ds).dump(2) + "\n";
  detail::write_file(dir / "header.json", std::span(reinterpret_cast<const std::uint8_t*>(header.data()), header.size()));
  detail::write_file(dir / "images.bin", blob);
}

inline CorruptedDataset read_dataset(const std::filesystem::path& dir) {
  const auto header_bytes = detail::read_file(dir / "header.json");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset header '" + (dir / "header.json").string() + "': " + e.what());
  }
  if (h.value("format", "") != "pan-dataset") throw FormatError("not a pan dataset: " + dir.string());
  CorruptedDataset ds;
  std::size_t count = 0;
  try {
    count = h.at("count").get<std::size_t>();
    ds.registry = CorruptionRegistry::from_names(h.at("registry").get<std::vector<std::string>>());
    ds.severities = h.at("severities").get<std::vector<int>>();
    ds.seed = h.at("seed").get<std::uint64_t>();
    ds.num_classes = h.at("num_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  }
  const auto blob = detail::read_file(dir / "images.bin");
  if (blob.size() != count * kDatasetRecordBytes) {
    throw FormatError("images.bin holds " + std::to_string(blob.size()) + " bytes, header promises " +
                      std::to_string(count) + " records of " + std::to_string(kDatasetRecordBytes));
  }
  ds.samples.reserve(count);
  std::size_t pos = 0;
  for (std::size_t r = 0; r < count; ++r) {
    const auto label = detail::get_le<std::uint32_t>(blob, pos);
    const auto corruption = detail::get_le<std::uint32_t>(blob, pos);
    const auto severity = detail::get_le<std::uint32_t>(blob, pos);
    if (corruption >= ds.registry.size()) {
      throw FormatError("record " + std::to_string(r) + " has corruption id " + std::to_string(corruption));
    }
    if (ds.num_classes && label >= ds.num_classes) {
      throw FormatError("record " + std::to_string(r) + " has label " + std::to_string(label));
    }
    if (severity < 1 || severity > 5) {
      throw FormatError("record " + std::to_string(r) + " has severity " + std::to_string(severity));
    }
    std::vector<double> px(kImageValues);
    for (double& v : px) v = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(blob, pos)));
    ds.samples.push_back({{Tensor({kImageChannels, kImageSide, kImageSide}, std::move(px)), label},
                          corruption,
                          Severity(static_cast<int>(severity))});
  }
  return ds;
}

}  // namespace pan
