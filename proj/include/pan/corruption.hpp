// Copyright 2026 The PAN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "pan/errors.hpp"
#include "pan/rng.hpp"
#include "pan/tensor.hpp"

namespace pan {

enum class Corruption : std::uint8_t {
  kGaussianNoise,
  kShotNoise,
  kImpulseNoise,
  kDefocusBlur,
  kMotionBlur,
  kContrast,
  kBrightness,
  kFog,
  kPixelate,
  kClean,
};

inline constexpr std::array<std::string_view, 10> kCorruptionNames = {
    "gaussian_noise", "shot_noise", "impulse_noise", "defocus_blur", "motion_blur",
    "contrast",       "brightness", "fog",           "pixelate",     "clean"};

inline std::string_view corruption_name(Corruption c) { return kCorruptionNames.at(static_cast<std::size_t>(c)); }

inline Corruption corruption_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kCorruptionNames.size(); ++i) {
    if (kCorruptionNames[i] == name) return static_cast<Corruption>(i);
  }
  throw ParameterError("unknown corruption type '" + std::string(name) + "'");
}

inline bool is_stochastic(Corruption c) {
  return c == Corruption::kGaussianNoise || c == Corruption::kShotNoise || c == Corruption::kImpulseNoise;
}

/// Severity level 1..5.
class Severity {
 public:
  explicit Severity(int level) : level_(level) {
    if (level < 1 || level > 5) throw ParameterError("severity must be in 1..5, got " + std::to_string(level));
  }
  int level() const { return level_; }
  std::size_t index() const { return static_cast<std::size_t>(level_ - 1); }
  friend bool operator==(Severity, Severity) = default;

 private:
  int level_;
};

/// Dense ids for the corruption types of one run. "clean" is always present
/// and always the last id (K - 1).
class CorruptionRegistry {
 public:
  CorruptionRegistry() : kinds_{Corruption::kClean} {}

  explicit CorruptionRegistry(const std::vector<Corruption>& kinds) {
    for (Corruption c : kinds) {
      if (c != Corruption::kClean && std::find(kinds_.begin(), kinds_.end(), c) == kinds_.end()) kinds_.push_back(c);
    }
    kinds_.push_back(Corruption::kClean);
  }

  static CorruptionRegistry from_names(const std::vector<std::string>& names) {
    std::vector<Corruption> kinds;
    for (const auto& n : names) kinds.push_back(corruption_from_name(n));
    return CorruptionRegistry(kinds);
  }

  std::size_t size() const { return kinds_.size(); }
  std::size_t clean_id() const { return kinds_.size() - 1; }
  Corruption kind(std::size_t id) const {
    if (id >= kinds_.size()) throw ParameterError("corruption id " + std::to_string(id) + " out of range");
    return kinds_[id];
  }
  std::size_t id_of(Corruption c) const {
    for (std::size_t i = 0; i < kinds_.size(); ++i) {
      if (kinds_[i] == c) return i;
    }
    throw ParameterError("corruption '" + std::string(corruption_name(c)) + "' not in registry");
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (Corruption c : kinds_) out.emplace_back(corruption_name(c));
    return out;
  }
  const std::vector<Corruption>& kinds() const { return kinds_; }

  friend bool operator==(const CorruptionRegistry&, const CorruptionRegistry&) = default;

 private:
  std::vector<Corruption> kinds_;
};

namespace detail {

// Severity tables for 32x32 images, indexed by level - 1.
inline constexpr std::array<double, 5> kGaussianSigma = {0.04, 0.08, 0.18, 0.26, 0.38};
inline constexpr std::array<double, 5> kShotPhotons = {60, 25, 12, 5, 3};
inline constexpr std::array<double, 5> kImpulseAmount = {0.01, 0.02, 0.05, 0.10, 0.17};
inline constexpr std::array<int, 5> kDefocusRadius = {1, 2, 3, 4, 6};
inline constexpr std::array<int, 5> kMotionLength = {3, 5, 7, 9, 13};
inline constexpr double kMotionAngleDeg = 20.0;
inline constexpr std::array<double, 5> kContrastFactor = {0.75, 0.5, 0.4, 0.3, 0.15};
inline constexpr std::array<double, 5> kBrightnessShift = {0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr std::array<double, 5> kFogDensity = {0.15, 0.25, 0.35, 0.45, 0.6};
inline constexpr double kFogAirlight = 0.8;
inline constexpr std::array<double, 5> kPixelateFactor = {0.8, 0.65, 0.5, 0.4, 0.25};

inline double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

struct Planes {
  std::size_t channels, height, width;
};

inline double at_clamped(const double* plane, const Planes& p, std::ptrdiff_t y, std::ptrdiff_t x) {
  y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(p.height) - 1);
  x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(p.width) - 1);
  return plane[y * static_cast<std::ptrdiff_t>(p.width) + x];
}

inline double bilinear(const double* plane, const Planes& p, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double wy = y - fy, wx = x - fx;
  const auto iy = static_cast<std::ptrdiff_t>(fy), ix = static_cast<std::ptrdiff_t>(fx);
  return (1 - wy) * ((1 - wx) * at_clamped(plane, p, iy, ix) + wx * at_clamped(plane, p, iy, ix + 1)) +
         wy * ((1 - wx) * at_clamped(plane, p, iy + 1, ix) + wx * at_clamped(plane, p, iy + 1, ix + 1));
}

inline void defocus(const Tensor& x, Tensor& y, const Planes& p, int radius) {
  std::vector<std::pair<int, int>> taps;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) taps.emplace_back(dy, dx);
    }
  }
  const double w = 1.0 / static_cast<double>(taps.size());
  for (std::size_t c = 0; c < p.channels; ++c) {
    const double* in = x.data().data() + c * p.height * p.width;
    double* out = y.data().data() + c * p.height * p.width;
    for (std::size_t i = 0; i < p.height; ++i) {
      for (std::size_t j = 0; j < p.width; ++j) {
        double s = 0.0;
        for (auto [dy, dx] : taps) {
          s += at_clamped(in, p, static_cast<std::ptrdiff_t>(i) + dy, static_cast<std::ptrdiff_t>(j) + dx);
        }
        out[i * p.width + j] = s * w;
      }
    }
  }
}

inline void motion(const Tensor& x, Tensor& y, const Planes& p, int length) {
  const double theta = kMotionAngleDeg * std::numbers::pi / 180.0;
  const double ux = std::cos(theta), uy = -std::sin(theta);
  const double half = 0.5 * (length - 1);
  for (std::size_t c = 0; c < p.channels; ++c) {
    const double* in = x.data().data() + c * p.height * p.width;
    double* out = y.data().data() + c * p.height * p.width;
    for (std::size_t i = 0; i < p.height; ++i) {
      for (std::size_t j = 0; j < p.width; ++j) {
        double s = 0.0;
        for (int k = 0; k < length; ++k) {
          const double t = k - half;
          s += bilinear(in, p, static_cast<double>(i) + t * uy, static_cast<double>(j) + t * ux);
        }
        out[i * p.width + j] = s / length;
      }
    }
  }
}

inline void pixelate(const Tensor& x, Tensor& y, const Planes& p, double factor) {
  const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(p.height * factor)));
  const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(p.width * factor)));
  auto down = [](std::size_t i, std::size_t from, std::size_t to) {
    return std::min(from - 1, static_cast<std::size_t>((static_cast<double>(i) + 0.5) * from / to));
  };
  for (std::size_t c = 0; c < p.channels; ++c) {
    const double* in = x.data().data() + c * p.height * p.width;
    double* out = y.data().data() + c * p.height * p.width;
    for (std::size_t i = 0; i < p.height; ++i) {
      const std::size_t si = down(down(i, sh, p.height), p.height, sh);
      for (std::size_t j = 0; j < p.width; ++j) {
        const std::size_t sj = down(down(j, sw, p.width), p.width, sw);
        out[i * p.width + j] = in[si * p.width + sj];
      }
    }
  }
}

}  // namespace detail

/// Applies corruption `kind` at severity `s` to an image [C x H x W] with
/// values in [0, 1]. The result is clipped to [0, 1]; `clean` returns the
/// input unchanged. Only the noise types consume `rng`.
inline Tensor corrupt(const Tensor& x, Corruption kind, Severity s, Rng& rng) {
  if (x.rank() != 3) throw ShapeError("corrupt expects an image [C x H x W], got " + shape_str(x.shape()));
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractViolation("corrupt: input pixel outside [0, 1]");
  }
  if (kind == Corruption::kClean) return x;
  const detail::Planes p{x.dim(0), x.dim(1), x.dim(2)};
  const std::size_t lv = s.index();
  Tensor y = x;
  auto out = y.data();
  const auto in = x.data();
  switch (kind) {
    case Corruption::kGaussianNoise:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] + rng.normal(0.0, detail::kGaussianSigma[lv]);
      break;
    case Corruption::kShotNoise: {
      const double photons = detail::kShotPhotons[lv];
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<double>(rng.poisson(in[i] * photons)) / photons;
      }
      break;
    }
    case Corruption::kImpulseNoise: {
      const double amount = detail::kImpulseAmount[lv];
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (rng.uniform() < amount) out[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
      }
      break;
    }
    case Corruption::kDefocusBlur:
      detail::defocus(x, y, p, detail::kDefocusRadius[lv]);
      break;
    case Corruption::kMotionBlur:
      detail::motion(x, y, p, detail::kMotionLength[lv]);
      break;
    case Corruption::kContrast: {
      const double c = detail::kContrastFactor[lv];
      const std::size_t plane = p.height * p.width;
      for (std::size_t ch = 0; ch < p.channels; ++ch) {
        double mean = 0.0;
        for (std::size_t i = 0; i < plane; ++i) mean += in[ch * plane + i];
        mean /= static_cast<double>(plane);
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = (in[ch * plane + i] - mean) * c + mean;
      }
      break;
    }
    case Corruption::kBrightness:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] + detail::kBrightnessShift[lv];
      break;
    case Corruption::kFog: {
      // Depth-free haze: constant transmission (1 - t) toward a uniform airlight.
      const double t = detail::kFogDensity[lv];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * (1.0 - t) + detail::kFogAirlight * t;
      break;
    }
    case Corruption::kPixelate:
      detail::pixelate(x, y, p, detail::kPixelateFactor[lv]);
      break;
    case Corruption::kClean:
      break;
  }
  for (double& v : y.data()) v = detail::clip01(v);
  return y;
}

}  // namespace pan
