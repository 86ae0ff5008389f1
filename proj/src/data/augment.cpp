#include <algorithm>

#include "sct/data.hpp"
#include "sct/errors.hpp"

namespace sct {

void AugmentConfig::validate() const {
  if (!(sensor_drop >= 0.0 && sensor_drop <= 1.0)) throw ConfigError("augment.sensor_drop must lie in [0, 1]");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("augment.flip_prob must lie in [0, 1]");
}

Sample augment_sample(const Sample& sample, std::span<const ImageGeometry> geometry, const AugmentConfig& config,
                      Rng& rng) {
  config.validate();
  const std::size_t n = sample.images.size();
  if (geometry.size() != n) throw ShapeError("augment_sample: geometry count differs from image count");
  for (const auto& g : geometry) {
    if (config.max_shift >= std::min(g.height, g.width)) {
      throw ConfigError("augment.max_shift = " + std::to_string(config.max_shift) + " must be smaller than " +
                        std::to_string(std::min(g.height, g.width)) + " for modality '" + g.name + "'");
    }
  }
  Sample out = sample;

  std::vector<bool> dropped(n);
  bool all = n > 0;
  for (std::size_t j = 0; j < n; ++j) {
    dropped[j] = rng.bernoulli(config.sensor_drop);
    all = all && dropped[j];
  }
  if (all) dropped[rng.index(n)] = false;
  for (std::size_t j = 0; j < n; ++j) {
    if (dropped[j]) std::fill(out.images[j].begin(), out.images[j].end(), 0.0f);
  }

  for (std::size_t j = 0; j < n; ++j) {
    const auto& g = geometry[j];
    const bool hflip = rng.bernoulli(config.flip_prob);
    const bool vflip = rng.bernoulli(config.flip_prob);
    if (!hflip && !vflip) continue;
    const std::vector<float> src = out.images[j];
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) {
        const std::size_t sy = vflip ? g.height - 1 - y : y;
        const std::size_t sx = hflip ? g.width - 1 - x : x;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((sy * g.width + sx) * g.channels), g.channels,
                    out.images[j].begin() + static_cast<std::ptrdiff_t>((y * g.width + x) * g.channels));
      }
  }

  const auto t = static_cast<std::int64_t>(config.max_shift);
  for (std::size_t j = 0; j < n; ++j) {
    const auto& g = geometry[j];
    const std::int64_t dy = rng.integer(-t, t);
    const std::int64_t dx = rng.integer(-t, t);
    if (dy == 0 && dx == 0) continue;
    const std::vector<float> src = out.images[j];
    auto& dst = out.images[j];
    std::fill(dst.begin(), dst.end(), 0.0f);
    const auto h = static_cast<std::int64_t>(g.height), w = static_cast<std::int64_t>(g.width);
    for (std::int64_t y = 0; y < h; ++y) {
      const std::int64_t sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (std::int64_t x = 0; x < w; ++x) {
        const std::int64_t sx = x - dx;
        if (sx < 0 || sx >= w) continue;
        std::copy_n(src.begin() + (sy * w + sx) * static_cast<std::int64_t>(g.channels), g.channels,
                    dst.begin() + (y * w + x) * static_cast<std::int64_t>(g.channels));
      }
    }
  }
  return out;
}

}  // namespace sct
