#pragma once

#include <algorithm>

#include "chybrid/config.hpp"
#include "chybrid/rng.hpp"
#include "chybrid/tensor.hpp"

namespace chybrid {

// SpecAugment without time warping: contiguous bands of frames and of
// feature channels are overwritten with mask_value.

namespace detail {

inline void mask_band(Rng& rng, std::size_t extent, std::size_t max_width, auto&& fill) {
    const std::size_t cap = std::min(max_width, extent);
    const std::size_t width = static_cast<std::size_t>(rng.uniform_int(cap + 1));
    if (width == 0) return;
    const std::size_t start = static_cast<std::size_t>(rng.uniform_int(extent - width + 1));
    fill(start, width);
}

}  // namespace detail

/// Masked copy of features[T x F]; the input is left untouched.
inline Tensor spec_augment(const Tensor& features, const SpecAugmentConfig& cfg, Rng& rng) {
    if (!cfg.enabled) return features;
    if (features.rank() != 2) throw DimensionError("spec_augment: expected features[T x F]");
    const std::size_t T = features.dim(0), F = features.dim(1);
    std::vector<double> out(features.data().begin(), features.data().end());
    for (std::size_t m = 0; m < cfg.num_time_masks; ++m)
        detail::mask_band(rng, T, cfg.max_time_mask_width, [&](std::size_t start, std::size_t width) {
            std::fill(out.begin() + start * F, out.begin() + (start + width) * F, cfg.mask_value);
        });
    for (std::size_t m = 0; m < cfg.num_freq_masks; ++m)
        detail::mask_band(rng, F, cfg.max_freq_mask_width, [&](std::size_t start, std::size_t width) {
            for (std::size_t t = 0; t < T; ++t)
                std::fill_n(out.begin() + t * F + start, width, cfg.mask_value);
        });
    return Tensor(features.shape(), std::move(out));
}

}  // namespace chybrid
