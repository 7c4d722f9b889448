#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace chybrid;
using namespace chybrid::testing;

namespace {

Tensor nonzero_features(std::size_t T, std::size_t F, Rng& rng) {
    Tensor x = random_tensor({T, F}, rng, 1.0, false);
    for (auto& v : x.data_mut()) v = std::abs(v) + 1.0;
    return x;
}

}  // namespace

TEST_CASE("disabled augmentation is the identity") {
    Rng rng(1);
    const Tensor x = nonzero_features(50, 10, rng);
    SpecAugmentConfig cfg;
    cfg.enabled = false;
    const std::string before = rng.state();
    CHECK(spec_augment(x, cfg, rng).same_node(x));
    CHECK(rng.state() == before);
}

TEST_CASE("masked entries equal the mask value, the rest is untouched") {
    SpecAugmentConfig cfg;
    cfg.mask_value = -7.5;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng data(seed), rng(seed + 100);
        const Tensor x = nonzero_features(60, 12, data);
        const Tensor y = spec_augment(x, cfg, rng);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK((y.at(i) == x.at(i) || y.at(i) == -7.5));
    }
}

TEST_CASE("time masks cover at most num_masks x max_width frames") {
    SpecAugmentConfig cfg;
    cfg.num_time_masks = 2;
    cfg.max_time_mask_width = 20;
    cfg.num_freq_masks = 0;
    std::size_t widest = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng data(seed), rng(seed);
        const Tensor x = nonzero_features(100, 4, data);
        const Tensor y = spec_augment(x, cfg, rng);
        std::size_t masked = 0;
        for (std::size_t t = 0; t < 100; ++t) masked += y.at(t * 4) == 0.0;
        CHECK(masked <= 40);
        widest = std::max(widest, masked);
    }
    CHECK(widest > 20);
}

TEST_CASE("augmentation is deterministic under the seed") {
    SpecAugmentConfig cfg;
    Rng data(3);
    const Tensor x = nonzero_features(80, 40, data);
    Rng a(9), b(9);
    const Tensor ya = spec_augment(x, cfg, a), yb = spec_augment(x, cfg, b);
    CHECK(max_abs_diff(ya.data(), yb.data()) == 0.0);
}

TEST_CASE("changed entries form full-height and full-width bands") {
    SpecAugmentConfig cfg;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng data(seed), rng(seed * 31 + 1);
        const std::size_t T = 40, F = 16;
        const Tensor x = nonzero_features(T, F, data);
        const Tensor y = spec_augment(x, cfg, rng);
        std::vector<bool> row_full(T, true), col_full(F, true);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const bool changed = y.at(t * F + f) != x.at(t * F + f);
                if (!changed) row_full[t] = col_full[f] = false;
            }
        // every changed entry lies in a fully masked frame or channel
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t f = 0; f < F; ++f)
                if (y.at(t * F + f) != x.at(t * F + f)) CHECK((row_full[t] || col_full[f]));
        std::size_t rows = 0, cols = 0;
        for (bool r : row_full) rows += r;
        for (bool c : col_full) cols += c;
        CHECK(rows <= cfg.num_time_masks * cfg.max_time_mask_width);
        CHECK(cols <= cfg.num_freq_masks * cfg.max_freq_mask_width);
    }
}

TEST_CASE("masks never exceed short inputs") {
    SpecAugmentConfig cfg;
    cfg.max_time_mask_width = 50;
    cfg.max_freq_mask_width = 50;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng data(seed), rng(seed);
        const Tensor x = nonzero_features(3, 2, data);
        CHECK(spec_augment(x, cfg, rng).size() == 6);
    }
    Rng rng(0);
    CHECK_THROWS_AS(spec_augment(Tensor::zeros({2, 2, 2}), cfg, rng), DimensionError);
}
