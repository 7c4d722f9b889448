#pragma once

// Helpers shared by the unit tests: random tensors, a central
// finite-difference gradient oracle, and small model configurations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "chybrid/chybrid.hpp"

namespace chybrid::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal(0.0, scale);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Central differences at eps = 1e-5 carry roughly 1e-16 |f| / eps of
/// rounding noise (about 1e-10 for the losses used here), so gradients
/// below `floor` are compared absolutely against floor.
inline double rel_error(double analytic, double numeric, double floor = 1e-5) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
    double max_rel = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// Compares the analytic gradient of the scalar `loss()` with respect to
/// every entry of `inputs` against (f(x+eps) - f(x-eps)) / 2eps.
inline GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                                 double eps = 1e-5, const std::vector<std::string>& names = {}) {
    for (auto& t : inputs) t.zero_grad();
    backward(loss());
    GradCheck out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& t = inputs[k];
        std::vector<double> analytic(t.size(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        auto data = t.data_mut();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            double plus, minus;
            {
                NoGradGuard ng;
                data[i] = saved + eps;
                plus = loss().item();
                data[i] = saved - eps;
                minus = loss().item();
            }
            data[i] = saved;
            const double numeric = (plus - minus) / (2 * eps);
            const double r = rel_error(analytic[i], numeric);
            ++out.checked;
            if (r > out.max_rel) {
                out.max_rel = r;
                out.worst = (k < names.size() ? names[k] : "input " + std::to_string(k)) + "[" + std::to_string(i) +
                            "] analytic " + std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return out;
}

/// Small but complete model: every module type present, fast enough for
/// exhaustive finite differences.
inline RunConfig tiny_config() {
    RunConfig cfg;
    cfg.corpus.feature_dim = 8;
    cfg.corpus.num_labels = 11;
    cfg.corpus.num_utterances = 4;
    cfg.corpus.num_dev_utterances = 2;
    cfg.corpus.min_length = 10;
    cfg.corpus.max_length = 16;
    cfg.frontend.conv_filters = {4, 8, 8, 4};
    cfg.frontend.downsample_factor = 3;
    cfg.frontend.blstm_units = 4;
    cfg.blocks.model_dim = 16;
    cfg.blocks.heads = 2;
    cfg.blocks.ffn_dim = 32;
    cfg.blocks.depthwise_kernel = 3;
    cfg.blocks.num_blocks = 2;
    cfg.blocks.rel_pos_clamp = 2;
    cfg.heads.mlp_dim = 12;
    cfg.optim.frame_budget = 64;
    return cfg;
}

/// Features [B x T x F] with zeros beyond each length.
inline Tensor padded_features(const std::vector<std::size_t>& lengths, std::size_t F, Rng& rng) {
    const std::size_t T = *std::max_element(lengths.begin(), lengths.end());
    std::vector<double> v(lengths.size() * T * F, 0.0);
    for (std::size_t b = 0; b < lengths.size(); ++b)
        for (std::size_t t = 0; t < lengths[b]; ++t)
            for (std::size_t f = 0; f < F; ++f) v[(b * T + t) * F + f] = rng.normal();
    return Tensor({lengths.size(), T, F}, std::move(v));
}

inline FrameMask mask_of(const std::vector<std::size_t>& lengths) {
    return FrameMask{*std::max_element(lengths.begin(), lengths.end()), lengths};
}

inline std::vector<std::int32_t> random_targets(const FrameMask& mask, std::size_t labels, Rng& rng) {
    std::vector<std::int32_t> y(mask.batch() * mask.time, 0);
    for (auto& v : y) v = static_cast<std::int32_t>(rng.uniform_int(labels));
    return y;
}

/// Tensors of every owning parameter, in declaration order.
inline std::vector<Tensor> param_tensors(ParamStore& params) {
    std::vector<Tensor> out;
    for (const auto& n : params.names()) out.push_back(params.get(n));
    return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace chybrid::testing
