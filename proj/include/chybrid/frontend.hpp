#pragma once

#include <string>
#include <vector>

#include "chybrid/config.hpp"
#include "chybrid/layers.hpp"

namespace chybrid {

// VGG front-end: four 3x3 convolutions with Swish between them, feature
// max-pooling after the first, and one time-strided convolution (layer 2 or
// layer 4) performing the downsampling. The flattened channels x features
// are projected to the model dimension. The BLSTM variant replaces the
// convolutions by one bidirectional LSTM followed by time max-pooling.

struct FrontendOutput {
    Tensor out;      // [B x ceil(T/factor) x D]
    FrameMask mask;  // valid frames after downsampling
};

inline std::size_t pooled_feature_dim(const RunConfig& cfg) {
    const auto s = cfg.frontend.feature_pool_stride;
    return (cfg.corpus.feature_dim + s - 1) / s;
}

inline std::size_t frontend_layer_stride(const FrontendConfig& fe, std::size_t layer) {
    const std::size_t strided = fe.downsample_layer == DownsampleLayer::layer2 ? 2 : 4;
    return layer == strided ? fe.downsample_factor : 1;
}

inline std::vector<ParamSpec> frontend_layout(const RunConfig& cfg) {
    std::vector<ParamSpec> out;
    const auto& fe = cfg.frontend;
    const std::size_t D = cfg.blocks.model_dim;
    const std::string g = "frontend";
    if (fe.variant == FrontendVariant::vgg) {
        std::size_t cin = 1;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t cout = fe.conv_filters[i];
            const std::size_t k2 = fe.kernel * fe.kernel;
            const std::string prefix = "frontend.conv" + std::to_string(i + 1);
            out.push_back({prefix + ".kernel", {fe.kernel, fe.kernel, cin, cout}, Init::glorot, k2 * cin, k2 * cout, "", g});
            out.push_back({prefix + ".bias", {cout}, Init::zeros, 1, 1, "", g});
            cin = cout;
        }
        layout::linear(out, "frontend.proj", fe.conv_filters[3] * pooled_feature_dim(cfg), D, g);
    } else {
        const std::size_t H = fe.blstm_units, F = cfg.corpus.feature_dim;
        for (const std::string dir : {"fwd", "bwd"}) {
            const std::string prefix = "frontend.blstm." + dir;
            out.push_back({prefix + ".w_ih", {F, 4 * H}, Init::glorot, F, 4 * H, "", g});
            out.push_back({prefix + ".w_hh", {H, 4 * H}, Init::glorot, H, 4 * H, "", g});
            out.push_back({prefix + ".bias", {4 * H}, Init::zeros, 1, 1, "", g});
        }
        layout::linear(out, "frontend.proj", 2 * H, D, g);
    }
    return out;
}

namespace detail {

inline void check_frontend_input(const Tensor& features, const FrameMask& mask, const RunConfig& cfg) {
    if (features.rank() != 3) throw DimensionError("frontend: expected features[B x T x F]");
    if (features.dim(2) != cfg.corpus.feature_dim)
        throw DimensionError("frontend: feature dim " + std::to_string(features.dim(2)) + " != configured " +
                             std::to_string(cfg.corpus.feature_dim));
    if (mask.batch() != features.dim(0) || mask.time != features.dim(1))
        throw DimensionError("frontend: mask does not match features");
    for (auto len : mask.lengths)
        if (len == 0) throw DimensionError("frontend: empty input sequence");
}

/// One LSTM direction over x[B x T x F]; padded frames reset the state to 0,
/// so the backward direction starts fresh at each sequence's last frame.
inline Tensor lstm_direction(const Tensor& x, const FrameMask& mask, const ForwardContext& ctx,
                             const std::string& prefix, std::size_t H, bool reverse) {
    const std::size_t B = x.dim(0), T = x.dim(1);
    const Tensor xp = linear(x, ctx.p(prefix + ".w_ih"), ctx.p(prefix + ".bias"));
    const Tensor& w_hh = ctx.p(prefix + ".w_hh");
    Tensor h = Tensor::zeros({B, H}), c = Tensor::zeros({B, H});
    std::vector<Tensor> outs(T);
    for (std::size_t step = 0; step < T; ++step) {
        const std::size_t t = reverse ? T - 1 - step : step;
        const Tensor gates = add(select_time(xp, t), matmul(h, w_hh));
        const Tensor in_gate = sigmoid(slice_last(gates, 0, H));
        const Tensor forget = sigmoid(slice_last(gates, H, H));
        const Tensor cand = tanh(slice_last(gates, 2 * H, H));
        const Tensor out_gate = sigmoid(slice_last(gates, 3 * H, H));
        std::vector<std::uint8_t> rows(B);
        for (std::size_t b = 0; b < B; ++b) rows[b] = mask.valid(b, t);
        c = mask_rows(add(mul(forget, c), mul(in_gate, cand)), rows);
        h = mask_rows(mul(out_gate, tanh(c)), rows);
        outs[t] = h;
    }
    return stack_time(outs);
}

}  // namespace detail

inline FrontendOutput frontend_vgg(const Tensor& features, const FrameMask& mask, const RunConfig& cfg,
                                   const ForwardContext& ctx) {
    detail::check_frontend_input(features, mask, cfg);
    const auto& fe = cfg.frontend;
    const std::size_t B = features.dim(0), T = features.dim(1), F = features.dim(2);
    Tensor h = reshape(features, {B, T, F, 1});
    FrameMask m = mask;
    for (std::size_t layer = 1; layer <= 4; ++layer) {
        const std::string prefix = "frontend.conv" + std::to_string(layer);
        const std::size_t stride = frontend_layer_stride(fe, layer);
        h = add_bias(conv2d(h, ctx.p(prefix + ".kernel"), stride), ctx.p(prefix + ".bias"));
        if (stride > 1) m = m.downsampled(stride);
        if (layer < 4) h = swish(h);
        h = apply_time_mask(h, m);
        if (layer == 1) h = max_pool_feature(h, fe.feature_pool_stride);
    }
    h = reshape(h, {B, h.dim(1), h.dim(2) * h.dim(3)});
    return {apply_linear(h, ctx, "frontend.proj"), m};
}

inline FrontendOutput frontend_variant_blstm_maxpool(const Tensor& features, const FrameMask& mask,
                                                     const RunConfig& cfg, const ForwardContext& ctx) {
    detail::check_frontend_input(features, mask, cfg);
    const std::size_t H = cfg.frontend.blstm_units, factor = cfg.frontend.downsample_factor;
    const Tensor fwd = detail::lstm_direction(features, mask, ctx, "frontend.blstm.fwd", H, false);
    const Tensor bwd = detail::lstm_direction(features, mask, ctx, "frontend.blstm.bwd", H, true);
    const Tensor pooled = time_max_pool(concat_last(fwd, bwd), mask, factor);
    return {apply_linear(pooled, ctx, "frontend.proj"), mask.downsampled(factor)};
}

inline FrontendOutput frontend_forward(const Tensor& features, const FrameMask& mask, const RunConfig& cfg,
                                       const ForwardContext& ctx) {
    if (cfg.frontend.variant == FrontendVariant::blstm_maxpool)
        return frontend_variant_blstm_maxpool(features, mask, cfg, ctx);
    return frontend_vgg(features, mask, cfg, ctx);
}

}  // namespace chybrid
