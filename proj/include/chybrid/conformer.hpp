#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "chybrid/config.hpp"
#include "chybrid/layers.hpp"

namespace chybrid {

// Conformer block:
//   x1  = x  + 1/2 FFN(x)
//   x2  = x1 + MHSA(x1)
//   x3  = x2 + Conv(x2)
//   x4  = x3 + 1/2 FFN(x3)
//   out = LayerNorm(x4)
// MHSA uses learned relative-position key embeddings clamped to
// +-rel_pos_clamp. With LongSkip, every block input additionally receives a
// shared linear projection of the front-end output.

inline std::string block_prefix(std::size_t index) { return "block." + std::to_string(index); }

inline std::vector<ParamSpec> block_layout(std::size_t index, const BlockConfig& cfg) {
    std::vector<ParamSpec> out;
    const std::string p = block_prefix(index), g = p;
    const std::size_t D = cfg.model_dim, dk = D / cfg.heads, K = cfg.depthwise_kernel;
    for (const std::string ffn : {".ffn1", ".ffn2"}) {
        layout::norm(out, p + ffn + ".norm", D, g);
        layout::linear(out, p + ffn + ".linear1", D, cfg.ffn_dim, g);
        layout::linear(out, p + ffn + ".linear2", cfg.ffn_dim, D, g);
        if (ffn == ".ffn1") {
            layout::norm(out, p + ".mhsa.norm", D, g);
            for (const std::string proj : {".query", ".key", ".value"}) layout::linear(out, p + ".mhsa" + proj, D, D, g);
            const std::size_t width = 2 * cfg.rel_pos_clamp + 1;
            out.push_back({p + ".mhsa.rel_pos", {width, dk}, Init::glorot, width, dk, "", g});
            layout::linear(out, p + ".mhsa.output", D, D, g);
            layout::norm(out, p + ".conv.norm", D, g);
            layout::linear(out, p + ".conv.pointwise1", D, 2 * D, g);
            out.push_back({p + ".conv.depthwise.kernel", {K, D}, Init::glorot, K, K, "", g});
            out.push_back({p + ".conv.depthwise.bias", {D}, Init::zeros, 1, 1, "", g});
            layout::norm(out, p + ".conv.depthwise_norm", D, g);
            layout::linear(out, p + ".conv.pointwise2", D, D, g);
        }
    }
    layout::norm(out, p + ".final_norm", D, g);
    return out;
}

inline std::vector<ParamSpec> long_skip_layout(const BlockConfig& cfg) {
    std::vector<ParamSpec> out;
    if (cfg.long_skip) layout::linear(out, "long_skip", cfg.model_dim, cfg.model_dim, "long_skip");
    return out;
}

/// x + 1/2 * (LayerNorm -> Linear -> Swish -> Dropout -> Linear -> Dropout)(x)
inline Tensor ffn_module(const Tensor& x, const std::string& prefix, const BlockConfig& cfg,
                         const ForwardContext& ctx) {
    Tensor h = apply_norm(x, ctx, prefix + ".norm", cfg.layer_norm_eps);
    h = dropout(swish(apply_linear(h, ctx, prefix + ".linear1")), cfg.dropout, ctx.rng, ctx.training);
    h = dropout(apply_linear(h, ctx, prefix + ".linear2"), cfg.dropout, ctx.rng, ctx.training);
    return add(x, scale(h, 0.5));
}

/// Attention weights [B x H x T x T] of the relative-position MHSA on an
/// already-normalised input, plus the per-head value tensor [B x H x T x dk].
struct AttentionInternals {
    Tensor weights;
    Tensor values;
};

inline AttentionInternals attention_weights(const Tensor& h, const FrameMask& mask, const std::string& prefix,
                                            const BlockConfig& cfg, const ForwardContext& ctx) {
    const std::size_t B = h.dim(0), T = h.dim(1), H = cfg.heads, dk = cfg.model_dim / H;
    auto split = [&](const Tensor& t) { return permute(reshape(t, {B, T, H, dk}), {0, 2, 1, 3}); };
    const Tensor q = split(apply_linear(h, ctx, prefix + ".query"));
    const Tensor k = split(apply_linear(h, ctx, prefix + ".key"));
    const Tensor v = split(apply_linear(h, ctx, prefix + ".value"));
    const Tensor content = matmul(q, transpose(k));
    const Tensor rel = gather_relative(matmul(q, transpose(ctx.p(prefix + ".rel_pos"))), cfg.rel_pos_clamp);
    const Tensor scores = scale(add(content, rel), 1.0 / std::sqrt(static_cast<double>(dk)));
    return {masked_softmax(scores, mask), v};
}

/// x + Dropout(Linear(MultiHeadRelPosAttention(LayerNorm(x))))
inline Tensor mhsa_module(const Tensor& x, const FrameMask& mask, const std::string& prefix, const BlockConfig& cfg,
                          const ForwardContext& ctx) {
    const std::size_t B = x.dim(0), T = x.dim(1);
    const Tensor h = apply_norm(x, ctx, prefix + ".norm", cfg.layer_norm_eps);
    auto [weights, values] = attention_weights(h, mask, prefix, cfg, ctx);
    weights = dropout(weights, cfg.attention_dropout, ctx.rng, ctx.training);
    Tensor ctx_vec = permute(matmul(weights, values), {0, 2, 1, 3});
    ctx_vec = reshape(ctx_vec, {B, T, cfg.model_dim});
    const Tensor out = dropout(apply_linear(ctx_vec, ctx, prefix + ".output"), cfg.dropout, ctx.rng, ctx.training);
    return add(x, out);
}

/// x + (LayerNorm -> Pointwise(D->2D) -> GLU -> DepthwiseConv(k) -> LayerNorm
///      -> Swish -> Pointwise(D->D) -> Dropout)(x)
/// Padded frames are zeroed before the depthwise convolution so they never
/// leak into valid frames.
inline Tensor conv_module(const Tensor& x, const FrameMask& mask, const std::string& prefix, const BlockConfig& cfg,
                          const ForwardContext& ctx) {
    Tensor h = apply_norm(x, ctx, prefix + ".norm", cfg.layer_norm_eps);
    h = glu(apply_linear(h, ctx, prefix + ".pointwise1"));
    h = apply_time_mask(h, mask);
    h = add_bias(depthwise_conv1d(h, ctx.p(prefix + ".depthwise.kernel")), ctx.p(prefix + ".depthwise.bias"));
    h = swish(apply_norm(h, ctx, prefix + ".depthwise_norm", cfg.layer_norm_eps));
    h = dropout(apply_linear(h, ctx, prefix + ".pointwise2"), cfg.dropout, ctx.rng, ctx.training);
    return add(x, h);
}

/// One block. `skip` is the projected front-end output, required iff
/// long_skip is on.
inline Tensor conformer_block(const Tensor& x, const std::optional<Tensor>& skip, const FrameMask& mask,
                              std::size_t index, const BlockConfig& cfg, const ForwardContext& ctx) {
    if (cfg.long_skip && !skip) throw ConfigError("conformer_block: long_skip is on but no front-end output given");
    const std::string p = block_prefix(index);
    Tensor h = cfg.long_skip ? add(x, *skip) : x;
    h = ffn_module(h, p + ".ffn1", cfg, ctx);
    h = mhsa_module(h, mask, p + ".mhsa", cfg, ctx);
    h = conv_module(h, mask, p + ".conv", cfg, ctx);
    h = ffn_module(h, p + ".ffn2", cfg, ctx);
    return apply_norm(h, ctx, p + ".final_norm", cfg.layer_norm_eps);
}

/// LongSkip projection of the front-end output, or nothing when disabled.
inline std::optional<Tensor> long_skip_input(const Tensor& frontend_out, const BlockConfig& cfg,
                                             const ForwardContext& ctx) {
    if (!cfg.long_skip) return std::nullopt;
    return apply_linear(frontend_out, ctx, "long_skip");
}

}  // namespace chybrid
