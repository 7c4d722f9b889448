#pragma once

#include <string>
#include <utility>
#include <vector>

#include "chybrid/config.hpp"
#include "chybrid/layers.hpp"

namespace chybrid {

// Output heads. Each head upsamples the block output back to the frame rate
// with a transposed convolution (filter size == stride == downsampling
// factor), trims the right edge to the alignment length, and projects to
// the label set. Intermediate heads put a Swish MLP before the projection.
//
// Sharing is resolved in the parameter layout: shared heads declare their
// transposed-conv (or MLP) parameters as aliases of the first owner.

inline const std::string kFinalHead = "head.final";

inline std::string intermediate_head(std::size_t position) { return "head.inter" + std::to_string(position); }

inline std::vector<ParamSpec> heads_layout(const RunConfig& cfg) {
    std::vector<ParamSpec> out;
    const std::size_t D = cfg.blocks.model_dim, V = cfg.corpus.num_labels, f = cfg.upsample_factor();
    const std::size_t M = cfg.heads.mlp_dim;
    auto tconv = [&](const std::string& head) {
        out.push_back({head + ".tconv.kernel", {f, D, D}, Init::glorot, D, f * D, "", head});
        out.push_back({head + ".tconv.bias", {D}, Init::zeros, 1, 1, "", head});
    };
    tconv(kFinalHead);
    layout::linear(out, kFinalHead + ".output", D, V, kFinalHead);
    std::string first_mlp;
    for (auto pos : cfg.resolved_intermediate_positions()) {
        const std::string head = intermediate_head(pos);
        if (cfg.heads.share_transposed_conv)
            layout::alias_all(out, head + ".tconv", kFinalHead + ".tconv", head);
        else
            tconv(head);
        if (cfg.heads.share_mlp && !first_mlp.empty()) {
            layout::alias_all(out, head + ".mlp", first_mlp, head);
        } else {
            layout::linear(out, head + ".mlp", D, M, head);
            first_mlp = head + ".mlp";
        }
        layout::linear(out, head + ".output", M, V, head);
    }
    return out;
}

/// Logits [B x frames x num_labels] for one head applied to block_out
/// [B x T' x D]. Throws if T' * factor < frames.
inline Tensor head_forward(const Tensor& block_out, std::size_t frames, const std::string& head,
                           const RunConfig& cfg, const ForwardContext& ctx) {
    const std::size_t f = cfg.upsample_factor();
    if (block_out.dim(1) * f < frames)
        throw DimensionError("head_forward: " + std::to_string(block_out.dim(1)) + " frames upsampled by " +
                             std::to_string(f) + " cannot cover " + std::to_string(frames));
    Tensor h = add_bias(transposed_conv1d(block_out, ctx.p(head + ".tconv.kernel"), f), ctx.p(head + ".tconv.bias"));
    h = crop_time(h, frames);
    if (head != kFinalHead) h = swish(apply_linear(h, ctx, head + ".mlp"));
    return apply_linear(h, ctx, head + ".output");
}

/// final_loss + sum_h scale * intermediate_loss_h
inline Tensor total_loss(const Tensor& final_loss, const std::vector<Tensor>& intermediate_losses, double scale_each) {
    Tensor total = final_loss;
    for (const auto& l : intermediate_losses) total = add(total, scale(l, scale_each));
    return total;
}

}  // namespace chybrid
