#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chybrid/config.hpp"
#include "chybrid/conformer.hpp"
#include "chybrid/corpus.hpp"
#include "chybrid/frontend.hpp"
#include "chybrid/heads.hpp"

namespace chybrid {

/// Every parameter of the full model, aliases included, in a fixed order.
inline std::vector<ParamSpec> model_layout(const RunConfig& cfg) {
    cfg.validate();
    auto out = frontend_layout(cfg);
    auto append = [&](std::vector<ParamSpec> more) { out.insert(out.end(), more.begin(), more.end()); };
    append(long_skip_layout(cfg.blocks));
    for (std::size_t i = 1; i <= cfg.blocks.num_blocks; ++i) append(block_layout(i, cfg.blocks));
    append(heads_layout(cfg));
    return out;
}

// ─── Parameter census ───────────────────────────────────────────────────────

struct CensusGroup {
    std::string name;
    std::size_t declared = 0;  // counting aliases at full size
    std::size_t unique = 0;    // owning storage only
};

struct Census {
    std::vector<CensusGroup> groups;
    std::size_t declared = 0;
    std::size_t unique = 0;
    std::size_t aliased() const { return declared - unique; }
};

inline Census census(const std::vector<ParamSpec>& layout) {
    Census c;
    std::map<std::string, std::size_t> index;
    for (const auto& s : layout) {
        auto [it, fresh] = index.emplace(s.group, c.groups.size());
        if (fresh) c.groups.push_back({s.group, 0, 0});
        auto& g = c.groups[it->second];
        g.declared += s.numel();
        c.declared += s.numel();
        if (s.alias_of.empty()) {
            g.unique += s.numel();
            c.unique += s.numel();
        }
    }
    return c;
}

inline Census census(const RunConfig& cfg) { return census(model_layout(cfg)); }

// ─── Model ──────────────────────────────────────────────────────────────────

struct ModelOutput {
    Tensor final_logits;                                     // [B x T x V]
    std::vector<std::pair<std::size_t, Tensor>> intermediate;  // (block position, logits)
};

struct LossBreakdown {
    Tensor total;
    Tensor final_loss;
    std::vector<Tensor> intermediate;
};

class Model {
  public:
    Model(RunConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)), params_(model_layout(cfg_), init_rng) {}

    const RunConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// features[B x T x F] -> logits for every head.
    ModelOutput forward(const Tensor& features, const FrameMask& mask, bool training, Rng& rng) const {
        ForwardContext ctx{params_, rng, training};
        const auto& bc = cfg_.blocks;
        auto fe = frontend_forward(features, mask, cfg_, ctx);
        Tensor x = dropout(fe.out, bc.embedding_dropout, rng, training);
        const auto skip = long_skip_input(x, bc, ctx);
        const auto positions = cfg_.resolved_intermediate_positions();
        ModelOutput out;
        for (std::size_t i = 1; i <= bc.num_blocks; ++i) {
            x = conformer_block(x, skip, fe.mask, i, bc, ctx);
            if (std::find(positions.begin(), positions.end(), i) != positions.end())
                out.intermediate.emplace_back(i, head_forward(x, mask.time, intermediate_head(i), cfg_, ctx));
        }
        out.final_logits = head_forward(x, mask.time, kFinalHead, cfg_, ctx);
        return out;
    }

    ModelOutput forward(const Batch& batch, bool training, Rng& rng) const {
        return forward(batch.features, batch.mask, training, rng);
    }

    /// Training criterion: focal loss (or CE when disabled) on every head.
    LossBreakdown loss(const ModelOutput& out, const std::vector<std::int32_t>& targets, const FrameMask& mask) const {
        const double gamma = cfg_.effective_focal_gamma();
        LossBreakdown l;
        l.final_loss = focal_loss(out.final_logits, targets, mask, gamma);
        for (const auto& [_, logits] : out.intermediate) l.intermediate.push_back(focal_loss(logits, targets, mask, gamma));
        l.total = total_loss(l.final_loss, l.intermediate, cfg_.heads.intermediate_loss_scale);
        return l;
    }

  private:
    RunConfig cfg_;
    ParamStore params_;
};

/// Frame-level CE and error counts of the final head over valid frames.
struct FrameStats {
    double ce_sum = 0.0;
    std::size_t errors = 0;
    std::size_t frames = 0;

    double ce() const { return frames ? ce_sum / static_cast<double>(frames) : 0.0; }
    double error_rate() const { return frames ? static_cast<double>(errors) / static_cast<double>(frames) : 0.0; }

    void accumulate(const Tensor& logits, const std::vector<std::int32_t>& targets, const FrameMask& mask) {
        const std::size_t V = logits.dim(2), T = mask.time;
        for (std::size_t b = 0; b < mask.batch(); ++b)
            for (std::size_t t = 0; t < mask.lengths[b]; ++t) {
                const double* z = logits.data().data() + (b * T + t) * V;
                const auto y = static_cast<std::size_t>(targets[b * T + t]);
                const double mx = *std::max_element(z, z + V);
                double s = 0.0;
                for (std::size_t v = 0; v < V; ++v) s += std::exp(z[v] - mx);
                ce_sum += -(z[y] - mx - std::log(s));
                if (static_cast<std::size_t>(std::max_element(z, z + V) - z) != y) ++errors;
                ++frames;
            }
    }
};

/// Eval-mode CE and frame error rate of the final head on a corpus.
inline FrameStats evaluate(const Model& model, const Corpus& corpus, std::size_t frame_budget) {
    FrameStats stats;
    NoGradGuard no_grad;
    Rng unused(0);
    for (const auto& batch : make_batches(corpus, frame_budget, 0)) {
        const auto out = model.forward(batch, false, unused);
        stats.accumulate(out.final_logits, batch.alignment, batch.mask);
    }
    return stats;
}

}  // namespace chybrid
