#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace chybrid;
using namespace chybrid::testing;

namespace {

RunConfig head_config(std::size_t factor) {
    RunConfig cfg = tiny_config();
    cfg.frontend.downsample_factor = factor;
    cfg.blocks.dropout = cfg.blocks.attention_dropout = cfg.blocks.embedding_dropout = 0.0;
    return cfg;
}

std::size_t unique_with_suffix(const std::vector<ParamSpec>& layout, const std::string& suffix) {
    std::size_t n = 0;
    for (const auto& s : layout)
        if (s.alias_of.empty() && s.name.ends_with(suffix)) ++n;
    return n;
}

/// Model whose parameters are copied by name from `source`.
Model clone_values(const RunConfig& cfg, const Model& source) {
    Rng init(99);
    Model m(cfg, init);
    for (const auto& n : m.params().names()) {
        const auto src = source.params().get(n).data();
        std::copy(src.begin(), src.end(), m.params().get(n).data_mut().begin());
    }
    return m;
}

}  // namespace

TEST_CASE("head output covers exactly the input frames") {
    auto check = [](std::size_t factor, std::size_t Tp, std::size_t T) {
        const RunConfig cfg = head_config(factor);
        Rng init(1), rng(2);
        ParamStore ps(heads_layout(cfg), init);
        const Tensor x = random_tensor({1, Tp, 16}, rng, 1.0, false);
        return head_forward(x, T, kFinalHead, cfg, ForwardContext{ps, rng, false}).dim(1);
    };
    CHECK(check(3, 10, 30) == 30);
    CHECK(check(3, 11, 31) == 31);
    CHECK(check(1, 17, 17) == 17);
    CHECK_THROWS_AS(check(3, 10, 31), DimensionError);
}

TEST_CASE("cropping trims the right edge") {
    const RunConfig cfg = head_config(3);
    Rng init(3), rng(4);
    ParamStore ps(heads_layout(cfg), init);
    const Tensor x = random_tensor({1, 11, 16}, rng, 1.0, false);
    const ForwardContext ctx{ps, rng, false};
    const auto full = head_forward(x, 33, kFinalHead, cfg, ctx);
    const auto cropped = head_forward(x, 31, kFinalHead, cfg, ctx);
    const std::size_t V = cfg.corpus.num_labels;
    for (std::size_t i = 0; i < 31 * V; ++i) CHECK(cropped.at(i) == full.at(i));
}

TEST_CASE("intermediate positions default to one and two thirds of the stack") {
    RunConfig cfg;
    CHECK(cfg.resolved_intermediate_positions() == std::vector<std::size_t>{4, 8});
    cfg.blocks.num_blocks = 6;
    CHECK(cfg.resolved_intermediate_positions() == std::vector<std::size_t>{2, 4});
    cfg.blocks.num_blocks = 2;
    CHECK(cfg.resolved_intermediate_positions() == std::vector<std::size_t>{1});
    cfg.heads.intermediate_loss = false;
    CHECK(cfg.resolved_intermediate_positions().empty());
    cfg = RunConfig{};
    cfg.heads.intermediate_positions = {12};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("sharing flags control the number of owned head tensors") {
    RunConfig cfg = head_config(3);
    cfg.blocks.num_blocks = 12;
    for (bool share_tconv : {false, true})
        for (bool share_mlp : {false, true}) {
            cfg.heads.share_transposed_conv = share_tconv;
            cfg.heads.share_mlp = share_mlp;
            const auto layout = heads_layout(cfg);
            CHECK(unique_with_suffix(layout, ".tconv.kernel") == (share_tconv ? 1 : 3));
            CHECK(unique_with_suffix(layout, ".mlp.weight") == (share_mlp ? 1 : 2));
            CHECK(unique_with_suffix(layout, ".output.weight") == 3);
        }
}

TEST_CASE("total loss combines heads with the intermediate scale") {
    const Tensor f = Tensor::scalar(1.25), a = Tensor::scalar(2.0), b = Tensor::scalar(3.5);
    CHECK(total_loss(f, {a, b}, 0.0).item() == 1.25);
    CHECK(total_loss(f, {a, b}, 0.3).item() == 1.25 + 0.3 * 2.0 + 0.3 * 3.5);
    CHECK(total_loss(f, {}, 0.3).item() == 1.25);
}

TEST_CASE("intermediate loss drives earlier blocks without the final head") {
    RunConfig cfg = head_config(3);
    cfg.blocks.num_blocks = 3;
    Rng init(5), rng(6);
    Model m(cfg, init);
    const std::vector<std::size_t> lengths = {9, 7};
    const FrameMask mask = mask_of(lengths);
    const Tensor x = padded_features(lengths, 8, rng);
    const auto y = random_targets(mask, cfg.corpus.num_labels, rng);
    const auto out = m.forward(x, mask, false, rng);
    REQUIRE(out.intermediate.size() == 2);
    const auto l = m.loss(out, y, mask);
    backward(total_loss(scale(l.final_loss, 0.0), l.intermediate, 0.3));
    double norm = 0.0;
    for (double g : m.params().get("block.1.ffn1.linear1.weight").grad()) norm += g * g;
    CHECK(norm > 0.0);
    // block 3 only feeds the final head
    for (double g : m.params().get("block.3.ffn1.linear1.weight").grad()) CHECK(g == 0.0);
}

TEST_CASE("shared transposed-conv gradient is the sum of the per-head gradients") {
    RunConfig shared = head_config(3);
    shared.blocks.num_blocks = 3;
    shared.heads.share_transposed_conv = true;
    RunConfig separate = shared;
    separate.heads.share_transposed_conv = false;

    Rng init(7), rng(8);
    Model a(shared, init);
    Model b = clone_values(separate, a);
    // equal weights: copy the shared tensors into every separate head
    for (auto pos : separate.resolved_intermediate_positions())
        for (const std::string s : {".tconv.kernel", ".tconv.bias"}) {
            const auto src = a.params().get(kFinalHead + s).data();
            std::copy(src.begin(), src.end(), b.params().get(intermediate_head(pos) + s).data_mut().begin());
        }

    const std::vector<std::size_t> lengths = {10, 6};
    const FrameMask mask = mask_of(lengths);
    const Tensor x = padded_features(lengths, 8, rng);
    const auto y = random_targets(mask, shared.corpus.num_labels, rng);
    for (Model* m : {&a, &b}) {
        Rng r(0);
        backward(m->loss(m->forward(x, mask, false, r), y, mask).total);
    }
    const auto la = a.loss(a.forward(x, mask, false, rng), y, mask).total.item();
    const auto lb = b.loss(b.forward(x, mask, false, rng), y, mask).total.item();
    CHECK(la == lb);
    for (const std::string s : {".tconv.kernel", ".tconv.bias"}) {
        std::vector<double> summed(b.params().get(kFinalHead + s).grad().begin(), b.params().get(kFinalHead + s).grad().end());
        for (auto pos : separate.resolved_intermediate_positions()) {
            const auto g = b.params().get(intermediate_head(pos) + s).grad();
            for (std::size_t i = 0; i < summed.size(); ++i) summed[i] += g[i];
        }
        CHECK(max_abs_diff(a.params().get(kFinalHead + s).grad(), summed) < 1e-12);
    }
}

TEST_CASE("model logits match the alignment length for every factor") {
    for (std::size_t factor = 1; factor <= 5; ++factor) {
        RunConfig cfg = head_config(factor);
        cfg.blocks.num_blocks = 1;
        Rng init(9), rng(10);
        Model m(cfg, init);
        NoGradGuard ng;
        for (std::size_t T : {1, 2, 7, 30, 31, 64}) {
            const auto out = m.forward(padded_features({T}, 8, rng), FrameMask::full(1, T), false, rng);
            CHECK(out.final_logits.dim(1) == T);
            for (const auto& [_, l] : out.intermediate) CHECK(l.dim(1) == T);
        }
    }
}

TEST_CASE("padded batch loss equals the per-utterance losses") {
    for (auto variant : {FrontendVariant::vgg, FrontendVariant::blstm_maxpool}) {
        RunConfig cfg = head_config(3);
        cfg.frontend.variant = variant;
        Rng init(11), rng(12);
        Model m(cfg, init);
        const std::vector<std::size_t> lengths = {14, 5, 11, 8};
        const FrameMask mask = mask_of(lengths);
        const Tensor x = padded_features(lengths, 8, rng);
        const auto y = random_targets(mask, cfg.corpus.num_labels, rng);
        const double batch = m.loss(m.forward(x, mask, false, rng), y, mask).total.item() *
                             static_cast<double>(mask.valid_frames());
        double separate = 0.0;
        const std::size_t T = mask.time;
        for (std::size_t b = 0; b < lengths.size(); ++b) {
            const std::size_t L = lengths[b];
            const Tensor xb({1, L, 8}, std::vector<double>(x.data().begin() + b * T * 8, x.data().begin() + (b * T + L) * 8));
            const std::vector<std::int32_t> yb(y.begin() + static_cast<long>(b * T), y.begin() + static_cast<long>(b * T + L));
            const FrameMask mb = FrameMask::full(1, L);
            separate += m.loss(m.forward(xb, mb, false, rng), yb, mb).total.item() * static_cast<double>(L);
        }
        CHECK(std::abs(batch - separate) < 1e-8);
    }
}

TEST_CASE("parameter census") {
    RunConfig full;
    const Census c = census(full);
    CHECK(c.unique >= 70'000'000);
    CHECK(c.unique <= 106'000'000);

    RunConfig six = full;
    six.blocks.num_blocks = 6;
    const std::size_t per_block = census(block_layout(1, full.blocks)).unique;
    // both depths put intermediate heads at the same relative positions
    CHECK(c.unique - census(six).unique == 6 * per_block);
    CHECK(c.declared - census(six).declared == 6 * per_block);

    const std::size_t D = full.blocks.model_dim, f = full.upsample_factor();
    const std::size_t tconv = f * D * D + D, mlp = D * full.heads.mlp_dim + full.heads.mlp_dim;
    RunConfig unshared = full;
    unshared.heads.share_transposed_conv = false;
    RunConfig both = full;
    both.heads.share_mlp = true;
    CHECK(census(unshared).unique - c.unique == 2 * tconv);
    CHECK(census(unshared).unique - census(both).unique == 2 * tconv + mlp);
    CHECK(census(both).aliased() == 2 * tconv + mlp);
    CHECK(census(unshared).aliased() == 0);
    CHECK(census(unshared).declared == c.declared);
}

TEST_CASE("random-init model is near chance") {
    RunConfig cfg = head_config(3);
    cfg.corpus.num_labels = 50;
    cfg.corpus.num_utterances = 20;
    cfg.corpus.min_length = 40;
    cfg.corpus.max_length = 60;
    Rng init(13);
    Model m(cfg, init);
    const auto stats = evaluate(m, generate(cfg.corpus), 400);
    CHECK(std::abs(stats.error_rate() - (1.0 - 1.0 / 50)) < 0.05);
}
