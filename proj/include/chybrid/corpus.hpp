#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "chybrid/binary_io.hpp"
#include "chybrid/config.hpp"
#include "chybrid/ops.hpp"
#include "chybrid/rng.hpp"
#include "chybrid/tensor.hpp"

namespace chybrid {

/// Feature matrix [T x F] with one target label per frame.
struct Utterance {
    std::string id;
    Tensor features;
    std::vector<std::int32_t> alignment;

    std::size_t frames() const { return alignment.size(); }

    friend bool operator==(const Utterance& a, const Utterance& b) {
        if (a.id != b.id || a.alignment != b.alignment) return false;
        if (a.features.shape() != b.features.shape()) return false;
        return std::equal(a.features.data().begin(), a.features.data().end(), b.features.data().begin());
    }
};

using Corpus = std::vector<Utterance>;

/// Padded group of utterances. Padding frames hold zero features, label 0,
/// and are excluded by `mask`.
struct Batch {
    std::vector<std::size_t> indices;  // positions in the source corpus
    Tensor features;                   // [B x Tmax x F]
    std::vector<std::int32_t> alignment;  // [B * Tmax]
    FrameMask mask;

    std::size_t size() const { return indices.size(); }
    std::size_t padded_frames() const { return mask.batch() * mask.time; }
};

namespace detail {

inline void validate_spec(const CorpusSpec& spec) {
    if (spec.min_length < 1 || spec.min_length > spec.max_length)
        throw ConfigError("corpus: min_length must be in [1, max_length]");
    if (spec.num_labels < 2) throw ConfigError("corpus: num_labels must be >= 2");
    if (spec.feature_dim < 1) throw ConfigError("corpus: feature_dim must be >= 1");
    if (spec.mean_segment_length < 1.0) throw ConfigError("corpus: mean_segment_length must be >= 1");
}

inline std::vector<double> label_means(const CorpusSpec& spec) {
    Rng rng = Rng::derived(spec.seed, 0);
    std::vector<double> means(spec.num_labels * spec.feature_dim);
    for (auto& m : means) m = rng.normal(0.0, spec.mean_scale);
    return means;
}

/// Dwell length >= 1 from a geometric distribution with the given mean.
inline std::size_t segment_length(Rng& rng, double mean) {
    if (mean <= 1.0) return 1;
    const double p = 1.0 / mean;
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    return 1 + static_cast<std::size_t>(std::floor(std::log(u) / std::log1p(-p)));
}

}  // namespace detail

/// Synthesises utterances [first, first + count). Label means depend only on
/// the seed, so a dev split drawn from later indices shares the same classes.
/// Features are rounded to float32 so they survive the on-disk format exactly.
inline Corpus generate(const CorpusSpec& spec, std::size_t first, std::size_t count) {
    detail::validate_spec(spec);
    const auto means = detail::label_means(spec);
    const std::size_t F = spec.feature_dim;
    Corpus corpus;
    corpus.reserve(count);
    for (std::size_t i = first; i < first + count; ++i) {
        Rng rng = Rng::derived(spec.seed, i + 1);
        const std::size_t T = spec.min_length + rng.uniform_int(spec.max_length - spec.min_length + 1);
        Utterance u;
        char id[32];
        std::snprintf(id, sizeof id, "utt-%06zu", i);
        u.id = id;
        u.alignment.reserve(T);
        while (u.alignment.size() < T) {
            const auto label = static_cast<std::int32_t>(rng.uniform_int(spec.num_labels));
            const std::size_t len = std::min(detail::segment_length(rng, spec.mean_segment_length), T - u.alignment.size());
            u.alignment.insert(u.alignment.end(), len, label);
        }
        std::vector<double> feats(T * F);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t f = 0; f < F; ++f) {
                const double v = means[static_cast<std::size_t>(u.alignment[t]) * F + f] + spec.noise * rng.normal();
                feats[t * F + f] = static_cast<double>(static_cast<float>(v));
            }
        u.features = Tensor({T, F}, std::move(feats));
        corpus.push_back(std::move(u));
    }
    return corpus;
}

inline Corpus generate(const CorpusSpec& spec) { return generate(spec, 0, spec.num_utterances); }

/// Held-out utterances following the training indices.
inline Corpus generate_dev(const CorpusSpec& spec) {
    return generate(spec, spec.num_utterances, spec.num_dev_utterances);
}

/// Groups utterance indices into batches whose padded size B x Tmax stays
/// within `frame_budget`. Utterances are ordered by decreasing length (ties
/// broken randomly) and packed greedily, so each batch holds similar
/// lengths; the order of the batches is then shuffled.
inline std::vector<std::vector<std::size_t>> plan_batches(const Corpus& corpus, std::size_t frame_budget,
                                                          std::uint64_t seed) {
    for (const auto& u : corpus)
        if (u.frames() > frame_budget)
            throw ConfigError("utterance '" + u.id + "' has " + std::to_string(u.frames()) +
                              " frames, more than the frame budget " + std::to_string(frame_budget));
    Rng rng(seed);
    std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
    for (std::size_t i = 0; i < corpus.size(); ++i) keyed.emplace_back(rng.next_u64(), i);
    std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
        const auto la = corpus[a.second].frames(), lb = corpus[b.second].frames();
        return la != lb ? la > lb : a.first < b.first;
    });
    std::vector<std::vector<std::size_t>> batches;
    std::vector<std::size_t> current;
    std::size_t tmax = 0;
    for (const auto& [_, idx] : keyed) {
        const std::size_t len = corpus[idx].frames();
        const std::size_t next_tmax = std::max(tmax, len);
        if (!current.empty() && (current.size() + 1) * next_tmax > frame_budget) {
            batches.push_back(std::move(current));
            current.clear();
            tmax = 0;
        }
        current.push_back(idx);
        tmax = std::max(tmax, len);
    }
    if (!current.empty()) batches.push_back(std::move(current));
    rng.shuffle(batches.begin(), batches.end());
    return batches;
}

/// Pads the given utterances into one batch.
inline Batch collate(const std::vector<const Utterance*>& utts, std::vector<std::size_t> indices) {
    if (utts.empty()) throw DimensionError("collate: empty batch");
    const std::size_t F = utts[0]->features.dim(1);
    std::size_t tmax = 0;
    for (const auto* u : utts) {
        if (u->features.dim(1) != F) throw DimensionError("collate: feature dimensions differ");
        if (u->features.dim(0) != u->frames()) throw DimensionError("collate: alignment length != frame count");
        tmax = std::max(tmax, u->frames());
    }
    Batch batch;
    batch.indices = std::move(indices);
    batch.mask.time = tmax;
    std::vector<double> feats(utts.size() * tmax * F, 0.0);
    batch.alignment.assign(utts.size() * tmax, 0);
    for (std::size_t b = 0; b < utts.size(); ++b) {
        const auto* u = utts[b];
        std::copy(u->features.data().begin(), u->features.data().end(), feats.begin() + b * tmax * F);
        std::copy(u->alignment.begin(), u->alignment.end(), batch.alignment.begin() + b * tmax);
        batch.mask.lengths.push_back(u->frames());
    }
    batch.features = Tensor({utts.size(), tmax, F}, std::move(feats));
    return batch;
}

inline std::vector<Batch> make_batches(const Corpus& corpus, std::size_t frame_budget, std::uint64_t seed) {
    std::vector<Batch> out;
    for (auto& idx : plan_batches(corpus, frame_budget, seed)) {
        std::vector<const Utterance*> utts;
        for (auto i : idx) utts.push_back(&corpus[i]);
        out.push_back(collate(utts, std::move(idx)));
    }
    return out;
}

// ─── On-disk format ─────────────────────────────────────────────────────────
//
// "CHAM1", u32 count, then per utterance: u32 id length, id bytes, u32 T,
// u32 F, T*F float32 features (row-major), T int32 labels. Little-endian.

inline constexpr const char* kCorpusMagic = "CHAM1";

inline void write_corpus(std::ostream& os, const Corpus& corpus) {
    os.write(kCorpusMagic, 5);
    binary::write_u32(os, static_cast<std::uint32_t>(corpus.size()));
    for (const auto& u : corpus) {
        binary::write_string(os, u.id);
        binary::write_u32(os, static_cast<std::uint32_t>(u.features.dim(0)));
        binary::write_u32(os, static_cast<std::uint32_t>(u.features.dim(1)));
        for (double v : u.features.data()) binary::write_f32(os, static_cast<float>(v));
        for (auto l : u.alignment) binary::write_i32(os, l);
    }
}

inline Corpus read_corpus(std::istream& is) {
    binary::expect_magic(is, kCorpusMagic, "corpus");
    const auto count = binary::read_u32(is);
    Corpus corpus;
    for (std::uint32_t i = 0; i < count; ++i) {
        Utterance u;
        u.id = binary::read_string(is);
        const auto T = binary::read_u32(is), F = binary::read_u32(is);
        if (T == 0 || F == 0) throw FormatError("utterance '" + u.id + "' has an empty feature matrix");
        std::vector<double> feats(static_cast<std::size_t>(T) * F);
        for (auto& v : feats) v = static_cast<double>(binary::read_f32(is));
        u.features = Tensor({T, F}, std::move(feats));
        u.alignment.resize(T);
        for (auto& l : u.alignment) l = binary::read_i32(is);
        corpus.push_back(std::move(u));
    }
    return corpus;
}

inline void save_corpus(const std::string& path, const Corpus& corpus) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write corpus '" + path + "'");
    write_corpus(os, corpus);
    if (!os) throw IoError("failed writing corpus '" + path + "'");
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open corpus '" + path + "'");
    return read_corpus(is);
}

}  // namespace chybrid
