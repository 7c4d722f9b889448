#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "chybrid/augment.hpp"
#include "chybrid/binary_io.hpp"
#include "chybrid/corpus.hpp"
#include "chybrid/model.hpp"
#include "chybrid/optim.hpp"

namespace chybrid {

struct EpochMetrics {
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    double train_ce = 0.0;
    double dev_ce = 0.0;
    double frame_error_rate = 0.0;  // on the dev corpus
    double lr = 0.0;
    double wall_ms = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch}, {"step", m.step},   {"train_ce", m.train_ce},
            {"dev_ce", m.dev_ce}, {"frame_error_rate", m.frame_error_rate},
            {"lr", m.lr},         {"wall_ms", m.wall_ms}};
}

/// Appends one JSON object per line.
inline void append_metrics(const std::string& path, const EpochMetrics& m) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw IoError("cannot append to metrics file '" + path + "'");
    os << to_json(m).dump() << "\n";
}

// ─── Checkpoints ────────────────────────────────────────────────────────────
//
// "CHCK1", u32 version, resolved config text, u32 parameter count, then per
// owning parameter: name, u32 rank, u64 dims, f64 values, u8 has-moments,
// f64 first and second moments. Schedule state follows: u64 step, u64 epoch,
// u64 Newbob decays, f64 best dev score, u32 + f64 dev history, f64 current
// lr, and the serialised RNG state. Little-endian throughout.

inline constexpr const char* kCheckpointMagic = "CHCK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    RunConfig config;
    std::vector<std::pair<std::string, Tensor>> params;
    TrainState state;
};

inline void write_checkpoint(std::ostream& os, const RunConfig& cfg, const ParamStore& params, const TrainState& st) {
    os.write(kCheckpointMagic, 5);
    binary::write_u32(os, kCheckpointVersion);
    binary::write_string(os, config_to_text(cfg));
    binary::write_u32(os, static_cast<std::uint32_t>(params.names().size()));
    for (const auto& name : params.names()) {
        const Tensor& p = params.get(name);
        binary::write_string(os, name);
        binary::write_u32(os, static_cast<std::uint32_t>(p.rank()));
        for (auto d : p.shape()) binary::write_u64(os, d);
        for (double v : p.data()) binary::write_f64(os, v);
        const auto it = st.moments.find(name);
        const bool has = it != st.moments.end() && !it->second.first.empty();
        os.put(has ? 1 : 0);
        if (has) {
            for (double v : it->second.first) binary::write_f64(os, v);
            for (double v : it->second.second) binary::write_f64(os, v);
        }
    }
    binary::write_u64(os, st.step);
    binary::write_u64(os, st.epoch);
    binary::write_u64(os, st.num_decays);
    binary::write_f64(os, st.best_dev);
    binary::write_u32(os, static_cast<std::uint32_t>(st.dev_history.size()));
    for (double v : st.dev_history) binary::write_f64(os, v);
    binary::write_f64(os, st.current_lr);
    binary::write_string(os, st.rng_state);
}

inline Checkpoint read_checkpoint(std::istream& is) {
    binary::expect_magic(is, kCheckpointMagic, "checkpoint");
    const auto version = binary::read_u32(is);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.config = parse_config(binary::read_string(is));
    const auto count = binary::read_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = binary::read_string(is);
        const auto rank = binary::read_u32(is);
        if (rank > 8) throw FormatError("parameter '" + name + "' has implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = binary::read_u64(is);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = binary::read_f64(is);
        const int has = is.get();
        if (has == EOF) throw FormatError("unexpected end of file");
        if (has) {
            auto& m = ck.state.moments[name];
            m.first.resize(data.size());
            m.second.resize(data.size());
            for (auto& v : m.first) v = binary::read_f64(is);
            for (auto& v : m.second) v = binary::read_f64(is);
        }
        ck.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    ck.state.step = binary::read_u64(is);
    ck.state.epoch = binary::read_u64(is);
    ck.state.num_decays = binary::read_u64(is);
    ck.state.best_dev = binary::read_f64(is);
    ck.state.dev_history.resize(binary::read_u32(is));
    for (auto& v : ck.state.dev_history) v = binary::read_f64(is);
    ck.state.current_lr = binary::read_f64(is);
    ck.state.rng_state = binary::read_string(is);
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path + "'");
    return read_checkpoint(is);
}

/// Copies checkpoint values into a model built from the same config.
inline void restore_params(ParamStore& params, const Checkpoint& ck) {
    if (ck.params.size() != params.names().size())
        throw FormatError("checkpoint has " + std::to_string(ck.params.size()) + " parameters, model has " +
                          std::to_string(params.names().size()));
    for (const auto& [name, value] : ck.params) {
        if (!params.contains(name) || params.canonical(name) != name)
            throw FormatError("checkpoint parameter '" + name + "' is not part of the model");
        Tensor& p = params.get(name);
        if (p.shape() != value.shape())
            throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(value.shape()) +
                              ", model expects " + shape_str(p.shape()));
        std::copy(value.data().begin(), value.data().end(), p.data_mut().begin());
    }
}

// ─── Training loop ──────────────────────────────────────────────────────────

/// Owns the model, the data, and the optimiser state of one run.
class Trainer {
  public:
    Trainer(RunConfig cfg, Corpus train, Corpus dev)
        : cfg_(std::move(cfg)),
          train_(std::move(train)),
          dev_(std::move(dev)),
          model_(make_model(cfg_)),
          decayed_(weight_decay_set(model_.params())) {
        state_.rng_state = Rng::derived(cfg_.seed, 1).state();
        if (train_.empty()) throw ConfigError("training corpus is empty");
        if (dev_.empty()) dev_ = train_;
        for (const auto* c : {&train_, &dev_})
            for (const auto& u : *c) {
                if (u.features.dim(1) != cfg_.corpus.feature_dim)
                    throw ConfigError("utterance '" + u.id + "' has feature dim " + std::to_string(u.features.dim(1)) +
                                      ", config says " + std::to_string(cfg_.corpus.feature_dim));
                for (auto l : u.alignment)
                    if (l < 0 || static_cast<std::size_t>(l) >= cfg_.corpus.num_labels)
                        throw ConfigError("utterance '" + u.id + "' has label " + std::to_string(l) +
                                          " outside [0, num_labels)");
            }
    }

    const RunConfig& config() const { return cfg_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }
    const TrainState& state() const { return state_; }
    TrainState& state() { return state_; }
    const Corpus& train_corpus() const { return train_; }
    const Corpus& dev_corpus() const { return dev_; }

    std::size_t steps_per_epoch() const { return plan_for_epoch(0).size(); }

    double current_lr() const { return lr_at(state_.step, steps_per_epoch(), cfg_.optim, state_); }

    /// One pass over the training corpus followed by a dev evaluation that
    /// feeds the Newbob schedule.
    EpochMetrics run_epoch() {
        const auto start = std::chrono::steady_clock::now();
        const auto plan = plan_for_epoch(state_.epoch);
        const std::size_t spe = plan.size();
        Rng rng;
        rng.set_state(state_.rng_state);
        FrameStats train_stats;
        for (const auto& indices : plan) {
            const Batch batch = augmented_batch(indices, rng);
            model_.params().zero_grad();
            const auto out = model_.forward(batch, true, rng);
            const auto loss = model_.loss(out, batch.alignment, batch.mask);
            if (!std::isfinite(loss.total.item()))
                throw NumericError("non-finite training loss at step " + std::to_string(state_.step));
            backward(loss.total);
            train_stats.accumulate(out.final_logits, batch.alignment, batch.mask);
            state_.current_lr = lr_at(state_.step, spe, cfg_.optim, state_);
            nadam_step(model_.params(), state_, state_.current_lr, cfg_.optim, decayed_);
        }
        model_.params().zero_grad();
        const FrameStats dev = evaluate(model_, dev_, cfg_.optim.frame_budget);
        newbob_update(state_, dev.ce(), warmup_finished(state_.step, spe, cfg_.optim), cfg_.optim);
        ++state_.epoch;
        state_.rng_state = rng.state();

        EpochMetrics m;
        m.epoch = state_.epoch;
        m.step = state_.step;
        m.train_ce = train_stats.ce();
        m.dev_ce = dev.ce();
        m.frame_error_rate = dev.error_rate();
        m.lr = state_.current_lr;
        if (cfg_.record_wall_time)
            m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        return m;
    }

    /// Runs until `epochs` epochs are complete in total.
    std::vector<EpochMetrics> train(std::size_t epochs, const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
        std::vector<EpochMetrics> out;
        while (state_.epoch < epochs) {
            out.push_back(run_epoch());
            if (on_epoch) on_epoch(out.back());
        }
        return out;
    }

    void save_checkpoint(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write checkpoint '" + path + "'");
        write_checkpoint(os, cfg_, model_.params(), state_);
        if (!os) throw IoError("failed writing checkpoint '" + path + "'");
    }

    /// Restores parameters and optimiser state; the checkpoint must come
    /// from a run with the same model configuration.
    void load_checkpoint(const Checkpoint& ck) {
        if (config_to_text(model_only(ck.config)) != config_to_text(model_only(cfg_)))
            throw ConfigError("checkpoint was written with a different model configuration");
        restore_params(model_.params(), ck);
        state_ = ck.state;
    }

    void load_checkpoint(const std::string& path) { load_checkpoint(chybrid::load_checkpoint(path)); }

  private:
    static Model make_model(const RunConfig& cfg) {
        Rng init = Rng::derived(cfg.seed, 0);
        return Model(cfg, init);
    }

    /// Run-specific fields (paths, epoch count) cleared for comparisons.
    static RunConfig model_only(RunConfig c) {
        c.corpus_path.clear();
        c.dev_corpus_path.clear();
        c.out_dir.clear();
        c.optim.epochs = 0;
        c.record_wall_time = true;
        return c;
    }

    std::vector<std::vector<std::size_t>> plan_for_epoch(std::uint64_t epoch) const {
        return plan_batches(train_, cfg_.optim.frame_budget, Rng::derived(cfg_.seed, 1000 + epoch).next_u64());
    }

    Batch augmented_batch(const std::vector<std::size_t>& indices, Rng& rng) const {
        std::vector<Utterance> copies;
        copies.reserve(indices.size());
        for (auto i : indices) {
            Utterance u = train_[i];
            u.features = spec_augment(u.features, cfg_.augment, rng);
            copies.push_back(std::move(u));
        }
        std::vector<const Utterance*> ptrs;
        for (const auto& u : copies) ptrs.push_back(&u);
        return collate(ptrs, indices);
    }

    RunConfig cfg_;
    Corpus train_;
    Corpus dev_;
    Model model_;
    std::set<std::string> decayed_;
    TrainState state_;
};

}  // namespace chybrid
