#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "chybrid/config.hpp"
#include "chybrid/param_store.hpp"

namespace chybrid {

struct Moments {
    std::vector<double> first;
    std::vector<double> second;
};

/// Optimizer moments, schedule state and counters of a run.
struct TrainState {
    std::uint64_t step = 0;   // completed updates
    std::uint64_t epoch = 0;  // completed epochs
    std::map<std::string, Moments> moments;
    std::uint64_t num_decays = 0;  // Newbob decays applied so far
    double best_dev = std::numeric_limits<double>::infinity();
    std::vector<double> dev_history;
    double current_lr = 0.0;
    std::string rng_state;
};

/// Linear warmup from warmup_start_lr to warmup_peak_lr over
/// warmup_epochs * steps_per_epoch updates, then the peak multiplied by
/// newbob_decay once per non-improving dev evaluation.
inline double lr_at(std::uint64_t step, std::size_t steps_per_epoch, const OptimConfig& cfg, const TrainState& state) {
    const double warmup_steps = cfg.warmup_epochs * static_cast<double>(steps_per_epoch);
    const auto s = static_cast<double>(step);
    if (s < warmup_steps)
        return cfg.warmup_start_lr + (cfg.warmup_peak_lr - cfg.warmup_start_lr) * (s / warmup_steps);
    return cfg.warmup_peak_lr * std::pow(cfg.newbob_decay, static_cast<double>(state.num_decays));
}

inline bool warmup_finished(std::uint64_t step, std::size_t steps_per_epoch, const OptimConfig& cfg) {
    return static_cast<double>(step) >= cfg.warmup_epochs * static_cast<double>(steps_per_epoch);
}

/// Records a dev score. A score that fails to beat the best so far by
/// newbob_threshold counts as a decay, but only once warmup is over.
inline void newbob_update(TrainState& state, double dev_ce, bool after_warmup, const OptimConfig& cfg) {
    state.dev_history.push_back(dev_ce);
    if (dev_ce < state.best_dev - cfg.newbob_threshold) {
        state.best_dev = dev_ce;
    } else if (after_warmup) {
        ++state.num_decays;
    }
}

/// Names of the parameters that receive weight decay: the transposed-conv
/// kernels of the output heads.
inline std::set<std::string> weight_decay_set(const ParamStore& params) {
    std::set<std::string> out;
    for (const auto& name : params.names())
        if (name.size() >= 13 && name.compare(name.size() - 13, 13, ".tconv.kernel") == 0) out.insert(name);
    return out;
}

/// One Nadam update (Adam with Nesterov momentum) of every parameter:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
///   w -= lr sqrt(1 - b2^t) / (1 - b1^t) * (b1 m + (1 - b1) g) / (sqrt(v) + eps)
/// plus decoupled decay w -= lr * wd * w on `decayed`. Parameters without a
/// gradient are treated as having a zero gradient.
inline void nadam_step(ParamStore& params, TrainState& state, double lr, const OptimConfig& cfg,
                       const std::set<std::string>& decayed) {
    const double t = static_cast<double>(state.step + 1);
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double step_size = lr * std::sqrt(1.0 - std::pow(b2, t)) / (1.0 - std::pow(b1, t));
    for (const auto& name : params.names()) {
        const Tensor& p = params.get(name);
        const auto g = p.grad();
        for (double v : g)
            if (!std::isfinite(v)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    }
    for (const auto& name : params.names()) {
        Tensor& p = params.get(name);
        auto w = p.data_mut();
        const auto g = p.grad();
        auto& mom = state.moments[name];
        if (mom.first.empty()) {
            mom.first.assign(w.size(), 0.0);
            mom.second.assign(w.size(), 0.0);
        }
        const double decay = decayed.count(name) ? lr * cfg.weight_decay : 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g.empty() ? 0.0 : g[i];
            mom.first[i] = b1 * mom.first[i] + (1.0 - b1) * gi;
            mom.second[i] = b2 * mom.second[i] + (1.0 - b2) * gi * gi;
            const double update = step_size * (b1 * mom.first[i] + (1.0 - b1) * gi) / (std::sqrt(mom.second[i]) + cfg.epsilon);
            w[i] = w[i] - decay * w[i] - update;
        }
    }
    ++state.step;
}

}  // namespace chybrid
