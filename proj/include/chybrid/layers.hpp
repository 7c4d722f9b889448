#pragma once

#include <string>
#include <vector>

#include "chybrid/ops.hpp"
#include "chybrid/param_store.hpp"

namespace chybrid {

/// What a forward pass reads besides its input: parameters, and the RNG
/// and mode that drive dropout.
struct ForwardContext {
    const ParamStore& params;
    Rng& rng;
    bool training = false;

    const Tensor& p(const std::string& name) const { return params.get(name); }
};

namespace layout {

inline void linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, std::size_t outdim,
                   const std::string& group) {
    out.push_back({prefix + ".weight", {in, outdim}, Init::glorot, in, outdim, "", group});
    out.push_back({prefix + ".bias", {outdim}, Init::zeros, 1, 1, "", group});
}

inline void norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t dim, const std::string& group) {
    out.push_back({prefix + ".gamma", {dim}, Init::ones, 1, 1, "", group});
    out.push_back({prefix + ".beta", {dim}, Init::zeros, 1, 1, "", group});
}

/// Re-declares every spec of `source_prefix` under `prefix` as an alias.
inline void alias_all(std::vector<ParamSpec>& out, const std::string& prefix, const std::string& source_prefix,
                      const std::string& group) {
    std::vector<ParamSpec> added;
    for (const auto& s : out) {
        if (s.name.rfind(source_prefix + ".", 0) != 0 || !s.alias_of.empty()) continue;
        ParamSpec a = s;
        a.name = prefix + s.name.substr(source_prefix.size());
        a.alias_of = s.name;
        a.group = group;
        added.push_back(std::move(a));
    }
    out.insert(out.end(), added.begin(), added.end());
}

}  // namespace layout

inline Tensor apply_linear(const Tensor& x, const ForwardContext& ctx, const std::string& prefix) {
    return linear(x, ctx.p(prefix + ".weight"), ctx.p(prefix + ".bias"));
}

inline Tensor apply_norm(const Tensor& x, const ForwardContext& ctx, const std::string& prefix, double eps) {
    return layer_norm(x, ctx.p(prefix + ".gamma"), ctx.p(prefix + ".beta"), eps);
}

}  // namespace chybrid
