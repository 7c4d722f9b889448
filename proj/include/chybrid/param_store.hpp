#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "chybrid/rng.hpp"
#include "chybrid/tensor.hpp"

namespace chybrid {

enum class Init { glorot, zeros, ones };

/// Declares one named parameter. A non-empty `alias_of` makes this name
/// refer to another entry's tensor instead of owning storage.
struct ParamSpec {
    std::string name;
    Shape shape;
    Init init = Init::glorot;
    std::size_t fan_in = 1;
    std::size_t fan_out = 1;
    std::string alias_of;
    std::string group;  // census bucket, e.g. "frontend" or "block.3"

    std::size_t numel() const { return shape_numel(shape); }
};

/// Named trainable tensors. Aliased names resolve to the same tensor, so
/// every use of a shared parameter accumulates into one gradient.
class ParamStore {
  public:
    ParamStore() = default;

    /// Allocates and initialises every owning spec in declaration order.
    ParamStore(const std::vector<ParamSpec>& layout, Rng& rng) {
        for (const auto& spec : layout) {
            if (!spec.alias_of.empty()) {
                alias(spec.name, spec.alias_of);
                continue;
            }
            std::vector<double> data(spec.numel(), 0.0);
            if (spec.init == Init::ones) {
                std::fill(data.begin(), data.end(), 1.0);
            } else if (spec.init == Init::glorot) {
                const double limit = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
                for (auto& v : data) v = rng.uniform(-limit, limit);
            }
            add(spec.name, Tensor(spec.shape, std::move(data), true));
        }
    }

    void add(const std::string& name, Tensor value) {
        if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
        value.set_requires_grad(true);
        params_.emplace(name, std::move(value));
        order_.push_back(name);
    }

    void alias(const std::string& name, const std::string& target) {
        if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
        const std::string canon = canonical(target);
        aliases_.emplace(name, canon);
    }

    bool contains(const std::string& name) const { return params_.count(name) || aliases_.count(name); }

    const std::string& canonical(const std::string& name) const {
        if (auto it = aliases_.find(name); it != aliases_.end()) return it->second;
        if (params_.count(name)) return params_.find(name)->first;
        throw ConfigError("unknown parameter '" + name + "'");
    }

    const Tensor& get(const std::string& name) const { return params_.at(canonical(name)); }
    Tensor& get(const std::string& name) { return params_.at(canonical(name)); }

    /// Owning names in declaration order.
    const std::vector<std::string>& names() const { return order_; }

    std::size_t unique_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }

  private:
    std::map<std::string, Tensor> params_;
    std::map<std::string, std::string> aliases_;
    std::vector<std::string> order_;
};

}  // namespace chybrid
