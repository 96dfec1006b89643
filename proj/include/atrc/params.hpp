// Named parameter registry. Names are unique, hierarchical ("backbone.0.w"),
// and double as checkpoint keys. Non-trainable entries (running statistics,
// frozen candidates) are carried through checkpoints but skipped by the
// optimizers.

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "atrc/autodiff.hpp"
#include "atrc/rng.hpp"
#include "atrc/tensor.hpp"

namespace atrc {

template <typename T>
struct ParamT {
    std::string name;
    VarT<T> var;
    bool trainable = true;
};

template <typename T>
class ParamStoreT {
public:
    VarT<T> add(const std::string& name, TensorT<T> init, bool trainable = true) {
        if (index_.count(name)) fail("ParamStore", "duplicate parameter name '" + name + "'");
        auto var = make_leaf(std::move(init), trainable);
        index_[name] = items_.size();
        items_.push_back(ParamT<T>{name, var, trainable});
        return var;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    ParamT<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) fail("ParamStore", "unknown parameter '" + name + "'");
        return items_[it->second];
    }
    const ParamT<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) fail("ParamStore", "unknown parameter '" + name + "'");
        return items_[it->second];
    }

    std::vector<ParamT<T>>& items() { return items_; }
    const std::vector<ParamT<T>>& items() const { return items_; }

    std::size_t count() const { return items_.size(); }

    // Flip trainability for every parameter under a name prefix. Returns the
    // number of parameters affected.
    std::size_t set_trainable_prefix(const std::string& prefix, bool trainable) {
        std::size_t hits = 0;
        for (auto& p : items_) {
            if (p.name.rfind(prefix, 0) == 0) {
                p.trainable = trainable;
                p.var->requires_grad = trainable;
                ++hits;
            }
        }
        return hits;
    }

    std::vector<ParamT<T>*> trainable() {
        std::vector<ParamT<T>*> out;
        for (auto& p : items_)
            if (p.trainable) out.push_back(&p);
        return out;
    }

private:
    std::vector<ParamT<T>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// He-uniform initialization on [-sqrt(6/fan_in), sqrt(6/fan_in)]. The draw
// stream is keyed by the parameter name so values do not depend on
// registration order.
template <typename T>
TensorT<T> he_uniform(const Shape& shape, std::size_t fan_in, std::uint64_t seed,
                      const std::string& name) {
    std::uint64_t tag = 1469598103934665603ULL;
    for (char c : name) tag = (tag ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    CounterRng rng(seed, {rng_stream::kParamInit, tag});
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    TensorT<T> t(shape);
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

}  // namespace atrc
