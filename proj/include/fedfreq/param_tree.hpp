// Named parameter storage. A ParamTree is a sorted map from leaf key to
// tensor; the path component before the first '/' names the branch the leaf
// belongs to ("head" or one per-frequency encoder such as "f40.acc").
#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fedfreq/error.hpp"
#include "fedfreq/tensor.hpp"

namespace fedfreq {

using ParamTree = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, std::vector<double>>;

inline std::string branch_of(std::string_view key) {
    const size_t slash = key.find('/');
    if (slash == std::string_view::npos)
        throw Error("parameter key '" + std::string(key) + "' has no branch component");
    return std::string(key.substr(0, slash));
}

// Batch-norm running statistics live in the tree but are not optimized.
inline bool is_trainable_key(std::string_view key) {
    return !key.ends_with(".running_mean") && !key.ends_with(".running_var");
}

struct HyperParams {
    double learning_rate = 1e-4;
    int batch_size = 32;
    double l2_rate = 1e-4;
    double dropout_rate = 0.5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double leaky_slope = 0.01;

    void validate() const {
        if (learning_rate <= 0.0) throw ConfigurationError("learning_rate must be > 0");
        if (batch_size < 1) throw ConfigurationError("batch_size must be >= 1");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigurationError("dropout_rate must be in [0, 1)");
        if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0 || adam_beta2 <= 0.0 || adam_beta2 >= 1.0)
            throw ConfigurationError("adam betas must be in (0, 1)");
        if (adam_eps <= 0.0) throw ConfigurationError("adam_eps must be > 0");
        if (l2_rate < 0.0) throw ConfigurationError("l2_rate must be >= 0");
    }
};

inline bool trees_bit_equal(const ParamTree& a, const ParamTree& b) {
    if (a.size() != b.size()) return false;
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first) return false;
        if (ia->second.shape() != ib->second.shape()) return false;
        auto va = ia->second.data();
        auto vb = ib->second.data();
        for (size_t i = 0; i < va.size(); ++i)
            if (va[i] != vb[i]) return false;
    }
    return true;
}

inline ParamTree clone_tree(const ParamTree& tree, bool requires_grad = false) {
    ParamTree out;
    for (const auto& [key, tensor] : tree)
        out.emplace(key, tensor.clone(requires_grad && is_trainable_key(key)));
    return out;
}

}  // namespace fedfreq
