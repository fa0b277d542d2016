// Adam with bias correction. State is tracked per leaf key; leaves absent
// from the gradient map are left bit-untouched, which is what keeps unused
// encoder branches frozen during single-frequency batches.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fedfreq/param_tree.hpp"

namespace fedfreq {

struct AdamState {
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
        long t = 0;
    };
    std::map<std::string, Slot> slots;
};

// Returns a tree where every key present in `grads` has been stepped; other
// leaves keep their existing tensors (same nodes, bit-identical values).
inline ParamTree adam_step(const ParamTree& params, const GradMap& grads, AdamState& state,
                           const HyperParams& hp) {
    ParamTree out;
    for (const auto& [key, tensor] : params) {
        auto git = grads.find(key);
        if (git == grads.end()) {
            out.emplace(key, tensor);
            continue;
        }
        const std::vector<double>& g = git->second;
        if (int64_t(g.size()) != tensor.size())
            throw DimensionError("adam_step: gradient size mismatch for '" + key + "'");

        AdamState::Slot& slot = state.slots[key];
        if (slot.m.empty()) {
            slot.m.assign(g.size(), 0.0);
            slot.v.assign(g.size(), 0.0);
        } else if (slot.m.size() != g.size()) {
            throw DimensionError("adam_step: state size mismatch for '" + key + "'");
        }
        slot.t += 1;
        const double bc1 = 1.0 - std::pow(hp.adam_beta1, double(slot.t));
        const double bc2 = 1.0 - std::pow(hp.adam_beta2, double(slot.t));

        Tensor updated = tensor.clone();
        double* p = updated.data().data();
        for (size_t i = 0; i < g.size(); ++i) {
            slot.m[i] = hp.adam_beta1 * slot.m[i] + (1.0 - hp.adam_beta1) * g[i];
            slot.v[i] = hp.adam_beta2 * slot.v[i] + (1.0 - hp.adam_beta2) * g[i] * g[i];
            const double m_hat = slot.m[i] / bc1;
            const double v_hat = slot.v[i] / bc2;
            p[i] -= hp.learning_rate * m_hat / (std::sqrt(v_hat) + hp.adam_eps);
        }
        out.emplace(key, updated);
    }
    for (const auto& [key, g] : grads)
        if (!params.count(key))
            throw DimensionError("adam_step: gradient for unknown parameter '" + key + "'");
    return out;
}

}  // namespace fedfreq
