#pragma once

#include <vector>

#include "fedfreq/dsp.hpp"
#include "fedfreq/rng.hpp"
#include "fedfreq/tensor.hpp"

namespace testutil {

inline fedfreq::Tensor rand_tensor(std::vector<int> shape, fedfreq::Rng& rng,
                                   bool requires_grad = false, double scale = 1.0) {
    fedfreq::Tensor t = fedfreq::Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.next_uniform(-scale, scale);
    return t;
}

inline bool bits_equal(const fedfreq::Tensor& a, const fedfreq::Tensor& b) {
    if (a.shape() != b.shape()) return false;
    auto va = a.data();
    auto vb = b.data();
    for (size_t i = 0; i < va.size(); ++i)
        if (va[i] != vb[i]) return false;
    return true;
}

// A window with random rows at the given rate, full context.
inline fedfreq::SensorWindow rand_window(int fs, int rows, int len, int label,
                                         fedfreq::Rng& rng, int n_sensors = 2) {
    fedfreq::SensorWindow w;
    w.fs = fs;
    w.label = label;
    w.context.assign(size_t(n_sensors), 1);
    w.data = fedfreq::Tensor::zeros({rows, len});
    for (double& v : w.data.data()) v = rng.next_normal();
    return w;
}

}  // namespace testutil
