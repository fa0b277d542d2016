// Classification metrics. Macro F1 averages per-class F1 over all configured
// classes; a class with no true and no predicted samples contributes 0.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fedfreq/error.hpp"
#include "fedfreq/tensor.hpp"

namespace fedfreq {

// Sufficient statistics for window-level evaluation; mergeable across clients
// so raw windows never have to leave them.
struct EvalCounts {
    int n_classes = 0;
    long n = 0;
    double ce_sum = 0.0;
    std::vector<long> confusion;  // [true][pred], row-major

    static EvalCounts empty(int n_classes) {
        EvalCounts c;
        c.n_classes = n_classes;
        c.confusion.assign(size_t(n_classes) * size_t(n_classes), 0);
        return c;
    }

    void merge(const EvalCounts& other) {
        if (n_classes == 0) *this = EvalCounts::empty(other.n_classes);
        if (other.n_classes != n_classes)
            throw DimensionError("EvalCounts: class count mismatch in merge");
        n += other.n;
        ce_sum += other.ce_sum;
        for (size_t i = 0; i < confusion.size(); ++i) confusion[i] += other.confusion[i];
    }
};

struct MetricsReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double ce_loss = 0.0;
    std::vector<double> precision;  // per class
    std::vector<double> recall;
    long n_windows = 0;
};

inline MetricsReport metrics_from_counts(const EvalCounts& counts) {
    if (counts.n < 1) throw DimensionError("metrics: no windows evaluated");
    const int C = counts.n_classes;
    MetricsReport r;
    r.n_windows = counts.n;
    r.ce_loss = counts.ce_sum / double(counts.n);
    long correct = 0;
    for (int c = 0; c < C; ++c) correct += counts.confusion[size_t(c) * size_t(C) + size_t(c)];
    r.accuracy = double(correct) / double(counts.n);

    double f1_sum = 0.0;
    r.precision.resize(size_t(C));
    r.recall.resize(size_t(C));
    for (int c = 0; c < C; ++c) {
        long tp = counts.confusion[size_t(c) * size_t(C) + size_t(c)];
        long fp = 0, fn = 0;
        for (int o = 0; o < C; ++o) {
            if (o == c) continue;
            fp += counts.confusion[size_t(o) * size_t(C) + size_t(c)];
            fn += counts.confusion[size_t(c) * size_t(C) + size_t(o)];
        }
        const double prec = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
        const double rec = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
        r.precision[size_t(c)] = prec;
        r.recall[size_t(c)] = rec;
        f1_sum += prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    }
    r.macro_f1 = f1_sum / double(C);
    return r;
}

// First maximum wins, so tied rows evaluate deterministically.
inline int argmax_row(const double* row, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

inline EvalCounts counts_from_probs(const Tensor& probs, const std::vector<int>& labels) {
    if (probs.ndim() != 2) throw DimensionError("metrics: probs must be [n, C]");
    const int n = probs.dim(0), C = probs.dim(1);
    if (int(labels.size()) != n)
        throw DimensionError("metrics: label count does not match prediction count");
    EvalCounts counts = EvalCounts::empty(C);
    const double* p = probs.data().data();
    for (int i = 0; i < n; ++i) {
        const int label = labels[size_t(i)];
        if (label < 0 || label >= C)
            throw LabelError("metrics: label " + std::to_string(label) + " out of range [0, " +
                             std::to_string(C) + ") at row " + std::to_string(i));
        const double* row = p + int64_t(i) * C;
        counts.confusion[size_t(label) * size_t(C) + size_t(argmax_row(row, C))] += 1;
        counts.ce_sum += -std::log(std::max(row[label], 1e-300));
        counts.n += 1;
    }
    return counts;
}

inline MetricsReport compute_metrics(const Tensor& probs, const std::vector<int>& labels) {
    return metrics_from_counts(counts_from_probs(probs, labels));
}

}  // namespace fedfreq
