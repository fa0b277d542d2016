// Federated orchestration. Clients sit behind a narrow interface that only
// exchanges parameter trees, sample counts, and evaluation statistics — raw
// windows never cross to the server side. Aggregation is sample-count
// weighted per branch over the clients that actually trained it.
#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedfreq/metrics.hpp"
#include "fedfreq/model.hpp"
#include "fedfreq/param_tree.hpp"
#include "fedfreq/rng.hpp"

namespace fedfreq {

struct ClientState {
    int client_id = 0;
    std::vector<SensorWindow> dataset;

    int n_samples() const { return int(dataset.size()); }

    void validate() const {
        for (const SensorWindow& w : dataset)
            if (w.fs != dataset.front().fs)
                throw ConfigurationError("client " + std::to_string(client_id) +
                                         ": windows mix sampling frequencies");
    }
};

struct ClientUpdate {
    int client_id = 0;
    ParamTree params;
    long n_samples = 0;
    std::set<std::string> trained_keys;  // branch keys ("f40.acc", ..., "head")
    double mean_loss = 0.0;
};

// ---------------------------------------------------------------------------
// Batching.
// ---------------------------------------------------------------------------

// Seeded shuffle, then per-frequency batches of `batch_size` (train-mode batch
// norm needs same-rate rows), then a shuffle of the batch order. A trailing
// single window folds into the previous batch; a lone window that cannot form
// a pair is dropped for the epoch.
inline std::vector<std::vector<const SensorWindow*>> make_batches(
    const std::vector<const SensorWindow*>& windows, int batch_size, Rng& rng) {
    std::vector<const SensorWindow*> shuffled = windows;
    rng.shuffle(shuffled);

    std::map<int, std::vector<const SensorWindow*>> by_fs;
    for (const SensorWindow* w : shuffled) by_fs[w->fs].push_back(w);

    std::vector<std::vector<const SensorWindow*>> batches;
    for (auto& [fs, group] : by_fs) {
        const int n = int(group.size());
        if (n < 2) continue;
        int start = 0;
        while (start < n) {
            int end = std::min(start + batch_size, n);
            if (n - end == 1) end = n;  // absorb a trailing singleton
            batches.emplace_back(group.begin() + start, group.begin() + end);
            start = end;
        }
    }
    rng.shuffle(batches);
    return batches;
}

// ---------------------------------------------------------------------------
// Local training.
// ---------------------------------------------------------------------------

// One local epoch from the broadcast weights. Returns nothing when the client
// has no trainable data this round (the aggregation must then exclude it).
inline std::optional<ClientUpdate> local_train(const ClientState& client,
                                               const ParamTree& global_params,
                                               const ModelConfig& cfg, uint64_t epoch_seed) {
    client.validate();
    if (client.dataset.empty()) return std::nullopt;

    Rng rng(epoch_seed);
    const auto ptrs = window_ptrs(client.dataset);
    const auto batches = make_batches(ptrs, cfg.hp.batch_size, rng);
    if (batches.empty()) return std::nullopt;

    ParamTree work = make_training_tree(global_params);
    AdamState opt_state;
    double loss_sum = 0.0;
    for (const auto& batch : batches) {
        StepResult step = train_step(batch, work, opt_state, cfg, rng);
        work = std::move(step.params);
        loss_sum += step.loss;
    }

    ClientUpdate update;
    update.client_id = client.client_id;
    update.params = std::move(work);
    update.n_samples = client.n_samples();
    update.mean_loss = loss_sum / double(batches.size());
    update.trained_keys.insert("head");
    for (const SensorSpec& sensor : cfg.sensors)
        update.trained_keys.insert(branch_key(client.dataset.front().fs, sensor.name));
    return update;
}

// ---------------------------------------------------------------------------
// Aggregation.
// ---------------------------------------------------------------------------

// Sample-count weighted average per leaf over the clients whose trained_keys
// cover the leaf's branch. Branches no client trained keep the previous
// global value. Updates are reduced in client-id order, making the result
// independent of caller ordering.
inline ParamTree aggregate(const std::vector<ClientUpdate>& updates,
                           const ParamTree& prev_global) {
    if (updates.empty()) throw AggregationError("aggregate: no client updates");
    std::vector<const ClientUpdate*> sorted;
    sorted.reserve(updates.size());
    for (const ClientUpdate& u : updates) sorted.push_back(&u);
    std::sort(sorted.begin(), sorted.end(),
              [](const ClientUpdate* a, const ClientUpdate* b) {
                  return a->client_id < b->client_id;
              });

    for (const ClientUpdate* u : sorted) {
        if (u->params.size() != prev_global.size())
            throw AggregationError("aggregate: client " + std::to_string(u->client_id) +
                                   " update has a different key set");
        if (u->n_samples <= 0)
            throw AggregationError("aggregate: client " + std::to_string(u->client_id) +
                                   " reports no samples");
    }

    ParamTree out;
    for (const auto& [key, global_leaf] : prev_global) {
        const std::string branch = branch_of(key);
        std::vector<const ClientUpdate*> covering;
        long total = 0;
        for (const ClientUpdate* u : sorted)
            if (u->trained_keys.count(branch)) {
                covering.push_back(u);
                total += u->n_samples;
            }
        if (covering.empty()) {
            out.emplace(key, global_leaf);
            continue;
        }
        Tensor acc = Tensor::zeros(global_leaf.shape());
        double* av = acc.data().data();
        for (const ClientUpdate* u : covering) {
            auto it = u->params.find(key);
            if (it == u->params.end())
                throw AggregationError("aggregate: client " + std::to_string(u->client_id) +
                                       " update is missing key '" + key + "'");
            if (it->second.shape() != global_leaf.shape())
                throw AggregationError("aggregate: shape mismatch at key '" + key + "'");
            const double w = double(u->n_samples) / double(total);
            const double* pv = it->second.data().data();
            const int64_t n = it->second.size();
            for (int64_t i = 0; i < n; ++i) av[i] += w * pv[i];
        }
        out.emplace(key, acc);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Client interface (the privacy boundary) and the round loop.
// ---------------------------------------------------------------------------

class IClient {
public:
    virtual ~IClient() = default;
    virtual int id() const = 0;
    virtual long sample_count() const = 0;
    virtual std::optional<ClientUpdate> train_epoch(const ParamTree& global,
                                                    const ModelConfig& cfg,
                                                    uint64_t epoch_seed) = 0;
    virtual EvalCounts evaluate(const ParamTree& params, const ModelConfig& cfg) const = 0;
};

class SimClient : public IClient {
public:
    explicit SimClient(ClientState state) : state_(std::move(state)) { state_.validate(); }

    int id() const override { return state_.client_id; }
    long sample_count() const override { return state_.n_samples(); }

    std::optional<ClientUpdate> train_epoch(const ParamTree& global, const ModelConfig& cfg,
                                            uint64_t epoch_seed) override {
        return local_train(state_, global, cfg, epoch_seed);
    }

    EvalCounts evaluate(const ParamTree& params, const ModelConfig& cfg) const override {
        if (state_.dataset.empty()) return EvalCounts::empty(cfg.n_classes);
        Tensor probs = predict_probs(window_ptrs(state_.dataset), params, cfg);
        std::vector<int> labels;
        labels.reserve(state_.dataset.size());
        for (const SensorWindow& w : state_.dataset) labels.push_back(w.label);
        return counts_from_probs(probs, labels);
    }

    const ClientState& state() const { return state_; }

private:
    ClientState state_;
};

struct RoundLog {
    int round = 0;
    std::map<int, double> client_loss;
    double val_accuracy = 0.0;
    double val_macro_f1 = 0.0;
    double val_ce = 0.0;
    bool selected = false;  // set on exactly one round after training
};

struct TrainResult {
    ParamTree best_params;
    std::vector<RoundLog> log;
    int best_round = -1;
};

inline EvalCounts evaluate_clients(const std::vector<std::shared_ptr<IClient>>& clients,
                                   const ParamTree& params, const ModelConfig& cfg) {
    EvalCounts counts = EvalCounts::empty(cfg.n_classes);
    for (const auto& c : clients) counts.merge(c->evaluate(params, cfg));
    return counts;
}

// Synchronous FedAvg rounds with validation-based snapshot selection. Ties on
// validation accuracy keep the earliest round. With an empty validation set
// the final round is selected.
inline TrainResult run_rounds(std::vector<std::shared_ptr<IClient>> train_clients,
                              const std::vector<std::shared_ptr<IClient>>& val_clients,
                              const ModelConfig& cfg, int n_rounds, uint64_t seed) {
    cfg.validate();
    std::sort(train_clients.begin(), train_clients.end(),
              [](const auto& a, const auto& b) { return a->id() < b->id(); });
    long total_samples = 0;
    for (const auto& c : train_clients) total_samples += c->sample_count();
    if (train_clients.empty() || total_samples == 0)
        throw ConfigurationError("run_rounds: no training data across clients");

    TrainResult result;
    ParamTree global = init_params(cfg, derive_seed(seed, "init"));
    result.best_params = global;
    double best_acc = -1.0;

    for (int round = 0; round < n_rounds; ++round) {
        const uint64_t epoch_seed = derive_seed(seed, "epoch", uint64_t(round));
        RoundLog entry;
        entry.round = round;

        std::vector<ClientUpdate> updates;
        for (const auto& client : train_clients) {
            auto update = client->train_epoch(global, cfg, epoch_seed);
            if (!update) continue;  // empty client contributes nothing this round
            entry.client_loss[client->id()] = update->mean_loss;
            updates.push_back(std::move(*update));
        }
        global = aggregate(updates, global);

        bool improved = false;
        if (!val_clients.empty()) {
            EvalCounts counts = evaluate_clients(val_clients, global, cfg);
            if (counts.n > 0) {
                MetricsReport m = metrics_from_counts(counts);
                entry.val_accuracy = m.accuracy;
                entry.val_macro_f1 = m.macro_f1;
                entry.val_ce = m.ce_loss;
                improved = m.accuracy > best_acc;
                if (improved) best_acc = m.accuracy;
            } else {
                improved = true;
            }
        } else {
            improved = true;
        }
        if (improved) {
            result.best_params = global;
            result.best_round = round;
        }
        result.log.push_back(std::move(entry));
    }
    if (result.best_round >= 0) result.log[size_t(result.best_round)].selected = true;
    return result;
}

// Centralized counterpart: identical model and hyperparameters, one pooled
// dataset, epoch-level validation selection. Optimizer state persists across
// epochs, unlike the per-round reset federated clients perform.
inline TrainResult centralized_train(const std::vector<ClientState>& clients,
                                     const std::vector<std::shared_ptr<IClient>>& val_clients,
                                     const ModelConfig& cfg, int epochs, uint64_t seed) {
    cfg.validate();
    std::vector<const ClientState*> sorted;
    for (const ClientState& c : clients) sorted.push_back(&c);
    std::sort(sorted.begin(), sorted.end(), [](const ClientState* a, const ClientState* b) {
        return a->client_id < b->client_id;
    });
    std::vector<const SensorWindow*> pool;
    for (const ClientState* c : sorted) {
        c->validate();
        for (const SensorWindow& w : c->dataset) pool.push_back(&w);
    }
    if (pool.empty()) throw ConfigurationError("centralized_train: no training windows");

    TrainResult result;
    ParamTree global = init_params(cfg, derive_seed(seed, "init"));
    result.best_params = global;
    double best_acc = -1.0;

    ParamTree work = make_training_tree(global);
    AdamState opt_state;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng rng(derive_seed(seed, "epoch", uint64_t(epoch)));
        const auto batches = make_batches(pool, cfg.hp.batch_size, rng);
        if (batches.empty())
            throw ConfigurationError("centralized_train: dataset too small to form a batch");
        RoundLog entry;
        entry.round = epoch;
        double loss_sum = 0.0;
        for (const auto& batch : batches) {
            StepResult step = train_step(batch, work, opt_state, cfg, rng);
            work = std::move(step.params);
            loss_sum += step.loss;
        }
        entry.client_loss[-1] = loss_sum / double(batches.size());

        bool improved = false;
        if (!val_clients.empty()) {
            EvalCounts counts = evaluate_clients(val_clients, work, cfg);
            if (counts.n > 0) {
                MetricsReport m = metrics_from_counts(counts);
                entry.val_accuracy = m.accuracy;
                entry.val_macro_f1 = m.macro_f1;
                entry.val_ce = m.ce_loss;
                improved = m.accuracy > best_acc;
                if (improved) best_acc = m.accuracy;
            } else {
                improved = true;
            }
        } else {
            improved = true;
        }
        if (improved) {
            result.best_params = clone_tree(work);
            result.best_round = epoch;
        }
        result.log.push_back(std::move(entry));
    }
    if (result.best_round >= 0) result.log[size_t(result.best_round)].selected = true;
    return result;
}

}  // namespace fedfreq
