// Experiment harness: the frequency-configuration matrix, the participant
// ablation, and report emission. Folds are independent jobs and run on a
// small worker pool (capped by FEDFREQ_WORKERS); every result lands in a
// preallocated slot so the outputs do not depend on scheduling.
#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedfreq/config.hpp"
#include "fedfreq/data.hpp"
#include "fedfreq/fed.hpp"
#include "fedfreq/metrics.hpp"

namespace fedfreq {

// ---------------------------------------------------------------------------
// Worker pool.
// ---------------------------------------------------------------------------

inline int worker_limit(int n_jobs) {
    int workers = int(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    if (const char* env = std::getenv("FEDFREQ_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) workers = int(std::min<long>(v, 256));
    }
    return std::max(1, std::min(workers, n_jobs));
}

template <class Fn>
inline void parallel_for(int n_jobs, Fn&& fn) {
    const int workers = worker_limit(n_jobs);
    if (workers <= 1) {
        for (int i = 0; i < n_jobs; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    threads.reserve(size_t(workers));
    for (int w = 0; w < workers; ++w)
        threads.emplace_back([&] {
            while (true) {
                const int i = next.fetch_add(1);
                if (i >= n_jobs) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Dataset loading and window cache.
// ---------------------------------------------------------------------------

struct DatasetBundle {
    DatasetManifest manifest;  // schema; synthesized for generated data
    std::map<int, RawStream> streams;

    std::vector<int> participant_ids() const {
        std::vector<int> ids;
        for (const auto& [id, stream] : streams) ids.push_back(id);
        return ids;
    }
};

inline DatasetBundle load_dataset(const ExperimentConfig& cfg) {
    DatasetBundle data;
    if (cfg.dataset == "synth") {
        SynthSpec spec = synth_spec_from(cfg);
        data.manifest = synth_manifest(spec, "synth");
        data.streams = gen_synthetic(spec, cfg.synth_seed);
    } else {
        data.manifest = parse_manifest(cfg.manifest_path);
        data.streams = load_csv(data.manifest);
    }
    return data;
}

// Windows per (participant, rate), built once and read concurrently.
class WindowCache {
public:
    WindowCache(const DatasetBundle& data, const ExperimentConfig& cfg)
        : data_(data), cfg_(cfg) {}

    void prebuild(const std::vector<int>& pids, const std::vector<int>& rates) {
        struct Job {
            int pid, fs;
        };
        std::vector<Job> jobs;
        for (int pid : pids)
            for (int fs : rates)
                if (!cache_.count({pid, fs})) jobs.push_back({pid, fs});
        std::vector<std::vector<SensorWindow>> built(jobs.size());
        parallel_for(int(jobs.size()), [&](int i) {
            const Job& j = jobs[size_t(i)];
            built[size_t(i)] =
                build_client_windows(data_.streams.at(j.pid), j.fs, cfg_.window_seconds,
                                     cfg_.overlap, data_.manifest.sensors);
        });
        for (size_t i = 0; i < jobs.size(); ++i)
            cache_.emplace(std::make_pair(jobs[i].pid, jobs[i].fs), std::move(built[i]));
    }

    const std::vector<SensorWindow>& get(int pid, int fs) const {
        auto it = cache_.find({pid, fs});
        if (it == cache_.end())
            throw Error("window cache miss for participant " + std::to_string(pid) + " at " +
                        std::to_string(fs) + " Hz");
        return it->second;
    }

private:
    const DatasetBundle& data_;
    const ExperimentConfig& cfg_;
    std::map<std::pair<int, int>, std::vector<SensorWindow>> cache_;
};

namespace detail {

inline std::shared_ptr<IClient> sim_client(int pid, const std::vector<SensorWindow>& windows) {
    ClientState state;
    state.client_id = pid;
    state.dataset = windows;  // tensors share storage; cheap copy
    return std::make_shared<SimClient>(std::move(state));
}

inline std::vector<std::shared_ptr<IClient>> clients_at_rate(const WindowCache& cache,
                                                             const std::vector<int>& pids,
                                                             int fs) {
    std::vector<std::shared_ptr<IClient>> out;
    for (int pid : pids) out.push_back(sim_client(pid, cache.get(pid, fs)));
    return out;
}

inline std::vector<std::shared_ptr<IClient>> clients_at_native(
    const WindowCache& cache, const std::vector<int>& pids,
    const std::map<int, int>& assignment) {
    std::vector<std::shared_ptr<IClient>> out;
    for (int pid : pids) out.push_back(sim_client(pid, cache.get(pid, assignment.at(pid))));
    return out;
}

inline std::vector<ClientState> client_states(
    const std::vector<std::shared_ptr<IClient>>& clients) {
    std::vector<ClientState> out;
    for (const auto& c : clients) {
        auto* sim = dynamic_cast<const SimClient*>(c.get());
        if (!sim) throw Error("centralized training needs simulated clients");
        out.push_back(sim->state());
    }
    return out;
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / double(xs.size() - 1))};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Frequency-configuration matrix.
// ---------------------------------------------------------------------------

struct MatrixRow {
    std::string config;
    double mean_f1 = 0.0, std_f1 = 0.0;
    double mean_acc = 0.0, std_acc = 0.0;
    double n_part_low = 0.0, n_part_high = 0.0;  // mean training participants per rate
};

struct FoldRowDetail {
    std::string config;
    int fold = 0;
    MetricsReport test;
    int n_train_low = 0, n_train_high = 0;
    std::string checkpoint_hash;
    int best_round = -1;
};

struct MatrixResult {
    std::vector<MatrixRow> rows;
    std::vector<FoldRowDetail> details;  // config-major, fold-minor
    SplitPlan plan;
    std::map<int, int> assignment;
};

inline SplitPlan make_split_plan(const ExperimentConfig& cfg, const std::vector<int>& ids) {
    if (cfg.split_protocol == "kfold") return make_kfold(ids, cfg.split_folds, cfg.seed);
    return make_monte_carlo(ids, cfg.split_folds, cfg.train_frac, cfg.seed);
}

namespace detail {

struct TrainSpec {
    std::vector<std::shared_ptr<IClient>> train;
    std::vector<std::shared_ptr<IClient>> val;
    int n_low = 0, n_high = 0;
};

// Training-side client layout for one matrix configuration.
inline TrainSpec configure_training(const std::string& name, const Fold& fold,
                                    const WindowCache& cache,
                                    const std::map<int, int>& assignment, int low_fs,
                                    int high_fs) {
    TrainSpec spec;
    auto assigned = [&](int fs) {
        std::vector<int> out;
        for (int pid : fold.train_ids)
            if (assignment.at(pid) == fs) out.push_back(pid);
        return out;
    };
    if (name == "low-only") {
        const auto pids = assigned(low_fs);
        spec.train = clients_at_rate(cache, pids, low_fs);
        spec.val = clients_at_rate(cache, fold.val_ids, low_fs);
        spec.n_low = int(pids.size());
    } else if (name == "down-low") {
        spec.train = clients_at_rate(cache, fold.train_ids, low_fs);
        spec.val = clients_at_rate(cache, fold.val_ids, low_fs);
        spec.n_low = int(fold.train_ids.size());
    } else if (name == "high-only") {
        const auto pids = assigned(high_fs);
        spec.train = clients_at_rate(cache, pids, high_fs);
        spec.val = clients_at_rate(cache, fold.val_ids, high_fs);
        spec.n_high = int(pids.size());
    } else if (name == "ideal-high") {
        spec.train = clients_at_rate(cache, fold.train_ids, high_fs);
        spec.val = clients_at_rate(cache, fold.val_ids, high_fs);
        spec.n_high = int(fold.train_ids.size());
    } else if (name == "multi") {
        spec.train = clients_at_native(cache, fold.train_ids, assignment);
        spec.val = clients_at_native(cache, fold.val_ids, assignment);
        for (int pid : fold.train_ids)
            (assignment.at(pid) == low_fs ? spec.n_low : spec.n_high) += 1;
        if (low_fs == high_fs) {
            spec.n_low = 0;
            spec.n_high = int(fold.train_ids.size());
        }
    } else {
        throw ConfigurationError("unknown matrix configuration '" + name + "'");
    }
    return spec;
}

inline TrainResult train_for_matrix(const ExperimentConfig& cfg, const ModelConfig& mc,
                                    const TrainSpec& spec, uint64_t fold_seed) {
    if (cfg.mode == "centralized")
        return centralized_train(client_states(spec.train), spec.val, mc, cfg.rounds, fold_seed);
    return run_rounds(spec.train, spec.val, mc, cfg.rounds, fold_seed);
}

inline MetricsReport test_metrics(const ParamTree& params, const ModelConfig& mc,
                                  const std::vector<std::shared_ptr<IClient>>& test_clients) {
    return metrics_from_counts(evaluate_clients(test_clients, params, mc));
}

}  // namespace detail

// Runs the requested configurations over every fold of one shared split plan.
// multi@low and multi@high are two evaluations of one trained model.
inline MatrixResult run_matrix(const ExperimentConfig& cfg, const DatasetBundle& data) {
    cfg.validate();
    const std::vector<int> ids = data.participant_ids();

    MatrixResult result;
    result.assignment = assign_frequencies(ids, cfg.low_fs, cfg.high_fs, cfg.seed);
    result.plan = make_split_plan(cfg, ids);

    WindowCache cache(data, cfg);
    cache.prebuild(ids, {cfg.low_fs, cfg.high_fs});

    const int n_classes = int(data.manifest.classes.size());
    const ModelConfig mc_low =
        model_config_from(cfg, {cfg.low_fs}, data.manifest.sensors, n_classes);
    const ModelConfig mc_high =
        model_config_from(cfg, {cfg.high_fs}, data.manifest.sensors, n_classes);
    const ModelConfig mc_multi =
        model_config_from(cfg, {cfg.low_fs, cfg.high_fs}, data.manifest.sensors, n_classes);

    const std::set<std::string> wanted(cfg.configs.begin(), cfg.configs.end());
    const bool want_multi = wanted.count("multi@low") || wanted.count("multi@high");

    const int n_folds = int(result.plan.folds.size());
    // details indexed [config][fold] and flattened afterwards
    std::map<std::string, std::vector<FoldRowDetail>> details;
    for (const std::string& name : all_matrix_configs())
        if (wanted.count(name)) details[name].resize(size_t(n_folds));

    parallel_for(n_folds, [&](int f) {
        const Fold& fold = result.plan.folds[size_t(f)];
        const uint64_t fold_seed = derive_seed(cfg.seed, "fold", uint64_t(f));

        auto single_rate_row = [&](const std::string& name, const ModelConfig& mc,
                                   int eval_fs) {
            if (!wanted.count(name)) return;
            detail::TrainSpec spec = detail::configure_training(
                name, fold, cache, result.assignment, cfg.low_fs, cfg.high_fs);
            TrainResult trained = detail::train_for_matrix(cfg, mc, spec, fold_seed);
            FoldRowDetail d;
            d.config = name;
            d.fold = f;
            d.n_train_low = spec.n_low;
            d.n_train_high = spec.n_high;
            d.best_round = trained.best_round;
            d.checkpoint_hash = param_tree_hash(trained.best_params);
            d.test = detail::test_metrics(
                trained.best_params, mc,
                detail::clients_at_rate(cache, fold.test_ids, eval_fs));
            details.at(name)[size_t(f)] = std::move(d);
        };

        single_rate_row("low-only", mc_low, cfg.low_fs);
        single_rate_row("down-low", mc_low, cfg.low_fs);
        single_rate_row("high-only", mc_high, cfg.high_fs);
        single_rate_row("ideal-high", mc_high, cfg.high_fs);

        if (want_multi) {
            detail::TrainSpec spec = detail::configure_training(
                "multi", fold, cache, result.assignment, cfg.low_fs, cfg.high_fs);
            TrainResult trained = detail::train_for_matrix(cfg, mc_multi, spec, fold_seed);
            const std::string hash = param_tree_hash(trained.best_params);
            for (const std::string& name : {std::string("multi@low"), std::string("multi@high")}) {
                if (!wanted.count(name)) continue;
                const int eval_fs = name == "multi@low" ? cfg.low_fs : cfg.high_fs;
                FoldRowDetail d;
                d.config = name;
                d.fold = f;
                d.n_train_low = spec.n_low;
                d.n_train_high = spec.n_high;
                d.best_round = trained.best_round;
                d.checkpoint_hash = hash;
                d.test = detail::test_metrics(
                    trained.best_params, mc_multi,
                    detail::clients_at_rate(cache, fold.test_ids, eval_fs));
                details.at(name)[size_t(f)] = std::move(d);
            }
        }
    });

    for (const std::string& name : all_matrix_configs()) {
        if (!wanted.count(name)) continue;
        std::vector<double> f1s, accs, lows, highs;
        for (const FoldRowDetail& d : details[name]) {
            f1s.push_back(d.test.macro_f1);
            accs.push_back(d.test.accuracy);
            lows.push_back(double(d.n_train_low));
            highs.push_back(double(d.n_train_high));
            result.details.push_back(d);
        }
        MatrixRow row;
        row.config = name;
        std::tie(row.mean_f1, row.std_f1) = detail::mean_std(f1s);
        std::tie(row.mean_acc, row.std_acc) = detail::mean_std(accs);
        row.n_part_low = detail::mean_std(lows).first;
        row.n_part_high = detail::mean_std(highs).first;
        result.rows.push_back(row);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Participant-count ablation.
// ---------------------------------------------------------------------------

struct AblationCell {
    int count = 0;
    std::string mode;
    int fold = 0;
    std::vector<int> subset;  // participant ids actually trained on
    MetricsReport test;
    std::string checkpoint_hash;
};

struct AblationRow {
    int count = 0;
    std::string mode;
    double mean_f1 = 0.0, std_f1 = 0.0;
    double mean_acc = 0.0, std_acc = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<AblationCell> details;
    SplitPlan plan;
};

// Trains federated and centralized models on nested seeded subsets of each
// fold's training participants (all clients at the high rate), evaluating on
// the fold's fixed test clients.
inline AblationResult run_participant_ablation(const ExperimentConfig& cfg,
                                               const DatasetBundle& data) {
    cfg.validate();
    const std::vector<int> ids = data.participant_ids();

    AblationResult result;
    result.plan = make_split_plan(cfg, ids);
    const int n_folds = cfg.ablation_folds > 0
                            ? std::min(cfg.ablation_folds, int(result.plan.folds.size()))
                            : int(result.plan.folds.size());

    for (const Fold& fold : result.plan.folds)
        for (int count : cfg.ablation_counts)
            if (count > int(fold.train_ids.size()))
                throw ConfigurationError("ablation: count " + std::to_string(count) +
                                         " exceeds training pool of " +
                                         std::to_string(fold.train_ids.size()));

    WindowCache cache(data, cfg);
    cache.prebuild(ids, {cfg.high_fs});
    const ModelConfig mc = model_config_from(cfg, {cfg.high_fs}, data.manifest.sensors,
                                             int(data.manifest.classes.size()));

    const int cells_per_fold = int(cfg.ablation_counts.size()) * 2;
    std::vector<AblationCell> cells(size_t(n_folds) * size_t(cells_per_fold));

    parallel_for(n_folds, [&](int f) {
        const Fold& fold = result.plan.folds[size_t(f)];
        const uint64_t fold_seed = derive_seed(cfg.seed, "fold", uint64_t(f));

        // One permutation per fold; count n uses its first n entries, so the
        // subsets nest (n=2 is contained in n=3, and so on).
        std::vector<int> perm = fold.train_ids;
        Rng rng(derive_seed(cfg.seed, "ablate", uint64_t(f)));
        rng.shuffle(perm);

        auto test_clients = detail::clients_at_rate(cache, fold.test_ids, cfg.high_fs);
        auto val_clients = detail::clients_at_rate(cache, fold.val_ids, cfg.high_fs);

        int slot = f * cells_per_fold;
        for (int count : cfg.ablation_counts) {
            std::vector<int> subset(perm.begin(), perm.begin() + count);
            std::sort(subset.begin(), subset.end());
            auto train_clients = detail::clients_at_rate(cache, subset, cfg.high_fs);

            TrainResult fed = run_rounds(train_clients, val_clients, mc, cfg.rounds, fold_seed);
            AblationCell fed_cell;
            fed_cell.count = count;
            fed_cell.mode = "federated";
            fed_cell.fold = f;
            fed_cell.subset = subset;
            fed_cell.checkpoint_hash = param_tree_hash(fed.best_params);
            fed_cell.test = detail::test_metrics(fed.best_params, mc, test_clients);
            cells[size_t(slot++)] = std::move(fed_cell);

            TrainResult cen = centralized_train(detail::client_states(train_clients),
                                                val_clients, mc, cfg.rounds, fold_seed);
            AblationCell cen_cell;
            cen_cell.count = count;
            cen_cell.mode = "centralized";
            cen_cell.fold = f;
            cen_cell.subset = subset;
            cen_cell.checkpoint_hash = param_tree_hash(cen.best_params);
            cen_cell.test = detail::test_metrics(cen.best_params, mc, test_clients);
            cells[size_t(slot++)] = std::move(cen_cell);
        }
    });

    result.details = std::move(cells);
    for (const std::string& mode : {std::string("federated"), std::string("centralized")})
        for (int count : cfg.ablation_counts) {
            std::vector<double> f1s, accs;
            for (const AblationCell& c : result.details)
                if (c.count == count && c.mode == mode) {
                    f1s.push_back(c.test.macro_f1);
                    accs.push_back(c.test.accuracy);
                }
            AblationRow row;
            row.count = count;
            row.mode = mode;
            std::tie(row.mean_f1, row.std_f1) = detail::mean_std(f1s);
            std::tie(row.mean_acc, row.std_acc) = detail::mean_std(accs);
            result.rows.push_back(row);
        }
    return result;
}

// ---------------------------------------------------------------------------
// Report emission.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << text;
    if (!out) throw IoError("short write to '" + path + "'");
}

inline std::string fmt_fixed(double v, int prec = 6) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

}  // namespace detail

inline void write_config_resolved(const ExperimentConfig& cfg, const std::string& path) {
    std::string text;
    text += "# fedfreq resolved configuration\n";
    text += "# version = 1\n";
    text += "# seed = " + std::to_string(cfg.seed) + "\n";
    text += "# config_hash = " + config_hash(cfg) + "\n";
    text += canonical_config_text(cfg);
    detail::write_text_file(path, text);
}

inline void emit_matrix_report(const ExperimentConfig& cfg, const MatrixResult& result,
                               const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec && !fs::is_directory(out_dir))
        throw IoError("cannot create output directory '" + out_dir + "'");

    std::string csv = "# seed=" + std::to_string(cfg.seed) + " config_hash=" + config_hash(cfg) +
                      "\n";
    csv += "config,fold_mean_f1,fold_std_f1,fold_mean_acc,fold_std_acc,n_part_low,n_part_high\n";
    for (const MatrixRow& row : result.rows) {
        csv += row.config + "," + detail::fmt_fixed(row.mean_f1) + "," +
               detail::fmt_fixed(row.std_f1) + "," + detail::fmt_fixed(row.mean_acc) + "," +
               detail::fmt_fixed(row.std_acc) + "," + detail::fmt_fixed(row.n_part_low, 1) +
               "," + detail::fmt_fixed(row.n_part_high, 1) + "\n";
    }
    detail::write_text_file((fs::path(out_dir) / "matrix.csv").string(), csv);

    std::string jsonl;
    for (const FoldRowDetail& d : result.details) {
        nlohmann::json j;
        j["config"] = d.config;
        j["fold"] = d.fold;
        j["seed"] = cfg.seed;
        j["config_hash"] = config_hash(cfg);
        j["macro_f1"] = d.test.macro_f1;
        j["accuracy"] = d.test.accuracy;
        j["ce_loss"] = d.test.ce_loss;
        j["n_windows"] = d.test.n_windows;
        j["n_train_low"] = d.n_train_low;
        j["n_train_high"] = d.n_train_high;
        j["checkpoint"] = d.checkpoint_hash;
        j["best_round"] = d.best_round;
        jsonl += j.dump() + "\n";
    }
    detail::write_text_file((fs::path(out_dir) / "metrics.jsonl").string(), jsonl);
    write_config_resolved(cfg, (fs::path(out_dir) / "config.resolved").string());
}

inline void emit_ablation_report(const ExperimentConfig& cfg, const AblationResult& result,
                                 const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec && !fs::is_directory(out_dir))
        throw IoError("cannot create output directory '" + out_dir + "'");

    std::string csv = "# seed=" + std::to_string(cfg.seed) + " config_hash=" + config_hash(cfg) +
                      "\n";
    csv += "count,mode,fold_mean_f1,fold_std_f1,fold_mean_acc,fold_std_acc\n";
    for (const AblationRow& row : result.rows) {
        csv += std::to_string(row.count) + "," + row.mode + "," +
               detail::fmt_fixed(row.mean_f1) + "," + detail::fmt_fixed(row.std_f1) + "," +
               detail::fmt_fixed(row.mean_acc) + "," + detail::fmt_fixed(row.std_acc) + "\n";
    }
    detail::write_text_file((fs::path(out_dir) / "ablation.csv").string(), csv);

    std::string jsonl;
    for (const AblationCell& c : result.details) {
        nlohmann::json j;
        j["count"] = c.count;
        j["mode"] = c.mode;
        j["fold"] = c.fold;
        j["seed"] = cfg.seed;
        j["config_hash"] = config_hash(cfg);
        j["macro_f1"] = c.test.macro_f1;
        j["accuracy"] = c.test.accuracy;
        j["ce_loss"] = c.test.ce_loss;
        j["checkpoint"] = c.checkpoint_hash;
        jsonl += j.dump() + "\n";
    }
    detail::write_text_file((fs::path(out_dir) / "metrics.jsonl").string(), jsonl);
    write_config_resolved(cfg, (fs::path(out_dir) / "config.resolved").string());
}

}  // namespace fedfreq
