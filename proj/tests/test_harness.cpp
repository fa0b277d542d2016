#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "fedfreq/harness.hpp"

using namespace fedfreq;
namespace fs = std::filesystem;

namespace {

// A deliberately small experiment so harness tests stay fast.
ExperimentConfig micro_config() {
    ExperimentConfig cfg;
    cfg.dataset = "synth";
    cfg.synth_participants = 6;
    cfg.synth_seconds_per_class = 6.0;
    cfg.synth_seed = 500;
    cfg.low_fs = 5;
    cfg.high_fs = 40;
    cfg.overlap = 0.0;
    cfg.split_protocol = "monte_carlo";
    cfg.split_folds = 2;
    cfg.train_frac = 0.7;
    cfg.latent_dim = 6;
    cfg.spec_fc_dim = 4;
    cfg.head_width = 10;
    cfg.temporal_channels = {3, 3, 4, 4};
    cfg.spectral_channels = {2, 3, 3};
    cfg.hp.learning_rate = 1e-3;
    cfg.hp.batch_size = 16;
    cfg.hp.dropout_rate = 0.25;
    cfg.rounds = 2;
    cfg.seed = 9;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("fedfreq_harness_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("matrix rows follow the participant-count structure", "[harness]") {
    ExperimentConfig cfg = micro_config();
    DatasetBundle data = load_dataset(cfg);
    MatrixResult result = run_matrix(cfg, data);

    REQUIRE(result.rows.size() == 6);
    std::map<std::string, MatrixRow> rows;
    for (const MatrixRow& r : result.rows) rows[r.config] = r;

    const double n_train = 4.0;  // round(6 * 0.7) = 4
    CHECK(rows.at("low-only").n_part_high == 0.0);
    CHECK(rows.at("low-only").n_part_low > 0.0);
    CHECK(rows.at("low-only").n_part_low < n_train);
    CHECK(rows.at("down-low").n_part_low == n_train);
    CHECK(rows.at("down-low").n_part_high == 0.0);
    CHECK(rows.at("high-only").n_part_low == 0.0);
    CHECK(rows.at("ideal-high").n_part_high == n_train);
    CHECK(rows.at("multi@low").n_part_low + rows.at("multi@low").n_part_high == n_train);

    // The two multi rows evaluate the same trained checkpoint per fold.
    std::map<int, std::string> multi_low_hash, multi_high_hash;
    for (const FoldRowDetail& d : result.details) {
        if (d.config == "multi@low") multi_low_hash[d.fold] = d.checkpoint_hash;
        if (d.config == "multi@high") multi_high_hash[d.fold] = d.checkpoint_hash;
    }
    REQUIRE(multi_low_hash.size() == 2);
    CHECK(multi_low_hash == multi_high_hash);

    // Every configuration ran on every fold of the one shared plan.
    std::map<std::string, std::set<int>> folds_seen;
    for (const FoldRowDetail& d : result.details) folds_seen[d.config].insert(d.fold);
    for (const auto& [config, folds] : folds_seen) CHECK(folds == std::set<int>{0, 1});
}

TEST_CASE("matrix runs are deterministic and worker-count independent", "[harness]") {
    ExperimentConfig cfg = micro_config();
    cfg.configs = {"low-only", "multi@low", "multi@high"};
    DatasetBundle data = load_dataset(cfg);

    setenv("FEDFREQ_WORKERS", "1", 1);
    MatrixResult serial = run_matrix(cfg, data);
    setenv("FEDFREQ_WORKERS", "2", 1);
    MatrixResult threaded = run_matrix(cfg, data);
    unsetenv("FEDFREQ_WORKERS");

    REQUIRE(serial.details.size() == threaded.details.size());
    for (size_t i = 0; i < serial.details.size(); ++i) {
        CHECK(serial.details[i].checkpoint_hash == threaded.details[i].checkpoint_hash);
        CHECK(serial.details[i].test.macro_f1 == threaded.details[i].test.macro_f1);
    }
}

TEST_CASE("degenerate low==high collapses all configurations", "[harness]") {
    ExperimentConfig cfg = micro_config();
    cfg.low_fs = 5;
    cfg.high_fs = 5;
    cfg.split_folds = 1;
    DatasetBundle data = load_dataset(cfg);
    MatrixResult result = run_matrix(cfg, data);

    // All six rows train on identical data with identical seeds, so every
    // fold detail carries the same checkpoint.
    std::set<std::string> hashes;
    for (const FoldRowDetail& d : result.details) hashes.insert(d.checkpoint_hash);
    CHECK(hashes.size() == 1);
    std::set<double> f1s;
    for (const MatrixRow& r : result.rows) f1s.insert(r.mean_f1);
    CHECK(f1s.size() == 1);
}

TEST_CASE("ablation subsets nest and the full pool reproduces the main run", "[harness]") {
    ExperimentConfig cfg = micro_config();
    cfg.ablation_counts = {2, 3, 4};  // 4 == the full training pool
    cfg.ablation_folds = 1;
    DatasetBundle data = load_dataset(cfg);

    AblationResult ablation = run_participant_ablation(cfg, data);
    std::map<int, std::vector<int>> fed_subsets;
    for (const AblationCell& c : ablation.details)
        if (c.mode == "federated") fed_subsets[c.count] = c.subset;
    REQUIRE(fed_subsets.size() == 3);
    for (int n : {2, 3}) {
        std::set<int> small(fed_subsets.at(n).begin(), fed_subsets.at(n).end());
        std::set<int> big(fed_subsets.at(n + 1).begin(), fed_subsets.at(n + 1).end());
        for (int id : small) CHECK(big.count(id) == 1);
    }

    // count == full training pool: identical to the matrix ideal-high row.
    cfg.configs = {"ideal-high"};
    MatrixResult matrix = run_matrix(cfg, data);
    std::string matrix_hash;
    for (const FoldRowDetail& d : matrix.details)
        if (d.fold == 0) matrix_hash = d.checkpoint_hash;
    std::string ablation_hash;
    for (const AblationCell& c : ablation.details)
        if (c.count == 4 && c.mode == "federated" && c.fold == 0)
            ablation_hash = c.checkpoint_hash;
    CHECK(matrix_hash == ablation_hash);

    cfg.ablation_counts = {99};
    CHECK_THROWS_AS(run_participant_ablation(cfg, data), ConfigurationError);
}

TEST_CASE("reports are byte-identical across reruns", "[harness]") {
    ExperimentConfig cfg = micro_config();
    cfg.configs = {"low-only", "down-low"};
    DatasetBundle data = load_dataset(cfg);

    TempDir a, b;
    emit_matrix_report(cfg, run_matrix(cfg, data), a.path.string());
    emit_matrix_report(cfg, run_matrix(cfg, data), b.path.string());

    for (const char* name : {"matrix.csv", "metrics.jsonl", "config.resolved"}) {
        INFO(name);
        CHECK(slurp(a.path / name) == slurp(b.path / name));
    }

    // Documented schema: comment line, then the 7-column header.
    std::istringstream csv(slurp(a.path / "matrix.csv"));
    std::string comment, header;
    std::getline(csv, comment);
    std::getline(csv, header);
    CHECK(comment.rfind("# seed=", 0) == 0);
    CHECK(header ==
          "config,fold_mean_f1,fold_std_f1,fold_mean_acc,fold_std_acc,n_part_low,n_part_high");

    // config.resolved parses back into an equal experiment config.
    ExperimentConfig back =
        load_experiment_config((a.path / "config.resolved").string());
    CHECK(back == cfg);
}

TEST_CASE("the window cache serves rebuilt windows bit-identically", "[harness]") {
    ExperimentConfig cfg = micro_config();
    DatasetBundle data = load_dataset(cfg);
    WindowCache cache(data, cfg);
    cache.prebuild({0, 1}, {5, 40});
    const auto& a = cache.get(0, 40);
    auto direct = build_client_windows(data.streams.at(0), 40, cfg.window_seconds, cfg.overlap,
                                       data.manifest.sensors);
    REQUIRE(a.size() == direct.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].label == direct[i].label);
        auto va = a[i].data.data();
        auto vb = direct[i].data.data();
        for (size_t j = 0; j < va.size(); ++j) CHECK(va[j] == vb[j]);
    }
    CHECK_THROWS_AS(cache.get(5, 40), Error);
}
