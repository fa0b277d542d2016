#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "fedfreq/config.hpp"

using namespace fedfreq;
namespace fs = std::filesystem;

TEST_CASE("defaults round-trip through the canonical text", "[config]") {
    ExperimentConfig cfg;
    const std::string text = canonical_config_text(cfg);
    ExperimentConfig back = parse_config_text(text, "test");
    CHECK(back == cfg);
    CHECK(config_hash(back) == config_hash(cfg));
}

TEST_CASE("non-default values survive the round trip", "[config]") {
    ExperimentConfig cfg;
    cfg.dataset = "synth";
    cfg.synth_participants = 9;
    cfg.synth_seconds_per_class = 7.25;
    cfg.low_fs = 3;
    cfg.train_frac = 0.7;
    cfg.temporal_channels = {4, 4, 8, 8};
    cfg.spec_overrides[3] = {4, 2, 8, -80.0};
    cfg.hp.learning_rate = 2.5e-3;
    cfg.mode = "centralized";
    cfg.configs = {"multi@low", "multi@high"};
    cfg.seed = 123456789;
    ExperimentConfig back = parse_config_text(canonical_config_text(cfg), "test");
    CHECK(back == cfg);
    CHECK(back.synth_seconds_per_class == 7.25);
    CHECK(back.hp.learning_rate == 2.5e-3);
    CHECK(back.spec_overrides.at(3).win_len == 4);
}

TEST_CASE("unknown keys and malformed lines are configuration errors", "[config]") {
    REQUIRE_THROWS_WITH(parse_config_text("bogus_key = 1\n", "test"),
                        Catch::Matchers::ContainsSubstring("bogus_key"));
    REQUIRE_THROWS_WITH(parse_config_text("rounds\n", "test"),
                        Catch::Matchers::ContainsSubstring("expected key = value"));
    CHECK_THROWS_AS(parse_config_text("rounds = soon\n", "test"), ConfigurationError);
    CHECK_THROWS_AS(parse_config_text("mode = hybrid\n", "test"), ConfigurationError);
    CHECK_THROWS_AS(parse_config_text("configs = low-only,warp\n", "test"),
                    ConfigurationError);
}

TEST_CASE("missing config files name the path", "[config]") {
    REQUIRE_THROWS_WITH(load_experiment_config("/nonexistent/place/run.cfg"),
                        Catch::Matchers::ContainsSubstring("/nonexistent/place/run.cfg"));
}

TEST_CASE("config files parse with comments and load from disk", "[config]") {
    const fs::path dir =
        fs::temp_directory_path() / ("fedfreq_cfg_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "run.cfg");
        out << "# experiment\n";
        out << "dataset = synth\n";
        out << "synth.participants = 4\n";
        out << "rounds = 3\n";
        out << "seed = 99\n";
        out << "configs = all\n";
    }
    ExperimentConfig cfg = load_experiment_config((dir / "run.cfg").string());
    CHECK(cfg.synth_participants == 4);
    CHECK(cfg.rounds == 3);
    CHECK(cfg.seed == 99);
    CHECK(cfg.configs == all_matrix_configs());
    fs::remove_all(dir);
}

TEST_CASE("hash tracks semantic changes and ignores out_dir", "[config]") {
    ExperimentConfig a;
    ExperimentConfig b;
    b.out_dir = "somewhere/else";
    CHECK(config_hash(a) == config_hash(b));
    b.rounds += 1;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("derived model config matches the experiment settings", "[config]") {
    ExperimentConfig cfg;
    cfg.latent_dim = 12;
    cfg.temporal_channels = {2, 2, 2, 2};
    const std::vector<SensorSpec> sensors = {{"acc", 3}};
    ModelConfig mc = model_config_from(cfg, {40, 5, 5}, sensors, 7);
    CHECK(mc.frequencies == std::vector<int>{5, 40});  // sorted, unique
    CHECK(mc.encoder(5).latent_dim == 12);
    CHECK(mc.encoder(40).spec_cfg.win_len == 16);
    CHECK(mc.n_classes == 7);
}

TEST_CASE("synth spec derivation honours presets", "[config]") {
    ExperimentConfig cfg;
    cfg.synth_preset = "imbalanced";
    cfg.synth_participants = 5;
    SynthSpec spec = synth_spec_from(cfg);
    CHECK(spec.n_participants == 5);
    CHECK(spec.classes.front().duration_weight > spec.classes.back().duration_weight);

    cfg.synth_preset = "balanced";
    SynthSpec bal = synth_spec_from(cfg);
    CHECK(bal.classes.front().duration_weight == bal.classes.back().duration_weight);

    cfg.synth_preset = "nonsense";
    CHECK_THROWS_AS(synth_spec_from(cfg), ConfigurationError);
}
