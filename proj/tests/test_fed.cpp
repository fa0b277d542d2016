#include <catch2/catch_amalgamated.hpp>

#include "fedfreq/fed.hpp"
#include "test_util.hpp"

using namespace fedfreq;
using testutil::rand_window;

namespace {

ParamTree toy_tree(double head, double f5, double f40) {
    ParamTree t;
    t.emplace("head/w", Tensor::of({1}, {head}));
    t.emplace("f5.acc/w", Tensor::of({1}, {f5}));
    t.emplace("f40.acc/w", Tensor::of({1}, {f40}));
    return t;
}

ClientUpdate toy_update(int id, long n, double head, double f5, double f40,
                        std::set<std::string> trained) {
    ClientUpdate u;
    u.client_id = id;
    u.n_samples = n;
    u.params = toy_tree(head, f5, f40);
    u.trained_keys = std::move(trained);
    return u;
}

ModelConfig fed_test_config(std::vector<int> freqs = {5}) {
    ModelConfig cfg = default_model_config(std::move(freqs), {{"acc", 3}, {"gyr", 3}}, 7);
    for (auto& [fs, ec] : cfg.encoders) {
        ec.temporal_channels = {3, 3, 4, 4};
        ec.spectral_channels = {2, 3, 3};
        ec.latent_dim = 6;
        ec.spec_fc_dim = 4;
    }
    cfg.head_width = 10;
    cfg.hp.learning_rate = 1e-3;
    cfg.hp.dropout_rate = 0.0;
    return cfg;
}

ClientState make_client(int id, const ModelConfig& cfg, int fs, int n_windows, uint64_t seed,
                        int n_classes = 7) {
    Rng rng(seed);
    ClientState state;
    state.client_id = id;
    for (int i = 0; i < n_windows; ++i)
        state.dataset.push_back(
            rand_window(fs, 6, cfg.window_len(fs), int(rng.below(uint64_t(n_classes))), rng, 2));
    return state;
}

// Two-class windows whose class is a clean 1 Hz vs 2 Hz tone; linearly
// separable through the spectral pathway.
ClientState tone_client(int id, const ModelConfig& cfg, int n_windows, uint64_t seed) {
    Rng rng(seed);
    ClientState state;
    state.client_id = id;
    const int len = cfg.window_len(5);
    for (int i = 0; i < n_windows; ++i) {
        const int label = int(rng.below(2));
        const double freq = label == 0 ? 1.0 : 2.0;
        const double phase = rng.next_uniform(0.0, 2.0 * M_PI);
        SensorWindow w;
        w.fs = 5;
        w.label = label;
        w.context = {1, 1};
        w.data = Tensor::zeros({6, len});
        for (int r = 0; r < 6; ++r)
            for (int t = 0; t < len; ++t)
                w.data.data()[size_t(r * len + t)] =
                    std::sin(2.0 * M_PI * freq * double(t) / 5.0 + phase) +
                    0.05 * rng.next_normal();
        state.dataset.push_back(std::move(w));
    }
    return state;
}

}  // namespace

TEST_CASE("aggregating a single update returns it exactly", "[fed]") {
    auto u = toy_update(3, 5, 1.25, -2.5, 0.75, {"head", "f5.acc", "f40.acc"});
    ParamTree global = toy_tree(0, 0, 0);
    ParamTree out = aggregate({u}, global);
    CHECK(out.at("head/w").data()[0] == 1.25);
    CHECK(out.at("f5.acc/w").data()[0] == -2.5);
    CHECK(out.at("f40.acc/w").data()[0] == 0.75);
}

TEST_CASE("sample counts weight the average", "[fed]") {
    // n=1 with value 0 and n=3 with value 4: 0*0.25 + 4*0.75 = 3.
    auto a = toy_update(0, 1, 0.0, 0.0, 0.0, {"head", "f5.acc", "f40.acc"});
    auto b = toy_update(1, 3, 4.0, 4.0, 4.0, {"head", "f5.acc", "f40.acc"});
    ParamTree out = aggregate({a, b}, toy_tree(0, 0, 0));
    CHECK(out.at("head/w").data()[0] == 3.0);
}

TEST_CASE("coverage-aware aggregation averages per branch", "[fed]") {
    // A 5 Hz client and a 40 Hz client: the head averages over both, each
    // encoder branch comes solely from its owner.
    auto low = toy_update(0, 2, 1.0, 10.0, -99.0, {"head", "f5.acc"});
    auto high = toy_update(1, 6, 5.0, -99.0, 20.0, {"head", "f40.acc"});
    ParamTree out = aggregate({low, high}, toy_tree(0, 0, 0));
    CHECK(std::abs(out.at("head/w").data()[0] - (1.0 * 0.25 + 5.0 * 0.75)) < 1e-15);
    CHECK(out.at("f5.acc/w").data()[0] == 10.0);
    CHECK(out.at("f40.acc/w").data()[0] == 20.0);
}

TEST_CASE("aggregation is permutation and scale invariant", "[fed]") {
    Rng rng(12);
    std::vector<ClientUpdate> updates;
    for (int i = 0; i < 5; ++i)
        updates.push_back(toy_update(i, 1 + int(rng.below(9)), rng.next_normal(),
                                     rng.next_normal(), rng.next_normal(),
                                     {"head", "f5.acc", "f40.acc"}));
    ParamTree global = toy_tree(0, 0, 0);
    ParamTree base = aggregate(updates, global);

    std::vector<ClientUpdate> shuffled = {updates[3], updates[0], updates[4], updates[2],
                                          updates[1]};
    CHECK(trees_bit_equal(aggregate(shuffled, global), base));

    std::vector<ClientUpdate> scaled = updates;
    for (auto& u : scaled) u.n_samples *= 3;
    CHECK(trees_bit_equal(aggregate(scaled, global), base));
}

TEST_CASE("uncovered branches keep the previous global value", "[fed]") {
    auto low = toy_update(0, 4, 1.0, 2.0, 0.0, {"head", "f5.acc"});
    ParamTree global = toy_tree(-7.0, -8.0, -9.0);
    ParamTree out = aggregate({low}, global);
    CHECK(out.at("f40.acc/w").same_node(global.at("f40.acc/w")));
    CHECK(out.at("f40.acc/w").data()[0] == -9.0);
    CHECK(out.at("f5.acc/w").data()[0] == 2.0);
}

TEST_CASE("aggregation weights sum to one", "[fed]") {
    // Averaging identical trees must reproduce them to 1e-15.
    std::vector<ClientUpdate> updates;
    for (int i = 0; i < 4; ++i)
        updates.push_back(toy_update(i, 2 * i + 1, 3.14159, -2.71828, 1.41421,
                                     {"head", "f5.acc", "f40.acc"}));
    ParamTree out = aggregate(updates, toy_tree(0, 0, 0));
    CHECK(std::abs(out.at("head/w").data()[0] - 3.14159) <= 1e-15);
    CHECK(std::abs(out.at("f5.acc/w").data()[0] + 2.71828) <= 1e-15);
}

TEST_CASE("aggregate names the offending key on shape mismatch", "[fed]") {
    auto a = toy_update(0, 1, 0, 0, 0, {"head", "f5.acc", "f40.acc"});
    auto b = toy_update(1, 1, 0, 0, 0, {"head", "f5.acc", "f40.acc"});
    b.params["head/w"] = Tensor::zeros({2});
    REQUIRE_THROWS_WITH(aggregate({a, b}, toy_tree(0, 0, 0)),
                        Catch::Matchers::ContainsSubstring("head/w"));
    CHECK_THROWS_AS(aggregate({}, toy_tree(0, 0, 0)), AggregationError);
}

TEST_CASE("local_train skips clients without trainable data", "[fed]") {
    ModelConfig cfg = fed_test_config();
    ParamTree global = init_params(cfg, 1);
    ClientState empty;
    empty.client_id = 9;
    CHECK_FALSE(local_train(empty, global, cfg, 123).has_value());

    // One window cannot form a train-mode batch either.
    ClientState lone = make_client(10, cfg, 5, 1, 5);
    CHECK_FALSE(local_train(lone, global, cfg, 123).has_value());
}

TEST_CASE("local_train reports trained branches and freezes the rest", "[fed]") {
    ModelConfig cfg = fed_test_config({5, 40});
    ParamTree global = init_params(cfg, 2);
    ClientState high = make_client(1, cfg, 40, 6, 77);
    auto update = local_train(high, global, cfg, 99);
    REQUIRE(update.has_value());
    CHECK(update->n_samples == 6);
    CHECK(update->trained_keys ==
          std::set<std::string>{"head", "f40.acc", "f40.gyr"});
    for (const auto& [key, tensor] : update->params)
        if (key.rfind("f5.", 0) == 0) {
            INFO(key);
            CHECK(testutil::bits_equal(tensor, global.at(key)));
        }
}

TEST_CASE("zero learning rate yields a null update of the weights", "[fed]") {
    ModelConfig cfg = fed_test_config();
    cfg.hp.learning_rate = 0.0;  // optimizer becomes a no-op
    ParamTree global = init_params(cfg, 3);
    ClientState client = make_client(0, cfg, 5, 8, 13);
    auto update = local_train(client, global, cfg, 55);
    REQUIRE(update.has_value());
    // Every optimized leaf is bit-equal; batch-norm running statistics are
    // data-driven and still move.
    for (const auto& [key, tensor] : update->params)
        if (is_trainable_key(key)) {
            INFO(key);
            CHECK(testutil::bits_equal(tensor, global.at(key)));
        }
}

TEST_CASE("run_rounds with zero rounds returns the initial model", "[fed]") {
    ModelConfig cfg = fed_test_config();
    auto c0 = std::make_shared<SimClient>(make_client(0, cfg, 5, 6, 21));
    TrainResult res = run_rounds({c0}, {}, cfg, 0, 42);
    CHECK(res.log.empty());
    CHECK(res.best_round == -1);
    CHECK(trees_bit_equal(res.best_params, init_params(cfg, derive_seed(42, "init"))));
}

TEST_CASE("client order does not change the aggregated model", "[fed]") {
    ModelConfig cfg = fed_test_config();
    std::vector<std::shared_ptr<IClient>> clients;
    for (int i = 0; i < 3; ++i)
        clients.push_back(std::make_shared<SimClient>(make_client(i, cfg, 5, 5 + i, 100 + i)));
    auto val = std::make_shared<SimClient>(make_client(7, cfg, 5, 6, 200));

    TrainResult a = run_rounds(clients, {val}, cfg, 2, 31);
    std::vector<std::shared_ptr<IClient>> permuted = {clients[2], clients[0], clients[1]};
    TrainResult b = run_rounds(permuted, {val}, cfg, 2, 31);
    CHECK(trees_bit_equal(a.best_params, b.best_params));
}

TEST_CASE("federated training fits separable tones", "[fed]") {
    ModelConfig cfg = fed_test_config();
    cfg.n_classes = 2;
    cfg.hp.learning_rate = 1e-3;
    std::vector<std::shared_ptr<IClient>> clients;
    for (int i = 0; i < 3; ++i)
        clients.push_back(std::make_shared<SimClient>(tone_client(i, cfg, 30, 500 + i)));
    auto val = std::make_shared<SimClient>(tone_client(9, cfg, 20, 900));

    TrainResult res = run_rounds(clients, {val}, cfg, 30, 7);
    double best_acc = 0.0;
    for (const RoundLog& r : res.log) best_acc = std::max(best_acc, r.val_accuracy);
    CHECK(best_acc > 0.9);

    // Exactly one round carries the selected flag.
    int selected = 0;
    for (const RoundLog& r : res.log) selected += r.selected ? 1 : 0;
    CHECK(selected == 1);
}

TEST_CASE("one federated round with one client equals one centralized epoch", "[fed]") {
    ModelConfig cfg = fed_test_config();
    ClientState client = make_client(4, cfg, 5, 10, 321);
    auto sim = std::make_shared<SimClient>(client);

    TrainResult fed = run_rounds({sim}, {}, cfg, 1, 77);
    TrainResult central = centralized_train({client}, {}, cfg, 1, 77);
    CHECK(trees_bit_equal(fed.best_params, central.best_params));
}

TEST_CASE("centralized training is reproducible and respects epochs=0", "[fed]") {
    ModelConfig cfg = fed_test_config();
    ClientState a = make_client(0, cfg, 5, 7, 11);
    ClientState b = make_client(1, cfg, 5, 9, 12);
    auto val = std::make_shared<SimClient>(make_client(5, cfg, 5, 6, 44));

    TrainResult zero = centralized_train({a, b}, {val}, cfg, 0, 5);
    CHECK(zero.log.empty());
    CHECK(trees_bit_equal(zero.best_params, init_params(cfg, derive_seed(5, "init"))));

    TrainResult r1 = centralized_train({a, b}, {val}, cfg, 3, 5);
    TrainResult r2 = centralized_train({a, b}, {val}, cfg, 3, 5);
    CHECK(trees_bit_equal(r1.best_params, r2.best_params));
}

namespace {

// Records every interaction crossing the client boundary. The server side
// only ever sees ParamTree broadcasts, ClientUpdate returns and EvalCounts;
// windows stay inside the wrapped client.
class RecordingClient : public IClient {
public:
    RecordingClient(std::shared_ptr<IClient> inner, std::vector<std::string>& log)
        : inner_(std::move(inner)), log_(log) {}

    int id() const override { return inner_->id(); }
    long sample_count() const override { return inner_->sample_count(); }

    std::optional<ClientUpdate> train_epoch(const ParamTree& global, const ModelConfig& cfg,
                                            uint64_t epoch_seed) override {
        log_.push_back("train:" + std::to_string(id()));
        return inner_->train_epoch(global, cfg, epoch_seed);
    }

    EvalCounts evaluate(const ParamTree& params, const ModelConfig& cfg) const override {
        log_.push_back("eval:" + std::to_string(id()));
        return inner_->evaluate(params, cfg);
    }

private:
    std::shared_ptr<IClient> inner_;
    std::vector<std::string>& log_;
};

}  // namespace

TEST_CASE("the round loop exchanges only updates and eval counts", "[fed]") {
    ModelConfig cfg = fed_test_config();
    std::vector<std::string> log;
    std::vector<std::shared_ptr<IClient>> clients;
    for (int i = 0; i < 2; ++i)
        clients.push_back(std::make_shared<RecordingClient>(
            std::make_shared<SimClient>(make_client(i, cfg, 5, 5, 60 + i)), log));
    std::vector<std::shared_ptr<IClient>> val = {std::make_shared<RecordingClient>(
        std::make_shared<SimClient>(make_client(8, cfg, 5, 4, 90)), log)};

    run_rounds(clients, val, cfg, 2, 3);

    // Per round: one train call per client (in id order), then one eval call.
    const std::vector<std::string> want = {"train:0", "train:1", "eval:8",
                                           "train:0", "train:1", "eval:8"};
    CHECK(log == want);
}
