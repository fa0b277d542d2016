#include <catch2/catch_amalgamated.hpp>

#include "fedfreq/adam.hpp"
#include "test_util.hpp"

using namespace fedfreq;

namespace {

ParamTree one_leaf_tree(double value) {
    ParamTree t;
    t.emplace("head/w", Tensor::of({1}, {value}));
    return t;
}

}  // namespace

TEST_CASE("first adam step moves by about minus the learning rate", "[adam]") {
    HyperParams hp;
    hp.learning_rate = 1e-4;
    ParamTree params = one_leaf_tree(1.0);
    GradMap grads{{"head/w", {1.0}}};
    AdamState state;
    ParamTree next = adam_step(params, grads, state, hp);
    // Bias correction makes m_hat = v_hat = 1 on the first step, so the
    // update is -lr / (1 + eps).
    const double delta = next.at("head/w").data()[0] - 1.0;
    CHECK(std::abs(delta + 1e-4) < 1e-9);
}

TEST_CASE("zero gradients leave parameters unchanged", "[adam]") {
    HyperParams hp;
    ParamTree params = one_leaf_tree(0.75);
    GradMap grads{{"head/w", {0.0}}};
    AdamState state;
    ParamTree next = adam_step(params, grads, state, hp);
    CHECK(next.at("head/w").data()[0] == 0.75);
}

TEST_CASE("identical trees and gradients produce identical updates", "[adam]") {
    HyperParams hp;
    Rng rng(4);
    auto make = [&](uint64_t seed) {
        Rng r(seed);
        ParamTree t;
        t.emplace("head/w", testutil::rand_tensor({3, 2}, r));
        t.emplace("f5.acc/c.w", testutil::rand_tensor({4}, r));
        return t;
    };
    ParamTree a = make(10), b = make(10);
    GradMap grads;
    grads["head/w"] = {0.1, -0.2, 0.3, 0.5, -0.5, 0.0};
    grads["f5.acc/c.w"] = {1.0, 2.0, -1.0, 0.25};
    AdamState sa, sb;
    for (int step = 0; step < 5; ++step) {
        a = adam_step(a, grads, sa, hp);
        b = adam_step(b, grads, sb, hp);
    }
    CHECK(trees_bit_equal(a, b));
}

TEST_CASE("keys without gradients keep their exact values", "[adam]") {
    HyperParams hp;
    Rng rng(77);
    ParamTree params;
    params.emplace("f5.acc/c.w", testutil::rand_tensor({8}, rng));
    params.emplace("f40.acc/c.w", testutil::rand_tensor({8}, rng));
    Tensor untouched_before = params.at("f40.acc/c.w");
    GradMap grads{{"f5.acc/c.w", std::vector<double>(8, 0.3)}};
    AdamState state;
    ParamTree next = adam_step(params, grads, state, hp);
    CHECK(next.at("f40.acc/c.w").same_node(untouched_before));
    CHECK(next.at("f5.acc/c.w").data()[0] != params.at("f5.acc/c.w").data()[0]);
}

TEST_CASE("adam rejects shape mismatches and unknown keys", "[adam]") {
    HyperParams hp;
    ParamTree params = one_leaf_tree(1.0);
    AdamState state;
    GradMap wrong_size{{"head/w", {1.0, 2.0}}};
    CHECK_THROWS_AS(adam_step(params, wrong_size, state, hp), DimensionError);
    GradMap unknown{{"head/nope", {1.0}}};
    AdamState state2;
    CHECK_THROWS_AS(adam_step(params, unknown, state2, hp), DimensionError);
}

TEST_CASE("hyperparameter validation matches the documented ranges", "[adam]") {
    HyperParams hp;
    hp.validate();
    hp.learning_rate = 0.0;
    CHECK_THROWS_AS(hp.validate(), ConfigurationError);
    hp.learning_rate = 1e-4;
    hp.dropout_rate = 1.0;
    CHECK_THROWS_AS(hp.validate(), ConfigurationError);
    hp.dropout_rate = 0.5;
    hp.adam_beta1 = 1.0;
    CHECK_THROWS_AS(hp.validate(), ConfigurationError);
}
