#include <catch2/catch_amalgamated.hpp>

#include "fedfreq/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fedfreq;
using testutil::rand_tensor;

TEST_CASE("conv1d identity kernel passes input through", "[tensor]") {
    Tensor x = Tensor::of({1, 1, 3}, {1, 2, 3});
    Tensor k = Tensor::of({1, 1, 1}, {1});
    Tensor out = conv1d(x, k, Tensor::zeros({1}));
    REQUIRE(out.shape() == std::vector<int>{1, 1, 3});
    CHECK(out.data()[0] == 1.0);
    CHECK(out.data()[1] == 2.0);
    CHECK(out.data()[2] == 3.0);
}

TEST_CASE("conv1d matches the direct sliding-dot-product example", "[tensor]") {
    Tensor x = Tensor::of({1, 1, 3}, {1, 2, 3});
    Tensor k = Tensor::of({1, 1, 3}, {1, 0, -1});
    Tensor out = conv1d(x, k, Tensor::zeros({1}));
    REQUIRE(out.size() == 1);
    CHECK(out.data()[0] == -2.0);
}

TEST_CASE("conv1d agrees with the naive loop oracle on random shapes", "[tensor]") {
    Rng rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        const int batch = 1 + int(rng.below(3));
        const int ch_in = 1 + int(rng.below(3));
        const int ch_out = 1 + int(rng.below(4));
        const int len = 4 + int(rng.below(14));
        const int k = 1 + int(rng.below(uint64_t(std::min(len, 5))));
        const int stride = 1 + int(rng.below(2));
        const int padding = int(rng.below(3));
        if (k > len + 2 * padding) continue;

        Tensor x = rand_tensor({batch, ch_in, len}, rng);
        Tensor w = rand_tensor({ch_out, ch_in, k}, rng);
        Tensor b = rand_tensor({ch_out}, rng);
        Tensor out = conv1d(x, w, b, stride, padding);

        const auto want = oracle::conv1d(
            {x.data().begin(), x.data().end()}, batch, ch_in, len,
            {w.data().begin(), w.data().end()}, ch_out, k, {b.data().begin(), b.data().end()},
            stride, padding);
        REQUIRE(size_t(out.size()) == want.size());
        for (size_t i = 0; i < want.size(); ++i)
            CHECK(std::abs(out.data()[i] - want[i]) <=
                  1e-12 * std::max(1.0, std::abs(want[i])));
    }
}

TEST_CASE("conv1d rejects mismatched channel counts", "[tensor]") {
    Tensor x = Tensor::zeros({1, 2, 8});
    Tensor k = Tensor::zeros({3, 3, 3});
    CHECK_THROWS_AS(conv1d(x, k, Tensor::zeros({3})), DimensionError);
}

TEST_CASE("conv2d identity and all-ones examples", "[tensor]") {
    Rng rng(5);
    Tensor x = rand_tensor({1, 1, 4, 3}, rng);
    Tensor id = Tensor::of({1, 1, 1, 1}, {1});
    Tensor out = conv2d(x, id, Tensor::zeros({1}));
    REQUIRE(out.shape() == x.shape());
    for (int64_t i = 0; i < x.size(); ++i) CHECK(out.data()[size_t(i)] == x.data()[size_t(i)]);

    Tensor m = Tensor::of({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::of({1, 1, 2, 2}, {1, 1, 1, 1});
    Tensor s = conv2d(m, ones, Tensor::zeros({1}));
    REQUIRE(s.size() == 1);
    CHECK(s.data()[0] == 10.0);
}

TEST_CASE("conv2d agrees with the naive loop oracle on random shapes", "[tensor]") {
    Rng rng(202);
    for (int trial = 0; trial < 100; ++trial) {
        const int batch = 1 + int(rng.below(2));
        const int ch_in = 1 + int(rng.below(3));
        const int ch_out = 1 + int(rng.below(3));
        const int h = 3 + int(rng.below(7));
        const int w = 3 + int(rng.below(6));
        const int kh = 1 + int(rng.below(3));
        const int kw = 1 + int(rng.below(3));
        const int padding = int(rng.below(2));
        const int stride = 1 + int(rng.below(2));

        Tensor x = rand_tensor({batch, ch_in, h, w}, rng);
        Tensor kern = rand_tensor({ch_out, ch_in, kh, kw}, rng);
        Tensor b = rand_tensor({ch_out}, rng);
        Tensor out = conv2d(x, kern, b, stride, padding);

        const auto want = oracle::conv2d(
            {x.data().begin(), x.data().end()}, batch, ch_in, h, w,
            {kern.data().begin(), kern.data().end()}, ch_out, kh, kw,
            {b.data().begin(), b.data().end()}, stride, padding);
        REQUIRE(size_t(out.size()) == want.size());
        for (size_t i = 0; i < want.size(); ++i)
            CHECK(std::abs(out.data()[i] - want[i]) <=
                  1e-12 * std::max(1.0, std::abs(want[i])));
    }
}

TEST_CASE("maxpool1d examples and tie-break", "[tensor]") {
    Tensor x = Tensor::of({1, 1, 4}, {1, 3, 2, 5});
    Tensor out = maxpool1d(x, 2, 2);
    REQUIRE(out.shape() == std::vector<int>{1, 1, 2});
    CHECK(out.data()[0] == 3.0);
    CHECK(out.data()[1] == 5.0);

    Tensor y = maxpool1d(x, 1, 1);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[size_t(i)] == x.data()[size_t(i)]);

    // Constant input: gradient goes to the first element of each window.
    Tensor c = Tensor::full({1, 1, 6}, 2.5, /*requires_grad=*/true);
    Tensor pooled = maxpool1d(c, 3, 3);
    backward(sum(pooled));
    const std::vector<double> want = {1, 0, 0, 1, 0, 0};
    for (int i = 0; i < 6; ++i) CHECK(c.grad()[size_t(i)] == want[size_t(i)]);

    CHECK_THROWS_AS(maxpool1d(x, 5, 1), DimensionError);
}

TEST_CASE("batchnorm1d normalizes and denormalizes as specified", "[tensor]") {
    // Already standardized input with gamma=1, beta=0 stays put (up to eps).
    Tensor x = Tensor::of({2, 1, 2}, {-1.0, 1.0, -1.0, 1.0});
    Tensor gamma = Tensor::full({1}, 1.0);
    Tensor beta = Tensor::zeros({1});
    Tensor rm = Tensor::zeros({1});
    Tensor rv = Tensor::full({1}, 1.0);
    auto res = batchnorm1d(x, gamma, beta, rm, rv, Mode::train);
    for (int64_t i = 0; i < x.size(); ++i)
        CHECK(std::abs(res.out.data()[size_t(i)] - x.data()[size_t(i)]) < 1e-4);

    // gamma=2, beta=3: per-channel output mean 3 and (population) std 2.
    Rng rng(7);
    Tensor z = rand_tensor({4, 3, 5}, rng, false, 3.0);
    Tensor g2 = Tensor::full({3}, 2.0);
    Tensor b3 = Tensor::full({3}, 3.0);
    auto res2 = batchnorm1d(z, g2, b3, Tensor::zeros({3}), Tensor::full({3}, 1.0), Mode::train);
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        int n = 0;
        for (int b = 0; b < 4; ++b)
            for (int t = 0; t < 5; ++t) {
                mean += res2.out.data()[size_t((b * 3 + c) * 5 + t)];
                ++n;
            }
        mean /= n;
        for (int b = 0; b < 4; ++b)
            for (int t = 0; t < 5; ++t) {
                const double d = res2.out.data()[size_t((b * 3 + c) * 5 + t)] - mean;
                var += d * d;
            }
        var /= n;
        CHECK(std::abs(mean - 3.0) < 1e-9);
        CHECK(std::abs(std::sqrt(var) - 2.0) < 1e-4);
    }

    // Eval mode reproduces the affine formula from the running stats exactly.
    Tensor rm2 = Tensor::of({1}, {0.5});
    Tensor rv2 = Tensor::of({1}, {4.0});
    Tensor xe = Tensor::of({1, 1, 3}, {0.5, 2.5, -1.5});
    auto res3 = batchnorm1d(xe, Tensor::full({1}, 1.5), Tensor::full({1}, -1.0), rm2, rv2,
                            Mode::eval, 0.1, 1e-5);
    for (int i = 0; i < 3; ++i) {
        const double want =
            (xe.data()[size_t(i)] - 0.5) / std::sqrt(4.0 + 1e-5) * 1.5 + (-1.0);
        CHECK(res3.out.data()[size_t(i)] == want);
    }

    CHECK_THROWS_AS(
        batchnorm1d(Tensor::zeros({1, 1, 4}), gamma, beta, rm, rv, Mode::train),
        DegenerateBatchError);
}

TEST_CASE("softmax symmetry, normalization and positivity", "[tensor]") {
    Tensor z = Tensor::of({1, 3}, {0, 0, 0});
    Tensor p = softmax(z);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(p.data()[size_t(i)] - 1.0 / 3.0) < 1e-15);

    Rng rng(9);
    Tensor x = rand_tensor({8, 7}, rng, false, 30.0);
    Tensor probs = softmax(x);
    for (int b = 0; b < 8; ++b) {
        double s = 0.0;
        for (int c = 0; c < 7; ++c) {
            const double v = probs.data()[size_t(b * 7 + c)];
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("leaky relu definition", "[tensor]") {
    Tensor x = Tensor::of({1, 2}, {-1.0, 2.0});
    Tensor y = leaky_relu(x, 0.01);
    CHECK(y.data()[0] == -0.01);
    CHECK(y.data()[1] == 2.0);
    Tensor r = relu(x);
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 2.0);
}

TEST_CASE("dropout eval is bit-identical and train mode is unbiased", "[tensor]") {
    Rng rng(11);
    Tensor x = rand_tensor({4, 5}, rng);
    Rng drng(3);
    Tensor y = dropout(x, 0.5, drng, Mode::eval);
    CHECK(y.same_node(x));  // pass-through, trivially bit-identical

    // Mean of dropout(1.0) над many masks stays within 3 standard errors of 1:
    // each mask value is Bernoulli(keep)/keep with variance rate/(1-rate).
    const double rate = 0.5;
    const int n = 10000;
    Tensor one = Tensor::full({1, 1}, 1.0);
    double sum = 0.0;
    Rng mrng(12345);
    for (int i = 0; i < n; ++i) sum += dropout(one, rate, mrng, Mode::train).data()[0];
    const double mean = sum / n;
    const double se = std::sqrt(rate / (1.0 - rate) / n);
    CHECK(std::abs(mean - 1.0) <= 3.0 * se);

    CHECK_THROWS_AS(dropout(x, 1.0, drng, Mode::train), ConfigurationError);
}

TEST_CASE("cross entropy closed forms", "[tensor]") {
    // Uniform logits over 7 classes -> ln 7.
    Tensor logits = Tensor::zeros({3, 7});
    Tensor loss = cross_entropy_loss(logits, {0, 3, 6});
    CHECK(std::abs(loss.item() - std::log(7.0)) < 1e-12);

    // One-hot-correct logits: loss -> 0 as the margin grows.
    double prev = 1e9;
    for (double margin : {2.0, 5.0, 10.0, 30.0}) {
        Tensor l = Tensor::zeros({1, 7});
        l.data()[2] = margin;
        const double v = cross_entropy_loss(l, {2}).item();
        CHECK(v < prev);
        prev = v;
    }
    CHECK(prev < 1e-12);

    // L2 term: a single weight of 2.0 at rate 1e-4 adds 4e-4.
    Tensor w = Tensor::of({1}, {2.0}, true);
    Tensor base = cross_entropy_loss(logits, {0, 3, 6}, 0.0, {});
    Tensor with_l2 = cross_entropy_loss(logits, {0, 3, 6}, 1e-4, {w});
    CHECK(std::abs((with_l2.item() - base.item()) - 4e-4) < 1e-15);

    CHECK_THROWS_AS(cross_entropy_loss(logits, {0, 7, 1}), LabelError);
    CHECK_THROWS_AS(cross_entropy_loss(logits, {0, -1, 1}), LabelError);
}

TEST_CASE("dense matches a hand computation", "[tensor]") {
    Tensor x = Tensor::of({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w = Tensor::of({2, 3}, {1, 0, -1, 0.5, 0.5, 0.5});
    Tensor b = Tensor::of({2}, {10, -10});
    Tensor y = dense(x, w, b);
    REQUIRE(y.shape() == std::vector<int>{2, 2});
    CHECK(y.data()[0] == 1 * 1 + 2 * 0 + 3 * -1 + 10);
    CHECK(y.data()[1] == 0.5 * (1 + 2 + 3) - 10);
    CHECK(y.data()[2] == 4 * 1 + 5 * 0 + 6 * -1 + 10);
    CHECK(y.data()[3] == 0.5 * (4 + 5 + 6) - 10);

    CHECK_THROWS_AS(dense(x, Tensor::zeros({2, 4}), b), DimensionError);
}
