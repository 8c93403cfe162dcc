#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "mg/autodiff.hpp"

using namespace mg;
using namespace mg::ad;

namespace {

Tensor rand_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("relu basics") {
    Var x = constant(Tensor({2}, {-3.0, 2.5}));
    Var y = relu(x);
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == 2.5);
}

TEST_CASE("softmax of zeros is uniform") {
    Var x = constant(Tensor({1, 4}, {0, 0, 0, 0}));
    Var y = softmax(x);
    for (int j = 0; j < 4; ++j) CHECK(y.value()[j] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("global_avg_pool reduces 6x6x128 constant map to constant 128-vector") {
    Tensor x({1, 128, 6, 6});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = 3.25;
    Var y = global_avg_pool(constant(x));
    REQUIRE(y.shape() == std::vector<int>{1, 128});
    for (int c = 0; c < 128; ++c) CHECK(y.value()[c] == doctest::Approx(3.25).epsilon(1e-14));
}

TEST_CASE("backward of sum gives all-ones") {
    Var x = param(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    backward(sum(x));
    for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward of sum of squares") {
    Var x = param(Tensor({3}, {1, 2, 3}));
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("softmax cross-entropy gradient, logits [0,0] target 0") {
    Var x = param(Tensor({1, 2}, {0.0, 0.0}));
    Var loss = cross_entropy(x, {0});
    backward(loss);
    CHECK(loss.value()[0] == doctest::Approx(std::log(2.0)));
    CHECK(x.grad()[0] == doctest::Approx(-0.5));
    CHECK(x.grad()[1] == doctest::Approx(0.5));
}

TEST_CASE("backward requires scalar loss") {
    Var x = param(Tensor({3}, {1, 2, 3}));
    Var y = mul(x, x);
    CHECK_THROWS(backward(y));
}

TEST_CASE("backward twice without retain throws; retain allows reuse") {
    {
        Var x = param(Tensor({3}, {1, 2, 3}));
        Var loss = sum(mul(x, x));
        backward(loss);
        CHECK_THROWS(backward(loss));
    }
    {
        Var x = param(Tensor({3}, {1, 2, 3}));
        Var loss = sum(mul(x, x));
        backward(loss, /*retain=*/true);
        CHECK_NOTHROW(backward(loss, true));
        CHECK(x.grad()[0] == doctest::Approx(4.0));  // accumulated twice
    }
}

TEST_CASE("gradient check: linear is exact") {
    std::mt19937_64 rng(7);
    Tensor x = rand_tensor({5}, rng);
    double err = check_gradient([](const Var& v) { return sum(v); }, x);
    CHECK(err <= 1e-10);
}

TEST_CASE("gradient check: relu away from zero") {
    std::mt19937_64 rng(8);
    Tensor x = rand_tensor({10}, rng);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        if (std::abs(x[i]) < 0.05) x[i] = 0.1;
    double err = check_gradient([](const Var& v) { return sum(relu(v)); }, x);
    CHECK(err <= 1e-6);
}

TEST_CASE("gradient check: conv + pool + matmul composite") {
    std::mt19937_64 rng(9);
    Tensor x = rand_tensor({1, 1, 16, 16}, rng);
    Tensor k = rand_tensor({4, 1, 3, 3}, rng);
    Tensor b = rand_tensor({4}, rng);
    Tensor w = rand_tensor({4, 4 * 8 * 8}, rng);
    double err = check_gradient(
        [&](const Var& v) {
            Var c = conv2d(v, constant(k), constant(b), 1, Padding::Same);
            Var p = max_pool2d(c);
            Var flat = reshape(p, {1, 4 * 8 * 8});
            return sum(matmul(flat, constant(w.reshaped({4 * 8 * 8, 4}))));
        },
        x);
    CHECK(err <= 1e-5);

    // and w.r.t. the kernel
    err = check_gradient(
        [&](const Var& v) {
            Var c = conv2d(constant(x), v, constant(b), 1, Padding::Same);
            return sum(max_pool2d(c));
        },
        k);
    CHECK(err <= 1e-5);
}

TEST_CASE("rectangular max_pool2d pools each axis independently") {
    // 1x1x2x4 plane; a (1,2) window keeps both rows, halves the columns
    Tensor x({1, 1, 2, 4}, {1, 5, 2, 6,
                            3, 7, 4, 8});
    Var p = max_pool2d(constant(x), 1, 1, 2, 2);
    REQUIRE(p.shape() == std::vector<int>{1, 1, 2, 2});
    CHECK(p.value()[0] == 5);
    CHECK(p.value()[1] == 6);
    CHECK(p.value()[2] == 7);
    CHECK(p.value()[3] == 8);

    // (2,1) window: halves the rows instead
    Var q = max_pool2d(constant(x), 2, 2, 1, 1);
    REQUIRE(q.shape() == std::vector<int>{1, 1, 1, 4});
    CHECK(q.value()[0] == 3);
    CHECK(q.value()[3] == 8);

    // gradient routes to the argmax only
    Var leaf = ad::param(x);
    backward(sum(max_pool2d(leaf, 1, 1, 2, 2)));
    const Tensor& g = leaf.grad();
    CHECK(g[0] == 0);
    CHECK(g[1] == 1);
    CHECK(g[2] == 0);
    CHECK(g[3] == 1);
}

TEST_CASE("gradient check across all ops, randomized") {
    std::mt19937_64 rng(10);
    const int trials = 5;
    for (int t = 0; t < trials; ++t) {
        Tensor m = rand_tensor({3, 4}, rng);
        Tensor m2 = rand_tensor({3, 4}, rng);
        Tensor sq = rand_tensor({4, 4}, rng);
        Tensor img = rand_tensor({2, 2, 6, 6}, rng);
        Tensor ker = rand_tensor({3, 2, 3, 3}, rng);
        Tensor kb = rand_tensor({3}, rng);
        Tensor vecp = rand_tensor({6}, rng, 0.05, 0.95);
        Tensor lw = rand_tensor({2, 4}, rng);
        Tensor lb = rand_tensor({2}, rng);
        Tensor smw = rand_tensor({3, 4}, rng);

        auto gc = [&](auto f, const Tensor& x) { return check_gradient(f, x); };
        CHECK(gc([&](const Var& v) { return sum(add(v, constant(m2))); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(sub(constant(m2), v)); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(mul(v, constant(m2))); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(square(v)); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(sigmoid(v)); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return mean(matmul(v, constant(sq.reshaped({4, 4})))); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(linear(v, constant(lw), constant(lb))); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(conv2d(v, constant(ker), constant(kb), 1, Padding::Valid)); }, img) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(conv2d(constant(img), constant(ker), v, 1, Padding::Same, true)); }, kb) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(global_avg_pool(v)); }, img) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(concat({v, constant(m2)}, 1)); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(gather_rows(v, {0, 2, 2})); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return sum(mul(softmax(v), constant(smw))); }, m) <= 1e-4);
        CHECK(gc([&](const Var& v) { return cross_entropy(v, {1, 0, 3}); }, m) <= 1e-5);
        CHECK(gc([&](const Var& v) { return binary_cross_entropy(v, {1, 0, 1, 0, 1, 0}); }, vecp) <= 1e-5);
        CHECK(gc([&](const Var& v) { return element(softmax(v), 2); }, m) <= 1e-4);
    }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Var p = param(Tensor({3}, {1.0, 2.0, 3.0}));
    Var loss = sum(mul(p, constant(Tensor({3}, {0, 0, 0}))));
    backward(loss);
    AdamState st;
    adam_step({p}, st, 3e-4);
    CHECK(st.t == 1);
    CHECK(p.value()[0] == 1.0);
    CHECK(p.value()[1] == 2.0);
    CHECK(p.value()[2] == 3.0);
}

TEST_CASE("adam: first step with constant gradient is about -lr") {
    const double lr = 3e-4;
    Var p = param(Tensor({2}, {0.5, 0.5}));
    Var loss = sum(mul(p, constant(Tensor({2}, {2.0, 2.0}))));  // grad = 2 everywhere
    backward(loss);
    AdamState st;
    adam_step({p}, st, lr);
    // first bias-corrected step is lr * g / (|g| + ~eps) = ~lr * sign(g)
    CHECK(p.value()[0] == doctest::Approx(0.5 - lr).epsilon(1e-4));
    CHECK(p.value()[0] == p.value()[1]);  // equal gradients -> identical updates
}

TEST_CASE("fixed seed gives identical trajectories") {
    auto run = [] {
        std::mt19937_64 rng(1234);
        Var w = param(randn({4, 4}, rng, 0.1));
        AdamState st;
        for (int step = 0; step < 20; ++step) {
            Var x = constant(randn({4, 4}, rng, 1.0));
            Var loss = mean(square(sub(matmul(x, w), x)));
            backward(loss);
            adam_step({w}, st, 1e-2);
        }
        return w.value();
    };
    Tensor a = run(), b = run();
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite values are a hard error") {
    Var x = constant(Tensor({2}, {1.0, 1e308}));
    CHECK_THROWS(mul(x, x));
}

TEST_CASE("shape mismatch errors") {
    Var a = constant(Tensor({2, 2}));
    Var b = constant(Tensor({2, 3}));
    CHECK_THROWS(add(a, b));
    CHECK_THROWS(matmul(constant(Tensor({2, 3})), constant(Tensor({2, 3}))));
}

TEST_CASE("checkpoint roundtrip") {
    std::mt19937_64 rng(5);
    Checkpoint ck;
    ck.add("w", rand_tensor({3, 4}, rng));
    ck.add("b", rand_tensor({4}, rng));
    std::string dir = "./ckpt_test";
    std::filesystem::create_directories(dir);
    save_checkpoint(ck, dir);
    Checkpoint back = load_checkpoint(dir);
    REQUIRE(back.names == ck.names);
    for (size_t i = 0; i < ck.tensors.size(); ++i) {
        REQUIRE(back.tensors[i].shape() == ck.tensors[i].shape());
        for (std::int64_t j = 0; j < ck.tensors[i].numel(); ++j)
            CHECK(back.tensors[i][j] == ck.tensors[i][j]);
    }
}
