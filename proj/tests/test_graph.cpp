#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "spnmt/graph.hpp"

using namespace spnmt;
using testing_support::finite_difference;
using testing_support::max_rel_err;
using testing_support::random_tensor;

namespace {

constexpr Real kFdTol = 1e-3;
constexpr Real kFdStep = 1e-4;

// Runs loss = sum(op(x, ...)) through the graph and compares the analytic
// gradient of x against central finite differences.
Real fd_check(const Tensor& x, const std::function<Graph::NodeId(Graph&, Graph::NodeId)>& op,
              Real h = kFdStep) {
    Parameter p("x", x);
    Graph g;
    auto xid = g.param(p);
    auto loss = g.sum(op(g, xid));
    g.backward(loss);

    auto eval = [&](const Tensor& probe) {
        Parameter q("x", probe);
        Graph gg;
        auto id = gg.param(q);
        return gg.value(gg.sum(op(gg, id))).v[0];
    };
    const Tensor fd = finite_difference(eval, x, h);
    return max_rel_err(p.grad, fd);
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
    Graph g;
    auto a = g.constant(Tensor({1, 2}, {1, 2}));
    auto b = g.constant(Tensor({2, 1}, {3, 4}));
    auto c = g.matmul(a, b);
    REQUIRE(g.value(c).shape == std::vector<int>{1, 1});
    REQUIRE(g.value(c).v[0] == 11.0);
}

TEST_CASE("matmul by identity preserves the input") {
    std::mt19937_64 rng(7);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.v[static_cast<std::size_t>(i * 3 + i)] = 1;
    Graph g;
    auto c = g.matmul(g.constant(eye), g.constant(a));
    for (std::size_t i = 0; i < a.v.size(); ++i) REQUIRE(g.value(c).v[i] == Catch::Approx(a.v[i]).margin(1e-15));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Graph g;
    auto a = g.constant(Tensor({2, 3}));
    auto b = g.constant(Tensor({2, 2}));
    REQUIRE_THROWS_AS(g.matmul(a, b), InputError);
    REQUIRE_THROWS_WITH(g.matmul(a, b), Catch::Matchers::ContainsSubstring("[2,3]"));
}

TEST_CASE("matmul gradient matches finite differences over seeds") {
    for (unsigned seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor a = random_tensor({3, 4}, rng);
        Tensor bfix = random_tensor({4, 2}, rng);
        REQUIRE(fd_check(a, [&](Graph& g, Graph::NodeId x) {
                    return g.matmul(x, g.constant(bfix));
                }) < kFdTol);
        REQUIRE(fd_check(bfix, [&](Graph& g, Graph::NodeId x) {
                    return g.matmul(g.constant(a), x);
                }) < kFdTol);
    }
}

TEST_CASE("softmax of a constant row is uniform") {
    Graph g;
    auto y = g.softmax(g.constant(Tensor({3}, {0, 0, 0})));
    for (int i = 0; i < 3; ++i)
        REQUIRE(g.value(y).v[static_cast<std::size_t>(i)] == Catch::Approx(1.0 / 3).epsilon(1e-14));
}

TEST_CASE("softmax survives huge inputs via max subtraction") {
    Graph g;
    auto y = g.softmax(g.constant(Tensor({2}, {1000, 1000})));
    REQUIRE(g.value(y).v[0] == Catch::Approx(0.5).epsilon(1e-14));
    REQUIRE(g.value(y).v[1] == Catch::Approx(0.5).epsilon(1e-14));
    REQUIRE(g.value(y).all_finite());
}

TEST_CASE("softmax matches extended-precision exp-normalize") {
    // frozen from an mpmath evaluation of softmax([1,2,3])
    const Real expect[3] = {0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953};
    Graph g;
    auto y = g.softmax(g.constant(Tensor({3}, {1, 2, 3})));
    for (int i = 0; i < 3; ++i)
        REQUIRE(std::abs(g.value(y).v[static_cast<std::size_t>(i)] - expect[i]) < 1e-12);
}

TEST_CASE("softmax rows sum to one and stay positive") {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({5, 7}, rng, -30, 30);
    Graph g;
    auto y = g.softmax(g.constant(x));
    for (long r = 0; r < 5; ++r) {
        Real s = 0;
        for (long c = 0; c < 7; ++c) {
            const Real p = g.value(y).at2(r, c);
            REQUIRE(p > 0);
            s += p;
        }
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("dropout with keep_prob 1 is the identity") {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({4, 4}, rng);
    Graph g;
    auto y = g.dropout(g.constant(x), 1.0, 1234, true);
    REQUIRE(g.value(y).v == x.v);
}

TEST_CASE("dropout in evaluation mode passes through unchanged") {
    std::mt19937_64 rng(2);
    Tensor x = random_tensor({4, 4}, rng);
    Graph g;
    auto y = g.dropout(g.constant(x), 0.5, 99, false);
    REQUIRE(g.value(y).v == x.v);
}

TEST_CASE("dropout is deterministic per seed and differs across seeds") {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({8, 8}, rng, 0.5, 1.5);
    Graph g;
    auto a = g.dropout(g.constant(x), 0.7, 42, true);
    auto b = g.dropout(g.constant(x), 0.7, 42, true);
    auto c = g.dropout(g.constant(x), 0.7, 43, true);
    REQUIRE(g.value(a).v == g.value(b).v);
    REQUIRE(g.value(a).v != g.value(c).v);
}

TEST_CASE("dropout rejects out-of-range keep probability") {
    Graph g;
    auto x = g.constant(Tensor({2}, {1, 2}));
    REQUIRE_THROWS_AS(g.dropout(x, 0.0, 1, true), ConfigError);
    REQUIRE_THROWS_AS(g.dropout(x, 1.5, 1, true), ConfigError);
}

TEST_CASE("dropout mean over many draws approaches the input") {
    // inverted dropout: E[y] = x for any keep_prob
    const long n = 100000;
    const Real keep = 0.7;
    Real acc = 0;
    for (long i = 0; i < n; ++i) {
        DropoutMask m = DropoutMask::make(1, keep, static_cast<std::uint64_t>(i) * 977 + 13);
        acc += m.mask[0] ? Real(1) / keep : Real(0);
    }
    REQUIRE(std::abs(acc / static_cast<Real>(n) - 1.0) < 0.01);
}

TEST_CASE("dropout mask is a pure function of seed, shape and keep_prob") {
    DropoutMask a = DropoutMask::make(512, 0.3, 777);
    DropoutMask b = DropoutMask::make(512, 0.3, 777);
    REQUIRE(a.mask == b.mask);
    long kept = 0;
    for (auto bit : a.mask) kept += bit;
    // statistical: 512 draws at p=0.3, allow five sigmas
    REQUIRE(std::abs(kept - 512 * 0.3) < 5 * std::sqrt(512 * 0.3 * 0.7));
}

TEST_CASE("cross entropy is zero when the target has probability one") {
    Tensor logits({1, 4}, {100, 0, 0, 0});
    Graph g;
    auto y = g.cross_entropy_per_token(g.constant(logits), {0}, {1});
    REQUIRE(g.value(y).v[0] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("cross entropy of uniform logits is log vocabulary size") {
    Tensor logits({3, 4});
    Graph g;
    auto y = g.cross_entropy_per_token(g.constant(logits), {0, 1, 3}, {1, 1, 1});
    for (int j = 0; j < 3; ++j)
        REQUIRE(g.value(y).v[static_cast<std::size_t>(j)] ==
                Catch::Approx(1.3862943611198906188).epsilon(1e-12));
}

TEST_CASE("cross entropy zeroes padded positions and stays nonnegative") {
    std::mt19937_64 rng(11);
    Tensor logits = random_tensor({5, 6}, rng, -4, 4);
    Graph g;
    auto y = g.cross_entropy_per_token(g.constant(logits), {0, 1, 2, 3, 4}, {1, 0, 1, 0, 1});
    REQUIRE(g.value(y).v[1] == 0.0);
    REQUIRE(g.value(y).v[3] == 0.0);
    for (Real v : g.value(y).v) REQUIRE(v >= 0.0);
}

TEST_CASE("cross entropy matches an independent log-sum-exp computation") {
    std::mt19937_64 rng(5);
    Tensor logits = random_tensor({4, 9}, rng, -3, 3);
    std::vector<int> targets{2, 0, 8, 5};
    Graph g;
    auto y = g.cross_entropy_per_token(g.constant(logits), targets, {1, 1, 1, 1});
    for (long j = 0; j < 4; ++j) {
        long double sum = 0;
        for (long c = 0; c < 9; ++c) sum += std::exp(static_cast<long double>(logits.at2(j, c)));
        const long double expect =
            std::log(sum) - static_cast<long double>(logits.at2(j, targets[static_cast<std::size_t>(j)]));
        REQUIRE(std::abs(g.value(y).v[static_cast<std::size_t>(j)] - static_cast<Real>(expect)) < 1e-6);
    }
}

TEST_CASE("cross entropy rejects out-of-vocabulary targets") {
    Graph g;
    auto logits = g.constant(Tensor({2, 3}));
    REQUIRE_THROWS_AS(g.cross_entropy_per_token(logits, {0, 3}, {1, 1}), InputError);
}

TEST_CASE("every differentiable op passes finite-difference checks across seeds") {
    for (unsigned seed = 100; seed < 120; ++seed) {
        std::mt19937_64 rng(seed);
        const Tensor x3 = random_tensor({2, 3, 4}, rng);
        const Tensor x2 = random_tensor({4, 4}, rng);
        const Tensor mate = random_tensor({4, 4}, rng);

        SECTION("add") {}
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.add(x, g.constant(mate)); }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.mul(x, g.constant(mate)); }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.scale(x, 1.7); }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.gelu(x); }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.softmax(x); }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.log_softmax(x); }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.reshape(x, {2, 8}); }) < kFdTol);
        REQUIRE(fd_check(x3, [&](Graph& g, Graph::NodeId x) {
                    return g.transpose_0213(g.reshape(x, {2, 3, 2, 2}));
                }) < kFdTol);

        const Tensor gain = random_tensor({4}, rng, 0.5, 1.5);
        const Tensor bias = random_tensor({4}, rng);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) {
                    return g.layer_norm(x, g.constant(gain), g.constant(bias));
                }) < kFdTol);
        REQUIRE(fd_check(gain, [&](Graph& g, Graph::NodeId gn) {
                    return g.layer_norm(g.constant(x2), gn, g.constant(bias));
                }) < kFdTol);
        REQUIRE(fd_check(bias, [&](Graph& g, Graph::NodeId bs) {
                    return g.layer_norm(g.constant(x2), g.constant(gain), bs);
                }) < kFdTol);

        const Tensor w = random_tensor({4, 3}, rng);
        const Tensor b = random_tensor({3}, rng);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) {
                    return g.linear(x, g.constant(w), g.constant(b));
                }) < kFdTol);
        REQUIRE(fd_check(w, [&](Graph& g, Graph::NodeId ww) {
                    return g.linear(g.constant(x2), ww, g.constant(b));
                }) < kFdTol);
        REQUIRE(fd_check(b, [&](Graph& g, Graph::NodeId bb) {
                    return g.linear(g.constant(x2), g.constant(w), bb);
                }) < kFdTol);

        const Tensor table = random_tensor({6, 3}, rng);
        std::vector<int> ids{1, 5, 0, 5};
        REQUIRE(fd_check(table, [&](Graph& g, Graph::NodeId t) { return g.embedding(ids, t); }) < kFdTol);

        const Tensor ba = random_tensor({3, 2, 4}, rng);
        const Tensor bb2 = random_tensor({3, 4, 2}, rng);
        REQUIRE(fd_check(ba, [&](Graph& g, Graph::NodeId x) {
                    return g.bmm(x, g.constant(bb2));
                }) < kFdTol);
        REQUIRE(fd_check(bb2, [&](Graph& g, Graph::NodeId x) {
                    return g.bmm(g.constant(ba), x);
                }) < kFdTol);
        const Tensor bbt = random_tensor({3, 2, 4}, rng);
        REQUIRE(fd_check(ba, [&](Graph& g, Graph::NodeId x) {
                    return g.bmm(x, g.constant(bbt), true);
                }) < kFdTol);
        REQUIRE(fd_check(bbt, [&](Graph& g, Graph::NodeId x) {
                    return g.bmm(g.constant(ba), x, true);
                }) < kFdTol);

        // masked attention-score softmax with a random but non-empty row mask
        std::vector<std::uint8_t> mask(16, 0);
        std::uniform_int_distribution<int> coin(0, 1);
        for (int r = 0; r < 4; ++r) {
            bool any = false;
            for (int c = 0; c < 4; ++c) {
                mask[static_cast<std::size_t>(r * 4 + c)] = static_cast<std::uint8_t>(coin(rng));
                any = any || mask[static_cast<std::size_t>(r * 4 + c)];
            }
            if (!any) mask[static_cast<std::size_t>(r * 4)] = 1;
        }
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) {
                    return g.masked_softmax(x, mask);
                }) < kFdTol);

        // dropout with a fixed mask
        const DropoutMask dm = DropoutMask::make(16, 0.6, seed);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) { return g.dropout(x, dm); }) < kFdTol);

        std::vector<int> targets{1, 0, 3, 2};
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) {
                    return g.cross_entropy_per_token(x, targets, {1, 1, 0, 1});
                }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) {
                    return g.gather_cols(x, targets);
                }) < kFdTol);

        std::vector<Real> ws;
        std::uniform_real_distribution<Real> wd(-1, 1);
        for (int i = 0; i < 16; ++i) ws.push_back(wd(rng));
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) {
                    return g.weighted_sum(g.reshape(x, {16}), ws);
                }) < kFdTol);
        REQUIRE(fd_check(x2, [&](Graph& g, Graph::NodeId x) {
                    return g.weighted_segment_sum(g.reshape(x, {16}), ws, 4);
                }) < kFdTol);
    }
}

TEST_CASE("masked softmax puts zero probability and zero gradient on masked entries") {
    std::mt19937_64 rng(9);
    Tensor x = random_tensor({2, 5}, rng);
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 0, 1, 0, 1, 1};
    Parameter p("x", x);
    Graph g;
    auto xid = g.param(p);
    auto y = g.masked_softmax(xid, mask);
    for (long r = 0; r < 2; ++r) {
        Real s = 0;
        for (long c = 0; c < 5; ++c) {
            const Real v = g.value(y).at2(r, c);
            if (!mask[static_cast<std::size_t>(r * 5 + c)]) REQUIRE(v == 0.0);
            s += v;
        }
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
    }
    g.backward(g.sum(g.mul(y, y)));
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (!mask[i]) REQUIRE(p.grad.v[i] == 0.0);
}

TEST_CASE("masked softmax rejects fully masked rows") {
    Graph g;
    auto x = g.constant(Tensor({1, 3}, {1, 2, 3}));
    REQUIRE_THROWS_AS(g.masked_softmax(x, {0, 0, 0}), InputError);
}

TEST_CASE("a gradient accumulates across multiple uses of the same node") {
    Parameter p("x", Tensor({1}, {3}));
    Graph g;
    auto x = g.param(p);
    auto y = g.mul(x, x);  // y = x^2, dy/dx = 2x = 6
    g.backward(g.sum(y));
    REQUIRE(p.grad.v[0] == Catch::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward on a deep chain is finite and deterministic") {
    std::mt19937_64 rng(21);
    Tensor x = random_tensor({4, 4}, rng);
    auto run = [&]() {
        Parameter p("x", x);
        Graph g;
        auto id = g.param(p);
        for (int i = 0; i < 8; ++i) id = g.gelu(g.matmul(id, g.constant(x)));
        g.backward(g.sum(id));
        return p.grad.v;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a == b);
    for (Real v : a) REQUIRE(std::isfinite(v));
}

TEST_CASE("non-recording graphs refuse backward and keep no gradients") {
    Parameter p("x", Tensor({2}, {1, 2}));
    Graph g(false);
    auto x = g.param(p);
    auto y = g.sum(x);
    REQUIRE_THROWS_AS(g.backward(y), InputError);
}
