#include <cmath>
#include <functional>
#include <numeric>

#include <gtest/gtest.h>

#include "ktr/graph.hpp"
#include "ktr/kernels.hpp"
#include "ktr/rng.hpp"
#include "ktr/tensor.hpp"

using namespace ktr;
using diff::Graph;
using diff::NodeId;
using diff::Tensor;

namespace {

// Values in [-1.5,-0.1] U [0.1,1.5]: far from the kinks of relu/clamp/minimum.
Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double margin = 0.1) {
    Tensor t(shape);
    for (auto& v : t.storage()) {
        const double mag = margin + (1.5 - margin) * rng.uniform();
        v = rng.below(2) ? mag : -mag;
    }
    return t;
}

// Reduces any node to a scalar with fixed random weights so that every
// output element gets a distinct cotangent.
NodeId weighted_sum(Graph& g, NodeId n, Rng& rng) {
    const auto& v = g.value(n);
    Tensor w({v.size()});
    for (auto& x : w.storage()) x = 2.0 * rng.uniform() - 1.0;
    if (v.size() == 1) return g.scale(n, w[0]);
    Tensor shaped(v.shape(), w.storage());
    return g.sum(g.mul(n, g.constant(shaped)));
}

using OpBuilder = std::function<NodeId(Graph&, Rng&)>;

std::vector<std::pair<const char*, OpBuilder>> op_builders() {
    return {
        {"matmul", [](Graph& g, Rng& r) { return g.matmul(g.parameter(random_tensor(r, {3, 4})), g.parameter(random_tensor(r, {4, 2}))); }},
        {"matmul_nt", [](Graph& g, Rng& r) { return g.matmul_nt(g.parameter(random_tensor(r, {3, 4})), g.parameter(random_tensor(r, {5, 4}))); }},
        {"add", [](Graph& g, Rng& r) { return g.add(g.parameter(random_tensor(r, {2, 3})), g.parameter(random_tensor(r, {2, 3}))); }},
        {"sub", [](Graph& g, Rng& r) { return g.sub(g.parameter(random_tensor(r, {2, 3})), g.parameter(random_tensor(r, {2, 3}))); }},
        {"mul", [](Graph& g, Rng& r) { return g.mul(g.parameter(random_tensor(r, {2, 3})), g.parameter(random_tensor(r, {2, 3}))); }},
        {"add_row", [](Graph& g, Rng& r) { return g.add_row(g.parameter(random_tensor(r, {3, 4})), g.parameter(random_tensor(r, {4}))); }},
        {"mul_row", [](Graph& g, Rng& r) { return g.mul_row(g.parameter(random_tensor(r, {3, 4})), g.parameter(random_tensor(r, {4}))); }},
        {"scale", [](Graph& g, Rng& r) { return g.scale(g.parameter(random_tensor(r, {2, 3})), -1.7); }},
        {"add_scalar", [](Graph& g, Rng& r) { return g.add_scalar(g.parameter(random_tensor(r, {2, 3})), 0.3); }},
        {"relu", [](Graph& g, Rng& r) { return g.relu(g.parameter(random_tensor(r, {3, 3}))); }},
        {"exp", [](Graph& g, Rng& r) { return g.exp(g.parameter(random_tensor(r, {2, 3}))); }},
        {"clamp", [](Graph& g, Rng& r) {
             Tensor t = random_tensor(r, {3, 3});
             for (auto& v : t.storage()) {
                 if (std::abs(std::abs(v) - 0.8) < 0.05) v *= 1.2;
             }
             return g.clamp(g.parameter(std::move(t)), -0.8, 0.8);
         }},
        {"minimum", [](Graph& g, Rng& r) {
             Tensor a = random_tensor(r, {2, 3});
             Tensor b = a;
             for (auto& v : b.storage()) v += (r.below(2) ? 0.3 : -0.3);
             return g.minimum(g.parameter(std::move(a)), g.parameter(std::move(b)));
         }},
        {"rms_norm_rows", [](Graph& g, Rng& r) { return g.rms_norm_rows(g.parameter(random_tensor(r, {3, 4})), 1e-6); }},
        {"causal_softmax_rows", [](Graph& g, Rng& r) { return g.causal_softmax_rows(g.parameter(random_tensor(r, {4, 4}))); }},
        {"log_softmax_rows", [](Graph& g, Rng& r) { return g.log_softmax_rows(g.parameter(random_tensor(r, {3, 5}))); }},
        {"gather_rows", [](Graph& g, Rng& r) { return g.gather_rows(g.parameter(random_tensor(r, {5, 3})), {4, 0, 4, 2}); }},
        {"pick_per_row", [](Graph& g, Rng& r) { return g.pick_per_row(g.parameter(random_tensor(r, {3, 4})), {3, 0, 1}); }},
        {"element", [](Graph& g, Rng& r) { return g.element(g.parameter(random_tensor(r, {2, 3})), 4); }},
        {"slice_rows", [](Graph& g, Rng& r) { return g.slice_rows(g.parameter(random_tensor(r, {5, 2})), 1, 4); }},
        {"slice_cols", [](Graph& g, Rng& r) { return g.slice_cols(g.parameter(random_tensor(r, {3, 5})), 2, 5); }},
        {"concat_cols", [](Graph& g, Rng& r) {
             return g.concat_cols({g.parameter(random_tensor(r, {3, 2})), g.parameter(random_tensor(r, {3, 1})),
                                   g.parameter(random_tensor(r, {3, 3}))});
         }},
        {"sum", [](Graph& g, Rng& r) { return g.sum(g.parameter(random_tensor(r, {2, 3}))); }},
        {"dot", [](Graph& g, Rng& r) { return g.dot(g.parameter(random_tensor(r, {6})), g.parameter(random_tensor(r, {6}))); }},
    };
}

}  // namespace

TEST(LogSoftmax, UniformLogits) {
    const auto out = diff::log_softmax(std::vector<double>{0, 0, 0, 0});
    for (const double v : out) EXPECT_NEAR(v, -std::log(4.0), 1e-15);
}

TEST(LogSoftmax, TwoLogitExample) {
    const auto out = diff::log_softmax(std::vector<double>{2.0, 0.0});
    // log(e^2 / (e^2 + 1)) computed independently.
    const double e2 = std::exp(2.0);
    EXPECT_NEAR(out[0], std::log(e2 / (e2 + 1.0)), 1e-14);
    EXPECT_NEAR(out[1], std::log(1.0 / (e2 + 1.0)), 1e-14);
    EXPECT_NEAR(out[0], -0.1269, 5e-5);
    EXPECT_NEAR(out[1], -2.1269, 5e-5);
}

TEST(LogSoftmax, LargeLogitsStayFinite) {
    const auto out = diff::log_softmax(std::vector<double>{1000.0, 0.0});
    EXPECT_TRUE(std::isfinite(out[0]));
    EXPECT_TRUE(std::isfinite(out[1]));
    EXPECT_NEAR(out[0], 0.0, 1e-300);
    EXPECT_NEAR(out[1], -1000.0, 1e-9);
}

TEST(LogSoftmax, ProbabilitiesSumToOne) {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(2 + rng.below(20));
        for (auto& v : z) v = 40.0 * rng.uniform() - 20.0;
        const auto lp = diff::log_softmax(z);
        double s = 0.0;
        for (const double v : lp) s += std::exp(v);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(LogSoftmax, ShiftInvariance) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(6), shifted(6);
        const double c = 1000.0 * rng.uniform() - 500.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] = 10.0 * rng.uniform() - 5.0;
            shifted[i] = z[i] + c;
        }
        const auto a = diff::log_softmax(z);
        const auto b = diff::log_softmax(shifted);
        for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-10);
    }
}

TEST(LogSoftmax, RejectsBadInput) {
    EXPECT_THROW(diff::log_softmax(std::vector<double>{1.0}), std::invalid_argument);
    EXPECT_THROW(diff::log_softmax(std::vector<double>{1.0, NAN}), std::domain_error);
    EXPECT_THROW(diff::log_softmax(std::vector<double>{1.0, INFINITY}), std::domain_error);
}

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
    EXPECT_THROW(Tensor({2, 0}), std::invalid_argument);
    Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Graph, NonFiniteForwardIsAnError) {
    Graph g;
    const auto p = g.parameter(Tensor::vector({800.0}));
    EXPECT_THROW(g.exp(p), std::domain_error);
}

TEST(Backward, SumGivesOnes) {
    Graph g;
    const auto p = g.parameter(Tensor::vector({0.3, -2.0, 5.0}));
    const auto grad = g.backward(g.sum(p));
    EXPECT_EQ(grad.per_parameter[0], (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Backward, DotWithItself) {
    Graph g;
    const auto p = g.parameter(Tensor::vector({1.0, 2.0}));
    const auto grad = g.backward(g.dot(p, p));
    EXPECT_EQ(grad.per_parameter[0], (std::vector<double>{2.0, 4.0}));
}

TEST(Backward, NonScalarLossIsAnError) {
    Graph g;
    const auto p = g.parameter(Tensor::vector({1.0, 2.0}));
    EXPECT_THROW(g.backward(p), std::invalid_argument);
}

TEST(Backward, SecondCallIsIdentical) {
    Rng rng(9);
    Graph g;
    const auto w = g.parameter(random_tensor(rng, {4, 3}));
    const auto x = g.constant(random_tensor(rng, {2, 4}));
    const auto loss = g.sum(g.exp(g.log_softmax_rows(g.matmul(x, w))));
    const auto a = g.backward(loss);
    const auto b = g.backward(loss);
    EXPECT_EQ(a.per_parameter, b.per_parameter);
}

TEST(Backward, ZeroWeightedContributionGivesExactZero) {
    Rng rng(10);
    Graph g;
    const auto used = g.parameter(random_tensor(rng, {3}));
    const auto dropped = g.parameter(random_tensor(rng, {3}));
    const auto live = g.sum(g.exp(used));
    const auto dead = g.scale(g.sum(g.exp(dropped)), 0.0);
    const auto grad = g.backward(g.add(live, dead));
    for (const double v : grad.per_parameter[1]) EXPECT_EQ(v, 0.0);
    for (const double v : grad.per_parameter[0]) EXPECT_NE(v, 0.0);
}

TEST(Backward, RestrictToLeavesOthersZero) {
    Rng rng(11);
    Graph g;
    const auto a = g.parameter(random_tensor(rng, {2, 2}));
    const auto b = g.parameter(random_tensor(rng, {2, 2}));
    const auto loss = g.sum(g.matmul(a, b));
    const auto full = g.backward(loss);
    const std::vector<std::size_t> only_b{1};
    const auto part = g.backward(loss, only_b);
    for (const double v : part.per_parameter[0]) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(part.per_parameter[1], full.per_parameter[1]);
}

TEST(FiniteDifference, LinearModelIsExact) {
    Rng rng(12);
    Graph g;
    const auto w = g.parameter(random_tensor(rng, {3, 2}));
    const auto b = g.parameter(random_tensor(rng, {2}));
    const auto x = g.constant(random_tensor(rng, {4, 3}));
    const auto y = g.add_row(g.matmul(x, w), b);
    const auto loss = g.sum(g.mul(y, g.constant(random_tensor(rng, {4, 2}))));
    EXPECT_LT(diff::finite_difference_check(g, loss, 1e-5), 1e-8);
}

TEST(FiniteDifference, SoftmaxCrossEntropyToy) {
    Rng rng(13);
    Graph g;
    const auto w = g.parameter(random_tensor(rng, {3, 5}));
    const auto x = g.constant(random_tensor(rng, {4, 3}));
    const auto lp = g.log_softmax_rows(g.matmul(x, w));
    const auto loss = g.scale(g.sum(g.pick_per_row(lp, {0, 4, 2, 2})), -0.25);
    EXPECT_LT(diff::finite_difference_check(g, loss, 1e-5), 1e-4);
}

TEST(FiniteDifference, DetectsInjectedFault) {
    Rng rng(14);
    Graph g;
    const auto w = g.parameter(random_tensor(rng, {3, 5}));
    const auto x = g.constant(random_tensor(rng, {4, 3}));
    const auto loss = g.sum(g.exp(g.log_softmax_rows(g.matmul(x, w))));
    EXPECT_GT(diff::finite_difference_check(g, loss, 1e-5, 0.1), 1e-2);
}

TEST(FiniteDifference, StepMustBeInRange) {
    Graph g;
    const auto p = g.parameter(Tensor::vector({1.0}));
    const auto loss = g.sum(p);
    EXPECT_THROW(diff::finite_difference_check(g, loss, 1e-9), std::invalid_argument);
    EXPECT_THROW(diff::finite_difference_check(g, loss, 0.1), std::invalid_argument);
}

TEST(FiniteDifference, RestoresParameters) {
    Rng rng(15);
    Graph g;
    const auto w = g.parameter(random_tensor(rng, {2, 2}));
    const auto loss = g.sum(g.exp(w));
    const double before = g.value(loss).item();
    diff::finite_difference_check(g, loss, 1e-5);
    EXPECT_EQ(g.value(loss).item(), before);
}

// Every op against central differences on randomized inputs, >= 100 seeded trials.
TEST(FiniteDifference, EveryOpPropertyTrials) {
    const auto ops = op_builders();
    const std::size_t trials = 5 * ops.size();
    ASSERT_GE(trials, 100u);
    for (std::size_t t = 0; t < trials; ++t) {
        const auto& [name, build] = ops[t % ops.size()];
        Rng rng(derive_seed(777, t));
        Graph g;
        const NodeId out = build(g, rng);
        // Pass through a smooth nonlinearity so cotangents vary per element.
        const NodeId loss = weighted_sum(g, g.exp(g.scale(out, 0.5)), rng);
        const double err = diff::finite_difference_check(g, loss, 1e-5);
        EXPECT_LT(err, 1e-4) << name << " trial " << t;
    }
}

TEST(GradientVector, ArithmeticAndNorm) {
    diff::GradientVector a{{{3.0}, {4.0, 0.0}}};
    EXPECT_DOUBLE_EQ(a.norm(), 5.0);
    EXPECT_EQ(a.total_size(), 3u);
    diff::GradientVector b = a;
    b += a;
    b.scale(0.5);
    EXPECT_EQ(b.per_parameter, a.per_parameter);
    EXPECT_EQ(a.flatten(), (std::vector<double>{3.0, 4.0, 0.0}));
}

TEST(Kernels, ParallelMatchesSerialBitwise) {
    Rng rng(16);
    for (const auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 5, 3}, {64, 64, 64}, {200, 33, 150}}) {
        std::vector<double> a(m * k), b(k * n), bt(n * k), c1(m * n), c2(m * n);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        for (auto& v : bt) v = rng.normal();
        kernels::serial::matmul(a, b, c1, m, k, n);
        kernels::parallel::matmul(a, b, c2, m, k, n);
        EXPECT_EQ(c1, c2);
        kernels::serial::matmul_nt(a, bt, c1, m, k, n);
        kernels::parallel::matmul_nt(a, bt, c2, m, k, n);
        EXPECT_EQ(c1, c2);
        std::vector<double> acc1(k * n, 0.5), acc2(k * n, 0.5), g(m * n);
        for (auto& v : g) v = rng.normal();
        kernels::serial::matmul_tn_accumulate(a, g, acc1, m, k, n);
        kernels::parallel::matmul_tn_accumulate(a, g, acc2, m, k, n);
        EXPECT_EQ(acc1, acc2);
        std::vector<double> l1(m * n), l2(m * n);
        if (n >= 2) {
            kernels::serial::log_softmax_rows(c1, l1, m, n);
            kernels::parallel::log_softmax_rows(c1, l2, m, n);
            EXPECT_EQ(l1, l2);
        }
    }
}

TEST(Kernels, MatmulAgainstNaiveOracle) {
    Rng rng(17);
    const std::size_t m = 4, k = 3, n = 5;
    std::vector<double> a(m * k), b(k * n), c(m * n);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    kernels::serial::matmul(a, b, c, m, k, n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            long double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += static_cast<long double>(a[i * k + p]) * b[p * n + j];
            EXPECT_NEAR(c[i * n + j], static_cast<double>(s), 1e-13);
        }
    }
}
