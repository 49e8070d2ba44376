#include <cmath>

#include "cfrpn/experiment.hpp"
#include "cfrpn/ops.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cfrpn;
using oracle::random_tensor;

namespace {

// Cross-entropy of a fixed projection, so every element of y influences the loss.
NodeId proj_loss(Tape<double>& t, NodeId y, std::uint64_t seed) {
    const Shape& s = t.value(y).shape();
    SeededRng rng(seed);
    const NodeId w = t.constant(random_tensor<double>(Shape{3, s.per_sample(), 1, 1}, rng, 0.5));
    std::vector<int> labels(s.n);
    for (std::size_t i = 0; i < s.n; ++i) labels[i] = static_cast<int>(i % 3);
    return ops::softmax_cross_entropy(t, ops::linear(t, y, w, std::nullopt), labels);
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) { return oracle::max_abs_diff(a, b); }

}  // namespace

TEST_CASE("a constant loss yields an empty gradient map") {
    Tape<double> t;
    const NodeId c = t.constant(Tensor<double>(Shape{1, 1, 1, 1}, 3.0));
    CHECK(t.backward(c).empty());
}

TEST_CASE("linear functional: gradient of sum(w x) is x") {
    SeededRng rng(1);
    ParamStore<double> ps;
    const ParamId w = ps.add("w", random_tensor<double>(Shape{1, 6, 1, 1}, rng));
    const auto x = random_tensor<double>(Shape{1, 6, 1, 1}, rng);
    Tape<double> t;
    const NodeId y = ops::linear(t, t.constant(x), t.parameter(w, ps[w].value), std::nullopt);
    const auto g = t.backward(y);
    REQUIRE(g.count(w) == 1);
    CHECK(g.at(w).data()[3] == x[3]);
    CHECK(max_diff(g.at(w).reshaped(x.shape()), x) == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tape<double> t;
    const NodeId c = t.constant(Tensor<double>(Shape{1, 2, 1, 1}));
    CHECK_THROWS_AS(t.backward(c), ShapeError);
}

TEST_CASE("parameters off the loss path receive no gradient") {
    SeededRng rng(2);
    ParamStore<double> ps;
    const ParamId a = ps.add("a", random_tensor<double>(Shape{1, 1, 2, 2}, rng));
    const ParamId b = ps.add("b", random_tensor<double>(Shape{1, 1, 2, 2}, rng));
    Tape<double> t;
    const NodeId na = t.parameter(a, ps[a].value);
    t.parameter(b, ps[b].value);
    const auto g = t.backward(ops::sum(t, ops::relu(t, na)));
    CHECK(g.count(a) == 1);
    CHECK(g.count(b) == 0);
}

TEST_CASE("a shared parameter's gradient is the sum over its uses") {
    SeededRng rng(3);
    const auto x = random_tensor<double>(Shape{2, 3, 5, 5}, rng);
    const auto kv = random_tensor<double>(Shape{3, 3, 3, 3}, rng, 0.3);
    const auto bv = random_tensor<double>(Shape{3, 1, 1, 1}, rng, 0.1);
    const auto s = ConvSpec::same(3, 3);
    const std::size_t T = 4;

    ParamStore<double> tied;
    const ParamId k = tied.add("k", kv);
    const ParamId b = tied.add("b", bv);
    Tape<double> t1;
    NodeId h = t1.constant(x);
    for (std::size_t i = 0; i < T; ++i) {
        h = ops::relu(t1, ops::conv2d(t1, h, t1.parameter(k, tied[k].value), t1.parameter(b, tied[b].value), s));
    }
    const auto g1 = t1.backward(proj_loss(t1, h, 9));

    ParamStore<double> untied;
    std::vector<ParamId> ks, bs;
    for (std::size_t i = 0; i < T; ++i) {
        ks.push_back(untied.add("k" + std::to_string(i), kv));
        bs.push_back(untied.add("b" + std::to_string(i), bv));
    }
    Tape<double> t2;
    NodeId h2 = t2.constant(x);
    for (std::size_t i = 0; i < T; ++i) {
        h2 = ops::relu(t2, ops::conv2d(t2, h2, t2.parameter(ks[i], untied[ks[i]].value),
                                       t2.parameter(bs[i], untied[bs[i]].value), s));
    }
    CHECK(t2.value(h2) == t1.value(h));
    const auto g2 = t2.backward(proj_loss(t2, h2, 9));
    Tensor<double> sk(kv.shape()), sb(bv.shape());
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t e = 0; e < sk.size(); ++e) sk[e] += g2.at(ks[i])[e];
        for (std::size_t e = 0; e < sb.size(); ++e) sb[e] += g2.at(bs[i])[e];
    }
    CHECK(max_diff(g1.at(k), sk) <= 1e-12);
    CHECK(max_diff(g1.at(b), sb) <= 1e-12);
}

TEST_CASE("backward is linear in the output gradient") {
    SeededRng rng(4);
    ParamStore<double> ps;
    const ParamId k = ps.add("k", random_tensor<double>(Shape{4, 2, 3, 3}, rng));
    const ParamId b = ps.add("b", random_tensor<double>(Shape{4, 1, 1, 1}, rng));
    const auto x = random_tensor<double>(Shape{2, 2, 6, 6}, rng);
    Tape<double> t;
    const NodeId y = ops::lrn(
        t, ops::relu(t, ops::conv2d(t, t.constant(x), t.parameter(k, ps[k].value), t.parameter(b, ps[b].value),
                                    ConvSpec::same(3, 3))),
        LrnSpec{});
    const auto g = random_tensor<double>(t.value(y).shape(), rng);
    Tensor<double> g3(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g3[i] = -2.5 * g[i];
    const auto a = t.backward_with(y, g);
    const auto c = t.backward_with(y, g3);
    for (ParamId id : {k, b}) {
        Tensor<double> scaled(a.at(id).shape());
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = -2.5 * a.at(id)[i];
        CHECK(oracle::max_rel_diff(c.at(id), scaled) <= 1e-13);
    }
    CHECK_THROWS_AS(t.backward_with(y, Tensor<double>(Shape{1, 1, 1, 1})), ShapeError);
}

TEST_CASE("every registered layer type passes the finite-difference check") {
    const auto rows = run_gradchecks(1e-5);
    CHECK(rows.size() == 8);
    for (const auto& r : rows) {
        INFO(r.layer << " rel error " << r.max_rel_error);
        CHECK(r.passed);
        CHECK(r.checked > 0);
    }
}

TEST_CASE("auxiliary ops pass the finite-difference check") {
    SeededRng rng(5);
    ParamStore<double> ps;
    const ParamId a = ps.add("a", random_tensor<double>(Shape{3, 2, 3, 3}, rng));
    const ParamId b = ps.add("b", random_tensor<double>(Shape{3, 1, 3, 3}, rng));
    const std::vector<std::uint64_t> seeds{11, 12, 13};
    const auto f = [&](Tape<double>& t, const ParamStore<double>& p) {
        const NodeId na = t.parameter(a, p[a].value);
        const NodeId nb = t.parameter(b, p[b].value);
        NodeId y = ops::concat_channels(t, ops::sigmoid(t, na), nb);
        y = ops::dropout(t, y, 0.4, seeds, true);
        const NodeId rows = ops::scale(t, ops::gather_samples(t, y, {2, 0}), 1.5);
        y = ops::add(t, ops::scatter_samples(t, y, rows, {0, 1}), y);
        return proj_loss(t, y, 8);
    };
    const auto r = grad_check(f, ps);
    CHECK(r.max_rel_error <= 1e-5);
    CHECK(r.checked == ps.element_count());
}

TEST_CASE("grad_check detects a non-deterministic tape function") {
    ParamStore<double> ps;
    const ParamId a = ps.add("a", Tensor<double>(Shape{1, 1, 1, 2}, 1.0));
    int calls = 0;
    const auto f = [&](Tape<double>& t, const ParamStore<double>& p) {
        ++calls;
        return ops::scale(t, ops::sum(t, t.parameter(a, p[a].value)), static_cast<double>(calls));
    };
    CHECK_THROWS(grad_check(f, ps));
}

TEST_CASE("identical forward passes record identical tapes") {
    SeededRng rng(6);
    ParamStore<double> ps;
    const ParamId k = ps.add("k", random_tensor<double>(Shape{2, 2, 3, 3}, rng));
    const ParamId b = ps.add("b", random_tensor<double>(Shape{2, 1, 1, 1}, rng));
    const auto x = random_tensor<double>(Shape{2, 2, 4, 4}, rng);
    const std::vector<std::uint64_t> seeds{1, 2};
    const auto build = [&](Tape<double>& t) {
        NodeId y = ops::conv2d(t, t.constant(x), t.parameter(k, ps[k].value), t.parameter(b, ps[b].value),
                               ConvSpec::same(3, 3));
        y = ops::dropout(t, ops::relu(t, y), 0.5, seeds, true);
        return ops::maxpool(t, y, PoolSpec{3, 3, 2, 1});
    };
    Tape<double> t1, t2;
    build(t1);
    build(t2);
    REQUIRE(t1.size() == t2.size());
    for (std::size_t i = 0; i < t1.size(); ++i) {
        CHECK(t1.node(NodeId{i}).kind == t2.node(NodeId{i}).kind);
        CHECK(t1.value(NodeId{i}) == t2.value(NodeId{i}));
    }
}

TEST_CASE("parameter names are unique") {
    ParamStore<float> ps;
    ps.add("w", Tensor<float>(Shape{1, 1, 1, 1}));
    CHECK_THROWS(ps.add("w", Tensor<float>(Shape{1, 1, 1, 1})));
    CHECK(ps.find("w").has_value());
    CHECK_FALSE(ps.find("v").has_value());
}
