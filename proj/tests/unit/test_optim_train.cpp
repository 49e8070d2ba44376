#include <cmath>
#include <filesystem>

#include "cfrpn/checkpoint.hpp"
#include "cfrpn/ops.hpp"
#include "cfrpn/train.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cfrpn;

namespace {

// Textbook bias-corrected Adam on one scalar, in long double.
struct ScalarAdam {
    long double lr, b1, b2, eps, wd;
    long double m = 0, v = 0;
    int t = 0;

    long double step(long double w, long double g) {
        g += wd * w;
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const long double mh = m / (1 - std::pow(b1, static_cast<long double>(t)));
        const long double vh = v / (1 - std::pow(b2, static_cast<long double>(t)));
        return w - lr * mh / (std::sqrt(vh) + eps);
    }
};

GradientMap<double> grad_of(ParamId id, double g) {
    GradientMap<double> out;
    out.emplace(id, Tensor<double>(Shape{1, 1, 1, 1}, g));
    return out;
}

ArchitectureConfig tiny(Mode mode, std::size_t width = 4) {
    auto a = ArchitectureConfig::uniform(mode, width);
    a.num_classes = 3;
    a.in_height = 16;
    a.in_width = 16;
    a.dropout_rate = 0.5;
    return a;
}

Dataset tiny_data(std::size_t n, std::uint64_t seed) {
    SynthOptions o;
    o.image_size = 16;
    o.position_jitter = 2.0;
    o.min_half_extent = 3.0;
    o.max_half_extent = 5.0;
    return synth_shapes(n, seed, o);
}

Batch first_batch(const Dataset& d, std::size_t size, std::uint64_t epoch = 0) {
    BatchOptions bo;
    bo.batch_size = size;
    bo.seed = 3;
    bo.epoch = epoch;
    bo.training = true;
    return BatchSequence(d, bo)[0];
}

}  // namespace

TEST_CASE("adam matches a scalar reference over 100 steps") {
    for (double wd : {0.0, 5e-4}) {
        ParamStore<double> ps;
        const ParamId id = ps.add("w", Tensor<double>(Shape{1, 1, 1, 1}, 0.7));
        AdamConfig cfg;
        cfg.lr = 1e-2;
        cfg.weight_decay = wd;
        Adam<double> adam(cfg);
        ScalarAdam ref{1e-2L, 0.9L, 0.999L, 1e-8L, static_cast<long double>(wd)};
        long double w = 0.7L;
        for (int i = 0; i < 100; ++i) {
            // gradient of (w - 3)^2 plus a sign-alternating term
            const double g = 2.0 * (ps[id].value[0] - 3.0) + (i % 3 == 0 ? 0.5 : -0.25);
            adam.step(ps, grad_of(id, g));
            w = ref.step(w, static_cast<long double>(g));
            CHECK(std::fabs(ps[id].value[0] - static_cast<double>(w)) <= 1e-10);
        }
        CHECK(adam.steps() == 100);
    }
}

TEST_CASE("first adam step moves by about lr against the gradient") {
    for (double g : {3.0, -0.02, 1e3}) {
        ParamStore<double> ps;
        const ParamId id = ps.add("w", Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        Adam<double> adam(cfg);
        adam.step(ps, grad_of(id, g));
        CHECK(ps[id].value[0] - 1.0 == doctest::Approx(-1e-4 * (g > 0 ? 1 : -1)).epsilon(1e-4));
    }
}

TEST_CASE("zero gradient without decay leaves parameters unchanged") {
    ParamStore<double> ps;
    const ParamId id = ps.add("w", Tensor<double>(Shape{1, 2, 1, 1}, 0.3));
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    Adam<double> adam(cfg);
    GradientMap<double> g;
    g.emplace(id, Tensor<double>(Shape{1, 2, 1, 1}));
    adam.step(ps, g);
    adam.step(ps, {});
    CHECK(ps[id].value[0] == 0.3);
}

TEST_CASE("decay applies to weights but not to biases") {
    ParamStore<double> ps;
    const ParamId w = ps.add("w", Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
    const ParamId b = ps.add("b", Tensor<double>(Shape{1, 1, 1, 1}, 1.0), false);
    Adam<double> adam(AdamConfig{});
    adam.step(ps, {});
    CHECK(ps[w].value[0] < 1.0);
    CHECK(ps[b].value[0] == 1.0);

    ParamStore<double> p2;
    const ParamId w2 = p2.add("w", Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
    AdamConfig dec;
    dec.decoupled = true;
    Adam<double> a2(dec);
    a2.step(p2, {});
    CHECK(p2[w2].value[0] == doctest::Approx(1.0 - 1e-4 * 5e-4).epsilon(1e-14));
}

TEST_CASE("a non-finite gradient aborts before any update and names the parameter") {
    ParamStore<double> ps;
    const ParamId a = ps.add("layer.kernel", Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
    const ParamId b = ps.add("layer.bias", Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
    Adam<double> adam(AdamConfig{});
    GradientMap<double> g;
    g.emplace(a, Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
    g.emplace(b, Tensor<double>(Shape{1, 1, 1, 1}, std::nan("")));
    const auto before = ps;
    CHECK_THROWS_WITH_AS(adam.step(ps, g), doctest::Contains("layer.bias"), NumericError);
    CHECK(ps == before);
    CHECK(adam.steps() == 0);
    GradientMap<double> wrong;
    wrong.emplace(a, Tensor<double>(Shape{1, 2, 1, 1}));
    CHECK_THROWS_AS(adam.step(ps, wrong), ShapeError);
}

TEST_CASE("adam config validation") {
    AdamConfig c;
    c.lr = 0.0;
    CHECK_THROWS(c.validate());
    c = AdamConfig{};
    c.beta1 = 1.0;
    CHECK_THROWS(c.validate());
    c = AdamConfig{};
    c.weight_decay = -1.0;
    CHECK_THROWS(c.validate());
}

TEST_CASE("one small step on a separable problem lowers the loss") {
    ParamStore<double> ps;
    SeededRng rng(1);
    const ParamId w = ps.add("w", oracle::random_tensor<double>(Shape{2, 2, 1, 1}, rng, 0.1));
    Tensor<double> x(Shape{4, 2, 1, 1}, std::vector<double>{1, 0, 0.9, 0.1, 0, 1, 0.2, 0.8});
    const std::vector<int> y{0, 0, 1, 1};
    const auto loss_at = [&](GradientMap<double>* g) {
        Tape<double> t;
        const NodeId l = ops::softmax_cross_entropy(t, ops::linear(t, t.constant(x), t.parameter(w, ps[w].value),
                                                                  std::nullopt), y);
        if (g) *g = t.backward(l);
        return t.value(l)[0];
    };
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    Adam<double> adam(cfg);
    for (int i = 0; i < 5; ++i) {
        GradientMap<double> g;
        const double before = loss_at(&g);
        adam.step(ps, g);
        CHECK(loss_at(nullptr) < before);
    }
}

TEST_CASE("weight decay changes the trajectory") {
    const Dataset d = tiny_data(32, 1);
    const auto run = [&](double wd) {
        auto m = Model<float>::build(tiny(Mode::baseline), 2);
        TrainConfig tc;
        tc.adam.weight_decay = wd;
        tc.batch_size = 16;
        Trainer tr(m, tc);
        tr.step(first_batch(d, 16));
        tr.step(first_batch(d, 16, 1));
        return m.params();
    };
    CHECK_FALSE(run(0.0) == run(5e-4));
}

TEST_CASE("evaluation is deterministic and counts argmax hits") {
    const Dataset d = tiny_data(30, 2);
    auto m = Model<float>::build(tiny(Mode::cfrpn), 3);
    // a head that always prefers class 1
    const auto hw = m.head().weights;
    const auto hb = m.head().bias;
    for (float& v : m.params()[hw].value.data()) v = 0.0f;
    m.params()[hb].value[1] = 5.0f;
    TrainConfig tc;
    tc.eval_batch_size = 7;
    Trainer tr(m, tc);
    const auto a = tr.evaluate(d);
    const auto b = tr.evaluate(d);
    CHECK(a.accuracy == doctest::Approx(10.0 / 30.0));
    CHECK(a.predictions == b.predictions);
    CHECK(a.mean_loss == b.mean_loss);
    REQUIRE(a.depth[1].has_value());
    CHECK_FALSE(a.depth[0].has_value());
    CHECK(a.depth[1]->samples == 30);
    CHECK(a.depth[1]->max <= 8);
}

TEST_CASE("an untrained model sits near chance") {
    const Dataset d = tiny_data(300, 3);
    auto m = Model<float>::build(tiny(Mode::baseline, 6), 4);
    Trainer tr(m, TrainConfig{});
    const double acc = tr.evaluate(d).accuracy;
    CHECK(acc >= 0.15);
    CHECK(acc <= 0.55);
}

TEST_CASE("training results do not depend on the thread count") {
    const Dataset d = tiny_data(48, 4);
    const auto run = [&](std::size_t threads) {
        auto m = Model<float>::build(tiny(Mode::cfrpn), 5);
        TrainConfig tc;
        tc.batch_size = 24;
        tc.shard_size = 8;
        tc.threads = threads;
        tc.epochs = 1;
        Trainer tr(m, tc);
        const auto h = tr.fit(d, &d, nullptr);
        return std::make_pair(m.params(), h.back().train_loss);
    };
    const auto a = run(1);
    const auto b = run(3);
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
}

TEST_CASE("identical configurations give bitwise identical histories") {
    const Dataset d = tiny_data(40, 5);
    const auto run = [&] {
        auto m = Model<float>::build(tiny(Mode::cfrpn), 6);
        TrainConfig tc;
        tc.batch_size = 16;
        tc.epochs = 2;
        tc.augment.horizontal_flip = 0.5;
        Trainer tr(m, tc);
        std::vector<double> out;
        for (const auto& e : tr.fit(d, &d, nullptr)) {
            out.push_back(e.train_loss);
            out.push_back(e.train_acc);
            out.push_back(e.val->accuracy);
            out.push_back(e.val->depth[3]->mean);
        }
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("training mode accuracy and loss are reported per epoch") {
    const Dataset d = tiny_data(20, 6);
    auto m = Model<float>::build(tiny(Mode::baseline), 7);
    TrainConfig tc;
    tc.batch_size = 8;
    tc.epochs = 3;
    tc.eval_every = 2;
    Trainer tr(m, tc);
    const auto h = tr.fit(d, &d, nullptr);
    REQUIRE(h.size() == 3);
    CHECK(h[0].epoch == 1);
    CHECK_FALSE(h[0].val.has_value());
    CHECK(h[1].val.has_value());
    CHECK(h[2].val.has_value());
    for (const auto& e : h) {
        CHECK(e.train_acc >= 0.0);
        CHECK(e.train_acc <= 1.0);
    }
    CHECK_THROWS(tr.fit(Dataset{}, nullptr, nullptr));
}

TEST_CASE("checkpoint, reload and one step equals an uninterrupted run") {
    const Dataset d = tiny_data(32, 7);
    TrainConfig tc;
    tc.batch_size = 16;
    auto ma = Model<float>::build(tiny(Mode::cfrpn), 8);
    Trainer ta(ma, tc);
    ta.step(first_batch(d, 16, 0));
    const auto bytes = encode_checkpoint(ma.params(), &ta.optimizer());
    ta.step(first_batch(d, 16, 1));

    auto mb = Model<float>::build(tiny(Mode::cfrpn), 99);
    Trainer tb(mb, tc);
    apply_checkpoint(decode_checkpoint(bytes), mb.params(), &tb.optimizer());
    CHECK(tb.optimizer().steps() == 1);
    tb.step(first_batch(d, 16, 1));
    CHECK(ma.params() == mb.params());
    CHECK(ta.optimizer().first_moments() == tb.optimizer().first_moments());
    CHECK(ta.optimizer().second_moments() == tb.optimizer().second_moments());
}

TEST_CASE("divergence raises and keeps the last good parameters") {
    const Dataset d = tiny_data(16, 8);
    auto m = Model<float>::build(tiny(Mode::baseline), 9);
    TrainConfig tc;
    tc.batch_size = 16;
    Trainer tr(m, tc);
    tr.step(first_batch(d, 16));
    const auto good = m.params();
    for (float& v : m.params()[m.head().bias].value.data()) v = INFINITY;
    const auto poisoned = m.params();
    CHECK_THROWS_AS(tr.step(first_batch(d, 16)), TrainingDiverged);
    CHECK(m.params() == poisoned);
    CHECK(tr.optimizer().steps() == 1);
    (void)good;
}

TEST_CASE("checkpoint files round-trip every tensor bitwise") {
    auto m = Model<float>::build(tiny(Mode::cfrpn, 5), 10);
    const Dataset d = tiny_data(16, 9);
    TrainConfig tc;
    tc.batch_size = 16;
    Trainer tr(m, tc);
    tr.step(first_batch(d, 16));
    const auto path = std::filesystem::temp_directory_path() / "cfrpn_unit_ckpt.cfrp";
    save_checkpoint(path, m.params(), &tr.optimizer());
    const Checkpoint c = load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(c.params == m.params());
    REQUIRE(c.optimizer.has_value());
    CHECK(c.optimizer->steps == 1);
    CHECK(c.optimizer->m == tr.optimizer().first_moments());
    CHECK(c.optimizer->v == tr.optimizer().second_moments());
    CHECK(c.optimizer->config.lr == tc.adam.lr);

    const auto plain = decode_checkpoint(encode_checkpoint(m.params(), nullptr));
    CHECK_FALSE(plain.optimizer.has_value());
}

TEST_CASE("corrupt checkpoints are rejected") {
    auto m = Model<float>::build(tiny(Mode::baseline, 3), 11);
    Adam<float> adam(AdamConfig{});
    adam.step(m.params(), {});
    const auto bytes = encode_checkpoint(m.params(), &adam);
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        CHECK_THROWS_AS(decode_checkpoint(std::span(bytes.data(), cut)), CheckpointError);
    }
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), CheckpointError);
    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_WITH_AS(decode_checkpoint(bad_version), doctest::Contains("version"), CheckpointError);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(extra), CheckpointError);

    auto other = Model<float>::build(tiny(Mode::cfrpn, 3), 11);
    CHECK_THROWS(apply_checkpoint(decode_checkpoint(bytes), other.params()));
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.cfrp"), DataError);
}
