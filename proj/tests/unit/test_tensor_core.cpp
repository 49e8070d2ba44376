#include <algorithm>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <numeric>

#include "cfrpn/kernels.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cfrpn;
using oracle::random_tensor;

namespace {

ConvSpec spec_of(std::size_t kh, std::size_t kw, std::size_t stride, std::size_t t, std::size_t b, std::size_t l,
                 std::size_t r) {
    ConvSpec s;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.stride = stride;
    s.pad_top = t;
    s.pad_bottom = b;
    s.pad_left = l;
    s.pad_right = r;
    return s;
}

}  // namespace

TEST_CASE("tensor layout is row-major over n, c, h, w") {
    Tensor<float> t(Shape{2, 3, 4, 5});
    CHECK(t.offset(1, 2, 3, 4) == ((1 * 3 + 2) * 4 + 3) * 5 + 4);
    CHECK(t.size() == 120);
    CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
    CHECK_THROWS_AS(t.reshaped(Shape{1, 1, 1, 7}), ShapeError);
    t[3] = std::nanf("");
    CHECK_THROWS_AS(t.check_finite("t"), NumericError);
}

TEST_CASE("conv2d of ones with a ones kernel sums the window") {
    Tensor<double> x(Shape{1, 1, 3, 3}, 1.0);
    Tensor<double> k(Shape{1, 1, 3, 3}, 1.0);
    const std::vector<double> b{0.0};
    const auto y = kernels::conv2d<double>(x, k, b, ConvSpec::valid(3, 3));
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 9.0);
}

TEST_CASE("identity 1x1 kernel reproduces the input") {
    SeededRng rng(4);
    const auto x = random_tensor<double>(Shape{2, 1, 5, 6}, rng);
    Tensor<double> k(Shape{1, 1, 1, 1}, 1.0);
    const std::vector<double> b{0.0};
    CHECK(kernels::conv2d<double>(x, k, b, ConvSpec::valid(1, 1)) == x);
}

TEST_CASE("conv2d matches the quadruple-loop reference for every padding and stride") {
    SeededRng rng(11);
    const ConvSpec specs[] = {
        ConvSpec::same(3, 3), ConvSpec::same(5, 5), ConvSpec::valid(3, 3), ConvSpec::same(1, 1),
        spec_of(3, 2, 1, 0, 2, 1, 0), spec_of(3, 3, 2, 1, 1, 1, 1), spec_of(5, 3, 3, 2, 0, 1, 2),
    };
    for (const auto& s : specs) {
        const auto x = random_tensor<double>(Shape{2, 3, 8, 7}, rng);
        const auto k = random_tensor<double>(Shape{4, 3, s.kernel_h, s.kernel_w}, rng);
        std::vector<double> b(4);
        for (auto& v : b) v = rng.normal();
        const auto y = kernels::conv2d<double>(x, k, b, s);
        const auto ref = oracle::conv2d(x, k, b, s);
        REQUIRE(y.shape() == ref.shape());
        CHECK(oracle::max_rel_diff(y, ref) <= 1e-12);
    }
}

TEST_CASE("conv2d output shape for same padding") {
    SeededRng rng(5);
    const auto x = random_tensor<double>(Shape{2, 3, 8, 8}, rng);
    const auto k = random_tensor<double>(Shape{4, 3, 3, 3}, rng);
    const auto y = kernels::conv2d<double>(x, k, std::vector<double>(4, 0.0), ConvSpec::same(3, 3));
    CHECK(y.shape() == Shape{2, 4, 8, 8});
}

TEST_CASE("conv2d backward matches the reference adjoint") {
    SeededRng rng(12);
    const ConvSpec specs[] = {ConvSpec::same(3, 3), ConvSpec::same(5, 5), spec_of(3, 3, 2, 1, 1, 1, 1),
                              spec_of(3, 2, 1, 0, 2, 1, 0)};
    for (const auto& s : specs) {
        const auto x = random_tensor<double>(Shape{2, 3, 7, 6}, rng);
        const auto k = random_tensor<double>(Shape{4, 3, s.kernel_h, s.kernel_w}, rng);
        const std::vector<double> b(4, 0.5);
        const auto y = kernels::conv2d<double>(x, k, b, s);
        const auto go = random_tensor<double>(y.shape(), rng);
        const auto g = kernels::conv2d_backward<double>(x, k, s, go, true);
        // <go, conv(x + e_i)> - <go, conv(x)> is linear: the adjoint is the sum over output elements
        Tensor<double> gx(x.shape()), gk(k.shape());
        const Shape& ys = y.shape();
        for (std::size_t n = 0; n < ys.n; ++n)
            for (std::size_t co = 0; co < ys.c; ++co)
                for (std::size_t oh = 0; oh < ys.h; ++oh)
                    for (std::size_t ow = 0; ow < ys.w; ++ow)
                        for (std::size_t ci = 0; ci < 3; ++ci)
                            for (std::size_t i = 0; i < s.kernel_h; ++i)
                                for (std::size_t j = 0; j < s.kernel_w; ++j) {
                                    const long r = long(oh * s.stride + i) - long(s.pad_top);
                                    const long c = long(ow * s.stride + j) - long(s.pad_left);
                                    if (r < 0 || c < 0 || r >= 7 || c >= 6) continue;
                                    gx(n, ci, r, c) += go(n, co, oh, ow) * k(co, ci, i, j);
                                    gk(co, ci, i, j) += go(n, co, oh, ow) * x(n, ci, r, c);
                                }
        CHECK(oracle::max_rel_diff(g.input, gx) <= 1e-12);
        CHECK(oracle::max_rel_diff(g.kernel, gk) <= 1e-12);
        for (std::size_t co = 0; co < 4; ++co) {
            double sb = 0.0;
            for (std::size_t n = 0; n < ys.n; ++n)
                for (std::size_t p = 0; p < ys.h * ys.w; ++p) sb += go.sample(n)[co * ys.h * ys.w + p];
            CHECK(g.bias[co] == doctest::Approx(sb).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv over concatenated channels splits into a sum over kernel slices") {
    SeededRng rng(13);
    const auto u = random_tensor<double>(Shape{2, 3, 6, 6}, rng);
    const auto x = random_tensor<double>(Shape{2, 4, 6, 6}, rng);
    const auto k = random_tensor<double>(Shape{5, 7, 3, 3}, rng);
    const std::vector<double> zero(5, 0.0);
    const auto s = ConvSpec::same(3, 3);
    const auto whole = kernels::conv2d<double>(kernels::concat_channels(u, x), k, zero, s);
    Tensor<double> ku(Shape{5, 3, 3, 3}), kx(Shape{5, 4, 3, 3});
    for (std::size_t co = 0; co < 5; ++co)
        for (std::size_t c = 0; c < 7; ++c)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) (c < 3 ? ku(co, c, i, j) : kx(co, c - 3, i, j)) = k(co, c, i, j);
    const auto a = kernels::conv2d<double>(u, ku, zero, s);
    const auto b = kernels::conv2d<double>(x, kx, zero, s);
    double worst = 0.0;
    for (std::size_t i = 0; i < whole.size(); ++i) {
        worst = std::max(worst, std::fabs(whole[i] - (a[i] + b[i])) / std::max(1.0, std::fabs(whole[i])));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("conv2d results do not depend on batch composition") {
    SeededRng rng(14);
    const auto x = random_tensor<float>(Shape{5, 3, 9, 9}, rng);
    const auto k = random_tensor<float>(Shape{6, 3, 5, 5}, rng);
    const std::vector<float> b(6, 0.1f);
    const auto all = kernels::conv2d<float>(x, k, b, ConvSpec::same(5, 5));
    const std::vector<std::size_t> pick{3};
    const auto one = kernels::conv2d<float>(kernels::gather_samples(x, std::span<const std::size_t>(pick)), k, b,
                                            ConvSpec::same(5, 5));
    CHECK(std::equal(one.data().begin(), one.data().end(), all.sample(3).begin()));
}

TEST_CASE("conv2d shape errors name the axis") {
    Tensor<double> x(Shape{1, 2, 4, 4});
    Tensor<double> k(Shape{1, 3, 3, 3});
    CHECK_THROWS_WITH_AS(kernels::conv2d<double>(x, k, std::vector<double>{0.0}, ConvSpec::same(3, 3)),
                         doctest::Contains("channel"), ShapeError);
    Tensor<double> big(Shape{1, 2, 7, 7});
    CHECK_THROWS_AS(kernels::conv2d<double>(x, Tensor<double>(Shape{1, 2, 7, 7}), std::vector<double>{0.0},
                                            ConvSpec::valid(7, 7)),
                    ShapeError);
    (void)big;
}

TEST_CASE("conv2d flags non-finite results") {
    Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
    x[0] = INFINITY;
    Tensor<double> k(Shape{1, 1, 1, 1}, 1.0);
    CHECK_THROWS_AS(kernels::conv2d<double>(x, k, std::vector<double>{0.0}, ConvSpec::valid(1, 1)), NumericError);
}

TEST_CASE("maxpool picks quadrant maxima") {
    Tensor<double> x(Shape{1, 1, 4, 4});
    std::iota(x.data().begin(), x.data().end(), 0.0);
    const auto r = kernels::maxpool(x, PoolSpec{2, 2, 2, 0});
    CHECK(r.output.data()[0] == 5.0);
    CHECK(r.output.data()[1] == 7.0);
    CHECK(r.output.data()[2] == 13.0);
    CHECK(r.output.data()[3] == 15.0);
}

TEST_CASE("maxpool extent formula with padding") {
    const PoolSpec p{3, 3, 2, 1};
    CHECK(p.out_h(32) == 16);
    CHECK(p.out_h(16) == 8);
    CHECK(p.out_h(8) == 4);
    CHECK(p.out_h(4) == 2);
    Tensor<float> x(Shape{1, 1, 32, 32});
    CHECK(kernels::maxpool(x, p).output.shape() == Shape{1, 1, 16, 16});
    CHECK_THROWS(kernels::maxpool(Tensor<float>(Shape{1, 1, 2, 2}), PoolSpec{5, 5, 1, 0}));
}

TEST_CASE("maxpool ties go to the first index in scan order") {
    Tensor<double> x(Shape{1, 1, 4, 4}, 3.0);
    const auto r = kernels::maxpool(x, PoolSpec{2, 2, 2, 0});
    for (double v : r.output.data()) CHECK(v == 3.0);
    CHECK(r.argmax == std::vector<std::size_t>{0, 2, 8, 10});
}

TEST_CASE("maxpool matches a reference with padding as minus infinity") {
    SeededRng rng(15);
    const auto x = random_tensor<double>(Shape{2, 3, 9, 8}, rng);
    const PoolSpec p{3, 3, 2, 1};
    const auto r = kernels::maxpool(x, p);
    const Shape& os = r.output.shape();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t oh = 0; oh < os.h; ++oh)
                for (std::size_t ow = 0; ow < os.w; ++ow) {
                    double best = -INFINITY;
                    for (long i = long(oh * 2) - 1; i < long(oh * 2) + 2; ++i)
                        for (long j = long(ow * 2) - 1; j < long(ow * 2) + 2; ++j)
                            if (i >= 0 && j >= 0 && i < 9 && j < 8) best = std::max(best, x(n, c, i, j));
                    CHECK(r.output(n, c, oh, ow) == best);
                }
}

TEST_CASE("maxpool backward routes each gradient to its argmax and conserves mass") {
    SeededRng rng(16);
    const auto x = random_tensor<double>(Shape{2, 2, 8, 8}, rng);
    const auto r = kernels::maxpool(x, PoolSpec{3, 3, 2, 1});
    const auto go = random_tensor<double>(r.output.shape(), rng);
    const auto g = kernels::maxpool_backward(x.shape(), r.argmax, go);
    double in = 0.0, out = 0.0;
    for (double v : g.data()) in += v;
    for (double v : go.data()) out += v;
    CHECK(in == doctest::Approx(out).epsilon(1e-12));
    std::size_t nonzero = 0;
    for (double v : g.data()) nonzero += v != 0.0;
    std::vector<std::size_t> unique = r.argmax;
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    CHECK(nonzero <= unique.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::binary_search(unique.begin(), unique.end(), i)) CHECK(g[i] == 0.0);
    }
}

TEST_CASE("relu basics") {
    Tensor<double> x(Shape{1, 1, 1, 3}, std::vector<double>{-1.0, 0.0, 2.0});
    CHECK(kernels::relu(x).data()[0] == 0.0);
    CHECK(kernels::relu(x).data()[1] == 0.0);
    CHECK(kernels::relu(x).data()[2] == 2.0);
    SeededRng rng(17);
    const auto r = random_tensor<double>(Shape{2, 3, 4, 4}, rng);
    CHECK(kernels::relu(kernels::relu(r)) == kernels::relu(r));
    Tensor<double> neg(Shape{1, 2, 3, 3}, -0.5);
    const auto rn = kernels::relu(neg);
    for (double v : rn.data()) CHECK(v == 0.0);
}

TEST_CASE("lrn scalar closed form and identities") {
    SeededRng rng(18);
    const auto x = random_tensor<double>(Shape{2, 1, 4, 4}, rng, 30.0);
    const LrnSpec s{1, 2.0, 1e-4, 0.75};
    const auto y = kernels::lrn(x, s);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        worst = std::max(worst, std::fabs(y[i] - v / std::pow(2.0 + 1e-4 * v * v, 0.75)));
    }
    CHECK(worst <= 1e-14);
    CHECK(kernels::lrn(Tensor<double>(Shape{1, 5, 3, 3}), LrnSpec{}) == Tensor<double>(Shape{1, 5, 3, 3}));
    const auto id = random_tensor<double>(Shape{1, 4, 3, 3}, rng);
    CHECK(kernels::lrn(id, LrnSpec::identity()) == id);
    CHECK_THROWS(LrnSpec{4, 2.0, 1e-4, 0.75}.validate());
}

TEST_CASE("lrn matches the windowed reference and preserves sign") {
    SeededRng rng(19);
    const auto x = random_tensor<double>(Shape{2, 7, 3, 3}, rng, 20.0);
    const LrnSpec s{5, 2.0, 1e-2, 0.75};
    const auto y = kernels::lrn(x, s);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 7; ++c)
            for (std::size_t h = 0; h < 3; ++h)
                for (std::size_t w = 0; w < 3; ++w) {
                    double sq = 0.0;
                    for (long cc = long(c) - 2; cc <= long(c) + 2; ++cc)
                        if (cc >= 0 && cc < 7) sq += x(n, cc, h, w) * x(n, cc, h, w);
                    const double ref = x(n, c, h, w) / std::pow(2.0 + 1e-2 / 5.0 * sq, 0.75);
                    CHECK(y(n, c, h, w) == doctest::Approx(ref).epsilon(1e-13));
                    CHECK(std::signbit(y(n, c, h, w)) == std::signbit(x(n, c, h, w)));
                }
}

TEST_CASE("dropout modes and survivor fraction") {
    SeededRng rng(20);
    const auto x = random_tensor<double>(Shape{1, 1, 10, 10}, rng);
    const auto zero = kernels::dropout(x, 0.0, rng, true);
    CHECK(zero.output == x);
    for (double m : zero.mask.data()) CHECK(m == 1.0);
    CHECK(kernels::dropout(x, 0.7, rng, false).output == x);

    Tensor<float> big(Shape{1, 1, 1000, 1000}, 1.0f);
    SeededRng r2(21);
    const auto d = kernels::dropout(big, 0.5, r2, true);
    std::size_t kept = 0;
    for (float m : d.mask.data()) {
        CHECK((m == 0.0f || m == 2.0f));
        kept += m != 0.0f;
    }
    CHECK(std::fabs(static_cast<double>(kept) / 1e6 - 0.5) <= 0.01);
    CHECK_THROWS(kernels::dropout(x, 1.0, rng, true));
}

TEST_CASE("concat and slice channels") {
    SeededRng rng(22);
    const auto a = random_tensor<float>(Shape{1, 3, 8, 8}, rng);
    const auto b = random_tensor<float>(Shape{1, 96, 8, 8}, rng);
    const auto ab = kernels::concat_channels(a, b);
    CHECK(ab.shape() == Shape{1, 99, 8, 8});
    CHECK(kernels::slice_channels(ab, 0, 3) == a);
    CHECK(kernels::slice_channels(ab, 3, 99) == b);
    CHECK(kernels::concat_channels(a, Tensor<float>(Shape{1, 0, 8, 8})) == a);
    CHECK_THROWS_AS(kernels::concat_channels(a, Tensor<float>(Shape{1, 2, 7, 8})), ShapeError);
    CHECK_THROWS_AS(kernels::concat_channels(a, Tensor<float>(Shape{2, 2, 8, 8})), ShapeError);
}

TEST_CASE("linear layer identities and loop oracle") {
    Tensor<double> x(Shape{2, 3, 1, 1}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Tensor<double> eye(Shape{3, 3, 1, 1});
    for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
    CHECK(kernels::linear<double>(x, eye, std::vector<double>(3, 0.0)).data()[4] == 5.0);
    const std::vector<double> b{7.0, -1.0};
    const auto z = kernels::linear<double>(x, Tensor<double>(Shape{2, 3, 1, 1}), b);
    CHECK(z.data()[0] == 7.0);
    CHECK(z.data()[3] == -1.0);

    SeededRng rng(23);
    const auto xi = random_tensor<double>(Shape{4, 2, 5, 1}, rng);
    const auto w = random_tensor<double>(Shape{3, 10, 1, 1}, rng);
    std::vector<double> bb(3);
    for (auto& v : bb) v = rng.normal();
    const auto y = kernels::linear<double>(xi, w, bb);
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t k = 0; k < 3; ++k) {
            double acc = bb[k];
            for (std::size_t f = 0; f < 10; ++f) acc += w[k * 10 + f] * xi[n * 10 + f];
            CHECK(std::fabs(y[n * 3 + k] - acc) <= 1e-12 * std::max(1.0, std::fabs(acc)));
        }
    CHECK_THROWS_AS(kernels::linear<double>(xi, Tensor<double>(Shape{3, 9, 1, 1}), bb), ShapeError);
}

TEST_CASE("softmax cross-entropy against a high-precision reference") {
    using big = boost::multiprecision::cpp_bin_float_50;
    Tensor<double> uniform(Shape{2, 10, 1, 1});
    const std::vector<int> l2{3, 7};
    CHECK(kernels::softmax_cross_entropy<double>(uniform, l2).loss == doctest::Approx(std::log(10.0)).epsilon(1e-15));

    Tensor<double> sat(Shape{1, 4, 1, 1});
    sat[2] = 1000.0;
    const std::vector<int> l1{2};
    CHECK(kernels::softmax_cross_entropy<double>(sat, l1).loss < 1e-12);

    SeededRng rng(24);
    const auto z = random_tensor<double>(Shape{3, 5, 1, 1}, rng, 3.0);
    const std::vector<int> labels{0, 4, 2};
    const auto r = kernels::softmax_cross_entropy<double>(z, labels);
    big loss = 0;
    for (std::size_t n = 0; n < 3; ++n) {
        big denom = 0;
        for (std::size_t k = 0; k < 5; ++k) denom += boost::multiprecision::exp(big(z[n * 5 + k]));
        for (std::size_t k = 0; k < 5; ++k) {
            const big p = boost::multiprecision::exp(big(z[n * 5 + k])) / denom;
            CHECK(std::fabs(r.probabilities[n * 5 + k] - p.convert_to<double>()) <= 1e-12);
        }
        loss -= boost::multiprecision::log(boost::multiprecision::exp(big(z[n * 5 + labels[n]])) / denom);
    }
    loss /= 3;
    CHECK(std::fabs(r.loss - loss.convert_to<double>()) <= 1e-12);
    const std::vector<int> bad{0, 5, 1};
    CHECK_THROWS(kernels::softmax_cross_entropy<double>(z, bad));
}

TEST_CASE("euclidean distance is a metric") {
    Tensor<double> ones(Shape{1, 1, 1, 4}, 1.0), zeros(Shape{1, 1, 1, 4});
    CHECK(kernels::euclidean_distance(ones, zeros) == 2.0);
    CHECK(kernels::euclidean_distance(ones, ones) == 0.0);
    SeededRng rng(25);
    for (int rep = 0; rep < 20; ++rep) {
        const auto a = random_tensor<double>(Shape{1, 3, 4, 4}, rng);
        const auto b = random_tensor<double>(Shape{1, 3, 4, 4}, rng);
        const auto c = random_tensor<double>(Shape{1, 3, 4, 4}, rng);
        const double ab = kernels::euclidean_distance(a, b);
        double ref = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) ref += (a[i] - b[i]) * (a[i] - b[i]);
        CHECK(std::fabs(ab - std::sqrt(ref)) <= 1e-12);
        CHECK(ab == kernels::euclidean_distance(b, a));
        CHECK(ab > 0.0);
        CHECK(kernels::euclidean_distance(a, c) <= ab + kernels::euclidean_distance(b, c) + 1e-12);
    }
    CHECK_THROWS_AS(kernels::euclidean_distance(ones, Tensor<double>(Shape{1, 1, 2, 2})), ShapeError);
}

TEST_CASE("forward kernels are bitwise reproducible") {
    SeededRng rng(26);
    const auto x = random_tensor<float>(Shape{3, 4, 8, 8}, rng);
    const auto k = random_tensor<float>(Shape{5, 4, 3, 3}, rng);
    const std::vector<float> b(5, 0.25f);
    CHECK(kernels::conv2d<float>(x, k, b, ConvSpec::same(3, 3)) == kernels::conv2d<float>(x, k, b, ConvSpec::same(3, 3)));
    CHECK(kernels::lrn(x, LrnSpec{}) == kernels::lrn(x, LrnSpec{}));
    SeededRng d1(9), d2(9);
    CHECK(kernels::dropout(x, 0.5, d1, true).output == kernels::dropout(x, 0.5, d2, true).output);
}
