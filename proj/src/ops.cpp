#include "cfrpn/ops.hpp"

#include <cmath>
#include <utility>

namespace cfrpn::ops {

template <typename T>
using Grads = std::vector<Tensor<T>>;

template <typename T>
NodeId conv2d(Tape<T>& tape, NodeId input, NodeId kernel, NodeId bias, const ConvSpec& spec) {
    Tensor<T> out = kernels::conv2d(tape.value(input), tape.value(kernel), tape.value(bias).data(), spec);
    return tape.record(OpKind::conv2d, {input, kernel, bias}, std::move(out),
                       [spec](const Tape<T>& t, std::span<const NodeId> in, const Tensor<T>& g,
                              std::span<const bool> needs) {
                           auto r = kernels::conv2d_backward(t.value(in[0]), t.value(in[1]), spec, g, needs[0]);
                           return Grads<T>{std::move(r.input), std::move(r.kernel), std::move(r.bias)};
                       });
}

template <typename T>
NodeId maxpool(Tape<T>& tape, NodeId input, const PoolSpec& spec) {
    auto r = kernels::maxpool(tape.value(input), spec);
    const Shape in_shape = tape.value(input).shape();
    return tape.record(OpKind::maxpool, {input}, std::move(r.output),
                       [in_shape, argmax = std::move(r.argmax)](const Tape<T>&, std::span<const NodeId>,
                                                                 const Tensor<T>& g, std::span<const bool>) {
                           return Grads<T>{kernels::maxpool_backward<T>(in_shape, argmax, g)};
                       });
}

template <typename T>
NodeId relu(Tape<T>& tape, NodeId input) {
    return tape.record(OpKind::relu, {input}, kernels::relu(tape.value(input)),
                       [](const Tape<T>& t, std::span<const NodeId> in, const Tensor<T>& g, std::span<const bool>) {
                           return Grads<T>{kernels::relu_backward(t.value(in[0]), g)};
                       });
}

template <typename T>
NodeId sigmoid(Tape<T>& tape, NodeId input) {
    const Tensor<T>& x = tape.value(input);
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
    Tensor<T> saved = y;
    return tape.record(OpKind::sigmoid, {input}, std::move(y),
                       [y = std::move(saved)](const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g,
                                              std::span<const bool>) {
                           Tensor<T> gi(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) gi[i] = g[i] * y[i] * (T(1) - y[i]);
                           return Grads<T>{std::move(gi)};
                       });
}

template <typename T>
NodeId lrn(Tape<T>& tape, NodeId input, const LrnSpec& spec) {
    return tape.record(OpKind::lrn, {input}, kernels::lrn(tape.value(input), spec),
                       [spec](const Tape<T>& t, std::span<const NodeId> in, const Tensor<T>& g,
                              std::span<const bool>) {
                           return Grads<T>{kernels::lrn_backward(t.value(in[0]), spec, g)};
                       });
}

template <typename T>
NodeId dropout(Tape<T>& tape, NodeId input, double rate, std::span<const std::uint64_t> sample_seeds,
               bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
    if (!training || rate == 0.0) return input;
    const Tensor<T>& x = tape.value(input);
    if (sample_seeds.size() != x.shape().n) throw ShapeError("dropout: one seed per sample required");
    Tensor<T> mask(x.shape());
    for (std::size_t n = 0; n < x.shape().n; ++n) {
        SeededRng rng(sample_seeds[n]);
        kernels::fill_dropout_mask<T>(mask.sample(n), rate, rng);
    }
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i];
    return tape.record(OpKind::dropout, {input}, std::move(y),
                       [mask = std::move(mask)](const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g,
                                                std::span<const bool>) {
                           Tensor<T> gi(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) gi[i] = g[i] * mask[i];
                           return Grads<T>{std::move(gi)};
                       });
}

template <typename T>
NodeId concat_channels(Tape<T>& tape, NodeId a, NodeId b) {
    const std::size_t ca = tape.value(a).shape().c;
    const std::size_t cb = tape.value(b).shape().c;
    return tape.record(OpKind::concat, {a, b}, kernels::concat_channels(tape.value(a), tape.value(b)),
                       [ca, cb](const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g,
                                std::span<const bool> needs) {
                           Grads<T> r(2);
                           if (needs[0]) r[0] = kernels::slice_channels(g, 0, ca);
                           if (needs[1]) r[1] = kernels::slice_channels(g, ca, ca + cb);
                           return r;
                       });
}

template <typename T>
NodeId linear(Tape<T>& tape, NodeId input, NodeId weights, std::optional<NodeId> bias) {
    const std::size_t K = tape.value(weights).shape().n;
    std::vector<T> zero;
    std::span<const T> b;
    if (bias) {
        b = tape.value(*bias).data();
    } else {
        zero.assign(K, T(0));
        b = zero;
    }
    Tensor<T> out = kernels::linear(tape.value(input), tape.value(weights), b);
    std::vector<NodeId> inputs{input, weights};
    if (bias) inputs.push_back(*bias);
    return tape.record(OpKind::linear, std::move(inputs), std::move(out),
                       [](const Tape<T>& t, std::span<const NodeId> in, const Tensor<T>& g,
                          std::span<const bool> needs) {
                           auto r = kernels::linear_backward(t.value(in[0]), t.value(in[1]), g, needs[0]);
                           Grads<T> out{std::move(r.input), std::move(r.weights)};
                           if (in.size() == 3) out.push_back(std::move(r.bias));
                           return out;
                       });
}

template <typename T>
NodeId softmax_cross_entropy(Tape<T>& tape, NodeId logits, std::vector<int> labels) {
    auto r = kernels::softmax_cross_entropy(tape.value(logits), labels);
    return tape.record(OpKind::softmax_xent, {logits}, Tensor<T>(Shape{1, 1, 1, 1}, r.loss),
                       [probs = std::move(r.probabilities), labels = std::move(labels)](
                           const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g, std::span<const bool>) {
                           return Grads<T>{kernels::softmax_cross_entropy_backward<T>(probs, labels, g[0])};
                       });
}

template <typename T>
NodeId add(Tape<T>& tape, NodeId a, NodeId b) {
    const Tensor<T>& x = tape.value(a);
    const Tensor<T>& y = tape.value(b);
    if (x.shape() != y.shape()) throw ShapeError("add: shape mismatch " + x.shape().str() + " vs " + y.shape().str());
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return tape.record(OpKind::add, {a, b}, std::move(out),
                       [](const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g, std::span<const bool> needs) {
                           Grads<T> r(2);
                           if (needs[0]) r[0] = g;
                           if (needs[1]) r[1] = g;
                           return r;
                       });
}

template <typename T>
NodeId scale(Tape<T>& tape, NodeId x, T factor) {
    const Tensor<T>& v = tape.value(x);
    Tensor<T> out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * factor;
    return tape.record(OpKind::scale, {x}, std::move(out),
                       [factor](const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g, std::span<const bool>) {
                           Tensor<T> gi(g.shape());
                           for (std::size_t i = 0; i < g.size(); ++i) gi[i] = g[i] * factor;
                           return Grads<T>{std::move(gi)};
                       });
}

template <typename T>
NodeId sum(Tape<T>& tape, NodeId x) {
    const Tensor<T>& v = tape.value(x);
    T s = T(0);
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
    const Shape shape = v.shape();
    return tape.record(OpKind::sum, {x}, Tensor<T>(Shape{1, 1, 1, 1}, s),
                       [shape](const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g, std::span<const bool>) {
                           return Grads<T>{Tensor<T>(shape, g[0])};
                       });
}

template <typename T>
NodeId gather_samples(Tape<T>& tape, NodeId x, std::vector<std::size_t> indices) {
    const Shape shape = tape.value(x).shape();
    Tensor<T> out = kernels::gather_samples<T>(tape.value(x), indices);
    return tape.record(OpKind::gather, {x}, std::move(out),
                       [shape, indices = std::move(indices)](const Tape<T>&, std::span<const NodeId>,
                                                             const Tensor<T>& g, std::span<const bool>) {
                           Tensor<T> gi(shape);
                           for (std::size_t i = 0; i < indices.size(); ++i) {
                               auto src = g.sample(i);
                               auto dst = gi.sample(indices[i]);
                               for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                           }
                           return Grads<T>{std::move(gi)};
                       });
}

template <typename T>
NodeId scatter_samples(Tape<T>& tape, NodeId base, NodeId rows, std::vector<std::size_t> indices) {
    Tensor<T> out = kernels::scatter_samples<T>(tape.value(base), tape.value(rows), indices);
    return tape.record(OpKind::scatter, {base, rows}, std::move(out),
                       [indices = std::move(indices)](const Tape<T>&, std::span<const NodeId>, const Tensor<T>& g,
                                                      std::span<const bool> needs) {
                           Grads<T> r(2);
                           if (needs[0]) {
                               r[0] = g;
                               for (std::size_t i : indices) {
                                   auto dst = r[0].sample(i);
                                   std::fill(dst.begin(), dst.end(), T(0));
                               }
                           }
                           if (needs[1]) r[1] = kernels::gather_samples<T>(g, indices);
                           return r;
                       });
}

#define CFRPN_INSTANTIATE_OPS(T)                                                                       \
    template NodeId conv2d(Tape<T>&, NodeId, NodeId, NodeId, const ConvSpec&);                         \
    template NodeId maxpool(Tape<T>&, NodeId, const PoolSpec&);                                        \
    template NodeId relu(Tape<T>&, NodeId);                                                            \
    template NodeId sigmoid(Tape<T>&, NodeId);                                                         \
    template NodeId lrn(Tape<T>&, NodeId, const LrnSpec&);                                             \
    template NodeId dropout(Tape<T>&, NodeId, double, std::span<const std::uint64_t>, bool);           \
    template NodeId concat_channels(Tape<T>&, NodeId, NodeId);                                         \
    template NodeId linear(Tape<T>&, NodeId, NodeId, std::optional<NodeId>);                           \
    template NodeId softmax_cross_entropy(Tape<T>&, NodeId, std::vector<int>);                         \
    template NodeId add(Tape<T>&, NodeId, NodeId);                                                     \
    template NodeId scale(Tape<T>&, NodeId, T);                                                        \
    template NodeId sum(Tape<T>&, NodeId);                                                             \
    template NodeId gather_samples(Tape<T>&, NodeId, std::vector<std::size_t>);                        \
    template NodeId scatter_samples(Tape<T>&, NodeId, NodeId, std::vector<std::size_t>);

CFRPN_INSTANTIATE_OPS(float)
CFRPN_INSTANTIATE_OPS(double)

#undef CFRPN_INSTANTIATE_OPS

}  // namespace cfrpn::ops
