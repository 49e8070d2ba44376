#include "cfrpn/recursive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cfrpn/layers.hpp"
#include "cfrpn/ops.hpp"

namespace cfrpn {

void ConvergenceConfig::validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("convergence: epsilon must be >= 0");
    if (max_iterations < 1) throw std::invalid_argument("convergence: max_iterations must be >= 1");
}

const char* stop_reason_name(StopReason r) noexcept {
    switch (r) {
        case StopReason::converged: return "converged";
        case StopReason::max_reached: return "max_reached";
        case StopReason::frozen: return "frozen";
    }
    return "unknown";
}

double SampleTrace::final_distance() const noexcept {
    return distances.empty() ? std::numeric_limits<double>::quiet_NaN() : distances.back();
}

std::vector<std::size_t> IterationTrace::depths() const {
    std::vector<std::size_t> d(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) d[i] = samples[i].t_star;
    return d;
}

template <typename T>
FixedPointResult<T> iterate_to_fixed_point(Tape<T>& tape, NodeId initial, const StepFunction<T>& step,
                                           const ConvergenceConfig& config, const FrozenDepths* frozen) {
    config.validate();
    const Shape state_shape = tape.value(initial).shape();
    const std::size_t N = state_shape.n;
    const double norm = config.normalized_distance ? std::sqrt(static_cast<double>(state_shape.per_sample())) : 1.0;

    std::size_t limit = config.max_iterations;
    if (frozen) {
        if (frozen->size() != N) throw std::invalid_argument("frozen depths: one entry per sample required");
        if (std::find(frozen->begin(), frozen->end(), std::size_t{0}) != frozen->end()) {
            throw std::invalid_argument("frozen depths must be >= 1");
        }
        limit = N == 0 ? 0 : *std::max_element(frozen->begin(), frozen->end());
    }

    FixedPointResult<T> result{initial, {}};
    result.trace.samples.resize(N);
    std::vector<std::size_t> active(N);
    std::iota(active.begin(), active.end(), std::size_t{0});
    NodeId x = initial;

    for (std::size_t t = 1; t <= limit; ++t) {
        if (frozen) {
            active.clear();
            for (std::size_t i = 0; i < N; ++i) {
                if ((*frozen)[i] >= t) active.push_back(i);
            }
        }
        if (active.empty()) break;
        const bool whole_batch = active.size() == N;
        const NodeId prev = whole_batch ? x : ops::gather_samples(tape, x, active);
        const NodeId next = step(tape, active, prev, t);

        std::vector<double> dist(active.size(), std::numeric_limits<double>::quiet_NaN());
        {
            const Tensor<T>& pv = tape.value(prev);
            const Tensor<T>& nv = tape.value(next);
            if (nv.shape() != pv.shape()) {
                throw ShapeError("recursion step changed the state shape from " + pv.shape().str() + " to " +
                                 nv.shape().str());
            }
            if (t >= 2) {
                for (std::size_t j = 0; j < active.size(); ++j) {
                    dist[j] = kernels::euclidean_distance<T>(nv.sample(j), pv.sample(j)) / norm;
                }
            }
        }
        x = whole_batch ? next : ops::scatter_samples(tape, x, next, active);

        for (std::size_t j = 0; j < active.size(); ++j) {
            SampleTrace& s = result.trace.samples[active[j]];
            s.t_star = t;
            if (t >= 2) s.distances.push_back(dist[j]);
        }
        if (frozen) {
            for (std::size_t i : active) {
                if ((*frozen)[i] == t) result.trace.samples[i].reason = StopReason::frozen;
            }
            continue;
        }
        if (config.per_batch) {
            const bool all_converged =
                t >= 2 && std::all_of(dist.begin(), dist.end(), [&](double d) { return d < config.epsilon; });
            if (all_converged || t == config.max_iterations) {
                for (std::size_t i : active) {
                    result.trace.samples[i].reason = all_converged ? StopReason::converged : StopReason::max_reached;
                }
                active.clear();
            }
            continue;
        }
        std::vector<std::size_t> remaining;
        for (std::size_t j = 0; j < active.size(); ++j) {
            SampleTrace& s = result.trace.samples[active[j]];
            if (t >= 2 && dist[j] < config.epsilon) {
                s.reason = StopReason::converged;
            } else if (t == config.max_iterations) {
                s.reason = StopReason::max_reached;
            } else {
                remaining.push_back(active[j]);
            }
        }
        active = std::move(remaining);
    }
    result.state = x;
    return result;
}

// -- dense ------------------------------------------------------------------------

namespace {

template <typename T>
T activate(Activation f, T v) {
    switch (f) {
        case Activation::identity: return v;
        case Activation::relu: return v > T(0) ? v : T(0);
        case Activation::sigmoid: return T(1) / (T(1) + std::exp(-v));
    }
    return v;
}

template <typename T>
NodeId activate(Tape<T>& tape, Activation f, NodeId x) {
    switch (f) {
        case Activation::identity: return x;
        case Activation::relu: return ops::relu(tape, x);
        case Activation::sigmoid: return ops::sigmoid(tape, x);
    }
    return x;
}

}  // namespace

template <typename T>
void FrpnDenseLayer<T>::validate() const {
    const std::size_t n = alpha.shape().n;
    if (alpha.shape().h != 1 || alpha.shape().w != 1) throw ShapeError("frpn: alpha must be [n, m, 1, 1]");
    if (beta.shape() != Shape{n, n, 1, 1}) {
        throw ShapeError("frpn: beta shape " + beta.shape().str() + " must be [" + std::to_string(n) + "," +
                         std::to_string(n) + ",1,1]");
    }
    if (bias.shape() != Shape{n, 1, 1, 1}) throw ShapeError("frpn: bias must have n entries");
}

template <typename T>
std::vector<T> frpn_dense_step(const FrpnDenseLayer<T>& layer, std::span<const T> u, std::span<const T> x_prev) {
    layer.validate();
    if (u.size() != layer.input_size()) {
        throw ShapeError("frpn_dense_step: input has " + std::to_string(u.size()) + " entries, expected " +
                         std::to_string(layer.input_size()));
    }
    if (x_prev.size() != layer.state_size()) {
        throw ShapeError("frpn_dense_step: state has " + std::to_string(x_prev.size()) + " entries, expected " +
                         std::to_string(layer.state_size()));
    }
    const Tensor<T> ut(Shape{1, u.size(), 1, 1}, std::vector<T>(u.begin(), u.end()));
    const Tensor<T> xt(Shape{1, x_prev.size(), 1, 1}, std::vector<T>(x_prev.begin(), x_prev.end()));
    const std::vector<T> zero(layer.state_size(), T(0));
    const Tensor<T> a = kernels::linear(ut, layer.alpha, layer.bias.data());
    const Tensor<T> b = kernels::linear(xt, layer.beta, std::span<const T>(zero));
    std::vector<T> out(layer.state_size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate(layer.activation, a[i] + b[i]);
    return out;
}

template <typename T>
FixedPointResult<T> frpn_dense_forward(Tape<T>& tape, NodeId alpha, NodeId beta, NodeId bias, Activation f,
                                       NodeId u, NodeId x0, const ConvergenceConfig& config,
                                       const FrozenDepths* frozen) {
    const std::size_t N = tape.value(u).shape().n;
    if (tape.value(x0).shape().n != N) throw ShapeError("frpn_dense_forward: batch axis mismatch between u and x0");
    StepFunction<T> step = [&, N](Tape<T>& tp, std::span<const std::size_t> active, NodeId prev, std::size_t) {
        const NodeId ua = active.size() == N
                              ? u
                              : ops::gather_samples(tp, u, std::vector<std::size_t>(active.begin(), active.end()));
        const NodeId drive = ops::linear(tp, ua, alpha, std::optional<NodeId>(bias));
        const NodeId feedback = ops::linear(tp, prev, beta, std::nullopt);
        return activate(tp, f, ops::add(tp, drive, feedback));
    };
    return iterate_to_fixed_point(tape, x0, step, config, frozen);
}

template <typename T>
DenseForward<T> frpn_dense_forward(const FrpnDenseLayer<T>& layer, std::span<const T> u, std::span<const T> x0,
                                   const ConvergenceConfig& config) {
    layer.validate();
    if (u.size() != layer.input_size() || x0.size() != layer.state_size()) {
        throw ShapeError("frpn_dense_forward: dimension mismatch");
    }
    Tape<T> tape;
    const NodeId a = tape.constant(layer.alpha);
    const NodeId b = tape.constant(layer.beta);
    const NodeId c = tape.constant(layer.bias);
    const NodeId un = tape.constant(Tensor<T>(Shape{1, u.size(), 1, 1}, std::vector<T>(u.begin(), u.end())));
    const NodeId xn = tape.constant(Tensor<T>(Shape{1, x0.size(), 1, 1}, std::vector<T>(x0.begin(), x0.end())));
    auto r = frpn_dense_forward(tape, a, b, c, layer.activation, un, xn, config);
    const auto state = tape.value(r.state).data();
    return DenseForward<T>{std::vector<T>(state.begin(), state.end()), std::move(r.trace.samples.front())};
}

// -- convolutional ----------------------------------------------------------------

template <typename T>
CfrpnConvLayer make_cfrpn_layer(ParamStore<T>& params, const std::string& name, std::size_t c_in,
                                std::size_t c_state, std::size_t kernel_size, const LrnSpec& lrn,
                                const ConvergenceConfig& convergence, SeededRng& rng, double gain) {
    if (c_in == 0 || c_state == 0 || kernel_size == 0) throw std::invalid_argument(name + ": zero-sized recursive layer");
    lrn.validate();
    convergence.validate();
    CfrpnConvLayer layer;
    layer.c_in = c_in;
    layer.c_state = c_state;
    layer.spec = ConvSpec::same(kernel_size, kernel_size);
    layer.lrn = lrn;
    layer.convergence = convergence;
    const std::size_t fan_in = (c_in + c_state) * kernel_size * kernel_size;
    layer.kernel = params.add(name + ".kernel",
                              he_normal<T>(Shape{c_state, c_in + c_state, kernel_size, kernel_size}, fan_in,
                                           InitPolicy{gain}, rng));
    layer.bias = params.add(name + ".bias", Tensor<T>(Shape{c_state, 1, 1, 1}), false);
    return layer;
}

template <typename T>
FixedPointResult<T> cfrpn_conv_forward(Tape<T>& tape, const ParamStore<T>& params, const CfrpnConvLayer& layer,
                                       NodeId u, const RecursionOptions& options) {
    const Shape us = tape.value(u).shape();
    if (us.c != layer.c_in) {
        throw ShapeError("cfrpn_conv_forward: input has " + std::to_string(us.c) + " channels, layer expects " +
                         std::to_string(layer.c_in));
    }
    const Tensor<T>& kv = params[layer.kernel].value;
    if (kv.shape().c != layer.c_in + layer.c_state || kv.shape().n != layer.c_state) {
        throw ShapeError("cfrpn_conv_forward: kernel " + kv.shape().str() + " inconsistent with c_in + c_state");
    }
    const std::size_t N = us.n;
    const NodeId kernel = tape.parameter(layer.kernel, kv);
    const NodeId bias = tape.parameter(layer.bias, params[layer.bias].value);
    const NodeId x0 = tape.constant(Tensor<T>(Shape{N, layer.c_state, us.h, us.w}));
    const bool state_dropout = options.training && options.dropout_rate > 0.0;
    if (state_dropout && options.sample_seeds.size() != N) {
        throw std::invalid_argument("cfrpn_conv_forward: one dropout seed per sample required");
    }

    StepFunction<T> step = [&](Tape<T>& tp, std::span<const std::size_t> active, NodeId prev, std::size_t t) {
        const std::vector<std::size_t> idx(active.begin(), active.end());
        const NodeId ua = active.size() == N ? u : ops::gather_samples(tp, u, idx);
        const NodeId z = ops::conv2d(tp, ops::concat_channels(tp, ua, prev), kernel, bias, layer.spec);
        NodeId h = ops::lrn(tp, ops::relu(tp, z), layer.lrn);
        if (state_dropout) {
            std::vector<std::uint64_t> seeds(idx.size());
            for (std::size_t j = 0; j < idx.size(); ++j) seeds[j] = derive_seed(options.sample_seeds[idx[j]], {t});
            h = ops::dropout(tp, h, options.dropout_rate, seeds, true);
        }
        return h;
    };
    return iterate_to_fixed_point(tape, x0, step, layer.convergence, options.frozen);
}

template <typename T>
NodeId unroll_explicit(Tape<T>& tape, const ParamStore<T>& params, const CfrpnConvLayer& layer, NodeId u,
                       std::size_t depth) {
    if (depth < 1) throw std::invalid_argument("unroll_explicit: depth must be >= 1");
    CfrpnConvLayer fixed = layer;
    fixed.convergence = ConvergenceConfig{0.0, depth, false, false};
    return cfrpn_conv_forward(tape, params, fixed, u).state;
}

#define CFRPN_INSTANTIATE_RECURSIVE(T)                                                                           \
    template FixedPointResult<T> iterate_to_fixed_point(Tape<T>&, NodeId, const StepFunction<T>&,               \
                                                        const ConvergenceConfig&, const FrozenDepths*);          \
    template struct FrpnDenseLayer<T>;                                                                           \
    template std::vector<T> frpn_dense_step(const FrpnDenseLayer<T>&, std::span<const T>, std::span<const T>);   \
    template DenseForward<T> frpn_dense_forward(const FrpnDenseLayer<T>&, std::span<const T>, std::span<const T>, \
                                                const ConvergenceConfig&);                                       \
    template FixedPointResult<T> frpn_dense_forward(Tape<T>&, NodeId, NodeId, NodeId, Activation, NodeId, NodeId, \
                                                    const ConvergenceConfig&, const FrozenDepths*);              \
    template CfrpnConvLayer make_cfrpn_layer(ParamStore<T>&, const std::string&, std::size_t, std::size_t,       \
                                             std::size_t, const LrnSpec&, const ConvergenceConfig&, SeededRng&,  \
                                             double);                                                            \
    template FixedPointResult<T> cfrpn_conv_forward(Tape<T>&, const ParamStore<T>&, const CfrpnConvLayer&,      \
                                                    NodeId, const RecursionOptions&);                            \
    template NodeId unroll_explicit(Tape<T>&, const ParamStore<T>&, const CfrpnConvLayer&, NodeId, std::size_t);

CFRPN_INSTANTIATE_RECURSIVE(float)
CFRPN_INSTANTIATE_RECURSIVE(double)

#undef CFRPN_INSTANTIATE_RECURSIVE

}  // namespace cfrpn
