#include "cfrpn/layers.hpp"

#include <cmath>
#include <vector>

#include "cfrpn/ops.hpp"

namespace cfrpn {

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, const InitPolicy& policy, SeededRng& rng) {
    if (fan_in == 0) throw std::invalid_argument("he_normal: fan_in must be positive");
    const double stddev = policy.gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    Tensor<T> t(shape);
    for (T& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

template <typename T>
ConvLayer make_conv_layer(ParamStore<T>& params, const std::string& name, std::size_t c_in, std::size_t c_out,
                          std::size_t kernel_size, SeededRng& rng, const InitPolicy& policy) {
    if (c_in == 0 || c_out == 0 || kernel_size == 0) throw std::invalid_argument(name + ": zero-sized conv layer");
    ConvLayer layer;
    layer.c_in = c_in;
    layer.c_out = c_out;
    layer.spec = ConvSpec::same(kernel_size, kernel_size);
    const Shape ks{c_out, c_in, kernel_size, kernel_size};
    layer.kernel = params.add(name + ".kernel", he_normal<T>(ks, c_in * kernel_size * kernel_size, policy, rng));
    layer.bias = params.add(name + ".bias", Tensor<T>(Shape{c_out, 1, 1, 1}), false);
    return layer;
}

template <typename T>
NodeId apply_conv(Tape<T>& tape, const ParamStore<T>& params, const ConvLayer& layer, NodeId input) {
    const NodeId k = tape.parameter(layer.kernel, params[layer.kernel].value);
    const NodeId b = tape.parameter(layer.bias, params[layer.bias].value);
    return ops::conv2d(tape, input, k, b, layer.spec);
}

template <typename T>
LinearLayer make_linear_layer(ParamStore<T>& params, const std::string& name, std::size_t in_features,
                              std::size_t out_features, SeededRng& rng, const InitPolicy& policy) {
    if (in_features == 0 || out_features == 0) throw std::invalid_argument(name + ": zero-sized linear layer");
    LinearLayer layer;
    layer.in_features = in_features;
    layer.out_features = out_features;
    layer.weights = params.add(name + ".weights",
                               he_normal<T>(Shape{out_features, in_features, 1, 1}, in_features, policy, rng));
    layer.bias = params.add(name + ".bias", Tensor<T>(Shape{out_features, 1, 1, 1}), false);
    return layer;
}

template <typename T>
NodeId apply_linear(Tape<T>& tape, const ParamStore<T>& params, const LinearLayer& layer, NodeId input) {
    const NodeId w = tape.parameter(layer.weights, params[layer.weights].value);
    const NodeId b = tape.parameter(layer.bias, params[layer.bias].value);
    return ops::linear(tape, input, w, b);
}

namespace {

std::vector<std::uint64_t> stage_seeds(std::span<const std::uint64_t> sample_seeds, std::size_t stage_index,
                                       std::uint64_t salt) {
    std::vector<std::uint64_t> out(sample_seeds.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = derive_seed(sample_seeds[i], {stage_index, salt});
    return out;
}

}  // namespace

template <typename T>
StageOutput forward_stage(Tape<T>& tape, const ParamStore<T>& params, const Stage& stage, std::size_t stage_index,
                          NodeId input, const StageMode& mode) {
    StageOutput out{input, std::nullopt};
    NodeId x = input;
    std::vector<std::uint64_t> recursion_seeds;
    if (const auto* plain = std::get_if<ConvLayer>(&stage.conv)) {
        x = ops::relu(tape, apply_conv(tape, params, *plain, x));
        if (stage.plain_lrn) x = ops::lrn(tape, x, *stage.plain_lrn);
    } else {
        const auto& rec = std::get<CfrpnConvLayer>(stage.conv);
        RecursionOptions options;
        options.frozen = mode.frozen;
        options.training = mode.training;
        if (stage.dropout_in_recursion && mode.training) {
            recursion_seeds = stage_seeds(mode.sample_seeds, stage_index, 0x7ec);
            options.dropout_rate = stage.dropout_rate;
            options.sample_seeds = recursion_seeds;
        }
        auto r = cfrpn_conv_forward(tape, params, rec, x, options);
        x = r.state;
        out.trace = std::move(r.trace);
    }
    x = ops::maxpool(tape, x, stage.pool);
    if (stage.dropout_rate > 0.0 && !stage.dropout_in_recursion && mode.training) {
        const auto seeds = stage_seeds(mode.sample_seeds, stage_index, 0xd20);
        x = ops::dropout(tape, x, stage.dropout_rate, seeds, true);
    }
    out.output = x;
    return out;
}

#define CFRPN_INSTANTIATE_LAYERS(T)                                                                               \
    template Tensor<T> he_normal(Shape, std::size_t, const InitPolicy&, SeededRng&);                              \
    template ConvLayer make_conv_layer(ParamStore<T>&, const std::string&, std::size_t, std::size_t, std::size_t, \
                                       SeededRng&, const InitPolicy&);                                            \
    template NodeId apply_conv(Tape<T>&, const ParamStore<T>&, const ConvLayer&, NodeId);                         \
    template LinearLayer make_linear_layer(ParamStore<T>&, const std::string&, std::size_t, std::size_t,          \
                                           SeededRng&, const InitPolicy&);                                        \
    template NodeId apply_linear(Tape<T>&, const ParamStore<T>&, const LinearLayer&, NodeId);                     \
    template StageOutput forward_stage(Tape<T>&, const ParamStore<T>&, const Stage&, std::size_t, NodeId,         \
                                       const StageMode&);

CFRPN_INSTANTIATE_LAYERS(float)
CFRPN_INSTANTIATE_LAYERS(double)

#undef CFRPN_INSTANTIATE_LAYERS

}  // namespace cfrpn
