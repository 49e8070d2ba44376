#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>

#include "cfrpn/kernels.hpp"
#include "cfrpn/recursive.hpp"
#include "cfrpn/tape.hpp"

namespace cfrpn {

/// Zero-mean normal with std = gain * sqrt(2 / fan_in).
struct InitPolicy {
    double gain = 1.0;
};

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, const InitPolicy& policy, SeededRng& rng);

struct ConvLayer {
    ParamId kernel{};  // [c_out, c_in, kh, kw]
    ParamId bias{};    // [c_out, 1, 1, 1]
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    ConvSpec spec;
};

template <typename T>
ConvLayer make_conv_layer(ParamStore<T>& params, const std::string& name, std::size_t c_in, std::size_t c_out,
                          std::size_t kernel_size, SeededRng& rng, const InitPolicy& policy = {});

template <typename T>
NodeId apply_conv(Tape<T>& tape, const ParamStore<T>& params, const ConvLayer& layer, NodeId input);

struct LinearLayer {
    ParamId weights{};  // [out, in, 1, 1]
    ParamId bias{};     // [out, 1, 1, 1]
    std::size_t in_features = 0;
    std::size_t out_features = 0;
};

template <typename T>
LinearLayer make_linear_layer(ParamStore<T>& params, const std::string& name, std::size_t in_features,
                              std::size_t out_features, SeededRng& rng, const InitPolicy& policy = {});

template <typename T>
NodeId apply_linear(Tape<T>& tape, const ParamStore<T>& params, const LinearLayer& layer, NodeId input);

/// conv (plain or recursive) -> pool -> optional dropout.
struct Stage {
    std::variant<ConvLayer, CfrpnConvLayer> conv;
    /// Applied once after relu on plain stages; recursive stages normalize inside each iteration.
    std::optional<LrnSpec> plain_lrn;
    PoolSpec pool;
    double dropout_rate = 0.0;
    bool dropout_in_recursion = false;

    bool recursive() const noexcept { return std::holds_alternative<CfrpnConvLayer>(conv); }
};

struct StageMode {
    bool training = false;
    /// One seed per sample in the batch; dropout streams are derived from it.
    std::span<const std::uint64_t> sample_seeds;
    const FrozenDepths* frozen = nullptr;
};

struct StageOutput {
    NodeId output;
    std::optional<IterationTrace> trace;
};

template <typename T>
StageOutput forward_stage(Tape<T>& tape, const ParamStore<T>& params, const Stage& stage, std::size_t stage_index,
                          NodeId input, const StageMode& mode);

}  // namespace cfrpn
