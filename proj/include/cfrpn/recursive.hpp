#pragma once

// Recursive layers whose state is iterated to a fixed point.
//
// Dense form:  x(t) = f(alpha * u + beta * x(t-1) + b)
// Conv form:   x(t) = lrn(relu(conv([u, x(t-1)]) + bias))
//
// Each sample is iterated until the Euclidean distance between two consecutive states
// falls below epsilon (earliest at t = 2) or max_iterations is reached. Every realized
// step is recorded on the tape, so backward unrolls each sample to its own depth. The
// stopping test itself is not differentiated.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfrpn/kernels.hpp"
#include "cfrpn/tape.hpp"

namespace cfrpn {

enum class Activation { identity, relu, sigmoid };

struct ConvergenceConfig {
    /// 0 disables early stopping, giving exactly max_iterations steps.
    double epsilon = 0.1;
    std::size_t max_iterations = 8;
    /// Stop all samples together once every sample has converged.
    bool per_batch = false;
    /// Divide the distance by sqrt(state elements per sample).
    bool normalized_distance = false;

    void validate() const;
};

enum class StopReason { converged, max_reached, frozen };

const char* stop_reason_name(StopReason r) noexcept;

struct SampleTrace {
    std::size_t t_star = 0;
    /// d(2), ..., d(t_star).
    std::vector<double> distances;
    StopReason reason = StopReason::max_reached;

    /// NaN when only one iteration ran.
    double final_distance() const noexcept;
};

struct IterationTrace {
    std::vector<SampleTrace> samples;

    std::vector<std::size_t> depths() const;
};

/// Per-sample iteration counts that override the stopping rule (used to freeze the
/// realized depth, e.g. for finite-difference checks).
using FrozenDepths = std::vector<std::size_t>;

template <typename T>
struct FixedPointResult {
    NodeId state;
    IterationTrace trace;
};

/// One recursion step for the active samples: receives the active sample indices (in
/// ascending order) and their previous state, returns their new state.
template <typename T>
using StepFunction =
    std::function<NodeId(Tape<T>& tape, std::span<const std::size_t> active, NodeId previous, std::size_t t)>;

template <typename T>
FixedPointResult<T> iterate_to_fixed_point(Tape<T>& tape, NodeId initial, const StepFunction<T>& step,
                                           const ConvergenceConfig& config,
                                           const FrozenDepths* frozen = nullptr);

// -- dense ------------------------------------------------------------------------

template <typename T>
struct FrpnDenseLayer {
    Tensor<T> alpha;  // [n, m, 1, 1] input-to-state
    Tensor<T> beta;   // [n, n, 1, 1] state-to-state
    Tensor<T> bias;   // [n, 1, 1, 1]
    Activation activation = Activation::relu;

    std::size_t input_size() const noexcept { return alpha.shape().c; }
    std::size_t state_size() const noexcept { return alpha.shape().n; }
    void validate() const;
};

template <typename T>
std::vector<T> frpn_dense_step(const FrpnDenseLayer<T>& layer, std::span<const T> u, std::span<const T> x_prev);

template <typename T>
struct DenseForward {
    std::vector<T> state;
    SampleTrace trace;
};

template <typename T>
DenseForward<T> frpn_dense_forward(const FrpnDenseLayer<T>& layer, std::span<const T> u, std::span<const T> x0,
                                   const ConvergenceConfig& config);

/// Tape-recording dense recursion over a batch. u is [N, m, 1, 1], x0 is [N, n, 1, 1].
template <typename T>
FixedPointResult<T> frpn_dense_forward(Tape<T>& tape, NodeId alpha, NodeId beta, NodeId bias, Activation f,
                                       NodeId u, NodeId x0, const ConvergenceConfig& config,
                                       const FrozenDepths* frozen = nullptr);

// -- convolutional ----------------------------------------------------------------

struct CfrpnConvLayer {
    ParamId kernel{};  // [c_state, c_in + c_state, kh, kw]
    ParamId bias{};    // [c_state, 1, 1, 1]
    std::size_t c_in = 0;
    std::size_t c_state = 0;
    ConvSpec spec;
    LrnSpec lrn;
    ConvergenceConfig convergence;
};

template <typename T>
CfrpnConvLayer make_cfrpn_layer(ParamStore<T>& params, const std::string& name, std::size_t c_in,
                                std::size_t c_state, std::size_t kernel_size, const LrnSpec& lrn,
                                const ConvergenceConfig& convergence, SeededRng& rng, double gain = 1.0);

struct RecursionOptions {
    const FrozenDepths* frozen = nullptr;
    /// Inverted dropout on the state inside every iteration; off by default.
    double dropout_rate = 0.0;
    bool training = false;
    std::span<const std::uint64_t> sample_seeds;
};

template <typename T>
FixedPointResult<T> cfrpn_conv_forward(Tape<T>& tape, const ParamStore<T>& params, const CfrpnConvLayer& layer,
                                       NodeId u, const RecursionOptions& options = {});

/// Exactly `depth` iterations with no convergence test.
template <typename T>
NodeId unroll_explicit(Tape<T>& tape, const ParamStore<T>& params, const CfrpnConvLayer& layer, NodeId u,
                       std::size_t depth);

}  // namespace cfrpn
