#pragma once

// A hand-built T-stage feedforward network equivalent to T recursion steps, assembled from
// elementary ops only. `tied` reuses one kernel/bias pair; otherwise each stage owns a copy.

#include <string>
#include <vector>

#include "cfrpn/ops.hpp"
#include "cfrpn/recursive.hpp"

namespace oracle {

struct Unrolled {
    cfrpn::ParamStore<double> params;
    std::vector<cfrpn::ParamId> kernels;
    std::vector<cfrpn::ParamId> biases;
};

inline Unrolled make_unrolled(const cfrpn::Tensor<double>& kernel, const cfrpn::Tensor<double>& bias, std::size_t T,
                              bool tied) {
    Unrolled u;
    for (std::size_t t = 0; t < (tied ? 1 : T); ++t) {
        u.kernels.push_back(u.params.add("k" + std::to_string(t), kernel));
        u.biases.push_back(u.params.add("b" + std::to_string(t), bias, false));
    }
    return u;
}

inline cfrpn::NodeId run_unrolled(cfrpn::Tape<double>& tape, const Unrolled& net, cfrpn::NodeId input,
                                  std::size_t c_state, std::size_t T, const cfrpn::ConvSpec& spec,
                                  const cfrpn::LrnSpec& lrn) {
    using namespace cfrpn;
    const Shape us = tape.value(input).shape();
    NodeId x = tape.constant(Tensor<double>(Shape{us.n, c_state, us.h, us.w}));
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t j = net.kernels.size() == 1 ? 0 : t;
        const NodeId k = tape.parameter(net.kernels[j], net.params[net.kernels[j]].value);
        const NodeId b = tape.parameter(net.biases[j], net.params[net.biases[j]].value);
        x = ops::lrn(tape, ops::relu(tape, ops::conv2d(tape, ops::concat_channels(tape, input, x), k, b, spec)), lrn);
    }
    return x;
}

}  // namespace oracle
