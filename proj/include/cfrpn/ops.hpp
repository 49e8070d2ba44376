#pragma once

// Differentiable operations: each evaluates a kernel, records the node, and captures
// whatever forward context its vector-Jacobian product needs.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cfrpn/kernels.hpp"
#include "cfrpn/tape.hpp"

namespace cfrpn::ops {

template <typename T>
NodeId conv2d(Tape<T>& tape, NodeId input, NodeId kernel, NodeId bias, const ConvSpec& spec);

template <typename T>
NodeId maxpool(Tape<T>& tape, NodeId input, const PoolSpec& spec);

template <typename T>
NodeId relu(Tape<T>& tape, NodeId input);

template <typename T>
NodeId sigmoid(Tape<T>& tape, NodeId input);

template <typename T>
NodeId lrn(Tape<T>& tape, NodeId input, const LrnSpec& spec);

/// Inverted dropout with one independent mask stream per sample, seeded by `sample_seeds`.
/// Identity when not training.
template <typename T>
NodeId dropout(Tape<T>& tape, NodeId input, double rate, std::span<const std::uint64_t> sample_seeds,
               bool training);

template <typename T>
NodeId concat_channels(Tape<T>& tape, NodeId a, NodeId b);

/// Affine map over the flattened per-sample features; bias is optional.
template <typename T>
NodeId linear(Tape<T>& tape, NodeId input, NodeId weights, std::optional<NodeId> bias);

/// Mean softmax cross-entropy; the node value has shape [1,1,1,1].
template <typename T>
NodeId softmax_cross_entropy(Tape<T>& tape, NodeId logits, std::vector<int> labels);

template <typename T>
NodeId add(Tape<T>& tape, NodeId a, NodeId b);

template <typename T>
NodeId scale(Tape<T>& tape, NodeId x, T factor);

/// Sum of all elements as a [1,1,1,1] node.
template <typename T>
NodeId sum(Tape<T>& tape, NodeId x);

template <typename T>
NodeId gather_samples(Tape<T>& tape, NodeId x, std::vector<std::size_t> indices);

template <typename T>
NodeId scatter_samples(Tape<T>& tape, NodeId base, NodeId rows, std::vector<std::size_t> indices);

}  // namespace cfrpn::ops
