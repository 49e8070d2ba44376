#pragma once

// Raw forward/backward numeric kernels on Tensor. Every kernel is a pure function and
// processes samples independently, so a sample's result never depends on which other
// samples share its batch. Reductions run in a fixed order; results are bitwise
// reproducible for identical inputs.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cfrpn/rng.hpp"
#include "cfrpn/tensor.hpp"

namespace cfrpn {

struct ConvSpec {
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t pad_top = 0;
    std::size_t pad_bottom = 0;
    std::size_t pad_left = 0;
    std::size_t pad_right = 0;

    /// Stride-1 padding that preserves spatial extents for odd kernels.
    static ConvSpec same(std::size_t kh, std::size_t kw);
    static ConvSpec valid(std::size_t kh, std::size_t kw);

    std::size_t out_h(std::size_t in_h) const;
    std::size_t out_w(std::size_t in_w) const;
};

struct PoolSpec {
    std::size_t window_h = 2;
    std::size_t window_w = 2;
    std::size_t stride = 2;
    std::size_t padding = 0;

    std::size_t out_h(std::size_t in_h) const;
    std::size_t out_w(std::size_t in_w) const;
};

/// Across-channel local response normalization:
/// out = in / (k + alpha/n * sum_{window} in^2)^beta.
struct LrnSpec {
    std::size_t n = 5;
    double k = 2.0;
    double alpha = 1e-4;
    double beta = 0.75;

    /// k=1, alpha=0 makes the operation an exact identity.
    static LrnSpec identity() { return {1, 1.0, 0.0, 0.75}; }
    void validate() const;
};

namespace kernels {

template <typename T>
struct ConvGrads {
    Tensor<T> input;   // empty when not requested
    Tensor<T> kernel;  // [c_out, c_in, kh, kw]
    Tensor<T> bias;    // [c_out, 1, 1, 1]
};

/// Cross-correlation. kernel is [c_out, c_in, kh, kw]; bias has c_out entries.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::span<const T> bias,
                 const ConvSpec& spec);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec,
                             const Tensor<T>& grad_out, bool need_input_grad = true);

template <typename T>
struct PoolResult {
    Tensor<T> output;
    /// Flat input offset of the maximum for every output element.
    std::vector<std::size_t> argmax;
};

template <typename T>
PoolResult<T> maxpool(const Tensor<T>& input, const PoolSpec& spec);

template <typename T>
Tensor<T> maxpool_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                           const Tensor<T>& grad_out);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> lrn(const Tensor<T>& input, const LrnSpec& spec);

template <typename T>
Tensor<T> lrn_backward(const Tensor<T>& input, const LrnSpec& spec, const Tensor<T>& grad_out);

template <typename T>
struct DropoutResult {
    Tensor<T> output;
    /// Per-element multiplier: 0 for dropped, 1/(1-rate) for kept.
    Tensor<T> mask;
};

/// Inverted dropout. Inference mode is the identity with an all-ones mask.
template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double rate, SeededRng& rng, bool training);

/// Draws an inverted-dropout mask into `mask`.
template <typename T>
void fill_dropout_mask(std::span<T> mask, double rate, SeededRng& rng);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Channels [begin, end) of every sample.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end);

/// y[n,k] = sum_f w[k,f] x[n,f] + b[k]; input is read as [N, C*H*W], weights are [K, F, 1, 1].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias);

template <typename T>
struct LinearGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& input, const Tensor<T>& weights,
                               const Tensor<T>& grad_out, bool need_input_grad = true);

template <typename T>
struct SoftmaxXent {
    T loss;
    Tensor<T> probabilities;  // [N, K, 1, 1]
};

/// Mean negative log-likelihood of `labels` under a max-subtracted softmax of `logits`.
template <typename T>
SoftmaxXent<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Gradient of the mean loss w.r.t. logits, scaled by `seed`.
template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probabilities, std::span<const int> labels,
                                         T seed);

/// Unnormalized Euclidean distance over all elements.
template <typename T>
double euclidean_distance(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double euclidean_distance(std::span<const T> a, std::span<const T> b);

/// Rows `indices` of x, in that order.
template <typename T>
Tensor<T> gather_samples(const Tensor<T>& x, std::span<const std::size_t> indices);

/// Copy of `base` with sample indices[i] replaced by sample i of `rows`.
template <typename T>
Tensor<T> scatter_samples(const Tensor<T>& base, const Tensor<T>& rows,
                          std::span<const std::size_t> indices);

}  // namespace kernels
}  // namespace cfrpn
