#include "cfrpn/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "gemm.hpp"

namespace cfrpn {

namespace {

std::size_t conv_extent(std::size_t in, std::size_t pad_lo, std::size_t pad_hi, std::size_t k,
                        std::size_t stride, const char* axis) {
    if (stride == 0 || k == 0) throw ShapeError("conv2d: kernel extent and stride must be positive");
    const std::size_t padded = in + pad_lo + pad_hi;
    if (padded < k) {
        throw ShapeError(std::string("conv2d: kernel ") + axis + " extent " + std::to_string(k) +
                         " exceeds padded input " + std::to_string(padded));
    }
    return (padded - k) / stride + 1;
}

std::size_t pool_extent(std::size_t in, std::size_t pad, std::size_t window, std::size_t stride,
                        const char* axis) {
    if (stride == 0 || window == 0) throw ShapeError("maxpool: window and stride must be positive");
    const std::size_t padded = in + 2 * pad;
    if (padded < window) {
        throw ShapeError(std::string("maxpool: window ") + axis + " extent " + std::to_string(window) +
                         " exceeds padded input " + std::to_string(padded));
    }
    return (padded - window) / stride + 1;
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite result");
}

template <typename T>
T inv_pow(T s, T beta) {
    if (beta == T(0.75)) {
        const T r = std::sqrt(s);
        return T(1) / (r * std::sqrt(r));
    }
    return std::pow(s, -beta);
}

// Valid output columns [lo, hi) for kernel column kj: those reading inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t W, std::size_t Wo, const ConvSpec& s,
                                                        std::size_t kj) {
    const auto pad = static_cast<std::ptrdiff_t>(s.pad_left);
    const auto st = static_cast<std::ptrdiff_t>(s.stride);
    const auto k = static_cast<std::ptrdiff_t>(kj);
    // smallest ow with ow*st + k - pad >= 0, and smallest ow with ow*st + k - pad >= W
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, (pad - k + st - 1) / st);
    const std::ptrdiff_t hi = std::max<std::ptrdiff_t>(0, (static_cast<std::ptrdiff_t>(W) + pad - k + st - 1) / st);
    const auto clamp = [&](std::ptrdiff_t v) { return static_cast<std::size_t>(std::min<std::ptrdiff_t>(v, Wo)); };
    return {clamp(lo), std::max(clamp(lo), clamp(hi))};
}

// Unfolds one sample [C,H,W] into cols [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* in, std::size_t C, std::size_t H, std::size_t W, const ConvSpec& s,
            std::size_t Ho, std::size_t Wo, T* cols) {
    const std::size_t P = Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ki = 0; ki < s.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
                T* row = cols + ((c * s.kernel_h + ki) * s.kernel_w + kj) * P;
                const auto [lo, hi] = valid_columns(W, Wo, s, kj);
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                    T* dst = row + oh * Wo;
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s.stride + ki) -
                                              static_cast<std::ptrdiff_t>(s.pad_top);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
                        std::fill(dst, dst + Wo, T(0));
                        continue;
                    }
                    const T* src = in + (c * H + static_cast<std::size_t>(ih)) * W;
                    std::fill(dst, dst + lo, T(0));
                    std::fill(dst + hi, dst + Wo, T(0));
                    const std::size_t off = lo * s.stride + kj - s.pad_left;
                    if (s.stride == 1) {
                        std::copy(src + off, src + off + (hi - lo), dst + lo);
                    } else {
                        for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[off + (ow - lo) * s.stride];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, std::size_t C, std::size_t H, std::size_t W, const ConvSpec& s,
            std::size_t Ho, std::size_t Wo, T* out) {
    const std::size_t P = Ho * Wo;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ki = 0; ki < s.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
                const T* row = cols + ((c * s.kernel_h + ki) * s.kernel_w + kj) * P;
                const auto [lo, hi] = valid_columns(W, Wo, s, kj);
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s.stride + ki) -
                                              static_cast<std::ptrdiff_t>(s.pad_top);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    T* dst = out + (c * H + static_cast<std::size_t>(ih)) * W;
                    const T* src = row + oh * Wo;
                    const std::size_t off = lo * s.stride + kj - s.pad_left;
                    for (std::size_t ow = lo; ow < hi; ++ow) dst[off + (ow - lo) * s.stride] += src[ow];
                }
            }
        }
    }
}

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec) {
    const Shape& ks = kernel.shape();
    if (ks.c != input.shape().c) {
        throw ShapeError("conv2d: channel axis mismatch, input has " + std::to_string(input.shape().c) +
                         " channels but kernel expects " + std::to_string(ks.c));
    }
    if (ks.h != spec.kernel_h || ks.w != spec.kernel_w) {
        throw ShapeError("conv2d: kernel spatial axes " + ks.str() + " disagree with spec " +
                         std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
    }
}

}  // namespace

ConvSpec ConvSpec::same(std::size_t kh, std::size_t kw) {
    return ConvSpec{kh, kw, 1, (kh - 1) / 2, kh / 2, (kw - 1) / 2, kw / 2};
}

ConvSpec ConvSpec::valid(std::size_t kh, std::size_t kw) { return ConvSpec{kh, kw, 1, 0, 0, 0, 0}; }

std::size_t ConvSpec::out_h(std::size_t in_h) const {
    return conv_extent(in_h, pad_top, pad_bottom, kernel_h, stride, "height");
}
std::size_t ConvSpec::out_w(std::size_t in_w) const {
    return conv_extent(in_w, pad_left, pad_right, kernel_w, stride, "width");
}

std::size_t PoolSpec::out_h(std::size_t in_h) const {
    return pool_extent(in_h, padding, window_h, stride, "height");
}
std::size_t PoolSpec::out_w(std::size_t in_w) const {
    return pool_extent(in_w, padding, window_w, stride, "width");
}

void LrnSpec::validate() const {
    if (n == 0 || n % 2 == 0) throw std::invalid_argument("lrn: neighborhood must be a positive odd integer");
    if (!(k > 0.0)) throw std::invalid_argument("lrn: k must be positive");
    if (alpha < 0.0) throw std::invalid_argument("lrn: alpha must be non-negative");
}

namespace kernels {

// Stride-1 convolutions run as an implicit GEMM over a padded copy of the input: row
// (c, ki, kj) of the virtual im2col matrix is the padded plane of channel c shifted by
// (ki, kj), read on a grid of padded width. Output column p = oh * Wp + ow; columns with
// ow >= Wo are scratch. The values and their k order match the explicit im2col exactly.
namespace {

struct ImplicitGeometry {
    std::size_t Hp, Wp, Ho, Wo, P;  // P: virtual columns

    ImplicitGeometry(std::size_t H, std::size_t W, const ConvSpec& s)
        : Hp(H + s.pad_top + s.pad_bottom),
          Wp(W + s.pad_left + s.pad_right),
          Ho(s.out_h(H)),
          Wo(s.out_w(W)),
          P((Ho - 1) * Wp + Wo) {}
};

template <typename T>
std::vector<const T*> shifted_rows(const T* planes, std::size_t C, std::size_t Hp, std::size_t Wp, std::size_t kh,
                                   std::size_t kw, bool flipped) {
    std::vector<const T*> rows;
    rows.reserve(C * kh * kw);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const std::size_t di = flipped ? kh - 1 - ki : ki;
                const std::size_t dj = flipped ? kw - 1 - kj : kj;
                rows.push_back(planes + (c * Hp + di) * Wp + dj);
            }
        }
    }
    return rows;
}

// Copies [C, H, W] into the interior of a zero-bordered [C, Hp, Wp] buffer.
template <typename T>
void fill_padded(const T* src, std::size_t C, std::size_t H, std::size_t W, std::size_t Hp, std::size_t Wp,
                 std::size_t top, std::size_t left, T* dst) {
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) std::copy_n(src + (c * H + y) * W, W, dst + (c * Hp + y + top) * Wp + left);
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::span<const T> bias,
                 const ConvSpec& spec) {
    check_conv_shapes(input, kernel, spec);
    const Shape& is = input.shape();
    const std::size_t c_out = kernel.shape().n;
    if (bias.size() != c_out) {
        throw ShapeError("conv2d: bias has " + std::to_string(bias.size()) + " entries, expected " +
                         std::to_string(c_out));
    }
    const std::size_t Ho = spec.out_h(is.h);
    const std::size_t Wo = spec.out_w(is.w);
    const std::size_t P = Ho * Wo;
    const std::size_t K = is.c * spec.kernel_h * spec.kernel_w;
    Tensor<T> out(Shape{is.n, c_out, Ho, Wo});
    const auto a_rows = detail::strided_rows(kernel.data().data(), c_out, K);

    if (spec.stride == 1) {
        const ImplicitGeometry g(is.h, is.w, spec);
        std::vector<T> padded(is.c * g.Hp * g.Wp, T(0));
        std::vector<T> acc(c_out * g.P);
        const auto b_rows = shifted_rows<T>(padded.data(), is.c, g.Hp, g.Wp, spec.kernel_h, spec.kernel_w, false);
        for (std::size_t n = 0; n < is.n; ++n) {
            fill_padded(input.sample(n).data(), is.c, is.h, is.w, g.Hp, g.Wp, spec.pad_top, spec.pad_left,
                        padded.data());
            std::fill(acc.begin(), acc.end(), T(0));
            detail::gemm_indirect(c_out, K, g.P, a_rows.data(), b_rows.data(), acc.data(), g.P);
            T* dst = out.sample(n).data();
            for (std::size_t co = 0; co < c_out; ++co) {
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                    const T* src = acc.data() + co * g.P + oh * g.Wp;
                    T* row = dst + (co * Ho + oh) * Wo;
                    for (std::size_t ow = 0; ow < Wo; ++ow) row[ow] = src[ow] + bias[co];
                }
            }
        }
    } else {
        std::vector<T> cols(K * P);
        for (std::size_t n = 0; n < is.n; ++n) {
            im2col(input.sample(n).data(), is.c, is.h, is.w, spec, Ho, Wo, cols.data());
            T* dst = out.sample(n).data();
            detail::gemm_accumulate(c_out, K, P, kernel.data().data(), K, cols.data(), P, dst, P);
            for (std::size_t co = 0; co < c_out; ++co) {
                T* row = dst + co * P;
                for (std::size_t p = 0; p < P; ++p) row[p] += bias[co];
            }
        }
    }
    require_finite(out, "conv2d");
    return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec,
                             const Tensor<T>& grad_out, bool need_input_grad) {
    check_conv_shapes(input, kernel, spec);
    const Shape& is = input.shape();
    const std::size_t c_out = kernel.shape().n;
    const std::size_t kh = spec.kernel_h;
    const std::size_t kw = spec.kernel_w;
    const std::size_t Ho = spec.out_h(is.h);
    const std::size_t Wo = spec.out_w(is.w);
    if (grad_out.shape() != Shape{is.n, c_out, Ho, Wo}) {
        throw ShapeError("conv2d_backward: grad_out shape " + grad_out.shape().str() + " mismatch");
    }
    const std::size_t P = Ho * Wo;
    const std::size_t K = is.c * kh * kw;

    ConvGrads<T> g;
    g.kernel = Tensor<T>(kernel.shape());
    g.bias = Tensor<T>(Shape{c_out, 1, 1, 1});
    if (need_input_grad) g.input = Tensor<T>(is);

    // dK is accumulated transposed, [K, c_out], so the large operand is never transposed
    std::vector<T> dk_t(K * c_out, T(0));
    for (std::size_t n = 0; n < is.n; ++n) {
        const T* gout = grad_out.sample(n).data();
        for (std::size_t co = 0; co < c_out; ++co) {
            T s = g.bias[co];
            for (std::size_t p = 0; p < P; ++p) s += gout[co * P + p];
            g.bias[co] = s;
        }
    }

    if (spec.stride == 1) {
        const ImplicitGeometry geo(is.h, is.w, spec);
        std::vector<T> padded(is.c * geo.Hp * geo.Wp, T(0));
        const auto x_rows = shifted_rows<T>(padded.data(), is.c, geo.Hp, geo.Wp, kh, kw, false);
        // grad_out on the virtual grid, transposed to [P, c_out]; scratch columns stay zero
        std::vector<T> gout_t(geo.P * c_out, T(0));
        const auto gt_rows = detail::strided_rows<T>(gout_t.data(), geo.P, c_out);

        // input gradient: correlation of zero-bordered grad_out with the flipped kernel
        const std::size_t Hg = Ho + 2 * (kh - 1);
        const std::size_t Wg = Wo + 2 * (kw - 1);
        const std::size_t Pq = (geo.Hp - 1) * Wg + geo.Wp;
        const std::size_t Kq = c_out * kh * kw;
        std::vector<T> gpad(need_input_grad ? c_out * Hg * Wg : 0, T(0));
        std::vector<T> kernel_t(need_input_grad ? is.c * Kq : 0);
        std::vector<T> dx(need_input_grad ? is.c * Pq : 0);
        std::vector<const T*> g_rows;
        std::vector<const T*> kt_rows;
        if (need_input_grad) {
            const T* k = kernel.data().data();
            for (std::size_t co = 0; co < c_out; ++co) {
                for (std::size_t c = 0; c < is.c; ++c) {
                    for (std::size_t i = 0; i < kh * kw; ++i) kernel_t[c * Kq + co * kh * kw + i] = k[(co * is.c + c) * kh * kw + i];
                }
            }
            g_rows = shifted_rows<T>(gpad.data(), c_out, Hg, Wg, kh, kw, true);
            kt_rows = detail::strided_rows<T>(kernel_t.data(), is.c, Kq);
        }

        for (std::size_t n = 0; n < is.n; ++n) {
            const T* gout = grad_out.sample(n).data();
            fill_padded(input.sample(n).data(), is.c, is.h, is.w, geo.Hp, geo.Wp, spec.pad_top, spec.pad_left,
                        padded.data());
            for (std::size_t co = 0; co < c_out; ++co) {
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                    for (std::size_t ow = 0; ow < Wo; ++ow) gout_t[(oh * geo.Wp + ow) * c_out + co] = gout[(co * Ho + oh) * Wo + ow];
                }
            }
            // dK^T[k, co] += sum_p x_rows[k][p] * gout_t[p, co]
            detail::gemm_indirect(K, geo.P, c_out, x_rows.data(), gt_rows.data(), dk_t.data(), c_out);
            if (!need_input_grad) continue;
            fill_padded(gout, c_out, Ho, Wo, Hg, Wg, kh - 1, kw - 1, gpad.data());
            std::fill(dx.begin(), dx.end(), T(0));
            detail::gemm_indirect(is.c, Kq, Pq, kt_rows.data(), g_rows.data(), dx.data(), Pq);
            T* gi = g.input.sample(n).data();
            for (std::size_t c = 0; c < is.c; ++c) {
                for (std::size_t y = 0; y < is.h; ++y) {
                    std::copy_n(dx.data() + c * Pq + (y + spec.pad_top) * Wg + spec.pad_left, is.w,
                                gi + (c * is.h + y) * is.w);
                }
            }
        }
    } else {
        std::vector<T> cols(K * P);
        std::vector<T> gout_t(P * c_out);
        std::vector<T> dcols(need_input_grad ? K * P : 0);
        std::vector<T> kernel_t(need_input_grad ? K * c_out : 0);
        if (need_input_grad) transpose(kernel.data().data(), c_out, K, kernel_t.data());
        for (std::size_t n = 0; n < is.n; ++n) {
            const T* gout = grad_out.sample(n).data();
            im2col(input.sample(n).data(), is.c, is.h, is.w, spec, Ho, Wo, cols.data());
            transpose(gout, c_out, P, gout_t.data());
            detail::gemm_accumulate(K, P, c_out, cols.data(), P, gout_t.data(), c_out, dk_t.data(), c_out);
            if (need_input_grad) {
                std::fill(dcols.begin(), dcols.end(), T(0));
                detail::gemm_accumulate(K, c_out, P, kernel_t.data(), c_out, gout, P, dcols.data(), P);
                col2im(dcols.data(), is.c, is.h, is.w, spec, Ho, Wo, g.input.sample(n).data());
            }
        }
    }
    transpose(dk_t.data(), K, c_out, g.kernel.data().data());
    return g;
}

template <typename T>
PoolResult<T> maxpool(const Tensor<T>& input, const PoolSpec& spec) {
    const Shape& is = input.shape();
    const std::size_t Ho = spec.out_h(is.h);
    const std::size_t Wo = spec.out_w(is.w);
    PoolResult<T> r;
    r.output = Tensor<T>(Shape{is.n, is.c, Ho, Wo});
    r.argmax.resize(r.output.size());
    const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
    std::size_t o = 0;
    for (std::size_t n = 0; n < is.n; ++n) {
        for (std::size_t c = 0; c < is.c; ++c) {
            const std::size_t plane = (n * is.c + c) * is.h * is.w;
            for (std::size_t oh = 0; oh < Ho; ++oh) {
                for (std::size_t ow = 0; ow < Wo; ++ow, ++o) {
                    // clip the window to the image, then scan it in row-major order
                    const auto h0 = static_cast<std::ptrdiff_t>(oh * spec.stride) - pad;
                    const auto w0 = static_cast<std::ptrdiff_t>(ow * spec.stride) - pad;
                    const std::size_t i0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(h0, 0));
                    const std::size_t j0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(w0, 0));
                    const std::size_t i1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                        h0 + static_cast<std::ptrdiff_t>(spec.window_h), 0, static_cast<std::ptrdiff_t>(is.h)));
                    const std::size_t j1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(
                        w0 + static_cast<std::ptrdiff_t>(spec.window_w), 0, static_cast<std::ptrdiff_t>(is.w)));
                    const bool found = i0 < i1 && j0 < j1;
                    std::size_t best_at = plane + i0 * is.w + j0;
                    T best = found ? input[best_at] : T(0);
                    for (std::size_t ih = i0; ih < i1; ++ih) {
                        const std::size_t row = plane + ih * is.w;
                        for (std::size_t iw = j0; iw < j1; ++iw) {
                            if (input[row + iw] > best) {
                                best = input[row + iw];
                                best_at = row + iw;
                            }
                        }
                    }
                    if (!found) throw ShapeError("maxpool: window covers only padding");
                    r.output[o] = best;
                    r.argmax[o] = best_at;
                }
            }
        }
    }
    return r;
}

template <typename T>
Tensor<T> maxpool_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                           const Tensor<T>& grad_out) {
    if (argmax.size() != grad_out.size()) throw ShapeError("maxpool_backward: argmax/grad size mismatch");
    Tensor<T> g(input_shape);
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += grad_out[o];
    return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
    return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
    if (input.shape() != grad_out.shape()) throw ShapeError("relu_backward: shape mismatch");
    Tensor<T> g(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T(0) ? grad_out[i] : T(0);
    return g;
}

namespace {

// scale[c,p] = k + alpha/n * sum over the clipped channel window of x^2, for one sample.
template <typename T>
void lrn_scale(const T* x, std::size_t C, std::size_t P, const LrnSpec& spec, T* scale) {
    const std::size_t half = spec.n / 2;
    const T k = static_cast<T>(spec.k);
    const T a = static_cast<T>(spec.alpha / static_cast<double>(spec.n));
    std::vector<T> sq(C * P);
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = x[i] * x[i];
    for (std::size_t c = 0; c < C; ++c) {
        const std::size_t lo = c >= half ? c - half : 0;
        const std::size_t hi = std::min(C - 1, c + half);
        T* out = scale + c * P;
        std::copy_n(sq.data() + lo * P, P, out);
        for (std::size_t cc = lo + 1; cc <= hi; ++cc) {
            const T* row = sq.data() + cc * P;
            for (std::size_t p = 0; p < P; ++p) out[p] += row[p];
        }
        for (std::size_t p = 0; p < P; ++p) out[p] = k + a * out[p];
    }
}

}  // namespace

template <typename T>
Tensor<T> lrn(const Tensor<T>& input, const LrnSpec& spec) {
    spec.validate();
    const Shape& s = input.shape();
    const std::size_t P = s.spatial();
    const T beta = static_cast<T>(spec.beta);
    Tensor<T> out(s);
    std::vector<T> scale(s.per_sample());
    for (std::size_t n = 0; n < s.n; ++n) {
        const T* x = input.sample(n).data();
        lrn_scale(x, s.c, P, spec, scale.data());
        T* y = out.sample(n).data();
        if (beta == T(0.75)) {
            for (std::size_t i = 0; i < scale.size(); ++i) {
                const T r = std::sqrt(scale[i]);
                y[i] = x[i] * (T(1) / (r * std::sqrt(r)));
            }
        } else {
            for (std::size_t i = 0; i < scale.size(); ++i) y[i] = x[i] * std::pow(scale[i], -beta);
        }
    }
    require_finite(out, "lrn");
    return out;
}

template <typename T>
Tensor<T> lrn_backward(const Tensor<T>& input, const LrnSpec& spec, const Tensor<T>& grad_out) {
    spec.validate();
    const Shape& s = input.shape();
    if (grad_out.shape() != s) throw ShapeError("lrn_backward: shape mismatch");
    const std::size_t P = s.spatial();
    const std::size_t half = spec.n / 2;
    const T beta = static_cast<T>(spec.beta);
    const T coef = static_cast<T>(2.0 * spec.alpha * spec.beta / static_cast<double>(spec.n));
    Tensor<T> g(s);
    std::vector<T> scale(s.per_sample());
    std::vector<T> t(s.per_sample());
    std::vector<T> acc(P);
    for (std::size_t n = 0; n < s.n; ++n) {
        const T* x = input.sample(n).data();
        const T* go = grad_out.sample(n).data();
        T* gi = g.sample(n).data();
        lrn_scale(x, s.c, P, spec, scale.data());
        // t_c = g_c * x_c * scale_c^(-beta-1)
        for (std::size_t i = 0; i < t.size(); ++i) {
            const T ip = inv_pow(scale[i], beta);
            gi[i] = go[i] * ip;
            t[i] = go[i] * x[i] * ip / scale[i];
        }
        for (std::size_t c = 0; c < s.c; ++c) {
            std::fill(acc.begin(), acc.end(), T(0));
            const std::size_t lo = c >= half ? c - half : 0;
            const std::size_t hi = std::min(s.c - 1, c + half);
            for (std::size_t cc = lo; cc <= hi; ++cc) {
                const T* row = t.data() + cc * P;
                for (std::size_t p = 0; p < P; ++p) acc[p] += row[p];
            }
            for (std::size_t p = 0; p < P; ++p) gi[c * P + p] -= coef * x[c * P + p] * acc[p];
        }
    }
    return g;
}

template <typename T>
void fill_dropout_mask(std::span<T> mask, double rate, SeededRng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (T& m : mask) m = rng.uniform() < rate ? T(0) : keep;
}

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double rate, SeededRng& rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
    DropoutResult<T> r{input, Tensor<T>(input.shape(), T(1))};
    if (!training || rate == 0.0) return r;
    fill_dropout_mask<T>(r.mask.data(), rate, rng);
    for (std::size_t i = 0; i < input.size(); ++i) r.output[i] = input[i] * r.mask[i];
    return r;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.n != sb.n) throw ShapeError("concat_channels: batch axis mismatch " + sa.str() + " vs " + sb.str());
    if (sa.h != sb.h || sa.w != sb.w) {
        throw ShapeError("concat_channels: spatial axes mismatch " + sa.str() + " vs " + sb.str());
    }
    Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
    for (std::size_t n = 0; n < sa.n; ++n) {
        auto dst = out.sample(n);
        auto pa = a.sample(n);
        auto pb = b.sample(n);
        std::copy(pa.begin(), pa.end(), dst.begin());
        std::copy(pb.begin(), pb.end(), dst.begin() + static_cast<std::ptrdiff_t>(pa.size()));
    }
    return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    if (begin > end || end > s.c) throw ShapeError("slice_channels: range out of bounds for " + s.str());
    Tensor<T> out(Shape{s.n, end - begin, s.h, s.w});
    const std::size_t P = s.spatial();
    for (std::size_t n = 0; n < s.n; ++n) {
        auto src = x.sample(n).subspan(begin * P, (end - begin) * P);
        std::copy(src.begin(), src.end(), out.sample(n).begin());
    }
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias) {
    const std::size_t N = input.shape().n;
    const std::size_t F = input.shape().per_sample();
    const std::size_t K = weights.shape().n;
    if (weights.shape().per_sample() != F) {
        throw ShapeError("linear: feature axis mismatch, input has " + std::to_string(F) +
                         " features but weights expect " + std::to_string(weights.shape().per_sample()));
    }
    if (bias.size() != K) throw ShapeError("linear: bias length mismatch");
    Tensor<T> out(Shape{N, K, 1, 1});
    for (std::size_t n = 0; n < N; ++n) {
        const T* x = input.sample(n).data();
        for (std::size_t k = 0; k < K; ++k) {
            const T* w = weights.sample(k).data();
            T s = T(0);
            for (std::size_t f = 0; f < F; ++f) s += w[f] * x[f];
            out[n * K + k] = s + bias[k];
        }
    }
    require_finite(out, "linear");
    return out;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                               bool need_input_grad) {
    const std::size_t N = input.shape().n;
    const std::size_t F = input.shape().per_sample();
    const std::size_t K = weights.shape().n;
    if (grad_out.shape() != Shape{N, K, 1, 1}) throw ShapeError("linear_backward: grad_out shape mismatch");
    LinearGrads<T> g;
    g.weights = Tensor<T>(weights.shape());
    g.bias = Tensor<T>(Shape{K, 1, 1, 1});
    if (need_input_grad) g.input = Tensor<T>(input.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const T* x = input.sample(n).data();
        for (std::size_t k = 0; k < K; ++k) {
            const T gk = grad_out[n * K + k];
            g.bias[k] += gk;
            T* gw = g.weights.sample(k).data();
            for (std::size_t f = 0; f < F; ++f) gw[f] += gk * x[f];
            if (need_input_grad) {
                const T* w = weights.sample(k).data();
                T* gx = g.input.sample(n).data();
                for (std::size_t f = 0; f < F; ++f) gx[f] += gk * w[f];
            }
        }
    }
    return g;
}

template <typename T>
SoftmaxXent<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    const std::size_t N = logits.shape().n;
    const std::size_t K = logits.shape().per_sample();
    if (labels.size() != N) throw ShapeError("softmax_cross_entropy: label count mismatch");
    SoftmaxXent<T> r{T(0), Tensor<T>(Shape{N, K, 1, 1})};
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
            throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[n]) +
                                    " outside [0, " + std::to_string(K) + ")");
        }
        const T* z = logits.sample(n).data();
        const double zmax = static_cast<double>(*std::max_element(z, z + K));
        double denom = 0.0;
        for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[k]) - zmax);
        const double log_denom = std::log(denom);
        for (std::size_t k = 0; k < K; ++k) {
            r.probabilities[n * K + k] = static_cast<T>(std::exp(static_cast<double>(z[k]) - zmax - log_denom));
        }
        total += log_denom - (static_cast<double>(z[labels[n]]) - zmax);
    }
    r.loss = static_cast<T>(N == 0 ? 0.0 : total / static_cast<double>(N));
    if (!std::isfinite(r.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
    return r;
}

template <typename T>
Tensor<T> softmax_cross_entropy_backward(const Tensor<T>& probabilities, std::span<const int> labels, T seed) {
    const std::size_t N = probabilities.shape().n;
    const std::size_t K = probabilities.shape().per_sample();
    Tensor<T> g(probabilities.shape());
    const T scale = seed / static_cast<T>(N);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
            const T onehot = static_cast<std::size_t>(labels[n]) == k ? T(1) : T(0);
            g[n * K + k] = (probabilities[n * K + k] - onehot) * scale;
        }
    }
    return g;
}

template <typename T>
double euclidean_distance(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeError("euclidean_distance: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

template <typename T>
double euclidean_distance(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("euclidean_distance: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    }
    return euclidean_distance<T>(a.data(), b.data());
}

template <typename T>
Tensor<T> gather_samples(const Tensor<T>& x, std::span<const std::size_t> indices) {
    Shape s = x.shape();
    const std::size_t n_src = s.n;
    s.n = indices.size();
    Tensor<T> out(s);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n_src) throw ShapeError("gather_samples: index out of range");
        auto src = x.sample(indices[i]);
        std::copy(src.begin(), src.end(), out.sample(i).begin());
    }
    return out;
}

template <typename T>
Tensor<T> scatter_samples(const Tensor<T>& base, const Tensor<T>& rows, std::span<const std::size_t> indices) {
    if (rows.shape().n != indices.size() || rows.shape().per_sample() != base.shape().per_sample()) {
        throw ShapeError("scatter_samples: rows " + rows.shape().str() + " incompatible with base " +
                         base.shape().str());
    }
    Tensor<T> out = base;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= base.shape().n) throw ShapeError("scatter_samples: index out of range");
        auto src = rows.sample(i);
        std::copy(src.begin(), src.end(), out.sample(indices[i]).begin());
    }
    return out;
}

#define CFRPN_INSTANTIATE_KERNELS(T)                                                                       \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::span<const T>, const ConvSpec&);    \
    template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const ConvSpec&,             \
                                          const Tensor<T>&, bool);                                          \
    template PoolResult<T> maxpool(const Tensor<T>&, const PoolSpec&);                                     \
    template Tensor<T> maxpool_backward(const Shape&, std::span<const std::size_t>, const Tensor<T>&);     \
    template Tensor<T> relu(const Tensor<T>&);                                                             \
    template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> lrn(const Tensor<T>&, const LrnSpec&);                                              \
    template Tensor<T> lrn_backward(const Tensor<T>&, const LrnSpec&, const Tensor<T>&);                   \
    template DropoutResult<T> dropout(const Tensor<T>&, double, SeededRng&, bool);                         \
    template void fill_dropout_mask(std::span<T>, double, SeededRng&);                                     \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                         \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, std::span<const T>);                     \
    template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, bool);   \
    template SoftmaxXent<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                 \
    template Tensor<T> softmax_cross_entropy_backward(const Tensor<T>&, std::span<const int>, T);          \
    template double euclidean_distance(std::span<const T>, std::span<const T>);                            \
    template double euclidean_distance(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> gather_samples(const Tensor<T>&, std::span<const std::size_t>);                     \
    template Tensor<T> scatter_samples(const Tensor<T>&, const Tensor<T>&, std::span<const std::size_t>);

CFRPN_INSTANTIATE_KERNELS(float)
CFRPN_INSTANTIATE_KERNELS(double)

#undef CFRPN_INSTANTIATE_KERNELS

}  // namespace kernels
}  // namespace cfrpn
