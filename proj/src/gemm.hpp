#pragma once

// C[M,P] += A[M,K] * B[K,P].
//
// Rows of A and B are given by pointer tables, so B may be a set of shifted views into
// a padded image (implicit im2col). Each output element is accumulated over
// k = 0..K-1 strictly in order, starting from its current value in C. The result for an
// element therefore depends only on its own row of A and column of B, never on M, on
// the tiling or on neighbouring data. The layer code relies on this for
// batch-independent and zero-extension-exact results.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace cfrpn::detail {

template <typename T>
struct Vec;
template <>
struct Vec<float> {
    typedef float type __attribute__((vector_size(64)));
    static constexpr std::size_t width = 16;
};
template <>
struct Vec<double> {
    typedef double type __attribute__((vector_size(64)));
    static constexpr std::size_t width = 8;
};

// b rows are read from column offset p
template <typename T, std::size_t MR, std::size_t NV>
inline void gemm_tile(std::size_t K, const T* const* a, const T* const* b, std::size_t p, T* c, std::size_t ldc) {
    using V = typename Vec<T>::type;
    constexpr std::size_t W = Vec<T>::width;
    V acc[MR][NV];
    for (std::size_t r = 0; r < MR; ++r) {
        for (std::size_t j = 0; j < NV; ++j) std::memcpy(&acc[r][j], c + r * ldc + p + j * W, sizeof(V));
    }
    for (std::size_t k = 0; k < K; ++k) {
        V bv[NV];
        const T* brow = b[k] + p;
        for (std::size_t j = 0; j < NV; ++j) std::memcpy(&bv[j], brow + j * W, sizeof(V));
        for (std::size_t r = 0; r < MR; ++r) {
            const T s = a[r][k];
            for (std::size_t j = 0; j < NV; ++j) acc[r][j] += s * bv[j];
        }
    }
    for (std::size_t r = 0; r < MR; ++r) {
        for (std::size_t j = 0; j < NV; ++j) std::memcpy(c + r * ldc + p + j * W, &acc[r][j], sizeof(V));
    }
}

// Full-width column panels of [0, P) for MR rows.
template <typename T, std::size_t MR>
inline void gemm_rows(std::size_t K, std::size_t P, const T* const* a, const T* const* b, T* c, std::size_t ldc) {
    constexpr std::size_t W = Vec<T>::width;
    std::size_t p = 0;
    for (; p + 2 * W <= P; p += 2 * W) gemm_tile<T, MR, 2>(K, a, b, p, c, ldc);
    for (; p + W <= P; p += W) gemm_tile<T, MR, 1>(K, a, b, p, c, ldc);
}

template <typename T>
inline void gemm_all_rows(std::size_t M, std::size_t K, std::size_t P, const T* const* a, const T* const* b, T* c,
                          std::size_t ldc) {
    std::size_t m = 0;
    for (; m + 8 <= M; m += 8) gemm_rows<T, 8>(K, P, a + m, b, c + m * ldc, ldc);
    a += m;
    c += m * ldc;
    switch (M - m) {
        case 7: gemm_rows<T, 7>(K, P, a, b, c, ldc); break;
        case 6: gemm_rows<T, 6>(K, P, a, b, c, ldc); break;
        case 5: gemm_rows<T, 5>(K, P, a, b, c, ldc); break;
        case 4: gemm_rows<T, 4>(K, P, a, b, c, ldc); break;
        case 3: gemm_rows<T, 3>(K, P, a, b, c, ldc); break;
        case 2: gemm_rows<T, 2>(K, P, a, b, c, ldc); break;
        case 1: gemm_rows<T, 1>(K, P, a, b, c, ldc); break;
        default: break;
    }
}

/// a[m] points at K contiguous values, b[k] at P contiguous values.
template <typename T>
void gemm_indirect(std::size_t M, std::size_t K, std::size_t P, const T* const* a, const T* const* b, T* c,
                   std::size_t ldc) {
    constexpr std::size_t W = Vec<T>::width;
    const std::size_t full = P - P % W;
    gemm_all_rows(M, K, full, a, b, c, ldc);
    if (full == P) return;
    // Remaining columns go through a zero-padded one-vector panel.
    const std::size_t tail = P - full;
    std::vector<T> bt(K * W, T(0));
    std::vector<const T*> brows(K);
    std::vector<T> ct(M * W, T(0));
    for (std::size_t k = 0; k < K; ++k) {
        std::copy_n(b[k] + full, tail, bt.data() + k * W);
        brows[k] = bt.data() + k * W;
    }
    for (std::size_t m = 0; m < M; ++m) std::copy_n(c + m * ldc + full, tail, ct.data() + m * W);
    gemm_all_rows(M, K, W, a, brows.data(), ct.data(), W);
    for (std::size_t m = 0; m < M; ++m) std::copy_n(ct.data() + m * W, tail, c + m * ldc + full);
}

template <typename T>
std::vector<const T*> strided_rows(const T* base, std::size_t rows, std::size_t stride) {
    std::vector<const T*> out(rows);
    for (std::size_t i = 0; i < rows; ++i) out[i] = base + i * stride;
    return out;
}

/// Row-major strided operands.
template <typename T>
void gemm_accumulate(std::size_t M, std::size_t K, std::size_t P, const T* a, std::size_t lda, const T* b,
                     std::size_t ldb, T* c, std::size_t ldc) {
    const auto ar = strided_rows(a, M, lda);
    const auto br = strided_rows(b, K, ldb);
    gemm_indirect(M, K, P, ar.data(), br.data(), c, ldc);
}

}  // namespace cfrpn::detail
