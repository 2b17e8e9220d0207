#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ladderseg/tensor.hpp"

// Low-level kernels. Row-major everywhere; images are NHWC. All float loops
// are written in saxpy form (independent accumulators per output lane) so
// they vectorize without -ffast-math and stay bit-deterministic.

namespace ladderseg::nn {

// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
    for (int64_t i = 0; i < M; ++i) {
        T* c = C + i * N;
        if (!accumulate) std::fill(c, c + N, T(0));
        const T* a = A + i * K;
        int64_t k = 0;
        for (; k + 4 <= K; k += 4) {
            const T a0 = a[k], a1 = a[k + 1], a2 = a[k + 2], a3 = a[k + 3];
            const T* b0 = B + k * N;
            const T* b1 = b0 + N;
            const T* b2 = b1 + N;
            const T* b3 = b2 + N;
            for (int64_t j = 0; j < N; ++j)
                c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; k < K; ++k) {
            const T ak = a[k];
            const T* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += ak * b[j];
        }
    }
}

// C[M,N] += A^T * B with A stored [K,M], B stored [K,N]
template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
    for (int64_t k = 0; k < K; ++k) {
        const T* a = A + k * M;
        const T* b = B + k * N;
        for (int64_t i = 0; i < M; ++i) {
            const T aik = a[i];
            if (aik == T(0)) continue;
            T* c = C + i * N;
            for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B^T with B stored [N,K] (dot-product form; K is small
// wherever this is used, e.g. attention head dims)
template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            int64_t k = 0;
            for (; k + 4 <= K; k += 4) {
                s0 += a[k] * b[k];
                s1 += a[k + 1] * b[k + 1];
                s2 += a[k + 2] * b[k + 2];
                s3 += a[k + 3] * b[k + 3];
            }
            T s = ((s0 + s1) + (s2 + s3));
            for (; k < K; ++k) s += a[k] * b[k];
            c[j] = accumulate ? c[j] + s : s;
        }
    }
}

template <typename T>
void transpose(int64_t rows, int64_t cols, const T* src, T* dst) {
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// im2col for one NHWC image: cols[Ho*Wo, kh*kw*C]
template <typename T>
void im2col(const T* x, int64_t H, int64_t W, int64_t C, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* cols) {
    for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
            T* row = cols + (oy * Wo + ox) * (kh * kw * C);
            for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t iy = oy * stride - pad + ky;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t ix = ox * stride - pad + kx;
                    T* dst = row + (ky * kw + kx) * C;
                    if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                        std::fill(dst, dst + C, T(0));
                    } else {
                        std::memcpy(dst, x + (iy * W + ix) * C, sizeof(T) * static_cast<size_t>(C));
                    }
                }
            }
        }
    }
}

// scatter-add of column gradients back onto the NHWC image
template <typename T>
void col2im_add(const T* cols, int64_t H, int64_t W, int64_t C, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* dx) {
    for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox) {
            const T* row = cols + (oy * Wo + ox) * (kh * kw * C);
            for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    const T* src = row + (ky * kw + kx) * C;
                    T* dst = dx + (iy * W + ix) * C;
                    for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

template <typename T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
    return cdf + x * pdf;
}

// in-place softmax over each row of [rows, cols]
template <typename T>
void softmax_rows(T* x, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        T* r = x + i * cols;
        T m = r[0];
        for (int64_t j = 1; j < cols; ++j) m = std::max(m, r[j]);
        T sum = 0;
        for (int64_t j = 0; j < cols; ++j) {
            r[j] = std::exp(r[j] - m);
            sum += r[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < cols; ++j) r[j] *= inv;
    }
}

}  // namespace ladderseg::nn
