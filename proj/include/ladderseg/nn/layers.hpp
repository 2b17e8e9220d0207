#pragma once

#include <string>
#include <vector>

#include "ladderseg/nn/ops.hpp"
#include "ladderseg/tensor.hpp"

namespace ladderseg::nn {

// A named tensor with optional gradient. Frozen params never get a grad
// buffer allocated; buffers (BN running stats) mutate outside the optimizer.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = false;
    bool is_buffer = false;

    void set_trainable(bool t) {
        trainable = t;
        if (!t) grad = Tensor<T>();
    }
    void alloc_grad() {
        if (trainable && !is_buffer && grad.shape != value.shape) grad = Tensor<T>(value.shape);
    }
    bool has_grad() const { return !grad.empty(); }
    void add_grad(int64_t i, T v) {
        if (!grad.empty()) grad.data[static_cast<size_t>(i)] += v;
    }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
struct Linear {
    Param<T> w;  // [in, out]
    Param<T> b;  // [out]
    bool has_bias = true;
    int64_t in = 0, out = 0;

    void init(int64_t in_dim, int64_t out_dim, bool bias, Rng& rng, double w_std) {
        in = in_dim;
        out = out_dim;
        has_bias = bias;
        w.value = Tensor<T>({in, out});
        w.value.fill_normal(rng, 0.0, w_std);
        if (has_bias) b.value = Tensor<T>({out});
    }

    void collect(const std::string& prefix, ParamList<T>& out_list) {
        w.name = prefix + ".weight";
        out_list.push_back(&w);
        if (has_bias) {
            b.name = prefix + ".bias";
            out_list.push_back(&b);
        }
    }

    // x rows [M, in] -> [M, out]
    Tensor<T> forward(const Tensor<T>& x) {
        x_cache = x;
        const int64_t M = x.numel() / in;
        Shape out_shape = x.shape;
        out_shape.back() = out;
        Tensor<T> y(out_shape);
        gemm_nn(M, out, in, x.ptr(), w.value.ptr(), y.ptr());
        if (has_bias)
            for (int64_t i = 0; i < M; ++i) {
                T* row = y.ptr() + i * out;
                for (int64_t j = 0; j < out; ++j) row[j] += b.value.data[j];
            }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int64_t M = dy.numel() / out;
        if (w.has_grad()) gemm_tn(in, out, M, x_cache.ptr(), dy.ptr(), w.grad.ptr());
        if (has_bias && b.has_grad())
            for (int64_t i = 0; i < M; ++i) {
                const T* row = dy.ptr() + i * out;
                for (int64_t j = 0; j < out; ++j) b.grad.data[j] += row[j];
            }
        Tensor<T> dx(x_cache.shape);
        scratch_wt.resize(static_cast<size_t>(in * out));
        transpose(in, out, w.value.ptr(), scratch_wt.data());
        gemm_nn(M, in, out, dy.ptr(), scratch_wt.data(), dx.ptr());
        return dx;
    }

    Tensor<T> x_cache;
    std::vector<T> scratch_wt;
};

template <typename T>
struct Conv2d {
    Param<T> w;  // [kh, kw, Cin, Cout]
    Param<T> b;  // [Cout]
    int64_t kh = 0, kw = 0, cin = 0, cout = 0, stride = 1, pad = 0;
    bool has_bias = false;
    bool input_grad = true;  // stems sit on the image; skip dx there

    void init(int64_t kh_, int64_t kw_, int64_t cin_, int64_t cout_, int64_t stride_, int64_t pad_,
              bool bias, Rng& rng) {
        kh = kh_; kw = kw_; cin = cin_; cout = cout_; stride = stride_; pad = pad_;
        has_bias = bias;
        w.value = Tensor<T>({kh, kw, cin, cout});
        const double fan_in = static_cast<double>(kh * kw * cin);
        w.value.fill_normal(rng, 0.0, std::sqrt(2.0 / fan_in));
        if (has_bias) b.value = Tensor<T>({cout});
    }

    void collect(const std::string& prefix, ParamList<T>& out_list) {
        w.name = prefix + ".weight";
        out_list.push_back(&w);
        if (has_bias) {
            b.name = prefix + ".bias";
            out_list.push_back(&b);
        }
    }

    int64_t out_dim(int64_t d) const { return (d + 2 * pad - (kh)) / stride + 1; }

    // x [B,H,W,Cin] -> [B,Ho,Wo,Cout]
    Tensor<T> forward(const Tensor<T>& x) {
        x_cache = x;
        const int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2);
        const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
        const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
        const int64_t K = kh * kw * cin;
        Tensor<T> y({B, Ho, Wo, cout});
        cols_.resize(static_cast<size_t>(Ho * Wo * K));
        for (int64_t bi = 0; bi < B; ++bi) {
            const T* xi = x.ptr() + bi * H * W * cin;
            im2col(xi, H, W, cin, kh, kw, stride, pad, Ho, Wo, cols_.data());
            T* yi = y.ptr() + bi * Ho * Wo * cout;
            gemm_nn(Ho * Wo, cout, K, cols_.data(), w.value.ptr(), yi);
            if (has_bias)
                for (int64_t i = 0; i < Ho * Wo; ++i)
                    for (int64_t j = 0; j < cout; ++j) yi[i * cout + j] += b.value.data[j];
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int64_t B = x_cache.dim(0), H = x_cache.dim(1), W = x_cache.dim(2);
        const int64_t Ho = dy.dim(1), Wo = dy.dim(2);
        const int64_t K = kh * kw * cin;
        Tensor<T> dx;
        if (input_grad) dx = Tensor<T>({B, H, W, cin});
        cols_.resize(static_cast<size_t>(Ho * Wo * K));
        if (input_grad) {
            dcols_.resize(static_cast<size_t>(Ho * Wo * K));
            wt_.resize(static_cast<size_t>(K * cout));
            transpose(K, cout, w.value.ptr(), wt_.data());
        }
        for (int64_t bi = 0; bi < B; ++bi) {
            const T* dyi = dy.ptr() + bi * Ho * Wo * cout;
            if (w.has_grad()) {
                const T* xi = x_cache.ptr() + bi * H * W * cin;
                im2col(xi, H, W, cin, kh, kw, stride, pad, Ho, Wo, cols_.data());
                gemm_tn(K, cout, Ho * Wo, cols_.data(), dyi, w.grad.ptr());
            }
            if (has_bias && b.has_grad())
                for (int64_t i = 0; i < Ho * Wo; ++i)
                    for (int64_t j = 0; j < cout; ++j) b.grad.data[j] += dyi[i * cout + j];
            if (input_grad) {
                gemm_nn(Ho * Wo, K, cout, dyi, wt_.data(), dcols_.data());
                col2im_add(dcols_.data(), H, W, cin, kh, kw, stride, pad, Ho, Wo,
                           dx.ptr() + bi * H * W * cin);
            }
        }
        return dx;
    }

    Tensor<T> x_cache;
    std::vector<T> cols_, dcols_, wt_;
};

// Transposed convolution, kernel 2 stride 2 (the only shape the decoder
// uses;每 output pixel receives exactly one contribution).
template <typename T>
struct ConvT2x2 {
    Param<T> w;  // [Cin, 2, 2, Cout]
    Param<T> b;  // [Cout]
    int64_t cin = 0, cout = 0;

    void init(int64_t cin_, int64_t cout_, Rng& rng) {
        cin = cin_;
        cout = cout_;
        w.value = Tensor<T>({cin, 2, 2, cout});
        const double fan_in = static_cast<double>(cin);
        w.value.fill_normal(rng, 0.0, std::sqrt(2.0 / fan_in));
        b.value = Tensor<T>({cout});
    }

    void collect(const std::string& prefix, ParamList<T>& out_list) {
        w.name = prefix + ".weight";
        b.name = prefix + ".bias";
        out_list.push_back(&w);
        out_list.push_back(&b);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        x_cache = x;
        const int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2);
        Tensor<T> y({B, 2 * H, 2 * W, cout});
        g_.resize(static_cast<size_t>(H * W * 4 * cout));
        for (int64_t bi = 0; bi < B; ++bi) {
            const T* xi = x.ptr() + bi * H * W * cin;
            gemm_nn(H * W, 4 * cout, cin, xi, w.value.ptr(), g_.data());
            T* yi = y.ptr() + bi * 4 * H * W * cout;
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    const T* src = g_.data() + (i * W + j) * 4 * cout;
                    for (int64_t dy_ = 0; dy_ < 2; ++dy_)
                        for (int64_t dx_ = 0; dx_ < 2; ++dx_) {
                            T* dst = yi + ((2 * i + dy_) * 2 * W + (2 * j + dx_)) * cout;
                            const T* s = src + (dy_ * 2 + dx_) * cout;
                            for (int64_t c = 0; c < cout; ++c) dst[c] = s[c] + b.value.data[c];
                        }
                }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int64_t B = x_cache.dim(0), H = x_cache.dim(1), W = x_cache.dim(2);
        Tensor<T> dx({B, H, W, cin});
        g_.resize(static_cast<size_t>(H * W * 4 * cout));
        wt_.resize(static_cast<size_t>(cin * 4 * cout));
        transpose(cin, 4 * cout, w.value.ptr(), wt_.data());
        for (int64_t bi = 0; bi < B; ++bi) {
            const T* dyi = dy.ptr() + bi * 4 * H * W * cout;
            // gather dy into the [H*W, 4*cout] layout of the forward GEMM
            for (int64_t i = 0; i < H; ++i)
                for (int64_t j = 0; j < W; ++j) {
                    T* dst = g_.data() + (i * W + j) * 4 * cout;
                    for (int64_t dy_ = 0; dy_ < 2; ++dy_)
                        for (int64_t dx_ = 0; dx_ < 2; ++dx_)
                            std::memcpy(dst + (dy_ * 2 + dx_) * cout,
                                        dyi + ((2 * i + dy_) * 2 * W + (2 * j + dx_)) * cout,
                                        sizeof(T) * static_cast<size_t>(cout));
                }
            if (w.has_grad()) {
                const T* xi = x_cache.ptr() + bi * H * W * cin;
                gemm_tn(cin, 4 * cout, H * W, xi, g_.data(), w.grad.ptr());
            }
            if (b.has_grad())
                for (int64_t i = 0; i < 4 * H * W; ++i)
                    for (int64_t c = 0; c < cout; ++c) b.grad.data[c] += dyi[i * cout + c];
            gemm_nn(H * W, cin, 4 * cout, g_.data(), wt_.data(), dx.ptr() + bi * H * W * cin);
        }
        return dx;
    }

    Tensor<T> x_cache;
    std::vector<T> g_, wt_;
};

template <typename T>
struct BatchNorm2d {
    Param<T> gamma, beta;
    Param<T> run_mean, run_var;  // buffers
    int64_t channels = 0;
    double momentum = 0.1;
    double eps = 1e-5;
    bool freeze_stats = false;

    void init(int64_t c) {
        channels = c;
        gamma.value = Tensor<T>({c}, T(1));
        beta.value = Tensor<T>({c});
        run_mean.value = Tensor<T>({c});
        run_var.value = Tensor<T>({c}, T(1));
        run_mean.is_buffer = run_var.is_buffer = true;
    }

    void collect(const std::string& prefix, ParamList<T>& out_list) {
        gamma.name = prefix + ".gamma";
        beta.name = prefix + ".beta";
        run_mean.name = prefix + ".running_mean";
        run_var.name = prefix + ".running_var";
        out_list.push_back(&gamma);
        out_list.push_back(&beta);
        out_list.push_back(&run_mean);
        out_list.push_back(&run_var);
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        const int64_t C = channels;
        const int64_t rows = x.numel() / C;
        used_batch_stats_ = training && !freeze_stats;
        mean_.assign(static_cast<size_t>(C), 0.0);
        invstd_.assign(static_cast<size_t>(C), 0.0);
        if (used_batch_stats_) {
            std::vector<double> sum(C, 0.0), sumsq(C, 0.0);
            for (int64_t i = 0; i < rows; ++i) {
                const T* r = x.ptr() + i * C;
                for (int64_t c = 0; c < C; ++c) {
                    sum[c] += static_cast<double>(r[c]);
                    sumsq[c] += static_cast<double>(r[c]) * static_cast<double>(r[c]);
                }
            }
            for (int64_t c = 0; c < C; ++c) {
                const double m = sum[c] / static_cast<double>(rows);
                const double var = std::max(0.0, sumsq[c] / static_cast<double>(rows) - m * m);
                mean_[c] = m;
                invstd_[c] = 1.0 / std::sqrt(var + eps);
                // torch convention: running_var tracks the unbiased estimate
                const double unbiased = rows > 1 ? var * rows / (rows - 1.0) : var;
                run_mean.value.data[c] =
                    static_cast<T>((1.0 - momentum) * run_mean.value.data[c] + momentum * m);
                run_var.value.data[c] =
                    static_cast<T>((1.0 - momentum) * run_var.value.data[c] + momentum * unbiased);
            }
        } else {
            for (int64_t c = 0; c < C; ++c) {
                mean_[c] = static_cast<double>(run_mean.value.data[c]);
                invstd_[c] = 1.0 / std::sqrt(static_cast<double>(run_var.value.data[c]) + eps);
            }
        }
        xhat_ = Tensor<T>(x.shape);
        Tensor<T> y(x.shape);
        for (int64_t i = 0; i < rows; ++i) {
            const T* r = x.ptr() + i * C;
            T* h = xhat_.ptr() + i * C;
            T* o = y.ptr() + i * C;
            for (int64_t c = 0; c < C; ++c) {
                h[c] = static_cast<T>((static_cast<double>(r[c]) - mean_[c]) * invstd_[c]);
                o[c] = gamma.value.data[c] * h[c] + beta.value.data[c];
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int64_t C = channels;
        const int64_t rows = dy.numel() / C;
        std::vector<double> dg(C, 0.0), db(C, 0.0);
        for (int64_t i = 0; i < rows; ++i) {
            const T* d = dy.ptr() + i * C;
            const T* h = xhat_.ptr() + i * C;
            for (int64_t c = 0; c < C; ++c) {
                dg[c] += static_cast<double>(d[c]) * static_cast<double>(h[c]);
                db[c] += static_cast<double>(d[c]);
            }
        }
        if (gamma.has_grad())
            for (int64_t c = 0; c < C; ++c) gamma.grad.data[c] += static_cast<T>(dg[c]);
        if (beta.has_grad())
            for (int64_t c = 0; c < C; ++c) beta.grad.data[c] += static_cast<T>(db[c]);

        Tensor<T> dx(dy.shape);
        if (used_batch_stats_) {
            const double n = static_cast<double>(rows);
            for (int64_t i = 0; i < rows; ++i) {
                const T* d = dy.ptr() + i * C;
                const T* h = xhat_.ptr() + i * C;
                T* o = dx.ptr() + i * C;
                for (int64_t c = 0; c < C; ++c) {
                    const double t = static_cast<double>(d[c]) - db[c] / n -
                                     static_cast<double>(h[c]) * dg[c] / n;
                    o[c] = static_cast<T>(static_cast<double>(gamma.value.data[c]) * invstd_[c] * t);
                }
            }
        } else {
            for (int64_t i = 0; i < rows; ++i) {
                const T* d = dy.ptr() + i * C;
                T* o = dx.ptr() + i * C;
                for (int64_t c = 0; c < C; ++c)
                    o[c] = static_cast<T>(static_cast<double>(gamma.value.data[c]) * invstd_[c] *
                                          static_cast<double>(d[c]));
            }
        }
        return dx;
    }

    Tensor<T> xhat_;
    std::vector<double> mean_, invstd_;
    bool used_batch_stats_ = false;
};

// LayerNorm over the trailing dimension; covers both token LN ([M,E]) and
// channel-wise LN on NHWC feature maps.
template <typename T>
struct LayerNorm {
    Param<T> gamma, beta;
    int64_t dim = 0;
    double eps = 1e-6;

    void init(int64_t d) {
        dim = d;
        gamma.value = Tensor<T>({d}, T(1));
        beta.value = Tensor<T>({d});
    }

    void collect(const std::string& prefix, ParamList<T>& out_list) {
        gamma.name = prefix + ".gamma";
        beta.name = prefix + ".beta";
        out_list.push_back(&gamma);
        out_list.push_back(&beta);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        const int64_t rows = x.numel() / dim;
        xhat_ = Tensor<T>(x.shape);
        invstd_.assign(static_cast<size_t>(rows), 0.0);
        Tensor<T> y(x.shape);
        for (int64_t i = 0; i < rows; ++i) {
            const T* r = x.ptr() + i * dim;
            double sum = 0, sumsq = 0;
            for (int64_t c = 0; c < dim; ++c) {
                sum += static_cast<double>(r[c]);
                sumsq += static_cast<double>(r[c]) * static_cast<double>(r[c]);
            }
            const double m = sum / static_cast<double>(dim);
            const double var = std::max(0.0, sumsq / static_cast<double>(dim) - m * m);
            const double inv = 1.0 / std::sqrt(var + eps);
            invstd_[i] = inv;
            T* h = xhat_.ptr() + i * dim;
            T* o = y.ptr() + i * dim;
            for (int64_t c = 0; c < dim; ++c) {
                h[c] = static_cast<T>((static_cast<double>(r[c]) - m) * inv);
                o[c] = gamma.value.data[c] * h[c] + beta.value.data[c];
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const int64_t rows = dy.numel() / dim;
        Tensor<T> dx(dy.shape);
        for (int64_t i = 0; i < rows; ++i) {
            const T* d = dy.ptr() + i * dim;
            const T* h = xhat_.ptr() + i * dim;
            double sum_dg = 0, sum_dgh = 0;
            for (int64_t c = 0; c < dim; ++c) {
                const double g = static_cast<double>(d[c]) * static_cast<double>(gamma.value.data[c]);
                sum_dg += g;
                sum_dgh += g * static_cast<double>(h[c]);
            }
            const double n = static_cast<double>(dim);
            T* o = dx.ptr() + i * dim;
            for (int64_t c = 0; c < dim; ++c) {
                const double g = static_cast<double>(d[c]) * static_cast<double>(gamma.value.data[c]);
                o[c] = static_cast<T>(invstd_[i] *
                                      (g - sum_dg / n - static_cast<double>(h[c]) * sum_dgh / n));
            }
            if (gamma.has_grad())
                for (int64_t c = 0; c < dim; ++c)
                    gamma.grad.data[c] += d[c] * h[c];
            if (beta.has_grad())
                for (int64_t c = 0; c < dim; ++c) beta.grad.data[c] += d[c];
        }
        return dx;
    }

    Tensor<T> xhat_;
    std::vector<double> invstd_;
};

template <typename T>
struct ReLU {
    Tensor<T> forward(const Tensor<T>& x) {
        x_cache = x;
        Tensor<T> y(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.shape);
        for (int64_t i = 0; i < dy.numel(); ++i)
            dx.data[i] = x_cache.data[i] > T(0) ? dy.data[i] : T(0);
        return dx;
    }
    Tensor<T> x_cache;
};

template <typename T>
struct Gelu {
    Tensor<T> forward(const Tensor<T>& x) {
        x_cache = x;
        Tensor<T> y(x.shape);
        for (int64_t i = 0; i < x.numel(); ++i) y.data[i] = gelu(x.data[i]);
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.shape);
        for (int64_t i = 0; i < dy.numel(); ++i) dx.data[i] = dy.data[i] * gelu_grad(x_cache.data[i]);
        return dx;
    }
    Tensor<T> x_cache;
};

// 3x3 stride-2 pad-1 max pool (the ResNet stem pool)
template <typename T>
struct MaxPool3x3s2 {
    Tensor<T> forward(const Tensor<T>& x) {
        const int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
        const int64_t Ho = (H - 1) / 2 + 1, Wo = (W - 1) / 2 + 1;
        in_shape_ = x.shape;
        Tensor<T> y({B, Ho, Wo, C});
        argmax_.assign(static_cast<size_t>(y.numel()), 0);
        int64_t oi = 0;
        for (int64_t bi = 0; bi < B; ++bi) {
            const T* xb = x.ptr() + bi * H * W * C;
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox)
                    for (int64_t c = 0; c < C; ++c, ++oi) {
                        T best = -std::numeric_limits<T>::infinity();
                        int64_t best_idx = -1;
                        for (int64_t ky = -1; ky <= 1; ++ky) {
                            const int64_t iy = oy * 2 + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t kx = -1; kx <= 1; ++kx) {
                                const int64_t ix = ox * 2 + kx;
                                if (ix < 0 || ix >= W) continue;
                                const T v = xb[(iy * W + ix) * C + c];
                                if (v > best) {
                                    best = v;
                                    best_idx = bi * H * W * C + (iy * W + ix) * C + c;
                                }
                            }
                        }
                        y.data[static_cast<size_t>(oi)] = best;
                        argmax_[static_cast<size_t>(oi)] = best_idx;
                    }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(in_shape_);
        for (int64_t i = 0; i < dy.numel(); ++i)
            dx.data[static_cast<size_t>(argmax_[static_cast<size_t>(i)])] += dy.data[static_cast<size_t>(i)];
        return dx;
    }

    Shape in_shape_;
    std::vector<int64_t> argmax_;
};

// Multi-head self-attention over token grids [B, N, E].
template <typename T>
struct Attention {
    Linear<T> qkv, proj;
    int64_t heads = 0, embed = 0, head_dim = 0;

    void init(int64_t embed_dim, int64_t num_heads, Rng& rng) {
        embed = embed_dim;
        heads = num_heads;
        head_dim = embed_dim / num_heads;
        qkv.init(embed, 3 * embed, true, rng, 0.02);
        proj.init(embed, embed, true, rng, 0.02);
    }

    void collect(const std::string& prefix, ParamList<T>& out_list) {
        qkv.collect(prefix + ".qkv", out_list);
        proj.collect(prefix + ".proj", out_list);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        const int64_t B = x.dim(0), N = x.dim(1);
        Tensor<T> qkv_out = qkv.forward(x);  // [B, N, 3E]
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
        q_ = Tensor<T>({B, heads, N, head_dim});
        k_ = Tensor<T>({B, heads, N, head_dim});
        v_ = Tensor<T>({B, heads, N, head_dim});
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t n = 0; n < N; ++n) {
                const T* row = qkv_out.ptr() + (bi * N + n) * 3 * embed;
                for (int64_t h = 0; h < heads; ++h) {
                    std::memcpy(q_.ptr() + ((bi * heads + h) * N + n) * head_dim,
                                row + h * head_dim, sizeof(T) * static_cast<size_t>(head_dim));
                    std::memcpy(k_.ptr() + ((bi * heads + h) * N + n) * head_dim,
                                row + embed + h * head_dim, sizeof(T) * static_cast<size_t>(head_dim));
                    std::memcpy(v_.ptr() + ((bi * heads + h) * N + n) * head_dim,
                                row + 2 * embed + h * head_dim,
                                sizeof(T) * static_cast<size_t>(head_dim));
                }
            }
        p_ = Tensor<T>({B, heads, N, N});
        Tensor<T> ctx({B, N, embed});
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t h = 0; h < heads; ++h) {
                const T* Q = q_.ptr() + (bi * heads + h) * N * head_dim;
                const T* K = k_.ptr() + (bi * heads + h) * N * head_dim;
                const T* V = v_.ptr() + (bi * heads + h) * N * head_dim;
                T* P = p_.ptr() + (bi * heads + h) * N * N;
                gemm_nt(N, N, head_dim, Q, K, P);
                for (int64_t i = 0; i < N * N; ++i) P[i] *= scale;
                softmax_rows(P, N, N);
                scratch_.resize(static_cast<size_t>(N * head_dim));
                gemm_nn(N, head_dim, N, P, V, scratch_.data());
                for (int64_t n = 0; n < N; ++n)
                    std::memcpy(ctx.ptr() + (bi * N + n) * embed + h * head_dim,
                                scratch_.data() + n * head_dim,
                                sizeof(T) * static_cast<size_t>(head_dim));
            }
        return proj.forward(ctx);
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dctx = proj.backward(dy);
        const int64_t B = dctx.dim(0), N = dctx.dim(1);
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
        Tensor<T> dqkv({B, N, 3 * embed});
        std::vector<T> dO(static_cast<size_t>(N * head_dim)), dP(static_cast<size_t>(N * N)),
            dS(static_cast<size_t>(N * N)), dQ(static_cast<size_t>(N * head_dim)),
            dK(static_cast<size_t>(N * head_dim)), dV(static_cast<size_t>(N * head_dim));
        for (int64_t bi = 0; bi < B; ++bi)
            for (int64_t h = 0; h < heads; ++h) {
                const T* Q = q_.ptr() + (bi * heads + h) * N * head_dim;
                const T* K = k_.ptr() + (bi * heads + h) * N * head_dim;
                const T* V = v_.ptr() + (bi * heads + h) * N * head_dim;
                const T* P = p_.ptr() + (bi * heads + h) * N * N;
                for (int64_t n = 0; n < N; ++n)
                    std::memcpy(dO.data() + n * head_dim,
                                dctx.ptr() + (bi * N + n) * embed + h * head_dim,
                                sizeof(T) * static_cast<size_t>(head_dim));
                // dV = P^T dO; dP = dO V^T
                std::fill(dV.begin(), dV.end(), T(0));
                gemm_tn(N, head_dim, N, P, dO.data(), dV.data());
                gemm_nt(N, N, head_dim, dO.data(), V, dP.data());
                // softmax rows: dS = P * (dP - rowsum(dP*P))
                for (int64_t i = 0; i < N; ++i) {
                    const T* p = P + i * N;
                    const T* dp = dP.data() + i * N;
                    T dot = 0;
                    for (int64_t j = 0; j < N; ++j) dot += p[j] * dp[j];
                    T* ds = dS.data() + i * N;
                    for (int64_t j = 0; j < N; ++j) ds[j] = p[j] * (dp[j] - dot) * scale;
                }
                gemm_nn(N, head_dim, N, dS.data(), K, dQ.data());
                std::fill(dK.begin(), dK.end(), T(0));
                gemm_tn(N, head_dim, N, dS.data(), Q, dK.data());
                for (int64_t n = 0; n < N; ++n) {
                    T* row = dqkv.ptr() + (bi * N + n) * 3 * embed;
                    std::memcpy(row + h * head_dim, dQ.data() + n * head_dim,
                                sizeof(T) * static_cast<size_t>(head_dim));
                    std::memcpy(row + embed + h * head_dim, dK.data() + n * head_dim,
                                sizeof(T) * static_cast<size_t>(head_dim));
                    std::memcpy(row + 2 * embed + h * head_dim, dV.data() + n * head_dim,
                                sizeof(T) * static_cast<size_t>(head_dim));
                }
            }
        return qkv.backward(dqkv);
    }

    Tensor<T> q_, k_, v_, p_;
    std::vector<T> scratch_;
};

}  // namespace ladderseg::nn
