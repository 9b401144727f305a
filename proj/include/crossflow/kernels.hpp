#pragma once

#include <vector>

#include "crossflow/tensor.hpp"

namespace crossflow {

enum class Padding { Same, Valid };

// Convolution here is cross-correlation (no kernel flip), stride fixed at 1.
// Same padding is symmetric zero padding with the extra row/column on the
// high side when the kernel dimension is even.

namespace detail {

inline void conv_pad(Padding pad, int kh, int kw, int& pad_h, int& pad_w) {
    if (pad == Padding::Same) {
        pad_h = (kh - 1) / 2;
        pad_w = (kw - 1) / 2;
    } else {
        pad_h = 0;
        pad_w = 0;
    }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, Padding pad) {
    CF_CHECK(input.rank() == 3, "conv2d: input must be [C,H,W]");
    CF_CHECK(kernels.rank() == 4, "conv2d: kernels must be [Cout,Cin,kh,kw]");
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    CF_CHECK(kernels.dim(1) == c_in, "conv2d: kernel Cin " + std::to_string(kernels.dim(1)) +
                                         " != input channels " + std::to_string(c_in));
    CF_CHECK(bias.rank() == 1 && bias.dim(0) == c_out, "conv2d: bias must be [Cout]");

    int pad_h, pad_w;
    detail::conv_pad(pad, kh, kw, pad_h, pad_w);
    const int out_h = (pad == Padding::Same) ? h : h - kh + 1;
    const int out_w = (pad == Padding::Same) ? w : w - kw + 1;
    CF_CHECK(out_h >= 1 && out_w >= 1, "conv2d: kernel larger than padded input");

    Tensor out({c_out, out_h, out_w});
    for (int o = 0; o < c_out; ++o) {
        for (int p = 0; p < out_h; ++p) {
            for (int q = 0; q < out_w; ++q) {
                double acc = bias.at(o);
                for (int c = 0; c < c_in; ++c) {
                    for (int i = 0; i < kh; ++i) {
                        const int y = p + i - pad_h;
                        if (y < 0 || y >= h) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int x = q + j - pad_w;
                            if (x < 0 || x >= w) continue;
                            acc += input.at(c, y, x) * kernels.at(o, c, i, j);
                        }
                    }
                }
                out.at(o, p, q) = acc;
            }
        }
    }
    return out;
}

inline Tensor conv2d_grad_input(const Tensor& gout, const Tensor& kernels, Padding pad, int h, int w) {
    const int c_in = kernels.dim(1), c_out = kernels.dim(0);
    const int kh = kernels.dim(2), kw = kernels.dim(3);
    int pad_h, pad_w;
    detail::conv_pad(pad, kh, kw, pad_h, pad_w);

    Tensor gin({c_in, h, w});
    for (int o = 0; o < c_out; ++o) {
        for (int p = 0; p < gout.dim(1); ++p) {
            for (int q = 0; q < gout.dim(2); ++q) {
                const double g = gout.at(o, p, q);
                for (int c = 0; c < c_in; ++c) {
                    for (int i = 0; i < kh; ++i) {
                        const int y = p + i - pad_h;
                        if (y < 0 || y >= h) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int x = q + j - pad_w;
                            if (x < 0 || x >= w) continue;
                            gin.at(c, y, x) += g * kernels.at(o, c, i, j);
                        }
                    }
                }
            }
        }
    }
    return gin;
}

inline Tensor conv2d_grad_kernels(const Tensor& gout, const Tensor& input, Padding pad,
                                  int kh, int kw) {
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = gout.dim(0);
    int pad_h, pad_w;
    detail::conv_pad(pad, kh, kw, pad_h, pad_w);

    Tensor gk({c_out, c_in, kh, kw});
    for (int o = 0; o < c_out; ++o) {
        for (int p = 0; p < gout.dim(1); ++p) {
            for (int q = 0; q < gout.dim(2); ++q) {
                const double g = gout.at(o, p, q);
                for (int c = 0; c < c_in; ++c) {
                    for (int i = 0; i < kh; ++i) {
                        const int y = p + i - pad_h;
                        if (y < 0 || y >= h) continue;
                        for (int j = 0; j < kw; ++j) {
                            const int x = q + j - pad_w;
                            if (x < 0 || x >= w) continue;
                            gk.at(o, c, i, j) += g * input.at(c, y, x);
                        }
                    }
                }
            }
        }
    }
    return gk;
}

inline Tensor conv2d_grad_bias(const Tensor& gout) {
    Tensor gb({gout.dim(0)});
    for (int o = 0; o < gout.dim(0); ++o) {
        double acc = 0.0;
        for (int p = 0; p < gout.dim(1); ++p)
            for (int q = 0; q < gout.dim(2); ++q) acc += gout.at(o, p, q);
        gb.at(o) = acc;
    }
    return gb;
}

// Full transposed convolution, stride 1: [Cin,h,w] grows to [Cout,h+kh-1,w+kw-1].
inline Tensor deconv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
    CF_CHECK(input.rank() == 3, "deconv2d: input must be [C,h,w]");
    CF_CHECK(kernels.rank() == 4, "deconv2d: kernels must be [Cout,Cin,kh,kw]");
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    CF_CHECK(kernels.dim(1) == c_in, "deconv2d: kernel Cin " + std::to_string(kernels.dim(1)) +
                                         " != input channels " + std::to_string(c_in));
    CF_CHECK(bias.rank() == 1 && bias.dim(0) == c_out, "deconv2d: bias must be [Cout]");

    Tensor out({c_out, h + kh - 1, w + kw - 1});
    for (int o = 0; o < c_out; ++o)
        for (std::size_t i = 0; i < static_cast<std::size_t>(out.dim(1)) * out.dim(2); ++i)
            out.data[static_cast<std::size_t>(o) * out.dim(1) * out.dim(2) + i] = bias.at(o);

    for (int c = 0; c < c_in; ++c) {
        for (int u = 0; u < h; ++u) {
            for (int v = 0; v < w; ++v) {
                const double x = input.at(c, u, v);
                if (x == 0.0) continue;
                for (int o = 0; o < c_out; ++o)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j)
                            out.at(o, u + i, v + j) += x * kernels.at(o, c, i, j);
            }
        }
    }
    return out;
}

inline Tensor deconv2d_grad_input(const Tensor& gout, const Tensor& kernels, int h, int w) {
    const int c_in = kernels.dim(1), c_out = kernels.dim(0);
    const int kh = kernels.dim(2), kw = kernels.dim(3);
    Tensor gin({c_in, h, w});
    for (int c = 0; c < c_in; ++c)
        for (int u = 0; u < h; ++u)
            for (int v = 0; v < w; ++v) {
                double acc = 0.0;
                for (int o = 0; o < c_out; ++o)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j) acc += gout.at(o, u + i, v + j) * kernels.at(o, c, i, j);
                gin.at(c, u, v) = acc;
            }
    return gin;
}

inline Tensor deconv2d_grad_kernels(const Tensor& gout, const Tensor& input, int kh, int kw) {
    const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int c_out = gout.dim(0);
    Tensor gk({c_out, c_in, kh, kw});
    for (int c = 0; c < c_in; ++c)
        for (int u = 0; u < h; ++u)
            for (int v = 0; v < w; ++v) {
                const double x = input.at(c, u, v);
                if (x == 0.0) continue;
                for (int o = 0; o < c_out; ++o)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j) gk.at(o, c, i, j) += x * gout.at(o, u + i, v + j);
            }
    return gk;
}

inline Tensor deconv2d_grad_bias(const Tensor& gout) { return conv2d_grad_bias(gout); }

struct PoolResult {
    Tensor output;
    // Flat index into the input, per output element, for gradient routing.
    std::vector<std::size_t> argmax;
};

inline PoolResult maxpool2x2(const Tensor& input) {
    CF_CHECK(input.rank() == 3, "maxpool2x2: input must be [C,H,W]");
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    CF_CHECK(h % 2 == 0 && w % 2 == 0, "maxpool2x2: H and W must be even, got " + input.shape.str());

    PoolResult res{Tensor({c, h / 2, w / 2}), {}};
    res.argmax.resize(res.output.numel());
    std::size_t out_i = 0;
    for (int ch = 0; ch < c; ++ch) {
        for (int p = 0; p < h / 2; ++p) {
            for (int q = 0; q < w / 2; ++q) {
                double best = input.at(ch, 2 * p, 2 * q);
                std::size_t best_idx = (static_cast<std::size_t>(ch) * h + 2 * p) * w + 2 * q;
                for (int di = 0; di < 2; ++di)
                    for (int dj = 0; dj < 2; ++dj) {
                        const double v = input.at(ch, 2 * p + di, 2 * q + dj);
                        if (v > best) {
                            best = v;
                            best_idx = (static_cast<std::size_t>(ch) * h + 2 * p + di) * w + 2 * q + dj;
                        }
                    }
                res.output.at(ch, p, q) = best;
                res.argmax[out_i++] = best_idx;
            }
        }
    }
    return res;
}

inline Tensor maxpool2x2_grad(const Tensor& gout, const std::vector<std::size_t>& argmax,
                              const Shape& input_shape) {
    Tensor gin(input_shape);
    for (std::size_t i = 0; i < gout.numel(); ++i) gin.data[argmax[i]] += gout.data[i];
    return gin;
}

// y = W x + b with W [m,n], x [n], b [m].
inline Tensor affine(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    CF_CHECK(input.rank() == 1, "affine: input must be rank 1");
    CF_CHECK(weights.rank() == 2, "affine: weights must be [m,n]");
    const int n = input.dim(0), m = weights.dim(0);
    CF_CHECK(weights.dim(1) == n, "affine: weights columns " + std::to_string(weights.dim(1)) +
                                      " != input size " + std::to_string(n));
    CF_CHECK(bias.rank() == 1 && bias.dim(0) == m, "affine: bias must be [m]");

    Tensor out({m});
    for (int r = 0; r < m; ++r) {
        double acc = bias.at(r);
        const double* wr = weights.data.data() + static_cast<std::size_t>(r) * n;
        for (int cidx = 0; cidx < n; ++cidx) acc += wr[cidx] * input.at(cidx);
        out.at(r) = acc;
    }
    return out;
}

// Batched variant over a leading batch axis: input [N,n] -> [N,m].
inline Tensor affine_batched(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    CF_CHECK(input.rank() == 2, "affine_batched: input must be [N,n]");
    const int batch = input.dim(0);
    Tensor out({batch, weights.dim(0)});
    for (int bi = 0; bi < batch; ++bi) {
        Tensor row({input.dim(1)});
        std::copy(input.data.begin() + static_cast<std::size_t>(bi) * input.dim(1),
                  input.data.begin() + static_cast<std::size_t>(bi + 1) * input.dim(1),
                  row.data.begin());
        Tensor r = affine(row, weights, bias);
        std::copy(r.data.begin(), r.data.end(),
                  out.data.begin() + static_cast<std::size_t>(bi) * weights.dim(0));
    }
    return out;
}

inline Tensor affine_grad_input(const Tensor& gout, const Tensor& weights) {
    const int m = weights.dim(0), n = weights.dim(1);
    Tensor gin({n});
    for (int r = 0; r < m; ++r) {
        const double g = gout.at(r);
        const double* wr = weights.data.data() + static_cast<std::size_t>(r) * n;
        for (int cidx = 0; cidx < n; ++cidx) gin.at(cidx) += g * wr[cidx];
    }
    return gin;
}

inline Tensor affine_grad_weights(const Tensor& gout, const Tensor& input) {
    const int m = gout.dim(0), n = input.dim(0);
    Tensor gw({m, n});
    for (int r = 0; r < m; ++r) {
        const double g = gout.at(r);
        double* row = gw.data.data() + static_cast<std::size_t>(r) * n;
        for (int cidx = 0; cidx < n; ++cidx) row[cidx] = g * input.at(cidx);
    }
    return gw;
}

}  // namespace crossflow
