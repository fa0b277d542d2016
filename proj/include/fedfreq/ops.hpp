// Differentiable layer primitives. Forward results are plain tensors; each op
// wires a backward closure that scatters the output gradient into whichever
// inputs require grad. Inner loops are laid out so the time axis is the
// contiguous one (axpy/dot style), which is what the optimizer vectorizes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "fedfreq/error.hpp"
#include "fedfreq/rng.hpp"
#include "fedfreq/tensor.hpp"

namespace fedfreq {

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) over [batch, ch_in, len].
// ---------------------------------------------------------------------------

inline Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int stride = 1, int padding = 0) {
    if (input.ndim() != 3) throw DimensionError("conv1d: input must be [batch, ch_in, len]");
    if (kernel.ndim() != 3) throw DimensionError("conv1d: kernel must be [ch_out, ch_in, k]");
    const int batch = input.dim(0), ch_in = input.dim(1), len = input.dim(2);
    const int ch_out = kernel.dim(0), k = kernel.dim(2);
    if (kernel.dim(1) != ch_in)
        throw DimensionError("conv1d: kernel ch_in " + std::to_string(kernel.dim(1)) +
                             " does not match input ch_in " + std::to_string(ch_in));
    if (bias.size() != ch_out) throw DimensionError("conv1d: bias size must equal ch_out");
    if (stride < 1) throw DimensionError("conv1d: stride must be >= 1");
    if (k > len + 2 * padding) throw DimensionError("conv1d: kernel wider than padded input");
    const int len_out = (len + 2 * padding - k) / stride + 1;

    auto in_node = input.node();
    auto w_node = kernel.node();
    auto b_node = bias.node();
    Tensor out = make_op_node(
        {batch, ch_out, len_out}, {input, kernel, bias},
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            const double* in = in_node->values.data();
            const double* w = w_node->values.data();
            if (b_node->requires_grad) {
                double* db = b_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b)
                    for (int co = 0; co < ch_out; ++co) {
                        const double* grow = go + (int64_t(b) * ch_out + co) * len_out;
                        double acc = 0.0;
                        for (int t = 0; t < len_out; ++t) acc += grow[t];
                        db[co] += acc;
                    }
            }
            if (w_node->requires_grad) {
                double* dw = w_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b)
                    for (int co = 0; co < ch_out; ++co) {
                        const double* grow = go + (int64_t(b) * ch_out + co) * len_out;
                        for (int ci = 0; ci < ch_in; ++ci) {
                            const double* irow = in + (int64_t(b) * ch_in + ci) * len;
                            double* dwrow = dw + (int64_t(co) * ch_in + ci) * k;
                            for (int kk = 0; kk < k; ++kk) {
                                double acc = 0.0;
                                if (stride == 1) {
                                    const int t_lo = std::max(0, padding - kk);
                                    const int t_hi = std::min(len_out, len + padding - kk);
                                    const double* ish = irow + (t_lo - padding + kk);
                                    for (int t = t_lo; t < t_hi; ++t)
                                        acc += grow[t] * ish[t - t_lo];
                                } else {
                                    for (int t = 0; t < len_out; ++t) {
                                        const int i = t * stride - padding + kk;
                                        if (i >= 0 && i < len) acc += grow[t] * irow[i];
                                    }
                                }
                                dwrow[kk] += acc;
                            }
                        }
                    }
            }
            if (in_node->requires_grad) {
                double* di = in_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b)
                    for (int co = 0; co < ch_out; ++co) {
                        const double* grow = go + (int64_t(b) * ch_out + co) * len_out;
                        for (int ci = 0; ci < ch_in; ++ci) {
                            double* dirow = di + (int64_t(b) * ch_in + ci) * len;
                            const double* wrow = w + (int64_t(co) * ch_in + ci) * k;
                            for (int kk = 0; kk < k; ++kk) {
                                const double wv = wrow[kk];
                                if (stride == 1) {
                                    const int t_lo = std::max(0, padding - kk);
                                    const int t_hi = std::min(len_out, len + padding - kk);
                                    double* dsh = dirow + (t_lo - padding + kk);
                                    for (int t = t_lo; t < t_hi; ++t)
                                        dsh[t - t_lo] += wv * grow[t];
                                } else {
                                    for (int t = 0; t < len_out; ++t) {
                                        const int i = t * stride - padding + kk;
                                        if (i >= 0 && i < len) dirow[i] += wv * grow[t];
                                    }
                                }
                            }
                        }
                    }
            }
        });

    const double* in = input.data().data();
    const double* w = kernel.data().data();
    const double* bs = bias.data().data();
    double* o = out.data().data();
    for (int b = 0; b < batch; ++b)
        for (int co = 0; co < ch_out; ++co) {
            double* orow = o + (int64_t(b) * ch_out + co) * len_out;
            for (int t = 0; t < len_out; ++t) orow[t] = bs[co];
            for (int ci = 0; ci < ch_in; ++ci) {
                const double* irow = in + (int64_t(b) * ch_in + ci) * len;
                const double* wrow = w + (int64_t(co) * ch_in + ci) * k;
                for (int kk = 0; kk < k; ++kk) {
                    const double wv = wrow[kk];
                    if (stride == 1) {
                        const int t_lo = std::max(0, padding - kk);
                        const int t_hi = std::min(len_out, len + padding - kk);
                        const double* ish = irow + (t_lo - padding + kk);
                        for (int t = t_lo; t < t_hi; ++t) orow[t] += wv * ish[t - t_lo];
                    } else {
                        for (int t = 0; t < len_out; ++t) {
                            const int i = t * stride - padding + kk;
                            if (i >= 0 && i < len) orow[t] += wv * irow[i];
                        }
                    }
                }
            }
        }
    return out;
}

// 2D analogue over [batch, ch_in, h, w]; kernel [ch_out, ch_in, kh, kw].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int stride = 1, int padding = 0) {
    if (input.ndim() != 4) throw DimensionError("conv2d: input must be [batch, ch_in, h, w]");
    if (kernel.ndim() != 4) throw DimensionError("conv2d: kernel must be [ch_out, ch_in, kh, kw]");
    const int batch = input.dim(0), ch_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int ch_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != ch_in)
        throw DimensionError("conv2d: kernel ch_in does not match input ch_in");
    if (bias.size() != ch_out) throw DimensionError("conv2d: bias size must equal ch_out");
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    if (kh > h + 2 * padding || kw > w + 2 * padding)
        throw DimensionError("conv2d: kernel larger than padded input");
    const int h_out = (h + 2 * padding - kh) / stride + 1;
    const int w_out = (w + 2 * padding - kw) / stride + 1;

    auto in_node = input.node();
    auto k_node = kernel.node();
    auto b_node = bias.node();
    Tensor out = make_op_node(
        {batch, ch_out, h_out, w_out}, {input, kernel, bias},
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            const double* in = in_node->values.data();
            const double* wv = k_node->values.data();
            const int64_t out_plane = int64_t(h_out) * w_out;
            const int64_t in_plane = int64_t(h) * w;
            if (b_node->requires_grad) {
                double* db = b_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b)
                    for (int co = 0; co < ch_out; ++co) {
                        const double* g = go + (int64_t(b) * ch_out + co) * out_plane;
                        double acc = 0.0;
                        for (int64_t i = 0; i < out_plane; ++i) acc += g[i];
                        db[co] += acc;
                    }
            }
            const bool need_w = k_node->requires_grad;
            const bool need_in = in_node->requires_grad;
            if (!need_w && !need_in) return;
            double* dw = need_w ? k_node->grad_buffer().data() : nullptr;
            double* di = need_in ? in_node->grad_buffer().data() : nullptr;
            for (int b = 0; b < batch; ++b)
                for (int co = 0; co < ch_out; ++co) {
                    const double* g = go + (int64_t(b) * ch_out + co) * out_plane;
                    for (int ci = 0; ci < ch_in; ++ci) {
                        const double* iplane = in + (int64_t(b) * ch_in + ci) * in_plane;
                        double* diplane = need_in ? di + (int64_t(b) * ch_in + ci) * in_plane
                                                  : nullptr;
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int64_t widx =
                                    ((int64_t(co) * ch_in + ci) * kh + ky) * kw + kx;
                                const double wval = wv[widx];
                                double wacc = 0.0;
                                for (int y = 0; y < h_out; ++y) {
                                    const int iy = y * stride - padding + ky;
                                    if (iy < 0 || iy >= h) continue;
                                    const double* grow = g + int64_t(y) * w_out;
                                    const double* irow = iplane + int64_t(iy) * w;
                                    double* dirow =
                                        need_in ? diplane + int64_t(iy) * w : nullptr;
                                    if (stride == 1) {
                                        const int x_lo = std::max(0, padding - kx);
                                        const int x_hi = std::min(w_out, w + padding - kx);
                                        const int off = kx - padding;
                                        if (need_w)
                                            for (int x = x_lo; x < x_hi; ++x)
                                                wacc += grow[x] * irow[x + off];
                                        if (need_in)
                                            for (int x = x_lo; x < x_hi; ++x)
                                                dirow[x + off] += wval * grow[x];
                                    } else {
                                        for (int x = 0; x < w_out; ++x) {
                                            const int ix = x * stride - padding + kx;
                                            if (ix < 0 || ix >= w) continue;
                                            if (need_w) wacc += grow[x] * irow[ix];
                                            if (need_in) dirow[ix] += wval * grow[x];
                                        }
                                    }
                                }
                                if (need_w) dw[widx] += wacc;
                            }
                    }
                }
        });

    const double* in = input.data().data();
    const double* kv = kernel.data().data();
    const double* bs = bias.data().data();
    double* o = out.data().data();
    const int64_t out_plane = int64_t(h_out) * w_out;
    const int64_t in_plane = int64_t(h) * w;
    for (int b = 0; b < batch; ++b)
        for (int co = 0; co < ch_out; ++co) {
            double* oplane = o + (int64_t(b) * ch_out + co) * out_plane;
            for (int64_t i = 0; i < out_plane; ++i) oplane[i] = bs[co];
            for (int ci = 0; ci < ch_in; ++ci) {
                const double* iplane = in + (int64_t(b) * ch_in + ci) * in_plane;
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const double wval =
                            kv[((int64_t(co) * ch_in + ci) * kh + ky) * kw + kx];
                        for (int y = 0; y < h_out; ++y) {
                            const int iy = y * stride - padding + ky;
                            if (iy < 0 || iy >= h) continue;
                            double* orow = oplane + int64_t(y) * w_out;
                            const double* irow = iplane + int64_t(iy) * w;
                            if (stride == 1) {
                                const int x_lo = std::max(0, padding - kx);
                                const int x_hi = std::min(w_out, w + padding - kx);
                                const int off = kx - padding;
                                for (int x = x_lo; x < x_hi; ++x)
                                    orow[x] += wval * irow[x + off];
                            } else {
                                for (int x = 0; x < w_out; ++x) {
                                    const int ix = x * stride - padding + kx;
                                    if (ix >= 0 && ix < w) orow[x] += wval * irow[ix];
                                }
                            }
                        }
                    }
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Max pooling over [batch, ch, len]. Ties route the gradient to the first
// index in the window so backward is deterministic.
// ---------------------------------------------------------------------------

inline Tensor maxpool1d(const Tensor& input, int window, int stride) {
    if (input.ndim() != 3) throw DimensionError("maxpool1d: input must be [batch, ch, len]");
    if (window < 1) throw DimensionError("maxpool1d: window must be >= 1");
    if (stride < 1) throw DimensionError("maxpool1d: stride must be >= 1");
    const int batch = input.dim(0), ch = input.dim(1), len = input.dim(2);
    if (window > len) throw DimensionError("maxpool1d: window exceeds input length");
    const int len_out = (len - window) / stride + 1;

    auto argmax = std::make_shared<std::vector<int>>(size_t(batch) * ch * len_out);
    auto in_node = input.node();
    Tensor out = make_op_node(
        {batch, ch, len_out}, {input},
        [=](TensorNode& self) {
            if (!in_node->requires_grad) return;
            double* di = in_node->grad_buffer().data();
            const double* go = self.grad.data();
            const int* am = argmax->data();
            const int64_t rows = int64_t(batch) * ch;
            for (int64_t r = 0; r < rows; ++r) {
                double* dirow = di + r * len;
                const double* grow = go + r * len_out;
                const int* arow = am + r * len_out;
                for (int t = 0; t < len_out; ++t) dirow[arow[t]] += grow[t];
            }
        });

    const double* in = input.data().data();
    double* o = out.data().data();
    int* am = argmax->data();
    const int64_t rows = int64_t(batch) * ch;
    for (int64_t r = 0; r < rows; ++r) {
        const double* irow = in + r * len;
        double* orow = o + r * len_out;
        int* arow = am + r * len_out;
        for (int t = 0; t < len_out; ++t) {
            const int start = t * stride;
            int best = start;
            double best_v = irow[start];
            for (int j = 1; j < window; ++j)
                if (irow[start + j] > best_v) {
                    best_v = irow[start + j];
                    best = start + j;
                }
            orow[t] = best_v;
            arow[t] = best;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over [batch, ch, len], statistics per channel.
// ---------------------------------------------------------------------------

struct BatchNormResult {
    Tensor out;
    Tensor running_mean;  // updated copies in train mode, pass-through in eval
    Tensor running_var;
};

inline BatchNormResult batchnorm1d(const Tensor& input, const Tensor& gamma,
                                   const Tensor& beta, const Tensor& running_mean,
                                   const Tensor& running_var, Mode mode,
                                   double momentum = 0.1, double eps = 1e-5) {
    if (input.ndim() != 3) throw DimensionError("batchnorm1d: input must be [batch, ch, len]");
    const int batch = input.dim(0), ch = input.dim(1), len = input.dim(2);
    if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch ||
        running_var.size() != ch)
        throw DimensionError("batchnorm1d: parameter size must equal channel count");
    if (mode == Mode::train && batch < 2)
        throw DegenerateBatchError("batchnorm1d: train mode needs batch size >= 2, got " +
                                   std::to_string(batch));

    const int64_t n_per_ch = int64_t(batch) * len;
    std::vector<double> mean(static_cast<size_t>(ch));
    std::vector<double> var(static_cast<size_t>(ch));
    const double* in = input.data().data();
    if (mode == Mode::train) {
        for (int c = 0; c < ch; ++c) {
            double m = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* row = in + (int64_t(b) * ch + c) * len;
                for (int t = 0; t < len; ++t) m += row[t];
            }
            m /= double(n_per_ch);
            double v = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* row = in + (int64_t(b) * ch + c) * len;
                for (int t = 0; t < len; ++t) {
                    const double d = row[t] - m;
                    v += d * d;
                }
            }
            // Population variance, both for normalization and the running
            // estimate, so eval reproduces train exactly on a frozen batch.
            v /= double(n_per_ch);
            mean[size_t(c)] = m;
            var[size_t(c)] = v;
        }
    } else {
        for (int c = 0; c < ch; ++c) {
            mean[size_t(c)] = running_mean.data()[size_t(c)];
            var[size_t(c)] = running_var.data()[size_t(c)];
        }
    }

    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(ch));
    for (int c = 0; c < ch; ++c) (*inv_std)[size_t(c)] = 1.0 / std::sqrt(var[size_t(c)] + eps);
    auto xhat = std::make_shared<std::vector<double>>(size_t(input.size()));
    {
        double* xh = xhat->data();
        for (int b = 0; b < batch; ++b)
            for (int c = 0; c < ch; ++c) {
                const double* row = in + (int64_t(b) * ch + c) * len;
                double* xrow = xh + (int64_t(b) * ch + c) * len;
                const double m = mean[size_t(c)], is = (*inv_std)[size_t(c)];
                for (int t = 0; t < len; ++t) xrow[t] = (row[t] - m) * is;
            }
    }

    auto in_node = input.node();
    auto g_node = gamma.node();
    auto b_node = beta.node();
    const bool train = mode == Mode::train;
    Tensor out = make_op_node(
        {batch, ch, len}, {input, gamma, beta},
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            const double* xh = xhat->data();
            const double* g = g_node->values.data();
            if (g_node->requires_grad || b_node->requires_grad) {
                double* dg = g_node->requires_grad ? g_node->grad_buffer().data() : nullptr;
                double* db = b_node->requires_grad ? b_node->grad_buffer().data() : nullptr;
                for (int c = 0; c < ch; ++c) {
                    double sg = 0.0, sb = 0.0;
                    for (int b = 0; b < batch; ++b) {
                        const int64_t base = (int64_t(b) * ch + c) * len;
                        for (int t = 0; t < len; ++t) {
                            sg += go[base + t] * xh[base + t];
                            sb += go[base + t];
                        }
                    }
                    if (dg) dg[c] += sg;
                    if (db) db[c] += sb;
                }
            }
            if (!in_node->requires_grad) return;
            double* di = in_node->grad_buffer().data();
            for (int c = 0; c < ch; ++c) {
                const double gis = g[c] * (*inv_std)[size_t(c)];
                if (train) {
                    double sum_dy = 0.0, sum_dy_xh = 0.0;
                    for (int b = 0; b < batch; ++b) {
                        const int64_t base = (int64_t(b) * ch + c) * len;
                        for (int t = 0; t < len; ++t) {
                            sum_dy += go[base + t];
                            sum_dy_xh += go[base + t] * xh[base + t];
                        }
                    }
                    const double mean_dy = sum_dy / double(n_per_ch);
                    const double mean_dy_xh = sum_dy_xh / double(n_per_ch);
                    for (int b = 0; b < batch; ++b) {
                        const int64_t base = (int64_t(b) * ch + c) * len;
                        for (int t = 0; t < len; ++t)
                            di[base + t] +=
                                gis * (go[base + t] - mean_dy - xh[base + t] * mean_dy_xh);
                    }
                } else {
                    for (int b = 0; b < batch; ++b) {
                        const int64_t base = (int64_t(b) * ch + c) * len;
                        for (int t = 0; t < len; ++t) di[base + t] += gis * go[base + t];
                    }
                }
            }
        });

    {
        double* o = out.data().data();
        const double* xh = xhat->data();
        const double* g = gamma.data().data();
        const double* bt = beta.data().data();
        for (int b = 0; b < batch; ++b)
            for (int c = 0; c < ch; ++c) {
                const int64_t base = (int64_t(b) * ch + c) * len;
                for (int t = 0; t < len; ++t) o[base + t] = g[c] * xh[base + t] + bt[c];
            }
    }

    BatchNormResult res;
    res.out = out;
    if (train) {
        Tensor rm = Tensor::zeros({ch});
        Tensor rv = Tensor::zeros({ch});
        for (int c = 0; c < ch; ++c) {
            rm.data()[size_t(c)] =
                (1.0 - momentum) * running_mean.data()[size_t(c)] + momentum * mean[size_t(c)];
            rv.data()[size_t(c)] =
                (1.0 - momentum) * running_var.data()[size_t(c)] + momentum * var[size_t(c)];
        }
        res.running_mean = rm;
        res.running_var = rv;
    } else {
        res.running_mean = running_mean;
        res.running_var = running_var;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Dense layer: input [batch, in], weight [out, in], bias [out].
// ---------------------------------------------------------------------------

inline Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.ndim() != 2) throw DimensionError("dense: input must be [batch, in]");
    if (weight.ndim() != 2) throw DimensionError("dense: weight must be [out, in]");
    const int batch = input.dim(0), in_dim = input.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in_dim)
        throw DimensionError("dense: weight in_dim " + std::to_string(weight.dim(1)) +
                             " does not match input " + std::to_string(in_dim));
    if (bias.size() != out_dim) throw DimensionError("dense: bias size must equal out_dim");

    auto in_node = input.node();
    auto w_node = weight.node();
    auto b_node = bias.node();
    Tensor out = make_op_node(
        {batch, out_dim}, {input, weight, bias},
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            const double* in = in_node->values.data();
            const double* w = w_node->values.data();
            if (b_node->requires_grad) {
                double* db = b_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b)
                    for (int o = 0; o < out_dim; ++o) db[o] += go[int64_t(b) * out_dim + o];
            }
            if (w_node->requires_grad) {
                double* dw = w_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b) {
                    const double* irow = in + int64_t(b) * in_dim;
                    const double* grow = go + int64_t(b) * out_dim;
                    for (int o = 0; o < out_dim; ++o) {
                        const double g = grow[o];
                        double* dwrow = dw + int64_t(o) * in_dim;
                        for (int i = 0; i < in_dim; ++i) dwrow[i] += g * irow[i];
                    }
                }
            }
            if (in_node->requires_grad) {
                double* di = in_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b) {
                    double* dirow = di + int64_t(b) * in_dim;
                    const double* grow = go + int64_t(b) * out_dim;
                    for (int o = 0; o < out_dim; ++o) {
                        const double g = grow[o];
                        const double* wrow = w + int64_t(o) * in_dim;
                        for (int i = 0; i < in_dim; ++i) dirow[i] += g * wrow[i];
                    }
                }
            }
        });

    const double* in = input.data().data();
    const double* w = weight.data().data();
    const double* bs = bias.data().data();
    double* o = out.data().data();
    for (int b = 0; b < batch; ++b) {
        const double* irow = in + int64_t(b) * in_dim;
        double* orow = o + int64_t(b) * out_dim;
        for (int od = 0; od < out_dim; ++od) {
            const double* wrow = w + int64_t(od) * in_dim;
            double acc = bs[od];
            for (int i = 0; i < in_dim; ++i) acc += wrow[i] * irow[i];
            orow[od] = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations, dropout, softmax.
// ---------------------------------------------------------------------------

inline Tensor leaky_relu(const Tensor& input, double slope) {
    auto in_node = input.node();
    Tensor out = make_op_node(
        input.shape(), {input},
        [=](TensorNode& self) {
            if (!in_node->requires_grad) return;
            double* di = in_node->grad_buffer().data();
            const double* go = self.grad.data();
            const double* in = in_node->values.data();
            const int64_t n = in_node->size();
            for (int64_t i = 0; i < n; ++i) di[i] += go[i] * (in[i] > 0.0 ? 1.0 : slope);
        });
    const double* in = input.data().data();
    double* o = out.data().data();
    const int64_t n = input.size();
    for (int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0 ? in[i] : slope * in[i];
    return out;
}

inline Tensor relu(const Tensor& input) { return leaky_relu(input, 0.0); }

// Row-wise softmax over [batch, n].
inline Tensor softmax(const Tensor& input) {
    if (input.ndim() != 2) throw DimensionError("softmax: input must be [batch, n]");
    const int batch = input.dim(0), n = input.dim(1);
    auto in_node = input.node();
    Tensor out = make_op_node(
        {batch, n}, {input},
        [=](TensorNode& self) {
            if (!in_node->requires_grad) return;
            double* di = in_node->grad_buffer().data();
            const double* go = self.grad.data();
            const double* y = self.values.data();
            for (int b = 0; b < batch; ++b) {
                const double* yrow = y + int64_t(b) * n;
                const double* grow = go + int64_t(b) * n;
                double dot = 0.0;
                for (int i = 0; i < n; ++i) dot += yrow[i] * grow[i];
                double* dirow = di + int64_t(b) * n;
                for (int i = 0; i < n; ++i) dirow[i] += yrow[i] * (grow[i] - dot);
            }
        });
    const double* in = input.data().data();
    double* o = out.data().data();
    for (int b = 0; b < batch; ++b) {
        const double* irow = in + int64_t(b) * n;
        double* orow = o + int64_t(b) * n;
        double mx = irow[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, irow[i]);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            orow[i] = std::exp(irow[i] - mx);
            sum += orow[i];
        }
        for (int i = 0; i < n; ++i) orow[i] /= sum;
    }
    return out;
}

// Inverted dropout. Eval mode returns the input handle unchanged so the
// identity is bit-exact.
inline Tensor dropout(const Tensor& input, double rate, Rng& rng, Mode mode) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigurationError("dropout: rate must be in [0, 1)");
    if (mode == Mode::eval || rate == 0.0) return input;
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(size_t(input.size()));
    for (double& m : *mask) m = rng.next_double() >= rate ? keep_scale : 0.0;

    auto in_node = input.node();
    Tensor out = make_op_node(
        input.shape(), {input},
        [=](TensorNode& self) {
            if (!in_node->requires_grad) return;
            double* di = in_node->grad_buffer().data();
            const double* go = self.grad.data();
            const double* m = mask->data();
            const int64_t n = in_node->size();
            for (int64_t i = 0; i < n; ++i) di[i] += go[i] * m[i];
        });
    const double* in = input.data().data();
    const double* m = mask->data();
    double* o = out.data().data();
    const int64_t n = input.size();
    for (int64_t i = 0; i < n; ++i) o[i] = in[i] * m[i];
    return out;
}

// ---------------------------------------------------------------------------
// Loss: mean sparse categorical cross-entropy plus L2 on the given weights.
// ---------------------------------------------------------------------------

inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels,
                                 double l2_rate = 0.0,
                                 const std::vector<Tensor>& l2_params = {}) {
    if (logits.ndim() != 2) throw DimensionError("cross_entropy_loss: logits must be [batch, C]");
    const int batch = logits.dim(0), n_classes = logits.dim(1);
    if (int(labels.size()) != batch)
        throw DimensionError("cross_entropy_loss: label count must equal batch size");
    for (int i = 0; i < batch; ++i)
        if (labels[size_t(i)] < 0 || labels[size_t(i)] >= n_classes)
            throw LabelError("cross_entropy_loss: label " + std::to_string(labels[size_t(i)]) +
                             " out of range [0, " + std::to_string(n_classes) + ") at row " +
                             std::to_string(i));

    // Stable log-softmax probabilities, reused by the backward pass.
    auto probs = std::make_shared<std::vector<double>>(size_t(logits.size()));
    const double* x = logits.data().data();
    double ce = 0.0;
    for (int b = 0; b < batch; ++b) {
        const double* row = x + int64_t(b) * n_classes;
        double* prow = probs->data() + int64_t(b) * n_classes;
        double mx = row[0];
        for (int i = 1; i < n_classes; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (int i = 0; i < n_classes; ++i) {
            prow[i] = std::exp(row[i] - mx);
            sum += prow[i];
        }
        for (int i = 0; i < n_classes; ++i) prow[i] /= sum;
        ce += std::log(sum) + mx - row[labels[size_t(b)]];
    }
    ce /= double(batch);

    double l2 = 0.0;
    if (l2_rate != 0.0)
        for (const Tensor& p : l2_params)
            for (double v : p.data()) l2 += v * v;

    std::vector<Tensor> parents = {logits};
    for (const Tensor& p : l2_params) parents.push_back(p);
    auto logits_node = logits.node();
    std::vector<std::shared_ptr<TensorNode>> l2_nodes;
    for (const Tensor& p : l2_params) l2_nodes.push_back(p.node());
    const std::vector<int> labels_copy = labels;

    Tensor out = make_op_node(
        {1}, parents,
        [=](TensorNode& self) {
            const double g = self.grad[0];
            if (logits_node->requires_grad) {
                double* dl = logits_node->grad_buffer().data();
                const double* pr = probs->data();
                const double inv_b = 1.0 / double(batch);
                for (int b = 0; b < batch; ++b) {
                    double* drow = dl + int64_t(b) * n_classes;
                    const double* prow = pr + int64_t(b) * n_classes;
                    for (int i = 0; i < n_classes; ++i) drow[i] += g * inv_b * prow[i];
                    drow[labels_copy[size_t(b)]] -= g * inv_b;
                }
            }
            if (l2_rate != 0.0)
                for (const auto& pn : l2_nodes) {
                    if (!pn->requires_grad) continue;
                    double* dp = pn->grad_buffer().data();
                    const double* pv = pn->values.data();
                    const int64_t n = pn->size();
                    for (int64_t i = 0; i < n; ++i) dp[i] += g * 2.0 * l2_rate * pv[i];
                }
        });
    out.data()[0] = ce + l2_rate * l2;
    return out;
}

// ---------------------------------------------------------------------------
// Structural ops.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("add: shape mismatch");
    auto a_node = a.node();
    auto b_node = b.node();
    Tensor out = make_op_node(
        a.shape(), {a, b},
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            const int64_t n = self.size();
            if (a_node->requires_grad) {
                double* da = a_node->grad_buffer().data();
                for (int64_t i = 0; i < n; ++i) da[i] += go[i];
            }
            if (b_node->requires_grad) {
                double* db = b_node->grad_buffer().data();
                for (int64_t i = 0; i < n; ++i) db[i] += go[i];
            }
        });
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* o = out.data().data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) o[i] = av[i] + bv[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("mul: shape mismatch");
    auto a_node = a.node();
    auto b_node = b.node();
    Tensor out = make_op_node(
        a.shape(), {a, b},
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            const int64_t n = self.size();
            if (a_node->requires_grad) {
                double* da = a_node->grad_buffer().data();
                const double* bv = b_node->values.data();
                for (int64_t i = 0; i < n; ++i) da[i] += go[i] * bv[i];
            }
            if (b_node->requires_grad) {
                double* db = b_node->grad_buffer().data();
                const double* av = a_node->values.data();
                for (int64_t i = 0; i < n; ++i) db[i] += go[i] * av[i];
            }
        });
    const double* av = a.data().data();
    const double* bv = b.data().data();
    double* o = out.data().data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) o[i] = av[i] * bv[i];
    return out;
}

inline Tensor sum(const Tensor& a) {
    auto a_node = a.node();
    Tensor out = make_op_node(
        {1}, {a},
        [=](TensorNode& self) {
            if (!a_node->requires_grad) return;
            double* da = a_node->grad_buffer().data();
            const double g = self.grad[0];
            const int64_t n = a_node->size();
            for (int64_t i = 0; i < n; ++i) da[i] += g;
        });
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out.data()[0] = acc;
    return out;
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.size()) throw DimensionError("reshape: element count mismatch");
    auto a_node = a.node();
    Tensor out = make_op_node(
        std::move(shape), {a},
        [=](TensorNode& self) {
            if (!a_node->requires_grad) return;
            double* da = a_node->grad_buffer().data();
            const double* go = self.grad.data();
            const int64_t n = self.size();
            for (int64_t i = 0; i < n; ++i) da[i] += go[i];
        });
    std::memcpy(out.data().data(), a.data().data(), size_t(a.size()) * sizeof(double));
    return out;
}

// [batch, ...] -> [batch, rest].
inline Tensor flatten(const Tensor& a) {
    if (a.ndim() < 2) throw DimensionError("flatten: needs at least 2 dims");
    const int batch = a.dim(0);
    const int rest = int(a.size() / batch);
    auto a_node = a.node();
    Tensor out = make_op_node(
        {batch, rest}, {a},
        [=](TensorNode& self) {
            if (!a_node->requires_grad) return;
            double* da = a_node->grad_buffer().data();
            const double* go = self.grad.data();
            const int64_t n = self.size();
            for (int64_t i = 0; i < n; ++i) da[i] += go[i];
        });
    std::memcpy(out.data().data(), a.data().data(), size_t(a.size()) * sizeof(double));
    return out;
}

// Concatenate [batch, k_i] tensors along columns.
inline Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("concat_cols: empty input list");
    const int batch = xs[0].dim(0);
    int total = 0;
    for (const Tensor& x : xs) {
        if (x.ndim() != 2 || x.dim(0) != batch)
            throw DimensionError("concat_cols: inputs must share the batch dimension");
        total += x.dim(1);
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int> widths;
    for (const Tensor& x : xs) {
        nodes.push_back(x.node());
        widths.push_back(x.dim(1));
    }
    Tensor out = make_op_node(
        {batch, total}, xs,
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            int col = 0;
            for (size_t i = 0; i < nodes.size(); ++i) {
                const int w = widths[i];
                if (nodes[i]->requires_grad) {
                    double* d = nodes[i]->grad_buffer().data();
                    for (int b = 0; b < batch; ++b)
                        for (int j = 0; j < w; ++j)
                            d[int64_t(b) * w + j] += go[int64_t(b) * total + col + j];
                }
                col += w;
            }
        });
    double* o = out.data().data();
    int col = 0;
    for (const Tensor& x : xs) {
        const int w = x.dim(1);
        const double* v = x.data().data();
        for (int b = 0; b < batch; ++b)
            std::memcpy(o + int64_t(b) * total + col, v + int64_t(b) * w,
                        size_t(w) * sizeof(double));
        col += w;
    }
    return out;
}

// Stack [n_i, k] tensors along rows.
inline Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("concat_rows: empty input list");
    const int k = xs[0].dim(1);
    int total = 0;
    for (const Tensor& x : xs) {
        if (x.ndim() != 2 || x.dim(1) != k)
            throw DimensionError("concat_rows: inputs must share the column dimension");
        total += x.dim(0);
    }
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<int> heights;
    for (const Tensor& x : xs) {
        nodes.push_back(x.node());
        heights.push_back(x.dim(0));
    }
    Tensor out = make_op_node(
        {total, k}, xs,
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            int64_t row = 0;
            for (size_t i = 0; i < nodes.size(); ++i) {
                const int64_t n = int64_t(heights[i]) * k;
                if (nodes[i]->requires_grad) {
                    double* d = nodes[i]->grad_buffer().data();
                    const double* src = go + row * k;
                    for (int64_t j = 0; j < n; ++j) d[j] += src[j];
                }
                row += heights[i];
            }
        });
    double* o = out.data().data();
    int64_t row = 0;
    for (const Tensor& x : xs) {
        std::memcpy(o + row * k, x.data().data(), size_t(x.size()) * sizeof(double));
        row += x.dim(0);
    }
    return out;
}

// out[i] = x[order[i]]; `order` must be a permutation of the rows.
inline Tensor permute_rows(const Tensor& x, const std::vector<int>& order) {
    if (x.ndim() != 2) throw DimensionError("permute_rows: x must be [batch, k]");
    const int batch = x.dim(0), k = x.dim(1);
    if (int(order.size()) != batch)
        throw DimensionError("permute_rows: order size must equal batch size");
    auto x_node = x.node();
    auto order_copy = std::make_shared<std::vector<int>>(order);
    Tensor out = make_op_node(
        {batch, k}, {x},
        [=](TensorNode& self) {
            if (!x_node->requires_grad) return;
            double* dx = x_node->grad_buffer().data();
            const double* go = self.grad.data();
            for (int i = 0; i < batch; ++i) {
                const int src = (*order_copy)[size_t(i)];
                for (int j = 0; j < k; ++j)
                    dx[int64_t(src) * k + j] += go[int64_t(i) * k + j];
            }
        });
    const double* xv = x.data().data();
    double* o = out.data().data();
    for (int i = 0; i < batch; ++i)
        std::memcpy(o + int64_t(i) * k, xv + int64_t(order[size_t(i)]) * k,
                    size_t(k) * sizeof(double));
    return out;
}

// Multiply each row of x [batch, k] by scale[row]; used for context masking.
inline Tensor scale_rows(const Tensor& x, const Tensor& scale) {
    if (x.ndim() != 2) throw DimensionError("scale_rows: x must be [batch, k]");
    if (scale.size() != x.dim(0))
        throw DimensionError("scale_rows: scale length must equal batch size");
    const int batch = x.dim(0), k = x.dim(1);
    auto x_node = x.node();
    auto s_node = scale.node();
    Tensor out = make_op_node(
        {batch, k}, {x, scale},
        [=](TensorNode& self) {
            const double* go = self.grad.data();
            const double* sv = s_node->values.data();
            if (x_node->requires_grad) {
                double* dx = x_node->grad_buffer().data();
                for (int b = 0; b < batch; ++b) {
                    const double s = sv[b];
                    for (int j = 0; j < k; ++j)
                        dx[int64_t(b) * k + j] += go[int64_t(b) * k + j] * s;
                }
            }
            if (s_node->requires_grad) {
                double* ds = s_node->grad_buffer().data();
                const double* xv = x_node->values.data();
                for (int b = 0; b < batch; ++b) {
                    double acc = 0.0;
                    for (int j = 0; j < k; ++j)
                        acc += go[int64_t(b) * k + j] * xv[int64_t(b) * k + j];
                    ds[b] += acc;
                }
            }
        });
    const double* xv = x.data().data();
    const double* sv = scale.data().data();
    double* o = out.data().data();
    for (int b = 0; b < batch; ++b) {
        const double s = sv[b];
        if (s == 0.0) {
            // Write exact +0.0 so masked rows are bit-identical no matter
            // what the masked activations were.
            for (int j = 0; j < k; ++j) o[int64_t(b) * k + j] = 0.0;
        } else {
            for (int j = 0; j < k; ++j) o[int64_t(b) * k + j] = xv[int64_t(b) * k + j] * s;
        }
    }
    return out;
}

}  // namespace fedfreq
