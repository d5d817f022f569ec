#pragma once

// Autodiff ops on rank-4 NCHW tensors: convolution (im2col + GEMM), nearest
// upsampling, channel plumbing, finite differences, dark channel, and an
// orthonormal 2-D DFT realized through constant basis matrices so its
// backward pass is just the transposed products.

#include <cmath>
#include <map>

#include "semivdn/core/autodiff.hpp"

namespace semivdn {
namespace ad {

namespace detail {

// Lowers input patches into a (C*kh*kw) x (out_h*out_w) matrix for one image.
template <typename T>
void im2col(const T* src, int c, int h, int w, int kh, int kw, int stride,
            int pad, int out_h, int out_w, T* dst) {
    for (int ch = 0; ch < c; ++ch)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                T* row = dst + static_cast<std::size_t>((ch * kh + ki) * kw + kj) *
                                   out_h * out_w;
                for (int oi = 0; oi < out_h; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    for (int oj = 0; oj < out_w; ++oj) {
                        const int jj = oj * stride - pad + kj;
                        row[oi * out_w + oj] =
                            (ii >= 0 && ii < h && jj >= 0 && jj < w)
                                ? src[(static_cast<std::size_t>(ch) * h + ii) * w + jj]
                                : T(0);
                    }
                }
            }
}

// Scatter-add of a column matrix back onto the padded input (conv backward).
template <typename T>
void col2im_add(const T* cols, int c, int h, int w, int kh, int kw, int stride,
                int pad, int out_h, int out_w, T* dst) {
    for (int ch = 0; ch < c; ++ch)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const T* row = cols + static_cast<std::size_t>((ch * kh + ki) * kw + kj) *
                                          out_h * out_w;
                for (int oi = 0; oi < out_h; ++oi) {
                    const int ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= h) continue;
                    for (int oj = 0; oj < out_w; ++oj) {
                        const int jj = oj * stride - pad + kj;
                        if (jj < 0 || jj >= w) continue;
                        dst[(static_cast<std::size_t>(ch) * h + ii) * w + jj] +=
                            row[oi * out_w + oj];
                    }
                }
            }
}

} // namespace detail

// x: N x Cin x H x W, weight: Cout x (Cin*kh*kw), bias: Cout (rank-1, may be
// empty tensor with numel 0 for no bias).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              int kh, int kw, int stride, int pad) {
    const int n = x.val().dim(0), cin = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    const int cout = weight.val().rows();
    if (weight.val().cols() != cin * kh * kw)
        throw std::invalid_argument("conv2d: weight shape mismatch");
    const int out_h = (h + 2 * pad - kh) / stride + 1;
    const int out_w = (w + 2 * pad - kw) / stride + 1;
    const bool has_bias = bias.valid() && bias.val().numel() > 0;

    const int patch = cin * kh * kw, cols = out_h * out_w;
    Tensor<T> out({n, cout, out_h, out_w});
    Tensor<T> colbuf({patch, cols});
    for (int b = 0; b < n; ++b) {
        detail::im2col(x.val().data() + static_cast<std::size_t>(b) * cin * h * w,
                       cin, h, w, kh, kw, stride, pad, out_h, out_w, colbuf.data());
        Eigen::Map<MatRM<T>> om(out.data() + static_cast<std::size_t>(b) * cout * cols,
                                cout, cols);
        om.noalias() = weight.val().mat(cout, patch) * colbuf.mat(patch, cols);
        if (has_bias)
            for (int oc = 0; oc < cout; ++oc)
                om.row(oc).array() += bias.val()[oc];
    }

    std::vector<Var<T>> parents = {x, weight};
    if (has_bias) parents.push_back(bias);
    return detail::make_op<T>(
        std::move(out), std::move(parents),
        [n, cin, h, w, cout, kh, kw, stride, pad, out_h, out_w,
         has_bias](Node<T>& nd) {
            const int patch = cin * kh * kw, cols = out_h * out_w;
            Tensor<T> colbuf({patch, cols});
            const Tensor<T>& xv = nd.parents[0]->val;
            const auto wm = nd.parents[1]->val.mat(cout, patch);
            for (int b = 0; b < n; ++b) {
                Eigen::Map<const MatRM<T>> gm(
                    nd.grad.data() + static_cast<std::size_t>(b) * cout * cols,
                    cout, cols);
                if (detail::pneeds(nd, 1)) {
                    detail::im2col(xv.data() + static_cast<std::size_t>(b) * cin * h * w,
                                   cin, h, w, kh, kw, stride, pad, out_h, out_w,
                                   colbuf.data());
                    detail::pgrad(nd, 1).mat(cout, patch).noalias() +=
                        gm * colbuf.mat(patch, cols).transpose();
                }
                if (detail::pneeds(nd, 0)) {
                    colbuf.mat(patch, cols).noalias() = wm.transpose() * gm;
                    detail::col2im_add(colbuf.data(), cin, h, w, kh, kw, stride, pad,
                                       out_h, out_w,
                                       detail::pgrad(nd, 0).data() +
                                           static_cast<std::size_t>(b) * cin * h * w);
                }
                if (has_bias && detail::pneeds(nd, 2)) {
                    // Summed by hand in index order: Eigen's redux peels to the
                    // packet boundary, so its addition order (and rounding)
                    // would depend on where the grad buffer happens to live.
                    auto& gb = detail::pgrad(nd, 2);
                    for (int oc = 0; oc < cout; ++oc) {
                        const T* row = nd.grad.data() +
                                       (static_cast<std::size_t>(b) * cout + oc) * cols;
                        T acc = T(0);
                        for (int i = 0; i < cols; ++i) acc += row[i];
                        gb[oc] += acc;
                    }
                }
            }
        });
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2(const Var<T>& x) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    Tensor<T> out({n, c, 2 * h, 2 * w});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < 2 * h; ++i)
                for (int j = 0; j < 2 * w; ++j)
                    out(b, ch, i, j) = x.val()(b, ch, i / 2, j / 2);
    return detail::make_op<T>(std::move(out), {x}, [n, c, h, w](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j)
                        g(b, ch, i / 2, j / 2) += nd.grad(b, ch, i, j);
    });
}

// Per-pixel minimum over channels and a square window; the argmin index is
// frozen at forward time, so the backward routes gradient to one source pixel.
template <typename T>
Var<T> dark_channel(const Var<T>& x, int window) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    const int r = window / 2;
    Tensor<T> out({n, 1, h, w});
    std::vector<std::size_t> argmin(static_cast<std::size_t>(n) * h * w);
    for (int b = 0; b < n; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                T best = std::numeric_limits<T>::max();
                std::size_t besti = 0;
                for (int ch = 0; ch < c; ++ch)
                    for (int di = -r; di <= r; ++di) {
                        const int ii = std::clamp(i + di, 0, h - 1);
                        for (int dj = -r; dj <= r; ++dj) {
                            const int jj = std::clamp(j + dj, 0, w - 1);
                            const std::size_t idx = x.val().idx4(b, ch, ii, jj);
                            if (x.val()[idx] < best) { best = x.val()[idx]; besti = idx; }
                        }
                    }
                out(b, 0, i, j) = best;
                argmin[(static_cast<std::size_t>(b) * h + i) * w + j] = besti;
            }
    return detail::make_op<T>(std::move(out), {x},
                              [argmin = std::move(argmin)](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (std::size_t k = 0; k < argmin.size(); ++k) g[argmin[k]] += nd.grad[k];
    });
}

// Forward differences along height: out[i] = x[i+1] - x[i]; H-1 rows.
template <typename T>
Var<T> diff_h(const Var<T>& x) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    Tensor<T> out({n, c, h - 1, w});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i + 1 < h; ++i)
                for (int j = 0; j < w; ++j)
                    out(b, ch, i, j) = x.val()(b, ch, i + 1, j) - x.val()(b, ch, i, j);
    return detail::make_op<T>(std::move(out), {x}, [n, c, h, w](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i + 1 < h; ++i)
                    for (int j = 0; j < w; ++j) {
                        const T gv = nd.grad(b, ch, i, j);
                        g(b, ch, i + 1, j) += gv;
                        g(b, ch, i, j) -= gv;
                    }
    });
}

// Forward differences along width: out[j] = x[j+1] - x[j]; W-1 columns.
template <typename T>
Var<T> diff_w(const Var<T>& x) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    Tensor<T> out({n, c, h, w - 1});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j + 1 < w; ++j)
                    out(b, ch, i, j) = x.val()(b, ch, i, j + 1) - x.val()(b, ch, i, j);
    return detail::make_op<T>(std::move(out), {x}, [n, c, h, w](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j + 1 < w; ++j) {
                        const T gv = nd.grad(b, ch, i, j);
                        g(b, ch, i, j + 1) += gv;
                        g(b, ch, i, j) -= gv;
                    }
    });
}

// Horizontal mirror.
template <typename T>
Var<T> flip_w(const Var<T>& x) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    Tensor<T> out(x.val().shape());
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    out(b, ch, i, j) = x.val()(b, ch, i, w - 1 - j);
    return detail::make_op<T>(std::move(out), {x}, [n, c, h, w](Node<T>& nd) {
        auto& g = detail::pgrad(nd, 0);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j)
                        g(b, ch, i, w - 1 - j) += nd.grad(b, ch, i, j);
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const int n = a.val().dim(0), ca = a.val().dim(1), cb = b.val().dim(1);
    const int h = a.val().dim(2), w = a.val().dim(3);
    if (b.val().dim(0) != n || b.val().dim(2) != h || b.val().dim(3) != w)
        throw std::invalid_argument("concat_channels: shape mismatch");
    Tensor<T> out({n, ca + cb, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int bb = 0; bb < n; ++bb) {
        std::copy_n(a.val().data() + bb * ca * plane, ca * plane,
                    out.data() + static_cast<std::size_t>(bb) * (ca + cb) * plane);
        std::copy_n(b.val().data() + bb * cb * plane, cb * plane,
                    out.data() + static_cast<std::size_t>(bb) * (ca + cb) * plane +
                        ca * plane);
    }
    return detail::make_op<T>(std::move(out), {a, b}, [n, ca, cb, h, w](Node<T>& nd) {
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        for (int bb = 0; bb < n; ++bb) {
            const T* g = nd.grad.data() + static_cast<std::size_t>(bb) * (ca + cb) * plane;
            if (detail::pneeds(nd, 0)) {
                T* ga = detail::pgrad(nd, 0).data() + bb * ca * plane;
                for (std::size_t i = 0; i < ca * plane; ++i) ga[i] += g[i];
            }
            if (detail::pneeds(nd, 1)) {
                T* gb = detail::pgrad(nd, 1).data() + bb * cb * plane;
                for (std::size_t i = 0; i < cb * plane; ++i) gb[i] += g[ca * plane + i];
            }
        }
    });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int c0, int count) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    if (c0 < 0 || c0 + count > c)
        throw std::invalid_argument("slice_channels: out of range");
    Tensor<T> out({n, count, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < n; ++b)
        std::copy_n(x.val().data() + (static_cast<std::size_t>(b) * c + c0) * plane,
                    count * plane,
                    out.data() + static_cast<std::size_t>(b) * count * plane);
    return detail::make_op<T>(std::move(out), {x}, [n, c, c0, count, h, w](Node<T>& nd) {
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        auto& g = detail::pgrad(nd, 0);
        for (int b = 0; b < n; ++b) {
            T* dst = g.data() + (static_cast<std::size_t>(b) * c + c0) * plane;
            const T* src = nd.grad.data() + static_cast<std::size_t>(b) * count * plane;
            for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
        }
    });
}

// N x 1 x H x W -> N x C x H x W (repeat the single channel).
template <typename T>
Var<T> bcast_channels(const Var<T>& x, int channels) {
    const int n = x.val().dim(0);
    const int h = x.val().dim(2), w = x.val().dim(3);
    if (x.val().dim(1) != 1)
        throw std::invalid_argument("bcast_channels: input must have one channel");
    Tensor<T> out({n, channels, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < channels; ++ch)
            std::copy_n(x.val().data() + b * plane, plane,
                        out.data() + (static_cast<std::size_t>(b) * channels + ch) * plane);
    return detail::make_op<T>(std::move(out), {x}, [n, channels, h, w](Node<T>& nd) {
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        auto& g = detail::pgrad(nd, 0);
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < channels; ++ch) {
                const T* src =
                    nd.grad.data() + (static_cast<std::size_t>(b) * channels + ch) * plane;
                T* dst = g.data() + b * plane;
                for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
            }
    });
}

namespace detail {

// Orthonormal DFT basis for size n: cos and sin parts of exp(-2*pi*i*j*k/n)
// scaled by 1/sqrt(n). Cached per size (the basis is a constant).
template <typename T>
const std::pair<Tensor<T>, Tensor<T>>& dft_basis(int n) {
    static std::map<int, std::pair<Tensor<T>, Tensor<T>>> cache;
    auto it = cache.find(n);
    if (it == cache.end()) {
        Tensor<T> cosm({n, n});
        Tensor<T> sinm({n, n});
        constexpr double two_pi = 6.283185307179586476925286766559;
        const double scale = 1.0 / std::sqrt(static_cast<double>(n));
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                const double ang = -two_pi * static_cast<double>(j) *
                                   static_cast<double>(k) / static_cast<double>(n);
                cosm(j, k) = static_cast<T>(std::cos(ang) * scale);
                sinm(j, k) = static_cast<T>(std::sin(ang) * scale);
            }
        it = cache.emplace(n, std::make_pair(std::move(cosm), std::move(sinm))).first;
    }
    return it->second;
}

} // namespace detail

// Orthonormal 2-D DFT per channel. Input N x C x H x W, output N x 2C x H x W
// with real parts in channels [0, C) and imaginary parts in [C, 2C).
// F = Wh X Ww^T over complex basis Wh = Ch + i Sh, Ww = Cw + i Sw, so
//   Re = Ch X Cw^T - Sh X Sw^T and Im = Ch X Sw^T + Sh X Cw^T.
template <typename T>
Var<T> dft2_ortho(const Var<T>& x) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    const auto& [ch_, sh_] = detail::dft_basis<T>(h);
    const auto& [cw_, sw_] = detail::dft_basis<T>(w);
    const auto chm = ch_.mat(h, h), shm = sh_.mat(h, h);
    const auto cwm = cw_.mat(w, w), swm = sw_.mat(w, w);

    Tensor<T> out({n, 2 * c, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < n; ++b)
        for (int cc = 0; cc < c; ++cc) {
            Eigen::Map<const MatRM<T>> xm(
                x.val().data() + (static_cast<std::size_t>(b) * c + cc) * plane, h, w);
            Eigen::Map<MatRM<T>> re(
                out.data() + (static_cast<std::size_t>(b) * 2 * c + cc) * plane, h, w);
            Eigen::Map<MatRM<T>> im(
                out.data() + (static_cast<std::size_t>(b) * 2 * c + c + cc) * plane, h, w);
            // (Ch + iSh) X (Cw + iSw)^T with X real:
            MatRM<T> cx = chm * xm; // Ch X
            MatRM<T> sx = shm * xm; // Sh X
            re.noalias() = cx * cwm.transpose();
            re.noalias() -= sx * swm.transpose();
            im.noalias() = cx * swm.transpose();
            im.noalias() += sx * cwm.transpose();
        }

    return detail::make_op<T>(std::move(out), {x}, [n, c, h, w](Node<T>& nd) {
        const auto& [ch_, sh_] = detail::dft_basis<T>(h);
        const auto& [cw_, sw_] = detail::dft_basis<T>(w);
        const auto chm = ch_.mat(h, h), shm = sh_.mat(h, h);
        const auto cwm = cw_.mat(w, w), swm = sw_.mat(w, w);
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        auto& g = detail::pgrad(nd, 0);
        for (int b = 0; b < n; ++b)
            for (int cc = 0; cc < c; ++cc) {
                Eigen::Map<const MatRM<T>> gre(
                    nd.grad.data() + (static_cast<std::size_t>(b) * 2 * c + cc) * plane,
                    h, w);
                Eigen::Map<const MatRM<T>> gim(
                    nd.grad.data() +
                        (static_cast<std::size_t>(b) * 2 * c + c + cc) * plane,
                    h, w);
                Eigen::Map<MatRM<T>> gx(
                    g.data() + (static_cast<std::size_t>(b) * c + cc) * plane, h, w);
                // dX = Ch^T (dRe Cw + dIm Sw) + Sh^T (dIm Cw - dRe Sw)
                MatRM<T> t1 = gre * cwm + gim * swm;
                MatRM<T> t2 = gim * cwm - gre * swm;
                gx.noalias() += chm.transpose() * t1;
                gx.noalias() += shm.transpose() * t2;
            }
    });
}

} // namespace ad
} // namespace semivdn
