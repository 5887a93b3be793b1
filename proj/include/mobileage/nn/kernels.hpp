#pragma once

#include <algorithm>
#include <cstdint>

#include <Eigen/Core>

namespace mobileage::kernels {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXf>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXf>;

struct ConvGeometry {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;
    int stride = 1;
    int pad = 0;
    int groups = 1;
    int in_h = 0, in_w = 0;

    [[nodiscard]] int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    [[nodiscard]] int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    [[nodiscard]] bool depthwise() const { return groups > 1 && groups == in_channels && groups == out_channels; }
    [[nodiscard]] bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0 && groups == 1; }
};

/// Valid output-column range [lo, hi) for kernel column kx.
inline void valid_range(int kx, int stride, int pad, int in_w, int out_w, int& lo, int& hi)
{
    // ix = ox*stride - pad + kx must satisfy 0 <= ix < in_w
    lo = std::max(0, (pad - kx + stride - 1) / stride);
    const int num = in_w - 1 + pad - kx;
    hi = num < 0 ? 0 : std::min(out_w, num / stride + 1);
    if (pad - kx < 0) lo = 0;
}

/// im2col for one image: col is [C*k*k, OH*OW].
inline void im2col(const float* in, const ConvGeometry& g, float* col)
{
    const int oh = g.out_h(), ow = g.out_w();
    const int cin = g.in_channels / g.groups;
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < g.kernel; ++ky)
            for (int kx = 0; kx < g.kernel; ++kx) {
                float* dst = col + (static_cast<std::size_t>(c * g.kernel + ky) * g.kernel + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    float* drow = dst + static_cast<std::size_t>(oy) * ow;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(drow, drow + ow, 0.0F);
                        continue;
                    }
                    const float* srow = in + (static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        drow[ox] = (ix >= 0 && ix < g.in_w) ? srow[ix] : 0.0F;
                    }
                }
            }
}

/// Adjoint of im2col; accumulates into `in`.
inline void col2im(const float* col, const ConvGeometry& g, float* in)
{
    const int oh = g.out_h(), ow = g.out_w();
    const int cin = g.in_channels / g.groups;
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < g.kernel; ++ky)
            for (int kx = 0; kx < g.kernel; ++kx) {
                const float* src = col + (static_cast<std::size_t>(c * g.kernel + ky) * g.kernel + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    float* drow = in + (static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w;
                    const float* srow = src + static_cast<std::size_t>(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.in_w) drow[ix] += srow[ox];
                    }
                }
            }
}

/// Depthwise convolution of one image (weights [C, k*k]).
inline void depthwise_forward(const float* in, const float* w, const ConvGeometry& g, float* out)
{
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
    for (int c = 0; c < g.in_channels; ++c) {
        const float* ip = in + static_cast<std::size_t>(c) * g.in_h * g.in_w;
        const float* wp = w + static_cast<std::size_t>(c) * k * k;
        float* op = out + static_cast<std::size_t>(c) * oh * ow;
        std::fill(op, op + static_cast<std::size_t>(oh) * ow, 0.0F);
        for (int oy = 0; oy < oh; ++oy) {
            float* orow = op + static_cast<std::size_t>(oy) * ow;
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * s - g.pad + ky;
                if (iy < 0 || iy >= g.in_h) continue;
                const float* irow = ip + static_cast<std::size_t>(iy) * g.in_w;
                for (int kx = 0; kx < k; ++kx) {
                    const float wv = wp[ky * k + kx];
                    int lo = 0, hi = 0;
                    valid_range(kx, s, g.pad, g.in_w, ow, lo, hi);
                    const int off = kx - g.pad;
                    if (s == 1) {
                        for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox + off];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * s + off];
                    }
                }
            }
        }
    }
}

/// Depthwise backward for one image. `din` may be null; `dw` accumulates.
inline void depthwise_backward(const float* in, const float* w, const float* dout, const ConvGeometry& g, float* din, float* dw)
{
    const int oh = g.out_h(), ow = g.out_w(), k = g.kernel, s = g.stride;
    for (int c = 0; c < g.in_channels; ++c) {
        const float* ip = in + static_cast<std::size_t>(c) * g.in_h * g.in_w;
        const float* wp = w + static_cast<std::size_t>(c) * k * k;
        const float* dp = dout + static_cast<std::size_t>(c) * oh * ow;
        float* dip = din ? din + static_cast<std::size_t>(c) * g.in_h * g.in_w : nullptr;
        float* dwp = dw + static_cast<std::size_t>(c) * k * k;
        for (int oy = 0; oy < oh; ++oy) {
            const float* drow = dp + static_cast<std::size_t>(oy) * ow;
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * s - g.pad + ky;
                if (iy < 0 || iy >= g.in_h) continue;
                const float* irow = ip + static_cast<std::size_t>(iy) * g.in_w;
                float* dirow = dip ? dip + static_cast<std::size_t>(iy) * g.in_w : nullptr;
                for (int kx = 0; kx < k; ++kx) {
                    const float wv = wp[ky * k + kx];
                    int lo = 0, hi = 0;
                    valid_range(kx, s, g.pad, g.in_w, ow, lo, hi);
                    const int off = kx - g.pad;
                    float acc = 0.0F;
                    if (s == 1) {
                        for (int ox = lo; ox < hi; ++ox) acc += drow[ox] * irow[ox + off];
                        if (dirow)
                            for (int ox = lo; ox < hi; ++ox) dirow[ox + off] += wv * drow[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) acc += drow[ox] * irow[ox * s + off];
                        if (dirow)
                            for (int ox = lo; ox < hi; ++ox) dirow[ox * s + off] += wv * drow[ox];
                    }
                    dwp[ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Dense (groups == 1) convolution of one image; `col` is scratch space of
/// [Cin*k*k, OH*OW] floats, unused for pointwise convolutions.
inline void dense_forward(const float* in, const float* w, const ConvGeometry& g, float* out, float* col)
{
    const int hw = g.out_h() * g.out_w();
    const int kdim = g.in_channels * g.kernel * g.kernel;
    ConstMapMat W(w, g.out_channels, kdim);
    MapMat Y(out, g.out_channels, hw);
    if (g.pointwise()) {
        Y.noalias() = W * ConstMapMat(in, g.in_channels, hw);
    } else {
        im2col(in, g, col);
        Y.noalias() = W * ConstMapMat(col, kdim, hw);
    }
}

/// Dense convolution backward for one image; `din` may be null.
inline void dense_backward(const float* in, const float* w, const float* dout, const ConvGeometry& g, float* din, float* dw,
                           float* col)
{
    const int hw = g.out_h() * g.out_w();
    const int kdim = g.in_channels * g.kernel * g.kernel;
    ConstMapMat W(w, g.out_channels, kdim);
    ConstMapMat dY(dout, g.out_channels, hw);
    MapMat dW(dw, g.out_channels, kdim);
    if (g.pointwise()) {
        ConstMapMat X(in, g.in_channels, hw);
        dW.noalias() += dY * X.transpose();
        if (din) MapMat(din, g.in_channels, hw).noalias() += W.transpose() * dY;
    } else {
        im2col(in, g, col);
        dW.noalias() += dY * ConstMapMat(col, kdim, hw).transpose();
        if (din) {
            MapMat C(col, kdim, hw);
            C.noalias() = W.transpose() * dY;
            col2im(col, g, din);
        }
    }
}

} // namespace mobileage::kernels
