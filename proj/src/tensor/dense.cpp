// matmul, conv2d and max_pool2d. Dense products go through Eigen's GEMM;
// convolution is lowered to im2col so forward and both backward products are GEMMs.

#include <Eigen/Core>
#include <string>

#include "ssada/ops.hpp"

namespace ssada {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
    std::int64_t in_channels, height, width;
    std::int64_t out_channels, kernel, stride, padding;
    std::int64_t out_height, out_width;

    std::int64_t patch() const { return in_channels * kernel * kernel; }
    std::int64_t positions() const { return out_height * out_width; }
    bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
    const std::int64_t positions = g.positions();
    for (std::int64_t c = 0; c < g.in_channels; ++c) {
        for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
            for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
                double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * positions;
                for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.padding + ki;
                    double* dst = row + oy * g.out_width;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(dst, dst + g.out_width, 0.0);
                        continue;
                    }
                    const double* src = x + (c * g.height + iy) * g.width;
                    for (std::int64_t ox = 0; ox < g.out_width; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.padding + kj;
                        dst[ox] = (ix < 0 || ix >= g.width) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvGeometry& g, double* x) {
    const std::int64_t positions = g.positions();
    for (std::int64_t c = 0; c < g.in_channels; ++c) {
        for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
            for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
                const double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * positions;
                for (std::int64_t oy = 0; oy < g.out_height; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.padding + ki;
                    if (iy < 0 || iy >= g.height) continue;
                    const double* src = row + oy * g.out_width;
                    double* dst = x + (c * g.height + iy) * g.width;
                    for (std::int64_t ox = 0; ox < g.out_width; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.padding + kj;
                        if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    MatMap(out.data(), m, n).noalias() = ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), k, n);
    return make_op("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g, std::span<double* const> pg) {
        const ConstMatMap dc(g.data(), m, n);
        if (pg[0]) MatMap(pg[0], m, k).noalias() += dc * ConstMatMap(b.values().data(), k, n).transpose();
        if (pg[1]) MatMap(pg[1], k, n).noalias() += ConstMatMap(a.values().data(), m, k).transpose() * dc;
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    if (x.rank() != 3 || w.rank() != 4) {
        throw ShapeError("conv2d: expected x [C,H,W] and w [Cout,Cin,k,k], got " + shape_string(x.shape()) + " and " +
                         shape_string(w.shape()));
    }
    if (w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
        throw ShapeError("conv2d: weight " + shape_string(w.shape()) + " incompatible with input " +
                         shape_string(x.shape()) + " (square odd kernel over matching channels required)");
    }
    if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) {
        throw ShapeError("conv2d: bias must have shape [" + std::to_string(w.dim(0)) + "]");
    }
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), stride, padding, 0, 0};
    g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
    g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;
    if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel || g.out_height < 1 || g.out_width < 1) {
        throw ShapeError("conv2d: output extent < 1 for input " + shape_string(x.shape()));
    }

    std::vector<double> col;
    if (!g.pointwise()) {
        col.resize(static_cast<std::size_t>(g.patch() * g.positions()));
        im2col(x.values().data(), g, col.data());
    }
    const double* col_data = g.pointwise() ? x.values().data() : col.data();

    std::vector<double> out(static_cast<std::size_t>(g.out_channels * g.positions()));
    MatMap y(out.data(), g.out_channels, g.positions());
    y.noalias() = ConstMatMap(w.values().data(), g.out_channels, g.patch()) * ConstMatMap(col_data, g.patch(), g.positions());
    if (bias.defined()) {
        const auto bv = bias.values();
        for (std::int64_t c = 0; c < g.out_channels; ++c) y.row(c).array() += bv[static_cast<std::size_t>(c)];
    }

    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    const bool pointwise = g.pointwise();
    return make_op("conv2d", {g.out_channels, g.out_height, g.out_width}, std::move(out), std::move(parents),
                   [x, w, g, pointwise, col = std::move(col)](std::span<const double> grad, std::span<double* const> pg) {
                       const ConstMatMap dy(grad.data(), g.out_channels, g.positions());
                       const double* col_data = pointwise ? x.values().data() : col.data();
                       if (pg[1]) {
                           MatMap(pg[1], g.out_channels, g.patch()).noalias() +=
                               dy * ConstMatMap(col_data, g.patch(), g.positions()).transpose();
                       }
                       if (pg.size() > 2 && pg[2]) {
                           // plain loop: Eigen's vectorised row sum depends on buffer alignment,
                           // which made identical runs differ in the last bits
                           const auto positions = static_cast<std::size_t>(g.positions());
                           for (std::size_t c = 0; c < static_cast<std::size_t>(g.out_channels); ++c) {
                               const double* row = grad.data() + c * positions;
                               double s = 0.0;
                               for (std::size_t p = 0; p < positions; ++p) s += row[p];
                               pg[2][c] += s;
                           }
                       }
                       if (pg[0]) {
                           const ConstMatMap wm(w.values().data(), g.out_channels, g.patch());
                           if (pointwise) {
                               MatMap(pg[0], g.patch(), g.positions()).noalias() += wm.transpose() * dy;
                           } else {
                               RowMatrix dcol = wm.transpose() * dy;
                               col2im_add(dcol.data(), g, pg[0]);
                           }
                       }
                   });
}

Tensor max_pool2d(const Tensor& x, int window, int stride) {
    if (x.rank() != 3) throw ShapeError("max_pool2d: expected [C,H,W], got " + shape_string(x.shape()));
    if (window < 1 || stride < 1) throw ShapeError("max_pool2d: window and stride must be >= 1");
    const auto c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    if (h < window || wd < window || (h - window) % stride != 0 || (wd - window) % stride != 0) {
        throw ShapeError("max_pool2d: extents of " + shape_string(x.shape()) + " not divisible into windows of " +
                         std::to_string(window) + " with stride " + std::to_string(stride));
    }
    const auto oh = (h - window) / stride + 1, ow = (wd - window) / stride + 1;
    const auto in = x.values();
    std::vector<double> out(static_cast<std::size_t>(c * oh * ow));
    std::vector<std::size_t> arg(out.size());
    const bool monitor = KinkMonitor::active();
    std::size_t o = 0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox, ++o) {
                std::size_t best = static_cast<std::size_t>((ch * h + oy * stride) * wd + ox * stride);
                for (std::int64_t dy = 0; dy < window; ++dy) {
                    for (std::int64_t dx = 0; dx < window; ++dx) {
                        const auto idx = static_cast<std::size_t>((ch * h + oy * stride + dy) * wd + ox * stride + dx);
                        if (in[idx] > in[best]) best = idx;
                    }
                }
                out[o] = in[best];
                arg[o] = best;
                if (monitor) KinkMonitor::record(best);
            }
        }
    }
    return make_op("max_pool2d", {c, oh, ow}, std::move(out), {x},
                   [arg = std::move(arg)](std::span<const double> g, std::span<double* const> pg) {
                       if (!pg[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) pg[0][arg[i]] += g[i];
                   });
}

}  // namespace ssada
