#include "rlar/ad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rlar/ad/graph.hpp"

namespace rlar::ad {
namespace {

using Values = std::vector<double>;

Graph* graph_of(const std::vector<Tensor>& inputs, std::string_view op) {
    Graph* graph = nullptr;
    for (const auto& t : inputs) {
        if (!t.has_node()) continue;
        if (graph && graph != t.graph()) {
            throw ShapeError(std::string(op), "inputs belong to different graphs");
        }
        graph = t.graph();
    }
    return graph;
}

Tensor finish(std::string_view op, Shape shape, Values values, std::vector<Tensor> inputs,
              BackwardFn backward) {
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericalError("non-finite output in op '" + std::string(op) + "'");
    }
    Tensor out(std::move(shape), std::move(values));
    Graph* graph = graph_of(inputs, op);
    if (graph == nullptr || !graph->recording()) return out;
    return graph->record(op, std::move(out), inputs, std::move(backward));
}

void require_defined(const char* op, const Tensor& t) {
    if (!t.defined()) throw ShapeError(op, "undefined input tensor");
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
    require_defined(op, a);
    require_defined(op, b);
    if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    require_defined(op, t);
    if (t.rank() != rank) {
        throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got shape " +
                                 to_string(t.shape()));
    }
}

template <class F>
Values map(const Tensor& x, F f) {
    Values out(x.size());
    auto in = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return out;
}

template <class F>
Values zip(const Tensor& a, const Tensor& b, F f) {
    Values out(a.size());
    auto va = a.values();
    auto vb = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(va[i], vb[i]);
    return out;
}

std::vector<Tensor> none(std::size_t n) { return std::vector<Tensor>(n); }

struct ConvGeometry {
    std::size_t n, c, h, w;      // input
    std::size_t o, k;            // output channels, kernel extent
    std::size_t oh, ow;          // output spatial extent
    std::size_t stride, pad;
};

ConvGeometry conv_geometry(const char* op, const Shape& in, const Shape& weight,
                           std::size_t stride, std::size_t pad) {
    if (in.size() != 4 || weight.size() != 4) throw ShapeError(op, in, weight);
    if (weight[1] != in[1] || weight[2] != weight[3]) throw ShapeError(op, in, weight);
    const std::size_t k = weight[2];
    if (k % 2 == 0) throw ShapeError(op, "kernel extent must be odd, got " + std::to_string(k));
    if (stride == 0) throw ShapeError(op, "stride must be positive");
    if (in[2] + 2 * pad < k || in[3] + 2 * pad < k) throw ShapeError(op, in, weight);
    ConvGeometry g{in[0], in[1], in[2], in[3], weight[0], k, 0, 0, stride, pad};
    g.oh = (g.h + 2 * pad - k) / stride + 1;
    g.ow = (g.w + 2 * pad - k) / stride + 1;
    return g;
}

// Unfolds sample n into columns [n*OH*OW, (n+1)*OH*OW) of a
// (C*K*K) x (N*OH*OW) matrix; padded taps are 0.
void im2col(const double* x, const ConvGeometry& g, std::size_t n, double* col) {
    const std::size_t plane = g.oh * g.ow, cols = g.n * plane;
    x += n * g.c * g.h * g.w;
    col += n * plane;
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                double* row = col + ((c * g.k + ki) * g.k + kj) * cols;
                for (std::size_t r = 0; r < g.oh; ++r) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(r * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + r * g.ow;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.ow, 0.0);
                        continue;
                    }
                    const double* src = x + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
                    if (g.stride == 1 && kj >= g.pad && kj - g.pad + g.ow <= g.w) {
                        std::copy_n(src + (kj - g.pad), g.ow, dst);
                        continue;
                    }
                    for (std::size_t q = 0; q < g.ow; ++q) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(q * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[q] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[iw];
                    }
                }
            }
}

// N x O x P  <->  O x (N*P)
void to_channel_major(const double* y, std::size_t n, std::size_t o, std::size_t plane, double* out) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < o; ++c)
            std::copy_n(y + (i * o + c) * plane, plane, out + c * n * plane + i * plane);
}

void from_channel_major(const double* in, std::size_t n, std::size_t o, std::size_t plane, double* y) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < o; ++c)
            std::copy_n(in + c * n * plane + i * plane, plane, y + (i * o + c) * plane);
}

// C[m, :] = sum_k A(m, k) B[k, :], with A(m, k) = a[m * am + k * ak].
void gemm(const double* a, std::size_t am, std::size_t ak, const double* b, double* c, std::size_t rows,
          std::size_t inner, std::size_t cols) {
    for (std::size_t m = 0; m < rows; ++m) {
        double* cp = c + m * cols;
        std::fill(cp, cp + cols, 0.0);
        const double* ap = a + m * am;
        std::size_t k = 0;
        for (; k + 4 <= inner; k += 4) {
            const double w0 = ap[k * ak], w1 = ap[(k + 1) * ak], w2 = ap[(k + 2) * ak], w3 = ap[(k + 3) * ak];
            const double* b0 = b + k * cols;
            const double* b1 = b0 + cols;
            const double* b2 = b1 + cols;
            const double* b3 = b2 + cols;
            for (std::size_t j = 0; j < cols; ++j) cp[j] += (w0 * b0[j] + w1 * b1[j]) + (w2 * b2[j] + w3 * b3[j]);
        }
        for (; k < inner; ++k) {
            const double w = ap[k * ak];
            const double* bp = b + k * cols;
            for (std::size_t j = 0; j < cols; ++j) cp[j] += w * bp[j];
        }
    }
}

double dot(const double* a, const double* b, std::size_t len) {
    double acc[4] = {0.0, 0.0, 0.0, 0.0};
    std::size_t j = 0;
    for (; j + 4 <= len; j += 4)
        for (std::size_t l = 0; l < 4; ++l) acc[l] += a[j + l] * b[j + l];
    for (; j < len; ++j) acc[0] += a[j] * b[j];
    return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

// Adjoint of im2col for sample n.
void col2im_add(const double* col, const ConvGeometry& g, std::size_t n, double* x) {
    const std::size_t plane = g.oh * g.ow, cols = g.n * plane;
    x += n * g.c * g.h * g.w;
    col += n * plane;
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const double* row = col + ((c * g.k + ki) * g.k + kj) * cols;
                for (std::size_t r = 0; r < g.oh; ++r) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(r * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    double* dst = x + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
                    const double* src = row + r * g.ow;
                    for (std::size_t q = 0; q < g.ow; ++q) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(q * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) dst[iw] += src[q];
                    }
                }
            }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same("add", a, b);
    return finish("add", a.shape(), zip(a, b, [](double x, double y) { return x + y; }), {a, b},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{g, g};
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same("sub", a, b);
    return finish("sub", a.shape(), zip(a, b, [](double x, double y) { return x - y; }), {a, b},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      auto out = none(2);
                      if (needs[0]) out[0] = g;
                      if (needs[1]) out[1] = scale(g, -1.0);
                      return out;
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same("mul", a, b);
    return finish("mul", a.shape(), zip(a, b, [](double x, double y) { return x * y; }), {a, b},
                  [a, b](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      auto out = none(2);
                      if (needs[0]) out[0] = mul(g, b);
                      if (needs[1]) out[1] = mul(g, a);
                      return out;
                  });
}

Tensor div(const Tensor& a, const Tensor& b, double guard) {
    require_same("div", a, b);
    return finish("div", a.shape(),
                  zip(a, b, [guard](double x, double y) { return x / (y + guard); }), {a, b},
                  [b, guard](const Tensor& g, const Tensor& out, const std::vector<bool>& needs) {
                      auto grads = none(2);
                      if (needs[0]) grads[0] = div(g, b, guard);
                      // d/db a/(b+γ) = -out/(b+γ)
                      if (needs[1]) grads[1] = scale(mul(g, div(out, b, guard)), -1.0);
                      return grads;
                  });
}

Tensor scale(const Tensor& x, double factor) {
    require_defined("scale", x);
    return finish("scale", x.shape(), map(x, [factor](double v) { return v * factor; }), {x},
                  [factor](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{scale(g, factor)};
                  });
}

Tensor add_scalar(const Tensor& x, double offset) {
    require_defined("add_scalar", x);
    return finish("add_scalar", x.shape(), map(x, [offset](double v) { return v + offset; }), {x},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{g};
                  });
}

Tensor relu(const Tensor& x) {
    require_defined("relu", x);
    return finish("relu", x.shape(), map(x, [](double v) { return v > 0.0 ? v : 0.0; }), {x},
                  [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      Tensor mask(x.shape(), map(x, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
                      return std::vector<Tensor>{mul(g, mask)};
                  });
}

Tensor sigmoid(const Tensor& x) {
    require_defined("sigmoid", x);
    auto f = [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    };
    return finish("sigmoid", x.shape(), map(x, f), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      // s' = s (1 - s)
                      Tensor deriv = mul(out, add_scalar(scale(out, -1.0), 1.0));
                      return std::vector<Tensor>{mul(g, deriv)};
                  });
}

Tensor exp(const Tensor& x) {
    require_defined("exp", x);
    return finish("exp", x.shape(), map(x, [](double v) { return std::exp(v); }), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, out)};
                  });
}

Tensor square(const Tensor& x) {
    require_defined("square", x);
    return finish("square", x.shape(), map(x, [](double v) { return v * v; }), {x},
                  [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, scale(x, 2.0))};
                  });
}

Tensor sqrt(const Tensor& x) {
    require_defined("sqrt", x);
    for (double v : x.values()) {
        if (v < 0.0) throw NumericalError("non-finite output in op 'sqrt' (negative input)");
    }
    return finish("sqrt", x.shape(), map(x, [](double v) { return std::sqrt(v); }), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, scale(recip_nonzero(out), 0.5))};
                  });
}

Tensor abs(const Tensor& x) {
    require_defined("abs", x);
    return finish("abs", x.shape(), map(x, [](double v) { return std::abs(v); }), {x},
                  [x](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      Tensor sign(x.shape(), map(x, [](double v) {
                                      return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                                  }));
                      return std::vector<Tensor>{mul(g, sign)};
                  });
}

Tensor recip_nonzero(const Tensor& x) {
    require_defined("recip_nonzero", x);
    return finish("recip_nonzero", x.shape(),
                  map(x, [](double v) { return v != 0.0 ? 1.0 / v : 0.0; }), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      return std::vector<Tensor>{scale(mul(g, square(out)), -1.0)};
                  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
    Values out(m * n, 0.0);
    auto va = a.values();
    auto vb = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = va[i * k + p];
            const double* brow = vb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
    }
    return finish("matmul", {m, n}, std::move(out), {a, b},
                  [a, b](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      auto grads = none(2);
                      if (needs[0]) grads[0] = matmul(g, transpose(b));
                      if (needs[1]) grads[1] = matmul(transpose(a), g);
                      return grads;
                  });
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t m = a.dim(0), n = a.dim(1);
    Values out(m * n);
    auto va = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = va[i * n + j];
    return finish("transpose", {n, m}, std::move(out), {a},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{transpose(g)};
                  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, transpose(weight)), bias);
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_defined("add_bias", x);
    require_rank("add_bias", bias, 1);
    if (x.rank() < 2 || x.dim(1) != bias.dim(0)) throw ShapeError("add_bias", x.shape(), bias.shape());
    const std::size_t channels = x.dim(1);
    const std::size_t inner = x.size() / (x.dim(0) * channels);
    Values out(x.values().begin(), x.values().end());
    auto vb = bias.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[(i / inner) % channels];
    return finish("add_bias", x.shape(), std::move(out), {x, bias},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      auto grads = none(2);
                      if (needs[0]) grads[0] = g;
                      if (needs[1]) grads[1] = channel_sum(g);
                      return grads;
                  });
}

Tensor channel_sum(const Tensor& x) {
    require_defined("channel_sum", x);
    if (x.rank() < 2) throw ShapeError("channel_sum", "expected rank >= 2, got " + to_string(x.shape()));
    const std::size_t channels = x.dim(1);
    const std::size_t inner = x.size() / (x.dim(0) * channels);
    Values out(channels, 0.0);
    auto v = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) out[(i / inner) % channels] += v[i];
    Shape in_shape = x.shape();
    return finish("channel_sum", {channels}, std::move(out), {x},
                  [in_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{channel_expand(g, in_shape)};
                  });
}

Tensor channel_expand(const Tensor& bias, const Shape& shape) {
    require_rank("channel_expand", bias, 1);
    if (shape.size() < 2 || shape[1] != bias.dim(0)) throw ShapeError("channel_expand", bias.shape(), shape);
    const std::size_t channels = shape[1];
    const std::size_t total = numel(shape);
    const std::size_t inner = total / (shape[0] * channels);
    Values out(total);
    auto vb = bias.values();
    for (std::size_t i = 0; i < total; ++i) out[i] = vb[(i / inner) % channels];
    return finish("channel_expand", shape, std::move(out), {bias},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{channel_sum(g)};
                  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t pad) {
    require_defined("conv2d", x);
    require_defined("conv2d", weight);
    const auto g = conv_geometry("conv2d", x.shape(), weight.shape(), stride, pad);
    Values out(g.n * g.o * g.oh * g.ow, 0.0);
    const double* xv = x.values().data();
    const double* wv = weight.values().data();
    double* yv = out.data();
    const std::size_t taps = g.c * g.k * g.k, cols = g.n * g.oh * g.ow;
    Values col(taps * cols), ym(g.o * cols);
    for (std::size_t n = 0; n < g.n; ++n) im2col(xv, g, n, col.data());
    gemm(wv, taps, 1, col.data(), ym.data(), g.o, taps, cols);
    from_channel_major(ym.data(), g.n, g.o, g.oh * g.ow, yv);
    Shape in_shape = x.shape();
    const std::size_t k = g.k;
    return finish("conv2d", {g.n, g.o, g.oh, g.ow}, std::move(out), {x, weight},
                  [x, weight, stride, pad, in_shape, k](const Tensor& gy, const Tensor&,
                                                        const std::vector<bool>& needs) {
                      auto grads = none(2);
                      if (needs[0]) grads[0] = conv2d_input_grad(gy, weight, stride, pad, in_shape);
                      if (needs[1]) grads[1] = conv2d_weight_grad(x, gy, stride, pad, k);
                      return grads;
                  });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& weight, std::size_t stride,
                         std::size_t pad, const Shape& input_shape) {
    require_defined("conv2d_input_grad", grad_out);
    require_defined("conv2d_input_grad", weight);
    const auto g = conv_geometry("conv2d_input_grad", input_shape, weight.shape(), stride, pad);
    const Shape expected{g.n, g.o, g.oh, g.ow};
    if (grad_out.shape() != expected) throw ShapeError("conv2d_input_grad", grad_out.shape(), expected);
    Values out(numel(input_shape), 0.0);
    const double* gv = grad_out.values().data();
    const double* wv = weight.values().data();
    double* xv = out.data();
    const std::size_t taps = g.c * g.k * g.k, cols = g.n * g.oh * g.ow;
    Values col(taps * cols), gm(g.o * cols);
    to_channel_major(gv, g.n, g.o, g.oh * g.ow, gm.data());
    gemm(wv, 1, taps, gm.data(), col.data(), taps, g.o, cols);
    for (std::size_t n = 0; n < g.n; ++n) col2im_add(col.data(), g, n, xv);
    return finish("conv2d_input_grad", input_shape, std::move(out), {grad_out, weight},
                  [grad_out, weight, stride, pad, k = g.k](const Tensor& gz, const Tensor&,
                                                           const std::vector<bool>& needs) {
                      auto grads = none(2);
                      if (needs[0]) grads[0] = conv2d(gz, weight, stride, pad);
                      if (needs[1]) grads[1] = conv2d_weight_grad(gz, grad_out, stride, pad, k);
                      return grads;
                  });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad, std::size_t kernel) {
    require_rank("conv2d_weight_grad", x, 4);
    require_rank("conv2d_weight_grad", grad_out, 4);
    const Shape w_shape{grad_out.dim(1), x.dim(1), kernel, kernel};
    const auto g = conv_geometry("conv2d_weight_grad", x.shape(), w_shape, stride, pad);
    const Shape expected{g.n, g.o, g.oh, g.ow};
    if (grad_out.shape() != expected) throw ShapeError("conv2d_weight_grad", grad_out.shape(), expected);
    Values out(numel(w_shape), 0.0);
    const double* xv = x.values().data();
    const double* gv = grad_out.values().data();
    const std::size_t taps = g.c * g.k * g.k, cols = g.n * g.oh * g.ow;
    Values col(taps * cols), gm(g.o * cols);
    for (std::size_t n = 0; n < g.n; ++n) im2col(xv, g, n, col.data());
    to_channel_major(gv, g.n, g.o, g.oh * g.ow, gm.data());
    for (std::size_t o = 0; o < g.o; ++o)
        for (std::size_t t = 0; t < taps; ++t)
            out[o * taps + t] = dot(gm.data() + o * cols, col.data() + t * cols, cols);
    Shape in_shape = x.shape();
    return finish("conv2d_weight_grad", w_shape, std::move(out), {x, grad_out},
                  [x, grad_out, stride, pad, in_shape](const Tensor& gz, const Tensor&,
                                                       const std::vector<bool>& needs) {
                      auto grads = none(2);
                      if (needs[0]) grads[0] = conv2d_input_grad(grad_out, gz, stride, pad, in_shape);
                      if (needs[1]) grads[1] = conv2d(x, gz, stride, pad);
                      return grads;
                  });
}

Tensor upsample2x(const Tensor& x) {
    require_rank("upsample2x", x, 4);
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Values out(planes * 4 * h * w);
    auto v = x.values();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < 2 * h; ++i)
            for (std::size_t j = 0; j < 2 * w; ++j)
                out[(p * 2 * h + i) * 2 * w + j] = v[(p * h + i / 2) * w + j / 2];
    return finish("upsample2x", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{sum_pool2x(g)};
                  });
}

Tensor sum_pool2x(const Tensor& x) {
    require_rank("sum_pool2x", x, 4);
    if (x.dim(2) % 2 || x.dim(3) % 2) throw ShapeError("sum_pool2x", "odd spatial extent in " + to_string(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2) / 2, w = x.dim(3) / 2;
    Values out(planes * h * w, 0.0);
    auto v = x.values();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < 2 * h; ++i)
            for (std::size_t j = 0; j < 2 * w; ++j)
                out[(p * h + i / 2) * w + j / 2] += v[(p * 2 * h + i) * 2 * w + j];
    return finish("sum_pool2x", {x.dim(0), x.dim(1), h, w}, std::move(out), {x},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{upsample2x(g)};
                  });
}

Tensor spatial_sum(const Tensor& x) {
    require_rank("spatial_sum", x, 4);
    const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
    Values out(planes, 0.0);
    auto v = x.values();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < area; ++i) out[p] += v[p * area + i];
    const std::size_t h = x.dim(2), w = x.dim(3);
    return finish("spatial_sum", {x.dim(0), x.dim(1)}, std::move(out), {x},
                  [h, w](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{spatial_expand(g, h, w)};
                  });
}

Tensor spatial_expand(const Tensor& x, std::size_t height, std::size_t width) {
    require_rank("spatial_expand", x, 2);
    const std::size_t planes = x.size(), area = height * width;
    Values out(planes * area);
    auto v = x.values();
    for (std::size_t p = 0; p < planes; ++p)
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(p * area), area, v[p]);
    return finish("spatial_expand", {x.dim(0), x.dim(1), height, width}, std::move(out), {x},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{spatial_sum(g)};
                  });
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank("global_avg_pool", x, 4);
    return scale(spatial_sum(x), 1.0 / static_cast<double>(x.dim(2) * x.dim(3)));
}

Tensor log_softmax(const Tensor& x) {
    require_rank("log_softmax", x, 2);
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Values out(x.size());
    auto v = x.values();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* row = v.data() + i * cols;
        const double peak = *std::max_element(row, row + cols);
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) total += std::exp(row[j] - peak);
        const double lse = peak + std::log(total);
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = row[j] - lse;
    }
    return finish("log_softmax", x.shape(), std::move(out), {x},
                  [](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      // g - softmax * rowsum(g)
                      Tensor rowsum = expand_per_sample(sum_per_sample(g), g.shape());
                      return std::vector<Tensor>{sub(g, mul(exp(out), rowsum))};
                  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    require_defined("reshape", x);
    if (numel(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape);
    Shape in_shape = x.shape();
    return finish("reshape", shape, Values(x.values().begin(), x.values().end()), {x},
                  [in_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{reshape(g, in_shape)};
                  });
}

Tensor narrow(const Tensor& x, std::size_t start, std::size_t length) {
    require_defined("narrow", x);
    if (x.rank() < 2 || length == 0 || start + length > x.dim(1)) {
        throw ShapeError("narrow", "range [" + std::to_string(start) + ", " +
                                       std::to_string(start + length) + ") outside axis 1 of " +
                                       to_string(x.shape()));
    }
    const std::size_t outer = x.dim(0), channels = x.dim(1);
    const std::size_t inner = x.size() / (outer * channels);
    Shape shape = x.shape();
    shape[1] = length;
    Values out(outer * length * inner);
    auto v = x.values();
    for (std::size_t n = 0; n < outer; ++n)
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>((n * channels + start) * inner),
                    length * inner, out.begin() + static_cast<std::ptrdiff_t>(n * length * inner));
    return finish("narrow", shape, std::move(out), {x},
                  [start, channels](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{widen(g, start, channels)};
                  });
}

Tensor widen(const Tensor& x, std::size_t start, std::size_t total) {
    require_defined("widen", x);
    if (x.rank() < 2 || start + x.dim(1) > total) {
        throw ShapeError("widen", "cannot place " + to_string(x.shape()) + " at offset " +
                                      std::to_string(start) + " of " + std::to_string(total));
    }
    const std::size_t outer = x.dim(0), length = x.dim(1);
    const std::size_t inner = x.size() / (outer * length);
    Shape shape = x.shape();
    shape[1] = total;
    Values out(outer * total * inner, 0.0);
    auto v = x.values();
    for (std::size_t n = 0; n < outer; ++n)
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(n * length * inner), length * inner,
                    out.begin() + static_cast<std::ptrdiff_t>((n * total + start) * inner));
    return finish("widen", shape, std::move(out), {x},
                  [start, length](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{narrow(g, start, length)};
                  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_channels", "no inputs");
    const Tensor& first = parts.front();
    require_defined("concat_channels", first);
    if (first.rank() < 2) throw ShapeError("concat_channels", "expected rank >= 2, got " + to_string(first.shape()));
    std::size_t channels = 0;
    for (const auto& p : parts) {
        require_defined("concat_channels", p);
        Shape a = p.shape(), b = first.shape();
        if (a.size() != b.size()) throw ShapeError("concat_channels", a, b);
        a[1] = b[1] = 0;
        if (a != b) throw ShapeError("concat_channels", p.shape(), first.shape());
        channels += p.dim(1);
    }
    const std::size_t outer = first.dim(0);
    const std::size_t inner = first.size() / (outer * first.dim(1));
    Shape shape = first.shape();
    shape[1] = channels;
    Values out(outer * channels * inner);
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        auto v = p.values();
        const std::size_t len = p.dim(1) * inner;
        for (std::size_t n = 0; n < outer; ++n)
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(n * len), len,
                        out.begin() + static_cast<std::ptrdiff_t>((n * channels + offset) * inner));
        offsets.push_back(offset);
        offset += p.dim(1);
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    return finish("concat_channels", shape, std::move(out), inputs,
                  [offsets, widths](const Tensor& g, const Tensor&, const std::vector<bool>& needs) {
                      auto grads = none(offsets.size());
                      for (std::size_t i = 0; i < offsets.size(); ++i)
                          if (needs[i]) grads[i] = narrow(g, offsets[i], widths[i]);
                      return grads;
                  });
}

Tensor sum(const Tensor& x) {
    require_defined("sum", x);
    double total = 0.0;
    for (double v : x.values()) total += v;
    Shape in_shape = x.shape();
    return finish("sum", {}, {total}, {x},
                  [in_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{expand_scalar(g, in_shape)};
                  });
}

Tensor mean(const Tensor& x) {
    require_defined("mean", x);
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor expand_scalar(const Tensor& s, const Shape& shape) {
    require_defined("expand_scalar", s);
    if (s.size() != 1) throw ShapeError("expand_scalar", s.shape(), shape);
    Shape in_shape = s.shape();
    return finish("expand_scalar", shape, Values(numel(shape), s[0]), {s},
                  [in_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{reshape(sum(g), in_shape)};
                  });
}

Tensor sum_per_sample(const Tensor& x) {
    require_defined("sum_per_sample", x);
    if (x.rank() < 1) throw ShapeError("sum_per_sample", "expected rank >= 1");
    const std::size_t outer = x.dim(0), inner = x.size() / outer;
    Values out(outer, 0.0);
    auto v = x.values();
    for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t i = 0; i < inner; ++i) out[n] += v[n * inner + i];
    Shape in_shape = x.shape();
    return finish("sum_per_sample", {outer}, std::move(out), {x},
                  [in_shape](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{expand_per_sample(g, in_shape)};
                  });
}

Tensor mean_per_sample(const Tensor& x) {
    require_defined("mean_per_sample", x);
    return scale(sum_per_sample(x), static_cast<double>(x.dim(0)) / static_cast<double>(x.size()));
}

Tensor expand_per_sample(const Tensor& v, const Shape& shape) {
    require_rank("expand_per_sample", v, 1);
    if (shape.empty() || shape[0] != v.dim(0)) throw ShapeError("expand_per_sample", v.shape(), shape);
    const std::size_t outer = shape[0], inner = numel(shape) / outer;
    Values out(outer * inner);
    auto vv = v.values();
    for (std::size_t n = 0; n < outer; ++n)
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(n * inner), inner, vv[n]);
    return finish("expand_per_sample", shape, std::move(out), {v},
                  [](const Tensor& g, const Tensor&, const std::vector<bool>&) {
                      return std::vector<Tensor>{sum_per_sample(g)};
                  });
}

Tensor l2norm(const Tensor& x) {
    require_defined("l2norm", x);
    double total = 0.0;
    for (double v : x.values()) total += v * v;
    return finish("l2norm", {}, {std::sqrt(total)}, {x},
                  [x](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      Tensor factor = expand_scalar(mul(g, recip_nonzero(out)), x.shape());
                      return std::vector<Tensor>{mul(x, factor)};
                  });
}

Tensor l2norm_per_sample(const Tensor& x) {
    require_defined("l2norm_per_sample", x);
    if (x.rank() < 1) throw ShapeError("l2norm_per_sample", "expected rank >= 1");
    const std::size_t outer = x.dim(0), inner = x.size() / outer;
    Values out(outer, 0.0);
    auto v = x.values();
    for (std::size_t n = 0; n < outer; ++n) {
        double total = 0.0;
        for (std::size_t i = 0; i < inner; ++i) total += v[n * inner + i] * v[n * inner + i];
        out[n] = std::sqrt(total);
    }
    return finish("l2norm_per_sample", {outer}, std::move(out), {x},
                  [x](const Tensor& g, const Tensor& out, const std::vector<bool>&) {
                      Tensor factor = expand_per_sample(mul(g, recip_nonzero(out)), x.shape());
                      return std::vector<Tensor>{mul(x, factor)};
                  });
}

}  // namespace rlar::ad
