#include "rlar/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "rlar/ad/ops.hpp"

namespace rlar::ad {

Tensor analytic_grad(const ScalarFn& f, const Tensor& x) {
    Graph graph;
    Tensor leaf = graph.leaf(x);
    Tensor value = f(graph, leaf);
    const Tensor wrt[] = {leaf};
    return graph.grad(value, wrt, false).grads.front();
}

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
    Graph graph;
    Tensor value = f(graph, graph.leaf(x));
    const double v = value.item();
    if (!std::isfinite(v)) throw NumericalError("finite_diff_check: non-finite function value");
    return v;
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const Tensor& x, double step) {
    const Tensor analytic = analytic_grad(f, x);
    std::vector<double> probe(x.values().begin(), x.values().end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + step;
        const double up = evaluate(f, Tensor(x.shape(), probe));
        probe[i] = saved - step;
        const double down = evaluate(f, Tensor(x.shape(), probe));
        probe[i] = saved;
        const double central = (up - down) / (2.0 * step);
        worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + 1e-12));
    }
    return worst;
}

namespace {

using Rng = std::mt19937_64;

Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& e : v) e = dist(rng);
    return Tensor(shape, std::move(v));
}

// Values with magnitude in [lo, hi] and random sign; keeps probes away from kinks.
Tensor away_from_zero(Rng& rng, const Shape& shape, double lo, double hi) {
    std::uniform_real_distribution<double> mag(lo, hi);
    std::bernoulli_distribution flip(0.5);
    std::vector<double> v(numel(shape));
    for (auto& e : v) e = flip(rng) ? -mag(rng) : mag(rng);
    return Tensor(shape, std::move(v));
}

// Scalar probe sum(R * y) with a fixed pseudo-random R regenerated from seed.
Tensor project(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(y, away_from_zero(rng, y.shape(), 0.5, 1.5).detach()));
}

struct Case {
    ScalarFn f;
    Tensor x;
};

using Factory = std::function<Case(Rng&)>;

// x is packed as a flat vector; slice(x, start, shape) views part of it.
Tensor slice(const Tensor& x, std::size_t start, const Shape& shape) {
    Tensor row = reshape(x, {1, x.size()});
    return reshape(narrow(row, start, numel(shape)), shape);
}

template <class Op>
Factory unary(Shape shape, Op op, double lo = -2.0, double hi = 2.0, bool avoid_zero = false) {
    return [=](Rng& rng) {
        const std::uint64_t seed = rng();
        Tensor x = avoid_zero ? away_from_zero(rng, shape, lo, hi) : uniform(rng, shape, lo, hi);
        return Case{[=](Graph&, const Tensor& in) { return project(op(in), seed); }, x};
    };
}

// Binary op checked w.r.t. one argument; the other is a fixed constant.
template <class Op>
Factory binary(Shape shape_a, Shape shape_b, bool wrt_first, Op op, double lo = -2.0,
               double hi = 2.0) {
    return [=](Rng& rng) {
        const std::uint64_t seed = rng();
        Tensor a = uniform(rng, shape_a, lo, hi);
        Tensor b = uniform(rng, shape_b, lo, hi);
        if (wrt_first) {
            return Case{[=](Graph&, const Tensor& in) { return project(op(in, b), seed); }, a};
        }
        return Case{[=](Graph&, const Tensor& in) { return project(op(a, in), seed); }, b};
    };
}

// Hessian-vector check: G(x) = <V, grad F(x)> with F built on a recording
// graph, then G's own gradient is compared with finite differences.
Factory hvp(Factory first_order) {
    return [first_order](Rng& rng) {
        Case base = first_order(rng);
        const std::uint64_t seed = rng();
        ScalarFn inner = base.f;
        ScalarFn outer = [inner, seed](Graph& graph, const Tensor& x) {
            Tensor value = inner(graph, x);
            const Tensor wrt[] = {x};
            auto result = graph.grad(value, wrt, true);
            return project(result.grads.front(), seed);
        };
        return Case{outer, base.x};
    };
}

struct Entry {
    std::string name;
    Factory factory;
};

std::vector<Entry> first_order_entries() {
    using S = Shape;
    std::vector<Entry> e;
    e.push_back({"add", binary(S{3, 4}, S{3, 4}, true, [](auto a, auto b) { return add(a, b); })});
    e.push_back({"sub", binary(S{3, 4}, S{3, 4}, false, [](auto a, auto b) { return sub(a, b); })});
    e.push_back({"mul(a)", binary(S{3, 4}, S{3, 4}, true, [](auto a, auto b) { return mul(a, b); })});
    e.push_back({"mul(b)", binary(S{3, 4}, S{3, 4}, false, [](auto a, auto b) { return mul(a, b); })});
    e.push_back({"div(a)", binary(S{5}, S{5}, true,
                                  [](auto a, auto b) { return div(a, add_scalar(abs(b), 0.5), 0.1); })});
    e.push_back({"div(b)", binary(S{5}, S{5}, false, [](auto a, auto b) {
                     return div(a, add_scalar(square(b), 0.5), 0.1);
                 })});
    e.push_back({"scale", unary(S{6}, [](auto x) { return scale(x, -1.7); })});
    e.push_back({"add_scalar", unary(S{6}, [](auto x) { return add_scalar(x, 0.3); })});
    e.push_back({"relu", unary(S{2, 3, 4}, [](auto x) { return relu(x); }, 0.05, 2.0, true)});
    e.push_back({"sigmoid", unary(S{2, 5}, [](auto x) { return sigmoid(x); })});
    e.push_back({"exp", unary(S{7}, [](auto x) { return exp(x); })});
    e.push_back({"square", unary(S{7}, [](auto x) { return square(x); })});
    e.push_back({"sqrt", unary(S{7}, [](auto x) { return sqrt(x); }, 0.5, 2.0)});
    e.push_back({"abs", unary(S{7}, [](auto x) { return abs(x); }, 0.05, 2.0, true)});
    e.push_back({"recip_nonzero", unary(S{7}, [](auto x) { return recip_nonzero(x); }, 0.5, 2.0, true)});
    e.push_back({"matmul(a)", binary(S{3, 4}, S{4, 2}, true, [](auto a, auto b) { return matmul(a, b); })});
    e.push_back({"matmul(b)", binary(S{3, 4}, S{4, 2}, false, [](auto a, auto b) { return matmul(a, b); })});
    e.push_back({"transpose", unary(S{3, 5}, [](auto x) { return transpose(x); })});
    e.push_back({"add_bias(x)", binary(S{2, 3, 2, 2}, S{3}, true, [](auto a, auto b) { return add_bias(a, b); })});
    e.push_back({"add_bias(b)", binary(S{2, 3, 2, 2}, S{3}, false, [](auto a, auto b) { return add_bias(a, b); })});
    e.push_back({"channel_sum", unary(S{2, 3, 2, 2}, [](auto x) { return channel_sum(x); })});
    e.push_back({"channel_expand", unary(S{3}, [](auto x) { return channel_expand(x, {2, 3, 2}); })});
    for (std::size_t stride : {1u, 2u}) {
        const std::string tag = "(s" + std::to_string(stride) + ")";
        e.push_back({"conv2d(x)" + tag, binary(S{2, 2, 5, 6}, S{3, 2, 3, 3}, true,
                                               [stride](auto x, auto w) { return conv2d(x, w, stride, 1); })});
        e.push_back({"conv2d(w)" + tag, binary(S{2, 2, 5, 6}, S{3, 2, 3, 3}, false,
                                               [stride](auto x, auto w) { return conv2d(x, w, stride, 1); })});
        const S in{2, 2, 6, 5};
        const S out = stride == 1 ? S{2, 3, 6, 5} : S{2, 3, 3, 3};
        e.push_back({"conv2d_input_grad(g)" + tag,
                     binary(out, S{3, 2, 3, 3}, true, [stride, in](auto g, auto w) {
                         return conv2d_input_grad(g, w, stride, 1, in);
                     })});
        e.push_back({"conv2d_input_grad(w)" + tag,
                     binary(out, S{3, 2, 3, 3}, false, [stride, in](auto g, auto w) {
                         return conv2d_input_grad(g, w, stride, 1, in);
                     })});
        e.push_back({"conv2d_weight_grad(x)" + tag,
                     binary(in, out, true, [stride](auto x, auto g) {
                         return conv2d_weight_grad(x, g, stride, 1, 3);
                     })});
        e.push_back({"conv2d_weight_grad(g)" + tag,
                     binary(in, out, false, [stride](auto x, auto g) {
                         return conv2d_weight_grad(x, g, stride, 1, 3);
                     })});
    }
    e.push_back({"conv2d(x)(1x1)", binary(S{1, 3, 4, 4}, S{2, 3, 1, 1}, true,
                                          [](auto x, auto w) { return conv2d(x, w, 1, 0); })});
    e.push_back({"upsample2x", unary(S{1, 2, 3, 2}, [](auto x) { return upsample2x(x); })});
    e.push_back({"sum_pool2x", unary(S{1, 2, 4, 6}, [](auto x) { return sum_pool2x(x); })});
    e.push_back({"spatial_sum", unary(S{2, 3, 2, 3}, [](auto x) { return spatial_sum(x); })});
    e.push_back({"spatial_expand", unary(S{2, 3}, [](auto x) { return spatial_expand(x, 2, 2); })});
    e.push_back({"global_avg_pool", unary(S{2, 3, 2, 3}, [](auto x) { return global_avg_pool(x); })});
    e.push_back({"log_softmax", unary(S{3, 5}, [](auto x) { return log_softmax(x); })});
    e.push_back({"reshape", unary(S{2, 6}, [](auto x) { return reshape(x, {3, 4}); })});
    e.push_back({"narrow", unary(S{2, 5, 2}, [](auto x) { return narrow(x, 1, 3); })});
    e.push_back({"widen", unary(S{2, 2, 3}, [](auto x) { return widen(x, 1, 4); })});
    e.push_back({"concat_channels", unary(S{2, 3, 2, 2}, [](auto x) {
                     const Tensor parts[] = {x, square(narrow(x, 1, 2)), x};
                     return concat_channels(parts);
                 })});
    e.push_back({"sum", unary(S{3, 3}, [](auto x) { return sum(x); })});
    e.push_back({"mean", unary(S{3, 3}, [](auto x) { return mean(x); })});
    e.push_back({"expand_scalar", unary(S{}, [](auto x) { return expand_scalar(x, {2, 3}); })});
    e.push_back({"sum_per_sample", unary(S{3, 2, 2}, [](auto x) { return sum_per_sample(x); })});
    e.push_back({"mean_per_sample", unary(S{3, 2, 2}, [](auto x) { return mean_per_sample(x); })});
    e.push_back({"expand_per_sample", unary(S{3}, [](auto x) { return expand_per_sample(x, {3, 2, 2}); })});
    e.push_back({"l2norm", unary(S{2, 3, 2}, [](auto x) { return l2norm(x); })});
    e.push_back({"l2norm_per_sample", unary(S{3, 4}, [](auto x) { return l2norm_per_sample(x); })});
    return e;
}

std::vector<Entry> second_order_entries() {
    using S = Shape;
    std::vector<Entry> e;
    auto packed = [](std::size_t n, auto body) {
        return hvp(unary(S{n}, body, -1.5, 1.5));
    };
    e.push_back({"hvp:mul", packed(8, [](auto x) { return mul(slice(x, 0, {4}), slice(x, 4, {4})); })});
    e.push_back({"hvp:div", packed(8, [](auto x) {
                     return div(slice(x, 0, {4}), add_scalar(square(slice(x, 4, {4})), 0.5), 0.1);
                 })});
    e.push_back({"hvp:sigmoid", hvp(unary(S{2, 4}, [](auto x) { return sigmoid(x); }))});
    e.push_back({"hvp:exp", hvp(unary(S{5}, [](auto x) { return exp(x); }))});
    e.push_back({"hvp:square", hvp(unary(S{5}, [](auto x) { return square(x); }))});
    e.push_back({"hvp:sqrt", hvp(unary(S{5}, [](auto x) { return sqrt(x); }, 0.5, 2.0))});
    e.push_back({"hvp:recip_nonzero", hvp(unary(S{5}, [](auto x) { return recip_nonzero(x); }, 0.5, 2.0, true))});
    e.push_back({"hvp:log_softmax", hvp(unary(S{2, 5}, [](auto x) { return log_softmax(x); }))});
    e.push_back({"hvp:l2norm", hvp(unary(S{2, 4}, [](auto x) { return l2norm(x); }))});
    e.push_back({"hvp:l2norm_per_sample", hvp(unary(S{2, 4}, [](auto x) { return l2norm_per_sample(x); }))});
    // bilinear ops: both arguments come from the probed vector
    e.push_back({"hvp:matmul", packed(14, [](auto x) {
                     return matmul(slice(x, 0, {2, 3}), slice(x, 6, {3, 2}));
                 })});
    e.push_back({"hvp:conv2d", packed(2 * 1 * 4 * 4 + 2 * 1 * 3 * 3, [](auto x) {
                     Tensor img = slice(x, 0, {2, 1, 4, 4});
                     Tensor w = slice(x, 32, {2, 1, 3, 3});
                     return conv2d(img, w, 2, 1);
                 })});
    e.push_back({"hvp:conv2d_input_grad", packed(2 * 2 * 2 * 2 + 2 * 1 * 3 * 3, [](auto x) {
                     Tensor g = slice(x, 0, {2, 2, 2, 2});
                     Tensor w = slice(x, 16, {2, 1, 3, 3});
                     return conv2d_input_grad(g, w, 2, 1, {2, 1, 4, 4});
                 })});
    e.push_back({"hvp:conv2d_weight_grad", packed(2 * 1 * 4 * 4 + 2 * 2 * 2 * 2, [](auto x) {
                     Tensor img = slice(x, 0, {2, 1, 4, 4});
                     Tensor g = slice(x, 32, {2, 2, 2, 2});
                     return conv2d_weight_grad(img, g, 2, 1, 3);
                 })});
    e.push_back({"hvp:abs_cosine", hvp(unary(S{2, 6}, [](auto x) {
                     Tensor a = narrow(x, 0, 3);
                     Tensor b = narrow(x, 3, 3);
                     Tensor dot = sum_per_sample(mul(a, b));
                     Tensor norms = mul(l2norm_per_sample(a), l2norm_per_sample(b));
                     return abs(mul(dot, recip_nonzero(norms)));
                 }, 0.2, 1.5, true))});
    return e;
}

OpCheck quadratic_double_backward(const GradcheckOptions& options) {
    OpCheck check{"double_backward:quadratic", 0.0, 1e-8, false};
    Rng rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> dim(2, 6);
    for (int trial = 0; trial < options.trials; ++trial) {
        const std::size_t n = dim(rng);
        Tensor raw = uniform(rng, {n, n}, -1.0, 1.0);
        std::vector<double> sym(n * n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) sym[i * n + j] = raw[i * n + j] + raw[j * n + i];
        Tensor a({n, n}, sym);
        Tensor x0 = uniform(rng, {n, 1}, -1.0, 1.0);

        Graph graph;
        Tensor x = graph.leaf(x0);
        Tensor f = scale(sum(mul(x, matmul(a, x))), 0.5);
        const Tensor wrt[] = {x};
        Tensor g = graph.grad(f, wrt, true).grads.front();
        Tensor half_norm = scale(sum(square(g)), 0.5);
        Tensor hg = graph.grad(half_norm, wrt, false).grads.front();

        // A^T A x by hand
        for (std::size_t i = 0; i < n; ++i) {
            double expected = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                double ax = 0.0;
                for (std::size_t j = 0; j < n; ++j) ax += sym[k * n + j] * x0[j];
                expected += sym[k * n + i] * ax;
            }
            check.max_error = std::max(check.max_error, std::abs(hg[i] - expected));
        }
    }
    check.passed = check.max_error < check.tolerance;
    return check;
}

}  // namespace

std::vector<OpCheck> run_gradcheck_suite(const GradcheckOptions& options) {
    std::vector<OpCheck> checks;
    Rng rng(options.seed);
    auto run = [&](const std::vector<Entry>& entries) {
        for (const auto& entry : entries) {
            OpCheck check{entry.name, 0.0, options.tolerance, false};
            for (int trial = 0; trial < options.trials; ++trial) {
                Case c = entry.factory(rng);
                check.max_error =
                    std::max(check.max_error, finite_diff_check(c.f, c.x, options.step));
            }
            check.passed = check.max_error < check.tolerance;
            checks.push_back(check);
        }
    };
    run(first_order_entries());
    run(second_order_entries());
    checks.push_back(quadratic_double_backward(options));
    return checks;
}

}  // namespace rlar::ad
