#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rlar/ad/graph.hpp"

namespace rlar::ad {

// A scalar-valued function evaluated on a fresh graph, with x as a leaf of
// that graph. Taking the graph lets f differentiate internally (e.g. to
// check gradients of gradient norms).
using ScalarFn = std::function<Tensor(Graph&, const Tensor& x)>;

// Max over coordinates of |analytic - central| / (|central| + 1e-12).
// Throws NumericalError if f is non-finite at any probe point.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double step);

// Analytic gradient of f at x (one graph, one backward pass).
Tensor analytic_grad(const ScalarFn& f, const Tensor& x);

struct OpCheck {
    std::string name;
    // max relative error for finite-difference entries, max absolute error
    // for the closed-form double-backward entry
    double max_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct GradcheckOptions {
    std::uint64_t seed = 0;
    int trials = 20;
    double step = 1e-5;
    double tolerance = 1e-4;
};

// First-order checks for every op plus Hessian-vector (double backward)
// checks for the non-linear ops and the double-backward quadratic identity.
std::vector<OpCheck> run_gradcheck_suite(const GradcheckOptions& options);

}  // namespace rlar::ad
