#pragma once

#include <functional>

#include "advit/tape.hpp"

namespace advit {

// Builds a single-element output from one differentiable leaf on the given
// tape. Used both to evaluate the function value and to run backward.
using ScalarGraphFn = std::function<Var(Tape&, Var)>;

// Compares the reverse-mode gradient of f at x against central finite
// differences with step h. Returns the max over coordinates of
//   |g_autodiff - g_fd| / max(|g_fd|, 1e-8).
// Throws if f produces a non-finite value at any probe point.
double finite_diff_check(const ScalarGraphFn& f, const Tensor& x,
                         double h = 1e-5);

// The reverse-mode gradient of f at x (convenience for tests and attacks).
Tensor graph_gradient(const ScalarGraphFn& f, const Tensor& x,
                      double* value_out = nullptr);

}  // namespace advit
