#include "advit/finite_diff.hpp"

#include <cmath>

namespace advit {

namespace {

double eval_value(const ScalarGraphFn& f, const Tensor& x) {
  Tape tape;
  Var leaf = tape.leaf(x, false, "fd_probe");
  Var out = f(tape, leaf);
  const Tensor& v = tape.value(out);
  if (v.size() != 1) {
    throw Error("finite_diff_check: function output must hold one element, "
                "got shape " +
                shape_str(v.shape));
  }
  return v.data[0];
}

}  // namespace

Tensor graph_gradient(const ScalarGraphFn& f, const Tensor& x,
                      double* value_out) {
  Tape tape;
  Var leaf = tape.leaf(x, true, "input");
  Var out = f(tape, leaf);
  if (tape.value(out).size() != 1) {
    throw Error("graph_gradient: function output must hold one element");
  }
  if (value_out) *value_out = tape.value(out).data[0];
  tape.backward(out);
  Tensor g = tape.grad(leaf);
  if (g.data.empty()) g = Tensor(x.shape, 0.0);
  return g;
}

double finite_diff_check(const ScalarGraphFn& f, const Tensor& x, double h) {
  if (h <= 0.0) throw Error("finite_diff_check: step must be positive");
  Tensor g_ad = graph_gradient(f, x);
  double worst = 0.0;
  Tensor probe = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double keep = probe.data[i];
    probe.data[i] = keep + h;
    const double fp = eval_value(f, probe);
    probe.data[i] = keep - h;
    const double fm = eval_value(f, probe);
    probe.data[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw Error("finite_diff_check: non-finite value at probe coordinate " +
                  std::to_string(i));
    }
    const double g_fd = (fp - fm) / (2.0 * h);
    const double rel = std::fabs(g_ad.data[i] - g_fd) /
                       std::max(std::fabs(g_fd), 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace advit
