#include "advit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace advit {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e < 0) throw Error("shape has negative extent: " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)),
      data(static_cast<size_t>(shape_numel(shape)), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw Error("tensor data size " + std::to_string(data.size()) +
                " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, {v}); }

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw Error("axis " + std::to_string(axis) + " out of range for shape " +
                shape_str(shape));
  }
  return shape[axis];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace advit
