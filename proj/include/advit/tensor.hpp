#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace advit {

// Error type thrown across the library. The message names the offending
// operation / node / config key so failures are actionable from the CLI.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Extents of a dense row-major tensor, outermost axis first.
using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 64-bit reals. All internal numerics run at
// 64-bit; narrowing to 32-bit happens only at the serialization boundary.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v);

  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int extent(int axis) const;

  double& operator()(int i) { return data[static_cast<size_t>(i)]; }
  double operator()(int i) const { return data[static_cast<size_t>(i)]; }
  double& operator()(int i, int j) {
    return data[static_cast<size_t>(i) * shape[1] + j];
  }
  double operator()(int i, int j) const {
    return data[static_cast<size_t>(i) * shape[1] + j];
  }
  double& operator()(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double operator()(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double& operator()(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) *
                    shape[3] +
                l];
  }
  double operator()(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) *
                    shape[3] +
                l];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;
  double max_abs() const;
};

}  // namespace advit
