#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace discap::grad {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. Rank 0 is a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() : values(1, 0.0) {}
  Tensor(Shape s, std::vector<double> v);

  static Tensor zeros(Shape s);
  static Tensor filled(Shape s, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? size() : shape[1]; }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

  double item() const;
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;
};

}  // namespace discap::grad
