#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace spruft {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major array of doubles.
///
/// An empty shape denotes a scalar holding one element. Every listed
/// dimension must be positive.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  /// Builds a matrix from nested rows; all rows must have equal length.
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::vector<double> values);
  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }

  // Matrix view: rows() is the leading dimension, cols() the product of the rest.
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.empty() ? 1 : size() / shape_[0]; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> data() { return values_; }
  std::span<const double> data() const { return values_; }
  const std::vector<double>& values() const { return values_; }

  /// Same values, new shape with equal element count.
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;
  void fill(double v);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Matrix kernels. Inputs are interpreted through rows()/cols().
Tensor matmul(const Tensor& a, const Tensor& b);     // a · b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · bᵀ
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ · b
Tensor transpose(const Tensor& a);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor& operator+=(Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);

}  // namespace spruft
