#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace attnbias {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles. Desk-scale only (d <= 64, T <= 256).
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<const double> data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

// a (n x k) * b (k x m)
Matrix matmul(const Matrix& a, const Matrix& b);

// Row vector times matrix: x (1 x k) * b (k x m).
Vector vecmat(std::span<const double> x, const Matrix& b);

// Matrix times column vector: a (n x k) * x (k).
Vector matvec(const Matrix& a, std::span<const double> x);

}  // namespace attnbias
