#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace dare {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Products. All of them accumulate c_ij += a_ik * b_kj with k ascending, so a
// row computed alone is bit-identical to the same row of the full product.
Matrix matmul(const Matrix& a, const Matrix& b);
/// Writes a_row * b into out (b.cols() entries).
void matmul_row(std::span<const double> a_row, const Matrix& b, std::span<double> out);
/// a * b^T
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix scaled(const Matrix& m, double factor);
Matrix add(const Matrix& a, const Matrix& b);
Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t count);

double dot(std::span<const double> u, std::span<const double> v);
double norm2(std::span<const double> v);
double frobenius_norm(const Matrix& m);

/// Numerically stable softmax (max-shifted).
std::vector<double> softmax(std::span<const double> z);
void softmax_inplace(std::span<double> z);
Matrix row_softmax(const Matrix& m);

/// Rescales every row to Euclidean norm sqrt(cols). Throws on a zero row.
Matrix row_normalize_sqrt_d(const Matrix& m);

/// Cosine similarity clamped to [-1, 1]. Throws on a zero vector.
double cosine(std::span<const double> u, std::span<const double> v);

// Singular values. spectral_norm uses power iteration on M^T M; min_singular
// and condition_kappa use a cyclic Jacobi eigen-decomposition of M^T M, which
// is fine for the small dimensions used here.
double spectral_norm(const Matrix& m);
double min_singular(const Matrix& m);
double condition_kappa(const Matrix& m);

/// Eigenvalues of a symmetric matrix, ascending.
std::vector<double> symmetric_eigenvalues(const Matrix& s);

/// Largest Euclidean row norm (exact 2->inf operator norm of x -> x M^T).
double norm_2_to_inf(const Matrix& m);
/// Sum of Euclidean row norms: an upper bound on the 2->1 operator norm of
/// x -> x M^T. The exact value is intractable in general.
double norm_2_to_1_upper(const Matrix& m);

}  // namespace dare
