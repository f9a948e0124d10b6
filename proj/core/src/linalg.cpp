#include "dare/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dare/error.hpp"
#include "dare/rng.hpp"

namespace dare {

namespace {

constexpr std::uint64_t kPowerIterationSeed = 0x5EED5EEDULL;
constexpr int kPowerIterationMax = 100000;
constexpr double kPowerIterationTol = 1e-14;
constexpr double kRankTolerance = 1e-12;

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_finite(const Matrix& m, const char* op) {
  for (double x : m.data()) {
    if (!std::isfinite(x)) throw ContractError(std::string(op) + ": non-finite result");
  }
}

// M^T M, formed explicitly; dimensions here are tiny.
Matrix gram(const Matrix& m) {
  Matrix g(m.cols(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t i = 0; i < m.cols(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) g(i, j) += row[i] * row[j];
    }
  }
  return g;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ContractError("Matrix: data length " + std::to_string(data_.size()) +
                        " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> values) {
  Matrix m(values.size(), values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ContractError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

void matmul_row(std::span<const double> a_row, const Matrix& b, std::span<double> out) {
  if (a_row.size() != b.rows() || out.size() != b.cols()) {
    throw ContractError("matmul_row: shape mismatch");
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t k = 0; k < a_row.size(); ++k) {
    const double a = a_row[k];
    auto b_row = b.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += a * b_row[j];
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: " + shape(a) + " times " + shape(b));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a.row(i), b, c.row(i));
  require_finite(c, "matmul");
  return c;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ContractError("matmul_transposed: " + shape(a) + " times " + shape(b) + "^T");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  }
  require_finite(c, "matmul_transposed");
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  }
  return t;
}

Matrix scaled(const Matrix& m, double factor) {
  Matrix out = m;
  for (double& x : out.data()) x *= factor;
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError("add: " + shape(a) + " plus " + shape(b));
  }
  Matrix out = a;
  auto dst = out.data();
  auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return out;
}

Matrix slice_cols(const Matrix& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) throw ContractError("slice_cols: range out of bounds");
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::copy_n(m.row(i).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(i).begin());
  }
  return out;
}

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ContractError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double frobenius_norm(const Matrix& m) { return norm2(m.data()); }

void softmax_inplace(std::span<double> z) {
  if (z.empty()) return;
  const double peak = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& x : z) {
    x = std::exp(x - peak);
    total += x;
  }
  for (double& x : z) x /= total;
}

std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> out(z.begin(), z.end());
  softmax_inplace(out);
  return out;
}

Matrix row_softmax(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

Matrix row_normalize_sqrt_d(const Matrix& m) {
  Matrix out = m;
  const double target = std::sqrt(static_cast<double>(m.cols()));
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const double n = norm2(row);
    if (n == 0.0) {
      throw DegenerateInputError("row_normalize_sqrt_d: row " + std::to_string(i) + " is zero");
    }
    const double factor = target / n;
    for (double& x : row) x *= factor;
  }
  return out;
}

double cosine(std::span<const double> u, std::span<const double> v) {
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine: zero vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

double spectral_norm(const Matrix& m) {
  if (m.empty()) return 0.0;
  const Matrix g = gram(m);
  const std::size_t n = g.cols();
  Rng rng(kPowerIterationSeed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  double nv = norm2(v);
  for (double& x : v) x /= nv;

  std::vector<double> w(n);
  double lambda = 0.0;
  for (int iter = 0; iter < kPowerIterationMax; ++iter) {
    matmul_row(v, g, w);  // g is symmetric, so v g = (g v)^T
    const double next = dot(v, w);
    const double nw = norm2(w);
    if (nw == 0.0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
    if (std::abs(next - lambda) <= kPowerIterationTol * std::abs(next)) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  // Rayleigh quotient at the converged vector.
  matmul_row(v, g, w);
  lambda = std::max(lambda, dot(v, w));
  return std::sqrt(std::max(lambda, 0.0));
}

std::vector<double> symmetric_eigenvalues(const Matrix& s) {
  if (s.rows() != s.cols()) throw ContractError("symmetric_eigenvalues: matrix is not square");
  Matrix a = s;
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        total += a(i, j) * a(i, j);
        if (i != j) off += a(i, j) * a(i, j);
      }
    }
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

namespace {

// Singular values (descending) via the Jacobi spectrum of M^T M. Requires
// full column rank.
std::pair<double, double> extreme_singular_values(const Matrix& m) {
  if (m.empty()) throw ContractError("singular values of an empty matrix");
  if (m.rows() < m.cols()) {
    throw SingularMatrixError("matrix " + shape(m) + " cannot have full column rank");
  }
  const auto eig = symmetric_eigenvalues(gram(m));
  const double smax = std::sqrt(std::max(eig.back(), 0.0));
  const double smin = std::sqrt(std::max(eig.front(), 0.0));
  if (!(smin >= kRankTolerance * smax) || smax == 0.0) {
    throw SingularMatrixError("matrix " + shape(m) + " is rank deficient");
  }
  return {smax, smin};
}

}  // namespace

double min_singular(const Matrix& m) { return extreme_singular_values(m).second; }

double condition_kappa(const Matrix& m) {
  const auto [smax, smin] = extreme_singular_values(m);
  return std::max(1.0, smax / smin);
}

double norm_2_to_inf(const Matrix& m) {
  double best = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) best = std::max(best, norm2(m.row(i)));
  return best;
}

double norm_2_to_1_upper(const Matrix& m) {
  double total = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) total += norm2(m.row(i));
  return total;
}

}  // namespace dare
