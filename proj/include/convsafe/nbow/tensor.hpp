#pragma once

#include <cassert>
#include <span>
#include <vector>

#include "convsafe/error.hpp"

namespace convsafe::nbow {

using Vector = std::vector<double>;

// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool operator==(const Matrix&) const = default;
};

// y = W x + b
inline Vector affine(const Matrix& w, std::span<const double> x, std::span<const double> b) {
  if (x.size() != w.cols) throw DimensionMismatch(w.cols, x.size());
  Vector y(b.begin(), b.end());
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.data.data() + r * w.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += wr[c] * x[c];
    y[r] += acc;
  }
  return y;
}

// x += W^T g
inline void add_transpose_times(const Matrix& w, std::span<const double> g, std::span<double> x) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const double* wr = w.data.data() + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) x[c] += wr[c] * gr;
  }
}

// W += g x^T
inline void add_outer(Matrix& w, std::span<const double> g, std::span<const double> x) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    double* wr = w.data.data() + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) wr[c] += gr * x[c];
  }
}

inline void relu_inplace(Vector& v) {
  for (double& x : v)
    if (x < 0.0) x = 0.0;
}

}  // namespace convsafe::nbow
