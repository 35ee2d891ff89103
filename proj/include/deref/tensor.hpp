#pragma once

// Minimal dense storage and the handful of kernels the pipeline needs.
// Everything is row-major double; linear layers follow the y = x W + b
// convention with W stored as in_features x out_features.

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "deref/errors.hpp"

namespace deref {

using Vec = std::vector<double>;

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Tensor row_vector(std::size_t n, double fill = 0.0) { return Tensor(1, n, fill); }
  static Tensor from_rows(const std::vector<Vec>& rows_in) {
    Tensor t(rows_in.size(), rows_in.empty() ? 0 : rows_in.front().size());
    for (std::size_t r = 0; r < t.rows; ++r) {
      if (rows_in[r].size() != t.cols) throw DimensionError("ragged rows in tensor literal");
      std::copy(rows_in[r].begin(), rows_in[r].end(), t.row(r).begin());
    }
    return t;
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> flat() { return data; }
  [[nodiscard]] std::span<const double> flat() const { return data; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
  [[nodiscard]] Tensor zeros_like() const { return Tensor(rows, cols); }

  bool operator==(const Tensor&) const = default;
};

/// y += x W, with x of length W.rows and y of length W.cols.
inline void gemv_acc(std::span<const double> x, const Tensor& w, std::span<double> y) {
  if (x.size() != w.rows || y.size() != w.cols) throw DimensionError("gemv_acc: shape mismatch");
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* wr = w.data.data() + i * w.cols;
    for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
  }
}

/// dx += W dy (backward of gemv_acc with respect to x).
inline void gemv_t_acc(const Tensor& w, std::span<const double> dy, std::span<double> dx) {
  if (dx.size() != w.rows || dy.size() != w.cols) throw DimensionError("gemv_t_acc: shape mismatch");
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* wr = w.data.data() + i * w.cols;
    double acc = 0.0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t j = 0; j < w.cols; ++j) acc += wr[j] * dy[j];
    dx[i] += acc;
  }
}

/// dW += x (outer) dy.
inline void outer_acc(std::span<const double> x, std::span<const double> dy, Tensor& dw) {
  if (x.size() != dw.rows || dy.size() != dw.cols) throw DimensionError("outer_acc: shape mismatch");
  for (std::size_t i = 0; i < dw.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    double* gr = dw.data.data() + i * dw.cols;
    for (std::size_t j = 0; j < dw.cols; ++j) gr[j] += xi * dy[j];
  }
}

namespace detail {

// exp for x <= 0 by range reduction to |r| <= ln2/2 and a degree-13 Taylor
// polynomial (truncation below 1e-17 relative). Branch-free so loops vectorize.
inline double exp_nonpositive(double x) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShifter = 0x1.8p52;
  const double kd = (x * kLog2e + kShifter) - kShifter;
  const double r = (x - kd * kLn2Hi) - kd * kLn2Lo;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  std::int64_t k = static_cast<std::int64_t>(kd);
  k = k < -1022 ? -1022 : k;  // below e^-708 the result only needs to be tiny
  return p * std::bit_cast<double>(static_cast<std::uint64_t>(k + 1023) << 52);
}

}  // namespace detail

/// Max-subtracted softmax, in place.
template <std::floating_point T>
void softmax_inplace(std::span<T> x) {
  if (x.empty()) return;
  const T mx = *std::max_element(x.begin(), x.end());
  if constexpr (std::is_same_v<T, double>) {
    double* v = x.data();
    const std::size_t n = x.size();
    double sum = 0.0;
#pragma omp simd reduction(+ : sum)
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = detail::exp_nonpositive(v[i] - mx);
      sum += v[i];
    }
    const double inv = 1.0 / sum;
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) v[i] *= inv;
  } else {
    T sum = 0;
    for (auto& v : x) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (auto& v : x) v /= sum;
  }
}

template <std::floating_point T>
std::vector<T> softmax(std::span<const T> x) {
  std::vector<T> out(x.begin(), x.end());
  softmax_inplace<T>(out);
  return out;
}

/// Backward of softmax: given p = softmax(z) and dL/dp, returns dL/dz.
inline Vec softmax_backward(std::span<const double> p, std::span<const double> dp) {
  double dot = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * dp[i];
  Vec dz(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) dz[i] = p[i] * (dp[i] - dot);
  return dz;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Affine map y = x W + b.
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : weight(in, out), bias(1, out) {}

  [[nodiscard]] std::size_t in_features() const { return weight.rows; }
  [[nodiscard]] std::size_t out_features() const { return weight.cols; }

  [[nodiscard]] Vec forward(std::span<const double> x) const {
    if (x.size() != in_features()) {
      throw DimensionError("linear layer expects input of length " + std::to_string(in_features()) +
                           ", got " + std::to_string(x.size()));
    }
    Vec y(bias.data);
    gemv_acc(x, weight, y);
    return y;
  }

  /// Accumulates parameter gradients into grad and input gradient into dx.
  void backward(std::span<const double> x, std::span<const double> dy, Linear& grad,
                std::span<double> dx) const {
    outer_acc(x, dy, grad.weight);
    for (std::size_t j = 0; j < dy.size(); ++j) grad.bias.data[j] += dy[j];
    if (!dx.empty()) gemv_t_acc(weight, dy, dx);
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) on weight and bias.
  template <class Rng>
  void init_uniform(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, in_features())));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : weight.data) v = dist(rng);
    for (auto& v : bias.data) v = dist(rng);
  }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".weight", self.weight);
    f(prefix + ".bias", self.bias);
  }

  bool operator==(const Linear&) const = default;
};

template <class Rng>
void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, fan_in)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data) v = dist(rng);
}

inline bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

inline double l2_norm(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

/// splitmix64 finalizer, used to derive independent seeds from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace deref
