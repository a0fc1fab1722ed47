/*
 * Copyright 2026 The fsqa Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Define-by-run reverse-mode differentiation over small dense tensors.
//
// A Tensor is a reference-counted handle onto a graph node. Operations on
// tensors that require gradients record a backward closure; backward()
// walks the recorded graph in reverse topological order. The graph is
// rebuilt for every forward pass and released with the last handle.
//
// Storage is row-major and flat. The only broadcasting supported is
// bias-add over rows (add_bias).

#ifndef FSQA_AUTODIFF_HPP
#define FSQA_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fsqa/errors.hpp"
#include "fsqa/rng.hpp"

namespace fsqa {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty unless requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

// Dot product with eight independent partial sums; the fixed association
// order keeps results reproducible while letting the compiler vectorize.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
            ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = checked_size(shape);
    return from_values(std::move(shape), std::vector<T>(n, T{0}),
                       requires_grad);
  }

  static Tensor from_values(Shape shape, std::vector<T> values,
                            bool requires_grad = false) {
    const std::size_t n = checked_size(shape);
    if (n != values.size()) {
      throw DimensionError("tensor of shape " + shape_string(shape) +
                           " cannot hold " + std::to_string(values.size()) +
                           " values");
    }
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(n, T{0});
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_values({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->values.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const {
    return node_->shape.size() > 1 ? node_->shape[1] : 1;
  }

  std::span<T> values() { return node_->values; }
  std::span<const T> values() const { return node_->values; }
  T item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " +
                          shape_string(shape()));
    }
    return node_->values[0];
  }
  T at(std::size_t r, std::size_t c) const {
    return node_->values[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const {
    return node_->requires_grad && node_->grad.size() == size();
  }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

  // Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach_copy(bool requires_grad = false) const {
    return from_values(shape(), node_->values, requires_grad);
  }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

 private:
  static std::size_t checked_size(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must be non-empty");
    for (auto d : shape) {
      if (d == 0) {
        throw DimensionError("tensor dimensions must be positive, got " +
                             shape_string(shape));
      }
    }
    return shape_size(shape);
  }

  std::shared_ptr<NodeType> node_;
};

namespace detail {

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

// Builds an op result. Gradient bookkeeping is attached only when grad mode
// is on and some parent requires gradients.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::initializer_list<Tensor<T>> parents,
                      BackwardFn<T> backward) {
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (needs_grad) {
    node->requires_grad = true;
    node->grad.assign(node->values.size(), T{0});
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.shape().size() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got " +
                         shape_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

// [m x k] * [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      detail::axpy(av[i * k + p], bv + p * n, row, n);
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_result<T>(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          // dA = dC * B^T
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              an->grad[i * k + p] +=
                  detail::dot(g + i * n, bn->values.data() + p * n, n);
            }
          }
        }
        if (bn->requires_grad) {
          // dB = A^T * dC
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              detail::axpy(an->values[i * k + p], g + i * n,
                           bn->grad.data() + p * n, n);
            }
          }
        }
      });
}

// [m x k] * [n x k]^T -> [m x n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt shape mismatch: " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = detail::dot(av + i * k, bv + j * k, k);
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_result<T>(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node<T>& self) {
        const T* g = self.grad.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const T gij = g[i * n + j];
            if (gij == T{0}) continue;
            if (an->requires_grad) {
              detail::axpy(gij, bn->values.data() + j * k,
                           an->grad.data() + i * k, k);
            }
            if (bn->requires_grad) {
              detail::axpy(gij, an->values.data() + i * k,
                           bn->grad.data() + j * k, k);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto an = a.node_ptr();
  return detail::make_result<T>({n, m}, std::move(out), {a},
                                [an, m, n](detail::Node<T>& self) {
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j)
                                      an->grad[i * n + j] +=
                                          self.grad[j * m + i];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b},
                                [an, bn](detail::Node<T>& self) {
                                  for (auto* p : {an.get(), bn.get()}) {
                                    if (!p->requires_grad) continue;
                                    for (std::size_t i = 0; i < self.grad.size();
                                         ++i)
                                      p->grad[i] += self.grad[i];
                                  }
                                });
}

// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch: " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.values()[i] * b.values()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (an->requires_grad) an->grad[i] += self.grad[i] * bn->values[i];
          if (bn->requires_grad) bn->grad[i] += self.grad[i] * an->values[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  auto an = a.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), {a},
                                [an, factor](detail::Node<T>& self) {
                                  for (std::size_t i = 0; i < self.grad.size();
                                       ++i)
                                    an->grad[i] += factor * self.grad[i];
                                });
}

// [m x n] + bias[n], bias added to every row.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require_2d(a, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match rows of " + shape_string(a.shape()));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.values()[j];
  auto an = a.node_ptr();
  auto bn = bias.node_ptr();
  return detail::make_result<T>(
      a.shape(), std::move(out), {a, bias},
      [an, bn, m, n](detail::Node<T>& self) {
        if (an->requires_grad)
          for (std::size_t i = 0; i < m * n; ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
              bn->grad[j] += self.grad[i * n + j];
      });
}

// Sum of all elements as a scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (auto v : a.values()) total += v;
  auto an = a.node_ptr();
  return detail::make_result<T>({1}, {total}, {a},
                                [an](detail::Node<T>& self) {
                                  const T g = self.grad[0];
                                  for (auto& x : an->grad) x += g;
                                });
}

// Rows [begin, end) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_2d(a, "slice_rows");
  if (begin >= end || end > a.rows()) {
    throw IndexError("slice_rows [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of range for " +
                     shape_string(a.shape()));
  }
  const std::size_t n = a.cols();
  std::vector<T> out(a.values().begin() + begin * n,
                     a.values().begin() + end * n);
  auto an = a.node_ptr();
  return detail::make_result<T>(
      {end - begin, n}, std::move(out), {a},
      [an, begin, n](detail::Node<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[begin * n + i] += self.grad[i];
      });
}

// Tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.values()[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
  }
  auto an = a.node_ptr();
  return detail::make_result<T>(
      a.shape(), std::move(out), {a}, [an](detail::Node<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T x = an->values[i];
          const T u = kC * (x + kA * x * x * x);
          const T th = std::tanh(u);
          const T du = kC * (T(1) + T(3) * kA * x * x);
          const T d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
          an->grad[i] += self.grad[i] * d;
        }
      });
}

// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  detail::require_2d(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* x = a.values().data() + i * n;
    T* y = out.data() + i * n;
    const T mx = *std::max_element(x, x + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  auto an = a.node_ptr();
  return detail::make_result<T>(
      {m, n}, std::move(out), {a}, [an, m, n](detail::Node<T>& self) {
        for (std::size_t i = 0; i < m; ++i) {
          const T* y = self.values.data() + i * n;
          const T* g = self.grad.data() + i * n;
          const T inner = detail::dot(y, g, n);
          for (std::size_t j = 0; j < n; ++j)
            an->grad[i * n + j] += y[j] * (g[j] - inner);
        }
      });
}

// Layer normalization over the last dimension.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::require_2d(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n) {
    throw DimensionError("layer_norm: gain/bias size does not match " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(m * n);
  auto normalized = std::make_shared<std::vector<T>>(m * n);
  auto inv_std = std::make_shared<std::vector<T>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.values().data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    const T r = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * r;
      (*normalized)[i * n + j] = h;
      out[i * n + j] = h * gamma.values()[j] + beta.values()[j];
    }
  }
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  return detail::make_result<T>(
      {m, n}, std::move(out), {x, gamma, beta},
      [xn, gn, bn, normalized, inv_std, m, n](detail::Node<T>& self) {
        std::vector<T> dh(n);
        for (std::size_t i = 0; i < m; ++i) {
          const T* g = self.grad.data() + i * n;
          const T* h = normalized->data() + i * n;
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < n; ++j) {
            if (gn->requires_grad) gn->grad[j] += g[j] * h[j];
            if (bn->requires_grad) bn->grad[j] += g[j];
            dh[j] = g[j] * gn->values[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          if (!xn->requires_grad) continue;
          mean_dh /= T(n);
          mean_dh_h /= T(n);
          const T r = (*inv_std)[i];
          for (std::size_t j = 0; j < n; ++j)
            xn->grad[i * n + j] += r * (dh[j] - mean_dh - h[j] * mean_dh_h);
        }
      });
}

// Gathers rows of `table` ([V x d]) for each id -> [n x d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_2d(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) throw ContractError("embedding: empty id sequence");
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) +
                       " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  }
  auto tn = table.node_ptr();
  std::vector<int> saved(ids.begin(), ids.end());
  return detail::make_result<T>(
      {ids.size(), d}, std::move(out), {table},
      [tn, saved = std::move(saved), d](detail::Node<T>& self) {
        for (std::size_t i = 0; i < saved.size(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            tn->grad[saved[i] * d + j] += self.grad[i * d + j];
      });
}

// Multiplies by a fixed random keep-mask scaled by 1/(1-rate).
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  auto mask = std::make_shared<std::vector<T>>(a.size());
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? T{0} : keep_scale;
    out[i] = a.values()[i] * (*mask)[i];
  }
  auto an = a.node_ptr();
  return detail::make_result<T>(a.shape(), std::move(out), {a},
                                [an, mask](detail::Node<T>& self) {
                                  for (std::size_t i = 0; i < self.grad.size();
                                       ++i)
                                    an->grad[i] += self.grad[i] * (*mask)[i];
                                });
}

// Multi-head scaled dot-product attention.
//   q: [n x d], k: [m x d], v: [m x d] -> [n x d]
// Heads split the feature dimension into equal contiguous slices. With
// `causal`, query i attends only to keys j <= i.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::size_t n_heads, bool causal) {
  detail::require_2d(q, "attention");
  detail::require_2d(k, "attention");
  detail::require_2d(v, "attention");
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != m) {
    throw DimensionError("attention shape mismatch: q " +
                         shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(n_heads) +
                         " heads");
  }
  if (causal && m < n) {
    throw DimensionError("causal attention needs at least as many keys as queries");
  }
  const std::size_t dh = d / n_heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  // probs[h][i][j]
  auto probs = std::make_shared<std::vector<T>>(n_heads * n * m, T{0});
  std::vector<T> out(n * d, T{0});
  std::vector<T> qh(dh);
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  const T* vv = v.values().data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      T* p = probs->data() + (h * n + i) * m;
      const std::size_t limit = causal ? i + 1 : m;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] = detail::dot(qv + i * d + off, kv + j * d + off, dh) * inv_scale;
        mx = std::max(mx, p[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      T* o = out.data() + i * d + off;
      for (std::size_t j = 0; j < limit; ++j) {
        p[j] /= total;
        detail::axpy(p[j], vv + j * d + off, o, dh);
      }
    }
  }
  auto qn = q.node_ptr();
  auto kn = k.node_ptr();
  auto vn = v.node_ptr();
  return detail::make_result<T>(
      {n, d}, std::move(out), {q, k, v},
      [qn, kn, vn, probs, n, m, d, dh, n_heads, causal,
       inv_scale](detail::Node<T>& self) {
        std::vector<T> dp(m);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < n; ++i) {
            const T* p = probs->data() + (h * n + i) * m;
            const T* g = self.grad.data() + i * d + off;
            const std::size_t limit = causal ? i + 1 : m;
            T inner = 0;
            for (std::size_t j = 0; j < limit; ++j) {
              if (vn->requires_grad)
                detail::axpy(p[j], g, vn->grad.data() + j * d + off, dh);
              dp[j] = detail::dot(g, vn->values.data() + j * d + off, dh);
              inner += dp[j] * p[j];
            }
            for (std::size_t j = 0; j < limit; ++j) {
              const T ds = p[j] * (dp[j] - inner) * inv_scale;
              if (ds == T{0}) continue;
              if (qn->requires_grad)
                detail::axpy(ds, kn->values.data() + j * d + off,
                             qn->grad.data() + i * d + off, dh);
              if (kn->requires_grad)
                detail::axpy(ds, qn->values.data() + i * d + off,
                             kn->grad.data() + j * d + off, dh);
            }
          }
        }
      });
}

// Sum over positions of -log softmax(logits_i)[target_i]. Positions whose
// target equals `ignore_id` contribute neither loss nor gradient.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits,
                               std::span<const int> targets, int ignore_id) {
  detail::require_2d(logits, "cross_entropy_logits");
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(n) +
                         " rows but " + std::to_string(targets.size()) +
                         " targets");
  }
  auto probs = std::make_shared<std::vector<T>>(n * vocab);
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy_logits: target id " + std::to_string(t) +
                       " outside [0, " + std::to_string(vocab) + ")");
    }
    const T* x = logits.values().data() + i * vocab;
    T* p = probs->data() + i * vocab;
    const T mx = *std::max_element(x, x + vocab);
    T total = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(x[j] - mx);
      total += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= total;
    loss += std::log(total) - (x[t] - mx);
  }
  auto ln = logits.node_ptr();
  std::vector<int> saved(targets.begin(), targets.end());
  return detail::make_result<T>(
      {1}, {loss}, {logits},
      [ln, probs, saved = std::move(saved), ignore_id, n,
       vocab](detail::Node<T>& self) {
        const T g = self.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
          if (saved[i] == ignore_id) continue;
          const T* p = probs->data() + i * vocab;
          T* dx = ln->grad.data() + i * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dx[j] += g * p[j];
          dx[saved[i]] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(tensor) into every reachable tensor that requires
// gradients. Leaves that are not reachable keep their (zeroed) buffers.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not connected to any tensor that "
                        "requires gradients");
  }
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace fsqa

#endif  // FSQA_AUTODIFF_HPP
