#pragma once

// Reverse-mode automatic differentiation over dense 64-bit tensors.
//
// Graphs are define-by-run: each operation evaluates eagerly when built and
// records a pure forward recomputation plus a backward rule. A graph is
// rebuilt for every training step; leaves (parameters, inputs) persist across
// graphs and carry accumulated gradients until explicitly zeroed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "grafit/error.hpp"

namespace grafit::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on first backward pass
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaf tensors
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> forward_fn;   // recompute values from inputs
  std::function<void(Node&)> backward_fn;  // scatter grad into inputs

  [[nodiscard]] std::size_t size() const { return values.size(); }
};

// Counters for degenerate numeric situations that are handled rather than
// raised (see l2_normalize_rows).
struct Stats {
  std::uint64_t degenerate_normalize_rows = 0;
};

inline Stats& stats() {
  thread_local Stats s;
  return s;
}

inline std::string format_shape(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by primitive '") + op + "'");
    }
  }
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor leaf(std::vector<std::size_t> shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (shape_product(shape) != values.size()) {
      throw ContractError("leaf value count " + std::to_string(values.size()) +
                          " does not match shape " + format_shape(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return leaf({}, {v}, requires_grad);
  }

  [[nodiscard]] const std::vector<std::size_t>& shape() const { return node_->shape; }
  [[nodiscard]] const std::vector<double>& values() const { return node_->values; }
  [[nodiscard]] const std::vector<double>& grad() const { return node_->grad; }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] std::size_t size() const { return node_->values.size(); }
  [[nodiscard]] std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  [[nodiscard]] std::size_t cols() const {
    return node_->shape.size() < 2 ? size() / rows() : node_->shape[1];
  }
  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const NodePtr& node() const { return node_; }

  [[nodiscard]] double value() const {
    if (size() != 1) {
      throw ContractError("scalar access on tensor of shape " + format_shape(shape()));
    }
    return node_->values[0];
  }

  // Leaf mutation between steps (parameters, reused input buffers).
  [[nodiscard]] std::vector<double>& mutable_values() {
    if (node_->op != nullptr) throw ContractError("mutable_values on non-leaf tensor");
    return node_->values;
  }

  void set_values(std::span<const double> v) {
    if (node_->op != nullptr) throw ContractError("set_values on non-leaf tensor");
    if (v.size() != node_->values.size()) {
      throw ContractError("set_values size mismatch: " + std::to_string(v.size()) + " vs " +
                          std::to_string(node_->values.size()));
    }
    std::copy(v.begin(), v.end(), node_->values.begin());
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

 private:
  NodePtr node_;
};

namespace detail {

inline void topo_order(const NodePtr& root, std::vector<Node*>& order) {
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

inline Tensor make_op(const char* op, std::vector<std::size_t> shape,
                      std::vector<Tensor> inputs, std::function<void(Node&)> forward,
                      std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->values.resize(shape_product(n->shape));
  n->op = op;
  n->requires_grad = false;
  n->inputs.reserve(inputs.size());
  for (auto& t : inputs) {
    n->requires_grad = n->requires_grad || t.requires_grad();
    n->inputs.push_back(t.node());
  }
  n->forward_fn = std::move(forward);
  n->backward_fn = std::move(backward);
  n->forward_fn(*n);
  check_finite(n->values, op);
  return Tensor(std::move(n));
}

inline void ensure_grad(Node& n) {
  if (n.grad.size() != n.values.size()) n.grad.assign(n.values.size(), 0.0);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + format_shape(a.shape()) +
                        " vs " + format_shape(b.shape()));
  }
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw ContractError(std::string(op) + ": expected rank-2 tensor, got shape " +
                        format_shape(t.shape()));
  }
}

}  // namespace detail

// Re-evaluates the whole graph from its leaves and returns the root.
// Pure: repeated evaluation of the same graph is bitwise identical.
inline Tensor forward_eval(const Tensor& root) {
  std::vector<Node*> order;
  detail::topo_order(root.node(), order);
  for (Node* n : order) {
    if (n->forward_fn) {
      n->forward_fn(*n);
      check_finite(n->values, n->op);
    }
  }
  return root;
}

// Accumulates d(root)/d(leaf) into every requires_grad leaf. Leaf gradients
// persist across calls (repeated calls without zeroing accumulate);
// intermediate gradients are scratch and reset on every pass. The root must
// be a scalar.
inline void backward_grad(const Tensor& root) {
  if (root.size() != 1) {
    throw ContractError("backward_grad: root must be scalar, got shape " +
                        format_shape(root.shape()));
  }
  std::vector<Node*> order;
  detail::topo_order(root.node(), order);
  for (Node* n : order) {
    if (!n->requires_grad) continue;
    detail::ensure_grad(*n);
    if (n->op != nullptr) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  detail::ensure_grad(*root.node());
  if (root.node()->op != nullptr) {
    root.node()->grad[0] = 1.0;
  } else {
    root.node()->grad[0] += 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
  }
}

// Zeroes gradient buffers across the whole graph.
inline void zero_grads(const Tensor& root) {
  std::vector<Node*> order;
  detail::topo_order(root.node(), order);
  for (Node* n : order) std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Tensor identity(const Tensor& x) {
  return detail::make_op(
      "identity", x.shape(), {x},
      [](Node& self) { self.values = self.inputs[0]->values; },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i];
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  return detail::make_op(
      "add", a.shape(), {a, b},
      [](Node& self) {
        const auto& x = self.inputs[0]->values;
        const auto& y = self.inputs[1]->values;
        for (std::size_t i = 0; i < x.size(); ++i) self.values[i] = x[i] + y[i];
      },
      [](Node& self) {
        for (int k = 0; k < 2; ++k) {
          Node& in = *self.inputs[k];
          if (!in.requires_grad) continue;
          for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i];
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::make_op(
      "sub", a.shape(), {a, b},
      [](Node& self) {
        const auto& x = self.inputs[0]->values;
        const auto& y = self.inputs[1]->values;
        for (std::size_t i = 0; i < x.size(); ++i) self.values[i] = x[i] - y[i];
      },
      [](Node& self) {
        Node& a_in = *self.inputs[0];
        Node& b_in = *self.inputs[1];
        if (a_in.requires_grad) {
          for (std::size_t i = 0; i < a_in.grad.size(); ++i) a_in.grad[i] += self.grad[i];
        }
        if (b_in.requires_grad) {
          for (std::size_t i = 0; i < b_in.grad.size(); ++i) b_in.grad[i] -= self.grad[i];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  return detail::make_op(
      "mul", a.shape(), {a, b},
      [](Node& self) {
        const auto& x = self.inputs[0]->values;
        const auto& y = self.inputs[1]->values;
        for (std::size_t i = 0; i < x.size(); ++i) self.values[i] = x[i] * y[i];
      },
      [](Node& self) {
        Node& a_in = *self.inputs[0];
        Node& b_in = *self.inputs[1];
        if (a_in.requires_grad) {
          for (std::size_t i = 0; i < a_in.grad.size(); ++i) {
            a_in.grad[i] += self.grad[i] * b_in.values[i];
          }
        }
        if (b_in.requires_grad) {
          for (std::size_t i = 0; i < b_in.grad.size(); ++i) {
            b_in.grad[i] += self.grad[i] * a_in.values[i];
          }
        }
      });
}

inline Tensor neg(const Tensor& x) {
  return detail::make_op(
      "neg", x.shape(), {x},
      [](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < v.size(); ++i) self.values[i] = -v[i];
      },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] -= self.grad[i];
      });
}

inline Tensor scalar_mul(const Tensor& x, double c) {
  return detail::make_op(
      "scalar_mul", x.shape(), {x},
      [c](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < v.size(); ++i) self.values[i] = c * v[i];
      },
      [c](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += c * self.grad[i];
      });
}

inline Tensor scalar_add(const Tensor& x, double c) {
  return detail::make_op(
      "scalar_add", x.shape(), {x},
      [c](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < v.size(); ++i) self.values[i] = v[i] + c;
      },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i];
      });
}

// A[m,k] * B[k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw ContractError("matmul: inner dimension mismatch " + format_shape(a.shape()) +
                        " vs " + format_shape(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  return detail::make_op(
      "matmul", {m, n}, {a, b},
      [m, k, n](Node& self) {
        const auto& av = self.inputs[0]->values;
        const auto& bv = self.inputs[1]->values;
        std::fill(self.values.begin(), self.values.end(), 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) {
              self.values[i * n + j] += aip * bv[p * n + j];
            }
          }
        }
      },
      [m, k, n](Node& self) {
        Node& a_in = *self.inputs[0];
        Node& b_in = *self.inputs[1];
        if (a_in.requires_grad) {
          // dA = dC * B^T
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                acc += self.grad[i * n + j] * b_in.values[p * n + j];
              }
              a_in.grad[i * k + p] += acc;
            }
          }
        }
        if (b_in.requires_grad) {
          // dB = A^T * dC
          for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t i = 0; i < m; ++i) {
              const double aip = a_in.values[i * k + p];
              for (std::size_t j = 0; j < n; ++j) {
                b_in.grad[p * n + j] += aip * self.grad[i * n + j];
              }
            }
          }
        }
      });
}

// A[m,k] * B[n,k]^T -> [m,n]; the layout used for linear layers (weights
// stored out-major) and query-vs-memory score matrices.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  if (a.shape()[1] != b.shape()[1]) {
    throw ContractError("matmul_nt: inner dimension mismatch " + format_shape(a.shape()) +
                        " vs " + format_shape(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  return detail::make_op(
      "matmul_nt", {m, n}, {a, b},
      [m, k, n](Node& self) {
        const auto& av = self.inputs[0]->values;
        const auto& bv = self.inputs[1]->values;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
            self.values[i * n + j] = acc;
          }
        }
      },
      [m, k, n](Node& self) {
        Node& a_in = *self.inputs[0];
        Node& b_in = *self.inputs[1];
        if (a_in.requires_grad) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double g = self.grad[i * n + j];
              if (g == 0.0) continue;
              for (std::size_t p = 0; p < k; ++p) {
                a_in.grad[i * k + p] += g * b_in.values[j * k + p];
              }
            }
          }
        }
        if (b_in.requires_grad) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double g = self.grad[i * n + j];
              if (g == 0.0) continue;
              for (std::size_t p = 0; p < k; ++p) {
                b_in.grad[j * k + p] += g * a_in.values[i * k + p];
              }
            }
          }
        }
      });
}

// x[B,D] + b[D], broadcast over rows.
inline Tensor add_bias_row(const Tensor& x, const Tensor& b) {
  detail::require_matrix(x, "add_bias_row");
  if (b.shape().size() != 1 || b.shape()[0] != x.shape()[1]) {
    throw ContractError("add_bias_row: bias shape " + format_shape(b.shape()) +
                        " does not match input shape " + format_shape(x.shape()));
  }
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  return detail::make_op(
      "add_bias_row", x.shape(), {x, b},
      [rows, cols](Node& self) {
        const auto& xv = self.inputs[0]->values;
        const auto& bv = self.inputs[1]->values;
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) self.values[i * cols + j] = xv[i * cols + j] + bv[j];
        }
      },
      [rows, cols](Node& self) {
        Node& x_in = *self.inputs[0];
        Node& b_in = *self.inputs[1];
        if (x_in.requires_grad) {
          for (std::size_t i = 0; i < x_in.grad.size(); ++i) x_in.grad[i] += self.grad[i];
        }
        if (b_in.requires_grad) {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) b_in.grad[j] += self.grad[i * cols + j];
          }
        }
      });
}

inline Tensor relu(const Tensor& x) {
  return detail::make_op(
      "relu", x.shape(), {x},
      [](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < v.size(); ++i) self.values[i] = v[i] > 0.0 ? v[i] : 0.0;
      },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) {
          if (in.values[i] > 0.0) in.grad[i] += self.grad[i];
        }
      });
}

inline Tensor exp_(const Tensor& x) {
  return detail::make_op(
      "exp", x.shape(), {x},
      [](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < v.size(); ++i) self.values[i] = std::exp(v[i]);
      },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[i] * self.values[i];
      });
}

inline Tensor log_(const Tensor& x) {
  return detail::make_op(
      "log", x.shape(), {x},
      [](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < v.size(); ++i) self.values[i] = std::log(v[i]);
      },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) {
          in.grad[i] += self.grad[i] / in.values[i];
        }
      });
}

inline Tensor sum(const Tensor& x) {
  return detail::make_op(
      "sum", {}, {x},
      [](Node& self) {
        double acc = 0.0;
        for (double v : self.inputs[0]->values) acc += v;
        self.values[0] = acc;
      },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[0];
      });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ContractError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(x.size());
  return detail::make_op(
      "mean", {}, {x},
      [inv](Node& self) {
        double acc = 0.0;
        for (double v : self.inputs[0]->values) acc += v;
        self.values[0] = acc * inv;
      },
      [inv](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[0] * inv;
      });
}

// Stabilized log(sum(exp(x))) over every element -> scalar.
inline Tensor logsumexp(const Tensor& x) {
  if (x.size() == 0) throw ContractError("logsumexp: empty tensor");
  return detail::make_op(
      "logsumexp", {}, {x},
      [](Node& self) {
        const auto& v = self.inputs[0]->values;
        const double m = *std::max_element(v.begin(), v.end());
        double acc = 0.0;
        for (double e : v) acc += std::exp(e - m);
        self.values[0] = m + std::log(acc);
      },
      [](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        const double lse = self.values[0];
        for (std::size_t i = 0; i < in.grad.size(); ++i) {
          in.grad[i] += self.grad[0] * std::exp(in.values[i] - lse);
        }
      });
}

// Per-row stabilized log-sum-exp restricted to entries where mask != 0.
// x[B,N], mask[B*N] -> [B]. A row whose mask is all zero is a contract error.
inline Tensor logsumexp_rows(const Tensor& x, std::vector<std::uint8_t> mask) {
  detail::require_matrix(x, "logsumexp_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (mask.size() != rows * cols) {
    throw ContractError("logsumexp_rows: mask size " + std::to_string(mask.size()) +
                        " does not match tensor shape " + format_shape(x.shape()));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) any = any || mask[i * cols + j];
    if (!any) throw ContractError("logsumexp_rows: row " + std::to_string(i) + " has empty mask");
  }
  auto m = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
  return detail::make_op(
      "logsumexp_rows", {rows}, {x},
      [rows, cols, m](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < rows; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < cols; ++j) {
            if ((*m)[i * cols + j]) mx = std::max(mx, v[i * cols + j]);
          }
          double acc = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            if ((*m)[i * cols + j]) acc += std::exp(v[i * cols + j] - mx);
          }
          self.values[i] = mx + std::log(acc);
        }
      },
      [rows, cols, m](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < rows; ++i) {
          const double lse = self.values[i];
          const double g = self.grad[i];
          if (g == 0.0) continue;
          for (std::size_t j = 0; j < cols; ++j) {
            if ((*m)[i * cols + j]) {
              in.grad[i * cols + j] += g * std::exp(in.values[i * cols + j] - lse);
            }
          }
        }
      });
}

// Row-wise L2 normalization. Rows with norm below `kDegenerateNorm` become
// zero rows with zero gradient; the event is counted in stats().
inline constexpr double kDegenerateNorm = 1e-9;

inline Tensor l2_normalize_rows(const Tensor& x) {
  detail::require_matrix(x, "l2_normalize_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  return detail::make_op(
      "l2_normalize_rows", x.shape(), {x},
      [rows, cols](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t i = 0; i < rows; ++i) {
          double sq = 0.0;
          for (std::size_t j = 0; j < cols; ++j) sq += v[i * cols + j] * v[i * cols + j];
          const double norm = std::sqrt(sq);
          if (norm < kDegenerateNorm) {
            stats().degenerate_normalize_rows++;
            for (std::size_t j = 0; j < cols; ++j) self.values[i * cols + j] = 0.0;
          } else {
            for (std::size_t j = 0; j < cols; ++j) self.values[i * cols + j] = v[i * cols + j] / norm;
          }
        }
      },
      [rows, cols](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < rows; ++i) {
          double sq = 0.0;
          for (std::size_t j = 0; j < cols; ++j) sq += in.values[i * cols + j] * in.values[i * cols + j];
          const double norm = std::sqrt(sq);
          if (norm < kDegenerateNorm) continue;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += self.grad[i * cols + j] * self.values[i * cols + j];
          for (std::size_t j = 0; j < cols; ++j) {
            in.grad[i * cols + j] +=
                (self.grad[i * cols + j] - dot * self.values[i * cols + j]) / norm;
          }
        }
      });
}

// Cosine similarity between paired rows: a[B,D], b[B,D] -> [B].
inline Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "cosine_rows");
  detail::require_matrix(a, "cosine_rows");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  return detail::make_op(
      "cosine_rows", {rows}, {a, b},
      [rows, cols](Node& self) {
        const auto& av = self.inputs[0]->values;
        const auto& bv = self.inputs[1]->values;
        for (std::size_t i = 0; i < rows; ++i) {
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            dot += av[i * cols + j] * bv[i * cols + j];
            na += av[i * cols + j] * av[i * cols + j];
            nb += bv[i * cols + j] * bv[i * cols + j];
          }
          const double denom = std::sqrt(na) * std::sqrt(nb);
          self.values[i] = denom < kDegenerateNorm * kDegenerateNorm ? 0.0 : dot / denom;
        }
      },
      [rows, cols](Node& self) {
        Node& a_in = *self.inputs[0];
        Node& b_in = *self.inputs[1];
        for (std::size_t i = 0; i < rows; ++i) {
          const double g = self.grad[i];
          if (g == 0.0) continue;
          double dot = 0.0, na = 0.0, nb = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            dot += a_in.values[i * cols + j] * b_in.values[i * cols + j];
            na += a_in.values[i * cols + j] * a_in.values[i * cols + j];
            nb += b_in.values[i * cols + j] * b_in.values[i * cols + j];
          }
          const double norm_a = std::sqrt(na), norm_b = std::sqrt(nb);
          if (norm_a * norm_b < kDegenerateNorm * kDegenerateNorm) continue;
          const double c = dot / (norm_a * norm_b);
          if (a_in.requires_grad) {
            for (std::size_t j = 0; j < cols; ++j) {
              a_in.grad[i * cols + j] +=
                  g * (b_in.values[i * cols + j] / (norm_a * norm_b) -
                       c * a_in.values[i * cols + j] / na);
            }
          }
          if (b_in.requires_grad) {
            for (std::size_t j = 0; j < cols; ++j) {
              b_in.grad[i * cols + j] +=
                  g * (a_in.values[i * cols + j] / (norm_a * norm_b) -
                       c * b_in.values[i * cols + j] / nb);
            }
          }
        }
      });
}

// Batch normalization, training mode: normalizes by per-batch statistics.
// Exposes the batch statistics so the caller can maintain running estimates;
// the op itself stays pure so forward_eval can replay it.
inline Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps, std::vector<double>* out_mean = nullptr,
                              std::vector<double>* out_var = nullptr) {
  detail::require_matrix(x, "batchnorm_train");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (gamma.shape() != std::vector<std::size_t>{cols} || beta.shape() != std::vector<std::size_t>{cols}) {
    throw ContractError("batchnorm_train: scale/shift shape " + format_shape(gamma.shape()) +
                        " does not match feature count of " + format_shape(x.shape()));
  }
  auto result = detail::make_op(
      "batchnorm_train", x.shape(), {x, gamma, beta},
      [rows, cols, eps](Node& self) {
        const auto& xv = self.inputs[0]->values;
        const auto& gv = self.inputs[1]->values;
        const auto& bv = self.inputs[2]->values;
        for (std::size_t j = 0; j < cols; ++j) {
          double mu = 0.0;
          for (std::size_t i = 0; i < rows; ++i) mu += xv[i * cols + j];
          mu /= static_cast<double>(rows);
          double var = 0.0;
          for (std::size_t i = 0; i < rows; ++i) {
            const double d = xv[i * cols + j] - mu;
            var += d * d;
          }
          var /= static_cast<double>(rows);
          const double inv_std = 1.0 / std::sqrt(var + eps);
          for (std::size_t i = 0; i < rows; ++i) {
            self.values[i * cols + j] = gv[j] * (xv[i * cols + j] - mu) * inv_std + bv[j];
          }
        }
      },
      [rows, cols, eps](Node& self) {
        Node& x_in = *self.inputs[0];
        Node& g_in = *self.inputs[1];
        Node& b_in = *self.inputs[2];
        const double n = static_cast<double>(rows);
        for (std::size_t j = 0; j < cols; ++j) {
          double mu = 0.0;
          for (std::size_t i = 0; i < rows; ++i) mu += x_in.values[i * cols + j];
          mu /= n;
          double var = 0.0;
          for (std::size_t i = 0; i < rows; ++i) {
            const double d = x_in.values[i * cols + j] - mu;
            var += d * d;
          }
          var /= n;
          const double inv_std = 1.0 / std::sqrt(var + eps);
          const double gamma_j = g_in.values[j];

          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < rows; ++i) {
            const double xhat = (x_in.values[i * cols + j] - mu) * inv_std;
            const double dy = self.grad[i * cols + j];
            sum_dy += dy;
            sum_dy_xhat += dy * xhat;
          }
          if (g_in.requires_grad) g_in.grad[j] += sum_dy_xhat;
          if (b_in.requires_grad) b_in.grad[j] += sum_dy;
          if (x_in.requires_grad) {
            for (std::size_t i = 0; i < rows; ++i) {
              const double xhat = (x_in.values[i * cols + j] - mu) * inv_std;
              const double dy = self.grad[i * cols + j];
              x_in.grad[i * cols + j] +=
                  gamma_j * inv_std * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
            }
          }
        }
      });
  if (out_mean || out_var) {
    const auto& xv = x.values();
    std::vector<double> mu(cols, 0.0), var(cols, 0.0);
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < rows; ++i) mu[j] += xv[i * cols + j];
      mu[j] /= static_cast<double>(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        const double d = xv[i * cols + j] - mu[j];
        var[j] += d * d;
      }
      var[j] /= static_cast<double>(rows);
    }
    if (out_mean) *out_mean = std::move(mu);
    if (out_var) *out_var = std::move(var);
  }
  return result;
}

// Batch normalization, evaluation mode: normalizes by the supplied running
// statistics (captured by value, so replaying the graph is pure).
inline Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             std::vector<double> running_mean, std::vector<double> running_var,
                             double eps) {
  detail::require_matrix(x, "batchnorm_eval");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (running_mean.size() != cols || running_var.size() != cols) {
    throw ContractError("batchnorm_eval: running statistics size does not match feature count");
  }
  auto mu = std::make_shared<std::vector<double>>(std::move(running_mean));
  auto var = std::make_shared<std::vector<double>>(std::move(running_var));
  return detail::make_op(
      "batchnorm_eval", x.shape(), {x, gamma, beta},
      [rows, cols, eps, mu, var](Node& self) {
        const auto& xv = self.inputs[0]->values;
        const auto& gv = self.inputs[1]->values;
        const auto& bv = self.inputs[2]->values;
        for (std::size_t j = 0; j < cols; ++j) {
          const double inv_std = 1.0 / std::sqrt((*var)[j] + eps);
          for (std::size_t i = 0; i < rows; ++i) {
            self.values[i * cols + j] = gv[j] * (xv[i * cols + j] - (*mu)[j]) * inv_std + bv[j];
          }
        }
      },
      [rows, cols, eps, mu, var](Node& self) {
        Node& x_in = *self.inputs[0];
        Node& g_in = *self.inputs[1];
        Node& b_in = *self.inputs[2];
        for (std::size_t j = 0; j < cols; ++j) {
          const double inv_std = 1.0 / std::sqrt((*var)[j] + eps);
          for (std::size_t i = 0; i < rows; ++i) {
            const double dy = self.grad[i * cols + j];
            if (x_in.requires_grad) x_in.grad[i * cols + j] += dy * g_in.values[j] * inv_std;
            if (g_in.requires_grad) {
              g_in.grad[j] += dy * (x_in.values[i * cols + j] - (*mu)[j]) * inv_std;
            }
            if (b_in.requires_grad) b_in.grad[j] += dy;
          }
        }
      });
}

// Stacks matrices with equal column counts along the row axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.shape()[1] != cols) {
      throw ContractError("concat_rows: column mismatch " + format_shape(parts[0].shape()) +
                          " vs " + format_shape(p.shape()));
    }
    rows += p.shape()[0];
  }
  return detail::make_op(
      "concat_rows", {rows, cols}, parts,
      [](Node& self) {
        std::size_t at = 0;
        for (const auto& in : self.inputs) {
          std::copy(in->values.begin(), in->values.end(), self.values.begin() + static_cast<std::ptrdiff_t>(at));
          at += in->values.size();
        }
      },
      [](Node& self) {
        std::size_t at = 0;
        for (const auto& in : self.inputs) {
          if (in->requires_grad) {
            for (std::size_t i = 0; i < in->grad.size(); ++i) in->grad[i] += self.grad[at + i];
          }
          at += in->values.size();
        }
      });
}

// Arbitrary row selection (rows may repeat).
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  for (auto i : indices) {
    if (i >= rows) {
      throw ContractError("gather_rows: index " + std::to_string(i) + " out of bounds for shape " +
                          format_shape(x.shape()));
    }
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return detail::make_op(
      "gather_rows", {idx->size(), cols}, {x},
      [cols, idx](Node& self) {
        const auto& v = self.inputs[0]->values;
        for (std::size_t k = 0; k < idx->size(); ++k) {
          std::copy(v.begin() + static_cast<std::ptrdiff_t>((*idx)[k] * cols),
                    v.begin() + static_cast<std::ptrdiff_t>(((*idx)[k] + 1) * cols),
                    self.values.begin() + static_cast<std::ptrdiff_t>(k * cols));
        }
      },
      [cols, idx](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t k = 0; k < idx->size(); ++k) {
          for (std::size_t j = 0; j < cols; ++j) {
            in.grad[(*idx)[k] * cols + j] += self.grad[k * cols + j];
          }
        }
      });
}

// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (begin > end || end > rows) {
    throw ContractError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") out of bounds for shape " + format_shape(x.shape()));
  }
  return detail::make_op(
      "slice_rows", {end - begin, cols}, {x},
      [begin, cols](Node& self) {
        const auto& v = self.inputs[0]->values;
        std::copy(v.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                  v.begin() + static_cast<std::ptrdiff_t>(begin * cols + self.values.size()),
                  self.values.begin());
      },
      [begin, cols](Node& self) {
        Node& in = *self.inputs[0];
        if (!in.requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[begin * cols + i] += self.grad[i];
      });
}

}  // namespace grafit::ad
