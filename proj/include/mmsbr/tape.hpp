#pragma once

// Reverse-mode differentiation over 2-D tensors.
//
// A Tape is an append-only list of nodes. Every op reads nodes that already
// exist, so node ids are a topological order and backward() is a single
// reverse sweep that visits each node once.

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mmsbr/tensor.hpp"

namespace mmsbr::diff {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that receives a gradient.
  Var variable(Tensor value, std::string name = {});

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() target w.r.t. v. Zero-filled when v
  /// was not reached.
  Tensor grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);

  /// When on, every recorded value is checked for NaN/Inf and the op that
  /// produced it is named in the error.
  void set_check_finite(bool on) { check_finite_ = on; }

  // Op-author interface.
  Var record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient buffer of an input, allocated on first use.
  Tensor& accum(std::size_t id);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool check_finite_ = false;
};

// ---------------------------------------------------------------------------
// Op catalog. Shapes are checked eagerly; mismatches throw std::invalid_argument
// naming both shapes.

Var matmul(Var a, Var b);     // a(m x k) b(k x n)
Var matmul_nt(Var a, Var b);  // a(m x k) b(n x k)^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);         // elementwise
Var add_row(Var x, Var row);   // x(m x n) + row(1 x n) on every row
Var mul_row(Var x, Var row);   // x(m x n) * row(1 x n) on every row
Var mul_rows(Var x, Var col);  // x(m x n) * col(m x 1) per row
Var scale(Var x, double s);
Var add_scalar(Var x, double s);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var gather_rows(Var x, std::vector<std::size_t> index);
Var reshape(Var x, std::size_t rows, std::size_t cols);
/// One element per row: out(r, 0) = x(r, cols[r]).
Var pick(Var x, std::vector<std::size_t> cols);

Var sum(Var x);    // 1 x 1
Var mean(Var x);   // 1 x 1
Var row_sum(Var x);  // m x 1

Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var masked_fill(Var x, const Tensor& mask, double value);

Var relu(Var x);
Var sigmoid(Var x);
Var elu(Var x);
/// elu(x) + 1 + eps: strictly positive map used for covariances.
Var positive(Var x, double eps = 1e-6);
/// sqrt(max(x, 0)); derivative evaluated at max(x, eps).
Var sqrt_guarded(Var x, double eps = 1e-12);
Var square(Var x);
Var log_clamped(Var x, double floor = 1e-12);

Var normalize_rows(Var x, double eps = 1e-12);
/// Pairwise cosine similarity: out(i, j) = cos(x_i, y_j).
Var cosine_similarity(Var x, Var y);

/// Blocked products over `blocks` equal row-partitions of both operands.
Var block_matmul_nt(Var a, Var b, std::size_t blocks);  // A_b B_b^T
Var block_matmul(Var a, Var b, std::size_t blocks);     // A_b B_b
/// out(b*Lx + i, j) = ||x_{b,i} - y_{b,j}||^2
Var block_pairwise_sqdist(Var x, Var y, std::size_t blocks);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

}  // namespace mmsbr::diff
