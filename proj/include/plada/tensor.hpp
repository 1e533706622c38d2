#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "plada/common.hpp"

namespace plada {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense row-major float64 tensor. Copies are shallow (shared buffer); ops
// never mutate their inputs. `node >= 0` means the value is tracked on `tape`.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> buf;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor from(Shape s, std::vector<double> vals);
  static Tensor scalar_of(double v) { return full({1}, v); }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return shape_numel(shape); }
  bool defined() const { return buf != nullptr; }
  bool tracked() const { return node >= 0; }

  double* data() { return buf->data(); }
  const double* data() const { return buf->data(); }
  double scalar() const;

  // Metadata-only reshape helper (same buffer, no tape node). Op-level
  // reshape() is the tracked version.
  Tensor viewed(Shape s) const;
};

// Reverse-mode tape. Built eagerly during a forward pass, consumed by
// backward(), then discarded. Nodes are appended in execution order, so every
// node's inputs precede it and one reverse sweep visits each node once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  // Registers `v` as a tracked leaf and returns the tracked alias.
  Tensor watch(const Tensor& v);

  // Used by op implementations: appends a node and returns its id.
  int record(const Shape& shape, BackwardFn bw);

  // Accumulates `g` into a node's gradient buffer.
  void add_grad(int node, const Tensor& g);

  // Gradient of the node if any backward contribution reached it.
  const Tensor* grad_ptr(int node) const;

  // Gradient for a tracked tensor; zero tensor for untouched leaves.
  Tensor grad(const Tensor& t) const;

  // Reverse sweep from a tracked scalar loss. May be called repeatedly on the
  // same tape; gradients are reset at the start of each call. Intermediate
  // node gradients are released as soon as they have been consumed, leaf
  // gradients are kept.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  bool is_leaf(int node) const { return !nodes_[static_cast<size_t>(node)].bw; }

 private:
  struct NodeRec {
    Shape shape;
    BackwardFn bw;  // empty for leaves
  };
  std::vector<NodeRec> nodes_;
  // Gradient slots adopt the first contribution by reference and only copy on
  // a second accumulation (most nodes receive exactly one contribution).
  std::vector<Tensor> grads_;
  std::vector<char> grad_owned_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor adds(const Tensor& a, double c);
Tensor muls(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor exp_(const Tensor& a);
Tensor log_(const Tensor& a);
Tensor sqrt_(const Tensor& a);
Tensor abs_(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor pow_const(const Tensor& a, double p);

// ---- shape & indexing ----
Tensor reshape(const Tensor& a, Shape s);      // zero-copy view
Tensor permute(const Tensor& a, const std::vector<int>& axes);  // materializes
Tensor transpose(const Tensor& a);             // 2-d permute {1,0}
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor rows_select(const Tensor& a, const std::vector<int>& rows);
Tensor tile_rows(const Tensor& a, int reps);   // [..]->[reps, ..]
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // [n,D]+[D]

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_squares(const Tensor& a);  // scalar sum of elementwise squares
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);     // [N,m,k]x[N,k,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);  // [N,m,k]x[N,n,k] -> [N,m,n]

// ---- nn primitives ----
Tensor softmax(const Tensor& a, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor conv1d(const Tensor& x, const Tensor& kernel, int stride, int padding);
Tensor adaptive_avg_pool1d(const Tensor& x, int out_len);
Tensor bce_with_logits(const Tensor& logit, const Tensor& target);
Tensor reverse_gradient(const Tensor& x, double scale);
Tensor pairwise_sqdist(const Tensor& x);  // [n,D]->[n,n]

// ---- gradcheck ----
struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Finite-difference audit of every differentiable op (central differences,
// h = 1e-6, >= `instances` random instances per op).
std::vector<GradCheckResult> run_gradcheck(uint64_t seed, int instances);

}  // namespace plada
