#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "felrec/common.hpp"

namespace felrec {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Buffer recycling across computation graphs (thread-local).
void recycle_buffer(std::vector<real>&& v);
std::vector<real> take_buffer(std::size_t n);

struct TensorNode {
  Shape shape;
  std::vector<real> values;
  std::vector<real> grad;  // allocated lazily during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::string name;  // set for named parameters
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;

  TensorNode() = default;
  TensorNode(const TensorNode&) = delete;
  TensorNode& operator=(const TensorNode&) = delete;
  ~TensorNode() {
    recycle_buffer(std::move(values));
    recycle_buffer(std::move(grad));
  }

  void ensure_grad() {
    if (grad.size() != values.size()) {
      grad = take_buffer(values.size());
      std::fill(grad.begin(), grad.end(), real(0));
    }
  }
};

// Value-semantic handle to a node in the computation graph. Tensors are
// immutable once created; only the optimizer mutates parameter values.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, real v);
  static Tensor from(Shape s, std::vector<real> v);
  static Tensor scalar(real v) { return from({}, {v}); }
  static Tensor param(Shape s, std::vector<real> v, std::string name);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }

  const std::vector<real>& values() const { return node_->values; }
  real value() const { return node_->values[0]; }
  // Direct mutation; reserved for initialization and optimizer steps.
  std::vector<real>& raw_values() { return node_->values; }
  const std::vector<real>& grad() const { return node_->grad; }
  std::vector<real>& raw_grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  // Identity on values, detached from the graph.
  Tensor detach() const;

  std::shared_ptr<TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

Tensor stop_gradient(const Tensor& x);

// Elementwise. add/sub/mul require equal shapes; add also accepts a rank-1
// right operand matching the trailing extent (bias broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, real c);
Tensor shift(const Tensor& x, real c);
Tensor relu(const Tensor& x);

// matmul supports (M,K)x(K,N), (...,M,K)x(K,N) with a shared right operand,
// and (...,M,K)x(...,K,N) with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// Fused affine map: x·w + b with w (K,N), b (N), x (...,K).
Tensor matmul_bias(const Tensor& x, const Tensor& w, const Tensor& b);
// alpha * A·B^T with matching leading dims: (...,M,K)x(...,N,K) -> (...,M,N).
Tensor matmul_nt(const Tensor& a, const Tensor& b, real alpha = 1);
Tensor transpose_last2(const Tensor& x);
Tensor swap_axes12(const Tensor& x);  // rank-4 (A,B,C,D) -> (A,C,B,D)
Tensor split_heads(const Tensor& x, std::int64_t heads);  // (B,L,d) -> (B,h,L,d/h)
Tensor merge_heads(const Tensor& x);                      // (B,h,L,dh) -> (B,L,h*dh)
Tensor reshape(const Tensor& x, Shape s);
Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& idx);
// Multiplies row r of a (R, ...) tensor by weight[r]; weights are constants.
Tensor row_scale(const Tensor& x, const std::vector<real>& weight);

// Reductions.
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor rowwise_dot(const Tensor& a, const Tensor& b);  // (B,d)·(B,d) -> (B)
Tensor logsumexp_rows(const Tensor& x);                // (...,N) -> (...)
// (B,L,d) with mask (B,L) -> (B,d); rows with an empty mask yield zeros.
Tensor masked_mean(const Tensor& x, const std::vector<std::uint8_t>& mask);

// Softmax over the last dimension. The masked variant takes a key mask of
// shape (B, L) where B divides the row count; masked entries get weight 0
// and fully masked rows come out as all zeros.
Tensor softmax_rows(const Tensor& x);
Tensor masked_softmax_rows(const Tensor& x, const std::vector<std::uint8_t>& key_mask,
                           std::int64_t batch);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = 1e-5);
// Normalizes (B,F) over the batch dimension. Running statistics live outside
// the graph; they are updated only when training && track_running.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::vector<real>* running_mean, std::vector<real>* running_var,
                  bool training, real momentum = 0.1, real eps = 1e-5,
                  bool track_running = true);
// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, real p, bool training, Rng& rng);
Tensor l2_normalize_rows(const Tensor& x, real eps = 1e-12);

// Reverse-mode sweep from a scalar loss. Accumulates into the grad buffers
// of every reachable tensor with requires_grad; constants receive none.
void backward(const Tensor& loss);

// Deterministic parallel kernels (fixed per-element reduction order).
void gemm_nn(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);
void gemm_nt(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);  // c (m,n) = a (m,k) · b(n,k)^T
void gemm_tn(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);  // c (k,n) = a (m,k)^T · b (m,n)

}  // namespace felrec
