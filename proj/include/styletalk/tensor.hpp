#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "styletalk/common.hpp"

namespace styletalk {

class Tape;

struct TensorData {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until needed; same length as value once allocated
  bool requires_grad = false;
  bool tracked = false;       // produced under (or fed into) the active tape
  uint64_t epoch = 0;         // tape epoch the tracked flag belongs to

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

// Dense row-major tensor of 64-bit floats. Value-semantics handle over shared
// storage; immutable after creation except for gradient accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor from(std::vector<int> shape, std::vector<double> data);
  static Tensor scalar(double v) { return from({1}, {v}); }
  // Leaf parameter participating in backward.
  static Tensor param(std::vector<int> shape, std::vector<double> data);

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(d_->value.size()); }

  std::span<const double> values() const { return d_->value; }
  std::span<double> values_mut() { return d_->value; }
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return d_->requires_grad; }
  std::span<const double> grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  std::shared_ptr<TensorData> d_;
};

// Dynamic tape, rebuilt per training step. Constructing a Tape makes it the
// active recording target for the current thread; destruction restores the
// previous one.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Runs recorded backward rules in reverse order, seeding d(loss)/d(loss)=1.
  // `loss` must be a scalar produced on this tape.
  void backward(const Tensor& loss);

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  size_t size() const { return ops_.size(); }
  uint64_t epoch() const { return epoch_; }

  static Tape* current();

 private:
  std::vector<std::function<void()>> ops_;
  Tape* prev_ = nullptr;
  uint64_t epoch_ = 0;
};

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                    // [m,n] -> [n,m]
Tensor add(const Tensor& a, const Tensor& b);         // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);         // elementwise
Tensor div(const Tensor& a, const Tensor& b);         // elementwise
Tensor add_row(const Tensor& a, const Tensor& r);     // [m,n] + [n], row broadcast
Tensor scale_rows(const Tensor& a, const Tensor& v);  // row i scaled by v[i]
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor log_t(const Tensor& a);       // elementwise ln, domain x > 0
Tensor exp_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);      // domain x >= 0 forward, x > 0 backward
Tensor softplus(const Tensor& a);    // log(1 + e^x), stabilized
Tensor sum(const Tensor& a);         // -> [1]
Tensor mean(const Tensor& a);        // -> [1]
Tensor sum_cols(const Tensor& a);    // [m,n] -> [m], per-row sum
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat_rows(const std::vector<Tensor>& parts);  // along dim 0
Tensor concat_cols(const std::vector<Tensor>& parts);  // along dim 1
Tensor slice_rows(const Tensor& a, int r0, int r1);    // rows [r0, r1)
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor stack_rows(const std::vector<Tensor>& rows);    // k x [n] -> [k,n]

// Numerically stabilized softmax along the last axis (rank 1 or 2). `axis`
// must name the last axis (or -1).
Tensor softmax(const Tensor& x, int axis = -1);

// Per-row standardization followed by affine transform. gain/bias are [n] for
// x of shape [m,n] (or [n] for rank-1 x).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean negative log-likelihood over non-pad target positions.
// logits: [T,V], targets: T ids each in [0,V) or pad_id.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int pad_id);

// Row gather: out[t,:] = table[ids[t],:], with scatter-add backward.
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Inverted dropout with caller-supplied rng; rate 0 returns the input tensor.
Tensor dropout(const Tensor& a, double rate, Rng& rng);

// ---- verification harness ---------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool deterministic = true;  // false invalidates the check
  int coords_checked = 0;
};

// Compares analytic gradients of a scalar-valued function against central
// finite differences. `f` must be deterministic (noise inputs passed in, not
// sampled inside); this is verified by a double forward evaluation.
// At most `max_coords_per_param` coordinates per parameter are sampled using
// `rng` (all coordinates when the parameter is small enough).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                           double eps = 1e-5, int max_coords_per_param = 16,
                           Rng* rng = nullptr);

}  // namespace styletalk
