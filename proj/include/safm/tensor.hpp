#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace safm {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense double-precision tensor. Gradient storage is allocated only for
// tensors marked requires_grad; intermediates get transient adjoints on the
// tape during backward.
class Tensor {
 public:
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool tape_output = false;  // produced by a recorded op on the active tape

  static TensorPtr create(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr from(std::vector<int> shape, std::vector<double> vals,
                        bool requires_grad = false);
  static TensorPtr scalar(double v);

  int size() const;
  double item() const;  // scalar tensors only
  void zero_grad();
  void ensure_grad();
  std::string shape_str() const;
};

// Define-by-run tape. Rebuilt per forward pass; backward visits recorded
// nodes in exact reverse order. Leaf gradients accumulate across backward
// calls; intermediate adjoints are local to each backward call.
class Tape {
 public:
  void record(const TensorPtr& out, std::function<void(Tape&)> back);
  void backward(const TensorPtr& loss);

  // Adjoint of `t` for the backward call in flight (zeros on first access).
  std::vector<double>& adjoint(const TensorPtr& t);
  // Null when `t` participates in no gradient path.
  std::vector<double>* grad_sink(const TensorPtr& t);
  const std::vector<double>* find_adjoint(const Tensor* t) const;

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    TensorPtr out;
    std::function<void(Tape&)> back;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::pair<TensorPtr, std::vector<double>>> adjoints_;
};

// Thread-local active tape; null means no recording (inference mode).
Tape* active_tape();

class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* prev_;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// Convenience: backward through the active tape.
void backward(const TensorPtr& loss);

// ---- Operations -----------------------------------------------------------

// a: [..., k], b: [k, m] -> [..., m]
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);           // same shape
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);           // elementwise
TensorPtr add_bias(const TensorPtr& x, const TensorPtr& b);      // b over last dim
TensorPtr scale(const TensorPtr& x, double c);
TensorPtr gelu(const TensorPtr& x);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     double eps = 1e-5);

// x scaled by the idx-th element of a 1-D tensor `w`; differentiable in both.
TensorPtr scale_by_element(const TensorPtr& x, const TensorPtr& w, int idx);
TensorPtr softmax_vec(const TensorPtr& z);  // 1-D
TensorPtr sum_all(const TensorPtr& x);
TensorPtr mean_all(const TensorPtr& x);

// Token + positional embedding lookup: ids laid out [batch, seq].
TensorPtr embed(const TensorPtr& tok_table, const TensorPtr& pos_table,
                const std::vector<int>& ids, int batch, int seq);

// Causal multi-head attention pieces. q, k, v: [B, S, d].
TensorPtr attention_scores(const TensorPtr& q, const TensorPtr& k, int heads);  // [B,H,S,S]
TensorPtr softmax_last(const TensorPtr& x);
TensorPtr attention_mix(const TensorPtr& probs, const TensorPtr& v, int heads);  // [B,S,d]

// Mean negative log-softmax over positions with mask != 0.
// logits: [..., V] flattened to N rows; targets/mask length N.
TensorPtr cross_entropy_loss(const TensorPtr& logits, const std::vector<int>& targets,
                             const std::vector<std::uint8_t>& mask);

// Cosine over the last dim with an epsilon-guarded denominator; output shape
// is the leading dims (scalar for 1-D inputs).
TensorPtr cosine_similarity(const TensorPtr& u, const TensorPtr& v, double eps = 1e-8);

// ---- Optimizer ------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(std::vector<TensorPtr> params, AdamWConfig cfg);
  void step();
  void zero_grad();
  long step_count() const { return step_count_; }
  const std::vector<TensorPtr>& params() const { return params_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<TensorPtr> params_;
  std::vector<Moments> moments_;
  AdamWConfig cfg_;
  long step_count_ = 0;
};

// ---- Verification ---------------------------------------------------------

// Compares the tape gradient of f() w.r.t. x against central differences,
// coordinate-wise; returns the max relative error. f must re-read x.
double finite_difference_check(const std::function<TensorPtr()>& f, const TensorPtr& x,
                               double step);

}  // namespace safm
