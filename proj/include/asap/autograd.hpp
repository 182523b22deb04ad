#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "asap/tensor.hpp"

namespace asap {

// Redirects leaf-parameter gradients away from Tensor::grad so independent
// worker threads can run backward over shared parameters; buffers are merged
// into the parameters afterwards in a fixed order.
class GradSink {
 public:
  std::vector<double>& buffer_for(TensorData* t) {
    auto& buf = bufs_[t];
    if (buf.empty()) buf.assign(t->v.size(), 0.0);
    return buf;
  }
  const std::vector<double>* find(TensorData* t) const {
    auto it = bufs_.find(t);
    return it == bufs_.end() ? nullptr : &it->second;
  }
  void clear() { bufs_.clear(); }

 private:
  std::unordered_map<TensorData*, std::vector<double>> bufs_;
};

// Dynamically recorded reverse-mode tape. Rebuilt per forward pass; ops
// compute values identically whether or not gradients are enabled.
// Single-owner: one thread per tape. Tensors produced by a disabled tape
// are plain values and never require backward.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void set_leaf_sink(GradSink* sink) { sink_ = sink; }
  size_t num_nodes() const { return nodes_.size(); }

  // y = x W + b, broadcast over rows; b may be undefined for no bias.
  Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b);

  Tensor matmul(const Tensor& a, const Tensor& b);     // [p,k]x[k,n]
  Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [p,k]x[n,k]^T

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor add_rowvec(const Tensor& a, const Tensor& v);
  Tensor scale(const Tensor& a, double c);
  Tensor add_const(const Tensor& a, const std::vector<double>& c);

  Tensor tanh_(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor exp_(const Tensor& a);
  Tensor clamp(const Tensor& a, double lo, double hi);
  Tensor maximum(const Tensor& a, const Tensor& b);

  Tensor slice_cols(const Tensor& a, int64_t offset, int64_t len);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor gather_rows(const Tensor& m, std::vector<int64_t> idx);
  Tensor mean_rows(const Tensor& a);  // [n,d] -> [1,d]
  Tensor sum_all(const Tensor& a);    // -> [1]
  Tensor dot_const(const Tensor& a, std::vector<double> w);  // -> [1]
  Tensor reshape_copy(const Tensor& a, Shape shape);

  // Mask vectors are row-major [rows*cols]; nonzero = excluded position.
  // An all-excluded row is a contract violation.
  Tensor masked_softmax(const Tensor& scores, std::vector<uint8_t> mask);
  Tensor masked_log_softmax(const Tensor& logits, std::vector<uint8_t> mask);
  Tensor mask_fill_neg_inf(const Tensor& a, std::vector<uint8_t> mask);
  Tensor gather_cols(const Tensor& a, std::vector<int64_t> idx);  // [p,n]->[p]
  Tensor row_entropy(const Tensor& logp, std::vector<uint8_t> mask);

  // Normalizes each channel over all rows to mean 0 / variance 1 using the
  // batch statistics (biased variance), then applies gamma/beta. Optionally
  // reports the batch statistics for running-average upkeep.
  Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps, std::vector<double>* mean_out,
                          std::vector<double>* var_out);
  Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const Tensor& run_mean, const Tensor& run_var, double eps);

  // Populates gradients of every tracked tensor reachable from `loss`.
  // Repeated calls accumulate.
  void backward(const Tensor& loss);

 private:
  Tensor make(Shape shape, bool tracked);
  bool track(std::initializer_list<const Tensor*> inputs) const;
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  // Gradient accumulation target for a tensor, or nullptr when untracked.
  double* grad_of(const Tensor& t);

  bool grad_enabled_;
  GradSink* sink_ = nullptr;
  std::vector<std::function<void()>> nodes_;
  std::unordered_set<TensorData*> produced_;
};

}  // namespace asap
