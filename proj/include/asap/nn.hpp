#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "asap/autograd.hpp"
#include "asap/rng.hpp"
#include "asap/tensor.hpp"

namespace asap {

// Named tensors with stable iteration order (insertion order), so that
// optimizer traversal and serialization are deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }

  // Every trainable parameter must carry requires_grad.
  void check_trainable() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
Tensor init_weight(Shape shape, int64_t fan_in, Rng& rng);

// Scaled dot-product attention over `heads` head slices of pre-projected
// q/k/v, concatenated and passed through the output projection w_out.
//   q: [p, dim], k,v: [n, dim], mask: [] or [p*n] with 1 = key excluded.
Tensor multi_head_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                            int heads, const std::vector<uint8_t>& mask, const Tensor& w_out);

// Adaptive-moment estimation state; one slot per parameter.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::unordered_map<TensorData*, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// In-place adaptive-moment update from the accumulated gradients, which are
// zeroed afterwards. A parameter whose gradient was never allocated is a
// contract violation.
void optimizer_step(ParamStore& params, AdamState& state, double lr);

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(ParamStore& params, double max_norm);

struct CategoricalDraw {
  int64_t index = 0;
  double log_prob = 0.0;
  double entropy = 0.0;
};

// Draws from softmax(logits); -inf logits carry exactly zero probability.
// A row with no finite logit is a contract violation.
CategoricalDraw categorical_sample(std::span<const double> logits, Rng& rng);

// Greedy argmax with lowest-index tie-break plus the distribution stats.
CategoricalDraw categorical_argmax(std::span<const double> logits);

}  // namespace asap
