#include "asap/nn.hpp"

#include <cmath>
#include <limits>

#include "asap/errors.hpp"

namespace asap {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return items_[it->second].second;
}

void ParamStore::check_trainable() const {
  for (const auto& [name, t] : items_) {
    if (!t.requires_grad()) throw ContractError("parameter without requires_grad: " + name);
  }
}

Tensor init_weight(Shape shape, int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (auto& x : t.values()) x = rng.uniform(-bound, bound);
  return t;
}

Tensor multi_head_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                            int heads, const std::vector<uint8_t>& mask, const Tensor& w_out) {
  const int64_t dim = q.cols();
  if (heads < 1 || dim % heads != 0)
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (k.cols() != dim || v.cols() != dim)
    throw ShapeError("attention q/k/v dims differ: " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  if (k.rows() != v.rows())
    throw ShapeError("attention k/v row mismatch: " + shape_str(k.shape()) + " vs " +
                     shape_str(v.shape()));
  const int64_t dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Tensor> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = tape.slice_cols(q, h * dh, dh);
    Tensor kh = tape.slice_cols(k, h * dh, dh);
    Tensor vh = tape.slice_cols(v, h * dh, dh);
    Tensor scores = tape.scale(tape.matmul_nt(qh, kh), scale);
    Tensor attn = tape.masked_softmax(scores, mask);
    head_outs.push_back(tape.matmul(attn, vh));
  }
  return tape.matmul(tape.concat_cols(head_outs), w_out);
}

void optimizer_step(ParamStore& params, AdamState& st, double lr) {
  params.check_trainable();
  for (const auto& [name, _] : params.items()) {
    const Tensor& t = params.at(name);
    if (!t.has_grad())
      throw ContractError("optimizer_step: no gradient accumulated for " + name);
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (const auto& [name, handle] : params.items()) {
    Tensor t = handle;  // shares storage
    auto& [m, v] = st.moments[t.raw()];
    if (m.empty()) {
      m.assign(t.numel(), 0.0);
      v.assign(t.numel(), 0.0);
    }
    auto& g = t.grad();
    auto& x = t.values();
    for (size_t i = 0; i < x.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      x[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
    t.zero_grad();
  }
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params.items()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad_view()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (const auto& [name, handle] : params.items()) {
      Tensor t = handle;
      if (!t.has_grad()) continue;
      for (double& g : t.grad()) g *= s;
    }
  }
  return norm;
}

namespace {

// Stable per-row distribution; -inf entries get probability exactly 0.
void softmax_row(std::span<const double> logits, std::vector<double>& probs) {
  double m = kNegInf;
  for (double x : logits) m = std::max(m, x);
  if (m == kNegInf)
    throw ContractError("categorical distribution over all -inf logits");
  probs.resize(logits.size());
  double s = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    probs[i] = logits[i] == kNegInf ? 0.0 : std::exp(logits[i] - m);
    s += probs[i];
  }
  for (double& p : probs) p /= s;
}

CategoricalDraw stats_for(std::span<const double> logits, const std::vector<double>& probs,
                          int64_t index) {
  CategoricalDraw d;
  d.index = index;
  double m = kNegInf;
  for (double x : logits) m = std::max(m, x);
  double s = 0.0;
  for (double x : logits)
    if (x != kNegInf) s += std::exp(x - m);
  const double lse = m + std::log(s);
  d.log_prob = logits[index] - lse;
  d.entropy = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) d.entropy -= probs[i] * (logits[i] - lse);
  }
  return d;
}

}  // namespace

CategoricalDraw categorical_sample(std::span<const double> logits, Rng& rng) {
  std::vector<double> probs;
  softmax_row(logits, probs);
  const double u = rng.next_double();
  double acc = 0.0;
  int64_t chosen = -1;
  for (size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;  // zero-mass entries are never drawn
    acc += probs[i];
    if (u < acc) {
      chosen = static_cast<int64_t>(i);
      break;
    }
  }
  if (chosen < 0) {  // guard against rounding at the top of the CDF
    for (size_t i = probs.size(); i-- > 0;) {
      if (probs[i] > 0.0) {
        chosen = static_cast<int64_t>(i);
        break;
      }
    }
  }
  return stats_for(logits, probs, chosen);
}

CategoricalDraw categorical_argmax(std::span<const double> logits) {
  std::vector<double> probs;
  softmax_row(logits, probs);
  int64_t best = 0;
  for (size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = static_cast<int64_t>(i);
  return stats_for(logits, probs, best);
}

}  // namespace asap
