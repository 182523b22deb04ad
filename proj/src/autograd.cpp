#include "asap/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace asap {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using MatC = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using Mat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

Tensor Tape::make(Shape shape, bool tracked) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.raw()->tracked = tracked;
  if (tracked) produced_.insert(t.raw());
  return t;
}

bool Tape::track(std::initializer_list<const Tensor*> inputs) const {
  if (!grad_enabled_) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->tracked()) return true;
  }
  return false;
}

double* Tape::grad_of(const Tensor& t) {
  TensorData* d = t.raw();
  if (!d->tracked) return nullptr;
  if (sink_ && d->requires_grad && !produced_.count(d)) return sink_->buffer_for(d).data();
  return const_cast<Tensor&>(t).grad().data();
}

Tensor Tape::linear(const Tensor& x, const Tensor& W, const Tensor& b) {
  Tensor y = matmul(x, W);
  return b.defined() ? add_rowvec(y, b) : y;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (b.ndim() != 2)
    throw ShapeError("matmul: weight must be 2-D, got " + shape_str(b.shape()));
  if (a.cols() != b.dim(0))
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int64_t p = a.rows(), k = a.cols(), n = b.dim(1);
  const bool tr = track({&a, &b});
  Tensor out = make(a.ndim() == 1 ? Shape{n} : Shape{p, n}, tr);
  {
    MatC A(a.data(), p, k), B(b.data(), k, n);
    Mat O(out.data(), p, n);
    O.noalias() = A * B;
  }
  if (tr)
    record([this, a, b, out, p, k, n]() {
      if (out.raw()->g.empty()) return;
      MatC dO(out.raw()->g.data(), p, n);
      MatC A(a.data(), p, k), B(b.data(), k, n);
      if (double* ga = grad_of(a)) {
        Mat dA(ga, p, k);
        dA.noalias() += dO * B.transpose();
      }
      if (double* gb = grad_of(b)) {
        Mat dB(gb, k, n);
        dB.noalias() += A.transpose() * dO;
      }
    });
  return out;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  if (b.ndim() != 2)
    throw ShapeError("matmul_nt: rhs must be 2-D, got " + shape_str(b.shape()));
  if (a.cols() != b.dim(1))
    throw ShapeError("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  const int64_t p = a.rows(), k = a.cols(), n = b.dim(0);
  const bool tr = track({&a, &b});
  Tensor out = make(a.ndim() == 1 ? Shape{n} : Shape{p, n}, tr);
  {
    MatC A(a.data(), p, k), B(b.data(), n, k);
    Mat O(out.data(), p, n);
    O.noalias() = A * B.transpose();
  }
  if (tr)
    record([this, a, b, out, p, k, n]() {
      if (out.raw()->g.empty()) return;
      MatC dO(out.raw()->g.data(), p, n);
      MatC A(a.data(), p, k), B(b.data(), n, k);
      if (double* ga = grad_of(a)) {
        Mat dA(ga, p, k);
        dA.noalias() += dO * B;
      }
      if (double* gb = grad_of(b)) {
        Mat dB(gb, n, k);
        dB.noalias() += dO.transpose() * A;
      }
    });
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const bool tr = track({&a, &b});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (tr)
    record([this, a, b, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d[i];
      if (double* gb = grad_of(b))
        for (int64_t i = 0; i < n; ++i) gb[i] += d[i];
    });
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const bool tr = track({&a, &b});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (tr)
    record([this, a, b, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d[i];
      if (double* gb = grad_of(b))
        for (int64_t i = 0; i < n; ++i) gb[i] -= d[i];
    });
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const bool tr = track({&a, &b});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (tr)
    record([this, a, b, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d[i] * b.data()[i];
      if (double* gb = grad_of(b))
        for (int64_t i = 0; i < n; ++i) gb[i] += d[i] * a.data()[i];
    });
  return out;
}

Tensor Tape::add_rowvec(const Tensor& a, const Tensor& v) {
  if (v.numel() != a.cols())
    throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " vs matrix " +
                     shape_str(a.shape()));
  const int64_t p = a.rows(), c = a.cols();
  const bool tr = track({&a, &v});
  Tensor out = make(a.shape(), tr);
  for (int64_t r = 0; r < p; ++r)
    for (int64_t j = 0; j < c; ++j) out.data()[r * c + j] = a.data()[r * c + j] + v.data()[j];
  if (tr)
    record([this, a, v, out, p, c]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < p * c; ++i) ga[i] += d[i];
      if (double* gv = grad_of(v))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) gv[j] += d[r * c + j];
    });
  return out;
}

Tensor Tape::scale(const Tensor& a, double s) {
  const bool tr = track({&a});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  if (tr)
    record([this, a, out, s, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d[i] * s;
    });
  return out;
}

Tensor Tape::add_const(const Tensor& a, const std::vector<double>& c) {
  if (static_cast<int64_t>(c.size()) != a.numel())
    throw ShapeError("add_const: constant length " + std::to_string(c.size()) + " vs " +
                     shape_str(a.shape()));
  const bool tr = track({&a});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + c[i];
  if (tr)
    record([this, a, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d[i];
    });
  return out;
}

Tensor Tape::tanh_(const Tensor& a) {
  const bool tr = track({&a});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = std::tanh(a.data()[i]);
  if (tr)
    record([this, a, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) {
          const double y = out.data()[i];
          ga[i] += d[i] * (1.0 - y * y);
        }
    });
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  const bool tr = track({&a});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  if (tr)
    record([this, a, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i)
          if (a.data()[i] > 0.0) ga[i] += d[i];
    });
  return out;
}

Tensor Tape::exp_(const Tensor& a) {
  const bool tr = track({&a});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
  if (tr)
    record([this, a, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d[i] * out.data()[i];
    });
  return out;
}

Tensor Tape::clamp(const Tensor& a, double lo, double hi) {
  const bool tr = track({&a});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = std::min(std::max(a.data()[i], lo), hi);
  if (tr)
    record([this, a, out, lo, hi, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i)
          if (a.data()[i] >= lo && a.data()[i] <= hi) ga[i] += d[i];
    });
  return out;
}

Tensor Tape::maximum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "maximum");
  const bool tr = track({&a, &b});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = std::max(a.data()[i], b.data()[i]);
  if (tr)
    record([this, a, b, out, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      double* ga = grad_of(a);
      double* gb = grad_of(b);
      for (int64_t i = 0; i < n; ++i) {
        if (a.data()[i] >= b.data()[i]) {  // ties route to a
          if (ga) ga[i] += d[i];
        } else if (gb) {
          gb[i] += d[i];
        }
      }
    });
  return out;
}

Tensor Tape::slice_cols(const Tensor& a, int64_t offset, int64_t len) {
  const int64_t p = a.rows(), c = a.cols();
  if (offset < 0 || len < 1 || offset + len > c)
    throw ShapeError("slice_cols: [" + std::to_string(offset) + ", " +
                     std::to_string(offset + len) + ") out of " + shape_str(a.shape()));
  const bool tr = track({&a});
  Tensor out = make(a.ndim() == 1 ? Shape{len} : Shape{p, len}, tr);
  for (int64_t r = 0; r < p; ++r)
    for (int64_t j = 0; j < len; ++j) out.data()[r * len + j] = a.data()[r * c + offset + j];
  if (tr)
    record([this, a, out, offset, len, p, c]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < len; ++j) ga[r * c + offset + j] += d[r * len + j];
    });
  return out;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int64_t p = parts[0].rows();
  int64_t total = 0;
  bool tr = false;
  for (const Tensor& t : parts) {
    if (t.rows() != p)
      throw ShapeError("concat_cols: row mismatch " + shape_str(t.shape()));
    total += t.cols();
    tr = tr || (grad_enabled_ && t.tracked());
  }
  Tensor out = make(parts[0].ndim() == 1 ? Shape{total} : Shape{p, total}, tr);
  int64_t off = 0;
  for (const Tensor& t : parts) {
    const int64_t c = t.cols();
    for (int64_t r = 0; r < p; ++r)
      for (int64_t j = 0; j < c; ++j) out.data()[r * total + off + j] = t.data()[r * c + j];
    off += c;
  }
  if (tr)
    record([this, parts, out, p, total]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      int64_t off = 0;
      for (const Tensor& t : parts) {
        const int64_t c = t.cols();
        if (double* gt = grad_of(t)) {
          for (int64_t r = 0; r < p; ++r)
            for (int64_t j = 0; j < c; ++j) gt[r * c + j] += d[r * total + off + j];
        }
        off += c;
      }
    });
  return out;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int64_t c = parts[0].cols();
  int64_t total = 0;
  bool tr = false;
  for (const Tensor& t : parts) {
    if (t.cols() != c)
      throw ShapeError("concat_rows: column mismatch " + shape_str(t.shape()));
    total += t.rows();
    tr = tr || (grad_enabled_ && t.tracked());
  }
  Tensor out = make({total, c}, tr);
  int64_t off = 0;
  for (const Tensor& t : parts) {
    std::copy(t.data(), t.data() + t.numel(), out.data() + off * c);
    off += t.rows();
  }
  if (tr)
    record([this, parts, out, c]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      int64_t off = 0;
      for (const Tensor& t : parts) {
        if (double* gt = grad_of(t)) {
          const int64_t n = t.numel();
          for (int64_t i = 0; i < n; ++i) gt[i] += d[off * c + i];
        }
        off += t.rows();
      }
    });
  return out;
}

Tensor Tape::gather_rows(const Tensor& m, std::vector<int64_t> idx) {
  const int64_t rows = m.rows(), c = m.cols();
  for (int64_t i : idx)
    if (i < 0 || i >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of " +
                       shape_str(m.shape()));
  const int64_t p = static_cast<int64_t>(idx.size());
  const bool tr = track({&m});
  Tensor out = make({p, c}, tr);
  for (int64_t r = 0; r < p; ++r)
    std::copy(m.data() + idx[r] * c, m.data() + (idx[r] + 1) * c, out.data() + r * c);
  if (tr)
    record([this, m, out, idx = std::move(idx), p, c]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* gm = grad_of(m))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) gm[idx[r] * c + j] += d[r * c + j];
    });
  return out;
}

Tensor Tape::mean_rows(const Tensor& a) {
  const int64_t p = a.rows(), c = a.cols();
  const bool tr = track({&a});
  Tensor out = make({1, c}, tr);
  for (int64_t r = 0; r < p; ++r)
    for (int64_t j = 0; j < c; ++j) out.data()[j] += a.data()[r * c + j];
  for (int64_t j = 0; j < c; ++j) out.data()[j] /= static_cast<double>(p);
  if (tr)
    record([this, a, out, p, c]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a)) {
        const double inv = 1.0 / static_cast<double>(p);
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) ga[r * c + j] += d[j] * inv;
      }
    });
  return out;
}

Tensor Tape::sum_all(const Tensor& a) {
  const bool tr = track({&a});
  Tensor out = make({1}, tr);
  double s = 0.0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += a.data()[i];
  out.data()[0] = s;
  if (tr)
    record([this, a, out, n]() {
      if (out.raw()->g.empty()) return;
      const double d = out.raw()->g[0];
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d;
    });
  return out;
}

Tensor Tape::dot_const(const Tensor& a, std::vector<double> w) {
  if (static_cast<int64_t>(w.size()) != a.numel())
    throw ShapeError("dot_const: weight length " + std::to_string(w.size()) + " vs " +
                     shape_str(a.shape()));
  const bool tr = track({&a});
  Tensor out = make({1}, tr);
  double s = 0.0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += a.data()[i] * w[i];
  out.data()[0] = s;
  if (tr)
    record([this, a, out, w = std::move(w), n]() {
      if (out.raw()->g.empty()) return;
      const double d = out.raw()->g[0];
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i) ga[i] += d * w[i];
    });
  return out;
}

Tensor Tape::reshape_copy(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  const bool tr = track({&a});
  Tensor out = make(std::move(shape), tr);
  std::copy(a.data(), a.data() + a.numel(), out.data());
  if (tr)
    record([this, a, out]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a)) {
        const int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) ga[i] += d[i];
      }
    });
  return out;
}

namespace {

void check_mask(const Tensor& t, const std::vector<uint8_t>& mask, const char* op) {
  if (!mask.empty() && static_cast<int64_t>(mask.size()) != t.numel())
    throw ShapeError(std::string(op) + ": mask length " + std::to_string(mask.size()) +
                     " vs " + shape_str(t.shape()));
}

inline bool included(const std::vector<uint8_t>& mask, int64_t i) {
  return mask.empty() || mask[i] == 0;
}

}  // namespace

Tensor Tape::masked_softmax(const Tensor& scores, std::vector<uint8_t> mask) {
  check_mask(scores, mask, "masked_softmax");
  const int64_t p = scores.rows(), n = scores.cols();
  const bool tr = track({&scores});
  Tensor out = make(scores.shape(), tr);
  for (int64_t r = 0; r < p; ++r) {
    const double* x = scores.data() + r * n;
    double* y = out.data() + r * n;
    double m = kNegInf;
    for (int64_t j = 0; j < n; ++j)
      if (included(mask, r * n + j)) m = std::max(m, x[j]);
    if (m == kNegInf)
      throw ContractError("masked_softmax: all keys masked in row " + std::to_string(r));
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      if (included(mask, r * n + j)) {
        y[j] = std::exp(x[j] - m);
        s += y[j];
      } else {
        y[j] = 0.0;
      }
    }
    for (int64_t j = 0; j < n; ++j) y[j] /= s;
  }
  if (tr)
    record([this, scores, out, mask = std::move(mask), p, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* gx = grad_of(scores)) {
        for (int64_t r = 0; r < p; ++r) {
          const double* prob = out.data() + r * n;
          double dot = 0.0;
          for (int64_t j = 0; j < n; ++j) dot += d[r * n + j] * prob[j];
          for (int64_t j = 0; j < n; ++j)
            if (included(mask, r * n + j))
              gx[r * n + j] += prob[j] * (d[r * n + j] - dot);
        }
      }
    });
  return out;
}

Tensor Tape::masked_log_softmax(const Tensor& logits, std::vector<uint8_t> mask) {
  check_mask(logits, mask, "masked_log_softmax");
  const int64_t p = logits.rows(), n = logits.cols();
  const bool tr = track({&logits});
  Tensor out = make(logits.shape(), tr);
  for (int64_t r = 0; r < p; ++r) {
    const double* x = logits.data() + r * n;
    double* y = out.data() + r * n;
    double m = kNegInf;
    for (int64_t j = 0; j < n; ++j)
      if (included(mask, r * n + j)) m = std::max(m, x[j]);
    if (m == kNegInf)
      throw ContractError("masked_log_softmax: all entries masked in row " + std::to_string(r));
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j)
      if (included(mask, r * n + j)) s += std::exp(x[j] - m);
    const double lse = m + std::log(s);
    for (int64_t j = 0; j < n; ++j)
      y[j] = included(mask, r * n + j) ? x[j] - lse : kNegInf;
  }
  if (tr)
    record([this, logits, out, mask = std::move(mask), p, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* gx = grad_of(logits)) {
        for (int64_t r = 0; r < p; ++r) {
          double gsum = 0.0;
          for (int64_t j = 0; j < n; ++j)
            if (included(mask, r * n + j)) gsum += d[r * n + j];
          for (int64_t j = 0; j < n; ++j) {
            if (!included(mask, r * n + j)) continue;
            gx[r * n + j] += d[r * n + j] - std::exp(out.data()[r * n + j]) * gsum;
          }
        }
      }
    });
  return out;
}

Tensor Tape::mask_fill_neg_inf(const Tensor& a, std::vector<uint8_t> mask) {
  check_mask(a, mask, "mask_fill_neg_inf");
  const bool tr = track({&a});
  Tensor out = make(a.shape(), tr);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = included(mask, i) ? a.data()[i] : kNegInf;
  if (tr)
    record([this, a, out, mask = std::move(mask), n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t i = 0; i < n; ++i)
          if (included(mask, i)) ga[i] += d[i];
    });
  return out;
}

Tensor Tape::gather_cols(const Tensor& a, std::vector<int64_t> idx) {
  const int64_t p = a.rows(), n = a.cols();
  if (static_cast<int64_t>(idx.size()) != p)
    throw ShapeError("gather_cols: index count " + std::to_string(idx.size()) + " vs " +
                     shape_str(a.shape()));
  for (int64_t i : idx)
    if (i < 0 || i >= n)
      throw ShapeError("gather_cols: index " + std::to_string(i) + " out of " +
                       shape_str(a.shape()));
  const bool tr = track({&a});
  Tensor out = make({p}, tr);
  for (int64_t r = 0; r < p; ++r) out.data()[r] = a.data()[r * n + idx[r]];
  if (tr)
    record([this, a, out, idx = std::move(idx), p, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* ga = grad_of(a))
        for (int64_t r = 0; r < p; ++r) ga[r * n + idx[r]] += d[r];
    });
  return out;
}

Tensor Tape::row_entropy(const Tensor& logp, std::vector<uint8_t> mask) {
  check_mask(logp, mask, "row_entropy");
  const int64_t p = logp.rows(), n = logp.cols();
  const bool tr = track({&logp});
  Tensor out = make({p}, tr);
  for (int64_t r = 0; r < p; ++r) {
    double h = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double lp = logp.data()[r * n + j];
      if (included(mask, r * n + j) && lp != kNegInf) h -= std::exp(lp) * lp;
    }
    out.data()[r] = h;
  }
  if (tr)
    record([this, logp, out, mask = std::move(mask), p, n]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* gl = grad_of(logp)) {
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < n; ++j) {
            const double lp = logp.data()[r * n + j];
            if (included(mask, r * n + j) && lp != kNegInf)
              gl[r * n + j] += d[r] * (-std::exp(lp) * (1.0 + lp));
          }
      }
    });
  return out;
}

Tensor Tape::batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps, std::vector<double>* mean_out,
                              std::vector<double>* var_out) {
  const int64_t p = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("batch_norm: channels " + std::to_string(c) + " vs gamma " +
                     shape_str(gamma.shape()));
  if (p < 2)
    throw ContractError("batch_norm train mode is degenerate with a single position");
  std::vector<double> mu(c, 0.0), var(c, 0.0), inv(c, 0.0);
  for (int64_t r = 0; r < p; ++r)
    for (int64_t j = 0; j < c; ++j) mu[j] += x.data()[r * c + j];
  for (int64_t j = 0; j < c; ++j) mu[j] /= static_cast<double>(p);
  for (int64_t r = 0; r < p; ++r)
    for (int64_t j = 0; j < c; ++j) {
      const double dxj = x.data()[r * c + j] - mu[j];
      var[j] += dxj * dxj;
    }
  for (int64_t j = 0; j < c; ++j) {
    var[j] /= static_cast<double>(p);
    inv[j] = 1.0 / std::sqrt(var[j] + eps);
  }
  if (mean_out) *mean_out = mu;
  if (var_out) *var_out = var;

  const bool tr = track({&x, &gamma, &beta});
  Tensor out = make(x.shape(), tr);
  std::vector<double> xhat(static_cast<size_t>(p * c));
  for (int64_t r = 0; r < p; ++r)
    for (int64_t j = 0; j < c; ++j) {
      const double h = (x.data()[r * c + j] - mu[j]) * inv[j];
      xhat[r * c + j] = h;
      out.data()[r * c + j] = gamma.data()[j] * h + beta.data()[j];
    }
  if (tr)
    record([this, x, gamma, beta, out, xhat = std::move(xhat), inv = std::move(inv), p, c]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* gb = grad_of(beta))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) gb[j] += d[r * c + j];
      if (double* gg = grad_of(gamma))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) gg[j] += d[r * c + j] * xhat[r * c + j];
      if (double* gx = grad_of(x)) {
        // Per channel: dx = gamma*inv*(dy - mean(dy) - xhat*mean(dy*xhat))
        std::vector<double> mean_dy(c, 0.0), mean_dyx(c, 0.0);
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) {
            mean_dy[j] += d[r * c + j];
            mean_dyx[j] += d[r * c + j] * xhat[r * c + j];
          }
        for (int64_t j = 0; j < c; ++j) {
          mean_dy[j] /= static_cast<double>(p);
          mean_dyx[j] /= static_cast<double>(p);
        }
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j)
            gx[r * c + j] += gamma.data()[j] * inv[j] *
                             (d[r * c + j] - mean_dy[j] - xhat[r * c + j] * mean_dyx[j]);
      }
    });
  return out;
}

Tensor Tape::batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             const Tensor& run_mean, const Tensor& run_var, double eps) {
  const int64_t p = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c || run_mean.numel() != c || run_var.numel() != c)
    throw ShapeError("batch_norm_eval: channel mismatch with " + shape_str(x.shape()));
  const bool tr = track({&x, &gamma, &beta});
  Tensor out = make(x.shape(), tr);
  std::vector<double> inv(c);
  for (int64_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(run_var.data()[j] + eps);
  for (int64_t r = 0; r < p; ++r)
    for (int64_t j = 0; j < c; ++j)
      out.data()[r * c + j] =
          gamma.data()[j] * (x.data()[r * c + j] - run_mean.data()[j]) * inv[j] +
          beta.data()[j];
  if (tr)
    record([this, x, gamma, beta, run_mean, out, inv = std::move(inv), p, c]() {
      if (out.raw()->g.empty()) return;
      const double* d = out.raw()->g.data();
      if (double* gb = grad_of(beta))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) gb[j] += d[r * c + j];
      if (double* gg = grad_of(gamma))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j)
            gg[j] += d[r * c + j] * (x.data()[r * c + j] - run_mean.data()[j]) * inv[j];
      if (double* gx = grad_of(x))
        for (int64_t r = 0; r < p; ++r)
          for (int64_t j = 0; j < c; ++j) gx[r * c + j] += d[r * c + j] * gamma.data()[j] * inv[j];
    });
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.tracked())
    throw ContractError("backward: loss is not reachable from tracked parameters");
  const_cast<Tensor&>(loss).grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

}  // namespace asap
