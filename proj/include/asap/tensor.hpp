#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "asap/errors.hpp"

namespace asap {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct TensorData {
  Shape shape;
  std::vector<double> v;  // row-major values
  std::vector<double> g;  // gradient, lazily allocated
  bool requires_grad = false;
  bool tracked = false;  // participates in the current tape's backward pass
};

// Value-semantic handle over shared storage. Gradients accumulate into `g`
// across backward calls until the owner zeroes them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return static_cast<int64_t>(d_->v.size()); }
  int64_t dim(int i) const { return d_->shape[i]; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }

  // [rows, cols] view of the data: 2-D tensors as-is, 1-D as a single row.
  int64_t rows() const { return ndim() == 2 ? dim(0) : 1; }
  int64_t cols() const { return ndim() == 2 ? dim(1) : (ndim() == 1 ? dim(0) : 1); }

  std::vector<double>& values() { return d_->v; }
  const std::vector<double>& values() const { return d_->v; }
  double* data() { return d_->v.data(); }
  const double* data() const { return d_->v.data(); }
  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  bool tracked() const { return d_ && d_->tracked; }
  std::vector<double>& grad();  // allocates zeros on first use
  const std::vector<double>& grad_view() const { return d_->g; }
  bool has_grad() const { return d_ && !d_->g.empty(); }
  void zero_grad();

  TensorData* raw() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData> d_;
};

void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace asap
