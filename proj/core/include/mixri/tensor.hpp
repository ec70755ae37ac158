#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mixri {

enum class Dtype : uint8_t { Float32 = 0, Float64 = 1 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::Float32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::Float32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

/// Flat value buffer. Only one of the two vectors is populated, per dtype.
class Storage {
 public:
  Storage() : dtype_(Dtype::Float32) {}
  Storage(Dtype dt, int64_t n) : dtype_(dt) { resize(n); }

  void resize(int64_t n) {
    if (dtype_ == Dtype::Float32)
      f32_.assign(static_cast<size_t>(n), 0.0f);
    else
      f64_.assign(static_cast<size_t>(n), 0.0);
  }

  Dtype dtype() const { return dtype_; }
  void set_dtype(Dtype dt) { dtype_ = dt; }
  int64_t size() const {
    return dtype_ == Dtype::Float32 ? static_cast<int64_t>(f32_.size())
                                    : static_cast<int64_t>(f64_.size());
  }

  template <typename T>
  T* data();
  template <typename T>
  const T* data() const;

  double at(int64_t i) const {
    return dtype_ == Dtype::Float32 ? static_cast<double>(f32_[i]) : f64_[i];
  }
  void set(int64_t i, double v) {
    if (dtype_ == Dtype::Float32)
      f32_[i] = static_cast<float>(v);
    else
      f64_[i] = v;
  }

 private:
  Dtype dtype_;
  std::vector<float> f32_;
  std::vector<double> f64_;
};

template <>
inline float* Storage::data<float>() { return f32_.data(); }
template <>
inline double* Storage::data<double>() { return f64_.data(); }
template <>
inline const float* Storage::data<float>() const { return f32_.data(); }
template <>
inline const double* Storage::data<double>() const { return f64_.data(); }

class Tensor;

/// One node of the reverse-mode tape. Saved inputs keep parent nodes alive;
/// backward_fn reads this node's grad and accumulates into the parents.
struct TensorImpl {
  Shape shape;
  std::shared_ptr<Storage> storage;
  bool requires_grad = false;
  std::shared_ptr<Storage> grad;  // allocated on demand, same shape
  std::string op_name;            // empty for leaves
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void()> backward_fn;

  int64_t numel() const { return shape_numel(shape); }
  void ensure_grad();
};

/// Value-semantic handle to a tape node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, Dtype dt = Dtype::Float32, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, Dtype dt = Dtype::Float32);
  static Tensor from_values(const Shape& shape, const std::vector<double>& values,
                            Dtype dt = Dtype::Float64, bool requires_grad = false);
  static Tensor scalar(double value, Dtype dt = Dtype::Float64);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(int i) const;
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return impl_->numel(); }
  Dtype dtype() const { return impl_->storage->dtype(); }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  template <typename T>
  T* data() { return impl_->storage->data<T>(); }
  template <typename T>
  const T* data() const { return impl_->storage->data<T>(); }

  double value_at(int64_t i) const { return impl_->storage->at(i); }
  void set_value(int64_t i, double v) { impl_->storage->set(i, v); }
  double scalar_value() const;

  bool has_grad() const { return impl_->grad != nullptr; }
  double grad_at(int64_t i) const { return impl_->grad->at(i); }
  Tensor grad() const;  // grad as a fresh constant tensor
  void zero_grad();

  Tensor detach() const;             // same storage, no history
  Tensor clone() const;              // deep copy, no history
  Tensor to(Dtype dt) const;         // dtype conversion (constant, no history)

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  TensorImpl* raw() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-topological view of the tape reachable from a root. Backward
/// visits each node exactly once, in reverse construction order.
class Graph {
 public:
  struct NodeRecord {
    TensorImpl* node;
    std::string op_name;
    int topo_index;
  };

  static Graph from(const Tensor& root);

  /// Seeds root grad with ones and propagates. Root must be scalar unless
  /// seed is provided.
  void backward(const Tensor* seed = nullptr);

  const std::vector<NodeRecord>& nodes() const { return records_; }

 private:
  Tensor root_;
  std::vector<std::shared_ptr<TensorImpl>> topo_;  // parents before children
  std::vector<NodeRecord> records_;
};

/// Convenience: build the graph from `root` and run backward.
void backward(const Tensor& root);

}  // namespace mixri
