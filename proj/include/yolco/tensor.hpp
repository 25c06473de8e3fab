#pragma once

// Dense row-major tensor with a dynamic reverse-mode gradient tape.
//
// A BasicTensor is a cheap handle onto shared storage (copying the handle
// does not copy elements). Operations never mutate their inputs; each op
// returns a fresh tensor and, when gradients are being recorded, links it to
// its parents through a backward closure. backward() on a scalar walks the
// recorded graph in reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "yolco/rng.hpp"

namespace yolco {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(const std::vector<T>&)> backward_fn;
};

}  // namespace detail

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);
  /// Elements drawn uniformly from [lo, hi).
  static BasicTensor uniform(Shape shape, T lo, T hi, Rng& rng,
                             bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct element access for parameter initialization and optimizer
  /// updates. Not recorded on the tape.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool flag);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<T> mutable_grad() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Intermediate graph state is
  /// released as it is consumed, so a graph supports one sweep.
  void backward() const;

  /// Same storage contents, cut from the tape.
  BasicTensor detach() const;
  BasicTensor clone() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Builds an op result. When recording is enabled and any parent requires a
/// gradient, the result joins the tape with `backward` as its local rule;
/// `backward` receives the result's gradient and accumulates into parents
/// through mutable_grad().
template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> data,
                       const std::vector<BasicTensor<T>>& parents,
                       std::function<void(const std::vector<T>&)> backward);

// ---------------------------------------------------------------------------
// Convolution family. Feature maps are [C, H, W].

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int pad);

/// One k x k filter per channel; weight is [C, 1, k, k].
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input,
                                const BasicTensor<T>& weight, int stride,
                                int pad);

/// conv2d with k = 1; weight is [C_out, C_in, 1, 1]. bias may be undefined.
template <typename T>
BasicTensor<T> pointwise_conv2d(const BasicTensor<T>& input,
                                const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, int kernel = 2,
                         int stride = 2);

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& input, int factor = 2);

/// Concatenates along the leading axis (channels for maps, rows for
/// matrices). Trailing extents must agree.
template <typename T>
BasicTensor<T> concat0(const std::vector<BasicTensor<T>>& parts);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return concat0<T>({a, b});
}

/// Contiguous slice [start, start + count) along the leading axis.
template <typename T>
BasicTensor<T> slice0(const BasicTensor<T>& input, std::int64_t start,
                      std::int64_t count);

// ---------------------------------------------------------------------------
// Elementwise.

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, T slope = T(0.1));
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x);
/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

/// Inverted dropout: retained units scaled by 1/(1 - rate) in training,
/// identity otherwise.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, T rate, bool training, Rng& rng);

// ---------------------------------------------------------------------------
// Reductions and reshaping.

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// ---------------------------------------------------------------------------
// Matrix ops. Matrices are [rows, cols].

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);
/// x: [N, in] (or [in]), weight: [out, in], bias: [out] or undefined.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);
/// Columns [start, start + count) of a matrix.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::int64_t start,
                          std::int64_t count);
template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts);

/// Softmax along `axis`.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::int64_t axis);

/// Row softmax of a matrix where column j is excluded when key_mask[j] is
/// false.
template <typename T>
BasicTensor<T> masked_softmax_rows(const BasicTensor<T>& x,
                                   const std::vector<bool>& key_mask);

/// Normalizes over the last axis, then applies gain and bias ([D] each).
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps = T(1e-5));

/// Mean over the rows of [N, D] whose mask entry is true, giving [D].
template <typename T>
BasicTensor<T> masked_mean_rows(const BasicTensor<T>& x,
                                const std::vector<bool>& row_mask);

}  // namespace yolco
