#include "yolco/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace yolco {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::int64_t rank, const char* op) {
  require(t.defined(), std::string(op) + ": undefined tensor");
  require(t.rank() == rank, std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got shape " +
                                shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* op) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined tensor");
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

// Unfolds [C, H, W] into [C*k*k, OH*OW] with zero padding.
template <typename T>
void im2col(const T* in, std::int64_t C, std::int64_t H, std::int64_t W, int k,
            int stride, int pad, std::int64_t OH, std::int64_t OW, T* col) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * OH * OW;
        for (std::int64_t oy = 0; oy < OH; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          T* dst = row + oy * OW;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + OW, T(0));
            continue;
          }
          const T* src = in + (c * H + iy) * W;
          for (std::int64_t ox = 0; ox < OW; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::int64_t C, std::int64_t H, std::int64_t W, int k,
            int stride, int pad, std::int64_t OH, std::int64_t OW, T* out) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * OH * OW;
        for (std::int64_t oy = 0; oy < OH; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = out + (c * H + iy) * W;
          const T* src = row + oy * OW;
          for (std::int64_t ox = 0; ox < OW; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Valid output column range [lo, hi) for a tap offset so that
// 0 <= ox * stride + offset < W.
inline void tap_range(std::int64_t offset, int stride, std::int64_t W,
                      std::int64_t OW, std::int64_t& lo, std::int64_t& hi) {
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  hi = (W - offset + stride - 1) / stride;
  hi = std::clamp<std::int64_t>(hi, 0, OW);
  lo = std::min(lo, hi);
}

template <typename T>
std::vector<T> unary_map(std::span<const T> x, auto fn) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return out;
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  for (auto e : shape) require(e >= 0, "negative extent in " + shape_str(shape));
  require(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
          "element count " + std::to_string(data.size()) +
              " does not match shape " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uniform(Shape shape, T lo, T hi, Rng& rng,
                                       bool requires_grad) {
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(yolco::uniform(rng, lo, hi));
  return BasicTensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
std::int64_t BasicTensor<T>::dim(std::int64_t axis) const {
  if (axis < 0) axis += rank();
  require(axis >= 0 && axis < rank(), "axis out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T BasicTensor<T>::item() const {
  require(numel() == 1, "item() on non-scalar " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <typename T>
void BasicTensor<T>::backward() const {
  require(defined() && numel() == 1,
          "backward() requires a scalar loss, got " +
              (defined() ? shape_str(shape()) : std::string("undefined")));
  if (!impl_->requires_grad) return;

  using Impl = detail::TensorImpl<T>;
  // Owning handles: releasing a node's tape entries below may drop the last
  // other reference to an ancestor that is still waiting its turn.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<std::shared_ptr<Impl>, std::size_t>> stack{{impl_, 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (impl_->grad.empty()) impl_->grad.assign(1, T(0));
  impl_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = it->get();
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(node->grad);
    }
    node->backward_fn = nullptr;
    node->parents.clear();
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(impl_->shape, impl_->data, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(impl_->shape, impl_->data, impl_->requires_grad);
}

template <typename T>
BasicTensor<T> make_op(Shape shape, std::vector<T> data,
                       const std::vector<BasicTensor<T>>& parents,
                       std::function<void(const std::vector<T>&)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  for (const auto& p : parents) {
    if (p.requires_grad()) impl.parents.push_back(p.impl());
  }
  impl.backward_fn = std::move(backward);
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int pad) {
  require_rank(input, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const auto C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const auto O = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  require(weight.dim(1) == C, "conv2d: weight expects " +
                                  std::to_string(weight.dim(1)) +
                                  " input channels, input has " + std::to_string(C));
  require(weight.dim(3) == k, "conv2d: kernel must be square");
  require(k % 2 == 1, "conv2d: kernel must be odd");
  require(stride >= 1 && pad >= 0, "conv2d: invalid stride or padding");
  if (bias.defined()) require(bias.numel() == O, "conv2d: bias size mismatch");
  const std::int64_t OH = (H + 2 * pad - k) / stride + 1;
  const std::int64_t OW = (W + 2 * pad - k) / stride + 1;
  require(OH > 0 && OW > 0, "conv2d: input smaller than kernel");
  const std::int64_t CKK = C * k * k, P = OH * OW;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  std::vector<T> col;
  if (!direct) {
    col.resize(static_cast<std::size_t>(CKK * P));
    im2col(input.data().data(), C, H, W, k, stride, pad, OH, OW, col.data());
  }
  const T* col_ptr = direct ? input.data().data() : col.data();

  std::vector<T> out(static_cast<std::size_t>(O * P));
  MapR<T> out_m(out.data(), O, P);
  out_m.noalias() = CMapR<T>(weight.data().data(), O, CKK) * CMapR<T>(col_ptr, CKK, P);
  if (bias.defined()) {
    for (std::int64_t o = 0; o < O; ++o) out_m.row(o).array() += bias.data()[o];
  }

  std::vector<BasicTensor<T>> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op<T>(
      {O, OH, OW}, std::move(out), parents,
      [input, weight, bias, C, H, W, O, k, stride, pad, OH, OW, CKK, P,
       direct](const std::vector<T>& g) mutable {
        CMapR<T> g_m(g.data(), O, P);
        std::vector<T> col;
        const T* col_ptr = input.data().data();
        if (!direct && weight.requires_grad()) {
          col.resize(static_cast<std::size_t>(CKK * P));
          im2col(input.data().data(), C, H, W, k, stride, pad, OH, OW, col.data());
          col_ptr = col.data();
        }
        if (weight.requires_grad()) {
          MapR<T>(weight.mutable_grad().data(), O, CKK).noalias() +=
              g_m * CMapR<T>(col_ptr, CKK, P).transpose();
        }
        if (bias.defined() && bias.requires_grad()) {
          // Plain loops: Eigen reductions peel by pointer alignment, which
          // would make the summation order vary between runs.
          auto gb = bias.mutable_grad();
          for (std::int64_t o = 0; o < O; ++o) {
            T acc = 0;
            for (std::int64_t p = 0; p < P; ++p) acc += g_m(o, p);
            gb[o] += acc;
          }
        }
        if (input.requires_grad()) {
          if (direct) {
            MapR<T>(input.mutable_grad().data(), C, P).noalias() +=
                CMapR<T>(weight.data().data(), O, CKK).transpose() * g_m;
          } else {
            std::vector<T> dcol(static_cast<std::size_t>(CKK * P));
            MapR<T>(dcol.data(), CKK, P).noalias() =
                CMapR<T>(weight.data().data(), O, CKK).transpose() * g_m;
            col2im(dcol.data(), C, H, W, k, stride, pad, OH, OW,
                   input.mutable_grad().data());
          }
        }
      });
}

template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input,
                                const BasicTensor<T>& weight, int stride,
                                int pad) {
  require_rank(input, 3, "depthwise_conv2d");
  require_rank(weight, 4, "depthwise_conv2d");
  const auto C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int k = static_cast<int>(weight.dim(2));
  require(weight.dim(0) == C && weight.dim(1) == 1,
          "depthwise_conv2d: weight " + shape_str(weight.shape()) +
              " does not match " + std::to_string(C) + " channels");
  require(weight.dim(3) == k && k % 2 == 1, "depthwise_conv2d: kernel must be odd and square");
  require(stride >= 1 && pad >= 0, "depthwise_conv2d: invalid stride or padding");
  const std::int64_t OH = (H + 2 * pad - k) / stride + 1;
  const std::int64_t OW = (W + 2 * pad - k) / stride + 1;
  require(OH > 0 && OW > 0, "depthwise_conv2d: input smaller than kernel");

  std::vector<T> out(static_cast<std::size_t>(C * OH * OW), T(0));
  const T* in = input.data().data();
  const T* wt = weight.data().data();
  for (std::int64_t c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T w = wt[(c * k + ky) * k + kx];
        std::int64_t lo, hi;
        tap_range(kx - pad, stride, W, OW, lo, hi);
        for (std::int64_t oy = 0; oy < OH; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = in + (c * H + iy) * W + (kx - pad);
          T* dst = out.data() + (c * OH + oy) * OW;
          if (stride == 1) {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] += w * src[ox];
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] += w * src[ox * stride];
          }
        }
      }
    }
  }

  return make_op<T>(
      {C, OH, OW}, std::move(out), {input, weight},
      [input, weight, C, H, W, k, stride, pad, OH, OW](const std::vector<T>& g) mutable {
        const T* in = input.data().data();
        const T* wt = weight.data().data();
        T* gin = input.requires_grad() ? input.mutable_grad().data() : nullptr;
        T* gw = weight.requires_grad() ? weight.mutable_grad().data() : nullptr;
        for (std::int64_t c = 0; c < C; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const auto widx = (c * k + ky) * k + kx;
              const T w = wt[widx];
              std::int64_t lo, hi;
              tap_range(kx - pad, stride, W, OW, lo, hi);
              T acc = 0;
              for (std::int64_t oy = 0; oy < OH; ++oy) {
                const std::int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                const auto base = (c * H + iy) * W + (kx - pad);
                const T* grow = g.data() + (c * OH + oy) * OW;
                for (std::int64_t ox = lo; ox < hi; ++ox) {
                  const auto idx = base + ox * stride;
                  if (gw) acc += grow[ox] * in[idx];
                  if (gin) gin[idx] += w * grow[ox];
                }
              }
              if (gw) gw[widx] += acc;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> pointwise_conv2d(const BasicTensor<T>& input,
                                const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias) {
  require_rank(weight, 4, "pointwise_conv2d");
  require(weight.dim(2) == 1 && weight.dim(3) == 1, "pointwise_conv2d: kernel must be 1x1");
  return conv2d(input, weight, bias, 1, 0);
}

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, int kernel, int stride) {
  require_rank(input, 3, "maxpool2d");
  const auto C = input.dim(0), H = input.dim(1), W = input.dim(2);
  require(kernel >= 1 && stride >= 1, "maxpool2d: invalid kernel or stride");
  require(H >= kernel && W >= kernel && (H - kernel) % stride == 0 &&
              (W - kernel) % stride == 0,
          "maxpool2d: extents " + shape_str(input.shape()) +
              " not divisible by the pooling stride");
  const std::int64_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(C * OH * OW));
  std::vector<std::int64_t> argmax(out.size());
  const T* in = input.data().data();
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t oy = 0; oy < OH; ++oy) {
      for (std::int64_t ox = 0; ox < OW; ++ox) {
        std::int64_t best = (c * H + oy * stride) * W + ox * stride;
        for (int dy = 0; dy < kernel; ++dy) {
          for (int dx = 0; dx < kernel; ++dx) {
            const auto idx = (c * H + oy * stride + dy) * W + ox * stride + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const auto o = (c * OH + oy) * OW + ox;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  return make_op<T>({C, OH, OW}, std::move(out), {input},
                    [input, argmax = std::move(argmax)](const std::vector<T>& g) mutable {
                      auto gin = input.mutable_grad();
                      for (std::size_t i = 0; i < g.size(); ++i) gin[argmax[i]] += g[i];
                    });
}

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& input, int factor) {
  require_rank(input, 3, "upsample_nearest");
  require(factor >= 1, "upsample_nearest: factor must be positive");
  const auto C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::int64_t OH = H * factor, OW = W * factor;
  std::vector<T> out(static_cast<std::size_t>(C * OH * OW));
  const T* in = input.data().data();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < OH; ++y)
      for (std::int64_t x = 0; x < OW; ++x)
        out[(c * OH + y) * OW + x] = in[(c * H + y / factor) * W + x / factor];
  return make_op<T>({C, OH, OW}, std::move(out), {input},
                    [input, C, H, W, OH, OW, factor](const std::vector<T>& g) mutable {
                      auto gin = input.mutable_grad();
                      for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t y = 0; y < OH; ++y)
                          for (std::int64_t x = 0; x < OW; ++x)
                            gin[(c * H + y / factor) * W + x / factor] +=
                                g[(c * OH + y) * OW + x];
                    });
}

template <typename T>
BasicTensor<T> concat0(const std::vector<BasicTensor<T>>& parts) {
  require(!parts.empty(), "concat0: nothing to concatenate");
  Shape shape = parts.front().shape();
  require(!shape.empty(), "concat0: scalars cannot be concatenated");
  std::int64_t lead = 0;
  for (const auto& p : parts) {
    require(p.rank() == static_cast<std::int64_t>(shape.size()) &&
                std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
            "concat0: trailing extents differ: " + shape_str(shape) + " vs " +
                shape_str(p.shape()));
    lead += p.dim(0);
  }
  shape[0] = lead;
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op<T>(std::move(shape), std::move(out), parts,
                    [parts](const std::vector<T>& g) mutable {
                      std::size_t offset = 0;
                      for (auto& p : parts) {
                        const auto n = static_cast<std::size_t>(p.numel());
                        if (p.requires_grad()) {
                          auto gp = p.mutable_grad();
                          for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
                        }
                        offset += n;
                      }
                    });
}

template <typename T>
BasicTensor<T> slice0(const BasicTensor<T>& input, std::int64_t start,
                      std::int64_t count) {
  require(input.defined() && input.rank() >= 1, "slice0: needs rank >= 1");
  require(start >= 0 && count >= 0 && start + count <= input.dim(0),
          "slice0: range out of bounds for " + shape_str(input.shape()));
  Shape shape = input.shape();
  shape[0] = count;
  const std::int64_t stride = input.dim(0) == 0 ? 0 : input.numel() / input.dim(0);
  const auto begin = input.data().begin() + start * stride;
  std::vector<T> out(begin, begin + count * stride);
  return make_op<T>(std::move(shape), std::move(out), {input},
                    [input, start, stride](const std::vector<T>& g) mutable {
                      auto gin = input.mutable_grad();
                      const auto off = static_cast<std::size_t>(start * stride);
                      for (std::size_t i = 0; i < g.size(); ++i) gin[off + i] += g[i];
                    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [a, b](const std::vector<T>& g) mutable {
                      for (auto* t : {&a, &b}) {
                        if (!t->requires_grad()) continue;
                        auto gt = t->mutable_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
                      }
                    });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [a, b](const std::vector<T>& g) mutable {
                      if (a.requires_grad()) {
                        auto ga = a.mutable_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      }
                      if (b.requires_grad()) {
                        auto gb = b.mutable_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                      }
                    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [a, b](const std::vector<T>& g) mutable {
                      if (a.requires_grad()) {
                        auto ga = a.mutable_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
                      }
                      if (b.requires_grad()) {
                        auto gb = b.mutable_grad();
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
                      }
                    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  auto out = unary_map<T>(a.data(), [factor](T v) { return v * factor; });
  return make_op<T>(a.shape(), std::move(out), {a},
                    [a, factor](const std::vector<T>& g) mutable {
                      auto ga = a.mutable_grad();
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                    });
}

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, T slope) {
  auto out = unary_map<T>(x.data(), [slope](T v) { return v > T(0) ? v : slope * v; });
  return make_op<T>(x.shape(), std::move(out), {x},
                    [x, slope](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      const auto xs = x.data();
                      for (std::size_t i = 0; i < g.size(); ++i)
                        gx[i] += xs[i] > T(0) ? g[i] : slope * g[i];
                    });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  auto out = unary_map<T>(x.data(), [](T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  });
  auto y = std::make_shared<std::vector<T>>(out);
  return make_op<T>(x.shape(), std::move(out), {x},
                    [x, y](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      for (std::size_t i = 0; i < g.size(); ++i)
                        gx[i] += g[i] * (*y)[i] * (T(1) - (*y)[i]);
                    });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  auto out = unary_map<T>(x.data(), [](T v) { return std::tanh(v); });
  auto y = std::make_shared<std::vector<T>>(out);
  return make_op<T>(x.shape(), std::move(out), {x},
                    [x, y](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      for (std::size_t i = 0; i < g.size(); ++i)
                        gx[i] += g[i] * (T(1) - (*y)[i] * (*y)[i]);
                    });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  auto out = unary_map<T>(x.data(), [](T v) {
    return T(0.5) * v * (T(1) + std::erf(v * kInvSqrt2));
  });
  return make_op<T>(x.shape(), std::move(out), {x},
                    [x](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      const auto xs = x.data();
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const T v = xs[i];
                        const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
                        const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
                        gx[i] += g[i] * (cdf + v * pdf);
                      }
                    });
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, T rate, bool training, Rng& rng) {
  require(rate >= T(0) && rate < T(1), "dropout: rate must lie in [0, 1)");
  if (!training || rate == T(0)) return x;
  const T keep_scale = T(1) / (T(1) - rate);
  auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  for (auto& m : *mask) m = uniform01(rng) < static_cast<double>(rate) ? T(0) : keep_scale;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  return make_op<T>(x.shape(), std::move(out), {x},
                    [x, mask](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
                    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_op<T>({}, {total}, {x}, [x](const std::vector<T>& g) mutable {
    auto gx = x.mutable_grad();
    for (auto& v : gx) v += g[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op<T>(std::move(shape), std::move(out), {x},
                    [x](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    });
}

// ---------------------------------------------------------------------------
// Matrix ops

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
  require(b.dim(0) == K, "matmul: inner extents differ: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(M * N));
  MapR<T>(out.data(), M, N).noalias() =
      CMapR<T>(a.data().data(), M, K) * CMapR<T>(b.data().data(), K, N);
  return make_op<T>({M, N}, std::move(out), {a, b},
                    [a, b, M, K, N](const std::vector<T>& g) mutable {
                      CMapR<T> g_m(g.data(), M, N);
                      if (a.requires_grad())
                        MapR<T>(a.mutable_grad().data(), M, K).noalias() +=
                            g_m * CMapR<T>(b.data().data(), K, N).transpose();
                      if (b.requires_grad())
                        MapR<T>(b.mutable_grad().data(), K, N).noalias() +=
                            CMapR<T>(a.data().data(), M, K).transpose() * g_m;
                    });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_rank(a, 2, "transpose");
  const auto R = a.dim(0), C = a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(R * C));
  MapR<T>(out.data(), C, R) = CMapR<T>(a.data().data(), R, C).transpose();
  return make_op<T>({C, R}, std::move(out), {a},
                    [a, R, C](const std::vector<T>& g) mutable {
                      MapR<T>(a.mutable_grad().data(), R, C) +=
                          CMapR<T>(g.data(), C, R).transpose();
                    });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank(weight, 2, "linear");
  require(x.defined() && (x.rank() == 1 || x.rank() == 2), "linear: x must be [in] or [N, in]");
  const bool vector_in = x.rank() == 1;
  const auto N = vector_in ? 1 : x.dim(0);
  const auto In = x.dim(-1), Out = weight.dim(0);
  require(weight.dim(1) == In, "linear: weight " + shape_str(weight.shape()) +
                                   " incompatible with input " + shape_str(x.shape()));
  if (bias.defined()) require(bias.numel() == Out, "linear: bias size mismatch");
  std::vector<T> out(static_cast<std::size_t>(N * Out));
  MapR<T> out_m(out.data(), N, Out);
  out_m.noalias() = CMapR<T>(x.data().data(), N, In) *
                    CMapR<T>(weight.data().data(), Out, In).transpose();
  if (bias.defined()) out_m.rowwise() += CVecMap<T>(bias.data().data(), Out).transpose();
  Shape shape = vector_in ? Shape{Out} : Shape{N, Out};
  std::vector<BasicTensor<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op<T>(std::move(shape), std::move(out), parents,
                    [x, weight, bias, N, In, Out](const std::vector<T>& g) mutable {
                      CMapR<T> g_m(g.data(), N, Out);
                      if (x.requires_grad())
                        MapR<T>(x.mutable_grad().data(), N, In).noalias() +=
                            g_m * CMapR<T>(weight.data().data(), Out, In);
                      if (weight.requires_grad())
                        MapR<T>(weight.mutable_grad().data(), Out, In).noalias() +=
                            g_m.transpose() * CMapR<T>(x.data().data(), N, In);
                      if (bias.defined() && bias.requires_grad()) {
                        auto gb = bias.mutable_grad();
                        for (std::int64_t n = 0; n < N; ++n)
                          for (std::int64_t o = 0; o < Out; ++o) gb[o] += g_m(n, o);
                      }
                    });
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::int64_t start,
                          std::int64_t count) {
  require_rank(x, 2, "slice_cols");
  const auto R = x.dim(0), C = x.dim(1);
  require(start >= 0 && count >= 0 && start + count <= C, "slice_cols: range out of bounds");
  std::vector<T> out(static_cast<std::size_t>(R * count));
  MapR<T>(out.data(), R, count) = CMapR<T>(x.data().data(), R, C).middleCols(start, count);
  return make_op<T>({R, count}, std::move(out), {x},
                    [x, R, C, start, count](const std::vector<T>& g) mutable {
                      MapR<T>(x.mutable_grad().data(), R, C).middleCols(start, count) +=
                          CMapR<T>(g.data(), R, count);
                    });
}

template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const auto R = parts.front().dim(0);
  std::int64_t C = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    require(p.dim(0) == R, "concat_cols: row counts differ");
    C += p.dim(1);
  }
  std::vector<T> out(static_cast<std::size_t>(R * C));
  MapR<T> out_m(out.data(), R, C);
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    out_m.middleCols(offset, p.dim(1)) = CMapR<T>(p.data().data(), R, p.dim(1));
    offset += p.dim(1);
  }
  return make_op<T>({R, C}, std::move(out), parts,
                    [parts, R, C](const std::vector<T>& g) mutable {
                      CMapR<T> g_m(g.data(), R, C);
                      std::int64_t offset = 0;
                      for (auto& p : parts) {
                        const auto w = p.dim(1);
                        if (p.requires_grad())
                          MapR<T>(p.mutable_grad().data(), R, w) += g_m.middleCols(offset, w);
                        offset += w;
                      }
                    });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::int64_t axis) {
  require(x.defined() && x.rank() >= 1, "softmax: needs rank >= 1");
  if (axis < 0) axis += x.rank();
  require(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto n = x.dim(axis);
  auto y = std::make_shared<std::vector<T>>(x.data().begin(), x.data().end());
  auto& yv = *y;
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const auto base = o * n * inner + i;
      T mx = yv[base];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, yv[base + j * inner]);
      T total = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        auto& v = yv[base + j * inner];
        v = std::exp(v - mx);
        total += v;
      }
      for (std::int64_t j = 0; j < n; ++j) yv[base + j * inner] /= total;
    }
  }
  std::vector<T> out = yv;
  return make_op<T>(x.shape(), std::move(out), {x},
                    [x, y, outer, inner, n](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      const auto& yv = *y;
                      for (std::int64_t o = 0; o < outer; ++o) {
                        for (std::int64_t i = 0; i < inner; ++i) {
                          const auto base = o * n * inner + i;
                          T dot = 0;
                          for (std::int64_t j = 0; j < n; ++j)
                            dot += g[base + j * inner] * yv[base + j * inner];
                          for (std::int64_t j = 0; j < n; ++j) {
                            const auto idx = base + j * inner;
                            gx[idx] += yv[idx] * (g[idx] - dot);
                          }
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> masked_softmax_rows(const BasicTensor<T>& x,
                                   const std::vector<bool>& key_mask) {
  require_rank(x, 2, "masked_softmax_rows");
  const auto R = x.dim(0), C = x.dim(1);
  require(static_cast<std::int64_t>(key_mask.size()) == C, "masked_softmax_rows: mask size mismatch");
  require(std::find(key_mask.begin(), key_mask.end(), true) != key_mask.end(),
          "masked_softmax_rows: every key is masked");
  auto y = std::make_shared<std::vector<T>>(static_cast<std::size_t>(R * C), T(0));
  const auto xs = x.data();
  for (std::int64_t r = 0; r < R; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t c = 0; c < C; ++c)
      if (key_mask[c]) mx = std::max(mx, xs[r * C + c]);
    T total = 0;
    for (std::int64_t c = 0; c < C; ++c) {
      if (!key_mask[c]) continue;
      const T e = std::exp(xs[r * C + c] - mx);
      (*y)[r * C + c] = e;
      total += e;
    }
    for (std::int64_t c = 0; c < C; ++c) (*y)[r * C + c] /= total;
  }
  std::vector<T> out = *y;
  return make_op<T>(x.shape(), std::move(out), {x},
                    [x, y, R, C](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      const auto& yv = *y;
                      for (std::int64_t r = 0; r < R; ++r) {
                        T dot = 0;
                        for (std::int64_t c = 0; c < C; ++c) dot += g[r * C + c] * yv[r * C + c];
                        for (std::int64_t c = 0; c < C; ++c)
                          gx[r * C + c] += yv[r * C + c] * (g[r * C + c] - dot);
                      }
                    });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps) {
  require(x.defined() && x.rank() >= 1, "layer_norm: needs rank >= 1");
  require(eps > T(0), "layer_norm: eps must be positive");
  const auto D = x.dim(-1);
  const auto rows = x.numel() / D;
  require(gain.numel() == D && bias.numel() == D, "layer_norm: gain/bias size mismatch");
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const auto xs = x.data();
  const auto gs = gain.data();
  const auto bs = bias.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * D;
    T mu = 0;
    for (std::int64_t d = 0; d < D; ++d) mu += row[d];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::int64_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
    var /= static_cast<T>(D);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::int64_t d = 0; d < D; ++d) {
      const T h = (row[d] - mu) * rs;
      (*xhat)[r * D + d] = h;
      out[r * D + d] = gs[d] * h + bs[d];
    }
  }
  return make_op<T>(x.shape(), std::move(out), {x, gain, bias},
                    [x, gain, bias, xhat, rstd, rows, D](const std::vector<T>& g) mutable {
                      const auto gs = gain.data();
                      const auto& xh = *xhat;
                      if (gain.requires_grad()) {
                        auto gg = gain.mutable_grad();
                        for (std::int64_t r = 0; r < rows; ++r)
                          for (std::int64_t d = 0; d < D; ++d) gg[d] += g[r * D + d] * xh[r * D + d];
                      }
                      if (bias.requires_grad()) {
                        auto gb = bias.mutable_grad();
                        for (std::int64_t r = 0; r < rows; ++r)
                          for (std::int64_t d = 0; d < D; ++d) gb[d] += g[r * D + d];
                      }
                      if (x.requires_grad()) {
                        auto gx = x.mutable_grad();
                        for (std::int64_t r = 0; r < rows; ++r) {
                          T mean_d = 0, mean_dx = 0;
                          for (std::int64_t d = 0; d < D; ++d) {
                            const T dh = g[r * D + d] * gs[d];
                            mean_d += dh;
                            mean_dx += dh * xh[r * D + d];
                          }
                          mean_d /= static_cast<T>(D);
                          mean_dx /= static_cast<T>(D);
                          for (std::int64_t d = 0; d < D; ++d) {
                            const T dh = g[r * D + d] * gs[d];
                            gx[r * D + d] += (*rstd)[r] * (dh - mean_d - xh[r * D + d] * mean_dx);
                          }
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> masked_mean_rows(const BasicTensor<T>& x,
                                const std::vector<bool>& row_mask) {
  require_rank(x, 2, "masked_mean_rows");
  const auto N = x.dim(0), D = x.dim(1);
  require(static_cast<std::int64_t>(row_mask.size()) == N, "masked_mean_rows: mask size mismatch");
  const auto count = std::count(row_mask.begin(), row_mask.end(), true);
  require(count > 0, "masked_mean_rows: every row is masked");
  const T inv = T(1) / static_cast<T>(count);
  std::vector<T> out(static_cast<std::size_t>(D), T(0));
  for (std::int64_t r = 0; r < N; ++r) {
    if (!row_mask[r]) continue;
    for (std::int64_t d = 0; d < D; ++d) out[d] += x.data()[r * D + d] * inv;
  }
  return make_op<T>({D}, std::move(out), {x},
                    [x, row_mask, N, D, inv](const std::vector<T>& g) mutable {
                      auto gx = x.mutable_grad();
                      for (std::int64_t r = 0; r < N; ++r) {
                        if (!row_mask[r]) continue;
                        for (std::int64_t d = 0; d < D; ++d) gx[r * D + d] += g[d] * inv;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define YOLCO_INSTANTIATE(T)                                                                \
  template class BasicTensor<T>;                                                            \
  template BasicTensor<T> make_op<T>(Shape, std::vector<T>, const std::vector<BasicTensor<T>>&, \
                                     std::function<void(const std::vector<T>&)>);           \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                    const BasicTensor<T>&, int, int);                       \
  template BasicTensor<T> depthwise_conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, \
                                              int, int);                                    \
  template BasicTensor<T> pointwise_conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, \
                                              const BasicTensor<T>&);                       \
  template BasicTensor<T> maxpool2d<T>(const BasicTensor<T>&, int, int);                    \
  template BasicTensor<T> upsample_nearest<T>(const BasicTensor<T>&, int);                  \
  template BasicTensor<T> concat0<T>(const std::vector<BasicTensor<T>>&);                   \
  template BasicTensor<T> slice0<T>(const BasicTensor<T>&, std::int64_t, std::int64_t);     \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> sub<T>(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                               \
  template BasicTensor<T> leaky_relu<T>(const BasicTensor<T>&, T);                          \
  template BasicTensor<T> sigmoid<T>(const BasicTensor<T>&);                                \
  template BasicTensor<T> tanh<T>(const BasicTensor<T>&);                                   \
  template BasicTensor<T> gelu<T>(const BasicTensor<T>&);                                   \
  template BasicTensor<T> dropout<T>(const BasicTensor<T>&, T, bool, Rng&);                 \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                    \
  template BasicTensor<T> mean<T>(const BasicTensor<T>&);                                   \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                         \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> transpose<T>(const BasicTensor<T>&);                              \
  template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                    const BasicTensor<T>&);                                 \
  template BasicTensor<T> slice_cols<T>(const BasicTensor<T>&, std::int64_t, std::int64_t); \
  template BasicTensor<T> concat_cols<T>(const std::vector<BasicTensor<T>>&);               \
  template BasicTensor<T> softmax<T>(const BasicTensor<T>&, std::int64_t);                  \
  template BasicTensor<T> masked_softmax_rows<T>(const BasicTensor<T>&,                     \
                                                 const std::vector<bool>&);                 \
  template BasicTensor<T> layer_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                        const BasicTensor<T>&, T);                          \
  template BasicTensor<T> masked_mean_rows<T>(const BasicTensor<T>&, const std::vector<bool>&);

YOLCO_INSTANTIATE(float)
YOLCO_INSTANTIATE(double)

#undef YOLCO_INSTANTIATE

}  // namespace yolco
