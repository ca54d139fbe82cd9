#pragma once

// Dense float64 tensors with a reverse-mode tape.
//
// Spatial ops accept [C,H,W] or a batched [N,C,H,W] layout; a rank-3 tensor is
// treated as a batch of one and the output keeps the input's rank.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "rae/error.hpp"

namespace rae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Threading
// ---------------------------------------------------------------------------

namespace detail {
inline int& thread_setting() {
  static int threads = 0;  // 0 = runtime default
  return threads;
}
}  // namespace detail

// Worker count for batch-parallel kernels. Results do not depend on it:
// per-sample partial gradients are always reduced in sample order.
inline void set_num_threads(int n) { detail::thread_setting() = std::max(0, n); }

// Deterministic mode pins every kernel to a single thread.
inline void set_deterministic(bool on) { set_num_threads(on ? 1 : 0); }

inline int num_threads() {
#ifdef _OPENMP
  int t = detail::thread_setting();
  return t > 0 ? t : omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
#ifdef _OPENMP
  const int threads = num_threads();
  if (threads > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(threads)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
      fn(static_cast<std::size_t>(i));
    }
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) fn(i);
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  std::span<double> grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

// Shared handle to a dense row-major float64 array. Copies of a Tensor alias the
// same storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) {
    validate_shape(shape);
    node_ = std::make_shared<detail::TensorNode>();
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  Tensor clone() const {
    Tensor t(shape(), node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  // Copies data into a tensor of a new shape with the same element count.
  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " +
                       shape_str(shape));
    }
    return Tensor(std::move(shape), node_->data);
  }

  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Ordered record of differentiable ops. backward() replays the record in
// reverse. Intermediate gradients are reset at the start of every replay while
// leaf gradients (parameters, inputs) accumulate, so two replays without
// clearing leaf grads double them.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  std::size_t size() const { return entries_.size(); }

  void record(const Tensor& output, std::function<void()> backward) {
    entries_.push_back({output.node(), std::move(backward)});
  }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    for (auto& e : entries_) e.output->grad.assign(e.output->data.size(), 0.0);
    loss.node()->grad.assign(1, 0.0);
    loss.node()->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<detail::TensorNode> output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

namespace detail {

inline bool should_record(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr || !tape->enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

// Batch view of a rank-3/4 tensor.
struct Nchw {
  std::size_t n, c, h, w;
  std::size_t plane() const { return h * w; }
  std::size_t sample() const { return c * h * w; }
};

inline Nchw nchw(const Tensor& t, const char* op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                   shape_str(t.shape()));
}

inline Shape make_shape(const Tensor& like, std::size_t n, std::size_t c, std::size_t h,
                        std::size_t w) {
  if (like.rank() == 3) return {c, h, w};
  return {n, c, h, w};
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

// dst[c, y, x] = src[c, y+oy, x+ox], zero outside the source.
inline void shift_planes(const double* src, double* dst, std::size_t channels, std::size_t h,
                         std::size_t w, int oy, int ox) {
  const auto H = static_cast<int>(h), W = static_cast<int>(w);
  const int x_lo = std::max(0, -ox), x_hi = std::min(W, W - ox);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* s = src + c * h * w;
    double* d = dst + c * h * w;
    for (int y = 0; y < H; ++y) {
      double* drow = d + y * W;
      const int sy = y + oy;
      if (sy < 0 || sy >= H || x_lo >= x_hi) {
        std::fill(drow, drow + W, 0.0);
        continue;
      }
      std::fill(drow, drow + x_lo, 0.0);
      std::copy(s + sy * W + x_lo + ox, s + sy * W + x_hi + ox, drow + x_lo);
      std::fill(drow + x_hi, drow + W, 0.0);
    }
  }
}

// dst[c, y, x] += src[c, y+oy, x+ox] where the source is in range.
inline void shift_add(const double* src, double* dst, std::size_t channels, std::size_t h,
                      std::size_t w, int oy, int ox) {
  const auto H = static_cast<int>(h), W = static_cast<int>(w);
  const int x_lo = std::max(0, -ox), x_hi = std::min(W, W - ox);
  if (x_lo >= x_hi) return;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* s = src + c * h * w;
    double* d = dst + c * h * w;
    for (int y = 0; y < H; ++y) {
      const int sy = y + oy;
      if (sy < 0 || sy >= H) continue;
      const double* srow = s + sy * W + ox;
      double* drow = d + y * W;
      for (int x = x_lo; x < x_hi; ++x) drow[x] += srow[x];
    }
  }
}

// Same-padded stride-1 convolution with an odd square kernel.
inline Tensor conv_same(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        std::size_t ksize, Tape* tape, const char* op) {
  const auto in = nchw(input, op);
  if (kernel.rank() != 4 || kernel.dim(2) != ksize || kernel.dim(3) != ksize) {
    throw ConfigError(std::string(op) + ": kernel must be [C_out,C_in," + std::to_string(ksize) +
                      "," + std::to_string(ksize) + "], got " + shape_str(kernel.shape()));
  }
  const std::size_t cout = kernel.dim(0), cin = kernel.dim(1);
  if (cin != in.c) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(in.c) +
                     " channels but kernel expects " + std::to_string(cin));
  }
  if (bias.numel() != cout) {
    throw ShapeError(std::string(op) + ": bias has " + std::to_string(bias.numel()) +
                     " entries, expected " + std::to_string(cout));
  }

  const std::size_t taps = ksize * ksize;
  const int half = static_cast<int>(ksize / 2);
  const std::size_t hw = in.plane();
  auto tap_offset = [ksize, half](std::size_t t) {
    return std::pair{static_cast<int>(t / ksize) - half, static_cast<int>(t % ksize) - half};
  };

  // All taps stacked into one [taps*C_out, C_in] matrix, row t*C_out + o, so
  // each sample needs a single tall GEMM instead of one thin GEMM per tap.
  RowMat wall(taps * cout, cin);
  {
    const auto k = kernel.data();
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t t = 0; t < taps; ++t) wall(t * cout + o, c) = k[(o * cin + c) * taps + t];
  }

  Tensor out(make_shape(input, in.n, cout, in.h, in.w));
  {
    const double* x = input.data().data();
    double* y = out.mutable_data().data();
    const auto b = bias.data();
    parallel_for(in.n, [&](std::size_t n) {
      MapMat ymat(y + n * cout * hw, cout, hw);
      for (std::size_t o = 0; o < cout; ++o) ymat.row(o).setConstant(b[o]);
      MapConstMat xmat(x + n * in.sample(), cin, hw);
      if (ksize == 1) {
        ymat.noalias() += wall * xmat;
        return;
      }
      // y[o, p] += (W_t x)[o, p + d_t] for each tap offset d_t.
      const RowMat z = wall * xmat;
      for (std::size_t t = 0; t < taps; ++t) {
        const auto [oy, ox] = tap_offset(t);
        shift_add(z.data() + t * cout * hw, ymat.data(), cout, in.h, in.w, oy, ox);
      }
    });
  }

  if (!should_record(tape, {&input, &kernel, &bias})) return out;
  out.set_requires_grad(true);
  tape->record(out, [xn = input.node(), kn = kernel.node(), bn = bias.node(), yn = out.node(),
                     wall = std::move(wall), in, cout, cin, ksize, taps, hw, tap_offset]() {
    const double* x = xn->data.data();
    const double* gy = yn->grad.data();
    const bool want_x = xn->requires_grad, want_k = kn->requires_grad,
               want_b = bn->requires_grad;
    double* gx = want_x ? xn->grad_buffer().data() : nullptr;

    // Per-sample stacked kernel gradients, reduced in sample order afterwards.
    std::vector<RowMat> gk_parts(want_k ? in.n : 0);
    parallel_for(in.n, [&](std::size_t n) {
      MapConstMat xmat(x + n * in.sample(), cin, hw);
      const double* gys = gy + n * cout * hw;
      // Block t holds gy shifted by -d_t, the adjoint of the forward shift, so
      // gx = wall^T * stacked and gW_t = block_t * x^T.
      RowMat stacked;
      if (ksize == 1) {
        stacked = MapConstMat(gys, cout, hw);
      } else {
        stacked.resize(taps * cout, hw);
        for (std::size_t t = 0; t < taps; ++t) {
          const auto [oy, ox] = tap_offset(t);
          shift_planes(gys, stacked.data() + t * cout * hw, cout, in.h, in.w, -oy, -ox);
        }
      }
      if (want_k) gk_parts[n].noalias() = stacked * xmat.transpose();
      if (want_x) MapMat(gx + n * in.sample(), cin, hw).noalias() += wall.transpose() * stacked;
    });
    if (want_k) {
      auto gk = kn->grad_buffer();
      for (const auto& part : gk_parts)
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t t = 0; t < taps; ++t) gk[(o * cin + c) * taps + t] += part(t * cout + o, c);
    }
    if (want_b) {
      auto gb = bn->grad_buffer();
      for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t o = 0; o < cout; ++o) {
          const double* row = gy + (n * cout + o) * hw;
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += row[i];
          gb[o] += s;
        }
    }
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

// 3x3 convolution, stride 1, zero padding 1.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     Tape* tape = nullptr) {
  return detail::conv_same(input, kernel, bias, 3, tape, "conv2d");
}

// Per-pixel channel mixing.
inline Tensor conv2d_1x1(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                         Tape* tape = nullptr) {
  return detail::conv_same(input, kernel, bias, 1, tape, "conv2d_1x1");
}

// 2x2 max pool over disjoint windows. Ties route the gradient to the first
// element in row-major window order.
inline Tensor maxpool2x2(const Tensor& input, Tape* tape = nullptr) {
  const auto in = detail::nchw(input, "maxpool2x2");
  if (in.h % 2 != 0 || in.w % 2 != 0) {
    throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_str(input.shape()));
  }
  const std::size_t oh = in.h / 2, ow = in.w / 2;
  Tensor out(detail::make_shape(input, in.n, in.c, oh, ow));
  std::vector<std::size_t> argmax(out.numel());
  const double* x = input.data().data();
  double* y = out.mutable_data().data();
  for (std::size_t p = 0; p < in.n * in.c; ++p) {
    const double* plane = x + p * in.plane();
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t base = (2 * oy) * in.w + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + in.w, base + in.w + 1};
        std::size_t best = cand[0];
        for (int i = 1; i < 4; ++i)
          if (plane[cand[i]] > plane[best]) best = cand[i];
        const std::size_t o = p * oh * ow + oy * ow + ox;
        y[o] = plane[best];
        argmax[o] = p * in.plane() + best;
      }
  }
  if (!detail::should_record(tape, {&input})) return out;
  out.set_requires_grad(true);
  tape->record(out, [xn = input.node(), yn = out.node(), argmax = std::move(argmax)]() {
    auto gx = xn->grad_buffer();
    const auto& gy = yn->grad;
    for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
  });
  return out;
}

// Nearest-neighbour 2x upsampling.
inline Tensor upsample2x2(const Tensor& input, Tape* tape = nullptr) {
  const auto in = detail::nchw(input, "upsample2x2");
  const std::size_t oh = in.h * 2, ow = in.w * 2;
  Tensor out(detail::make_shape(input, in.n, in.c, oh, ow));
  const double* x = input.data().data();
  double* y = out.mutable_data().data();
  for (std::size_t p = 0; p < in.n * in.c; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        y[p * oh * ow + oy * ow + ox] = x[p * in.plane() + (oy / 2) * in.w + ox / 2];
  if (!detail::should_record(tape, {&input})) return out;
  out.set_requires_grad(true);
  tape->record(out, [xn = input.node(), yn = out.node(), in, oh, ow]() {
    auto gx = xn->grad_buffer();
    const auto& gy = yn->grad;
    for (std::size_t p = 0; p < in.n * in.c; ++p)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          gx[p * in.plane() + (oy / 2) * in.w + ox / 2] += gy[p * oh * ow + oy * ow + ox];
  });
  return out;
}

// max(x, slope*x); the slope branch is taken for x <= 0.
inline Tensor leaky_relu(const Tensor& input, double slope, Tape* tape = nullptr) {
  if (!(slope >= 0.0 && slope < 1.0)) {
    throw ConfigError("leaky_relu: slope must lie in [0,1), got " + std::to_string(slope));
  }
  Tensor out(input.shape());
  const auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  if (!detail::should_record(tape, {&input})) return out;
  out.set_requires_grad(true);
  tape->record(out, [xn = input.node(), yn = out.node(), slope]() {
    auto gx = xn->grad_buffer();
    const auto& x = xn->data;
    const auto& gy = yn->grad;
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += x[i] > 0.0 ? gy[i] : slope * gy[i];
  });
  return out;
}

// Channel-wise concatenation of any number of tensors with equal N, H, W.
inline Tensor concat_channels(const std::vector<Tensor>& parts, Tape* tape = nullptr) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto first = detail::nchw(parts[0], "concat_channels");
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto s = detail::nchw(p, "concat_channels");
    if (s.n != first.n || s.h != first.h || s.w != first.w || p.rank() != parts[0].rank()) {
      throw ShapeError("concat_channels: mismatched shapes " + shape_str(parts[0].shape()) +
                       " and " + shape_str(p.shape()));
    }
    channels.push_back(s.c);
    total += s.c;
  }
  const std::size_t plane = first.plane();
  Tensor out(detail::make_shape(parts[0], first.n, total, first.h, first.w));
  double* y = out.mutable_data().data();
  for (std::size_t n = 0; n < first.n; ++n) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const double* src = parts[i].data().data() + n * channels[i] * plane;
      std::copy(src, src + channels[i] * plane, y + (n * total + offset) * plane);
      offset += channels[i];
    }
  }
  bool record = tape != nullptr && tape->enabled() &&
                std::any_of(parts.begin(), parts.end(),
                            [](const Tensor& t) { return t.requires_grad(); });
  if (!record) return out;
  out.set_requires_grad(true);
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  tape->record(out, [nodes = std::move(nodes), yn = out.node(), channels, total, plane,
                     batch = first.n]() {
    const auto& gy = yn->grad;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) {
        auto gx = nodes[i]->grad_buffer();
        for (std::size_t n = 0; n < batch; ++n) {
          const double* src = gy.data() + (n * total + offset) * plane;
          double* dst = gx.data() + n * channels[i] * plane;
          for (std::size_t j = 0; j < channels[i] * plane; ++j) dst[j] += src[j];
        }
      }
      offset += channels[i];
    }
  });
  return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  return concat_channels(std::vector<Tensor>{a, b}, tape);
}

// a + beta*b.
inline Tensor add_scaled(const Tensor& a, const Tensor& b, double beta, Tape* tape = nullptr) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add_scaled: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out(a.shape());
  const auto x = a.data(), z = b.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + beta * z[i];
  if (!detail::should_record(tape, {&a, &b})) return out;
  out.set_requires_grad(true);
  tape->record(out, [an = a.node(), bn = b.node(), yn = out.node(), beta]() {
    const auto& gy = yn->grad;
    if (an->requires_grad) {
      auto ga = an->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (bn->requires_grad) {
      auto gb = bn->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += beta * gy[i];
    }
  });
  return out;
}

// Mean of squared differences; differentiable in pred only.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target, Tape* tape = nullptr) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  const auto p = pred.data(), t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(p.size()));
  if (!detail::should_record(tape, {&pred})) return out;
  out.set_requires_grad(true);
  tape->record(out, [pn = pred.node(), tn = target.node(), yn = out.node()]() {
    auto gp = pn->grad_buffer();
    const double scale = 2.0 * yn->grad[0] / static_cast<double>(gp.size());
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += scale * (pn->data[i] - tn->data[i]);
  });
  return out;
}

inline Tensor sum(const Tensor& input, Tape* tape = nullptr) {
  const auto x = input.data();
  Tensor out = Tensor::scalar(std::accumulate(x.begin(), x.end(), 0.0));
  if (!detail::should_record(tape, {&input})) return out;
  out.set_requires_grad(true);
  tape->record(out, [xn = input.node(), yn = out.node()]() {
    auto gx = xn->grad_buffer();
    for (auto& g : gx) g += yn->grad[0];
  });
  return out;
}

// Σ input·weights with constant weights. Gives gradient checks a loss whose
// partials are not all equal.
inline Tensor weighted_sum(const Tensor& input, const Tensor& weights, Tape* tape = nullptr) {
  if (input.shape() != weights.shape()) {
    throw ShapeError("weighted_sum: shape mismatch " + shape_str(input.shape()) + " vs " +
                     shape_str(weights.shape()));
  }
  const auto x = input.data(), w = weights.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * w[i];
  Tensor out = Tensor::scalar(acc);
  if (!detail::should_record(tape, {&input})) return out;
  out.set_requires_grad(true);
  tape->record(out, [xn = input.node(), wn = weights.node(), yn = out.node()]() {
    auto gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yn->grad[0] * wn->data[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

// Compares tape gradients of a scalar function against central differences
// for every coordinate of every input. Returns the max of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double gradient_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> inputs,
                             double step = 1e-5) {
  if (!(step > 0.0)) throw UsageError("gradient_check: step must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
    for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  }
  auto eval = [&]() {
    Tape off(false);
    return f(off).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = eval();
      values[i] = saved - step;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline double gradient_check(const std::function<Tensor(const Tensor&, Tape&)>& f, Tensor input,
                             double step = 1e-5) {
  return gradient_check([&](Tape& tape) { return f(input, tape); }, std::vector<Tensor>{input},
                        step);
}

}  // namespace rae
