#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "segviz/error.hpp"

namespace segviz {

using Shape = std::vector<size_t>;

inline size_t numel(const Shape& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

inline void validate_shape(const Shape& shape) {
  if (shape.empty()) fail(ErrorKind::invalid_shape, "empty dimension list");
  for (size_t d : shape)
    if (d == 0) fail(ErrorKind::invalid_shape, "zero dimension");
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// NaN/Inf detection on op outputs. Off by default, switched on by test mains.
bool finite_check_enabled();
void set_finite_check(bool on);

namespace detail {

inline std::atomic<bool>& finite_check_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  uint64_t tape_id = 0;  // tape that produced this tensor, 0 for leaves

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

inline bool finite_check_enabled() { return detail::finite_check_flag().load(std::memory_order_relaxed); }
inline void set_finite_check(bool on) { detail::finite_check_flag().store(on, std::memory_order_relaxed); }

template <typename T>
class Tape;

template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  static TensorT zeros(const Shape& shape) {
    return filled(shape, T(0));
  }

  static TensorT constant(const Shape& shape, T value) { return filled(shape, value); }

  static TensorT uniform(const Shape& shape, T lo, T hi, uint64_t seed) {
    validate_shape(shape);
    if (!(lo < hi)) fail(ErrorKind::invalid_argument, "uniform: lo must be < hi");
    TensorT t = filled(shape, T(0));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<T> dist(lo, hi);
    for (T& v : t.impl_->data) v = dist(rng);
    return t;
  }

  // He-style init: normal with stddev sqrt(2 / fan_in); fan_in treats dim 0 as
  // the output dimension for weights of rank >= 2.
  static TensorT he_normal(const Shape& shape, uint64_t seed) {
    validate_shape(shape);
    size_t fan_in = shape.size() >= 2 ? numel(shape) / shape[0] : shape[0];
    TensorT t = filled(shape, T(0));
    std::mt19937_64 rng(seed);
    std::normal_distribution<T> dist(T(0), std::sqrt(T(2) / T(fan_in)));
    for (T& v : t.impl_->data) v = dist(rng);
    return t;
  }

  static TensorT from_data(const Shape& shape, std::vector<T> values) {
    validate_shape(shape);
    if (values.size() != numel(shape))
      fail(ErrorKind::invalid_shape, "from_data: " + std::to_string(values.size()) +
                                         " values for shape " + shape_str(shape));
    TensorT t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = shape;
    t.impl_->data = std::move(values);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  size_t rank() const { return impl_->shape.size(); }
  size_t dim(size_t i) const { return impl_->shape.at(i); }
  size_t size() const { return impl_ ? impl_->data.size() : 0; }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (!impl_ || impl_->data.size() != 1)
      fail(ErrorKind::invalid_argument, "item() on non-scalar tensor");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  TensorT& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }

  // Gradient as a tensor; zeros when nothing was accumulated yet.
  TensorT grad() const {
    if (!has_grad()) return zeros(impl_->shape);
    return from_data(impl_->shape, impl_->grad);
  }

  void zero_grad() {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  TensorT clone() const {
    if (!impl_) return TensorT();
    TensorT t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  // In-place overwrite of the values; the handle (and anything sharing it)
  // keeps pointing at the same storage.
  void copy_from(const TensorT& src) {
    if (!impl_ || !src.impl_) fail(ErrorKind::invalid_argument, "copy_from on undefined tensor");
    if (impl_->shape != src.impl_->shape)
      fail(ErrorKind::shape_mismatch,
           "copy_from: " + shape_str(src.impl_->shape) + " into " + shape_str(impl_->shape));
    impl_->data = src.impl_->data;
  }

  bool same_storage(const TensorT& other) const { return impl_ == other.impl_; }

  // Internal handle, used by the op implementations and the tape.
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  static TensorT filled(const Shape& shape, T value) {
    validate_shape(shape);
    TensorT t;
    t.impl_ = std::make_shared<detail::TensorImpl<T>>();
    t.impl_->shape = shape;
    t.impl_->data.assign(numel(shape), value);
    return t;
  }

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Records the backward closures of executed ops, replayed in reverse by
// backward(). One tape per forward pass; consumed by the first backward call.
template <typename T>
class Tape {
 public:
  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t id() const { return id_; }
  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

 private:
  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  uint64_t id_;

  template <typename U>
  friend void backward(const TensorT<U>& loss, Tape<U>& tape);
};

using TapeF = Tape<float>;

namespace detail {

template <typename T>
bool wants_grad(const Tape<T>* tape, const TensorT<T>& t) {
  if (!t.defined()) return false;
  return t.requires_grad() || (tape && t.impl()->tape_id == tape->id());
}

template <typename T>
void maybe_check_finite(const TensorT<T>& t, const char* op) {
  if (!finite_check_enabled()) return;
  for (T v : t.values())
    if (!std::isfinite(v)) fail(ErrorKind::non_finite, std::string(op) + " produced NaN/Inf");
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    fail(ErrorKind::shape_mismatch,
         std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops. Every op takes the tape first; pass nullptr
// to run without recording (eval mode).
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "add");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const size_t n = a.size();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (tape) {
    bool na = detail::wants_grad(tape, a), nb = detail::wants_grad(tape, b);
    if (na || nb) {
      out.impl()->tape_id = tape->id();
      tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb] {
        if (oi->grad.empty()) return;
        if (na) {
          ai->ensure_grad();
          for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        }
        if (nb) {
          bi->ensure_grad();
          for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
        }
      });
    }
  }
  detail::maybe_check_finite(out, "add");
  return out;
}

template <typename T>
TensorT<T> sub(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "sub");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (tape) {
    bool na = detail::wants_grad(tape, a), nb = detail::wants_grad(tape, b);
    if (na || nb) {
      out.impl()->tape_id = tape->id();
      tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb] {
        if (oi->grad.empty()) return;
        if (na) {
          ai->ensure_grad();
          for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        }
        if (nb) {
          bi->ensure_grad();
          for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
        }
      });
    }
  }
  detail::maybe_check_finite(out, "sub");
  return out;
}

template <typename T>
TensorT<T> mul(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "mul");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (tape) {
    bool na = detail::wants_grad(tape, a), nb = detail::wants_grad(tape, b);
    if (na || nb) {
      out.impl()->tape_id = tape->id();
      tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb] {
        if (oi->grad.empty()) return;
        if (na) {
          ai->ensure_grad();
          for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
        }
        if (nb) {
          bi->ensure_grad();
          for (size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
        }
      });
    }
  }
  detail::maybe_check_finite(out, "mul");
  return out;
}

template <typename T>
TensorT<T> div(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "div");
  TensorT<T> out = TensorT<T>::zeros(a.shape());
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
  if (tape) {
    bool na = detail::wants_grad(tape, a), nb = detail::wants_grad(tape, b);
    if (na || nb) {
      out.impl()->tape_id = tape->id();
      tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb] {
        if (oi->grad.empty()) return;
        for (size_t i = 0; i < oi->grad.size(); ++i) {
          const T g = oi->grad[i];
          const T bv = bi->data[i];
          if (na) {
            ai->ensure_grad();
            ai->grad[i] += g / bv;
          }
          if (nb) {
            bi->ensure_grad();
            bi->grad[i] -= g * ai->data[i] / (bv * bv);
          }
        }
      });
    }
  }
  detail::maybe_check_finite(out, "div");
  return out;
}

template <typename T>
TensorT<T> scale(Tape<T>* tape, const TensorT<T>& x, T c) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * c;
  if (tape && detail::wants_grad(tape, x)) {
    out.impl()->tape_id = tape->id();
    tape->record([xi = x.impl(), oi = out.impl(), c] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * c;
    });
  }
  detail::maybe_check_finite(out, "scale");
  return out;
}

template <typename T>
TensorT<T> add_const(Tape<T>* tape, const TensorT<T>& x, T c) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] + c;
  if (tape && detail::wants_grad(tape, x)) {
    out.impl()->tape_id = tape->id();
    tape->record([xi = x.impl(), oi = out.impl()] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

// Full reduction to a [1] tensor.
template <typename T>
TensorT<T> sum(Tape<T>* tape, const TensorT<T>& x) {
  T acc = 0;
  for (size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  TensorT<T> out = TensorT<T>::constant({1}, acc);
  if (tape && detail::wants_grad(tape, x)) {
    out.impl()->tape_id = tape->id();
    tape->record([xi = x.impl(), oi = out.impl()] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const T g = oi->grad[0];
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
    });
  }
  detail::maybe_check_finite(out, "sum");
  return out;
}

template <typename T>
TensorT<T> relu(Tape<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (tape && detail::wants_grad(tape, x)) {
    out.impl()->tape_id = tape->id();
    tape->record([xi = x.impl(), oi = out.impl()] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i)
        if (xi->data[i] > T(0)) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> sigmoid(Tape<T>* tape, const TensorT<T>& x) {
  TensorT<T> out = TensorT<T>::zeros(x.shape());
  for (size_t i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    // branch keeps exp() argument negative for numeric safety on both tails
    out.data()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                              : std::exp(v) / (T(1) + std::exp(v));
  }
  if (tape && detail::wants_grad(tape, x)) {
    out.impl()->tape_id = tape->id();
    tape->record([xi = x.impl(), oi = out.impl()] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        const T y = oi->data[i];
        xi->grad[i] += oi->grad[i] * y * (T(1) - y);
      }
    });
  }
  detail::maybe_check_finite(out, "sigmoid");
  return out;
}

template <typename T>
TensorT<T> softmax(Tape<T>* tape, const TensorT<T>& x, size_t axis) {
  if (axis >= x.rank()) fail(ErrorKind::invalid_argument, "softmax: axis out of range");
  const Shape& s = x.shape();
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const size_t n_axis = s[axis];

  TensorT<T> out = TensorT<T>::zeros(s);
  const T* px = x.data();
  T* po = out.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      const size_t base = o * n_axis * inner + in;
      T mx = px[base];
      for (size_t k = 1; k < n_axis; ++k) mx = std::max(mx, px[base + k * inner]);
      T denom = 0;
      for (size_t k = 0; k < n_axis; ++k) {
        const T e = std::exp(px[base + k * inner] - mx);
        po[base + k * inner] = e;
        denom += e;
      }
      for (size_t k = 0; k < n_axis; ++k) po[base + k * inner] /= denom;
    }
  }
  if (tape && detail::wants_grad(tape, x)) {
    out.impl()->tape_id = tape->id();
    tape->record([xi = x.impl(), oi = out.impl(), outer, inner, n_axis] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
          const size_t base = o * n_axis * inner + in;
          T dot = 0;
          for (size_t k = 0; k < n_axis; ++k)
            dot += oi->grad[base + k * inner] * oi->data[base + k * inner];
          for (size_t k = 0; k < n_axis; ++k) {
            const size_t idx = base + k * inner;
            xi->grad[idx] += oi->data[idx] * (oi->grad[idx] - dot);
          }
        }
      }
    });
  }
  detail::maybe_check_finite(out, "softmax");
  return out;
}

// Concatenate along the channel axis (axis 1 of [N, C, spatial...]).
template <typename T>
TensorT<T> concat_channels(Tape<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
    fail(ErrorKind::shape_mismatch, "concat_channels: need matching [N,C,...] ranks");
  Shape sa = a.shape(), sb = b.shape();
  for (size_t i = 0; i < sa.size(); ++i) {
    if (i == 1) continue;
    if (sa[i] != sb[i])
      fail(ErrorKind::shape_mismatch,
           "concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  }
  Shape so = sa;
  so[1] = sa[1] + sb[1];
  TensorT<T> out = TensorT<T>::zeros(so);

  size_t spatial = 1;
  for (size_t i = 2; i < sa.size(); ++i) spatial *= sa[i];
  const size_t ca = sa[1], cb = sb[1], batch = sa[0];
  const size_t row_a = ca * spatial, row_b = cb * spatial, row_o = (ca + cb) * spatial;
  for (size_t n = 0; n < batch; ++n) {
    std::memcpy(out.data() + n * row_o, a.data() + n * row_a, row_a * sizeof(T));
    std::memcpy(out.data() + n * row_o + row_a, b.data() + n * row_b, row_b * sizeof(T));
  }
  if (tape) {
    bool na = detail::wants_grad(tape, a), nb = detail::wants_grad(tape, b);
    if (na || nb) {
      out.impl()->tape_id = tape->id();
      tape->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), na, nb, batch, row_a, row_b,
                    row_o] {
        if (oi->grad.empty()) return;
        if (na) ai->ensure_grad();
        if (nb) bi->ensure_grad();
        for (size_t n = 0; n < batch; ++n) {
          const T* go = oi->grad.data() + n * row_o;
          if (na)
            for (size_t i = 0; i < row_a; ++i) ai->grad[n * row_a + i] += go[i];
          if (nb)
            for (size_t i = 0; i < row_b; ++i) bi->grad[n * row_b + i] += go[row_a + i];
        }
      });
    }
  }
  return out;
}

// Channel slice [begin, begin+count) of a [N, C, spatial...] tensor.
template <typename T>
TensorT<T> slice_channels(Tape<T>* tape, const TensorT<T>& x, size_t begin, size_t count) {
  if (x.rank() < 2) fail(ErrorKind::shape_mismatch, "slice_channels: need [N,C,...]");
  const Shape& s = x.shape();
  if (begin + count > s[1] || count == 0)
    fail(ErrorKind::invalid_argument, "slice_channels: range out of bounds");
  Shape so = s;
  so[1] = count;
  TensorT<T> out = TensorT<T>::zeros(so);
  size_t spatial = 1;
  for (size_t i = 2; i < s.size(); ++i) spatial *= s[i];
  const size_t row_x = s[1] * spatial, row_o = count * spatial, off = begin * spatial;
  for (size_t n = 0; n < s[0]; ++n)
    std::memcpy(out.data() + n * row_o, x.data() + n * row_x + off, row_o * sizeof(T));
  if (tape && detail::wants_grad(tape, x)) {
    out.impl()->tape_id = tape->id();
    const size_t batch = s[0];
    tape->record([xi = x.impl(), oi = out.impl(), batch, row_x, row_o, off] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t n = 0; n < batch; ++n)
        for (size_t i = 0; i < row_o; ++i) xi->grad[n * row_x + off + i] += oi->grad[n * row_o + i];
    });
  }
  return out;
}

// Reverse-mode sweep. Seeds d(loss)/d(loss) = 1, replays the tape backwards,
// accumulating (+=) into every tensor that requires a gradient. The tape is
// consumed: a second backward on it is an error.
template <typename T>
void backward(const TensorT<T>& loss, Tape<T>& tape) {
  if (!loss.defined() || loss.size() != 1)
    fail(ErrorKind::non_scalar_loss, "backward needs a scalar loss");
  if (tape.consumed_) fail(ErrorKind::tape_consumed, "backward already ran on this tape");
  if (loss.impl()->tape_id != tape.id_)
    fail(ErrorKind::not_on_tape, "loss was not produced by this tape");
  tape.consumed_ = true;
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = T(1);
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
  tape.nodes_.clear();
}

// Central-difference gradient of a scalar-valued function; the test oracle
// for everything differentiable. f must be pure.
template <typename T>
TensorT<T> finite_difference_gradient(const std::function<T(const TensorT<T>&)>& f,
                                      const TensorT<T>& x, T h) {
  if (!(h > T(0))) fail(ErrorKind::invalid_argument, "finite differences need h > 0");
  TensorT<T> g = TensorT<T>::zeros(x.shape());
  TensorT<T> probe = x.clone();
  for (size_t i = 0; i < x.size(); ++i) {
    const T orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const T fp = f(probe);
    probe.data()[i] = orig - h;
    const T fm = f(probe);
    probe.data()[i] = orig;
    g.data()[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

}  // namespace segviz
