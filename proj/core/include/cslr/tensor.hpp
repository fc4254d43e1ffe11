#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cslr/error.hpp"
#include "cslr/rng.hpp"

namespace cslr {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;   // empty until the backward pass touches it
  bool requires_grad = false; // leaf parameter flag
  bool on_tape = false;       // produced by a recorded op
  const Tape* tape = nullptr; // tape that produced it, when on_tape

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Shaped double array participating in reverse-mode differentiation.
// Value semantics with shared storage: copies alias the same buffer. Values
// are treated as immutable once an op has consumed them; parameter updates go
// through the explicit mutation API between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double v) { return from_values({1}, {v}); }
  // Leaf with requires_grad set; the unit of optimization.
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros_like(const Tensor& other) { return zeros(other.shape()); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->value.size(); }
  std::size_t extent(std::size_t dim) const { return impl_->shape.at(dim); }
  // Rank-2 conveniences; most model math lives on [rows x cols] matrices.
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.at(1); }

  bool is_scalar() const { return size() == 1; }
  double item() const;

  double at(std::size_t i) const { return impl_->value[i]; }
  double at(std::size_t i, std::size_t j) const { return impl_->value[i * cols() + j]; }

  std::span<const double> values() const { return impl_->value; }
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }

  bool requires_grad() const { return impl_->requires_grad; }
  bool on_tape() const { return impl_->on_tape; }

  // Mutation API for optimizers and loaders. Never call on a tensor that a
  // live tape still references.
  std::span<double> mutable_values() { return impl_->value; }
  void set_values(std::span<const double> v);
  void zero_grad() { impl_->grad.clear(); }

  bool all_finite() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
  friend Tensor make_from_impl(std::shared_ptr<detail::TensorImpl>);
};

// Append-only record of one forward pass. Constructing a Tape makes it the
// active tape for the current thread; destruction restores the previous one.
// backward() replays the record in reverse creation order, which visits every
// node after all of its consumers.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::function<void()> backward_fn);

 private:
  friend void backward(const Tensor& loss, Tape& tape);
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Runs the backward pass from a scalar loss produced on `tape`. Every
// requires_grad leaf reachable from the loss receives an accumulated
// gradient. The tape is consumed.
void backward(const Tensor& loss, Tape& tape);

// --- primitive ops -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
// x[... x C] + bias[C], broadcast over leading dims.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
// Same data, new shape; element count must be preserved.
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor sum(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x, double scale);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Standardizes each channel over the time axis of x[T x C]; per-channel affine.
Tensor channel_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor swish(const Tensor& x);
Tensor glu(const Tensor& x);
// Per-channel temporal convolution, zero 'same' padding, odd K.
// x: [T x C], kernel: [K x C].
Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel);

enum class PadMode { kZero, kReplicate };
// General strided temporal convolution. x: [T x Cin], w: [K x Cin x Cout],
// pad (K-1)/2 on both sides, output length ceil(T / stride).
Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, PadMode pad = PadMode::kZero);

Tensor avgpool_rows(const Tensor& x, std::size_t factor);
Tensor upsample_rows_nearest(const Tensor& x, std::size_t out_rows);

// Relative-position attention logits: out[i, j] = q[i] . rel[clamp(j - i)],
// with offsets clamped to [-max_distance, max_distance] and the table indexed
// as rel[offset + max_distance]. q: [T x d], rel: [(2*max_distance+1) x d].
Tensor relative_position_logits(const Tensor& q, const Tensor& rel, std::size_t max_distance);

// Inverted dropout with Bernoulli keep masks; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// --- gradient oracle ------------------------------------------------------

// Central-difference estimate of d f / d x per element. f must be a
// deterministic scalar function; it is evaluated 2 * x.size() times.
std::vector<double> finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                               const Tensor& x, double step);

}  // namespace cslr
