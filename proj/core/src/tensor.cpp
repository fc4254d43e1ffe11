#include "cslr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace cslr {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

Tensor make_from_impl(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

namespace {

thread_local Tape* t_active_tape = nullptr;

Tensor make_tensor(Shape shape, std::vector<double> value) {
  if (shape_numel(shape) != value.size())
    throw DimensionError("tensor data length " + std::to_string(value.size()) +
                         " does not match shape " + shape_to_string(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(value);
  return make_from_impl(std::move(impl));
}

bool wants_grad(const Tensor& t) { return t.requires_grad() || t.on_tape(); }

// True when the active tape should record this op. Also rejects operands
// recorded on a different (older) tape: their backward closures are gone.
bool should_record(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (!tape) return false;
  bool any = false;
  for (const Tensor* in : inputs) {
    if (in->on_tape() && in->impl()->tape != tape)
      throw GraphError("operand was produced on a different tape");
    any = any || wants_grad(*in);
  }
  return any;
}

void mark_output(Tensor& out) {
  out.impl()->on_tape = true;
  out.impl()->tape = Tape::active();
}

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

// Output gradient, or nullptr when no consumer ever touched it (zero grad).
const std::vector<double>* out_grad(const ImplPtr& out) {
  return out->grad.empty() ? nullptr : &out->grad;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

// --- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return make_tensor(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(shape_numel(shape), value);
  return make_tensor(std::move(shape), std::move(v));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  return make_tensor(std::move(shape), std::move(values));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = make_tensor(std::move(shape), std::move(values));
  t.impl()->requires_grad = true;
  return t;
}

double Tensor::item() const {
  if (!is_scalar()) throw ContractError("item(): tensor is not scalar, shape " + shape_to_string(shape()));
  return impl_->value[0];
}

void Tensor::set_values(std::span<const double> v) {
  if (v.size() != impl_->value.size())
    throw DimensionError("set_values: length " + std::to_string(v.size()) + " vs tensor size " +
                         std::to_string(impl_->value.size()));
  std::copy(v.begin(), v.end(), impl_->value.begin());
}

bool Tensor::all_finite() const {
  for (double v : impl_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

// --- Tape -----------------------------------------------------------------

Tape::Tape() {
  prev_ = t_active_tape;
  t_active_tape = this;
}

Tape::~Tape() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) throw GraphError("tape already consumed; records are append-only per forward pass");
  nodes_.push_back(std::move(backward_fn));
}

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || !loss.is_scalar())
    throw ContractError("backward: loss must be a scalar");
  if (!loss.on_tape() || loss.impl()->tape != &tape)
    throw GraphError("backward: loss is detached from this tape");
  if (tape.consumed_) throw GraphError("backward: tape already consumed");

  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
  tape.consumed_ = true;
  tape.nodes_.clear();
}

// --- elementwise ops ------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
  Tensor out = make_tensor(a.shape(), std::move(v));
  if (should_record({&a, &b})) {
    mark_output(out);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool ga = wants_grad(a), gb = wants_grad(b);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (ga) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) ai->grad[i] += (*g)[i];
      }
      if (gb) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) bi->grad[i] += (*g)[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
  Tensor out = make_tensor(a.shape(), std::move(v));
  if (should_record({&a, &b})) {
    mark_output(out);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool ga = wants_grad(a), gb = wants_grad(b);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (ga) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) ai->grad[i] += (*g)[i];
      }
      if (gb) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) bi->grad[i] -= (*g)[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
  Tensor out = make_tensor(a.shape(), std::move(v));
  if (should_record({&a, &b})) {
    mark_output(out);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool ga = wants_grad(a), gb = wants_grad(b);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (ga) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) ai->grad[i] += (*g)[i] * bi->value[i];
      }
      if (gb) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) bi->grad[i] += (*g)[i] * ai->value[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> v(x.size());
  const auto& xv = x.impl()->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * c;
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < g->size(); ++i) xi->grad[i] += (*g)[i] * c;
    });
  }
  return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.extent(0))
    throw DimensionError("add_rowwise: bias " + shape_to_string(bias.shape()) +
                         " does not match last extent of " + shape_to_string(x.shape()));
  const std::size_t c = bias.extent(0);
  std::vector<double> v(x.size());
  const auto& xv = x.impl()->value;
  const auto& bv = bias.impl()->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] + bv[i % c];
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x, &bias})) {
    mark_output(out);
    ImplPtr xi = x.impl(), bi = bias.impl(), oi = out.impl();
    bool gx = wants_grad(x), gb = wants_grad(bias);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (gx) {
        xi->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) xi->grad[i] += (*g)[i];
      }
      if (gb) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g->size(); ++i) bi->grad[i % c] += (*g)[i];
      }
    });
  }
  return out;
}

// --- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> v(m * n, 0.0);
  const double* av = a.impl()->value.data();
  const double* bv = b.impl()->value.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* vr = v.data() + i * n;
    const double* ar = av + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = ar[l];
      const double* br = bv + l * n;
      for (std::size_t j = 0; j < n; ++j) vr[j] += ail * br[j];
    }
  }
  Tensor out = make_tensor({m, n}, std::move(v));
  if (should_record({&a, &b})) {
    mark_output(out);
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    bool ga = wants_grad(a), gb = wants_grad(b);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      const double* gv = g->data();
      if (ga) {
        ai->ensure_grad();
        // dA = G . B^T
        for (std::size_t i = 0; i < m; ++i) {
          double* dar = ai->grad.data() + i * k;
          const double* gr = gv + i * n;
          for (std::size_t l = 0; l < k; ++l) {
            const double* br = bi->value.data() + l * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
            dar[l] += acc;
          }
        }
      }
      if (gb) {
        bi->ensure_grad();
        // dB = A^T . G
        for (std::size_t l = 0; l < k; ++l) {
          double* dbr = bi->grad.data() + l * n;
          for (std::size_t i = 0; i < m; ++i) {
            const double ail = ai->value[i * k + l];
            const double* gr = gv + i * n;
            for (std::size_t j = 0; j < n; ++j) dbr[j] += ail * gr[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: rank-2 tensor required, got " + shape_to_string(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> v(r * c);
  const auto& xv = x.impl()->value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = xv[i * c + j];
  Tensor out = make_tensor({c, r}, std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) xi->grad[i * c + j] += (*g)[j * r + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
  Tensor out = make_tensor(std::move(shape), {x.values().begin(), x.values().end()});
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < g->size(); ++i) xi->grad[i] += (*g)[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2 || start + count > x.cols())
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_to_string(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> v(r * count);
  const auto& xv = x.impl()->value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) v[i * count + j] = xv[i * c + start + j];
  Tensor out = make_tensor({r, count}, std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) xi->grad[i * c + start + j] += (*g)[i * count + j];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != r)
      throw DimensionError("concat_cols: row mismatch at part with shape " + shape_to_string(p.shape()));
    c += p.cols();
  }
  std::vector<double> v(r * c);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const auto& pv = p.impl()->value;
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) v[i * c + off + j] = pv[i * pc + j];
    off += pc;
  }
  Tensor out = make_tensor({r, c}, std::move(v));
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Tape* tape = Tape::active();
  bool rec = false;
  if (tape) {
    for (const Tensor* p : ptrs) {
      if (p->on_tape() && p->impl()->tape != tape) throw GraphError("operand was produced on a different tape");
      rec = rec || wants_grad(*p);
    }
  }
  if (rec) {
    mark_output(out);
    std::vector<ImplPtr> impls;
    std::vector<bool> gs;
    std::vector<std::size_t> widths;
    for (const Tensor& p : parts) {
      impls.push_back(p.impl());
      gs.push_back(wants_grad(p));
      widths.push_back(p.cols());
    }
    ImplPtr oi = out.impl();
    tape->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      std::size_t o = 0;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        const std::size_t pc = widths[p];
        if (gs[p]) {
          impls[p]->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j) impls[p]->grad[i * pc + j] += (*g)[i * c + o + j];
        }
        o += pc;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.impl()->value) acc += v;
  Tensor out = make_tensor({1}, {acc});
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      const double gv = (*g)[0];
      for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += gv;
    });
  }
  return out;
}

// --- nonlinearities -------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x, double sm_scale) {
  if (x.rank() < 1 || x.shape().back() < 1)
    throw DimensionError("softmax_lastdim: empty last extent in " + shape_to_string(x.shape()));
  if (!(sm_scale > 0.0)) throw ConfigError("softmax_lastdim: scale must be positive");
  if (!x.all_finite()) throw NumericError("softmax_lastdim: non-finite input");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<double> v(x.size());
  const auto& xv = x.impl()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * c;
    double* outp = v.data() + r * c;
    double mx = in[0] / sm_scale;
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j] / sm_scale);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      outp[j] = std::exp(in[j] / sm_scale - mx);
      denom += outp[j];
    }
    for (std::size_t j = 0; j < c; ++j) outp[j] /= denom;
  }
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = oi->value.data() + r * c;
        const double* gr = g->data() + r * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += gr[j] * y[j];
        double* dx = xi->grad.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) dx[j] += y[j] * (gr[j] - dot) / sm_scale;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1 || x.shape().back() == 0)
    throw DimensionError("layer_norm: zero-length last axis in " + shape_to_string(x.shape()));
  const std::size_t c = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.extent(0) != c || bias.extent(0) != c)
    throw DimensionError("layer_norm: gain/bias must be rank-1 of length " + std::to_string(c));
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / c;
  std::vector<double> v(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_sd(rows);
  const auto& xv = x.impl()->value;
  const auto& gv = gain.impl()->value;
  const auto& bv = bias.impl()->value;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += in[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sd[r] = inv;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (in[j] - mean) * inv;
      xhat[r * c + j] = xh;
      v[r * c + j] = gv[j] * xh + bv[j];
    }
  }
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x, &gain, &bias})) {
    mark_output(out);
    ImplPtr xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    bool gx = wants_grad(x), gg = wants_grad(gain), gb = wants_grad(bias);
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto inv = std::make_shared<std::vector<double>>(std::move(inv_sd));
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (gg) gi->ensure_grad();
      if (gb) bi->ensure_grad();
      if (gx) xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g->data() + r * c;
        const double* xhr = xh->data() + r * c;
        if (gg || gb) {
          for (std::size_t j = 0; j < c; ++j) {
            if (gg) gi->grad[j] += gr[j] * xhr[j];
            if (gb) bi->grad[j] += gr[j];
          }
        }
        if (gx) {
          // dx = inv * (dxh - mean(dxh) - xhat * mean(dxh * xhat))
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = gr[j] * gi->value[j];
            m1 += dxh;
            m2 += dxh * xhr[j];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          double* dx = xi->grad.data() + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = gr[j] * gi->value[j];
            dx[j] += (*inv)[r] * (dxh - m1 - xhr[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor channel_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2 || x.rows() == 0)
    throw DimensionError("channel_norm: non-empty rank-2 tensor required");
  const std::size_t t_len = x.rows(), c = x.cols();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.extent(0) != c || bias.extent(0) != c)
    throw DimensionError("channel_norm: gain/bias must be rank-1 of length " + std::to_string(c));
  if (!(eps > 0.0)) throw ConfigError("channel_norm: eps must be positive");
  std::vector<double> v(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_sd(c);
  const auto& xv = x.impl()->value;
  const auto& gv = gain.impl()->value;
  const auto& bv = bias.impl()->value;
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) mean += xv[t * c + j];
    mean /= static_cast<double>(t_len);
    double var = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) var += (xv[t * c + j] - mean) * (xv[t * c + j] - mean);
    var /= static_cast<double>(t_len);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sd[j] = inv;
    for (std::size_t t = 0; t < t_len; ++t) {
      const double xh = (xv[t * c + j] - mean) * inv;
      xhat[t * c + j] = xh;
      v[t * c + j] = gv[j] * xh + bv[j];
    }
  }
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x, &gain, &bias})) {
    mark_output(out);
    ImplPtr xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    bool gx = wants_grad(x), gg = wants_grad(gain), gb = wants_grad(bias);
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto inv = std::make_shared<std::vector<double>>(std::move(inv_sd));
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (gg) gi->ensure_grad();
      if (gb) bi->ensure_grad();
      if (gx) xi->ensure_grad();
      for (std::size_t j = 0; j < c; ++j) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t t = 0; t < t_len; ++t) {
          const double gr = (*g)[t * c + j];
          if (gg) gi->grad[j] += gr * (*xh)[t * c + j];
          if (gb) bi->grad[j] += gr;
          const double dxh = gr * gi->value[j];
          m1 += dxh;
          m2 += dxh * (*xh)[t * c + j];
        }
        if (gx) {
          m1 /= static_cast<double>(t_len);
          m2 /= static_cast<double>(t_len);
          for (std::size_t t = 0; t < t_len; ++t) {
            const double dxh = (*g)[t * c + j] * gi->value[j];
            xi->grad[t * c + j] += (*inv)[j] * (dxh - m1 - (*xh)[t * c + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor swish(const Tensor& x) {
  std::vector<double> v(x.size());
  const auto& xv = x.impl()->value;
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * sigmoid(xv[i]);
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double s = sigmoid(xi->value[i]);
        xi->grad[i] += (*g)[i] * (s + xi->value[i] * s * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor glu(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() % 2 != 0)
    throw DimensionError("glu: last extent must be even, got " + shape_to_string(x.shape()));
  const std::size_t c2 = x.shape().back();
  const std::size_t c = c2 / 2;
  const std::size_t rows = x.size() / c2;
  Shape out_shape = x.shape();
  out_shape.back() = c;
  std::vector<double> v(rows * c);
  const auto& xv = x.impl()->value;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j)
      v[r * c + j] = xv[r * c2 + j] * sigmoid(xv[r * c2 + c + j]);
  Tensor out = make_tensor(std::move(out_shape), std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
          const double a = xi->value[r * c2 + j];
          const double s = sigmoid(xi->value[r * c2 + c + j]);
          const double gv = (*g)[r * c + j];
          xi->grad[r * c2 + j] += gv * s;
          xi->grad[r * c2 + c + j] += gv * a * s * (1.0 - s);
        }
      }
    });
  }
  return out;
}

// --- convolutions ---------------------------------------------------------

Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 2 || kernel.rank() != 2)
    throw DimensionError("depthwise_conv1d: rank-2 operands required");
  if (kernel.rows() % 2 == 0)
    throw ConfigError("depthwise_conv1d: kernel length must be odd, got " + std::to_string(kernel.rows()));
  if (kernel.cols() != x.cols())
    throw DimensionError("depthwise_conv1d: channel mismatch " + shape_to_string(x.shape()) + " vs " +
                         shape_to_string(kernel.shape()));
  const std::size_t t_len = x.rows(), c = x.cols(), k = kernel.rows();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<double> v(t_len * c, 0.0);
  const auto& xv = x.impl()->value;
  const auto& kv = kernel.impl()->value;
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + kk) - pad;
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_len)) continue;
      const double* xr = xv.data() + static_cast<std::size_t>(s) * c;
      const double* kr = kv.data() + kk * c;
      double* vr = v.data() + t * c;
      for (std::size_t j = 0; j < c; ++j) vr[j] += xr[j] * kr[j];
    }
  }
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x, &kernel})) {
    mark_output(out);
    ImplPtr xi = x.impl(), ki = kernel.impl(), oi = out.impl();
    bool gx = wants_grad(x), gk = wants_grad(kernel);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (gx) xi->ensure_grad();
      if (gk) ki->ensure_grad();
      for (std::size_t t = 0; t < t_len; ++t) {
        const double* gr = g->data() + t * c;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + kk) - pad;
          if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_len)) continue;
          const std::size_t su = static_cast<std::size_t>(s);
          for (std::size_t j = 0; j < c; ++j) {
            if (gx) xi->grad[su * c + j] += gr[j] * ki->value[kk * c + j];
            if (gk) ki->grad[kk * c + j] += gr[j] * xi->value[su * c + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, PadMode pad_mode) {
  if (x.rank() != 2 || w.rank() != 3)
    throw DimensionError("conv1d: expected x[TxCin], w[KxCinxCout]");
  if (w.extent(0) % 2 == 0) throw ConfigError("conv1d: kernel length must be odd");
  if (w.extent(1) != x.cols())
    throw DimensionError("conv1d: input channels " + std::to_string(x.cols()) + " vs kernel " +
                         std::to_string(w.extent(1)));
  if (stride == 0) throw ConfigError("conv1d: stride must be >= 1");
  const std::size_t t_len = x.rows(), cin = x.cols();
  const std::size_t k = w.extent(0), cout = w.extent(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t out_len = (t_len - 1) / stride + 1;
  std::vector<double> v(out_len * cout, 0.0);
  const auto& xv = x.impl()->value;
  const auto& wv = w.impl()->value;
  // Captured by value: the closure outlives this frame on the tape.
  auto src_row = [t_len, stride, pad, pad_mode](std::size_t t, std::size_t kk, bool& valid) -> std::size_t {
    std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t * stride + kk) - pad;
    if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_len)) {
      if (pad_mode == PadMode::kZero) {
        valid = false;
        return 0;
      }
      s = std::clamp<std::ptrdiff_t>(s, 0, static_cast<std::ptrdiff_t>(t_len) - 1);
    }
    valid = true;
    return static_cast<std::size_t>(s);
  };
  for (std::size_t t = 0; t < out_len; ++t) {
    double* vr = v.data() + t * cout;
    for (std::size_t kk = 0; kk < k; ++kk) {
      bool valid = true;
      const std::size_t s = src_row(t, kk, valid);
      if (!valid) continue;
      const double* xr = xv.data() + s * cin;
      const double* wr = wv.data() + kk * cin * cout;
      for (std::size_t i = 0; i < cin; ++i) {
        const double xi_v = xr[i];
        const double* wc = wr + i * cout;
        for (std::size_t o = 0; o < cout; ++o) vr[o] += xi_v * wc[o];
      }
    }
  }
  Tensor out = make_tensor({out_len, cout}, std::move(v));
  if (should_record({&x, &w})) {
    mark_output(out);
    ImplPtr xi = x.impl(), wi = w.impl(), oi = out.impl();
    bool gx = wants_grad(x), gw = wants_grad(w);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (gx) xi->ensure_grad();
      if (gw) wi->ensure_grad();
      for (std::size_t t = 0; t < out_len; ++t) {
        const double* gr = g->data() + t * cout;
        for (std::size_t kk = 0; kk < k; ++kk) {
          bool valid = true;
          const std::size_t s = src_row(t, kk, valid);
          if (!valid) continue;
          for (std::size_t i = 0; i < cin; ++i) {
            const double* wc = wi->value.data() + (kk * cin + i) * cout;
            double acc = 0.0;
            for (std::size_t o = 0; o < cout; ++o) {
              acc += gr[o] * wc[o];
              if (gw) wi->grad[(kk * cin + i) * cout + o] += xi->value[s * cin + i] * gr[o];
            }
            if (gx) xi->grad[s * cin + i] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor avgpool_rows(const Tensor& x, std::size_t factor) {
  if (x.rank() != 2) throw DimensionError("avgpool_rows: rank-2 tensor required");
  if (factor == 0) throw ConfigError("avgpool_rows: factor must be >= 1");
  const std::size_t t_len = x.rows(), c = x.cols();
  const std::size_t out_len = (t_len + factor - 1) / factor;
  std::vector<double> v(out_len * c, 0.0);
  const auto& xv = x.impl()->value;
  for (std::size_t t = 0; t < out_len; ++t) {
    const std::size_t lo = t * factor;
    const std::size_t hi = std::min(lo + factor, t_len);
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t s = lo; s < hi; ++s)
      for (std::size_t j = 0; j < c; ++j) v[t * c + j] += xv[s * c + j] * inv;
  }
  Tensor out = make_tensor({out_len, c}, std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t t = 0; t < out_len; ++t) {
        const std::size_t lo = t * factor;
        const std::size_t hi = std::min(lo + factor, t_len);
        const double inv = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t s = lo; s < hi; ++s)
          for (std::size_t j = 0; j < c; ++j) xi->grad[s * c + j] += (*g)[t * c + j] * inv;
      }
    });
  }
  return out;
}

Tensor upsample_rows_nearest(const Tensor& x, std::size_t out_rows) {
  if (x.rank() != 2 || x.rows() == 0) throw DimensionError("upsample_rows_nearest: non-empty rank-2 tensor required");
  if (out_rows == 0) throw ConfigError("upsample_rows_nearest: output length must be >= 1");
  const std::size_t t_len = x.rows(), c = x.cols();
  std::vector<double> v(out_rows * c);
  const auto& xv = x.impl()->value;
  for (std::size_t t = 0; t < out_rows; ++t) {
    const std::size_t s = t * t_len / out_rows;
    for (std::size_t j = 0; j < c; ++j) v[t * c + j] = xv[s * c + j];
  }
  Tensor out = make_tensor({out_rows, c}, std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t t = 0; t < out_rows; ++t) {
        const std::size_t s = t * t_len / out_rows;
        for (std::size_t j = 0; j < c; ++j) xi->grad[s * c + j] += (*g)[t * c + j];
      }
    });
  }
  return out;
}

Tensor relative_position_logits(const Tensor& q, const Tensor& rel, std::size_t max_distance) {
  if (q.rank() != 2 || rel.rank() != 2 || q.cols() != rel.cols())
    throw DimensionError("relative_position_logits: expected q[Txd], rel[Rxd] with matching d");
  if (rel.rows() != 2 * max_distance + 1)
    throw DimensionError("relative_position_logits: table rows " + std::to_string(rel.rows()) +
                         " != 2*max_distance+1 = " + std::to_string(2 * max_distance + 1));
  const std::size_t t_len = q.rows(), d = q.cols();
  const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(max_distance);
  std::vector<double> v(t_len * t_len);
  const auto& qv = q.impl()->value;
  const auto& rv = rel.impl()->value;
  auto rel_row = [m](std::size_t i, std::size_t j) {
    std::ptrdiff_t off = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i);
    off = std::clamp<std::ptrdiff_t>(off, -m, m);
    return static_cast<std::size_t>(off + m);
  };
  for (std::size_t i = 0; i < t_len; ++i) {
    const double* qr = qv.data() + i * d;
    for (std::size_t j = 0; j < t_len; ++j) {
      const double* rr = rv.data() + rel_row(i, j) * d;
      double acc = 0.0;
      for (std::size_t x = 0; x < d; ++x) acc += qr[x] * rr[x];
      v[i * t_len + j] = acc;
    }
  }
  Tensor out = make_tensor({t_len, t_len}, std::move(v));
  if (should_record({&q, &rel})) {
    mark_output(out);
    ImplPtr qi = q.impl(), ri = rel.impl(), oi = out.impl();
    bool gq = wants_grad(q), gr_ = wants_grad(rel);
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      if (gq) qi->ensure_grad();
      if (gr_) ri->ensure_grad();
      for (std::size_t i = 0; i < t_len; ++i) {
        for (std::size_t j = 0; j < t_len; ++j) {
          const double gv = (*g)[i * t_len + j];
          if (gv == 0.0) continue;
          const std::size_t rr = rel_row(i, j);
          for (std::size_t x = 0; x < d; ++x) {
            if (gq) qi->grad[i * d + x] += gv * ri->value[rr * d + x];
            if (gr_) ri->grad[rr * d + x] += gv * qi->value[i * d + x];
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const double keep = 1.0 - rate;
  std::bernoulli_distribution dist(keep);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> v(x.size());
  const auto& xv = x.impl()->value;
  for (std::size_t i = 0; i < v.size(); ++i) {
    (*mask)[i] = dist(rng) ? 1.0 / keep : 0.0;
    v[i] = xv[i] * (*mask)[i];
  }
  Tensor out = make_tensor(x.shape(), std::move(v));
  if (should_record({&x})) {
    mark_output(out);
    ImplPtr xi = x.impl(), oi = out.impl();
    Tape::active()->record([=] {
      const auto* g = out_grad(oi);
      if (!g) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < g->size(); ++i) xi->grad[i] += (*g)[i] * (*mask)[i];
    });
  }
  return out;
}

// --- finite differences ---------------------------------------------------

std::vector<double> finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                               const Tensor& x, double step) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_gradient: step must be positive");
  std::vector<double> base(x.values().begin(), x.values().end());
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> hi = base, lo = base;
    hi[i] += step;
    lo[i] -= step;
    const double fhi = f(Tensor::from_values(x.shape(), std::move(hi)));
    const double flo = f(Tensor::from_values(x.shape(), std::move(lo)));
    grad[i] = (fhi - flo) / (2.0 * step);
  }
  return grad;
}

}  // namespace cslr
