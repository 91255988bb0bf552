#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "stark/rng.hpp"

// Dense row-major tensor with tape-based reverse-mode differentiation.
// Templated on the scalar type: the production build uses float storage,
// the gradient-verification suite instantiates the same code with double.

namespace stark {

inline std::string shape_str(const std::vector<int>& d) {
  std::string s = "[";
  for (size_t i = 0; i < d.size(); ++i) {
    s += std::to_string(d[i]);
    if (i + 1 < d.size()) s += "x";
  }
  return s + "]";
}

inline std::int64_t shape_numel(const std::vector<int>& d) {
  std::int64_t n = 1;
  for (int e : d) n *= e;
  return n;
}

template <class S>
struct TensorStorage {
  std::vector<S> v;
  std::vector<S> g;  // allocated on first use
  bool rg = false;
};

template <class S>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> dims, bool requires_grad = false) {
    TensorT t;
    t.dims_ = std::move(dims);
    t.check_dims();
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->v.assign(static_cast<size_t>(shape_numel(t.dims_)), S(0));
    t.st_->rg = requires_grad;
    return t;
  }

  static TensorT full(std::vector<int> dims, S value) {
    TensorT t = zeros(std::move(dims));
    std::fill(t.st_->v.begin(), t.st_->v.end(), value);
    return t;
  }

  static TensorT scalar(S value) { return full({1}, value); }

  static TensorT from(std::vector<int> dims, std::vector<S> values, bool requires_grad = false) {
    TensorT t;
    t.dims_ = std::move(dims);
    t.check_dims();
    if (shape_numel(t.dims_) != static_cast<std::int64_t>(values.size()))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_str(t.dims_));
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->v = std::move(values);
    t.st_->rg = requires_grad;
    return t;
  }

  static TensorT uniform(std::vector<int> dims, Rng& rng, double lo, double hi,
                         bool requires_grad = false) {
    TensorT t = zeros(std::move(dims), requires_grad);
    for (auto& x : t.st_->v) x = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return static_cast<bool>(st_); }
  const std::vector<int>& dims() const { return dims_; }
  int dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(dims_.size()); }
  std::int64_t numel() const { return shape_numel(dims_); }

  // The handle has pointer semantics: a const handle still exposes mutable
  // storage, like shared_ptr.
  S* data() const { return st_->v.data(); }
  const std::vector<S>& values() const { return st_->v; }

  bool requires_grad() const { return st_ && st_->rg; }
  const TensorT& set_requires_grad(bool rg) const {
    st_->rg = rg;
    return *this;
  }

  bool has_grad() const { return st_ && !st_->g.empty(); }

  S* grad() const {
    if (st_->g.empty()) st_->g.assign(st_->v.size(), S(0));
    return st_->g.data();
  }

  void zero_grad() const {
    if (st_ && !st_->g.empty()) std::fill(st_->g.begin(), st_->g.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor " + shape_str(dims_) + " is not scalar");
    return st_->v[0];
  }

  // New view over the same storage (and same gradient buffer).
  TensorT reshape(std::vector<int> dims) const {
    if (shape_numel(dims) != numel())
      throw std::invalid_argument("reshape: " + shape_str(dims_) + " -> " + shape_str(dims) +
                                  " changes element count");
    TensorT t = *this;
    t.dims_ = std::move(dims);
    return t;
  }

  // Deep copy of values; gradient buffer and tape history are not carried over.
  TensorT clone() const {
    TensorT t;
    t.dims_ = dims_;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->v = st_->v;
    t.st_->rg = st_->rg;
    return t;
  }

  bool same_storage(const TensorT& o) const { return st_ == o.st_; }

 private:
  void check_dims() const {
    if (dims_.empty()) throw std::invalid_argument("tensor: rank-0 shapes are not supported");
    for (int e : dims_)
      if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent in " + shape_str(dims_));
  }

  std::vector<int> dims_;
  std::shared_ptr<TensorStorage<S>> st_;
};

// ---------------------------------------------------------------- tape

template <class S>
class TapeT {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  // Seeds d(loss)/d(loss)=1 and replays the recorded operations in reverse
  // execution order, once each.
  void backward(TensorT<S> loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.dims()));
    loss.grad()[0] += S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() { steps_.clear(); }
  size_t size() const { return steps_.size(); }

  static TapeT*& current() {
    thread_local TapeT* cur = nullptr;
    return cur;
  }

  // RAII activation; ops record only while a tape is active on this thread.
  class Scope {
   public:
    explicit Scope(TapeT& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

 private:
  std::vector<std::function<void()>> steps_;
};

namespace detail {

template <class S>
bool taping(std::initializer_list<const TensorT<S>*> ins) {
  if (!TapeT<S>::current()) return false;
  for (const auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
void mark_and_record(TensorT<S>& out, std::function<void()> step) {
  out.set_requires_grad(true);
  TapeT<S>::current()->record(std::move(step));
}

inline void require_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a.dims(), b.dims(), "add");
  auto out = TensorT<S>::zeros(a.dims());
  const std::int64_t n = out.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const S* go = out.grad();
      const std::int64_t m = out.numel();
      if (a.requires_grad()) {
        S* ga = a.grad();
        for (std::int64_t i = 0; i < m; ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        S* gb = b.grad();
        for (std::int64_t i = 0; i < m; ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a.dims(), b.dims(), "sub");
  auto out = TensorT<S>::zeros(a.dims());
  const std::int64_t n = out.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const S* go = out.grad();
      const std::int64_t m = out.numel();
      if (a.requires_grad()) {
        S* ga = a.grad();
        for (std::int64_t i = 0; i < m; ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        S* gb = b.grad();
        for (std::int64_t i = 0; i < m; ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a.dims(), b.dims(), "mul");
  auto out = TensorT<S>::zeros(a.dims());
  const std::int64_t n = out.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const S* go = out.grad();
      const std::int64_t m = out.numel();
      if (a.requires_grad()) {
        S* ga = a.grad();
        const S* pb2 = b.data();
        for (std::int64_t i = 0; i < m; ++i) ga[i] += go[i] * pb2[i];
      }
      if (b.requires_grad()) {
        S* gb = b.grad();
        const S* pa2 = a.data();
        for (std::int64_t i = 0; i < m; ++i) gb[i] += go[i] * pa2[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a.dims(), b.dims(), "div");
  auto out = TensorT<S>::zeros(a.dims());
  const std::int64_t n = out.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const S* go = out.grad();
      const S* pa2 = a.data();
      const S* pb2 = b.data();
      const std::int64_t m = out.numel();
      if (a.requires_grad()) {
        S* ga = a.grad();
        for (std::int64_t i = 0; i < m; ++i) ga[i] += go[i] / pb2[i];
      }
      if (b.requires_grad()) {
        S* gb = b.grad();
        for (std::int64_t i = 0; i < m; ++i) gb[i] -= go[i] * pa2[i] / (pb2[i] * pb2[i]);
      }
    });
  }
  return out;
}

// Elementwise min/max route the gradient to the selected operand (ties to a).
template <class S>
TensorT<S> emin(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a.dims(), b.dims(), "emin");
  auto out = TensorT<S>::zeros(a.dims());
  const std::int64_t n = out.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] <= pb[i] ? pa[i] : pb[i];
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const S* go = out.grad();
      const S* pa2 = a.data();
      const S* pb2 = b.data();
      const std::int64_t m = out.numel();
      S* ga = a.requires_grad() ? a.grad() : nullptr;
      S* gb = b.requires_grad() ? b.grad() : nullptr;
      for (std::int64_t i = 0; i < m; ++i) {
        if (pa2[i] <= pb2[i]) {
          if (ga) ga[i] += go[i];
        } else if (gb) {
          gb[i] += go[i];
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> emax(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a.dims(), b.dims(), "emax");
  auto out = TensorT<S>::zeros(a.dims());
  const std::int64_t n = out.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] >= pb[i] ? pa[i] : pb[i];
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const S* go = out.grad();
      const S* pa2 = a.data();
      const S* pb2 = b.data();
      const std::int64_t m = out.numel();
      S* ga = a.requires_grad() ? a.grad() : nullptr;
      S* gb = b.requires_grad() ? b.grad() : nullptr;
      for (std::int64_t i = 0; i < m; ++i) {
        if (pa2[i] >= pb2[i]) {
          if (ga) ga[i] += go[i];
        } else if (gb) {
          gb[i] += go[i];
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& x, S c) {
  auto out = TensorT<S>::zeros(x.dims());
  const std::int64_t n = out.numel();
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] + c;
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      const std::int64_t m = out.numel();
      for (std::int64_t i = 0; i < m; ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> mul_scalar(const TensorT<S>& x, S c) {
  auto out = TensorT<S>::zeros(x.dims());
  const std::int64_t n = out.numel();
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, c]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      const std::int64_t m = out.numel();
      for (std::int64_t i = 0; i < m; ++i) gx[i] += go[i] * c;
    });
  }
  return out;
}

template <class S>
TensorT<S> relu(const TensorT<S>& x) {
  auto out = TensorT<S>::zeros(x.dims());
  const std::int64_t n = out.numel();
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > S(0) ? px[i] : S(0);
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const S* go = out.grad();
      const S* px2 = x.data();
      S* gx = x.grad();
      const std::int64_t m = out.numel();
      for (std::int64_t i = 0; i < m; ++i)
        if (px2[i] > S(0)) gx[i] += go[i];
    });
  }
  return out;
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  auto out = TensorT<S>::zeros(x.dims());
  const std::int64_t n = out.numel();
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double z = static_cast<double>(px[i]);
    // both branches avoid overflowing exp
    const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    po[i] = static_cast<S>(s);
  }
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const S* go = out.grad();
      const S* po2 = out.data();
      S* gx = x.grad();
      const std::int64_t m = out.numel();
      for (std::int64_t i = 0; i < m; ++i) gx[i] += go[i] * po2[i] * (S(1) - po2[i]);
    });
  }
  return out;
}

template <class S>
TensorT<S> abs_val(const TensorT<S>& x) {
  auto out = TensorT<S>::zeros(x.dims());
  const std::int64_t n = out.numel();
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] < S(0) ? -px[i] : px[i];
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const S* go = out.grad();
      const S* px2 = x.data();
      S* gx = x.grad();
      const std::int64_t m = out.numel();
      for (std::int64_t i = 0; i < m; ++i) gx[i] += px2[i] < S(0) ? -go[i] : go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- broadcasts

// p's shape must equal a trailing suffix of x's shape; p is added to every
// leading block. Covers bias rows and shared positional maps.
template <class S>
TensorT<S> add_bcast(const TensorT<S>& x, const TensorT<S>& p) {
  const auto& xd = x.dims();
  const auto& pd = p.dims();
  if (pd.size() > xd.size() || !std::equal(pd.rbegin(), pd.rend(), xd.rbegin()))
    throw std::invalid_argument("add_bcast: " + shape_str(pd) + " is not a suffix of " + shape_str(xd));
  auto out = TensorT<S>::zeros(xd);
  const std::int64_t pn = p.numel();
  const std::int64_t lead = x.numel() / pn;
  const S* px = x.data();
  const S* pp = p.data();
  S* po = out.data();
  for (std::int64_t l = 0; l < lead; ++l) {
    const std::int64_t off = l * pn;
    for (std::int64_t i = 0; i < pn; ++i) po[off + i] = px[off + i] + pp[i];
  }
  if (detail::taping<S>({&x, &p})) {
    detail::mark_and_record(out, [x, p, out, lead, pn]() mutable {
      const S* go = out.grad();
      if (x.requires_grad()) {
        S* gx = x.grad();
        const std::int64_t m = out.numel();
        for (std::int64_t i = 0; i < m; ++i) gx[i] += go[i];
      }
      if (p.requires_grad()) {
        S* gp = p.grad();
        for (std::int64_t l = 0; l < lead; ++l) {
          const std::int64_t off = l * pn;
          for (std::int64_t i = 0; i < pn; ++i) gp[i] += go[off + i];
        }
      }
    });
  }
  return out;
}

// s's shape must equal a leading prefix of x's shape; every trailing block of
// x is scaled by its s entry. Used for per-token modulation scores.
template <class S>
TensorT<S> mul_bcast_prefix(const TensorT<S>& x, const TensorT<S>& s) {
  const auto& xd = x.dims();
  const auto& sd = s.dims();
  if (sd.size() > xd.size() || !std::equal(sd.begin(), sd.end(), xd.begin()))
    throw std::invalid_argument("mul_bcast_prefix: " + shape_str(sd) + " is not a prefix of " + shape_str(xd));
  auto out = TensorT<S>::zeros(xd);
  const std::int64_t sn = s.numel();
  const std::int64_t inner = x.numel() / sn;
  const S* px = x.data();
  const S* ps = s.data();
  S* po = out.data();
  for (std::int64_t o = 0; o < sn; ++o) {
    const std::int64_t off = o * inner;
    const S sv = ps[o];
    for (std::int64_t i = 0; i < inner; ++i) po[off + i] = px[off + i] * sv;
  }
  if (detail::taping<S>({&x, &s})) {
    detail::mark_and_record(out, [x, s, out, sn, inner]() mutable {
      const S* go = out.grad();
      const S* px2 = x.data();
      const S* ps2 = s.data();
      if (x.requires_grad()) {
        S* gx = x.grad();
        for (std::int64_t o = 0; o < sn; ++o) {
          const std::int64_t off = o * inner;
          for (std::int64_t i = 0; i < inner; ++i) gx[off + i] += go[off + i] * ps2[o];
        }
      }
      if (s.requires_grad()) {
        S* gs = s.grad();
        for (std::int64_t o = 0; o < sn; ++o) {
          const std::int64_t off = o * inner;
          double acc = 0.0;
          for (std::int64_t i = 0; i < inner; ++i)
            acc += static_cast<double>(go[off + i]) * static_cast<double>(px2[off + i]);
          gs[o] += static_cast<S>(acc);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- reductions

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
  double acc = 0.0;
  const S* px = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
  auto out = TensorT<S>::scalar(static_cast<S>(acc));
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const S g = out.grad()[0];
      S* gx = x.grad();
      const std::int64_t m = x.numel();
      for (std::int64_t i = 0; i < m; ++i) gx[i] += g;
    });
  }
  return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& x) {
  const std::int64_t n = x.numel();
  double acc = 0.0;
  const S* px = x.data();
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
  auto out = TensorT<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, n]() mutable {
      const S g = out.grad()[0] / static_cast<S>(n);
      S* gx = x.grad();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <class S>
TensorT<S> sum_last(const TensorT<S>& x) {
  if (x.rank() < 2) throw std::invalid_argument("sum_last: need rank >= 2, got " + shape_str(x.dims()));
  std::vector<int> od(x.dims().begin(), x.dims().end() - 1);
  const std::int64_t k = x.dims().back();
  auto out = TensorT<S>::zeros(od);
  const std::int64_t rows = out.numel();
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < k; ++i) acc += static_cast<double>(px[r * k + i]);
    po[r] = static_cast<S>(acc);
  }
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, rows, k]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < k; ++i) gx[r * k + i] += go[r];
    });
  }
  return out;
}

// [B,L,d] -> [B,d], arithmetic mean over the token axis.
template <class S>
TensorT<S> mean_tokens(const TensorT<S>& x) {
  if (x.rank() != 3) throw std::invalid_argument("mean_tokens: need [B,L,d], got " + shape_str(x.dims()));
  const int B = x.dim(0), L = x.dim(1), d = x.dim(2);
  auto out = TensorT<S>::zeros({B, d});
  const S* px = x.data();
  S* po = out.data();
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int l = 0; l < L; ++l) acc += static_cast<double>(px[(static_cast<std::int64_t>(b) * L + l) * d + j]);
      po[b * d + j] = static_cast<S>(acc / L);
    }
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, B, L, d]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
          for (int j = 0; j < d; ++j)
            gx[(static_cast<std::int64_t>(b) * L + l) * d + j] += go[b * d + j] / static_cast<S>(L);
    });
  }
  return out;
}

// ---------------------------------------------------------------- layout ops

namespace detail {

inline std::vector<std::int64_t> row_major_strides(const std::vector<int>& dims) {
  std::vector<std::int64_t> s(dims.size(), 1);
  for (int i = static_cast<int>(dims.size()) - 2; i >= 0; --i)
    s[static_cast<size_t>(i)] = s[static_cast<size_t>(i) + 1] * dims[static_cast<size_t>(i) + 1];
  return s;
}

}  // namespace detail

template <class S>
TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r)
    throw std::invalid_argument("permute: order size " + std::to_string(perm.size()) +
                                " does not match rank of " + shape_str(x.dims()));
  std::vector<int> od(static_cast<size_t>(r));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int i = 0; i < r; ++i) {
    if (perm[static_cast<size_t>(i)] < 0 || perm[static_cast<size_t>(i)] >= r || seen[static_cast<size_t>(perm[static_cast<size_t>(i)])])
      throw std::invalid_argument("permute: invalid axis order");
    seen[static_cast<size_t>(perm[static_cast<size_t>(i)])] = true;
    od[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  }
  auto out = TensorT<S>::zeros(od);
  const auto in_strides = detail::row_major_strides(x.dims());
  // stride of output axis i in the input buffer
  std::vector<std::int64_t> gather(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) gather[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  const std::int64_t n = out.numel();
  const S* px = x.data();
  S* po = out.data();
  std::vector<int> idx(static_cast<size_t>(r), 0);
  std::int64_t src = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    po[o] = px[src];
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[static_cast<size_t>(ax)]++;
      src += gather[static_cast<size_t>(ax)];
      if (idx[static_cast<size_t>(ax)] < od[static_cast<size_t>(ax)]) break;
      src -= gather[static_cast<size_t>(ax)] * od[static_cast<size_t>(ax)];
      idx[static_cast<size_t>(ax)] = 0;
    }
  }
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, od, gather, r]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      const std::int64_t m = out.numel();
      std::vector<int> idx2(static_cast<size_t>(r), 0);
      std::int64_t src = 0;
      for (std::int64_t o = 0; o < m; ++o) {
        gx[src] += go[o];
        for (int ax = r - 1; ax >= 0; --ax) {
          idx2[static_cast<size_t>(ax)]++;
          src += gather[static_cast<size_t>(ax)];
          if (idx2[static_cast<size_t>(ax)] < od[static_cast<size_t>(ax)]) break;
          src -= gather[static_cast<size_t>(ax)] * od[static_cast<size_t>(ax)];
          idx2[static_cast<size_t>(ax)] = 0;
        }
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> slice(const TensorT<S>& x, int axis, int begin, int end) {
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(x.dims()));
  if (begin < 0 || end > x.dim(axis) || begin >= end)
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                ") invalid for extent " + std::to_string(x.dim(axis)));
  std::vector<int> od = x.dims();
  od[static_cast<size_t>(axis)] = end - begin;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t in_len = static_cast<std::int64_t>(x.dim(axis)) * inner;
  const std::int64_t out_len = static_cast<std::int64_t>(end - begin) * inner;

  auto out = TensorT<S>::zeros(od);
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(px + o * in_len + begin * inner, px + o * in_len + end * inner, po + o * out_len);
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, outer, inner, in_len, out_len, begin]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        S* dst = gx + o * in_len + begin * inner;
        const S* src = go + o * out_len;
        for (std::int64_t i = 0; i < out_len; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input list");
  const int r = xs[0].rank();
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
  std::vector<int> od = xs[0].dims();
  int total = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && x.dim(i) != od[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(x.dims()) + " vs " + shape_str(od));
    total += x.dim(axis);
  }
  od[static_cast<size_t>(axis)] = total;
  auto out = TensorT<S>::zeros(od);

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= od[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= od[static_cast<size_t>(i)];
  const std::int64_t out_len = static_cast<std::int64_t>(total) * inner;

  S* po = out.data();
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const std::int64_t in_len = static_cast<std::int64_t>(x.dim(axis)) * inner;
    const S* px = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(px + o * in_len, px + (o + 1) * in_len, po + o * out_len + off);
    off += in_len;
  }

  bool any_rg = false;
  for (const auto& x : xs)
    if (TapeT<S>::current() && x.requires_grad()) any_rg = true;
  if (any_rg) {
    detail::mark_and_record(out, [xs, out, outer, inner, out_len]() mutable {
      const S* go = out.grad();
      std::int64_t off2 = 0;
      for (auto& x : xs) {
        const std::int64_t len = x.numel() / outer;
        if (x.requires_grad()) {
          S* gx = x.grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            const S* src = go + o * out_len + off2;
            S* dst = gx + o * len;
            for (std::int64_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
        off2 += len;
      }
    });
  }
  return out;
}

// [B] columns -> [B,k]
template <class S>
TensorT<S> stack_last(const std::vector<TensorT<S>>& cols) {
  if (cols.empty()) throw std::invalid_argument("stack_last: empty input list");
  const std::int64_t B = cols[0].numel();
  const int k = static_cast<int>(cols.size());
  for (const auto& c : cols)
    if (c.rank() != 1 || c.numel() != B)
      throw std::invalid_argument("stack_last: all inputs must be equal-length vectors");
  auto out = TensorT<S>::zeros({static_cast<int>(B), k});
  S* po = out.data();
  for (int j = 0; j < k; ++j) {
    const S* pc = cols[static_cast<size_t>(j)].data();
    for (std::int64_t b = 0; b < B; ++b) po[b * k + j] = pc[b];
  }
  bool any_rg = false;
  for (const auto& c : cols)
    if (TapeT<S>::current() && c.requires_grad()) any_rg = true;
  if (any_rg) {
    detail::mark_and_record(out, [cols, out, B, k]() mutable {
      const S* go = out.grad();
      for (int j = 0; j < k; ++j) {
        auto& c = cols[static_cast<size_t>(j)];
        if (!c.requires_grad()) continue;
        S* gc = c.grad();
        for (std::int64_t b = 0; b < B; ++b) gc[b] += go[b * k + j];
      }
    });
  }
  return out;
}

// column j of [B,k] -> [B]
template <class S>
TensorT<S> unstack_last(const TensorT<S>& x, int j) {
  if (x.rank() != 2) throw std::invalid_argument("unstack_last: need rank 2, got " + shape_str(x.dims()));
  const int B = x.dim(0), k = x.dim(1);
  if (j < 0 || j >= k) throw std::invalid_argument("unstack_last: column out of range");
  auto out = TensorT<S>::zeros({B});
  const S* px = x.data();
  S* po = out.data();
  for (int b = 0; b < B; ++b) po[b] = px[b * k + j];
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, B, k, j]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      for (int b = 0; b < B; ++b) gx[b * k + j] += go[b];
    });
  }
  return out;
}

// ---------------------------------------------------------------- matmul

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <class S>
void mm_acc_nn(const S* A, const S* B, S* C, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const S* a = A + i * k;
    S* c = C + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const S av = a[kk];
      const S* b = B + kk * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class S>
void mm_acc_nt(const S* A, const S* B, S* C, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const S* a = A + i * k;
    S* c = C + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const S* b = B + j * k;
      S acc = S(0);
      for (std::int64_t kk = 0; kk < k; ++kk) acc += a[kk] * b[kk];
      c[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <class S>
void mm_acc_tn(const S* A, const S* B, S* C, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const S* a = A + kk * m;
    const S* b = B + kk * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const S av = a[i];
      S* c = C + i * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

template <class S>
TensorT<S> mm(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = TensorT<S>::zeros({static_cast<int>(m), static_cast<int>(n)});
  detail::mm_acc_nn(a.data(), b.data(), out.data(), m, k, n);
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out, m, k, n]() mutable {
      const S* go = out.grad();
      if (a.requires_grad()) detail::mm_acc_nt(go, b.data(), a.grad(), m, n, k);
      if (b.requires_grad()) detail::mm_acc_tn(a.data(), go, b.grad(), k, m, n);
    });
  }
  return out;
}

// x:[..., din] treated as [N, din]; returns x*W (+bias), shape [..., dout].
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias) {
  if (w.rank() != 2 || x.dims().back() != w.dim(0))
    throw std::invalid_argument("linear: incompatible shapes " + shape_str(x.dims()) + " x " + shape_str(w.dims()));
  const std::int64_t din = w.dim(0), dout = w.dim(1);
  const std::int64_t N = x.numel() / din;
  std::vector<int> od = x.dims();
  od.back() = static_cast<int>(dout);
  auto out = TensorT<S>::zeros(od);
  detail::mm_acc_nn(x.data(), w.data(), out.data(), N, din, dout);
  if (bias.defined()) {
    if (bias.numel() != dout) throw std::invalid_argument("linear: bias shape " + shape_str(bias.dims()));
    S* po = out.data();
    const S* pb = bias.data();
    for (std::int64_t r = 0; r < N; ++r)
      for (std::int64_t j = 0; j < dout; ++j) po[r * dout + j] += pb[j];
  }
  if (detail::taping<S>({&x, &w, &bias})) {
    detail::mark_and_record(out, [x, w, bias, out, N, din, dout]() mutable {
      const S* go = out.grad();
      if (x.requires_grad()) detail::mm_acc_nt(go, w.data(), x.grad(), N, dout, din);
      if (w.requires_grad()) detail::mm_acc_tn(x.data(), go, w.grad(), din, N, dout);
      if (bias.defined() && bias.requires_grad()) {
        S* gb = bias.grad();
        for (std::int64_t j = 0; j < dout; ++j) {
          double acc = 0.0;
          for (std::int64_t r = 0; r < N; ++r) acc += static_cast<double>(go[r * dout + j]);
          gb[j] += static_cast<S>(acc);
        }
      }
    });
  }
  return out;
}

// Batched matmul: a:[B,m,k], b:[B,k,n] (or [B,n,k] with trans_b).
template <class S>
TensorT<S> bmm(const TensorT<S>& a, const TensorT<S>& b, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
  const std::int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::int64_t n = trans_b ? b.dim(1) : b.dim(2);
  const std::int64_t bk = trans_b ? b.dim(2) : b.dim(1);
  if (bk != k)
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
  auto out = TensorT<S>::zeros({static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)});
  for (std::int64_t i = 0; i < B; ++i) {
    const S* pa = a.data() + i * m * k;
    const S* pb = b.data() + i * k * n;
    S* po = out.data() + i * m * n;
    if (trans_b)
      detail::mm_acc_nt(pa, pb, po, m, k, n);
    else
      detail::mm_acc_nn(pa, pb, po, m, k, n);
  }
  if (detail::taping<S>({&a, &b})) {
    detail::mark_and_record(out, [a, b, out, B, m, k, n, trans_b]() mutable {
      for (std::int64_t i = 0; i < B; ++i) {
        const S* go = out.grad() + i * m * n;
        const S* pa = a.data() + i * m * k;
        const S* pb = b.data() + i * k * n;
        if (a.requires_grad()) {
          S* ga = a.grad() + i * m * k;
          if (trans_b)
            detail::mm_acc_nn(go, pb, ga, m, n, k);
          else
            detail::mm_acc_nt(go, pb, ga, m, n, k);
        }
        if (b.requires_grad()) {
          S* gb = b.grad() + i * k * n;
          if (trans_b)
            detail::mm_acc_tn(go, pa, gb, n, m, k);
          else
            detail::mm_acc_tn(pa, go, gb, k, m, n);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- softmax

// Shift-invariant softmax along `axis`; sums accumulate in double.
template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.dims()));
  auto out = TensorT<S>::zeros(x.dims());
  std::int64_t outer = 1, inner = 1;
  const std::int64_t len = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = -1e300;
      for (std::int64_t i = 0; i < len; ++i) mx = std::max(mx, static_cast<double>(px[base + i * inner]));
      double sum = 0.0;
      for (std::int64_t i = 0; i < len; ++i) sum += std::exp(static_cast<double>(px[base + i * inner]) - mx);
      for (std::int64_t i = 0; i < len; ++i)
        po[base + i * inner] = static_cast<S>(std::exp(static_cast<double>(px[base + i * inner]) - mx) / sum);
    }
  }
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, outer, inner, len]() mutable {
      const S* go = out.grad();
      const S* po2 = out.data();
      S* gx = x.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::int64_t i = 0; i < len; ++i)
            dot += static_cast<double>(go[base + i * inner]) * static_cast<double>(po2[base + i * inner]);
          for (std::int64_t i = 0; i < len; ++i)
            gx[base + i * inner] += po2[base + i * inner] * (go[base + i * inner] - static_cast<S>(dot));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- normalization

// Normalizes the last axis to zero mean / unit variance, then applies the
// affine pair. eps guards zero-variance slices.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias,
                      double eps = 1e-5) {
  const std::int64_t d = x.dims().back();
  if (gain.numel() != d || bias.numel() != d)
    throw std::invalid_argument("layer_norm: affine shape mismatch for " + shape_str(x.dims()));
  const std::int64_t rows = x.numel() / d;
  auto out = TensorT<S>::zeros(x.dims());
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * 2);

  const S* px = x.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += static_cast<double>(xr[j]);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = static_cast<double>(xr[j]) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(r) * 2] = mu;
    (*stats)[static_cast<size_t>(r) * 2 + 1] = inv;
    S* outr = po + r * d;
    for (std::int64_t j = 0; j < d; ++j)
      outr[j] = static_cast<S>((static_cast<double>(xr[j]) - mu) * inv) * pg[j] + pb[j];
  }
  if (detail::taping<S>({&x, &gain, &bias})) {
    detail::mark_and_record(out, [x, gain, bias, out, stats, rows, d]() mutable {
      const S* go = out.grad();
      const S* px2 = x.data();
      const S* pg2 = gain.data();
      S* gx = x.requires_grad() ? x.grad() : nullptr;
      S* gg = gain.requires_grad() ? gain.grad() : nullptr;
      S* gb = bias.requires_grad() ? bias.grad() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const double mu = (*stats)[static_cast<size_t>(r) * 2];
        const double inv = (*stats)[static_cast<size_t>(r) * 2 + 1];
        const S* xr = px2 + r * d;
        const S* gor = go + r * d;
        double s1 = 0.0, s2 = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          const double xh = (static_cast<double>(xr[j]) - mu) * inv;
          const double dy = static_cast<double>(gor[j]) * static_cast<double>(pg2[j]);
          s1 += dy;
          s2 += dy * xh;
          if (gg) gg[j] += static_cast<S>(static_cast<double>(gor[j]) * xh);
          if (gb) gb[j] += gor[j];
        }
        if (gx) {
          S* gxr = gx + r * d;
          for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (static_cast<double>(xr[j]) - mu) * inv;
            const double dy = static_cast<double>(gor[j]) * static_cast<double>(pg2[j]);
            gxr[j] += static_cast<S>(inv * (dy - s1 / static_cast<double>(d) - xh * s2 / static_cast<double>(d)));
          }
        }
      }
    });
  }
  return out;
}

template <class S>
struct BnStateT {
  TensorT<S> gamma, beta;               // learned affine
  TensorT<S> running_mean, running_var; // buffers, updated in training mode only
  double momentum = 0.1;
  double eps = 1e-5;
};

// x:[B,C,H,W]. training=true normalizes with batch statistics and updates the
// running buffers; training=false (frozen) uses the stored statistics only.
template <class S>
TensorT<S> batch_norm(const TensorT<S>& x, BnStateT<S>& st, bool training) {
  if (x.rank() != 4) throw std::invalid_argument("batch_norm: need [B,C,H,W], got " + shape_str(x.dims()));
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  if (st.gamma.numel() != C)
    throw std::invalid_argument("batch_norm: state has " + std::to_string(st.gamma.numel()) +
                                " channels, input has " + std::to_string(C));
  auto out = TensorT<S>::zeros(x.dims());
  const std::int64_t n = B * HW;
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(C) * 2);

  const S* px = x.data();
  S* po = out.data();
  const S* pg = st.gamma.data();
  const S* pb = st.beta.data();
  for (std::int64_t c = 0; c < C; ++c) {
    double mu, inv;
    if (training) {
      double m = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const S* base = px + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) m += static_cast<double>(base[i]);
      }
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const S* base = px + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          const double d0 = static_cast<double>(base[i]) - m;
          var += d0 * d0;
        }
      }
      var /= static_cast<double>(n);
      // unbiased estimate feeds the running buffer, biased one normalizes
      const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
      st.running_mean.data()[c] =
          static_cast<S>((1.0 - st.momentum) * static_cast<double>(st.running_mean.data()[c]) + st.momentum * m);
      st.running_var.data()[c] =
          static_cast<S>((1.0 - st.momentum) * static_cast<double>(st.running_var.data()[c]) + st.momentum * unbiased);
      mu = m;
      inv = 1.0 / std::sqrt(var + st.eps);
    } else {
      mu = static_cast<double>(st.running_mean.data()[c]);
      inv = 1.0 / std::sqrt(static_cast<double>(st.running_var.data()[c]) + st.eps);
    }
    (*stats)[static_cast<size_t>(c) * 2] = mu;
    (*stats)[static_cast<size_t>(c) * 2 + 1] = inv;
    for (std::int64_t b = 0; b < B; ++b) {
      const S* base = px + (b * C + c) * HW;
      S* obase = po + (b * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i)
        obase[i] = static_cast<S>((static_cast<double>(base[i]) - mu) * inv) * pg[c] + pb[c];
    }
  }
  TensorT<S> gamma = st.gamma, beta = st.beta;
  if (detail::taping<S>({&x, &gamma, &beta})) {
    detail::mark_and_record(out, [x, gamma, beta, out, stats, B, C, HW, n, training]() mutable {
      const S* go = out.grad();
      const S* px2 = x.data();
      const S* pg2 = gamma.data();
      S* gx = x.requires_grad() ? x.grad() : nullptr;
      S* gg = gamma.requires_grad() ? gamma.grad() : nullptr;
      S* gb = beta.requires_grad() ? beta.grad() : nullptr;
      for (std::int64_t c = 0; c < C; ++c) {
        const double mu = (*stats)[static_cast<size_t>(c) * 2];
        const double inv = (*stats)[static_cast<size_t>(c) * 2 + 1];
        double s1 = 0.0, s2 = 0.0, sg = 0.0, sb = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
          const S* base = px2 + (b * C + c) * HW;
          const S* gbase = go + (b * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) {
            const double xh = (static_cast<double>(base[i]) - mu) * inv;
            const double g0 = static_cast<double>(gbase[i]);
            sg += g0 * xh;
            sb += g0;
            s1 += g0 * static_cast<double>(pg2[c]);
            s2 += g0 * static_cast<double>(pg2[c]) * xh;
          }
        }
        if (gg) gg[c] += static_cast<S>(sg);
        if (gb) gb[c] += static_cast<S>(sb);
        if (gx) {
          for (std::int64_t b = 0; b < B; ++b) {
            const S* base = px2 + (b * C + c) * HW;
            const S* gbase = go + (b * C + c) * HW;
            S* gxb = gx + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
              const double xh = (static_cast<double>(base[i]) - mu) * inv;
              const double dy = static_cast<double>(gbase[i]) * static_cast<double>(pg2[c]);
              if (training)
                gxb[i] += static_cast<S>(inv * (dy - s1 / static_cast<double>(n) - xh * s2 / static_cast<double>(n)));
              else
                gxb[i] += static_cast<S>(inv * dy);  // stored stats are constants
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- conv2d

enum class PadMode { kZero, kWrap };

// x:[B,Cin,H,W], w:[Cout,Cin,kh,kw]. Output H' = (H + 2 pad - kh)/stride + 1.
// kWrap indexes the input cyclically (used by the shift-covariance tests).
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias, int stride,
                  int pad, PadMode pad_mode = PadMode::kZero) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument("conv2d: need x[B,C,H,W], w[Co,Ci,kh,kw], got " + shape_str(x.dims()) +
                                " and " + shape_str(w.dims()));
  const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Ci)
    throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.dims()) + " vs " + shape_str(w.dims()));
  if (stride < 1 || pad < 0 || kh > H + 2 * pad || kw > W + 2 * pad)
    throw std::invalid_argument("conv2d: invalid geometry (k=" + std::to_string(kh) + "x" + std::to_string(kw) +
                                ", stride=" + std::to_string(stride) + ", pad=" + std::to_string(pad) +
                                ", input=" + shape_str(x.dims()) + ")");
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  const std::int64_t K = static_cast<std::int64_t>(Ci) * kh * kw;
  const std::int64_t N = static_cast<std::int64_t>(B) * Ho * Wo;

  // column p of the patch matrix holds the receptive field of output pixel p
  auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(K * N), S(0));
  const S* px = x.data();
  for (int b = 0; b < B; ++b) {
    for (int ci = 0; ci < Ci; ++ci) {
      for (int i = 0; i < kh; ++i) {
        for (int j = 0; j < kw; ++j) {
          const std::int64_t row = (static_cast<std::int64_t>(ci) * kh + i) * kw + j;
          S* dst = cols->data() + row * N + static_cast<std::int64_t>(b) * Ho * Wo;
          const S* src = px + (static_cast<std::int64_t>(b) * Ci + ci) * H * W;
          for (int ho = 0; ho < Ho; ++ho) {
            int hi = ho * stride - pad + i;
            if (pad_mode == PadMode::kWrap) hi = ((hi % H) + H) % H;
            if (hi < 0 || hi >= H) continue;  // zero padding
            for (int wo = 0; wo < Wo; ++wo) {
              int wi = wo * stride - pad + j;
              if (pad_mode == PadMode::kWrap) wi = ((wi % W) + W) % W;
              if (wi < 0 || wi >= W) continue;
              dst[ho * Wo + wo] = src[hi * W + wi];
            }
          }
        }
      }
    }
  }

  std::vector<S> out_mat(static_cast<size_t>(Co * N), S(0));
  detail::mm_acc_nn(w.data(), cols->data(), out_mat.data(), Co, K, N);

  auto out = TensorT<S>::zeros({B, Co, Ho, Wo});
  S* po = out.data();
  const std::int64_t HoWo = static_cast<std::int64_t>(Ho) * Wo;
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Co; ++co)
      std::copy(out_mat.data() + co * N + b * HoWo, out_mat.data() + co * N + (b + 1) * HoWo,
                po + (static_cast<std::int64_t>(b) * Co + co) * HoWo);
  if (bias.defined()) {
    if (bias.numel() != Co) throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.dims()));
    const S* pb = bias.data();
    for (int b = 0; b < B; ++b)
      for (int co = 0; co < Co; ++co) {
        S* base = po + (static_cast<std::int64_t>(b) * Co + co) * HoWo;
        for (std::int64_t i = 0; i < HoWo; ++i) base[i] += pb[co];
      }
  }

  if (detail::taping<S>({&x, &w, &bias})) {
    detail::mark_and_record(out, [x, w, bias, out, cols, B, Ci, H, W, Co, kh, kw, stride, pad, pad_mode,
                                  Ho, Wo, K, N, HoWo]() mutable {
      // gather dL/dout back into matrix layout
      std::vector<S> go_mat(static_cast<size_t>(Co * N));
      const S* go = out.grad();
      for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co)
          std::copy(go + (static_cast<std::int64_t>(b) * Co + co) * HoWo,
                    go + (static_cast<std::int64_t>(b) * Co + co + 1) * HoWo,
                    go_mat.data() + co * N + b * HoWo);

      if (w.requires_grad()) detail::mm_acc_nt(go_mat.data(), cols->data(), w.grad(), Co, N, K);
      if (bias.defined() && bias.requires_grad()) {
        S* gb = bias.grad();
        for (int co = 0; co < Co; ++co) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < N; ++i) acc += static_cast<double>(go_mat[static_cast<size_t>(co * N + i)]);
          gb[co] += static_cast<S>(acc);
        }
      }
      if (x.requires_grad()) {
        std::vector<S> gcols(static_cast<size_t>(K * N), S(0));
        detail::mm_acc_tn(w.data(), go_mat.data(), gcols.data(), K, Co, N);
        S* gx = x.grad();
        for (int b = 0; b < B; ++b) {
          for (int ci = 0; ci < Ci; ++ci) {
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                const std::int64_t row = (static_cast<std::int64_t>(ci) * kh + i) * kw + j;
                const S* src = gcols.data() + row * N + static_cast<std::int64_t>(b) * HoWo;
                S* dst = gx + (static_cast<std::int64_t>(b) * Ci + ci) * H * W;
                for (int ho = 0; ho < Ho; ++ho) {
                  int hi = ho * stride - pad + i;
                  if (pad_mode == PadMode::kWrap) hi = ((hi % H) + H) % H;
                  if (hi < 0 || hi >= H) continue;
                  for (int wo = 0; wo < Wo; ++wo) {
                    int wi = wo * stride - pad + j;
                    if (pad_mode == PadMode::kWrap) wi = ((wi % W) + W) % W;
                    if (wi < 0 || wi >= W) continue;
                    dst[hi * W + wi] += src[ho * Wo + wo];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- dropout

// Inverted dropout; identity when not training or p == 0.
template <class S>
TensorT<S> dropout(const TensorT<S>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  auto mask = std::make_shared<std::vector<S>>(static_cast<size_t>(x.numel()));
  const S keep_inv = static_cast<S>(1.0 / (1.0 - p));
  for (auto& m : *mask) m = rng.uniform() < p ? S(0) : keep_inv;
  auto out = TensorT<S>::zeros(x.dims());
  const S* px = x.data();
  S* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * (*mask)[static_cast<size_t>(i)];
  if (detail::taping<S>({&x})) {
    detail::mark_and_record(out, [x, out, mask]() mutable {
      const S* go = out.grad();
      S* gx = x.grad();
      const std::int64_t m = out.numel();
      for (std::int64_t i = 0; i < m; ++i) gx[i] += go[i] * (*mask)[static_cast<size_t>(i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------- readouts

// Expectation of the grid x (column) coordinate under P:[B, gh*gw].
// The double-sum accumulates in 64-bit, y outer / x inner, so the result is
// bit-identical to a brute-force oracle evaluating the same order.
template <class S>
TensorT<S> soft_argmax_x(const TensorT<S>& p, int gh, int gw) {
  if (p.rank() != 2 || p.dim(1) != gh * gw)
    throw std::invalid_argument("soft_argmax_x: map shape " + shape_str(p.dims()) + " does not match grid " +
                                std::to_string(gh) + "x" + std::to_string(gw));
  const int B = p.dim(0);
  auto out = TensorT<S>::zeros({B});
  const S* pp = p.data();
  S* po = out.data();
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x)
        acc += static_cast<double>(pp[static_cast<std::int64_t>(b) * gh * gw + y * gw + x]) * static_cast<double>(x);
    po[b] = static_cast<S>(acc);
  }
  if (detail::taping<S>({&p})) {
    detail::mark_and_record(out, [p, out, B, gh, gw]() mutable {
      const S* go = out.grad();
      S* gp = p.grad();
      for (int b = 0; b < B; ++b)
        for (int y = 0; y < gh; ++y)
          for (int x = 0; x < gw; ++x)
            gp[static_cast<std::int64_t>(b) * gh * gw + y * gw + x] += go[b] * static_cast<S>(x);
    });
  }
  return out;
}

template <class S>
TensorT<S> soft_argmax_y(const TensorT<S>& p, int gh, int gw) {
  if (p.rank() != 2 || p.dim(1) != gh * gw)
    throw std::invalid_argument("soft_argmax_y: map shape " + shape_str(p.dims()) + " does not match grid " +
                                std::to_string(gh) + "x" + std::to_string(gw));
  const int B = p.dim(0);
  auto out = TensorT<S>::zeros({B});
  const S* pp = p.data();
  S* po = out.data();
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x)
        acc += static_cast<double>(pp[static_cast<std::int64_t>(b) * gh * gw + y * gw + x]) * static_cast<double>(y);
    po[b] = static_cast<S>(acc);
  }
  if (detail::taping<S>({&p})) {
    detail::mark_and_record(out, [p, out, B, gh, gw]() mutable {
      const S* go = out.grad();
      S* gp = p.grad();
      for (int b = 0; b < B; ++b)
        for (int y = 0; y < gh; ++y)
          for (int x = 0; x < gw; ++x)
            gp[static_cast<std::int64_t>(b) * gh * gw + y * gw + x] += go[b] * static_cast<S>(y);
    });
  }
  return out;
}

// Per-sample binary cross-entropy from logits, numerically stable at any
// logit magnitude: max(z,0) - z*y + log(1 + exp(-|z|)).
template <class S>
TensorT<S> bce_with_logits(const TensorT<S>& z, const TensorT<S>& y) {
  detail::require_same_shape(z.dims(), y.dims(), "bce_with_logits");
  auto out = TensorT<S>::zeros(z.dims());
  const std::int64_t n = z.numel();
  const S* pz = z.data();
  const S* py = y.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double zi = static_cast<double>(pz[i]);
    const double yi = static_cast<double>(py[i]);
    po[i] = static_cast<S>(std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi))));
  }
  if (detail::taping<S>({&z})) {
    detail::mark_and_record(out, [z, y, out]() mutable {
      const S* go = out.grad();
      const S* pz2 = z.data();
      const S* py2 = y.data();
      S* gz = z.grad();
      const std::int64_t m = out.numel();
      for (std::int64_t i = 0; i < m; ++i) {
        const double zi = static_cast<double>(pz2[i]);
        const double s = zi >= 0.0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
        gz[i] += go[i] * static_cast<S>(s - static_cast<double>(py2[i]));
      }
    });
  }
  return out;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using BnState = BnStateT<float>;

}  // namespace stark
