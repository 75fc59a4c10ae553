#include "nvrc/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#include "nvrc/common.hpp"

namespace nvrc {

struct TensorAccess {
  template <typename S>
  static const std::shared_ptr<TensorData<S>>& data(const Tensor<S>& t) {
    return t.data_;
  }
  template <typename S>
  static void bind(Tensor<S>& t, uint64_t tape_id, int64_t node) {
    t.tape_id_ = tape_id;
    t.node_ = node;
  }
  template <typename S>
  static Tensor<S> share(const Tensor<S>& src) {
    Tensor<S> t;
    t.data_ = src.data_;
    return t;
  }
};

namespace {

std::atomic<uint64_t> g_tape_counter{1};

template <typename S>
Tape<S>*& active_slot() {
  static thread_local Tape<S>* p = nullptr;
  return p;
}

template <typename S>
int64_t node_on(const Tensor<S>& t, const Tape<S>* tp) {
  return (tp != nullptr && t.defined() && t.tape_id() == tp->id()) ? t.node() : -1;
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

// Per-out-dim strides into two broadcast operands; 0 where the operand's dim
// has size 1 (or is missing) while the output dim is larger.
struct BcPlan {
  std::vector<int64_t> shape;
  std::vector<int64_t> sa, sb;
};

BcPlan broadcast_plan(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
  const size_t rank = std::max(a.size(), b.size());
  BcPlan p;
  p.shape.resize(rank);
  p.sa.assign(rank, 0);
  p.sb.assign(rank, 0);
  const auto sta = shape_strides(a);
  const auto stb = shape_strides(b);
  for (size_t d = 0; d < rank; ++d) {
    const bool ha = d >= rank - a.size();
    const bool hb = d >= rank - b.size();
    const int64_t ad = ha ? a[d - (rank - a.size())] : 1;
    const int64_t bd = hb ? b[d - (rank - b.size())] : 1;
    check(ad == bd || ad == 1 || bd == 1,
          "broadcast mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
    p.shape[d] = std::max(ad, bd);
    if (ha && ad > 1) p.sa[d] = sta[d - (rank - a.size())];
    if (hb && bd > 1) p.sb[d] = stb[d - (rank - b.size())];
  }
  return p;
}

// Iterates the output linear index together with the two mapped operand
// indices, maintained incrementally.
template <typename F>
void for_each_bc(const std::vector<int64_t>& shape, const std::vector<int64_t>& sa,
                 const std::vector<int64_t>& sb, F&& fn) {
  const int64_t n = shape_numel(shape);
  const int64_t rank = static_cast<int64_t>(shape.size());
  std::vector<int64_t> coord(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (int64_t d = rank - 1; d >= 0; --d) {
      ++coord[d];
      ia += sa[d];
      ib += sb[d];
      if (coord[d] < shape[d]) break;
      ia -= sa[d] * shape[d];
      ib -= sb[d] * shape[d];
      coord[d] = 0;
    }
  }
}

}  // namespace

template <typename S>
Tensor<S>::Tensor(std::vector<int64_t> shape, S fill) {
  const int64_t n = shape_numel(shape);
  check(n >= 0, "negative tensor extent " + shape_to_string(shape));
  data_ = std::make_shared<TensorData<S>>();
  data_->shape = std::move(shape);
  data_->v.assign(static_cast<size_t>(n), fill);
}

template <typename S>
Tensor<S>::Tensor(std::vector<int64_t> shape, std::vector<S> values) {
  check(shape_numel(shape) == static_cast<int64_t>(values.size()),
        "value count does not match shape " + shape_to_string(shape));
  data_ = std::make_shared<TensorData<S>>();
  data_->shape = std::move(shape);
  data_->v = std::move(values);
}

template <typename S>
S Tensor<S>::item() const {
  check(defined() && numel() == 1, "item() needs a one-element tensor");
  return data_->v[0];
}

template <typename S>
Tape<S>::Tape() : id_(g_tape_counter.fetch_add(1)) {
  prev_ = active_slot<S>();
  active_slot<S>() = this;
}

template <typename S>
Tape<S>::~Tape() {
  active_slot<S>() = prev_;
}

template <typename S>
Tape<S>* Tape<S>::active() {
  return active_slot<S>();
}

template <typename S>
void Tape<S>::watch(Tensor<S>& t) {
  check(t.defined(), "watch() on an undefined tensor");
  if (t.tape_id_ == id_ && t.node_ >= 0) return;
  t.tape_id_ = id_;
  t.node_ = record(t.numel(), nullptr);
}

template <typename S>
int64_t Tape<S>::record(int64_t numel, BackFn back) {
  nodes_.push_back(Node{numel, std::move(back)});
  return static_cast<int64_t>(nodes_.size()) - 1;
}

template <typename S>
std::span<S> Tape<S>::grad_buffer(int64_t node, int64_t numel) {
  if (static_cast<size_t>(node) >= grads_.size()) grads_.resize(nodes_.size());
  auto& g = grads_[node];
  if (g.empty()) g.assign(static_cast<size_t>(numel), S(0));
  return std::span<S>(g);
}

template <typename S>
void Tape<S>::backward(const Tensor<S>& loss) {
  check(!ran_backward_, "backward() ran twice on one tape");
  check(loss.defined() && loss.tape_id() == id_ && loss.node() >= 0,
        "backward() loss is not tracked on this tape");
  check(loss.numel() == 1, "backward() needs a scalar loss");
  ran_backward_ = true;
  grads_.resize(nodes_.size());
  grads_[loss.node()].assign(1, S(1));
  for (int64_t i = loss.node(); i >= 0; --i) {
    const auto& g = grads_[i];
    if (g.empty() || !nodes_[i].back) continue;
    nodes_[i].back(std::span<const S>(g), *this);
  }
}

template <typename S>
std::span<const S> Tape<S>::grad(const Tensor<S>& t) const {
  if (!t.defined() || t.tape_id() != id_ || t.node() < 0) return {};
  if (static_cast<size_t>(t.node()) >= grads_.size()) return {};
  return std::span<const S>(grads_[t.node()]);
}

namespace {

// dfdx receives (x, y) where y = f(x).
template <typename S, typename F, typename D>
Tensor<S> ew_unary(const Tensor<S>& a, F f, D dfdx) {
  const auto& av = a.values();
  std::vector<S> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tensor<S> r(a.shape(), std::move(out));
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  if (na >= 0) {
    auto ad = TensorAccess::data(a);
    auto rd = TensorAccess::data(r);
    const int64_t n = r.numel();
    const int64_t id = tp->record(n, [ad, rd, na, n, dfdx](std::span<const S> gy, Tape<S>& tape) {
      auto ga = tape.grad_buffer(na, n);
      for (int64_t i = 0; i < n; ++i) ga[i] += dfdx(ad->v[i], rd->v[i]) * gy[i];
    });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

// dab receives (a, b, gy) and adds into the two gradient slots.
template <typename S, typename F, typename D>
Tensor<S> ew_binary(const Tensor<S>& a, const Tensor<S>& b, F f, D dab) {
  const BcPlan plan = broadcast_plan(a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(static_cast<size_t>(shape_numel(plan.shape)));
  for_each_bc(plan.shape, plan.sa, plan.sb,
              [&](int64_t i, int64_t ia, int64_t ib) { out[i] = f(av[ia], bv[ib]); });
  Tensor<S> r(plan.shape, std::move(out));
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  const int64_t nb = node_on(b, tp);
  if (na >= 0 || nb >= 0) {
    auto ad = TensorAccess::data(a);
    auto bd = TensorAccess::data(b);
    const int64_t an = a.numel(), bn = b.numel();
    const int64_t id = tp->record(
        r.numel(), [plan, ad, bd, na, nb, an, bn, dab](std::span<const S> gy, Tape<S>& tape) {
          std::span<S> ga, gb;
          if (na >= 0) ga = tape.grad_buffer(na, an);
          if (nb >= 0) gb = tape.grad_buffer(nb, bn);
          for_each_bc(plan.shape, plan.sa, plan.sb, [&](int64_t i, int64_t ia, int64_t ib) {
            S da = 0, db = 0;
            dab(ad->v[ia], bd->v[ib], gy[i], da, db);
            if (na >= 0) ga[ia] += da;
            if (nb >= 0) gb[ib] += db;
          });
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

// Movement ops share one pattern: out[i] = in[map(i)] with map expressed as
// per-out-dim strides into the input plus a base offset.
template <typename S>
Tensor<S> gather_op(const Tensor<S>& a, std::vector<int64_t> out_shape,
                    std::vector<int64_t> in_strides, int64_t base) {
  const auto& av = a.values();
  std::vector<S> out(static_cast<size_t>(shape_numel(out_shape)));
  const std::vector<int64_t> zero(out_shape.size(), 0);
  for_each_bc(out_shape, in_strides, zero,
              [&](int64_t i, int64_t ia, int64_t) { out[i] = av[base + ia]; });
  Tensor<S> r(out_shape, std::move(out));
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  if (na >= 0) {
    const int64_t an = a.numel();
    const int64_t id = tp->record(
        r.numel(),
        [out_shape, in_strides, zero, na, an, base](std::span<const S> gy, Tape<S>& tape) {
          auto ga = tape.grad_buffer(na, an);
          for_each_bc(out_shape, in_strides, zero,
                      [&](int64_t i, int64_t ia, int64_t) { ga[base + ia] += gy[i]; });
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return ew_binary(
      a, b, [](S x, S y) { return x + y; },
      [](S, S, S gy, S& da, S& db) {
        da = gy;
        db = gy;
      });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return ew_binary(
      a, b, [](S x, S y) { return x - y; },
      [](S, S, S gy, S& da, S& db) {
        da = gy;
        db = -gy;
      });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return ew_binary(
      a, b, [](S x, S y) { return x * y; },
      [](S x, S y, S gy, S& da, S& db) {
        da = y * gy;
        db = x * gy;
      });
}

template <typename S>
Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b) {
  return ew_binary(
      a, b, [](S x, S y) { return x / y; },
      [](S x, S y, S gy, S& da, S& db) {
        da = gy / y;
        db = -x / (y * y) * gy;
      });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
  const S cs = static_cast<S>(c);
  return ew_unary(
      a, [cs](S x) { return x + cs; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c) {
  const S cs = static_cast<S>(c);
  return ew_unary(
      a, [cs](S x) { return x * cs; }, [cs](S, S) { return cs; });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return ew_unary(
      a, [](S x) { return static_cast<S>(std::exp(static_cast<double>(x))); },
      [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return ew_unary(
      a, [](S x) { return static_cast<S>(std::log(static_cast<double>(x))); },
      [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return ew_unary(
      a, [](S x) { return static_cast<S>(std::sqrt(static_cast<double>(x))); },
      [](S, S y) { return static_cast<S>(0.5) / y; });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  return ew_unary(
      a, [](S x) { return static_cast<S>(std::tanh(static_cast<double>(x))); },
      [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return ew_unary(
      a, [](S x) { return x < S(0) ? -x : x; },
      [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <typename S>
Tensor<S> pow_scalar(const Tensor<S>& a, double p) {
  return ew_unary(
      a, [p](S x) { return static_cast<S>(std::pow(static_cast<double>(x), p)); },
      [p](S x, S) {
        return static_cast<S>(p * std::pow(static_cast<double>(x), p - 1.0));
      });
}

namespace {
inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
inline double std_normal_pdf(double x) { return 0.3989422804014326779 * std::exp(-0.5 * x * x); }
}  // namespace

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  return ew_unary(
      a,
      [](S x) {
        const double xd = static_cast<double>(x);
        return static_cast<S>(xd * std_normal_cdf(xd));
      },
      [](S x, S) {
        const double xd = static_cast<double>(x);
        return static_cast<S>(std_normal_cdf(xd) + xd * std_normal_pdf(xd));
      });
}

template <typename S>
Tensor<S> normal_cdf(const Tensor<S>& a) {
  return ew_unary(
      a, [](S x) { return static_cast<S>(std_normal_cdf(static_cast<double>(x))); },
      [](S x, S) { return static_cast<S>(std_normal_pdf(static_cast<double>(x))); });
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& a, double lo, double hi) {
  check(lo <= hi, "clamp bounds out of order");
  return ew_unary(
      a,
      [lo, hi](S x) {
        const double xd = static_cast<double>(x);
        return static_cast<S>(xd < lo ? lo : (xd > hi ? hi : xd));
      },
      [lo, hi](S x, S) {
        const double xd = static_cast<double>(x);
        return (xd >= lo && xd <= hi) ? S(1) : S(0);
      });
}

template <typename S>
Tensor<S> floor(const Tensor<S>& a) {
  const auto& av = a.values();
  std::vector<S> out(av.size());
  for (size_t i = 0; i < av.size(); ++i)
    out[i] = static_cast<S>(std::floor(static_cast<double>(av[i])));
  return Tensor<S>(a.shape(), std::move(out));
}

template <typename S>
Tensor<S> round_half_away(const Tensor<S>& a) {
  const auto& av = a.values();
  std::vector<S> out(av.size());
  for (size_t i = 0; i < av.size(); ++i)
    out[i] = static_cast<S>(round_away(static_cast<double>(av[i])));
  return Tensor<S>(a.shape(), std::move(out));
}

template <typename S>
Tensor<S> stopgrad(const Tensor<S>& a) {
  return TensorAccess::share(a);
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int64_t> shape) {
  check(shape_numel(shape) == a.numel(),
        "reshape " + shape_to_string(a.shape()) + " -> " + shape_to_string(shape));
  Tensor<S> r(shape, a.values());
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  if (na >= 0) {
    const int64_t n = a.numel();
    const int64_t id = tp->record(n, [na, n](std::span<const S> gy, Tape<S>& tape) {
      auto ga = tape.grad_buffer(na, n);
      for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
    });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a, std::vector<int64_t> perm) {
  const auto& as = a.shape();
  check(perm.size() == as.size(), "transpose perm rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  std::vector<int64_t> out_shape(perm.size());
  const auto st = shape_strides(as);
  std::vector<int64_t> map_strides(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) {
    check(perm[d] >= 0 && perm[d] < static_cast<int64_t>(perm.size()) && !seen[perm[d]],
          "transpose perm is not a permutation");
    seen[perm[d]] = true;
    out_shape[d] = as[perm[d]];
    map_strides[d] = st[perm[d]];
  }
  return gather_op(a, std::move(out_shape), std::move(map_strides), 0);
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, std::vector<int64_t> start, std::vector<int64_t> size) {
  const auto& as = a.shape();
  check(start.size() == as.size() && size.size() == as.size(), "slice rank mismatch");
  const auto st = shape_strides(as);
  int64_t base = 0;
  for (size_t d = 0; d < as.size(); ++d) {
    check(start[d] >= 0 && size[d] >= 1 && start[d] + size[d] <= as[d],
          "slice out of range in " + shape_to_string(as));
    base += start[d] * st[d];
  }
  return gather_op(a, size, st, base);
}

template <typename S>
Tensor<S> pad(const Tensor<S>& a, std::vector<int64_t> lo, std::vector<int64_t> hi) {
  const auto& as = a.shape();
  check(lo.size() == as.size() && hi.size() == as.size(), "pad rank mismatch");
  std::vector<int64_t> out_shape(as.size());
  for (size_t d = 0; d < as.size(); ++d) {
    check(lo[d] >= 0 && hi[d] >= 0, "pad amounts must be nonnegative");
    out_shape[d] = as[d] + lo[d] + hi[d];
  }
  const auto ost = shape_strides(out_shape);
  int64_t base = 0;
  for (size_t d = 0; d < as.size(); ++d) base += lo[d] * ost[d];

  const auto& av = a.values();
  std::vector<S> out(static_cast<size_t>(shape_numel(out_shape)), S(0));
  const std::vector<int64_t> zero(as.size(), 0);
  for_each_bc(as, ost, zero,
              [&](int64_t i, int64_t io, int64_t) { out[base + io] = av[i]; });
  Tensor<S> r(out_shape, std::move(out));
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  if (na >= 0) {
    const int64_t n = a.numel();
    const auto in_shape = as;
    const int64_t id =
        tp->record(r.numel(), [in_shape, ost, zero, na, n, base](std::span<const S> gy, Tape<S>& tape) {
          auto ga = tape.grad_buffer(na, n);
          for_each_bc(in_shape, ost, zero,
                      [&](int64_t i, int64_t io, int64_t) { ga[i] += gy[base + io]; });
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> expand_blocks(const Tensor<S>& a, std::vector<int64_t> out_shape,
                        std::vector<int64_t> block) {
  const auto& as = a.shape();
  check(out_shape.size() == as.size() && block.size() == as.size(),
        "expand_blocks rank mismatch");
  for (size_t d = 0; d < as.size(); ++d) {
    check(block[d] >= 1, "expand_blocks block sizes must be positive");
    check((out_shape[d] + block[d] - 1) / block[d] == as[d],
          "expand_blocks shape mismatch: " + shape_to_string(as) + " blocks " +
              shape_to_string(block) + " -> " + shape_to_string(out_shape));
  }
  const auto ist = shape_strides(as);
  const int64_t rank = static_cast<int64_t>(as.size());
  const int64_t n_out = shape_numel(out_shape);
  const auto& av = a.values();
  std::vector<S> out(static_cast<size_t>(n_out));

  auto map_index = [out_shape, block, ist, rank](int64_t i) {
    int64_t rem = i, ia = 0;
    for (int64_t d = rank - 1; d >= 0; --d) {
      const int64_t c = rem % out_shape[d];
      rem /= out_shape[d];
      ia += (c / block[d]) * ist[d];
    }
    return ia;
  };
  for (int64_t i = 0; i < n_out; ++i) out[i] = av[map_index(i)];
  Tensor<S> r(out_shape, std::move(out));
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  if (na >= 0) {
    const int64_t an = a.numel();
    const int64_t id =
        tp->record(n_out, [map_index, na, an, n_out](std::span<const S> gy, Tape<S>& tape) {
          auto ga = tape.grad_buffer(na, an);
          for (int64_t i = 0; i < n_out; ++i) ga[map_index(i)] += gy[i];
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  const auto& av = a.values();
  double acc = 0.0;
  for (S x : av) acc += static_cast<double>(x);
  Tensor<S> r = Tensor<S>::scalar(static_cast<S>(acc));
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  if (na >= 0) {
    const int64_t n = a.numel();
    const int64_t id = tp->record(1, [na, n](std::span<const S> gy, Tape<S>& tape) {
      auto ga = tape.grad_buffer(na, n);
      for (int64_t i = 0; i < n; ++i) ga[i] += gy[0];
    });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check(a.dim() == 2 && b.dim() == 2 && a.shape()[1] == b.shape()[0],
        "matmul shapes " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<S> out(static_cast<size_t>(M * N));
  parallel_for(M, [&](int64_t m) {
    for (int64_t n = 0; n < N; ++n) {
      S acc = 0;
      for (int64_t k = 0; k < K; ++k) acc += av[m * K + k] * bv[k * N + n];
      out[m * N + n] = acc;
    }
  });
  Tensor<S> r({M, N}, std::move(out));
  Tape<S>* tp = Tape<S>::active();
  const int64_t na = node_on(a, tp);
  const int64_t nb = node_on(b, tp);
  if (na >= 0 || nb >= 0) {
    auto ad = TensorAccess::data(a);
    auto bd = TensorAccess::data(b);
    const int64_t id =
        tp->record(M * N, [ad, bd, na, nb, M, K, N](std::span<const S> gy, Tape<S>& tape) {
          if (na >= 0) {
            auto ga = tape.grad_buffer(na, M * K);
            parallel_for(M, [&](int64_t m) {
              for (int64_t k = 0; k < K; ++k) {
                S acc = 0;
                for (int64_t n = 0; n < N; ++n) acc += gy[m * N + n] * bd->v[k * N + n];
                ga[m * K + k] += acc;
              }
            });
          }
          if (nb >= 0) {
            auto gb = tape.grad_buffer(nb, K * N);
            parallel_for(K, [&](int64_t k) {
              for (int64_t n = 0; n < N; ++n) {
                S acc = 0;
                for (int64_t m = 0; m < M; ++m) acc += ad->v[m * K + k] * gy[m * N + n];
                gb[k * N + n] += acc;
              }
            });
          }
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w, std::array<int64_t, 3> pad,
                 int64_t groups) {
  check(x.dim() == 4 && w.dim() == 5, "conv3d wants x (C,T,H,W), w (Co,Ci/g,kT,kH,kW)");
  const int64_t Cin = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t Cout = w.shape()[0], Cig = w.shape()[1];
  const int64_t kt = w.shape()[2], kh = w.shape()[3], kw = w.shape()[4];
  const int64_t pt = pad[0], ph = pad[1], pw = pad[2];
  check(groups >= 1 && Cin % groups == 0 && Cout % groups == 0 && Cig == Cin / groups,
        "conv3d group layout mismatch");
  check(pt >= 0 && ph >= 0 && pw >= 0, "conv3d negative padding");
  const int64_t To = T + 2 * pt - kt + 1;
  const int64_t Ho = H + 2 * ph - kh + 1;
  const int64_t Wo = W + 2 * pw - kw + 1;
  check(To >= 1 && Ho >= 1 && Wo >= 1, "conv3d kernel larger than padded input");
  const int64_t Cout_g = Cout / groups;

  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<S> out(static_cast<size_t>(Cout * To * Ho * Wo));
  parallel_for(Cout, [&](int64_t co) {
    const int64_t ci0 = (co / Cout_g) * Cig;
    S* op = out.data() + co * To * Ho * Wo;
    for (int64_t to = 0; to < To; ++to)
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          S acc = 0;
          for (int64_t cig = 0; cig < Cig; ++cig) {
            const S* xp = xv.data() + (ci0 + cig) * T * H * W;
            const S* wp = wv.data() + ((co * Cig + cig) * kt) * kh * kw;
            for (int64_t dt = 0; dt < kt; ++dt) {
              const int64_t ti = to + dt - pt;
              if (ti < 0 || ti >= T) continue;
              for (int64_t dh = 0; dh < kh; ++dh) {
                const int64_t hi = ho + dh - ph;
                if (hi < 0 || hi >= H) continue;
                for (int64_t dw = 0; dw < kw; ++dw) {
                  const int64_t wi = wo + dw - pw;
                  if (wi < 0 || wi >= W) continue;
                  acc += wp[(dt * kh + dh) * kw + dw] * xp[(ti * H + hi) * W + wi];
                }
              }
            }
          }
          op[(to * Ho + ho) * Wo + wo] = acc;
        }
  });
  Tensor<S> r({Cout, To, Ho, Wo}, std::move(out));

  Tape<S>* tp = Tape<S>::active();
  const int64_t nx = node_on(x, tp);
  const int64_t nw = node_on(w, tp);
  if (nx >= 0 || nw >= 0) {
    auto xd = TensorAccess::data(x);
    auto wd = TensorAccess::data(w);
    const int64_t id = tp->record(
        r.numel(),
        [xd, wd, nx, nw, Cin, T, H, W, Cout, Cig, kt, kh, kw, pt, ph, pw, To, Ho, Wo,
         Cout_g](std::span<const S> gy, Tape<S>& tape) {
          if (nx >= 0) {
            auto gx = tape.grad_buffer(nx, Cin * T * H * W);
            parallel_for(Cin, [&](int64_t ci) {
              const int64_t g = ci / Cig;
              const int64_t cig = ci - g * Cig;
              S* gp = gx.data() + ci * T * H * W;
              for (int64_t ti = 0; ti < T; ++ti)
                for (int64_t hi = 0; hi < H; ++hi)
                  for (int64_t wi = 0; wi < W; ++wi) {
                    S acc = 0;
                    for (int64_t co = g * Cout_g; co < (g + 1) * Cout_g; ++co) {
                      const S* wp = wd->v.data() + ((co * Cig + cig) * kt) * kh * kw;
                      const S* yp = gy.data() + co * To * Ho * Wo;
                      for (int64_t dt = 0; dt < kt; ++dt) {
                        const int64_t to = ti - dt + pt;
                        if (to < 0 || to >= To) continue;
                        for (int64_t dh = 0; dh < kh; ++dh) {
                          const int64_t ho = hi - dh + ph;
                          if (ho < 0 || ho >= Ho) continue;
                          for (int64_t dw = 0; dw < kw; ++dw) {
                            const int64_t wo = wi - dw + pw;
                            if (wo < 0 || wo >= Wo) continue;
                            acc += wp[(dt * kh + dh) * kw + dw] * yp[(to * Ho + ho) * Wo + wo];
                          }
                        }
                      }
                    }
                    gp[(ti * H + hi) * W + wi] += acc;
                  }
            });
          }
          if (nw >= 0) {
            auto gw = tape.grad_buffer(nw, Cout * Cig * kt * kh * kw);
            parallel_for(Cout, [&](int64_t co) {
              const int64_t ci0 = (co / Cout_g) * Cig;
              const S* yp = gy.data() + co * To * Ho * Wo;
              for (int64_t cig = 0; cig < Cig; ++cig) {
                const S* xp = xd->v.data() + (ci0 + cig) * T * H * W;
                for (int64_t dt = 0; dt < kt; ++dt)
                  for (int64_t dh = 0; dh < kh; ++dh)
                    for (int64_t dw = 0; dw < kw; ++dw) {
                      S acc = 0;
                      for (int64_t to = 0; to < To; ++to) {
                        const int64_t ti = to + dt - pt;
                        if (ti < 0 || ti >= T) continue;
                        for (int64_t ho = 0; ho < Ho; ++ho) {
                          const int64_t hi = ho + dh - ph;
                          if (hi < 0 || hi >= H) continue;
                          for (int64_t wo = 0; wo < Wo; ++wo) {
                            const int64_t wi = wo + dw - pw;
                            if (wi < 0 || wi >= W) continue;
                            acc += yp[(to * Ho + ho) * Wo + wo] * xp[(ti * H + hi) * W + wi];
                          }
                        }
                      }
                      gw[((co * Cig + cig) * kt + dt) * kh * kw + dh * kw + dw] += acc;
                    }
              }
            });
          }
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> grid_sample(const Tensor<S>& grid, const Tensor<S>& coords) {
  check(grid.dim() == 4, "grid_sample wants a (C,T,H,W) grid");
  check(coords.dim() == 2 && coords.shape()[1] == 3, "grid_sample wants (P,3) coords");
  const int64_t C = grid.shape()[0], Tg = grid.shape()[1], Hg = grid.shape()[2],
                Wg = grid.shape()[3];
  const int64_t P = coords.shape()[0];
  const auto& gv = grid.values();
  const auto& cv = coords.values();

  // Per-point corner indices and weights, shared by forward and backward.
  struct Corner {
    int64_t i0[3], i1[3];
    double f[3];
  };
  auto corner_of = [Tg, Hg, Wg](const S* c) {
    Corner k;
    const int64_t ext[3] = {Tg, Hg, Wg};
    for (int d = 0; d < 3; ++d) {
      const double pos = static_cast<double>(c[d]);
      const double fl = std::floor(pos);
      const int64_t i0 = static_cast<int64_t>(fl);
      k.f[d] = pos - fl;
      k.i0[d] = std::min(std::max(i0, int64_t{0}), ext[d] - 1);
      k.i1[d] = std::min(std::max(i0 + 1, int64_t{0}), ext[d] - 1);
    }
    return k;
  };

  std::vector<S> out(static_cast<size_t>(C * P));
  parallel_for(P, [&](int64_t p) {
    const Corner k = corner_of(cv.data() + p * 3);
    for (int64_t c = 0; c < C; ++c) {
      const S* gp = gv.data() + c * Tg * Hg * Wg;
      double acc = 0.0;
      for (int dt = 0; dt < 2; ++dt)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const double wgt = (dt ? k.f[0] : 1.0 - k.f[0]) * (dy ? k.f[1] : 1.0 - k.f[1]) *
                               (dx ? k.f[2] : 1.0 - k.f[2]);
            const int64_t it = dt ? k.i1[0] : k.i0[0];
            const int64_t iy = dy ? k.i1[1] : k.i0[1];
            const int64_t ix = dx ? k.i1[2] : k.i0[2];
            acc += wgt * static_cast<double>(gp[(it * Hg + iy) * Wg + ix]);
          }
      out[c * P + p] = static_cast<S>(acc);
    }
  });
  Tensor<S> r({C, P}, std::move(out));

  Tape<S>* tp = Tape<S>::active();
  const int64_t ng = node_on(grid, tp);
  if (ng >= 0) {
    auto cd = TensorAccess::data(coords);
    const int64_t id = tp->record(
        C * P, [cd, ng, C, P, Tg, Hg, Wg, corner_of](std::span<const S> gy, Tape<S>& tape) {
          auto gg = tape.grad_buffer(ng, C * Tg * Hg * Wg);
          parallel_for(C, [&](int64_t c) {
            S* gp = gg.data() + c * Tg * Hg * Wg;
            for (int64_t p = 0; p < P; ++p) {
              const Corner k = corner_of(cd->v.data() + p * 3);
              const double g = static_cast<double>(gy[c * P + p]);
              for (int dt = 0; dt < 2; ++dt)
                for (int dy = 0; dy < 2; ++dy)
                  for (int dx = 0; dx < 2; ++dx) {
                    const double wgt = (dt ? k.f[0] : 1.0 - k.f[0]) *
                                       (dy ? k.f[1] : 1.0 - k.f[1]) *
                                       (dx ? k.f[2] : 1.0 - k.f[2]);
                    const int64_t it = dt ? k.i1[0] : k.i0[0];
                    const int64_t iy = dy ? k.i1[1] : k.i0[1];
                    const int64_t ix = dx ? k.i1[2] : k.i0[2];
                    gp[(it * Hg + iy) * Wg + ix] += static_cast<S>(wgt * g);
                  }
            }
          });
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

namespace {
// Half-pixel source mapping for a fixed 2x upscale of one axis.
struct UpTap {
  int64_t i0, i1;
  double f;  // weight of i1
};
inline UpTap up_tap(int64_t o, int64_t in_extent) {
  const double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
  const double fl = std::floor(src);
  UpTap t;
  const int64_t i0 = static_cast<int64_t>(fl);
  t.f = src - fl;
  t.i0 = std::min(std::max(i0, int64_t{0}), in_extent - 1);
  t.i1 = std::min(std::max(i0 + 1, int64_t{0}), in_extent - 1);
  return t;
}
}  // namespace

template <typename S>
Tensor<S> upsample2x_hw(const Tensor<S>& x) {
  check(x.dim() == 4, "upsample2x_hw wants (C,T,H,W)");
  const int64_t C = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t Ho = 2 * H, Wo = 2 * W;
  const auto& xv = x.values();
  std::vector<UpTap> th(Ho), tw(Wo);
  for (int64_t h = 0; h < Ho; ++h) th[h] = up_tap(h, H);
  for (int64_t w = 0; w < Wo; ++w) tw[w] = up_tap(w, W);

  std::vector<S> out(static_cast<size_t>(C * T * Ho * Wo));
  parallel_for(C * T, [&](int64_t ct) {
    const S* xp = xv.data() + ct * H * W;
    S* op = out.data() + ct * Ho * Wo;
    for (int64_t h = 0; h < Ho; ++h)
      for (int64_t w = 0; w < Wo; ++w) {
        const UpTap& a = th[h];
        const UpTap& b = tw[w];
        const double v = (1.0 - a.f) * ((1.0 - b.f) * xp[a.i0 * W + b.i0] + b.f * xp[a.i0 * W + b.i1]) +
                         a.f * ((1.0 - b.f) * xp[a.i1 * W + b.i0] + b.f * xp[a.i1 * W + b.i1]);
        op[h * Wo + w] = static_cast<S>(v);
      }
  });
  Tensor<S> r({C, T, Ho, Wo}, std::move(out));

  Tape<S>* tp = Tape<S>::active();
  const int64_t nx = node_on(x, tp);
  if (nx >= 0) {
    const int64_t id = tp->record(
        r.numel(), [nx, C, T, H, W, Ho, Wo, th, tw](std::span<const S> gy, Tape<S>& tape) {
          auto gx = tape.grad_buffer(nx, C * T * H * W);
          parallel_for(C * T, [&](int64_t ct) {
            S* gp = gx.data() + ct * H * W;
            const S* yp = gy.data() + ct * Ho * Wo;
            for (int64_t h = 0; h < Ho; ++h)
              for (int64_t w = 0; w < Wo; ++w) {
                const UpTap& a = th[h];
                const UpTap& b = tw[w];
                const double g = static_cast<double>(yp[h * Wo + w]);
                gp[a.i0 * W + b.i0] += static_cast<S>((1.0 - a.f) * (1.0 - b.f) * g);
                gp[a.i0 * W + b.i1] += static_cast<S>((1.0 - a.f) * b.f * g);
                gp[a.i1 * W + b.i0] += static_cast<S>(a.f * (1.0 - b.f) * g);
                gp[a.i1 * W + b.i1] += static_cast<S>(a.f * b.f * g);
              }
          });
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> avgpool2x2_hw(const Tensor<S>& x) {
  check(x.dim() == 4, "avgpool2x2_hw wants (C,T,H,W)");
  const int64_t C = x.shape()[0], T = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t Ho = H / 2, Wo = W / 2;
  check(Ho >= 1 && Wo >= 1, "avgpool2x2_hw input too small");
  const auto& xv = x.values();
  std::vector<S> out(static_cast<size_t>(C * T * Ho * Wo));
  parallel_for(C * T, [&](int64_t ct) {
    const S* xp = xv.data() + ct * H * W;
    S* op = out.data() + ct * Ho * Wo;
    for (int64_t h = 0; h < Ho; ++h)
      for (int64_t w = 0; w < Wo; ++w)
        op[h * Wo + w] = static_cast<S>(0.25) * (xp[(2 * h) * W + 2 * w] + xp[(2 * h) * W + 2 * w + 1] +
                                                 xp[(2 * h + 1) * W + 2 * w] +
                                                 xp[(2 * h + 1) * W + 2 * w + 1]);
  });
  Tensor<S> r({C, T, Ho, Wo}, std::move(out));

  Tape<S>* tp = Tape<S>::active();
  const int64_t nx = node_on(x, tp);
  if (nx >= 0) {
    const int64_t id =
        tp->record(r.numel(), [nx, C, T, H, W, Ho, Wo](std::span<const S> gy, Tape<S>& tape) {
          auto gx = tape.grad_buffer(nx, C * T * H * W);
          parallel_for(C * T, [&](int64_t ct) {
            S* gp = gx.data() + ct * H * W;
            const S* yp = gy.data() + ct * Ho * Wo;
            for (int64_t h = 0; h < Ho; ++h)
              for (int64_t w = 0; w < Wo; ++w) {
                const S g = static_cast<S>(0.25) * yp[h * Wo + w];
                gp[(2 * h) * W + 2 * w] += g;
                gp[(2 * h) * W + 2 * w + 1] += g;
                gp[(2 * h + 1) * W + 2 * w] += g;
                gp[(2 * h + 1) * W + 2 * w + 1] += g;
              }
          });
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

template <typename S>
Tensor<S> layernorm_channels(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                             double eps) {
  check(x.dim() == 4, "layernorm_channels wants (C,T,H,W)");
  const int64_t C = x.shape()[0];
  const int64_t pos_n = x.shape()[1] * x.shape()[2] * x.shape()[3];
  check(gamma.dim() == 1 && gamma.shape()[0] == C && beta.dim() == 1 && beta.shape()[0] == C,
        "layernorm_channels scale/shift must be (C)");
  check(C >= 2, "layernorm_channels over a single channel is degenerate");
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();

  auto mean_v = std::make_shared<std::vector<double>>(pos_n);
  auto rstd_v = std::make_shared<std::vector<double>>(pos_n);
  std::vector<S> out(xv.size());
  parallel_for(pos_n, [&](int64_t p) {
    double m = 0.0;
    for (int64_t c = 0; c < C; ++c) m += static_cast<double>(xv[c * pos_n + p]);
    m /= static_cast<double>(C);
    double v = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double d = static_cast<double>(xv[c * pos_n + p]) - m;
      v += d * d;
    }
    v /= static_cast<double>(C);
    const double r = 1.0 / std::sqrt(v + eps);
    (*mean_v)[p] = m;
    (*rstd_v)[p] = r;
    for (int64_t c = 0; c < C; ++c) {
      const double xh = (static_cast<double>(xv[c * pos_n + p]) - m) * r;
      out[c * pos_n + p] =
          static_cast<S>(xh * static_cast<double>(gv[c]) + static_cast<double>(bv[c]));
    }
  });
  Tensor<S> r(x.shape(), std::move(out));

  Tape<S>* tp = Tape<S>::active();
  const int64_t nx = node_on(x, tp);
  const int64_t ng = node_on(gamma, tp);
  const int64_t nb = node_on(beta, tp);
  if (nx >= 0 || ng >= 0 || nb >= 0) {
    auto xd = TensorAccess::data(x);
    auto gd = TensorAccess::data(gamma);
    const int64_t id = tp->record(
        r.numel(),
        [xd, gd, mean_v, rstd_v, nx, ng, nb, C, pos_n](std::span<const S> gy, Tape<S>& tape) {
          if (nx >= 0) {
            auto gx = tape.grad_buffer(nx, C * pos_n);
            parallel_for(pos_n, [&](int64_t p) {
              const double m = (*mean_v)[p];
              const double rs = (*rstd_v)[p];
              double s1 = 0.0, s2 = 0.0;
              for (int64_t c = 0; c < C; ++c) {
                const double dxh =
                    static_cast<double>(gy[c * pos_n + p]) * static_cast<double>(gd->v[c]);
                const double xh = (static_cast<double>(xd->v[c * pos_n + p]) - m) * rs;
                s1 += dxh;
                s2 += dxh * xh;
              }
              s1 /= static_cast<double>(C);
              s2 /= static_cast<double>(C);
              for (int64_t c = 0; c < C; ++c) {
                const double dxh =
                    static_cast<double>(gy[c * pos_n + p]) * static_cast<double>(gd->v[c]);
                const double xh = (static_cast<double>(xd->v[c * pos_n + p]) - m) * rs;
                gx[c * pos_n + p] += static_cast<S>((dxh - s1 - xh * s2) * rs);
              }
            });
          }
          if (ng >= 0 || nb >= 0) {
            std::span<S> gg, gb;
            if (ng >= 0) gg = tape.grad_buffer(ng, C);
            if (nb >= 0) gb = tape.grad_buffer(nb, C);
            parallel_for(C, [&](int64_t c) {
              double sg = 0.0, sb = 0.0;
              const double* mp = mean_v->data();
              const double* rp = rstd_v->data();
              for (int64_t p = 0; p < pos_n; ++p) {
                const double g = static_cast<double>(gy[c * pos_n + p]);
                const double xh = (static_cast<double>(xd->v[c * pos_n + p]) - mp[p]) * rp[p];
                sg += g * xh;
                sb += g;
              }
              if (ng >= 0) gg[c] += static_cast<S>(sg);
              if (nb >= 0) gb[c] += static_cast<S>(sb);
            });
          }
        });
    TensorAccess::bind(r, tp->id(), id);
  }
  return r;
}

#define NVRC_INSTANTIATE_OPS(S)                                                                   \
  template class Tensor<S>;                                                                       \
  template class Tape<S>;                                                                         \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> divide<S>(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, double);                                     \
  template Tensor<S> mul_scalar<S>(const Tensor<S>&, double);                                     \
  template Tensor<S> exp<S>(const Tensor<S>&);                                                    \
  template Tensor<S> log<S>(const Tensor<S>&);                                                    \
  template Tensor<S> sqrt<S>(const Tensor<S>&);                                                   \
  template Tensor<S> tanh<S>(const Tensor<S>&);                                                   \
  template Tensor<S> abs<S>(const Tensor<S>&);                                                    \
  template Tensor<S> pow_scalar<S>(const Tensor<S>&, double);                                     \
  template Tensor<S> gelu<S>(const Tensor<S>&);                                                   \
  template Tensor<S> normal_cdf<S>(const Tensor<S>&);                                             \
  template Tensor<S> clamp<S>(const Tensor<S>&, double, double);                                  \
  template Tensor<S> floor<S>(const Tensor<S>&);                                                  \
  template Tensor<S> round_half_away<S>(const Tensor<S>&);                                        \
  template Tensor<S> stopgrad<S>(const Tensor<S>&);                                               \
  template Tensor<S> reshape<S>(const Tensor<S>&, std::vector<int64_t>);                          \
  template Tensor<S> transpose<S>(const Tensor<S>&, std::vector<int64_t>);                        \
  template Tensor<S> slice<S>(const Tensor<S>&, std::vector<int64_t>, std::vector<int64_t>);      \
  template Tensor<S> pad<S>(const Tensor<S>&, std::vector<int64_t>, std::vector<int64_t>);        \
  template Tensor<S> expand_blocks<S>(const Tensor<S>&, std::vector<int64_t>,                     \
                                      std::vector<int64_t>);                                      \
  template Tensor<S> sum_all<S>(const Tensor<S>&);                                                \
  template Tensor<S> mean_all<S>(const Tensor<S>&);                                               \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> conv3d<S>(const Tensor<S>&, const Tensor<S>&, std::array<int64_t, 3>,        \
                               int64_t);                                                          \
  template Tensor<S> grid_sample<S>(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> upsample2x_hw<S>(const Tensor<S>&);                                          \
  template Tensor<S> avgpool2x2_hw<S>(const Tensor<S>&);                                          \
  template Tensor<S> layernorm_channels<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                           double);

NVRC_INSTANTIATE_OPS(float)
NVRC_INSTANTIATE_OPS(double)

#undef NVRC_INSTANTIATE_OPS

}  // namespace nvrc
