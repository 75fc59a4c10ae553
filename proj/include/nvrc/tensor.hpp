#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace nvrc {

template <typename S>
struct TensorData {
  std::vector<int64_t> shape;
  std::vector<S> v;
};

template <typename S>
class Tape;

// Value-semantic handle to a dense row-major array. Copies share storage;
// ops always allocate fresh storage, so a buffer reachable from two handles
// is never written through either. Mutating a leaf through mutable_values()
// is only safe while no tape holds nodes that captured it.
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, S fill = S(0));
  Tensor(std::vector<int64_t> shape, std::vector<S> values);
  static Tensor scalar(S v) { return Tensor({}, std::vector<S>{v}); }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int64_t>& shape() const { return data_->shape; }
  int64_t dim() const { return static_cast<int64_t>(data_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_->v.size()); }
  const std::vector<S>& values() const { return data_->v; }
  std::vector<S>& mutable_values() { return data_->v; }
  S item() const;

  int64_t node() const { return node_; }
  uint64_t tape_id() const { return tape_id_; }
  bool tracked() const;  // has a node on the currently active tape

 private:
  friend class Tape<S>;
  friend struct TensorAccess;
  std::shared_ptr<TensorData<S>> data_;
  uint64_t tape_id_ = 0;
  int64_t node_ = -1;
};

// Records one graph per instance. Construction makes the tape active for the
// current thread (restoring the previous one on destruction); ops record a
// node only while a tape is active and at least one input is tracked on it.
// backward() walks nodes in reverse creation order, which makes gradient
// accumulation order deterministic.
template <typename S>
class Tape {
 public:
  using BackFn = std::function<void(std::span<const S>, Tape&)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  uint64_t id() const { return id_; }
  size_t size() const { return nodes_.size(); }

  void watch(Tensor<S>& t);
  void backward(const Tensor<S>& loss);
  std::span<const S> grad(const Tensor<S>& t) const;

  int64_t record(int64_t numel, BackFn back);
  std::span<S> grad_buffer(int64_t node, int64_t numel);

 private:
  struct Node {
    int64_t numel;
    BackFn back;
  };
  uint64_t id_;
  Tape* prev_ = nullptr;
  std::vector<Node> nodes_;
  std::vector<std::vector<S>> grads_;
  bool ran_backward_ = false;
};

template <typename S>
bool Tensor<S>::tracked() const {
  Tape<S>* tp = Tape<S>::active();
  return tp != nullptr && tape_id_ == tp->id() && node_ >= 0;
}

// Elementwise ops broadcast numpy-style (shapes right-aligned, size-1 dims
// stretched); gradients of broadcast operands are summed back to their shape.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> divide(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& a, double c);
template <typename S> Tensor<S> mul_scalar(const Tensor<S>& a, double c);

template <typename S> Tensor<S> exp(const Tensor<S>& a);
template <typename S> Tensor<S> log(const Tensor<S>& a);
template <typename S> Tensor<S> sqrt(const Tensor<S>& a);
template <typename S> Tensor<S> tanh(const Tensor<S>& a);
template <typename S> Tensor<S> abs(const Tensor<S>& a);
template <typename S> Tensor<S> pow_scalar(const Tensor<S>& a, double p);
template <typename S> Tensor<S> gelu(const Tensor<S>& a);
template <typename S> Tensor<S> normal_cdf(const Tensor<S>& a);
// Gradient passes where lo <= x <= hi; use +-infinity for one-sided bounds.
template <typename S> Tensor<S> clamp(const Tensor<S>& a, double lo, double hi);

// floor and round_half_away return untracked tensors: their derivative is
// zero almost everywhere and no straight-through substitute is wanted here.
template <typename S> Tensor<S> floor(const Tensor<S>& a);
template <typename S> Tensor<S> round_half_away(const Tensor<S>& a);
template <typename S> Tensor<S> stopgrad(const Tensor<S>& a);

template <typename S> Tensor<S> reshape(const Tensor<S>& a, std::vector<int64_t> shape);
template <typename S> Tensor<S> transpose(const Tensor<S>& a, std::vector<int64_t> perm);
template <typename S> Tensor<S> slice(const Tensor<S>& a, std::vector<int64_t> start, std::vector<int64_t> size);
template <typename S> Tensor<S> pad(const Tensor<S>& a, std::vector<int64_t> lo, std::vector<int64_t> hi);
// out[i0,..] = a[i0/block0,..]; trailing partial blocks are allowed, so
// a.shape[d] must equal ceil(out_shape[d] / block[d]).
template <typename S> Tensor<S> expand_blocks(const Tensor<S>& a, std::vector<int64_t> out_shape, std::vector<int64_t> block);

template <typename S> Tensor<S> sum_all(const Tensor<S>& a);
template <typename S> Tensor<S> mean_all(const Tensor<S>& a);

template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

// x: (Cin,T,H,W), w: (Cout,Cin/groups,kT,kH,kW), stride 1, zero padding.
template <typename S> Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w, std::array<int64_t, 3> pad, int64_t groups = 1);

// grid: (C,Tg,Hg,Wg); coords: (P,3) positions in grid index space, fractional
// and out-of-range allowed (corners clamp to the edge). Trilinear; coords are
// treated as constants, gradient flows to the grid only. Output (C,P).
template <typename S> Tensor<S> grid_sample(const Tensor<S>& grid, const Tensor<S>& coords);

// (C,T,H,W) -> (C,T,2H,2W), bilinear, half-pixel centers, edges clamped.
template <typename S> Tensor<S> upsample2x_hw(const Tensor<S>& x);
// (C,T,H,W) -> (C,T,H/2,W/2) with floor; a trailing odd row/column is dropped.
template <typename S> Tensor<S> avgpool2x2_hw(const Tensor<S>& x);

// Normalizes over the channel axis at every (t,h,w); gamma, beta: (C).
template <typename S> Tensor<S> layernorm_channels(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, double eps = 1e-5);

}  // namespace nvrc
