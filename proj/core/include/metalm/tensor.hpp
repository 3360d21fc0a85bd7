#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metalm/errors.hpp"
#include "metalm/rng.hpp"

namespace metalm {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Monotone id assigned to every storage ever created. Ranges of ids double as
// cheap structural markers: "was this value created between A and B?"
uint64_t next_storage_id();
uint64_t current_storage_id();

template <class T>
struct Storage {
  uint64_t id = 0;
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until first use

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Value handle with shared storage. Copies alias; detached() deep-copies.
template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape);
  static TensorT full(Shape shape, T value);
  static TensorT from(Shape shape, std::vector<T> data);
  static TensorT randn(Shape shape, Rng& rng, T stddev);

  bool defined() const { return static_cast<bool>(st_); }
  const Shape& shape() const { return st_->shape; }
  int64_t dim(size_t i) const { return st_->shape.at(i); }
  int64_t ndim() const { return static_cast<int64_t>(st_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }
  uint64_t id() const { return st_->id; }

  std::span<const T> data() const { return st_->data; }
  std::span<T> mutable_data() { return st_->data; }

  T at(int64_t i) const;
  T at(int64_t r, int64_t c) const;
  T item() const;

  bool requires_grad() const { return st_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    st_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !st_->grad.empty(); }
  std::span<const T> grad() const { return st_->grad; }
  std::span<T> mutable_grad() {
    st_->ensure_grad();
    return st_->grad;
  }
  void zero_grad() {
    if (!st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
  }

  // Deep copy; the copy tracks gradients independently.
  TensorT detached() const;
  TensorT clone() const;

  std::shared_ptr<Storage<T>> storage() const { return st_; }

 private:
  explicit TensorT(std::shared_ptr<Storage<T>> st) : st_(std::move(st)) {}
  static TensorT make(Shape shape, std::vector<T> data);

  std::shared_ptr<Storage<T>> st_;

  template <class U>
  friend class TapeT;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// Wengert list. Ops record themselves when any input tracks gradients; replay
// in reverse order computes reverse-mode gradients.
template <class T>
class TapeT {
 public:
  struct Op {
    const char* name;
    std::vector<uint64_t> input_ids;
    std::shared_ptr<Storage<T>> output;
    std::function<void()> backward;
  };

  void record(const char* name, std::vector<std::shared_ptr<Storage<T>>> inputs,
              std::shared_ptr<Storage<T>> output, std::function<void()> backward) {
    Op op;
    op.name = name;
    op.input_ids.reserve(inputs.size());
    for (const auto& s : inputs) op.input_ids.push_back(s->id);
    op.output = std::move(output);
    op.backward = std::move(backward);
    ops_.push_back(std::move(op));
  }

  size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }
  const std::vector<Op>& ops() const { return ops_; }

  // True when any op recorded at or after op index `from` touches a storage id
  // in [lo, hi). Used to assert first-order episode updates structurally.
  bool references_in_range(uint64_t lo, uint64_t hi, size_t from = 0) const {
    for (size_t i = from; i < ops_.size(); ++i) {
      if (ops_[i].output->id >= lo && ops_[i].output->id < hi) return true;
      for (uint64_t id : ops_[i].input_ids)
        if (id >= lo && id < hi) return true;
    }
    return false;
  }

  bool references_id(uint64_t id, size_t from = 0) const {
    return references_in_range(id, id + 1, from);
  }

 private:
  std::vector<Op> ops_;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

// Reverse replay. Zeroes every op output gradient, seeds d(loss)=1, then runs
// recorded closures newest-first. Leaf gradients accumulate across calls, so a
// second backward over the same tape doubles them.
template <class T>
void backward(const TensorT<T>& loss, TapeT<T>& tape);

// --- primitive ops -----------------------------------------------------
// All ops evaluate eagerly. `tape` may be null for inference; recording also
// degrades to plain evaluation when no input tracks gradients.

template <class T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> sub(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
template <class T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& a, T c);

// y[i][j] = x[i][j] + bias[j]
template <class T>
TensorT<T> add_bias_row(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& bias);

// [m,k] x [k,n] -> [m,n]
template <class T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);
// [m,k] x [n,k]^T -> [m,n]
template <class T>
TensorT<T> matmul_nt(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b);

template <class T>
TensorT<T> transpose(TapeT<T>* tape, const TensorT<T>& a);

// v: [m] -> [m,n], each column a copy of v.
template <class T>
TensorT<T> broadcast_col(TapeT<T>* tape, const TensorT<T>& v, int64_t n);

// Row i of a 2-d tensor as a 1-d tensor.
template <class T>
TensorT<T> row(TapeT<T>* tape, const TensorT<T>& x, int64_t i);

template <class T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& x, Shape shape);

// Columns [c0, c1) of a 2-d tensor.
template <class T>
TensorT<T> slice_cols(TapeT<T>* tape, const TensorT<T>& x, int64_t c0, int64_t c1);

template <class T>
TensorT<T> concat_cols(TapeT<T>* tape, const std::vector<TensorT<T>>& parts);

// 1-d tensors of equal length d stacked into [n, d].
template <class T>
TensorT<T> stack_rows(TapeT<T>* tape, const std::vector<TensorT<T>>& rows);

template <class T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x);

// Sum of selected entries of a 2-d tensor; duplicate indices accumulate.
template <class T>
TensorT<T> pick_sum(TapeT<T>* tape, const TensorT<T>& x,
                    const std::vector<std::pair<int64_t, int64_t>>& indices);
// Sum of selected entries of a 1-d tensor.
template <class T>
TensorT<T> pick_sum1d(TapeT<T>* tape, const TensorT<T>& x, const std::vector<int64_t>& indices);

template <class T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x);
template <class T>
TensorT<T> silu(TapeT<T>* tape, const TensorT<T>& x);

// Inverted dropout: kept entries scaled by 1/(1-p). p in [0,1).
template <class T>
TensorT<T> dropout(TapeT<T>* tape, const TensorT<T>& x, double p, Rng& rng);

template <class T>
TensorT<T> softmax_rows(TapeT<T>* tape, const TensorT<T>& x);

// Row t normalizes over columns [0, t]; strictly-future columns are zero.
// Requires a square matrix.
template <class T>
TensorT<T> causal_softmax_rows(TapeT<T>* tape, const TensorT<T>& x);

// [m,n] -> [m]; numerically stable log sum exp per row.
template <class T>
TensorT<T> logsumexp_rows(TapeT<T>* tape, const TensorT<T>& x);

// Root-mean-square normalization per row with learned gain.
template <class T>
TensorT<T> rmsnorm_rows(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain, double eps);

// Pairwise rotation of row t by position-dependent angles; x: [t, d_head],
// d_head even. Frequency i rotates pair (2i, 2i+1) by pos * theta_base^(-2i/d).
template <class T>
TensorT<T> rope_rows(TapeT<T>* tape, const TensorT<T>& x, std::span<const int32_t> positions,
                     double theta_base);

// table: [vocab, d]; gathers rows by id. Gradient scatter-adds.
template <class T>
TensorT<T> embedding_rows(TapeT<T>* tape, const TensorT<T>& table, std::span<const int32_t> ids);

// Mean over rows (with target != ignore_index) of -log softmax(x[i])[target_i].
template <class T>
TensorT<T> cross_entropy_rows(TapeT<T>* tape, const TensorT<T>& logits,
                              std::span<const int32_t> targets, int32_t ignore_index = -1);

// Index of the row maximum; ties resolve to the lowest index.
template <class T>
int64_t argmax_row(const TensorT<T>& x, int64_t r);

// Max over coordinates of |analytic - central difference| / (|central| + 1e-8).
// `f` must be a pure function of x given a fresh tape. Raises a numeric error
// if f(x) is non-finite.
template <class T>
T finite_diff_check(const std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)>& f,
                    const TensorT<T>& x, T eps);

}  // namespace metalm
