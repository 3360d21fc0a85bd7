#include "metalm/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace metalm {

namespace {

std::atomic<uint64_t> g_storage_counter{1};

template <class T>
bool track(TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// c[m,n] (+)= a[m,k] * b[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (int64_t l = 0; l < k; ++l) {
      T av = ai[l];
      if (av == T(0)) continue;
      const T* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (int64_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] += acc;
    }
  }
}

// c[m,n] (+)= a[k,m]^T * b[k,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t l = 0; l < k; ++l) {
    const T* al = a + l * m;
    const T* bl = b + l * n;
    for (int64_t i = 0; i < m; ++i) {
      T av = al[i];
      if (av == T(0)) continue;
      T* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

template <class T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          std::string(op) + ": shapes disagree: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

template <class T>
void check_2d(const TensorT<T>& a, const char* op) {
  require(a.ndim() == 2, ErrorKind::shape,
          std::string(op) + ": expected 2-d tensor, got " + shape_str(a.shape()));
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    require(d >= 0, ErrorKind::shape, "negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

uint64_t next_storage_id() { return g_storage_counter.fetch_add(1); }
uint64_t current_storage_id() { return g_storage_counter.load(); }

// --- TensorT -------------------------------------------------------------

template <class T>
TensorT<T> TensorT<T>::make(Shape shape, std::vector<T> data) {
  auto st = std::make_shared<Storage<T>>();
  st->id = next_storage_id();
  st->shape = std::move(shape);
  st->data = std::move(data);
  return TensorT(std::move(st));
}

template <class T>
TensorT<T> TensorT<T>::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return make(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0)));
}

template <class T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
  auto n = shape_numel(shape);
  return make(std::move(shape), std::vector<T>(static_cast<size_t>(n), value));
}

template <class T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> data) {
  auto n = shape_numel(shape);
  require(static_cast<size_t>(n) == data.size(), ErrorKind::shape,
          "from: data size " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
  return make(std::move(shape), std::move(data));
}

template <class T>
TensorT<T> TensorT<T>::randn(Shape shape, Rng& rng, T stddev) {
  auto n = shape_numel(shape);
  std::vector<T> data(static_cast<size_t>(n));
  for (auto& v : data) v = static_cast<T>(rng.normal()) * stddev;
  return make(std::move(shape), std::move(data));
}

template <class T>
T TensorT<T>::at(int64_t i) const {
  require(i >= 0 && i < numel(), ErrorKind::shape,
          "at: index " + std::to_string(i) + " out of range for " + shape_str(shape()));
  return st_->data[static_cast<size_t>(i)];
}

template <class T>
T TensorT<T>::at(int64_t r, int64_t c) const {
  require(ndim() == 2, ErrorKind::shape, "at(r,c): tensor is not 2-d");
  require(r >= 0 && r < dim(0) && c >= 0 && c < dim(1), ErrorKind::shape,
          "at: index out of range for " + shape_str(shape()));
  return st_->data[static_cast<size_t>(r * dim(1) + c)];
}

template <class T>
T TensorT<T>::item() const {
  require(numel() == 1, ErrorKind::shape, "item: tensor is not scalar: " + shape_str(shape()));
  return st_->data[0];
}

template <class T>
TensorT<T> TensorT<T>::detached() const {
  auto out = make(st_->shape, st_->data);
  return out;
}

template <class T>
TensorT<T> TensorT<T>::clone() const {
  auto out = make(st_->shape, st_->data);
  out.set_requires_grad(st_->requires_grad);
  return out;
}

// --- elementwise ----------------------------------------------------------

template <class T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  auto out = a.detached();
  auto* o = out.mutable_data().data();
  const auto* bd = b.data().data();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] += bd[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape->record("add", {as, bs}, os, [as, bs, os]() {
      const auto& g = os->grad;
      if (as->requires_grad) {
        as->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) as->grad[i] += g[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) bs->grad[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> sub(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "sub");
  auto out = a.detached();
  auto* o = out.mutable_data().data();
  const auto* bd = b.data().data();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] -= bd[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape->record("sub", {as, bs}, os, [as, bs, os]() {
      const auto& g = os->grad;
      if (as->requires_grad) {
        as->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) as->grad[i] += g[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) bs->grad[i] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  auto out = a.detached();
  auto* o = out.mutable_data().data();
  const auto* bd = b.data().data();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] *= bd[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape->record("mul", {as, bs}, os, [as, bs, os]() {
      const auto& g = os->grad;
      if (as->requires_grad) {
        as->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) as->grad[i] += g[i] * bs->data[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) bs->grad[i] += g[i] * as->data[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& a, T c) {
  auto out = a.detached();
  for (auto& v : out.mutable_data()) v *= c;
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    auto as = a.storage(), os = out.storage();
    tape->record("scale", {as}, os, [as, os, c]() {
      if (!as->requires_grad) return;
      as->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += c * os->grad[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> add_bias_row(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& bias) {
  check_2d(x, "add_bias_row");
  require(bias.ndim() == 1 && bias.dim(0) == x.dim(1), ErrorKind::shape,
          "add_bias_row: bias " + shape_str(bias.shape()) + " does not match " +
              shape_str(x.shape()));
  int64_t m = x.dim(0), n = x.dim(1);
  auto out = x.detached();
  auto* o = out.mutable_data().data();
  const auto* bd = bias.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) o[i * n + j] += bd[j];
  if (track(tape, {&x, &bias})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), bs = bias.storage(), os = out.storage();
    tape->record("add_bias_row", {xs, bs}, os, [xs, bs, os, m, n]() {
      const auto& g = os->grad;
      if (xs->requires_grad) {
        xs->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) xs->grad[i] += g[i];
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) bs->grad[j] += g[i * n + j];
      }
    });
  }
  return out;
}

// --- matrix products -------------------------------------------------------

template <class T>
TensorT<T> matmul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  require(a.dim(1) == b.dim(0), ErrorKind::shape,
          "matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = TensorT<T>::zeros({m, n});
  gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape->record("matmul", {as, bs}, os, [as, bs, os, m, k, n]() {
      const T* g = os->grad.data();
      if (as->requires_grad) {
        as->ensure_grad();
        gemm_nt(g, bs->data.data(), as->grad.data(), m, n, k);
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        gemm_tn(as->data.data(), g, bs->grad.data(), k, m, n);
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> matmul_nt(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  require(a.dim(1) == b.dim(1), ErrorKind::shape,
          "matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto out = TensorT<T>::zeros({m, n});
  gemm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape->record("matmul_nt", {as, bs}, os, [as, bs, os, m, k, n]() {
      const T* g = os->grad.data();
      if (as->requires_grad) {
        as->ensure_grad();
        gemm_nn(g, bs->data.data(), as->grad.data(), m, n, k);
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        gemm_tn(g, as->data.data(), bs->grad.data(), n, m, k);
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> transpose(TapeT<T>* tape, const TensorT<T>& a) {
  check_2d(a, "transpose");
  int64_t m = a.dim(0), n = a.dim(1);
  auto out = TensorT<T>::zeros({n, m});
  auto* o = out.mutable_data().data();
  const auto* ad = a.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) o[j * m + i] = ad[i * n + j];
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    auto as = a.storage(), os = out.storage();
    tape->record("transpose", {as}, os, [as, os, m, n]() {
      if (!as->requires_grad) return;
      as->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) as->grad[i * n + j] += os->grad[j * m + i];
    });
  }
  return out;
}

template <class T>
TensorT<T> broadcast_col(TapeT<T>* tape, const TensorT<T>& v, int64_t n) {
  require(v.ndim() == 1, ErrorKind::shape, "broadcast_col: expected 1-d tensor");
  require(n > 0, ErrorKind::shape, "broadcast_col: n must be positive");
  int64_t m = v.dim(0);
  auto out = TensorT<T>::zeros({m, n});
  auto* o = out.mutable_data().data();
  const auto* vd = v.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) o[i * n + j] = vd[i];
  if (track(tape, {&v})) {
    out.set_requires_grad(true);
    auto vs = v.storage(), os = out.storage();
    tape->record("broadcast_col", {vs}, os, [vs, os, m, n]() {
      if (!vs->requires_grad) return;
      vs->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        T acc = T(0);
        for (int64_t j = 0; j < n; ++j) acc += os->grad[i * n + j];
        vs->grad[i] += acc;
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> row(TapeT<T>* tape, const TensorT<T>& x, int64_t i) {
  check_2d(x, "row");
  require(i >= 0 && i < x.dim(0), ErrorKind::shape,
          "row: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  int64_t n = x.dim(1);
  std::vector<T> data(x.data().begin() + i * n, x.data().begin() + (i + 1) * n);
  auto out = TensorT<T>::from({n}, std::move(data));
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("row", {xs}, os, [xs, os, i, n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (int64_t j = 0; j < n; ++j) xs->grad[i * n + j] += os->grad[j];
    });
  }
  return out;
}

template <class T>
TensorT<T> reshape(TapeT<T>* tape, const TensorT<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), ErrorKind::shape,
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = TensorT<T>::from(std::move(shape), {x.data().begin(), x.data().end()});
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("reshape", {xs}, os, [xs, os]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_cols(TapeT<T>* tape, const TensorT<T>& x, int64_t c0, int64_t c1) {
  check_2d(x, "slice_cols");
  require(0 <= c0 && c0 < c1 && c1 <= x.dim(1), ErrorKind::shape,
          "slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
              shape_str(x.shape()));
  int64_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
  auto out = TensorT<T>::zeros({m, w});
  auto* o = out.mutable_data().data();
  const auto* xd = x.data().data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < w; ++j) o[i * w + j] = xd[i * n + c0 + j];
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("slice_cols", {xs}, os, [xs, os, m, n, w, c0]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < w; ++j) xs->grad[i * n + c0 + j] += os->grad[i * w + j];
    });
  }
  return out;
}

template <class T>
TensorT<T> concat_cols(TapeT<T>* tape, const std::vector<TensorT<T>>& parts) {
  require(!parts.empty(), ErrorKind::shape, "concat_cols: no inputs");
  int64_t m = parts[0].dim(0), total = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_cols");
    require(p.dim(0) == m, ErrorKind::shape, "concat_cols: row counts disagree");
    total += p.dim(1);
  }
  auto out = TensorT<T>::zeros({m, total});
  auto* o = out.mutable_data().data();
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t w = p.dim(1);
    const auto* pd = p.data().data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) o[i * total + off + j] = pd[i * w + j];
    off += w;
  }
  bool tracked = false;
  if (tape)
    for (const auto& p : parts) tracked = tracked || p.requires_grad();
  if (tracked) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<Storage<T>>> ins;
    for (const auto& p : parts) ins.push_back(p.storage());
    auto os = out.storage();
    tape->record("concat_cols", ins, os, [ins, os, m, total]() {
      int64_t off2 = 0;
      for (const auto& ps : ins) {
        int64_t w = ps->shape[1];
        if (ps->requires_grad) {
          ps->ensure_grad();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) ps->grad[i * w + j] += os->grad[i * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> stack_rows(TapeT<T>* tape, const std::vector<TensorT<T>>& rows) {
  require(!rows.empty(), ErrorKind::shape, "stack_rows: no inputs");
  int64_t d = rows[0].dim(0);
  for (const auto& r : rows) {
    require(r.ndim() == 1 && r.dim(0) == d, ErrorKind::shape,
            "stack_rows: all rows must be 1-d of equal length");
  }
  int64_t n = static_cast<int64_t>(rows.size());
  auto out = TensorT<T>::zeros({n, d});
  auto* o = out.mutable_data().data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) o[i * d + j] = rows[static_cast<size_t>(i)].data()[j];
  bool tracked = false;
  if (tape)
    for (const auto& r : rows) tracked = tracked || r.requires_grad();
  if (tracked) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<Storage<T>>> ins;
    for (const auto& r : rows) ins.push_back(r.storage());
    auto os = out.storage();
    tape->record("stack_rows", ins, os, [ins, os, d]() {
      for (size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        ins[i]->ensure_grad();
        for (int64_t j = 0; j < d; ++j) ins[i]->grad[j] += os->grad[i * d + j];
      }
    });
  }
  return out;
}

// --- reductions and nonlinearities ------------------------------------------

template <class T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto out = TensorT<T>::from({1}, {acc});
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("sum", {xs}, os, [xs, os]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (auto& g : xs->grad) g += os->grad[0];
    });
  }
  return out;
}

template <class T>
TensorT<T> pick_sum(TapeT<T>* tape, const TensorT<T>& x,
                    const std::vector<std::pair<int64_t, int64_t>>& indices) {
  check_2d(x, "pick_sum");
  int64_t m = x.dim(0), n = x.dim(1);
  T acc = T(0);
  for (auto [r, c] : indices) {
    require(r >= 0 && r < m && c >= 0 && c < n, ErrorKind::shape,
            "pick_sum: index out of range for " + shape_str(x.shape()));
    acc += x.data()[r * n + c];
  }
  auto out = TensorT<T>::from({1}, {acc});
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("pick_sum", {xs}, os, [xs, os, indices, n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (auto [r, c] : indices) xs->grad[r * n + c] += os->grad[0];
    });
  }
  return out;
}

template <class T>
TensorT<T> pick_sum1d(TapeT<T>* tape, const TensorT<T>& x, const std::vector<int64_t>& indices) {
  require(x.ndim() == 1, ErrorKind::shape, "pick_sum1d: expected 1-d tensor");
  int64_t n = x.dim(0);
  T acc = T(0);
  for (int64_t i : indices) {
    require(i >= 0 && i < n, ErrorKind::shape, "pick_sum1d: index out of range");
    acc += x.data()[i];
  }
  auto out = TensorT<T>::from({1}, {acc});
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("pick_sum1d", {xs}, os, [xs, os, indices]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (int64_t i : indices) xs->grad[i] += os->grad[0];
    });
  }
  return out;
}

template <class T>
TensorT<T> relu(TapeT<T>* tape, const TensorT<T>& x) {
  auto out = x.detached();
  for (auto& v : out.mutable_data())
    if (v < T(0)) v = T(0);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("relu", {xs}, os, [xs, os]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i)
        if (xs->data[i] > T(0)) xs->grad[i] += os->grad[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> silu(TapeT<T>* tape, const TensorT<T>& x) {
  auto out = x.detached();
  for (auto& v : out.mutable_data()) {
    T s = T(1) / (T(1) + std::exp(-v));
    v = v * s;
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("silu", {xs}, os, [xs, os]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) {
        T v = xs->data[i];
        T s = T(1) / (T(1) + std::exp(-v));
        xs->grad[i] += os->grad[i] * s * (T(1) + v * (T(1) - s));
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> dropout(TapeT<T>* tape, const TensorT<T>& x, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, ErrorKind::config, "dropout: p must be in [0,1)");
  if (p == 0.0) return x;
  T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(static_cast<size_t>(x.numel()));
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  auto out = x.detached();
  auto* o = out.mutable_data().data();
  for (int64_t i = 0; i < out.numel(); ++i) o[i] *= mask[static_cast<size_t>(i)];
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("dropout", {xs}, os, [xs, os, mask = std::move(mask)]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i] * mask[i];
    });
  }
  return out;
}

namespace {

// Shared softmax backward: dx = p * (g - sum(g * p)) row-wise; rows with all
// probabilities zero outside the allowed prefix fall out naturally.
template <class T>
void softmax_rows_backward(Storage<T>& xs, const Storage<T>& os, int64_t m, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* p = os.data.data() + i * n;
    const T* g = os.grad.data() + i * n;
    T dot = T(0);
    for (int64_t j = 0; j < n; ++j) dot += g[j] * p[j];
    T* dx = xs.grad.data() + i * n;
    for (int64_t j = 0; j < n; ++j) dx[j] += p[j] * (g[j] - dot);
  }
}

template <class T>
void softmax_fill_row(const T* x, T* o, int64_t width) {
  T mx = x[0];
  for (int64_t j = 1; j < width; ++j) mx = std::max(mx, x[j]);
  T z = T(0);
  for (int64_t j = 0; j < width; ++j) {
    o[j] = std::exp(x[j] - mx);
    z += o[j];
  }
  for (int64_t j = 0; j < width; ++j) o[j] /= z;
}

}  // namespace

template <class T>
TensorT<T> softmax_rows(TapeT<T>* tape, const TensorT<T>& x) {
  check_2d(x, "softmax_rows");
  int64_t m = x.dim(0), n = x.dim(1);
  auto out = TensorT<T>::zeros({m, n});
  for (int64_t i = 0; i < m; ++i)
    softmax_fill_row(x.data().data() + i * n, out.mutable_data().data() + i * n, n);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("softmax_rows", {xs}, os, [xs, os, m, n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      softmax_rows_backward(*xs, *os, m, n);
    });
  }
  return out;
}

template <class T>
TensorT<T> causal_softmax_rows(TapeT<T>* tape, const TensorT<T>& x) {
  check_2d(x, "causal_softmax_rows");
  require(x.dim(0) == x.dim(1), ErrorKind::shape,
          "causal_softmax_rows: expected square matrix, got " + shape_str(x.shape()));
  int64_t n = x.dim(0);
  auto out = TensorT<T>::zeros({n, n});
  for (int64_t i = 0; i < n; ++i)
    softmax_fill_row(x.data().data() + i * n, out.mutable_data().data() + i * n, i + 1);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("causal_softmax_rows", {xs}, os, [xs, os, n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      softmax_rows_backward(*xs, *os, n, n);
    });
  }
  return out;
}

template <class T>
TensorT<T> logsumexp_rows(TapeT<T>* tape, const TensorT<T>& x) {
  check_2d(x, "logsumexp_rows");
  int64_t m = x.dim(0), n = x.dim(1);
  auto out = TensorT<T>::zeros({m});
  for (int64_t i = 0; i < m; ++i) {
    const T* xi = x.data().data() + i * n;
    T mx = xi[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    T z = T(0);
    for (int64_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    out.mutable_data()[static_cast<size_t>(i)] = mx + std::log(z);
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("logsumexp_rows", {xs}, os, [xs, os, m, n]() {
      if (!xs->requires_grad) return;
      xs->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        const T* xi = xs->data.data() + i * n;
        T lse = os->data[static_cast<size_t>(i)];
        T g = os->grad[static_cast<size_t>(i)];
        T* dx = xs->grad.data() + i * n;
        for (int64_t j = 0; j < n; ++j) dx[j] += g * std::exp(xi[j] - lse);
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> rmsnorm_rows(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gain, double eps) {
  check_2d(x, "rmsnorm_rows");
  require(gain.ndim() == 1 && gain.dim(0) == x.dim(1), ErrorKind::shape,
          "rmsnorm_rows: gain " + shape_str(gain.shape()) + " does not match " +
              shape_str(x.shape()));
  int64_t m = x.dim(0), d = x.dim(1);
  auto out = TensorT<T>::zeros({m, d});
  std::vector<T> rms(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    const T* xi = x.data().data() + i * d;
    T ss = T(0);
    for (int64_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
    T r = std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    rms[static_cast<size_t>(i)] = r;
    T* oi = out.mutable_data().data() + i * d;
    for (int64_t j = 0; j < d; ++j) oi[j] = gain.data()[j] * xi[j] / r;
  }
  if (track(tape, {&x, &gain})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), gs = gain.storage(), os = out.storage();
    tape->record("rmsnorm_rows", {xs, gs}, os, [xs, gs, os, m, d, rms = std::move(rms)]() {
      for (int64_t i = 0; i < m; ++i) {
        const T* xi = xs->data.data() + i * d;
        const T* gi = os->grad.data() + i * d;
        T r = rms[static_cast<size_t>(i)];
        if (xs->requires_grad) {
          xs->ensure_grad();
          // y_j = gain_j x_j / r with r = sqrt(mean(x^2) + eps):
          // dx_j = g_j gain_j / r - x_j * sum_k(g_k gain_k x_k) / (d r^3)
          T dot = T(0);
          for (int64_t j = 0; j < d; ++j) dot += gi[j] * gs->data[j] * xi[j];
          T* dx = xs->grad.data() + i * d;
          T r3 = r * r * r;
          for (int64_t j = 0; j < d; ++j)
            dx[j] += gi[j] * gs->data[j] / r - xi[j] * dot / (static_cast<T>(d) * r3);
        }
        if (gs->requires_grad) {
          gs->ensure_grad();
          for (int64_t j = 0; j < d; ++j) gs->grad[j] += gi[j] * xi[j] / r;
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> rope_rows(TapeT<T>* tape, const TensorT<T>& x, std::span<const int32_t> positions,
                     double theta_base) {
  check_2d(x, "rope_rows");
  int64_t t = x.dim(0), d = x.dim(1);
  require(d % 2 == 0, ErrorKind::shape, "rope_rows: head dimension must be even");
  require(static_cast<int64_t>(positions.size()) == t, ErrorKind::shape,
          "rope_rows: positions length does not match rows");
  // Angles per (row, pair): pos * theta_base^(-2i/d).
  std::vector<T> cs(static_cast<size_t>(t * d / 2)), sn(static_cast<size_t>(t * d / 2));
  for (int64_t r = 0; r < t; ++r) {
    for (int64_t i = 0; i < d / 2; ++i) {
      double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      double ang = static_cast<double>(positions[static_cast<size_t>(r)]) * freq;
      cs[static_cast<size_t>(r * (d / 2) + i)] = static_cast<T>(std::cos(ang));
      sn[static_cast<size_t>(r * (d / 2) + i)] = static_cast<T>(std::sin(ang));
    }
  }
  auto out = TensorT<T>::zeros({t, d});
  auto* o = out.mutable_data().data();
  const auto* xd = x.data().data();
  for (int64_t r = 0; r < t; ++r) {
    for (int64_t i = 0; i < d / 2; ++i) {
      T c = cs[static_cast<size_t>(r * (d / 2) + i)];
      T s = sn[static_cast<size_t>(r * (d / 2) + i)];
      T x0 = xd[r * d + 2 * i], x1 = xd[r * d + 2 * i + 1];
      o[r * d + 2 * i] = x0 * c - x1 * s;
      o[r * d + 2 * i + 1] = x0 * s + x1 * c;
    }
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape->record("rope_rows", {xs}, os,
                 [xs, os, t, d, cs = std::move(cs), sn = std::move(sn)]() {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   // Inverse rotation: rotate the output gradient by -angle.
                   for (int64_t r = 0; r < t; ++r) {
                     for (int64_t i = 0; i < d / 2; ++i) {
                       T c = cs[static_cast<size_t>(r * (d / 2) + i)];
                       T s = sn[static_cast<size_t>(r * (d / 2) + i)];
                       T g0 = os->grad[r * d + 2 * i], g1 = os->grad[r * d + 2 * i + 1];
                       xs->grad[r * d + 2 * i] += g0 * c + g1 * s;
                       xs->grad[r * d + 2 * i + 1] += -g0 * s + g1 * c;
                     }
                   }
                 });
  }
  return out;
}

template <class T>
TensorT<T> embedding_rows(TapeT<T>* tape, const TensorT<T>& table, std::span<const int32_t> ids) {
  check_2d(table, "embedding_rows");
  int64_t v = table.dim(0), d = table.dim(1);
  int64_t t = static_cast<int64_t>(ids.size());
  require(t > 0, ErrorKind::shape, "embedding_rows: empty id sequence");
  auto out = TensorT<T>::zeros({t, d});
  auto* o = out.mutable_data().data();
  for (int64_t r = 0; r < t; ++r) {
    int32_t id = ids[static_cast<size_t>(r)];
    require(id >= 0 && id < v, ErrorKind::vocab,
            "embedding_rows: token id " + std::to_string(id) + " out of range [0," +
                std::to_string(v) + ")");
    const T* src = table.data().data() + static_cast<int64_t>(id) * d;
    for (int64_t j = 0; j < d; ++j) o[r * d + j] = src[j];
  }
  if (track(tape, {&table})) {
    out.set_requires_grad(true);
    auto ts = table.storage(), os = out.storage();
    std::vector<int32_t> ids_copy(ids.begin(), ids.end());
    tape->record("embedding_rows", {ts}, os, [ts, os, d, t, ids_copy = std::move(ids_copy)]() {
      if (!ts->requires_grad) return;
      ts->ensure_grad();
      for (int64_t r = 0; r < t; ++r) {
        T* dst = ts->grad.data() + static_cast<int64_t>(ids_copy[static_cast<size_t>(r)]) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += os->grad[r * d + j];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> cross_entropy_rows(TapeT<T>* tape, const TensorT<T>& logits,
                              std::span<const int32_t> targets, int32_t ignore_index) {
  check_2d(logits, "cross_entropy_rows");
  int64_t m = logits.dim(0), n = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == m, ErrorKind::shape,
          "cross_entropy_rows: targets length " + std::to_string(targets.size()) +
              " does not match rows " + std::to_string(m));
  int64_t kept = 0;
  T acc = T(0);
  for (int64_t i = 0; i < m; ++i) {
    int32_t tgt = targets[static_cast<size_t>(i)];
    if (tgt == ignore_index) continue;
    require(tgt >= 0 && tgt < n, ErrorKind::vocab,
            "cross_entropy_rows: target " + std::to_string(tgt) + " out of range [0," +
                std::to_string(n) + ")");
    const T* xi = logits.data().data() + i * n;
    T mx = xi[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    T z = T(0);
    for (int64_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    acc += mx + std::log(z) - xi[tgt];
    ++kept;
  }
  require(kept > 0, ErrorKind::shape, "cross_entropy_rows: no rows with a real target");
  T loss = acc / static_cast<T>(kept);
  require(std::isfinite(static_cast<double>(loss)), ErrorKind::numeric,
          "cross_entropy_rows: non-finite loss");
  auto out = TensorT<T>::from({1}, {loss});
  if (track(tape, {&logits})) {
    out.set_requires_grad(true);
    auto xs = logits.storage(), os = out.storage();
    std::vector<int32_t> tgt_copy(targets.begin(), targets.end());
    tape->record("cross_entropy_rows", {xs}, os,
                 [xs, os, m, n, kept, ignore_index, tgt_copy = std::move(tgt_copy)]() {
                   if (!xs->requires_grad) return;
                   xs->ensure_grad();
                   T g = os->grad[0] / static_cast<T>(kept);
                   for (int64_t i = 0; i < m; ++i) {
                     int32_t tgt = tgt_copy[static_cast<size_t>(i)];
                     if (tgt == ignore_index) continue;
                     const T* xi = xs->data.data() + i * n;
                     T* dx = xs->grad.data() + i * n;
                     T mx = xi[0];
                     for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
                     T z = T(0);
                     for (int64_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
                     for (int64_t j = 0; j < n; ++j) {
                       T p = std::exp(xi[j] - mx) / z;
                       dx[j] += g * (p - (j == tgt ? T(1) : T(0)));
                     }
                   }
                 });
  }
  return out;
}

template <class T>
int64_t argmax_row(const TensorT<T>& x, int64_t r) {
  check_2d(x, "argmax_row");
  require(r >= 0 && r < x.dim(0), ErrorKind::shape, "argmax_row: row out of range");
  int64_t n = x.dim(1);
  const T* xi = x.data().data() + r * n;
  int64_t best = 0;
  for (int64_t j = 1; j < n; ++j)
    if (xi[j] > xi[best]) best = j;
  return best;
}

// --- backward and gradient checking ----------------------------------------

template <class T>
void backward(const TensorT<T>& loss, TapeT<T>& tape) {
  require(loss.defined() && loss.numel() == 1, ErrorKind::shape,
          "backward: loss must be a defined scalar");
  for (const auto& op : tape.ops()) {
    op.output->ensure_grad();
    std::fill(op.output->grad.begin(), op.output->grad.end(), T(0));
  }
  loss.storage()->ensure_grad();
  loss.storage()->grad[0] += T(1);
  const auto& ops = tape.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) it->backward();
}

template <class T>
T finite_diff_check(const std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)>& f,
                    const TensorT<T>& x, T eps) {
  require(eps > T(0), ErrorKind::numeric, "finite_diff_check: eps must be positive");
  auto probe = x.detached();
  probe.set_requires_grad(true);
  TapeT<T> tape;
  auto y = f(tape, probe);
  require(y.numel() == 1, ErrorKind::shape, "finite_diff_check: f must return a scalar");
  require(std::isfinite(static_cast<double>(y.item())), ErrorKind::numeric,
          "finite_diff_check: f(x) is non-finite");
  backward(y, tape);
  std::vector<T> analytic(probe.grad().begin(), probe.grad().end());
  if (analytic.empty()) analytic.assign(static_cast<size_t>(x.numel()), T(0));

  T worst = T(0);
  for (int64_t i = 0; i < x.numel(); ++i) {
    auto eval = [&](T delta) {
      auto xp = x.detached();
      xp.mutable_data()[static_cast<size_t>(i)] += delta;
      TapeT<T> scratch;
      T v = f(scratch, xp).item();
      require(std::isfinite(static_cast<double>(v)), ErrorKind::numeric,
              "finite_diff_check: f(x +/- eps) is non-finite");
      return v;
    };
    T central = (eval(eps) - eval(-eps)) / (T(2) * eps);
    T err = std::abs(analytic[static_cast<size_t>(i)] - central) /
            (std::abs(central) + static_cast<T>(1e-8));
    worst = std::max(worst, err);
  }
  return worst;
}

// --- explicit instantiations ------------------------------------------------

#define METALM_INSTANTIATE(T)                                                                  \
  template class TensorT<T>;                                                                   \
  template TensorT<T> add<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> sub<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> mul<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);                 \
  template TensorT<T> scale<T>(TapeT<T>*, const TensorT<T>&, T);                               \
  template TensorT<T> add_bias_row<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);        \
  template TensorT<T> matmul<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> matmul_nt<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&);           \
  template TensorT<T> transpose<T>(TapeT<T>*, const TensorT<T>&);                              \
  template TensorT<T> broadcast_col<T>(TapeT<T>*, const TensorT<T>&, int64_t);                 \
  template TensorT<T> row<T>(TapeT<T>*, const TensorT<T>&, int64_t);                           \
  template TensorT<T> reshape<T>(TapeT<T>*, const TensorT<T>&, Shape);                         \
  template TensorT<T> slice_cols<T>(TapeT<T>*, const TensorT<T>&, int64_t, int64_t);           \
  template TensorT<T> concat_cols<T>(TapeT<T>*, const std::vector<TensorT<T>>&);               \
  template TensorT<T> stack_rows<T>(TapeT<T>*, const std::vector<TensorT<T>>&);                \
  template TensorT<T> sum<T>(TapeT<T>*, const TensorT<T>&);                                    \
  template TensorT<T> pick_sum<T>(TapeT<T>*, const TensorT<T>&,                                \
                                  const std::vector<std::pair<int64_t, int64_t>>&);            \
  template TensorT<T> pick_sum1d<T>(TapeT<T>*, const TensorT<T>&, const std::vector<int64_t>&); \
  template TensorT<T> relu<T>(TapeT<T>*, const TensorT<T>&);                                   \
  template TensorT<T> silu<T>(TapeT<T>*, const TensorT<T>&);                                   \
  template TensorT<T> dropout<T>(TapeT<T>*, const TensorT<T>&, double, Rng&);                  \
  template TensorT<T> softmax_rows<T>(TapeT<T>*, const TensorT<T>&);                           \
  template TensorT<T> causal_softmax_rows<T>(TapeT<T>*, const TensorT<T>&);                    \
  template TensorT<T> logsumexp_rows<T>(TapeT<T>*, const TensorT<T>&);                         \
  template TensorT<T> rmsnorm_rows<T>(TapeT<T>*, const TensorT<T>&, const TensorT<T>&, double); \
  template TensorT<T> rope_rows<T>(TapeT<T>*, const TensorT<T>&, std::span<const int32_t>,     \
                                   double);                                                    \
  template TensorT<T> embedding_rows<T>(TapeT<T>*, const TensorT<T>&, std::span<const int32_t>); \
  template TensorT<T> cross_entropy_rows<T>(TapeT<T>*, const TensorT<T>&,                      \
                                            std::span<const int32_t>, int32_t);                \
  template int64_t argmax_row<T>(const TensorT<T>&, int64_t);                                  \
  template void backward<T>(const TensorT<T>&, TapeT<T>&);                                     \
  template T finite_diff_check<T>(                                                             \
      const std::function<TensorT<T>(TapeT<T>&, const TensorT<T>&)>&, const TensorT<T>&, T);

METALM_INSTANTIATE(float)
METALM_INSTANTIATE(double)

#undef METALM_INSTANTIATE

}  // namespace metalm
