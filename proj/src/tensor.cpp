// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "medtune/errors.hpp"
#include "medtune/parallel.hpp"

namespace medtune {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

template <typename T>
thread_local Tape<T>* active_tape = nullptr;

// Returns the tape to record on, or nullptr when no input needs a gradient.
template <typename T>
Tape<T>* recording(std::initializer_list<const BasicTensor<T>*> inputs) {
  Tape<T>* tape = active_tape<T>;
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
Tape<T>* recording(const std::vector<BasicTensor<T>>& inputs) {
  Tape<T>* tape = active_tape<T>;
  if (!tape) return nullptr;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return tape;
  }
  return nullptr;
}

constexpr std::size_t kRowsPerWorker = 16;

}  // namespace

// ---- BasicTensor -----------------------------------------------------------

template <typename T>
typename BasicTensor<T>::Impl& BasicTensor<T>::impl() const {
  if (!impl_) throw ContractError("access to undefined tensor");
  return *impl_;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = product(shape);
  return from_data(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
  }
  if (product(shape) != data.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  return impl().shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = impl().shape;
  if (axis >= s.size()) throw DimensionError("axis out of range for shape " + shape_string(s));
  return s[axis];
}

template <typename T>
std::size_t BasicTensor<T>::numel() const {
  return impl().data.size();
}

template <typename T>
std::span<T> BasicTensor<T>::data() {
  return impl().data;
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  return impl().data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
  return impl().data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return impl().requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
  impl().requires_grad = value;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return !impl().grad.empty();
}

template <typename T>
std::span<T> BasicTensor<T>::grad() {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl().grad;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl().grad;
}

template <typename T>
std::span<T> BasicTensor<T>::ensure_grad() const {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.data.size(), T(0));
  return im.grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  auto& im = impl();
  im.grad.clear();
  im.grad.shrink_to_fit();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return from_data(shape(), impl().data, requires_grad());
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_data(shape(), impl().data, false);
}

// ---- Tape ------------------------------------------------------------------

template <typename T>
Tape<T>::Tape() : previous_(active_tape<T>) {
  active_tape<T> = this;
}

template <typename T>
Tape<T>::~Tape() {
  active_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::current() noexcept {
  return active_tape<T>;
}

template <typename T>
void Tape<T>::record(std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
                     std::function<void()> backward) {
  output.set_requires_grad(true);
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                         [&](const Node& n) { return n.output.is(loss); });
  if (it == nodes_.rend()) throw ContractError("backward: loss was not produced through this tape");
  const std::size_t last = static_cast<std::size_t>(nodes_.rend() - it) - 1;

  for (auto& node : nodes_) node.output.zero_grad();
  BasicTensor<T> seed = loss;
  seed.ensure_grad()[0] = T(1);

  for (std::size_t i = last + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.output.has_grad()) continue;
    node.backward();
  }
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  auto out = BasicTensor<T>::zeros({m, n});
  {
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = out.data().data();
    parallel_for(m, kRowsPerWorker, [=](std::size_t r0, std::size_t r1) {
      for (std::size_t i = r0; i < r1; ++i) {
        T* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = pa[i * k + p];
          const T* brow = pb + p * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    });
  }
  if (auto* tape = recording<T>({&a, &b})) {
    tape->record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const T* gc = out.grad().data();
      if (a.requires_grad()) {
        T* ga = a.ensure_grad().data();
        const T* pb = b.data().data();
        parallel_for(m, kRowsPerWorker, [=](std::size_t r0, std::size_t r1) {
          for (std::size_t i = r0; i < r1; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const T* brow = pb + p * n;
              const T* grow = gc + i * n;
              T acc = T(0);
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        });
      }
      if (b.requires_grad()) {
        T* gb = b.ensure_grad().data();
        const T* pa = a.data().data();
        parallel_for(k, kRowsPerWorker, [=](std::size_t p0, std::size_t p1) {
          for (std::size_t p = p0; p < p1; ++p) {
            T* gbrow = gb + p * n;
            for (std::size_t i = 0; i < m; ++i) {
              const T av = pa[i * k + p];
              const T* grow = gc + i * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        });
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto out = BasicTensor<T>::zeros({n, m});
  const auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  if (auto* tape = recording<T>({&a})) {
    tape->record({a}, out, [a, out, m, n]() mutable {
      auto ga = a.ensure_grad();
      const auto go = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

// ---- elementwise -------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  auto out = BasicTensor<T>::zeros(a.shape());
  const auto pa = a.data(), pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
  if (auto* tape = recording<T>({&a, &b})) {
    tape->record({a, b}, out, [a, b, out]() mutable {
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& a, const BasicTensor<T>& bias) {
  require_rank(a, 2, "add_row");
  require_rank(bias, 1, "add_row");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.dim(0) != n) {
    throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " does not match rows of " +
                         shape_string(a.shape()));
  }
  auto out = BasicTensor<T>::zeros(a.shape());
  const auto pa = a.data(), pb = bias.data();
  auto po = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) po[i * n + j] = pa[i * n + j] + pb[j];
  if (auto* tape = recording<T>({&a, &bias})) {
    tape->record({a, bias}, out, [a, bias, out, m, n]() mutable {
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto out = BasicTensor<T>::zeros(a.shape());
  const auto pa = a.data(), pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
  if (auto* tape = recording<T>({&a, &b})) {
    tape->record({a, b}, out, [a, b, out]() mutable {
      const auto go = out.grad();
      const auto pa = a.data(), pb = b.data();
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  auto out = BasicTensor<T>::zeros(a.shape());
  const auto pa = a.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * factor;
  if (auto* tape = recording<T>({&a})) {
    tape->record({a}, out, [a, out, factor]() mutable {
      const auto go = out.grad();
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  auto out = BasicTensor<T>::scalar(total);
  if (auto* tape = recording<T>({&a})) {
    tape->record({a}, out, [a, out]() mutable {
      const T g = out.grad()[0];
      for (T& v : a.ensure_grad()) v += g;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
  auto out = BasicTensor<T>::zeros(a.shape());
  const auto pa = a.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = pa[i] / (T(1) + std::exp(-pa[i]));
  if (auto* tape = recording<T>({&a})) {
    tape->record({a}, out, [a, out]() mutable {
      const auto go = out.grad();
      const auto pa = a.data();
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-pa[i]));
        ga[i] += go[i] * s * (T(1) + pa[i] * (T(1) - s));
      }
    });
  }
  return out;
}

namespace {

// Softmax over the first `width` entries of each row; the rest stay zero.
template <typename T>
void softmax_prefix(const T* in, T* out, std::size_t width) {
  T mx = in[0];
  for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
  T total = T(0);
  for (std::size_t j = 0; j < width; ++j) {
    out[j] = std::exp(in[j] - mx);
    total += out[j];
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < width; ++j) out[j] *= inv;
}

template <typename T>
BasicTensor<T> softmax_impl(const BasicTensor<T>& a, bool causal, const char* op) {
  require_rank(a, 2, op);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (causal && m > n) throw DimensionError(std::string(op) + ": needs at least as many columns as rows");
  auto out = BasicTensor<T>::zeros(a.shape());
  const auto pa = a.data();
  auto po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    softmax_prefix(pa.data() + i * n, po.data() + i * n, causal ? i + 1 : n);
  }
  if (auto* tape = recording<T>({&a})) {
    tape->record({a}, out, [a, out, m, n, causal]() mutable {
      const auto go = out.grad();
      const auto py = out.data();
      auto ga = a.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t width = causal ? i + 1 : n;
        const T* y = py.data() + i * n;
        const T* g = go.data() + i * n;
        T dot = T(0);
        for (std::size_t j = 0; j < width; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < width; ++j) ga[i * n + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& a) {
  return softmax_impl(a, false, "softmax_rows");
}

template <typename T>
BasicTensor<T> causal_softmax_rows(const BasicTensor<T>& scores) {
  return softmax_impl(scores, true, "causal_softmax_rows");
}

template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, T eps) {
  require_rank(x, 2, "rms_norm");
  require_rank(gain, 1, "rms_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.dim(0) != n) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " vs input " +
                         shape_string(x.shape()));
  }
  auto out = BasicTensor<T>::zeros(x.shape());
  std::vector<T> inv_rms(m);
  const auto px = x.data(), pg = gain.data();
  auto po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    T ss = T(0);
    for (std::size_t j = 0; j < n; ++j) ss += px[i * n + j] * px[i * n + j];
    inv_rms[i] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] * inv_rms[i] * pg[j];
  }
  if (auto* tape = recording<T>({&x, &gain})) {
    tape->record({x, gain}, out, [x, gain, out, inv_rms = std::move(inv_rms), m, n]() mutable {
      const auto go = out.grad();
      const auto px = x.data(), pg = gain.data();
      if (gain.requires_grad()) {
        auto gg = gain.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * px[i * n + j] * inv_rms[i];
      }
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const T r = inv_rms[i];
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * pg[j] * px[i * n + j] * r;
          dot /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T xhat = px[i * n + j] * r;
            gx[i * n + j] += r * (go[i * n + j] * pg[j] - xhat * dot);
          }
        }
      }
    });
  }
  return out;
}

// ---- indexing ------------------------------------------------------------------

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> tokens) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (tokens.empty()) throw InputError("embedding: empty token sequence");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw InputError("token id " + std::to_string(t) + " out of range for vocabulary of " +
                       std::to_string(vocab));
    }
  }
  const std::size_t len = tokens.size();
  auto out = BasicTensor<T>::zeros({len, d});
  const auto pt = table.data();
  auto po = out.data();
  for (std::size_t i = 0; i < len; ++i) {
    std::copy_n(pt.data() + static_cast<std::size_t>(tokens[i]) * d, d, po.data() + i * d);
  }
  if (auto* tape = recording<T>({&table})) {
    std::vector<int> ids(tokens.begin(), tokens.end());
    tape->record({table}, out, [table, out, ids = std::move(ids), d]() mutable {
      const auto go = out.grad();
      auto gt = table.ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        T* row = gt.data() + static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += go[i * d + j];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (count == 0 || begin + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(x.shape()));
  }
  auto out = BasicTensor<T>::zeros({m, count});
  const auto px = x.data();
  auto po = out.data();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(px.data() + i * n + begin, count, po.data() + i * count);
  if (auto* tape = recording<T>({&x})) {
    tape->record({x}, out, [x, out, m, n, begin, count]() mutable {
      const auto go = out.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += go[i * count + j];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts.front().dim(0);
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw DimensionError("concat_cols: row counts differ");
    n += p.dim(1);
  }
  auto out = BasicTensor<T>::zeros({m, n});
  auto po = out.data();
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    const auto pp = p.data();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(pp.data() + i * w, w, po.data() + i * n + col);
    col += w;
  }
  if (auto* tape = recording<T>(parts)) {
    tape->record(parts, out, [parts, out, m, n]() mutable {
      const auto go = out.grad();
      std::size_t col = 0;
      for (auto& p : parts) {
        const std::size_t w = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += go[i * n + col + j];
        }
        col += w;
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().dim(1);
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) throw DimensionError("concat_rows: column counts differ");
    m += p.dim(0);
  }
  std::vector<T> data;
  data.reserve(m * n);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  auto out = BasicTensor<T>::from_data({m, n}, std::move(data));
  if (auto* tape = recording<T>(parts)) {
    tape->record(parts, out, [parts, out]() mutable {
      const auto go = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.ensure_grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::size_t n_heads, double theta,
                    std::size_t position_offset) {
  require_rank(x, 2, "rope");
  const std::size_t len = x.dim(0), width = x.dim(1);
  if (n_heads == 0 || width % n_heads != 0 || (width / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(width) + " is not n_heads x even head_dim");
  }
  const std::size_t head_dim = width / n_heads;
  const std::size_t half = head_dim / 2;
  // cos/sin table shared by forward and backward.
  std::vector<T> cos_t(len * half), sin_t(len * half);
  for (std::size_t t = 0; t < len; ++t) {
    const double pos = static_cast<double>(t + position_offset);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      cos_t[t * half + i] = static_cast<T>(std::cos(pos * freq));
      sin_t[t * half + i] = static_cast<T>(std::sin(pos * freq));
    }
  }
  auto out = BasicTensor<T>::zeros(x.shape());
  const auto px = x.data();
  auto po = out.data();
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t k = t * width + h * head_dim + 2 * i;
        const T c = cos_t[t * half + i], s = sin_t[t * half + i];
        po[k] = px[k] * c - px[k + 1] * s;
        po[k + 1] = px[k] * s + px[k + 1] * c;
      }
  if (auto* tape = recording<T>({&x})) {
    tape->record({x}, out,
                 [x, out, cos_t = std::move(cos_t), sin_t = std::move(sin_t), len, width, n_heads, head_dim,
                  half]() mutable {
                   const auto go = out.grad();
                   auto gx = x.ensure_grad();
                   for (std::size_t t = 0; t < len; ++t)
                     for (std::size_t h = 0; h < n_heads; ++h)
                       for (std::size_t i = 0; i < half; ++i) {
                         const std::size_t k = t * width + h * head_dim + 2 * i;
                         const T c = cos_t[t * half + i], s = sin_t[t * half + i];
                         gx[k] += go[k] * c + go[k + 1] * s;
                         gx[k + 1] += -go[k] * s + go[k + 1] * c;
                       }
                 });
  }
  return out;
}

template <typename T>
BasicTensor<T> cross_entropy_masked(const BasicTensor<T>& logits, std::span<const int> targets,
                                    std::span<const std::uint8_t> mask) {
  require_rank(logits, 2, "cross_entropy_masked");
  const std::size_t len = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != len || mask.size() != len) {
    throw DimensionError("cross_entropy_masked: logits " + shape_string(logits.shape()) + " with " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                         " mask entries");
  }
  std::size_t support = 0;
  for (std::size_t t = 0; t < len; ++t) {
    if (!mask[t]) continue;
    ++support;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab) {
      throw InputError("cross_entropy_masked: target " + std::to_string(targets[t]) + " out of range");
    }
  }
  if (support == 0) throw EmptyLossSupport();

  const auto pl = logits.data();
  std::vector<T> probs;  // softmax rows of the supported positions, in order
  probs.reserve(support * vocab);
  T total = T(0);
  for (std::size_t t = 0; t < len; ++t) {
    if (!mask[t]) continue;
    const T* row = pl.data() + t * vocab;
    const std::size_t base = probs.size();
    probs.resize(base + vocab);
    softmax_prefix(row, probs.data() + base, vocab);
    T mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
    T se = T(0);
    for (std::size_t j = 0; j < vocab; ++j) se += std::exp(row[j] - mx);
    total += mx + std::log(se) - row[targets[t]];
  }
  const T inv_support = T(1) / static_cast<T>(support);
  auto out = BasicTensor<T>::scalar(total * inv_support);
  if (auto* tape = recording<T>({&logits})) {
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    tape->record({logits}, out,
                 [logits, out, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), vocab,
                  inv_support]() mutable {
                   const T g = out.grad()[0] * inv_support;
                   auto gl = logits.ensure_grad();
                   std::size_t row = 0;
                   for (std::size_t t = 0; t < mk.size(); ++t) {
                     if (!mk[t]) continue;
                     const T* p = probs.data() + row * vocab;
                     T* dst = gl.data() + t * vocab;
                     for (std::size_t j = 0; j < vocab; ++j) dst[j] += g * p[j];
                     dst[tg[t]] -= g;
                     ++row;
                   }
                 });
  }
  return out;
}

// ---- instantiations ----------------------------------------------------------

#define MEDTUNE_INSTANTIATE(T)                                                                     \
  template class BasicTensor<T>;                                                                   \
  template class Tape<T>;                                                                          \
  template void backward<T>(const BasicTensor<T>&);                                                \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> transpose<T>(const BasicTensor<T>&);                                     \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> add_row<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                      \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                           \
  template BasicTensor<T> silu<T>(const BasicTensor<T>&);                                          \
  template BasicTensor<T> softmax_rows<T>(const BasicTensor<T>&);                                  \
  template BasicTensor<T> causal_softmax_rows<T>(const BasicTensor<T>&);                           \
  template BasicTensor<T> rms_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&, T);            \
  template BasicTensor<T> embedding<T>(const BasicTensor<T>&, std::span<const int>);               \
  template BasicTensor<T> slice_cols<T>(const BasicTensor<T>&, std::size_t, std::size_t);          \
  template BasicTensor<T> concat_cols<T>(const std::vector<BasicTensor<T>>&);                      \
  template BasicTensor<T> concat_rows<T>(const std::vector<BasicTensor<T>>&);                      \
  template BasicTensor<T> rope<T>(const BasicTensor<T>&, std::size_t, double, std::size_t);        \
  template BasicTensor<T> cross_entropy_masked<T>(const BasicTensor<T>&, std::span<const int>,     \
                                                  std::span<const std::uint8_t>);

MEDTUNE_INSTANTIATE(float)
MEDTUNE_INSTANTIATE(double)

#undef MEDTUNE_INSTANTIATE

}  // namespace medtune
