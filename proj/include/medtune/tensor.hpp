// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a define-by-run gradient tape.
//
// A BasicTensor is a shared handle: copies alias the same storage, which is
// what lets an optimizer see the gradients the tape wrote into a parameter.
// Use clone() for an independent copy.
//
// Ops record onto the tape that is active on the calling thread, and only
// when at least one input requires a gradient. Without an active Tape every
// op is a plain forward computation.
//
//   Tape<float> tape;
//   auto loss = cross_entropy_masked(forward(...), targets, mask);
//   tape.backward(loss);
//
// Everything is instantiated for float (training) and double (gradient
// oracles in tests).

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace medtune {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<T> data();
  std::span<const T> data() const;
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<T> grad();
  std::span<const T> grad() const;
  // Allocates a zero gradient if none exists yet. Const because a tensor is a
  // handle: backward closures hold const copies of their inputs.
  std::span<T> ensure_grad() const;
  void zero_grad();

  // Independent copy of the values; keeps requires_grad, drops the gradient.
  BasicTensor clone() const;
  // Independent copy that never requires a gradient.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(numel());
    const auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return BasicTensor<U>::from_data(shape(), std::move(out), requires_grad());
  }

  bool is(const BasicTensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  explicit BasicTensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Records operations while alive and installs itself as the active tape of
// the current thread; the destructor restores the previously active one.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() noexcept;

  void record(std::vector<BasicTensor<T>> inputs, BasicTensor<T> output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and replays the recorded backward rules in
  // reverse order. Leaf gradients accumulate across calls; gradients of
  // recorded intermediates are reset first.
  void backward(const BasicTensor<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    std::vector<BasicTensor<T>> inputs;
    BasicTensor<T> output;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
};

// Uses the active tape; throws ContractError when there is none.
template <typename T>
void backward(const BasicTensor<T>& loss);

// ---- ops -------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
// a[m, n] + bias[n] broadcast over rows; the only broadcasting op.
template <typename T>
BasicTensor<T> add_row(const BasicTensor<T>& a, const BasicTensor<T>& bias);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& a);
// Row i is a softmax over columns 0..i; columns after i are exactly zero and
// their inputs are never read.
template <typename T>
BasicTensor<T> causal_softmax_rows(const BasicTensor<T>& scores);

// y = x / sqrt(mean(x^2) + eps) * gain, per row.
template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, T eps = T(1e-5));

template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> tokens);
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t begin, std::size_t count);
template <typename T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts);
template <typename T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts);

// Rotary position embedding over x[T, n_heads * head_dim]: adjacent pairs
// (2i, 2i+1) of each head are rotated by position * theta^(-2i/head_dim).
template <typename T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::size_t n_heads, double theta,
                    std::size_t position_offset = 0);

// Mean negative log-likelihood over the positions where mask != 0. Masked-out
// positions contribute nothing to the value or the gradient and their target
// ids are not read.
template <typename T>
BasicTensor<T> cross_entropy_masked(const BasicTensor<T>& logits, std::span<const int> targets,
                                    std::span<const std::uint8_t> mask);

}  // namespace medtune
