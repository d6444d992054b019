// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests and the acceptance runner.

#pragma once

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "medtune/datapipe.hpp"
#include "medtune/model.hpp"
#include "medtune/rng.hpp"
#include "medtune/tensor.hpp"

namespace medtune::testing {

// Norm-wise relative error ||a - b|| / max(||a||, ||b||, 1e-12).
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

template <typename T>
std::vector<double> to_double(std::span<const T> v) {
  return std::vector<double>(v.begin(), v.end());
}

template <typename T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = true) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<T> data(n);
  for (auto& x : data) x = static_cast<T>(rng.normal(0.0, stddev));
  return BasicTensor<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

// Reverse-mode gradients of fn() with respect to params; absent gradients
// come back as zeros.
template <typename T>
std::vector<std::vector<double>> analytic_grads(const std::function<BasicTensor<T>()>& fn,
                                                const std::vector<BasicTensor<T>>& params) {
  for (auto p : params) p.zero_grad();
  {
    Tape<T> tape;
    const auto loss = fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> out;
  for (const auto& p : params) {
    if (p.has_grad()) {
      out.push_back(to_double<T>(p.grad()));
    } else {
      out.emplace_back(p.numel(), 0.0);
    }
  }
  for (auto p : params) p.zero_grad();
  return out;
}

// Central differences (f(x + h) - f(x - h)) / 2h, element by element.
template <typename T>
std::vector<std::vector<double>> numeric_grads(const std::function<BasicTensor<T>()>& fn,
                                               const std::vector<BasicTensor<T>>& params, double h) {
  std::vector<std::vector<double>> out;
  for (auto p : params) {
    auto data = p.data();
    std::vector<double> g(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const T saved = data[i];
      data[i] = static_cast<T>(saved + h);
      const double up = fn().item();
      data[i] = static_cast<T>(saved - h);
      const double down = fn().item();
      data[i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// Worst per-tensor relative error between two gradient lists.
inline double worst_rel_error(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], b[i]));
  return worst;
}

// sum(y * R) with a fixed pseudo-random R, so that ops whose plain sum is
// constant (softmax) still get a non-trivial gradient.
template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& y) {
  Rng rng(99);
  return sum(mul(y, random_tensor<T>(y.shape(), rng, 1.0, false)));
}

struct GradientErrors {
  double f64 = 0.0;  // 64-bit analytic vs 64-bit central differences
  double f32 = 0.0;  // 32-bit analytic vs the same 64-bit differences
};

template <typename F>
GradientErrors op_gradient_errors(const std::vector<Shape>& shapes, F fn, std::uint64_t seed = 1, double h = 1e-5) {
  Rng rng(seed);
  std::vector<BasicTensor<double>> p64;
  for (const auto& s : shapes) p64.push_back(random_tensor<double>(s, rng));
  std::vector<BasicTensor<float>> p32;
  for (const auto& p : p64) p32.push_back(p.template cast<float>());
  const std::function<BasicTensor<double>()> f64 = [&] { return fn(p64); };
  const std::function<BasicTensor<float>()> f32 = [&] { return fn(p32); };
  const auto numeric = numeric_grads<double>(f64, p64, h);
  return {worst_rel_error(analytic_grads<double>(f64, p64), numeric),
          worst_rel_error(analytic_grads<float>(f32, p32), numeric)};
}

// Masked next-token loss of a whole model, checked for every parameter.
// Weight matrices are scaled up and gains jittered so that every nonlinearity
// is exercised away from its linear regime.
inline GradientErrors model_gradient_errors(const ModelConfig& config, std::uint64_t seed, std::size_t length = 6) {
  auto w64 = init_model<double>(config, seed);
  Rng rng(Rng::derive(seed, 1));
  for (const auto& nt : w64.named_tensors()) {
    auto t = nt.tensor;
    for (auto& x : t.data()) x = t.rank() >= 2 ? 10.0 * x : x + 0.3 * rng.normal(0.0, 1.0);
  }
  auto w32 = w64.template cast<float>();
  w64.set_requires_grad(true);
  w32.set_requires_grad(true);

  std::vector<int> tokens(length), targets(length);
  std::vector<std::uint8_t> mask(length);
  for (std::size_t i = 0; i < length; ++i) {
    tokens[i] = static_cast<int>(rng.below(config.vocab_size));
    targets[i] = static_cast<int>(rng.below(config.vocab_size));
    mask[i] = i % 3 == 1 ? 0 : 1;
  }
  auto loss = [&](const auto& w) {
    using T = typename std::decay_t<decltype(w.lm_head)>::value_type;
    return cross_entropy_masked(forward<T>(w, nullptr, std::span<const int>(tokens)), std::span<const int>(targets),
                                std::span<const std::uint8_t>(mask));
  };
  std::vector<BasicTensor<double>> p64;
  for (const auto& nt : w64.named_tensors()) p64.push_back(nt.tensor);
  std::vector<BasicTensor<float>> p32;
  for (const auto& nt : w32.named_tensors()) p32.push_back(nt.tensor);
  const std::function<BasicTensor<double>()> f64 = [&] { return loss(w64); };
  const std::function<BasicTensor<float>()> f32 = [&] { return loss(w32); };
  const auto numeric = numeric_grads<double>(f64, p64, 1e-5);
  return {worst_rel_error(analytic_grads<double>(f64, p64), numeric),
          worst_rel_error(analytic_grads<float>(f32, p32), numeric)};
}

// 2 layers, d_model 64, 4 heads, d_ff 128, byte-level vocabulary.
inline ModelConfig toy_config(std::size_t context = 128) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.d_ff = 128;
  c.vocab_size = 261;
  c.context_length = context;
  return c;
}

// Tiny shape for finite-difference checks.
inline ModelConfig micro_config(std::size_t n_layers = 1) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 12;
  c.vocab_size = 11;
  c.context_length = 16;
  return c;
}

inline constexpr std::size_t kSyntheticSampleTokens = 64;

// Short clinical-style question/answer pairs, each rendering to exactly
// kSyntheticSampleTokens byte-level tokens so that two fit a 128-token chunk
// without straddling. Sample i is fully determined by (i, variant).
inline std::vector<InstructionSample> synthetic_samples(std::size_t n, std::size_t first = 0,
                                                        std::uint64_t variant = 0) {
  static const char* organs[] = {"heart", "lung", "liver", "kidney", "brain", "skin", "bone", "eye"};
  static const char* signs[] = {"pain", "fever", "rash", "cough", "edema", "itch", "ache", "tremor"};
  static const char* drugs[] = {"aspirin", "insulin", "heparin", "digoxin", "ibuprofen", "codeine", "lithium",
                                "warfarin"};
  static const char* steps[] = {"rest", "scan", "labs", "fluids", "diet", "rehab", "xray", "biopsy"};
  std::vector<InstructionSample> out;
  for (std::size_t k = first; k < first + n; ++k) {
    Rng rng(Rng::derive(variant, k));
    InstructionSample s;
    s.system = "Be brief.";
    char buf[64];
    std::snprintf(buf, sizeof buf, "case %02zu: %s %s", k % 100, signs[rng.below(8)], organs[rng.below(8)]);
    s.prompter = buf;
    std::snprintf(buf, sizeof buf, "give %s, then %s", drugs[rng.below(8)], steps[rng.below(8)]);
    s.assistant = buf;
    const std::size_t keywords = 4;
    const std::size_t used = keywords + s.system.size() + s.prompter.size() + s.assistant.size();
    if (used < kSyntheticSampleTokens) s.assistant.append(kSyntheticSampleTokens - used, '.');
    s.source = "synthetic";
    out.push_back(std::move(s));
  }
  return out;
}

// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto stamp = static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
    Rng rng(Rng::derive(stamp, static_cast<std::uint64_t>(::getpid())));
    path_ = std::filesystem::temp_directory_path() / ("medtune-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace medtune::testing
