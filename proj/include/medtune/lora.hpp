// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters: a frozen base projection W plus a trainable pair (A, B)
// so that a linear layer computes x*W + (alpha/r) * (x*A^T) * B^T.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "medtune/model.hpp"

namespace medtune {

struct LoraConfig {
  std::size_t r = 8;
  double alpha = 16.0;
  std::vector<LinearName> targets{kAllLinearNames.begin(), kAllLinearNames.end()};

  double scaling() const { return alpha / static_cast<double>(r); }
  bool targets_name(LinearName name) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const LoraConfig& c);
void from_json(const nlohmann::json& j, LoraConfig& c);

template <typename T>
struct AdapterPair {
  BasicTensor<T> a;  // [r, fan_in]
  BasicTensor<T> b;  // [fan_out, r]
  LinearLayerId owner;
};

template <typename T>
class AdapterSet {
 public:
  explicit AdapterSet(LoraConfig config) : config_(std::move(config)) {}

  const LoraConfig& config() const { return config_; }
  const AdapterPair<T>* find(const LinearLayerId& id) const;
  // Throws ContractError if the owner already has a pair.
  void insert(AdapterPair<T> pair);

  std::size_t size() const { return pairs_.size(); }
  const std::map<LinearLayerId, AdapterPair<T>>& pairs() const { return pairs_; }

  // "layers.<i>.<name>.lora_a" / ".lora_b", in owner order. Handles alias.
  std::vector<NamedTensor<T>> named_tensors() const;
  std::uint64_t parameter_count() const;
  AdapterSet clone() const;

 private:
  LoraConfig config_;
  std::map<LinearLayerId, AdapterPair<T>> pairs_;
};

// Creates one pair per targeted projection with A ~ Normal(0, variance 1/r)
// and B = 0, and freezes every base weight. Deterministic in seed.
template <typename T>
AdapterSet<T> attach_adapters(TransformerWeights<T>& weights, const LoraConfig& config, std::uint64_t seed);

template <typename T>
BasicTensor<T> adapted_linear(const BasicTensor<T>& x, const BasicTensor<T>& base_w, const AdapterPair<T>& pair,
                              const LoraConfig& config);

// Returns an independent model with W += (alpha/r) * (B*A)^T for every pair.
template <typename T>
TransformerWeights<T> merge(const TransformerWeights<T>& weights, const AdapterSet<T>& adapters);

// Sum over targeted projections of r * (fan_in + fan_out). Allocates nothing.
std::uint64_t count_trainable(const ModelConfig& config, const LoraConfig& lora);

void save_adapters(const std::string& path, const AdapterSet<float>& adapters, const ModelConfig& model);
AdapterSet<float> adapters_from_checkpoint(const Checkpoint& ckpt);
AdapterSet<float> load_adapters(const std::string& path);

}  // namespace medtune
