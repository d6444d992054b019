// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/lora.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "medtune/errors.hpp"
#include "medtune/rng.hpp"

namespace medtune {

bool LoraConfig::targets_name(LinearName name) const {
  return std::find(targets.begin(), targets.end(), name) != targets.end();
}

void LoraConfig::validate() const {
  if (r < 1) throw ConfigError("lora: rank r must be at least 1");
  if (!(alpha > 0.0) || !std::isfinite(scaling())) throw ConfigError("lora: alpha/r must be finite and positive");
  if (targets.empty()) throw ConfigError("lora: no target layers");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t j = i + 1; j < targets.size(); ++j) {
      if (targets[i] == targets[j]) {
        throw ConfigError("lora: duplicate target " + std::string(to_string(targets[i])));
      }
    }
  }
}

void to_json(nlohmann::json& j, const LoraConfig& c) {
  std::vector<std::string> names;
  for (LinearName n : c.targets) names.emplace_back(to_string(n));
  j = nlohmann::json{{"r", c.r}, {"alpha", c.alpha}, {"targets", names}};
}

void from_json(const nlohmann::json& j, LoraConfig& c) {
  LoraConfig d;
  c.r = j.value("r", d.r);
  c.alpha = j.value("alpha", d.alpha);
  if (j.contains("targets")) {
    c.targets.clear();
    for (const auto& n : j.at("targets")) c.targets.push_back(parse_linear_name(n.get<std::string>()));
  } else {
    c.targets = d.targets;
  }
}

template <typename T>
const AdapterPair<T>* AdapterSet<T>::find(const LinearLayerId& id) const {
  auto it = pairs_.find(id);
  return it == pairs_.end() ? nullptr : &it->second;
}

template <typename T>
void AdapterSet<T>::insert(AdapterPair<T> pair) {
  const LinearLayerId owner = pair.owner;
  if (!pairs_.emplace(owner, std::move(pair)).second) {
    throw ContractError("adapter already attached to " + owner.str());
  }
}

template <typename T>
std::vector<NamedTensor<T>> AdapterSet<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  out.reserve(2 * pairs_.size());
  for (const auto& [id, pair] : pairs_) {
    out.push_back({id.str() + ".lora_a", pair.a});
    out.push_back({id.str() + ".lora_b", pair.b});
  }
  return out;
}

template <typename T>
std::uint64_t AdapterSet<T>::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto& [id, pair] : pairs_) n += pair.a.numel() + pair.b.numel();
  return n;
}

template <typename T>
AdapterSet<T> AdapterSet<T>::clone() const {
  AdapterSet out(config_);
  for (const auto& [id, pair] : pairs_) out.insert({pair.a.clone(), pair.b.clone(), id});
  return out;
}

template <typename T>
AdapterSet<T> attach_adapters(TransformerWeights<T>& weights, const LoraConfig& config, std::uint64_t seed) {
  config.validate();
  weights.set_requires_grad(false);
  Rng rng(seed);
  const double a_std = 1.0 / std::sqrt(static_cast<double>(config.r));
  AdapterSet<T> set(config);
  for (const auto& shape : enumerate_linear_layers(weights.config)) {
    if (!config.targets_name(shape.id.name)) continue;
    std::vector<T> a(config.r * shape.fan_in);
    for (auto& v : a) v = static_cast<T>(rng.normal(0.0, a_std));
    set.insert({BasicTensor<T>::from_data({config.r, shape.fan_in}, std::move(a), true),
                BasicTensor<T>::zeros({shape.fan_out, config.r}, true), shape.id});
  }
  return set;
}

template <typename T>
BasicTensor<T> adapted_linear(const BasicTensor<T>& x, const BasicTensor<T>& base_w, const AdapterPair<T>& pair,
                              const LoraConfig& config) {
  if (pair.a.dim(1) != base_w.dim(0) || pair.b.dim(0) != base_w.dim(1) || pair.a.dim(0) != pair.b.dim(1)) {
    throw DimensionError("adapted_linear: base " + shape_string(base_w.shape()) + " with A " +
                         shape_string(pair.a.shape()) + " and B " + shape_string(pair.b.shape()));
  }
  const BasicTensor<T> base = matmul(x, base_w);
  const BasicTensor<T> low = matmul(matmul(x, transpose(pair.a)), transpose(pair.b));
  return add(base, scale(low, static_cast<T>(config.scaling())));
}

template <typename T>
TransformerWeights<T> merge(const TransformerWeights<T>& weights, const AdapterSet<T>& adapters) {
  TransformerWeights<T> out = weights.clone();
  const T s = static_cast<T>(adapters.config().scaling());
  for (const auto& [id, pair] : adapters.pairs()) {
    auto w = out.linear(id).data();
    const std::size_t fan_in = pair.a.dim(1), fan_out = pair.b.dim(0), r = pair.a.dim(0);
    const auto a = pair.a.data(), b = pair.b.data();
    for (std::size_t i = 0; i < fan_in; ++i) {
      for (std::size_t o = 0; o < fan_out; ++o) {
        T delta = T(0);
        for (std::size_t k = 0; k < r; ++k) delta += b[o * r + k] * a[k * fan_in + i];
        w[i * fan_out + o] += s * delta;
      }
    }
  }
  out.set_requires_grad(true);
  return out;
}

std::uint64_t count_trainable(const ModelConfig& config, const LoraConfig& lora) {
  config.validate();
  lora.validate();
  std::uint64_t total = 0;
  for (LinearName n : lora.targets) {
    const auto [fan_in, fan_out] = linear_fans(config, n);
    total += static_cast<std::uint64_t>(lora.r) * (fan_in + fan_out);
  }
  return total * config.n_layers;
}

void save_adapters(const std::string& path, const AdapterSet<float>& adapters, const ModelConfig& model) {
  write_checkpoint(path, {{"kind", "lora_adapters"}, {"lora", adapters.config()}, {"config", model}},
                   adapters.named_tensors());
}

AdapterSet<float> adapters_from_checkpoint(const Checkpoint& ckpt) {
  const auto meta = ckpt.meta();
  if (meta.value("kind", "") != "lora_adapters") throw InputError("checkpoint is not an adapter checkpoint");
  const auto lora = meta.at("lora").get<LoraConfig>();
  const auto model = meta.at("config").get<ModelConfig>();
  lora.validate();
  AdapterSet<float> set(lora);
  for (const auto& shape : enumerate_linear_layers(model)) {
    if (!lora.targets_name(shape.id.name)) continue;
    Tensor a = ckpt.at(shape.id.str() + ".lora_a").clone();
    Tensor b = ckpt.at(shape.id.str() + ".lora_b").clone();
    if (a.shape() != Shape{lora.r, shape.fan_in} || b.shape() != Shape{shape.fan_out, lora.r}) {
      throw InputError("adapter tensors for " + shape.id.str() + " have the wrong shape");
    }
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    set.insert({a, b, shape.id});
  }
  return set;
}

AdapterSet<float> load_adapters(const std::string& path) { return adapters_from_checkpoint(read_checkpoint(path)); }

template class AdapterSet<float>;
template class AdapterSet<double>;
template AdapterSet<float> attach_adapters<float>(TransformerWeights<float>&, const LoraConfig&, std::uint64_t);
template AdapterSet<double> attach_adapters<double>(TransformerWeights<double>&, const LoraConfig&, std::uint64_t);
template Tensor adapted_linear<float>(const Tensor&, const Tensor&, const AdapterPair<float>&, const LoraConfig&);
template Tensor64 adapted_linear<double>(const Tensor64&, const Tensor64&, const AdapterPair<double>&,
                                         const LoraConfig&);
template TransformerWeights<float> merge<float>(const TransformerWeights<float>&, const AdapterSet<float>&);
template TransformerWeights<double> merge<double>(const TransformerWeights<double>&, const AdapterSet<double>&);

}  // namespace medtune
