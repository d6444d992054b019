// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/model.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "medtune/errors.hpp"
#include "medtune/lora.hpp"
#include "medtune/rng.hpp"

namespace medtune {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (n_layers == 0) fail("n_layers must be positive");
  if (d_model == 0) fail("d_model must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (n_kv_heads == 0 || n_kv_heads > n_heads || n_heads % n_kv_heads != 0) {
    fail("n_kv_heads must divide n_heads");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (d_ff == 0) fail("d_ff must be positive");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (context_length == 0) fail("context_length must be at least 1");
  if (!(rope_theta > 0.0)) fail("rope_theta must be positive");
}

ModelConfig ModelConfig::llama2_7b_shape() {
  return ModelConfig{.n_layers = 32,
                     .d_model = 4096,
                     .n_heads = 32,
                     .n_kv_heads = 32,
                     .d_ff = 11008,
                     .vocab_size = 32000,
                     .context_length = 4096,
                     .rope_theta = 10000.0};
}

ModelConfig ModelConfig::llama2_70b_shape() {
  return ModelConfig{.n_layers = 80,
                     .d_model = 8192,
                     .n_heads = 64,
                     .n_kv_heads = 8,
                     .d_ff = 28672,
                     .vocab_size = 32000,
                     .context_length = 4096,
                     .rope_theta = 10000.0};
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
                     {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},
                     {"context_length", c.context_length}, {"rope_theta", c.rope_theta}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.context_length = j.value("context_length", d.context_length);
  c.rope_theta = j.value("rope_theta", d.rope_theta);
}

std::string_view to_string(LinearName name) {
  switch (name) {
    case LinearName::q_proj: return "q_proj";
    case LinearName::k_proj: return "k_proj";
    case LinearName::v_proj: return "v_proj";
    case LinearName::o_proj: return "o_proj";
    case LinearName::gate_proj: return "gate_proj";
    case LinearName::up_proj: return "up_proj";
    case LinearName::down_proj: return "down_proj";
  }
  return "?";
}

LinearName parse_linear_name(std::string_view text) {
  for (LinearName n : kAllLinearNames) {
    if (to_string(n) == text) return n;
  }
  throw ConfigError("unknown linear layer name '" + std::string(text) + "'");
}

std::string LinearLayerId::str() const {
  return "layers." + std::to_string(layer_index) + "." + std::string(to_string(name));
}

std::pair<std::size_t, std::size_t> linear_fans(const ModelConfig& c, LinearName name) {
  switch (name) {
    case LinearName::q_proj:
    case LinearName::o_proj: return {c.d_model, c.d_model};
    case LinearName::k_proj:
    case LinearName::v_proj: return {c.d_model, c.kv_width()};
    case LinearName::gate_proj:
    case LinearName::up_proj: return {c.d_model, c.d_ff};
    case LinearName::down_proj: return {c.d_ff, c.d_model};
  }
  return {0, 0};
}

std::vector<LinearShape> enumerate_linear_layers(const ModelConfig& config) {
  std::vector<LinearShape> out;
  out.reserve(config.n_layers * kAllLinearNames.size());
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (LinearName n : kAllLinearNames) {
      const auto [fan_in, fan_out] = linear_fans(config, n);
      out.push_back({LinearLayerId{l, n}, fan_in, fan_out});
    }
  }
  return out;
}

std::uint64_t count_dense_parameters(const ModelConfig& c) {
  std::uint64_t total = 2ULL * c.vocab_size * c.d_model + c.d_model;  // embedding, lm_head, final norm
  std::uint64_t per_layer = 2ULL * c.d_model;
  for (LinearName n : kAllLinearNames) {
    const auto [fan_in, fan_out] = linear_fans(c, n);
    per_layer += static_cast<std::uint64_t>(fan_in) * fan_out;
  }
  return total + per_layer * c.n_layers;
}

// ---- TransformerWeights ---------------------------------------------------------

template <typename T>
BasicTensor<T>& TransformerWeights<T>::linear(const LinearLayerId& id) {
  if (id.layer_index >= layers.size()) throw ContractError("no layer " + std::to_string(id.layer_index));
  return layers[id.layer_index].linear[static_cast<std::size_t>(id.name)];
}

template <typename T>
const BasicTensor<T>& TransformerWeights<T>::linear(const LinearLayerId& id) const {
  if (id.layer_index >= layers.size()) throw ContractError("no layer " + std::to_string(id.layer_index));
  return layers[id.layer_index].linear[static_cast<std::size_t>(id.name)];
}

template <typename T>
std::vector<NamedTensor<T>> TransformerWeights<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"token_embedding", token_embedding});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    out.push_back({prefix + "attn_norm", layers[l].attn_norm});
    out.push_back({prefix + "ffn_norm", layers[l].ffn_norm});
    for (LinearName n : kAllLinearNames) {
      out.push_back({prefix + std::string(to_string(n)), layers[l].linear[static_cast<std::size_t>(n)]});
    }
  }
  out.push_back({"final_norm", final_norm});
  out.push_back({"lm_head", lm_head});
  return out;
}

template <typename T>
TransformerWeights<T> TransformerWeights<T>::clone() const {
  TransformerWeights out;
  out.config = config;
  out.token_embedding = token_embedding.clone();
  for (const auto& l : layers) {
    LayerWeights<T> nl;
    nl.attn_norm = l.attn_norm.clone();
    nl.ffn_norm = l.ffn_norm.clone();
    for (std::size_t i = 0; i < l.linear.size(); ++i) nl.linear[i] = l.linear[i].clone();
    out.layers.push_back(std::move(nl));
  }
  out.final_norm = final_norm.clone();
  out.lm_head = lm_head.clone();
  return out;
}

template <typename T>
void TransformerWeights<T>::set_requires_grad(bool value) {
  for (auto& nt : named_tensors()) nt.tensor.set_requires_grad(value);
}

template <typename T>
std::uint64_t TransformerWeights<T>::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto& nt : named_tensors()) n += nt.tensor.numel();
  return n;
}

template <typename T>
TransformerWeights<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  constexpr double kStd = 0.02;
  const double residual_std = kStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  auto normal = [&](Shape shape, double stddev) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return BasicTensor<T>::from_data(std::move(shape), std::move(v), true);
  };
  auto ones = [](std::size_t n) { return BasicTensor<T>::from_data({n}, std::vector<T>(n, T(1)), true); };

  TransformerWeights<T> w;
  w.config = config;
  w.token_embedding = normal({config.vocab_size, config.d_model}, kStd);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights<T> layer;
    layer.attn_norm = ones(config.d_model);
    layer.ffn_norm = ones(config.d_model);
    for (LinearName n : kAllLinearNames) {
      const auto [fan_in, fan_out] = linear_fans(config, n);
      const bool residual = n == LinearName::o_proj || n == LinearName::down_proj;
      layer.linear[static_cast<std::size_t>(n)] = normal({fan_in, fan_out}, residual ? residual_std : kStd);
    }
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = ones(config.d_model);
  w.lm_head = normal({config.d_model, config.vocab_size}, kStd);
  return w;
}

// ---- forward ------------------------------------------------------------------

namespace {

template <typename T>
BasicTensor<T> project(const TransformerWeights<T>& w, const AdapterSet<T>* adapters, const BasicTensor<T>& x,
                       LinearLayerId id) {
  const auto& base = w.linear(id);
  if (adapters) {
    if (const auto* pair = adapters->find(id)) return adapted_linear(x, base, *pair, adapters->config());
  }
  return matmul(x, base);
}

}  // namespace

template <typename T>
BasicTensor<T> forward(const TransformerWeights<T>& w, const AdapterSet<T>* adapters, std::span<const int> tokens) {
  const ModelConfig& c = w.config;
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > c.context_length) {
    throw InputError("forward: " + std::to_string(tokens.size()) + " tokens exceed context length " +
                     std::to_string(c.context_length));
  }
  const std::size_t head_dim = c.head_dim();
  const std::size_t group = c.n_heads / c.n_kv_heads;
  const T score_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  BasicTensor<T> x = embedding(w.token_embedding, tokens);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    const BasicTensor<T> h = rms_norm(x, layer.attn_norm);
    const BasicTensor<T> q = rope(project(w, adapters, h, {l, LinearName::q_proj}), c.n_heads, c.rope_theta);
    const BasicTensor<T> k = rope(project(w, adapters, h, {l, LinearName::k_proj}), c.n_kv_heads, c.rope_theta);
    const BasicTensor<T> v = project(w, adapters, h, {l, LinearName::v_proj});

    std::vector<BasicTensor<T>> heads;
    heads.reserve(c.n_heads);
    for (std::size_t kv = 0; kv < c.n_kv_heads; ++kv) {
      const BasicTensor<T> k_t = transpose(slice_cols(k, kv * head_dim, head_dim));
      const BasicTensor<T> v_h = slice_cols(v, kv * head_dim, head_dim);
      for (std::size_t g = 0; g < group; ++g) {
        const std::size_t head = kv * group + g;
        const BasicTensor<T> scores = scale(matmul(slice_cols(q, head * head_dim, head_dim), k_t), score_scale);
        heads.push_back(matmul(causal_softmax_rows(scores), v_h));
      }
    }
    x = add(x, project(w, adapters, concat_cols(heads), {l, LinearName::o_proj}));

    const BasicTensor<T> h2 = rms_norm(x, layer.ffn_norm);
    const BasicTensor<T> gate = silu(project(w, adapters, h2, {l, LinearName::gate_proj}));
    const BasicTensor<T> up = project(w, adapters, h2, {l, LinearName::up_proj});
    x = add(x, project(w, adapters, mul(gate, up), {l, LinearName::down_proj}));
  }
  return matmul(rms_norm(x, w.final_norm), w.lm_head);
}

void rig_constant_prediction(TransformerWeights<float>& weights, int token, float strength) {
  const auto& c = weights.config;
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size) throw InputError("rig: token out of range");
  for (auto& layer : weights.layers) {
    for (auto name : {LinearName::o_proj, LinearName::down_proj}) {
      auto w = layer.linear[static_cast<std::size_t>(name)].data();
      std::fill(w.begin(), w.end(), 0.0f);
    }
  }
  auto emb = weights.token_embedding.data();
  for (std::size_t v = 0; v < c.vocab_size; ++v) emb[v * c.d_model] = 1.0f;
  auto head = weights.lm_head.data();
  std::fill(head.begin(), head.end(), 0.0f);
  head[static_cast<std::size_t>(token)] = strength;
}

std::vector<int> greedy_generate(const TransformerWeights<float>& weights, const AdapterSet<float>* adapters,
                                 std::span<const int> prompt, std::size_t max_new, std::optional<int> stop_token) {
  if (prompt.empty()) throw InputError("generate: empty prompt");
  if (prompt.size() + max_new > weights.config.context_length) {
    throw ContextOverflow("generate: prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                          std::to_string(max_new) + " new tokens exceeds context length " +
                          std::to_string(weights.config.context_length));
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  const std::size_t vocab = weights.config.vocab_size;
  for (std::size_t step = 0; step < max_new; ++step) {
    const Tensor logits = forward(weights, adapters, std::span<const int>(seq));
    const auto last = logits.data().subspan((seq.size() - 1) * vocab, vocab);
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    seq.push_back(next);
    if (stop_token && next == *stop_token) break;
  }
  return seq;
}

template struct TransformerWeights<float>;
template struct TransformerWeights<double>;
template TransformerWeights<float> init_model<float>(const ModelConfig&, std::uint64_t);
template TransformerWeights<double> init_model<double>(const ModelConfig&, std::uint64_t);
template Tensor forward<float>(const TransformerWeights<float>&, const AdapterSet<float>*, std::span<const int>);
template Tensor64 forward<double>(const TransformerWeights<double>&, const AdapterSet<double>*,
                                  std::span<const int>);

}  // namespace medtune
