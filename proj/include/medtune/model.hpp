// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Llama-2 style decoder: pre-norm residual blocks, RMSNorm, rotary
// positions, grouped-query attention and a SwiGLU feed-forward. No biases.
// Every linear projection is addressable by LinearLayerId so adapters can be
// attached to any subset of them.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "medtune/tensor.hpp"

namespace medtune {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 261;
  std::size_t context_length = 4096;
  double rope_theta = 10000.0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t kv_width() const { return head_dim() * n_kv_heads; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  // Shapes used for parameter counting; no weights are ever allocated.
  static ModelConfig llama2_7b_shape();
  static ModelConfig llama2_70b_shape();

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class LinearName : std::uint8_t { q_proj, k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj };

inline constexpr std::array<LinearName, 7> kAllLinearNames = {
    LinearName::q_proj,    LinearName::k_proj,  LinearName::v_proj,   LinearName::o_proj,
    LinearName::gate_proj, LinearName::up_proj, LinearName::down_proj,
};

std::string_view to_string(LinearName name);
// Throws ConfigError for unknown names.
LinearName parse_linear_name(std::string_view text);

struct LinearLayerId {
  std::size_t layer_index = 0;
  LinearName name = LinearName::q_proj;

  std::string str() const;  // "layers.<i>.<name>"
  auto operator<=>(const LinearLayerId&) const = default;
};

struct LinearShape {
  LinearLayerId id;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

// 7 * n_layers entries in layer-major, kAllLinearNames order.
std::vector<LinearShape> enumerate_linear_layers(const ModelConfig& config);
std::pair<std::size_t, std::size_t> linear_fans(const ModelConfig& config, LinearName name);

// Closed-form count of all dense parameters (embedding, projections, norm
// gains, lm_head).
std::uint64_t count_dense_parameters(const ModelConfig& config);

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
struct LayerWeights {
  BasicTensor<T> attn_norm;  // [d_model]
  BasicTensor<T> ffn_norm;   // [d_model]
  // Indexed by LinearName; stored [fan_in, fan_out] so a projection is x * W.
  std::array<BasicTensor<T>, 7> linear;
};

template <typename T>
struct TransformerWeights {
  ModelConfig config;
  BasicTensor<T> token_embedding;  // [vocab, d_model]
  std::vector<LayerWeights<T>> layers;
  BasicTensor<T> final_norm;  // [d_model]
  BasicTensor<T> lm_head;     // [d_model, vocab]

  BasicTensor<T>& linear(const LinearLayerId& id);
  const BasicTensor<T>& linear(const LinearLayerId& id) const;

  // Stable order: token_embedding, per layer (attn_norm, ffn_norm, the seven
  // projections), final_norm, lm_head. Handles alias the weights.
  std::vector<NamedTensor<T>> named_tensors() const;

  TransformerWeights clone() const;
  void set_requires_grad(bool value);
  std::uint64_t parameter_count() const;

  template <typename U>
  TransformerWeights<U> cast() const {
    TransformerWeights<U> out;
    out.config = config;
    out.token_embedding = token_embedding.template cast<U>();
    for (const auto& l : layers) {
      LayerWeights<U> nl;
      nl.attn_norm = l.attn_norm.template cast<U>();
      nl.ffn_norm = l.ffn_norm.template cast<U>();
      for (std::size_t i = 0; i < l.linear.size(); ++i) nl.linear[i] = l.linear[i].template cast<U>();
      out.layers.push_back(std::move(nl));
    }
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    return out;
  }
};

template <typename T>
class AdapterSet;

// Normal(0, 0.02) weights with o_proj and down_proj further scaled by
// 1/sqrt(2 * n_layers); norm gains start at one.
template <typename T>
TransformerWeights<T> init_model(const ModelConfig& config, std::uint64_t seed);

// Logits [T, vocab] for next-token prediction at every position.
template <typename T>
BasicTensor<T> forward(const TransformerWeights<T>& weights, const AdapterSet<T>* adapters,
                       std::span<const int> tokens);

// Appends argmax tokens. Throws ContextOverflow if prompt + max_new would
// exceed the context window.
std::vector<int> greedy_generate(const TransformerWeights<float>& weights, const AdapterSet<float>* adapters,
                                 std::span<const int> prompt, std::size_t max_new,
                                 std::optional<int> stop_token = std::nullopt);

// Test fixture: rewires the weights so that every position predicts `token`
// with probability close to one. Attention and MLP outputs are zeroed, every
// embedding gets first coordinate 1, and lm_head reads only that coordinate.
void rig_constant_prediction(TransformerWeights<float>& weights, int token, float strength = 50.0f);

// ---- checkpoints --------------------------------------------------------------
//
// File layout: the 8-byte magic "MDTCKPT1", a little-endian uint64 header
// length, a JSON header {"meta": ..., "tensors": [{name, shape, offset}]},
// then little-endian float32 payloads in index order. Offsets are in bytes
// from the start of the payload.

struct Checkpoint {
  std::string meta_json;  // serialized "meta" object
  std::vector<NamedTensor<float>> tensors;

  nlohmann::json meta() const;
  const BasicTensor<float>& at(std::string_view name) const;
  bool contains(std::string_view name) const;
};

void write_checkpoint(const std::string& path, const nlohmann::json& meta,
                      const std::vector<NamedTensor<float>>& tensors);
Checkpoint read_checkpoint(const std::string& path);

void save_model(const std::string& path, const TransformerWeights<float>& weights);
TransformerWeights<float> load_model(const std::string& path);
TransformerWeights<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace medtune
