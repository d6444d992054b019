// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "medtune/datapipe.hpp"
#include "medtune/lora.hpp"
#include "medtune/model.hpp"

namespace medtune {

enum class TrainMode { full, lora };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct TrainConfig {
  TrainMode mode = TrainMode::full;
  std::size_t epochs = 3;
  double peak_lr = 5e-5;
  std::size_t warmup_steps = 100;
  double final_lr_fraction = 0.10;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t batch_chunks = 8;
  std::uint64_t seed = 0;

  // Full-parameter fine-tuning: 3 epochs at peak 5e-5.
  static TrainConfig full_preset();
  // LoRA fine-tuning: 8 epochs at peak 1e-4.
  static TrainConfig lora_preset();
  static TrainConfig preset(TrainMode mode);

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Overlays the keys present in j onto c, so a partial file overrides a preset.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LrSchedule {
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
  double peak = 0.0;
  double floor = 0.0;

  // Warmup is clamped to total_steps / 10 when it would not fit in the run.
  static LrSchedule make(const TrainConfig& config, std::size_t total_steps);
};

// Linear warmup from 0 to peak, then cosine decay from peak to floor at
// total_steps. Throws ContractError for step > total_steps.
double lr_at(const LrSchedule& schedule, std::size_t step);

struct Parameter {
  std::string name;
  Tensor tensor;
  bool decay = true;  // weight matrices decay, norm gains do not
};

// Full mode: every model tensor. LoRA mode: the adapter factors only.
std::vector<Parameter> trainable_parameters(const TransformerWeights<float>& weights,
                                            const AdapterSet<float>* adapters, TrainMode mode);

struct Moments {
  std::vector<float> m;
  std::vector<float> v;
};

struct OptimState {
  std::uint64_t step = 0;
  std::vector<Moments> moments;  // aligned with the parameter list
};

// One AdamW update with bias correction and decoupled weight decay. Throws
// NumericError, without touching any parameter, if a gradient is not finite.
void adamw_step(std::span<Parameter> params, OptimState& state, double lr, const TrainConfig& config);

// Scales every gradient by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm; missing gradients count as zero.
double clip_global_norm(std::span<Parameter> params, double max_norm);

struct LogEntry {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

void to_json(nlohmann::json& j, const LogEntry& e);

struct TrainOptions {
  // Epoch checkpoints, resumable state and the final checkpoint go here.
  std::optional<std::filesystem::path> checkpoint_dir;
  // Continue from checkpoint_dir/state.ckpt.
  bool resume = false;
  // Return after this many completed epochs, as if interrupted.
  std::optional<std::size_t> stop_after_epoch;
  std::function<void(const LogEntry&)> on_step;
};

struct TrainResult {
  std::vector<LogEntry> log;
  std::size_t total_steps = 0;
  std::size_t epochs_done = 0;
  bool completed = false;
};

std::size_t steps_per_epoch(std::size_t n_chunks, std::size_t batch_chunks);

// Runs config.epochs passes over the chunks with a per-epoch reshuffle seeded
// by (seed, epoch). Update k (1-based) uses lr_at(schedule, k), so the last
// update runs at the floor learning rate.
TrainResult train(TransformerWeights<float>& weights, AdapterSet<float>* adapters,
                  const std::vector<PackedChunk>& chunks, const TrainConfig& config,
                  const TrainOptions& options = {});

// Mean loss over every response-target position of the chunks.
double masked_loss(const TransformerWeights<float>& weights, const AdapterSet<float>* adapters,
                   const std::vector<PackedChunk>& chunks);

}  // namespace medtune
