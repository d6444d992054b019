// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/trainer.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "medtune/errors.hpp"
#include "medtune/rng.hpp"

namespace medtune {

std::string_view to_string(TrainMode mode) { return mode == TrainMode::full ? "full" : "lora"; }

TrainMode parse_train_mode(std::string_view text) {
  if (text == "full") return TrainMode::full;
  if (text == "lora") return TrainMode::lora;
  throw ConfigError("unknown training mode '" + std::string(text) + "' (expected full or lora)");
}

TrainConfig TrainConfig::full_preset() {
  TrainConfig c;
  c.mode = TrainMode::full;
  c.epochs = 3;
  c.peak_lr = 5e-5;
  return c;
}

TrainConfig TrainConfig::lora_preset() {
  TrainConfig c;
  c.mode = TrainMode::lora;
  c.epochs = 8;
  c.peak_lr = 1e-4;
  return c;
}

TrainConfig TrainConfig::preset(TrainMode mode) { return mode == TrainMode::full ? full_preset() : lora_preset(); }

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (!(peak_lr > 0.0)) throw ConfigError("train: peak_lr must be positive");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction < 1.0)) {
    throw ConfigError("train: final_lr_fraction must lie in (0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
  if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
  if (batch_chunks == 0) throw ConfigError("train: batch_chunks must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"epochs", c.epochs},
                     {"peak_lr", c.peak_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"final_lr_fraction", c.final_lr_fraction},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"batch_chunks", c.batch_chunks},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.batch_chunks = j.value("batch_chunks", c.batch_chunks);
  c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const LogEntry& e) {
  j = nlohmann::json{
      {"step", e.step}, {"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}, {"grad_norm", e.grad_norm}};
}

// ---- schedule --------------------------------------------------------------------

LrSchedule LrSchedule::make(const TrainConfig& config, std::size_t total_steps) {
  if (total_steps == 0) throw ConfigError("schedule: total_steps must be positive");
  LrSchedule s;
  s.total_steps = total_steps;
  s.warmup_steps = config.warmup_steps >= total_steps ? total_steps / 10 : config.warmup_steps;
  s.peak = config.peak_lr;
  s.floor = config.final_lr_fraction * config.peak_lr;
  return s;
}

double lr_at(const LrSchedule& s, std::size_t step) {
  if (step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const std::size_t span = s.total_steps - s.warmup_steps;
  if (span == 0) return s.floor;
  const double progress = static_cast<double>(step - s.warmup_steps) / static_cast<double>(span);
  return s.floor + 0.5 * (s.peak - s.floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- optimizer ---------------------------------------------------------------------

std::vector<Parameter> trainable_parameters(const TransformerWeights<float>& weights,
                                            const AdapterSet<float>* adapters, TrainMode mode) {
  std::vector<Parameter> out;
  if (mode == TrainMode::lora && !adapters) throw ConfigError("lora mode requires adapters");
  const auto named = mode == TrainMode::full ? weights.named_tensors() : adapters->named_tensors();
  for (const auto& nt : named) out.push_back({nt.name, nt.tensor, nt.tensor.rank() >= 2});
  return out;
}

void adamw_step(std::span<Parameter> params, OptimState& state, double lr, const TrainConfig& config) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in " + p.name);
    }
  }
  if (state.moments.empty()) {
    for (const auto& p : params) state.moments.push_back({std::vector<float>(p.tensor.numel(), 0.0f),
                                                          std::vector<float>(p.tensor.numel(), 0.0f)});
  }
  if (state.moments.size() != params.size()) throw ContractError("adamw: optimizer state does not match parameters");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& mo = state.moments[i];
    if (mo.m.size() != p.tensor.numel()) throw ContractError("adamw: moment shape mismatch for " + p.name);
    auto theta = p.tensor.data();
    const bool has_grad = p.tensor.has_grad();
    const std::span<const float> grad = has_grad ? std::span<const float>(p.tensor.grad()) : std::span<const float>();
    const double decay = p.decay ? lr * config.weight_decay : 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = has_grad ? grad[k] : 0.0;
      const double m = config.beta1 * mo.m[k] + (1.0 - config.beta1) * g;
      const double v = config.beta2 * mo.v[k] + (1.0 - config.beta2) * g * g;
      mo.m[k] = static_cast<float>(m);
      mo.v[k] = static_cast<float>(v);
      double x = theta[k];
      x -= decay * x;
      x -= lr * (m / bc1) / (std::sqrt(v / bc2) + config.eps);
      theta[k] = static_cast<float>(x);
    }
  }
}

double clip_global_norm(std::span<Parameter> params, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_global_norm: max_norm must be positive");
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) ss += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.grad()) g = static_cast<float>(g * factor);
    }
  }
  return norm;
}

// ---- training loop -------------------------------------------------------------------

std::size_t steps_per_epoch(std::size_t n_chunks, std::size_t batch_chunks) {
  return (n_chunks + batch_chunks - 1) / batch_chunks;
}

namespace {

struct BatchLoss {
  Tensor loss;
  std::size_t support = 0;
};

BatchLoss batch_loss(const TransformerWeights<float>& weights, const AdapterSet<float>* adapters,
                     const std::vector<const PackedChunk*>& batch) {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  for (const auto* c : batch) {
    const auto t = c->targets();
    targets.insert(targets.end(), t.begin(), t.end());
    mask.insert(mask.end(), c->loss_mask.begin(), c->loss_mask.end());
  }
  const std::size_t support = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  if (support == 0) throw EmptyLossSupport();
  std::vector<Tensor> logits;
  for (const auto* c : batch) logits.push_back(forward(weights, adapters, std::span<const int>(c->tokens)));
  const Tensor all = logits.size() == 1 ? logits.front() : concat_rows(logits);
  return {cross_entropy_masked(all, std::span<const int>(targets), std::span<const std::uint8_t>(mask)), support};
}

const char* kStateFile = "state.ckpt";

void save_state(const std::filesystem::path& dir, const std::vector<Parameter>& params, const OptimState& opt,
                std::size_t epochs_done, const TrainConfig& config) {
  std::vector<NamedTensor<float>> tensors;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    tensors.push_back({"param." + p.name, p.tensor});
    if (!opt.moments.empty()) {
      tensors.push_back({"adam_m." + p.name, Tensor::from_data(p.tensor.shape(), opt.moments[i].m)});
      tensors.push_back({"adam_v." + p.name, Tensor::from_data(p.tensor.shape(), opt.moments[i].v)});
    }
  }
  const nlohmann::json meta{{"kind", "train_state"},
                            {"step", opt.step},
                            {"epochs_done", epochs_done},
                            {"config", config}};
  // Write then rename so an interruption never leaves a torn state file.
  const auto tmp = dir / (std::string(kStateFile) + ".tmp");
  write_checkpoint(tmp.string(), meta, tensors);
  std::filesystem::rename(tmp, dir / kStateFile);
}

std::size_t load_state(const std::filesystem::path& dir, std::vector<Parameter>& params, OptimState& opt,
                       const TrainConfig& config) {
  const Checkpoint ckpt = read_checkpoint((dir / kStateFile).string());
  const auto meta = ckpt.meta();
  if (meta.value("kind", "") != "train_state") throw InputError("resume: not a training state file");
  if (meta.at("config").at("mode").get<std::string>() != to_string(config.mode)) {
    throw ConfigError("resume: saved state was produced in a different training mode");
  }
  opt.step = meta.at("step").get<std::uint64_t>();
  opt.moments.clear();
  for (auto& p : params) {
    const Tensor& src = ckpt.at("param." + p.name);
    if (src.shape() != p.tensor.shape()) throw InputError("resume: shape mismatch for " + p.name);
    std::copy(src.data().begin(), src.data().end(), p.tensor.data().begin());
    if (ckpt.contains("adam_m." + p.name)) {
      const auto m = ckpt.at("adam_m." + p.name).data();
      const auto v = ckpt.at("adam_v." + p.name).data();
      opt.moments.push_back({{m.begin(), m.end()}, {v.begin(), v.end()}});
    }
  }
  if (!opt.moments.empty() && opt.moments.size() != params.size()) {
    throw InputError("resume: optimizer state is incomplete");
  }
  return meta.at("epochs_done").get<std::size_t>();
}

void save_trainable(const std::filesystem::path& path, const TransformerWeights<float>& weights,
                    const AdapterSet<float>* adapters, TrainMode mode) {
  if (mode == TrainMode::full) {
    save_model(path.string(), weights);
  } else {
    save_adapters(path.string(), *adapters, weights.config);
  }
}

}  // namespace

TrainResult train(TransformerWeights<float>& weights, AdapterSet<float>* adapters,
                  const std::vector<PackedChunk>& chunks, const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (chunks.empty()) throw InputError("train: no chunks");
  if (config.mode == TrainMode::lora && (!adapters || adapters->size() == 0)) {
    throw ConfigError("train: lora mode requires attached adapters");
  }
  if (config.mode == TrainMode::full && adapters) throw ConfigError("train: full mode takes no adapters");
  if (options.resume && !options.checkpoint_dir) throw ConfigError("train: resume needs a checkpoint directory");

  if (config.mode == TrainMode::full) weights.set_requires_grad(true);
  std::vector<Parameter> params = trainable_parameters(weights, adapters, config.mode);

  TrainResult result;
  const std::size_t per_epoch = steps_per_epoch(chunks.size(), config.batch_chunks);
  result.total_steps = config.epochs * per_epoch;
  const LrSchedule schedule = LrSchedule::make(config, result.total_steps);

  OptimState opt;
  std::size_t first_epoch = 0;
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
  if (options.resume) first_epoch = load_state(*options.checkpoint_dir, params, opt, config);
  result.epochs_done = first_epoch;

  for (std::size_t epoch = first_epoch; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(chunks.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(Rng::derive(config.seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));

    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<const PackedChunk*> batch;
      for (std::size_t i = b * config.batch_chunks; i < std::min(order.size(), (b + 1) * config.batch_chunks); ++i) {
        batch.push_back(&chunks[order[i]]);
      }
      for (auto& p : params) p.tensor.zero_grad();

      const std::size_t step = static_cast<std::size_t>(opt.step) + 1;
      const double lr = lr_at(schedule, step);
      Tape<float> tape;
      const BatchLoss bl = batch_loss(weights, adapters, batch);
      tape.backward(bl.loss);
      const double norm = clip_global_norm(params, config.grad_clip);
      adamw_step(params, opt, lr, config);

      LogEntry entry{step, epoch, lr, static_cast<double>(bl.loss.item()), norm};
      result.log.push_back(entry);
      if (options.on_step) options.on_step(entry);
    }
    for (auto& p : params) p.tensor.zero_grad();
    result.epochs_done = epoch + 1;

    if (options.checkpoint_dir) {
      save_trainable(*options.checkpoint_dir / ("epoch-" + std::to_string(epoch + 1) + ".ckpt"), weights, adapters,
                     config.mode);
      save_state(*options.checkpoint_dir, params, opt, epoch + 1, config);
    }
    if (options.stop_after_epoch && result.epochs_done >= *options.stop_after_epoch &&
        result.epochs_done < config.epochs) {
      return result;
    }
  }
  result.completed = true;
  if (options.checkpoint_dir) {
    save_trainable(*options.checkpoint_dir / "final.ckpt", weights, adapters, config.mode);
  }
  return result;
}

double masked_loss(const TransformerWeights<float>& weights, const AdapterSet<float>* adapters,
                   const std::vector<PackedChunk>& chunks) {
  double total = 0.0;
  std::size_t support = 0;
  for (const auto& c : chunks) {
    const std::size_t n = static_cast<std::size_t>(std::count(c.loss_mask.begin(), c.loss_mask.end(), std::uint8_t{1}));
    if (n == 0) continue;
    const Tensor logits = forward(weights, adapters, std::span<const int>(c.tokens));
    const auto targets = c.targets();
    const Tensor loss = cross_entropy_masked(logits, std::span<const int>(targets),
                                             std::span<const std::uint8_t>(c.loss_mask));
    total += static_cast<double>(loss.item()) * static_cast<double>(n);
    support += n;
  }
  if (support == 0) throw EmptyLossSupport();
  return total / static_cast<double>(support);
}

}  // namespace medtune
