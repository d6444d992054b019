// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "medtune/datapipe.hpp"
#include "medtune/decontam.hpp"
#include "medtune/errors.hpp"
#include "medtune/evalharness.hpp"
#include "medtune/lora.hpp"
#include "medtune/model.hpp"
#include "medtune/parallel.hpp"
#include "medtune/tokenizer.hpp"
#include "medtune/trainer.hpp"

namespace medtune::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string group_thousands(unsigned long long value) {
  std::string digits = std::to_string(value);
  std::string out;
  const std::size_t lead = digits.size() % 3;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i != 0 && (i + 3 - lead) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

namespace {

// ---- shared helpers ---------------------------------------------------------------------

Tokenizer load_tokenizer(const std::string& vocab) {
  return vocab.empty() ? Tokenizer::byte_level() : Tokenizer::from_vocab_file(vocab);
}

void check_vocab(const ModelConfig& model, const Tokenizer& tok) {
  if (model.vocab_size != tok.vocab_size()) {
    throw ConfigError("model vocabulary has " + std::to_string(model.vocab_size) + " entries, tokenizer has " +
                      std::to_string(tok.vocab_size()));
  }
}

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
}

std::vector<LinearName> parse_targets(const std::vector<std::string>& names) {
  std::vector<LinearName> out;
  for (const auto& n : names) {
    if (n == "all") {
      out.assign(kAllLinearNames.begin(), kAllLinearNames.end());
      continue;
    }
    out.push_back(parse_linear_name(n));
  }
  return out;
}

class Manifest {
 public:
  explicit Manifest(std::string subcommand) : start_(std::chrono::steady_clock::now()) {
    doc_["subcommand"] = std::move(subcommand);
    doc_["version"] = std::string(kVersion);
    doc_["threads"] = thread_count();
    doc_["seed"] = nullptr;
    doc_["config"] = json::object();
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::object();
  }

  json& operator[](const char* key) { return doc_[key]; }

  void write(const fs::path& path) {
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    doc_["duration_seconds"] = elapsed;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest " + path.string());
    os << doc_.dump(2) << '\n';
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
};

fs::path manifest_beside(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

// ---- init ------------------------------------------------------------------------------------

struct InitArgs {
  std::string config;
  std::string vocab;
  std::string out;
  std::uint64_t seed = 0;
  std::optional<std::size_t> layers, d_model, heads, kv_heads, d_ff, context;
  std::optional<double> rope_theta;
  std::optional<int> rig_token;
};

int cmd_init(const InitArgs& a, std::ostream& out) {
  Manifest manifest("init");
  ModelConfig cfg;
  cfg.context_length = 4096;
  if (!a.config.empty()) {
    cfg = read_json_file(a.config).get<ModelConfig>();
    manifest["inputs"]["config"] = a.config;
  }
  if (a.layers) cfg.n_layers = *a.layers;
  if (a.d_model) cfg.d_model = *a.d_model;
  if (a.heads) {
    cfg.n_heads = *a.heads;
    if (!a.kv_heads) cfg.n_kv_heads = *a.heads;
  }
  if (a.kv_heads) cfg.n_kv_heads = *a.kv_heads;
  if (a.d_ff) cfg.d_ff = *a.d_ff;
  if (a.context) cfg.context_length = *a.context;
  if (a.rope_theta) cfg.rope_theta = *a.rope_theta;
  const Tokenizer tok = load_tokenizer(a.vocab);
  cfg.vocab_size = tok.vocab_size();
  cfg.validate();

  auto weights = init_model<float>(cfg, a.seed);
  if (a.rig_token) rig_constant_prediction(weights, *a.rig_token);
  save_model(a.out, weights);

  manifest["seed"] = a.seed;
  manifest["config"]["model"] = cfg;
  if (a.rig_token) manifest["config"]["rig_token"] = *a.rig_token;
  if (!a.vocab.empty()) manifest["inputs"]["vocab"] = a.vocab;
  manifest["outputs"]["model"] = a.out;
  manifest.write(manifest_beside(a.out));
  out << "wrote " << a.out << " (" << group_thousands(weights.parameter_count()) << " parameters)\n";
  return kOk;
}

// ---- pack ------------------------------------------------------------------------------------

struct PackArgs {
  std::vector<std::string> data;
  std::string mixture;
  std::optional<std::size_t> total;
  std::optional<std::uint64_t> seed;
  std::size_t context = 4096;
  std::string vocab;
  std::string out;
};

int cmd_pack(const PackArgs& a, std::ostream& out) {
  Manifest manifest("pack");
  if (a.data.empty() == a.mixture.empty()) throw ConfigError("pack: give either --data or --mixture");
  if (!a.mixture.empty() && !a.total) throw ConfigError("pack: --mixture needs --total");
  if (a.mixture.empty() && (a.total || a.seed)) throw ConfigError("pack: --total and --seed apply to --mixture only");

  std::vector<InstructionSample> samples;
  if (!a.mixture.empty()) {
    MixtureSpec spec = read_mixture_spec(a.mixture);
    if (a.seed) spec.seed = *a.seed;
    MixtureResult mix = assemble_mixture(spec, *a.total);
    json entries = json::array();
    for (std::size_t i = 0; i < spec.entries.size(); ++i) {
      entries.push_back({{"path", spec.entries[i].path.string()},
                         {"ratio", spec.entries[i].ratio},
                         {"count", mix.counts[i]}});
    }
    manifest["seed"] = spec.seed;
    manifest["config"]["mixture"] = {{"total", *a.total}, {"entries", entries}, {"warnings", mix.warnings}};
    manifest["inputs"]["mixture"] = a.mixture;
    for (const auto& w : mix.warnings) out << "warning: " << w << '\n';
    samples = std::move(mix.samples);
  } else {
    for (const auto& path : a.data) {
      auto part = read_dataset(path);
      samples.insert(samples.end(), part.begin(), part.end());
    }
    manifest["inputs"]["data"] = a.data;
  }

  const Tokenizer tok = load_tokenizer(a.vocab);
  PackedFile file;
  file.context_length = a.context;
  file.tokenizer_mode = tok.mode();
  file.vocab_size = tok.vocab_size();
  file.chunks = pack(samples, tok, a.context);
  write_packed(a.out, file);

  std::size_t supervised = 0;
  for (const auto& c : file.chunks) supervised += static_cast<std::size_t>(std::count(c.loss_mask.begin(), c.loss_mask.end(), 1));
  manifest["config"]["context_length"] = a.context;
  manifest["config"]["tokenizer"] = {{"mode", std::string(to_string(tok.mode()))}, {"vocab_size", tok.vocab_size()}};
  if (!a.vocab.empty()) manifest["inputs"]["vocab"] = a.vocab;
  manifest["outputs"]["packed"] = a.out;
  manifest["outputs"]["samples"] = samples.size();
  manifest["outputs"]["chunks"] = file.chunks.size();
  manifest["outputs"]["supervised_tokens"] = supervised;
  manifest.write(manifest_beside(a.out));
  out << "packed " << samples.size() << " samples into " << file.chunks.size() << " chunks of " << a.context
      << " tokens (" << supervised << " supervised targets)\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------------------------

struct TrainArgs {
  std::string model;
  std::string data;
  std::string out;
  std::string mode;
  std::string config;
  std::optional<std::size_t> epochs, warmup, batch, lora_r;
  std::optional<double> lr, final_fraction, weight_decay, grad_clip, lora_alpha;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> lora_targets;
  bool resume = false;
  std::optional<std::size_t> stop_after_epoch;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  Manifest manifest("train");
  json file_cfg = json::object();
  if (!a.config.empty()) {
    file_cfg = read_json_file(a.config);
    if (!file_cfg.is_object()) throw ConfigError("train config must be a JSON object");
    manifest["inputs"]["config"] = a.config;
  }
  std::string mode_text = a.mode;
  if (mode_text.empty()) mode_text = file_cfg.value("mode", std::string("full"));
  const TrainMode mode = parse_train_mode(mode_text);

  const bool lora_flags = a.lora_r || a.lora_alpha || !a.lora_targets.empty();
  if (mode == TrainMode::full && (lora_flags || file_cfg.contains("lora"))) {
    throw ConfigError("train: LoRA settings given in full mode");
  }

  TrainConfig cfg = TrainConfig::preset(mode);
  json overlay = file_cfg;
  overlay.erase("lora");
  overlay.erase("mode");
  from_json(overlay, cfg);
  cfg.mode = mode;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.peak_lr = *a.lr;
  if (a.warmup) cfg.warmup_steps = *a.warmup;
  if (a.final_fraction) cfg.final_lr_fraction = *a.final_fraction;
  if (a.weight_decay) cfg.weight_decay = *a.weight_decay;
  if (a.grad_clip) cfg.grad_clip = *a.grad_clip;
  if (a.batch) cfg.batch_chunks = *a.batch;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  LoraConfig lora;
  if (mode == TrainMode::lora) {
    if (file_cfg.contains("lora")) lora = file_cfg.at("lora").get<LoraConfig>();
    if (a.lora_r) lora.r = *a.lora_r;
    if (a.lora_alpha) lora.alpha = *a.lora_alpha;
    if (!a.lora_targets.empty()) lora.targets = parse_targets(a.lora_targets);
    lora.validate();
  }

  auto weights = load_model(a.model);
  const PackedFile packed = read_packed(a.data);
  if (packed.vocab_size != weights.config.vocab_size) {
    throw ConfigError("packed data vocabulary does not match the model");
  }
  if (packed.context_length > weights.config.context_length) {
    throw ConfigError("packed chunks are longer than the model context");
  }

  std::optional<AdapterSet<float>> adapters;
  if (mode == TrainMode::lora) adapters.emplace(attach_adapters(weights, lora, cfg.seed));

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::ofstream log(dir / "log.jsonl", a.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write training log in " + dir.string());

  TrainOptions opts;
  opts.checkpoint_dir = dir;
  opts.resume = a.resume;
  opts.stop_after_epoch = a.stop_after_epoch;
  opts.on_step = [&](const LogEntry& e) { log << json(e).dump() << '\n'; };

  const TrainResult result = train(weights, adapters ? &*adapters : nullptr, packed.chunks, cfg, opts);
  log.flush();

  manifest["seed"] = cfg.seed;
  manifest["config"]["train"] = cfg;
  if (mode == TrainMode::lora) {
    manifest["config"]["lora"] = lora;
    manifest["config"]["trainable_parameters"] = adapters->parameter_count();
  } else {
    manifest["config"]["trainable_parameters"] = weights.parameter_count();
  }
  manifest["config"]["model"] = weights.config;
  manifest["config"]["resume"] = a.resume;
  manifest["inputs"]["model"] = a.model;
  manifest["inputs"]["data"] = a.data;
  manifest["outputs"]["dir"] = dir.string();
  manifest["outputs"]["log"] = (dir / "log.jsonl").string();
  manifest["outputs"]["total_steps"] = result.total_steps;
  manifest["outputs"]["epochs_done"] = result.epochs_done;
  manifest["outputs"]["completed"] = result.completed;
  if (result.completed) manifest["outputs"]["final"] = (dir / "final.ckpt").string();
  manifest.write(dir / "manifest.json");

  out << "mode " << to_string(mode) << ", epochs " << result.epochs_done << "/" << cfg.epochs << ", steps "
      << result.total_steps << ", peak_lr " << cfg.peak_lr;
  if (mode == TrainMode::lora) out << ", r " << lora.r << ", alpha " << lora.alpha;
  out << '\n';
  if (!result.log.empty()) out << "last loss " << result.log.back().loss << '\n';
  out << (result.completed ? "wrote " + (dir / "final.ckpt").string() : std::string("stopped early")) << '\n';
  return kOk;
}

// ---- eval ------------------------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string adapters;
  std::string bench;
  std::string score_mode = "raw";
  std::string templ;
  std::string vocab;
  std::string contamination;
  std::string out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Manifest manifest("eval");
  const auto weights = load_model(a.model);
  std::optional<AdapterSet<float>> adapters;
  if (!a.adapters.empty()) adapters.emplace(load_adapters(a.adapters));
  const Tokenizer tok = load_tokenizer(a.vocab);
  check_vocab(weights.config, tok);
  const auto items = read_benchmark(a.bench);
  const ScoreMode mode = parse_score_mode(a.score_mode);
  PromptTemplate prompt;
  if (!a.templ.empty()) prompt.text = a.templ;

  const TransformerLM lm(weights, adapters ? &*adapters : nullptr);
  json report;
  if (a.contamination.empty()) {
    const EvalReport r = run_benchmark(lm, tok, items, mode, {}, prompt);
    report = r;
    out << "scoring: " << to_string(mode) << '\n' << format_table({{"accuracy", &r}});
  } else {
    const DecontamReport dr = read_decontam_report(a.contamination);
    const DecontaminatedEval e = decontaminated_eval(lm, tok, items, dr, mode, prompt);
    report = e;
    out << "scoring: " << to_string(mode) << '\n'
        << format_table({{"full", &e.full}, {"decontam", &e.decontaminated}}) << '\n'
        << format_delta_table(e.deltas);
    manifest["inputs"]["contamination"] = a.contamination;
  }

  manifest["config"]["score_mode"] = std::string(to_string(mode));
  manifest["config"]["prompt_template"] = prompt.text;
  manifest["inputs"]["model"] = a.model;
  if (!a.adapters.empty()) manifest["inputs"]["adapters"] = a.adapters;
  manifest["inputs"]["bench"] = a.bench;
  if (!a.out.empty()) {
    write_text(a.out, report.dump(2) + "\n");
    manifest["outputs"]["report"] = a.out;
    manifest.write(manifest_beside(a.out));
  }
  return kOk;
}

// ---- decontam --------------------------------------------------------------------------------

struct DecontamArgs {
  std::vector<std::string> train;
  std::string bench;
  double threshold = kDefaultSimilarityThreshold;
  std::size_t dimension = NgramEmbedder::kDefaultDimension;
  std::string out;
};

int cmd_decontam(const DecontamArgs& a, std::ostream& out) {
  Manifest manifest("decontam");
  std::vector<TrainText> texts;
  for (const auto& path : a.train) {
    const auto part = train_texts(read_dataset(path), fs::path(path).stem().string());
    texts.insert(texts.end(), part.begin(), part.end());
  }
  const auto items = read_benchmark(a.bench);

  NgramEmbedder embedder(a.dimension);
  std::vector<std::string> corpus;
  corpus.reserve(texts.size());
  for (const auto& t : texts) corpus.push_back(t.text);
  embedder.fit(corpus);
  const DecontamReport report = scan(texts, items, embedder, a.threshold);

  write_text(a.out, json(report).dump(2) + "\n");
  out << format_contamination_table(report);

  manifest["config"]["threshold"] = a.threshold;
  manifest["config"]["provider"] = {{"kind", "hashed_char_ngram_tfidf"}, {"dimension", a.dimension},
                                    {"min_n", 3}, {"max_n", 5}};
  manifest["inputs"]["train"] = a.train;
  manifest["inputs"]["bench"] = a.bench;
  manifest["outputs"]["report"] = a.out;
  manifest["outputs"]["contaminated"] = report.contaminated;
  manifest.write(manifest_beside(a.out));
  return kOk;
}

// ---- count-params ----------------------------------------------------------------------------

struct CountArgs {
  std::string preset;
  std::string config;
  std::size_t lora_r = 8;
  double lora_alpha = 16.0;
  std::vector<std::string> lora_targets;
  std::string out;
};

int cmd_count(const CountArgs& a, std::ostream& out) {
  Manifest manifest("count-params");
  if (a.preset.empty() == a.config.empty()) throw ConfigError("count-params: give either --preset or --config");
  ModelConfig cfg;
  if (a.preset == "llama2-7b-shape") {
    cfg = ModelConfig::llama2_7b_shape();
  } else if (a.preset == "llama2-70b-shape") {
    cfg = ModelConfig::llama2_70b_shape();
  } else if (!a.preset.empty()) {
    throw ConfigError("unknown preset '" + a.preset + "' (expected llama2-7b-shape or llama2-70b-shape)");
  } else {
    cfg = read_json_file(a.config).get<ModelConfig>();
  }
  cfg.validate();
  LoraConfig lora;
  lora.r = a.lora_r;
  lora.alpha = a.lora_alpha;
  if (!a.lora_targets.empty()) lora.targets = parse_targets(a.lora_targets);
  lora.validate();

  const std::uint64_t trainable = count_trainable(cfg, lora);
  const std::uint64_t dense = count_dense_parameters(cfg);
  std::ostringstream pct;
  pct << std::fixed << std::setprecision(2) << 100.0 * static_cast<double>(trainable) / static_cast<double>(dense);
  out << "model: " << (a.preset.empty() ? a.config : a.preset) << '\n'
      << "dense parameters: " << group_thousands(dense) << '\n'
      << "lora: r=" << lora.r << " alpha=" << lora.alpha << " targets=" << lora.targets.size() << " projections\n"
      << "trainable parameters: " << group_thousands(trainable) << " (" << pct.str() << "%)\n";

  if (!a.out.empty()) {
    const json result{{"dense", dense}, {"trainable", trainable}};
    write_text(a.out, result.dump(2) + "\n");
    manifest["config"]["model"] = cfg;
    manifest["config"]["lora"] = lora;
    if (!a.preset.empty()) manifest["config"]["preset"] = a.preset;
    if (!a.config.empty()) manifest["inputs"]["config"] = a.config;
    manifest["outputs"]["result"] = a.out;
    manifest.write(manifest_beside(a.out));
  }
  return kOk;
}

// ---- merge-lora ------------------------------------------------------------------------------

struct MergeArgs {
  std::string model;
  std::string adapters;
  std::string out;
};

int cmd_merge(const MergeArgs& a, std::ostream& out) {
  Manifest manifest("merge-lora");
  const auto weights = load_model(a.model);
  const Checkpoint ckpt = read_checkpoint(a.adapters);
  const json meta = ckpt.meta();
  if (meta.contains("config") && meta.at("config").get<ModelConfig>() != weights.config) {
    throw ConfigError("adapters were trained for a different model shape");
  }
  const AdapterSet<float> adapters = adapters_from_checkpoint(ckpt);
  auto merged = merge(weights, adapters);
  merged.set_requires_grad(false);
  save_model(a.out, merged);

  manifest["config"]["lora"] = adapters.config();
  manifest["inputs"]["model"] = a.model;
  manifest["inputs"]["adapters"] = a.adapters;
  manifest["outputs"]["model"] = a.out;
  manifest.write(manifest_beside(a.out));
  out << "merged " << adapters.size() << " adapter pairs into " << a.out << '\n';
  return kOk;
}

// ---- generate --------------------------------------------------------------------------------

struct GenerateArgs {
  std::string model;
  std::string adapters;
  std::string prompt;
  std::string system = "You are a helpful medical assistant.";
  bool chat = false;
  std::size_t max_new = 64;
  std::string vocab;
  std::string out;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  Manifest manifest("generate");
  const auto weights = load_model(a.model);
  std::optional<AdapterSet<float>> adapters;
  if (!a.adapters.empty()) adapters.emplace(load_adapters(a.adapters));
  const Tokenizer tok = load_tokenizer(a.vocab);
  check_vocab(weights.config, tok);

  std::vector<int> prompt;
  if (a.chat) {
    auto push = [&](const std::vector<int>& ids) { prompt.insert(prompt.end(), ids.begin(), ids.end()); };
    prompt.push_back(tok.system_id());
    push(tok.encode_content(a.system));
    prompt.push_back(tok.prompter_id());
    push(tok.encode_content(a.prompt));
    prompt.push_back(tok.assistant_id());
  } else {
    prompt = tok.encode(a.prompt);
  }
  if (prompt.empty()) throw InputError("generate: empty prompt");
  const auto ids = greedy_generate(weights, adapters ? &*adapters : nullptr, prompt, a.max_new, tok.end_id());
  std::vector<int> continuation(ids.begin() + static_cast<std::ptrdiff_t>(prompt.size()), ids.end());
  if (!continuation.empty() && continuation.back() == tok.end_id()) continuation.pop_back();
  const std::string text = tok.decode(continuation);
  out << text << '\n';

  if (!a.out.empty()) {
    write_text(a.out, text);
    manifest["config"]["max_new"] = a.max_new;
    manifest["config"]["chat"] = a.chat;
    manifest["inputs"]["model"] = a.model;
    if (!a.adapters.empty()) manifest["inputs"]["adapters"] = a.adapters;
    manifest["inputs"]["prompt"] = a.prompt;
    manifest["outputs"]["text"] = a.out;
    manifest.write(manifest_beside(a.out));
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Instruction fine-tuning and evaluation toolkit for decoder-only language models", "medtune"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  std::optional<int> threads;
  app.add_option("--threads", threads, "Worker threads (default: MEDTUNE_THREADS or 1)")->check(CLI::PositiveNumber);

  InitArgs init;
  auto* s_init = app.add_subcommand("init", "Create a randomly initialized model checkpoint");
  s_init->add_option("--config", init.config, "Model config JSON")->check(CLI::ExistingFile);
  s_init->add_option("--layers", init.layers);
  s_init->add_option("--d-model", init.d_model);
  s_init->add_option("--heads", init.heads);
  s_init->add_option("--kv-heads", init.kv_heads);
  s_init->add_option("--d-ff", init.d_ff);
  s_init->add_option("--context", init.context, "Context length (default 4096)");
  s_init->add_option("--rope-theta", init.rope_theta);
  s_init->add_option("--seed", init.seed);
  s_init->add_option("--vocab", init.vocab, "External vocabulary (JSON array of pieces)")->check(CLI::ExistingFile);
  s_init->add_option("--rig-token", init.rig_token, "Test fixture: always predict this token id");
  s_init->add_option("--out", init.out, "Output checkpoint")->required();

  PackArgs packa;
  auto* s_pack = app.add_subcommand("pack", "Render, tokenize and pack instruction data");
  s_pack->add_option("--data", packa.data, "Dataset JSONL (repeatable)")->check(CLI::ExistingFile);
  s_pack->add_option("--mixture", packa.mixture, "Mixture spec JSON")->check(CLI::ExistingFile);
  s_pack->add_option("--total", packa.total, "Samples drawn from the mixture");
  s_pack->add_option("--seed", packa.seed, "Overrides the mixture seed");
  s_pack->add_option("--context", packa.context, "Chunk length")->capture_default_str()->check(CLI::PositiveNumber);
  s_pack->add_option("--vocab", packa.vocab)->check(CLI::ExistingFile);
  s_pack->add_option("--out", packa.out, "Packed output file")->required();

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Full-parameter or LoRA fine-tuning");
  s_train->add_option("--model", tr.model, "Base model checkpoint")->required()->check(CLI::ExistingFile);
  s_train->add_option("--data", tr.data, "Packed data")->required()->check(CLI::ExistingFile);
  s_train->add_option("--out", tr.out, "Output directory")->required();
  s_train->add_option("--mode", tr.mode, "full or lora")->check(CLI::IsMember({"full", "lora"}));
  s_train->add_option("--config", tr.config, "Training config JSON")->check(CLI::ExistingFile);
  s_train->add_option("--epochs", tr.epochs);
  s_train->add_option("--lr", tr.lr, "Peak learning rate");
  s_train->add_option("--warmup", tr.warmup, "Warmup steps");
  s_train->add_option("--final-lr-fraction", tr.final_fraction);
  s_train->add_option("--weight-decay", tr.weight_decay);
  s_train->add_option("--grad-clip", tr.grad_clip);
  s_train->add_option("--batch", tr.batch, "Chunks per update");
  s_train->add_option("--seed", tr.seed);
  s_train->add_option("--lora-r", tr.lora_r);
  s_train->add_option("--lora-alpha", tr.lora_alpha);
  s_train->add_option("--lora-targets", tr.lora_targets, "Comma-separated projection names or 'all'")
      ->delimiter(',');
  s_train->add_flag("--resume", tr.resume, "Continue from <out>/state.ckpt");
  s_train->add_option("--stop-after-epoch", tr.stop_after_epoch);

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Zero-shot multiple-choice evaluation");
  s_eval->add_option("--model", ev.model)->required()->check(CLI::ExistingFile);
  s_eval->add_option("--adapters", ev.adapters)->check(CLI::ExistingFile);
  s_eval->add_option("--bench", ev.bench, "Benchmark JSONL")->required()->check(CLI::ExistingFile);
  s_eval->add_option("--score-mode", ev.score_mode, "raw or normalized")->capture_default_str();
  s_eval->add_option("--template", ev.templ, "Prompt template containing {question}");
  s_eval->add_option("--vocab", ev.vocab)->check(CLI::ExistingFile);
  s_eval->add_option("--contamination", ev.contamination, "Report from decontam")->check(CLI::ExistingFile);
  s_eval->add_option("--out", ev.out, "Report JSON");

  DecontamArgs dc;
  auto* s_dec = app.add_subcommand("decontam", "Flag evaluation items that near-duplicate training samples");
  s_dec->add_option("--train", dc.train, "Training dataset JSONL (repeatable)")->required()->check(CLI::ExistingFile);
  s_dec->add_option("--bench", dc.bench)->required()->check(CLI::ExistingFile);
  s_dec->add_option("--threshold", dc.threshold)->capture_default_str();
  s_dec->add_option("--dimension", dc.dimension)->capture_default_str()->check(CLI::PositiveNumber);
  s_dec->add_option("--out", dc.out, "Report JSON")->required();

  CountArgs cp;
  auto* s_count = app.add_subcommand("count-params", "Closed-form dense and LoRA parameter counts");
  s_count->add_option("--preset", cp.preset, "llama2-7b-shape or llama2-70b-shape");
  s_count->add_option("--config", cp.config, "Model config JSON")->check(CLI::ExistingFile);
  s_count->add_option("--lora-r", cp.lora_r)->capture_default_str();
  s_count->add_option("--lora-alpha", cp.lora_alpha)->capture_default_str();
  s_count->add_option("--lora-targets", cp.lora_targets)->delimiter(',');
  s_count->add_option("--out", cp.out, "Result JSON");

  MergeArgs mg;
  auto* s_merge = app.add_subcommand("merge-lora", "Fold adapters into the base weights");
  s_merge->add_option("--model", mg.model)->required()->check(CLI::ExistingFile);
  s_merge->add_option("--adapters", mg.adapters)->required()->check(CLI::ExistingFile);
  s_merge->add_option("--out", mg.out)->required();

  GenerateArgs gen;
  auto* s_gen = app.add_subcommand("generate", "Greedy decoding");
  s_gen->add_option("--model", gen.model)->required()->check(CLI::ExistingFile);
  s_gen->add_option("--adapters", gen.adapters)->check(CLI::ExistingFile);
  s_gen->add_option("--prompt", gen.prompt)->required();
  s_gen->add_flag("--chat", gen.chat, "Wrap the prompt in the chat template");
  s_gen->add_option("--system", gen.system)->capture_default_str();
  s_gen->add_option("--max-new", gen.max_new)->capture_default_str();
  s_gen->add_option("--vocab", gen.vocab)->check(CLI::ExistingFile);
  s_gen->add_option("--out", gen.out);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (threads) set_thread_count(*threads);
    if (s_init->parsed()) return cmd_init(init, out);
    if (s_pack->parsed()) return cmd_pack(packa, out);
    if (s_train->parsed()) return cmd_train(tr, out);
    if (s_eval->parsed()) return cmd_eval(ev, out);
    if (s_dec->parsed()) return cmd_decontam(dc, out);
    if (s_count->parsed()) return cmd_count(cp, out);
    if (s_merge->parsed()) return cmd_merge(mg, out);
    if (s_gen->parsed()) return cmd_generate(gen, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInputError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kRuntimeFailure;
}

}  // namespace medtune::cli
