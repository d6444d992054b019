// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot multiple-choice scoring by conditional log-likelihood of each
// answer option, and accuracy roll-ups in the layout of the usual medical QA
// results table.

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "medtune/lora.hpp"
#include "medtune/model.hpp"
#include "medtune/tokenizer.hpp"

namespace medtune {

struct BenchmarkItem {
  std::string id;
  std::string question;
  std::vector<std::string> choices;
  std::size_t answer_index = 0;
  std::string benchmark;  // medqa, headqa, medmcqa, pubmedqa, mmlu.<topic>, usmle.<split>
  bool has_image = false;
};

// One JSON object per line: {id, question, choices, answer, benchmark,
// has_image}. Throws DatasetError with the line number of a bad record.
std::vector<BenchmarkItem> read_benchmark(const std::filesystem::path& path);
void write_benchmark(const std::filesystem::path& path, const std::vector<BenchmarkItem>& items);

// Anything that can assign next-token log-probabilities to a sequence.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t context_length() const = 0;
  // log P(tokens[i] | tokens[0..i)) for every i >= first_target.
  virtual std::vector<double> target_logprobs(std::span<const int> tokens, std::size_t first_target) const = 0;
};

class TransformerLM final : public LanguageModel {
 public:
  TransformerLM(const TransformerWeights<float>& weights, const AdapterSet<float>* adapters)
      : weights_(weights), adapters_(adapters) {}

  std::size_t context_length() const override { return weights_.config.context_length; }
  std::vector<double> target_logprobs(std::span<const int> tokens, std::size_t first_target) const override;

 private:
  const TransformerWeights<float>& weights_;
  const AdapterSet<float>* adapters_;
};

enum class ScoreMode { raw, normalized };

std::string_view to_string(ScoreMode mode);
ScoreMode parse_score_mode(std::string_view text);

struct PromptTemplate {
  // "{question}" is replaced by the question followed by lettered options.
  std::string text = "<|system|>You are a helpful medical assistant.<|prompter|>{question}<|assistant|>";

  std::string render(const BenchmarkItem& item) const;
};

struct ChoiceScore {
  double raw_loglik = 0.0;
  double normalized_loglik = 0.0;  // raw / choice byte length
  std::size_t n_tokens = 0;
};

// Sum of log-probabilities of the choice tokens given the rendered prompt.
// Throws ContextOverflow if prompt + choice do not fit the model's context.
ChoiceScore score_choice(const LanguageModel& model, const Tokenizer& tokenizer, const std::string& prompt,
                         const std::string& choice);

struct ItemPrediction {
  std::size_t predicted = 0;
  bool tie = false;
  std::vector<ChoiceScore> scores;
};

// Argmax over per-choice scores in the given mode; ties go to the lowest
// index and are flagged.
std::size_t argmax_choice(std::span<const double> scores, bool* tie = nullptr);

ItemPrediction evaluate_item(const LanguageModel& model, const Tokenizer& tokenizer, const BenchmarkItem& item,
                             ScoreMode mode, const PromptTemplate& prompt = {});

struct BenchmarkScore {
  std::string label;
  std::size_t scored = 0;
  std::size_t correct = 0;
  std::optional<double> accuracy;  // percent; absent when nothing was scored
};

struct ItemRecord {
  std::string id;
  std::string benchmark;
  std::size_t predicted = 0;
  std::size_t answer = 0;
  bool correct = false;
  bool tie = false;
  std::vector<double> scores;  // in the report's score mode
};

struct SkippedItem {
  std::string id;
  std::string benchmark;
  std::string reason;  // "image", "excluded" or "context_overflow: ..."
};

struct EvalReport {
  ScoreMode mode = ScoreMode::raw;
  std::vector<BenchmarkScore> benchmarks;  // sorted by label
  std::optional<double> mmlu_average;       // unweighted mean over the six clinical topics present
  std::optional<double> usmle_average;      // mean of self-assessment and sample exam
  std::vector<ItemRecord> items;            // in input order
  std::vector<SkippedItem> skipped;

  const BenchmarkScore* find(std::string_view label) const;
};

inline constexpr std::array<std::string_view, 6> kMmluClinicalTopics = {
    "mmlu.clinical_knowledge", "mmlu.college_biology",       "mmlu.college_medicine",
    "mmlu.medical_genetics",   "mmlu.professional_medicine", "mmlu.anatomy",
};
inline constexpr std::array<std::string_view, 2> kUsmleSplits = {"usmle.self_assessment", "usmle.sample_exam"};

// Rebuilds per-benchmark counts and the two averages from item records and
// skipped entries. Exposed so reports can be recomputed from their item log.
EvalReport summarize(ScoreMode mode, std::vector<ItemRecord> items, std::vector<SkippedItem> skipped);

// Image items and ids in `exclusions` are skipped before scoring. Throws
// InputError if nothing is left to score.
EvalReport run_benchmark(const LanguageModel& model, const Tokenizer& tokenizer,
                         const std::vector<BenchmarkItem>& items, ScoreMode mode,
                         const std::set<std::string>& exclusions = {}, const PromptTemplate& prompt = {});

void to_json(nlohmann::json& j, const EvalReport& r);
// Plain-text table: MMLU average and topics, HeadQA, MedMCQA, MedQA,
// PubMedQA, USMLE average and splits, then any other labels.
std::string format_table(const std::vector<std::pair<std::string, const EvalReport*>>& columns);

}  // namespace medtune
