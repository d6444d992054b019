// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Near-duplicate detection between evaluation items and training samples,
// and paired full/decontaminated evaluation.

#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "medtune/datapipe.hpp"
#include "medtune/evalharness.hpp"

namespace medtune {

// Unit-norm embedding.
struct EmbeddingVector {
  std::vector<double> values;
};

// Scales v to unit L2 norm. Throws ContractError for a zero vector.
EmbeddingVector l2_normalize(std::vector<double> v);

// Throws DimensionError on mismatched lengths.
double cosine(const EmbeddingVector& a, const EmbeddingVector& b);

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dimension() const = 0;
  // Throws InputError for empty text.
  virtual EmbeddingVector embed(std::string_view text) const = 0;
};

// Hashed character n-gram TF-IDF. Text is lowercased (ASCII) with whitespace
// runs collapsed to one space; every byte n-gram with min_n <= n <= max_n is
// hashed (FNV-1a) into `dimension` buckets. Texts shorter than min_n count as
// a single gram. IDF is ln((1 + N) / (1 + df)) + 1 over the fitted corpus.
class NgramEmbedder final : public EmbeddingProvider {
 public:
  static constexpr std::size_t kDefaultDimension = 4096;

  explicit NgramEmbedder(std::size_t dimension = kDefaultDimension, std::size_t min_n = 3, std::size_t max_n = 5);

  void fit(const std::vector<std::string>& corpus);

  std::size_t dimension() const override { return dimension_; }
  std::size_t documents() const { return documents_; }
  EmbeddingVector embed(std::string_view text) const override;

  // Weighted, unnormalized vector.
  std::vector<double> weights(std::string_view text) const;
  // Bucketed raw n-gram counts.
  std::vector<double> term_frequencies(std::string_view text) const;

  static std::string normalize(std::string_view text);

 private:
  std::vector<std::string_view> grams(const std::string& normalized) const;
  std::size_t bucket(std::string_view gram) const;

  std::size_t dimension_;
  std::size_t min_n_;
  std::size_t max_n_;
  std::size_t documents_ = 0;
  std::vector<double> idf_;
};

struct TrainText {
  std::string id;
  std::string text;
};

// Question followed by its choices, one per line.
std::string compared_text(const BenchmarkItem& item);
// Prompter text, newline, assistant text.
std::string compared_text(const InstructionSample& sample);

// Ids are "<prefix>:<n>" with n the 1-based record number.
std::vector<TrainText> train_texts(const std::vector<InstructionSample>& samples, const std::string& prefix);

struct ContaminationRecord {
  std::string eval_id;
  std::string benchmark;
  std::string best_train_id;
  double similarity = 0.0;
  bool contaminated = false;
};

struct BenchmarkContamination {
  std::string label;
  std::size_t total = 0;
  std::size_t contaminated = 0;
  double percent = 0.0;
};

struct DecontamReport {
  double threshold = 0.8;
  std::vector<BenchmarkContamination> benchmarks;  // sorted by label
  std::size_t total = 0;
  std::size_t contaminated = 0;
  double percent = 0.0;
  std::vector<ContaminationRecord> records;  // in eval item order

  std::set<std::string> contaminated_ids() const;
};

inline constexpr double kDefaultSimilarityThreshold = 0.8;

// Max cosine of every eval item over all training texts; an item is flagged
// when that maximum strictly exceeds the threshold. Ties for the best match
// keep the earliest training text.
DecontamReport scan(const std::vector<TrainText>& train, const std::vector<BenchmarkItem>& items,
                    const EmbeddingProvider& provider, double threshold = kDefaultSimilarityThreshold);

// Re-derives flags, counts and percents from similarities alone.
DecontamReport recount(std::vector<ContaminationRecord> records, double threshold);

void to_json(nlohmann::json& j, const DecontamReport& r);
void from_json(const nlohmann::json& j, DecontamReport& r);
DecontamReport read_decontam_report(const std::filesystem::path& path);

// Per-benchmark totals, flagged counts and percents plus the overall line.
std::string format_contamination_table(const DecontamReport& report);

struct AccuracyDelta {
  std::string label;  // benchmark label, "mmlu" or "usmle" for the averages
  std::optional<double> full;
  std::optional<double> decontaminated;
  std::optional<double> delta;  // decontaminated - full, when both exist
};

struct DecontaminatedEval {
  EvalReport full;
  EvalReport decontaminated;
  std::vector<AccuracyDelta> deltas;
};

std::vector<AccuracyDelta> accuracy_deltas(const EvalReport& full, const EvalReport& decontaminated);

// Scores the items twice, first in full and then without the flagged ids.
// Throws InputError when the report does not cover every item.
DecontaminatedEval decontaminated_eval(const LanguageModel& model, const Tokenizer& tokenizer,
                                       const std::vector<BenchmarkItem>& items, const DecontamReport& report,
                                       ScoreMode mode, const PromptTemplate& prompt = {});

void to_json(nlohmann::json& j, const DecontaminatedEval& e);
std::string format_delta_table(const std::vector<AccuracyDelta>& deltas);

}  // namespace medtune
