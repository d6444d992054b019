// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "medtune/errors.hpp"

namespace medtune {

// ---- benchmark files ---------------------------------------------------------------

std::vector<BenchmarkItem> read_benchmark(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open benchmark " + path.string());
  std::vector<BenchmarkItem> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    BenchmarkItem item;
    try {
      const auto j = nlohmann::json::parse(line);
      item.id = j.at("id").get<std::string>();
      item.question = j.at("question").get<std::string>();
      item.choices = j.at("choices").get<std::vector<std::string>>();
      const auto answer = j.at("answer").get<long long>();
      if (answer < 0) throw DatasetError(path.string(), lineno, "negative answer index");
      item.answer_index = static_cast<std::size_t>(answer);
      item.benchmark = j.at("benchmark").get<std::string>();
      item.has_image = j.value("has_image", false);
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(path.string(), lineno, std::string("malformed benchmark record: ") + e.what());
    }
    if (item.choices.size() < 2) throw DatasetError(path.string(), lineno, "fewer than two choices");
    if (item.answer_index >= item.choices.size()) throw DatasetError(path.string(), lineno, "answer out of range");
    out.push_back(std::move(item));
  }
  return out;
}

void write_benchmark(const std::filesystem::path& path, const std::vector<BenchmarkItem>& items) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write benchmark " + path.string());
  for (const auto& it : items) {
    os << nlohmann::json{{"id", it.id},
                         {"question", it.question},
                         {"choices", it.choices},
                         {"answer", it.answer_index},
                         {"benchmark", it.benchmark},
                         {"has_image", it.has_image}}
              .dump()
       << '\n';
  }
}

// ---- scoring --------------------------------------------------------------------------

std::vector<double> TransformerLM::target_logprobs(std::span<const int> tokens, std::size_t first_target) const {
  if (first_target == 0 || first_target > tokens.size()) throw ContractError("target_logprobs: bad first_target");
  const Tensor logits = forward(weights_, adapters_, tokens);
  const std::size_t vocab = weights_.config.vocab_size;
  const auto data = logits.data();
  std::vector<double> out;
  for (std::size_t i = first_target; i < tokens.size(); ++i) {
    const float* row = data.data() + (i - 1) * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max<double>(mx, row[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
    out.push_back(static_cast<double>(row[tokens[i]]) - mx - std::log(se));
  }
  return out;
}

std::string_view to_string(ScoreMode mode) { return mode == ScoreMode::raw ? "raw" : "normalized"; }

ScoreMode parse_score_mode(std::string_view text) {
  if (text == "raw") return ScoreMode::raw;
  if (text == "normalized") return ScoreMode::normalized;
  throw ConfigError("unknown scoring mode '" + std::string(text) + "' (expected raw or normalized)");
}

std::string PromptTemplate::render(const BenchmarkItem& item) const {
  std::string block = item.question;
  for (std::size_t i = 0; i < item.choices.size(); ++i) {
    block += '\n';
    block += static_cast<char>('A' + static_cast<int>(i % 26));
    block += ". ";
    block += item.choices[i];
  }
  std::string out = text;
  const std::string placeholder = "{question}";
  const auto pos = out.find(placeholder);
  if (pos == std::string::npos) throw ConfigError("prompt template lacks a {question} placeholder");
  out.replace(pos, placeholder.size(), block);
  return out;
}

ChoiceScore score_choice(const LanguageModel& model, const Tokenizer& tokenizer, const std::string& prompt,
                         const std::string& choice) {
  if (choice.empty()) throw InputError("score_choice: empty choice");
  std::vector<int> tokens = tokenizer.encode(prompt);
  if (tokens.empty()) throw InputError("score_choice: empty prompt");
  const std::size_t first = tokens.size();
  const auto cont = tokenizer.encode_content(choice);
  tokens.insert(tokens.end(), cont.begin(), cont.end());
  if (tokens.size() > model.context_length()) {
    throw ContextOverflow("prompt and choice need " + std::to_string(tokens.size()) + " tokens, context is " +
                          std::to_string(model.context_length()));
  }
  const auto lp = model.target_logprobs(tokens, first);
  ChoiceScore s;
  for (double v : lp) s.raw_loglik += v;
  s.n_tokens = lp.size();
  s.normalized_loglik = s.raw_loglik / static_cast<double>(choice.size());
  return s;
}

std::size_t argmax_choice(std::span<const double> scores, bool* tie) {
  if (scores.empty()) throw ContractError("argmax_choice: no scores");
  std::size_t best = 0;
  bool tied = false;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) {
      best = i;
      tied = false;
    } else if (scores[i] == scores[best]) {
      tied = true;
    }
  }
  if (tie) *tie = tied;
  return best;
}

ItemPrediction evaluate_item(const LanguageModel& model, const Tokenizer& tokenizer, const BenchmarkItem& item,
                             ScoreMode mode, const PromptTemplate& prompt) {
  if (item.has_image) throw ContractError("evaluate_item: image questions are not scored");
  const std::string rendered = prompt.render(item);
  ItemPrediction pred;
  std::vector<double> selected;
  for (const auto& choice : item.choices) {
    pred.scores.push_back(score_choice(model, tokenizer, rendered, choice));
    selected.push_back(mode == ScoreMode::raw ? pred.scores.back().raw_loglik
                                              : pred.scores.back().normalized_loglik);
  }
  pred.predicted = argmax_choice(selected, &pred.tie);
  return pred;
}

// ---- reports ------------------------------------------------------------------------------

const BenchmarkScore* EvalReport::find(std::string_view label) const {
  for (const auto& b : benchmarks) {
    if (b.label == label) return &b;
  }
  return nullptr;
}

EvalReport summarize(ScoreMode mode, std::vector<ItemRecord> items, std::vector<SkippedItem> skipped) {
  std::map<std::string, BenchmarkScore> by_label;
  for (const auto& s : skipped) by_label[s.benchmark].label = s.benchmark;
  for (const auto& it : items) {
    auto& b = by_label[it.benchmark];
    b.label = it.benchmark;
    b.scored += 1;
    b.correct += it.correct ? 1 : 0;
  }
  EvalReport r;
  r.mode = mode;
  for (auto& [label, b] : by_label) {
    if (b.scored > 0) b.accuracy = 100.0 * static_cast<double>(b.correct) / static_cast<double>(b.scored);
    r.benchmarks.push_back(b);
  }
  auto mean_of = [&](auto labels) -> std::optional<double> {
    double total = 0.0;
    std::size_t n = 0;
    for (std::string_view l : labels) {
      if (const auto* b = r.find(l); b && b->accuracy) {
        total += *b->accuracy;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
  };
  r.mmlu_average = mean_of(kMmluClinicalTopics);
  r.usmle_average = mean_of(kUsmleSplits);
  r.items = std::move(items);
  r.skipped = std::move(skipped);
  return r;
}

EvalReport run_benchmark(const LanguageModel& model, const Tokenizer& tokenizer,
                         const std::vector<BenchmarkItem>& items, ScoreMode mode,
                         const std::set<std::string>& exclusions, const PromptTemplate& prompt) {
  std::vector<ItemRecord> records;
  std::vector<SkippedItem> skipped;
  std::size_t candidates = 0;
  for (const auto& item : items) {
    if (item.has_image) {
      skipped.push_back({item.id, item.benchmark, "image"});
      continue;
    }
    if (exclusions.contains(item.id)) {
      skipped.push_back({item.id, item.benchmark, "excluded"});
      continue;
    }
    ++candidates;
    try {
      const ItemPrediction p = evaluate_item(model, tokenizer, item, mode, prompt);
      ItemRecord rec{item.id, item.benchmark, p.predicted, item.answer_index, p.predicted == item.answer_index, p.tie,
                     {}};
      for (const auto& s : p.scores) rec.scores.push_back(mode == ScoreMode::raw ? s.raw_loglik : s.normalized_loglik);
      records.push_back(std::move(rec));
    } catch (const ContextOverflow& e) {
      skipped.push_back({item.id, item.benchmark, std::string("context_overflow: ") + e.what()});
    }
  }
  if (candidates == 0) throw InputError("run_benchmark: no items left to score after exclusions");
  return summarize(mode, std::move(records), std::move(skipped));
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json benches = nlohmann::json::array();
  for (const auto& b : r.benchmarks) {
    benches.push_back({{"label", b.label}, {"scored", b.scored}, {"correct", b.correct}, {"accuracy", opt(b.accuracy)}});
  }
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : r.items) {
    items.push_back({{"id", it.id},
                     {"benchmark", it.benchmark},
                     {"predicted", it.predicted},
                     {"answer", it.answer},
                     {"correct", it.correct},
                     {"tie", it.tie},
                     {"scores", it.scores}});
  }
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"id", s.id}, {"benchmark", s.benchmark}, {"reason", s.reason}});
  j = nlohmann::json{{"mode", to_string(r.mode)},
                     {"benchmarks", benches},
                     {"mmlu_average", opt(r.mmlu_average)},
                     {"usmle_average", opt(r.usmle_average)},
                     {"items", items},
                     {"skipped", skipped}};
}

namespace {

struct TableRow {
  std::string label;  // benchmark label, or "mmlu" / "usmle" for averages
  std::string display;
};

std::vector<TableRow> table_rows(const std::vector<std::pair<std::string, const EvalReport*>>& columns) {
  std::vector<TableRow> rows = {
      {"mmlu", "MMLU (average)"},
      {"mmlu.clinical_knowledge", "  Clinical knowledge"},
      {"mmlu.college_biology", "  College biology"},
      {"mmlu.college_medicine", "  College medicine"},
      {"mmlu.medical_genetics", "  Medical genetics"},
      {"mmlu.professional_medicine", "  Professional medicine"},
      {"mmlu.anatomy", "  Anatomy"},
      {"headqa", "HeadQA"},
      {"medmcqa", "MedMCQA"},
      {"medqa", "MedQA"},
      {"pubmedqa", "PubMedQA"},
      {"usmle", "USMLE (average)"},
      {"usmle.self_assessment", "  Self-assessment"},
      {"usmle.sample_exam", "  Sample exam"},
  };
  std::set<std::string> known;
  for (const auto& r : rows) known.insert(r.label);
  std::set<std::string> extra;
  for (const auto& [name, report] : columns) {
    for (const auto& b : report->benchmarks) {
      if (!known.contains(b.label)) extra.insert(b.label);
    }
  }
  for (const auto& l : extra) rows.push_back({l, l});
  return rows;
}

std::optional<double> cell(const EvalReport& r, const std::string& label) {
  if (label == "mmlu") return r.mmlu_average;
  if (label == "usmle") return r.usmle_average;
  if (const auto* b = r.find(label)) return b->accuracy;
  return std::nullopt;
}

}  // namespace

std::string format_table(const std::vector<std::pair<std::string, const EvalReport*>>& columns) {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-26s", "Dataset");
  os << buf;
  for (const auto& [name, report] : columns) {
    std::snprintf(buf, sizeof buf, " %12s", name.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& row : table_rows(columns)) {
    std::snprintf(buf, sizeof buf, "%-26s", row.display.c_str());
    os << buf;
    for (const auto& [name, report] : columns) {
      const auto v = cell(*report, row.label);
      if (v) {
        std::snprintf(buf, sizeof buf, " %12.1f", *v);
      } else {
        std::snprintf(buf, sizeof buf, " %12s", "-");
      }
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace medtune
