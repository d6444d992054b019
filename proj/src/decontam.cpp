// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/decontam.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "medtune/errors.hpp"
#include "medtune/parallel.hpp"

namespace medtune {

EmbeddingVector l2_normalize(std::vector<double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  if (!(ss > 0.0)) throw ContractError("l2_normalize: zero vector");
  const double inv = 1.0 / std::sqrt(ss);
  for (double& x : v) x *= inv;
  return EmbeddingVector{std::move(v)};
}

double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.values.size() != b.values.size()) {
    throw DimensionError("cosine: dimensions " + std::to_string(a.values.size()) + " and " +
                         std::to_string(b.values.size()));
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) dot += a.values[i] * b.values[i];
  return dot;
}

// ---- n-gram provider --------------------------------------------------------------------

NgramEmbedder::NgramEmbedder(std::size_t dimension, std::size_t min_n, std::size_t max_n)
    : dimension_(dimension), min_n_(min_n), max_n_(max_n), idf_(dimension, 1.0) {
  if (dimension == 0) throw ConfigError("ngram embedder: dimension must be positive");
  if (min_n == 0 || max_n < min_n) throw ConfigError("ngram embedder: need 1 <= min_n <= max_n");
}

std::string NgramEmbedder::normalize(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(u < 0x80 ? std::tolower(u) : u));
  }
  return out;
}

std::vector<std::string_view> NgramEmbedder::grams(const std::string& normalized) const {
  std::vector<std::string_view> out;
  const std::string_view s(normalized);
  if (s.size() < min_n_) {
    if (!s.empty()) out.push_back(s);
    return out;
  }
  for (std::size_t n = min_n_; n <= max_n_ && n <= s.size(); ++n) {
    for (std::size_t i = 0; i + n <= s.size(); ++i) out.push_back(s.substr(i, n));
  }
  return out;
}

std::size_t NgramEmbedder::bucket(std::string_view gram) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : gram) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return static_cast<std::size_t>(h % dimension_);
}

void NgramEmbedder::fit(const std::vector<std::string>& corpus) {
  std::vector<std::size_t> df(dimension_, 0);
  for (const auto& doc : corpus) {
    const std::string norm = normalize(doc);
    std::unordered_set<std::size_t> seen;
    for (auto g : grams(norm)) seen.insert(bucket(g));
    for (auto b : seen) ++df[b];
  }
  documents_ = corpus.size();
  const double n = static_cast<double>(documents_);
  for (std::size_t i = 0; i < dimension_; ++i) {
    idf_[i] = std::log((1.0 + n) / (1.0 + static_cast<double>(df[i]))) + 1.0;
  }
}

std::vector<double> NgramEmbedder::term_frequencies(std::string_view text) const {
  std::vector<double> tf(dimension_, 0.0);
  const std::string norm = normalize(text);
  for (auto g : grams(norm)) tf[bucket(g)] += 1.0;
  return tf;
}

std::vector<double> NgramEmbedder::weights(std::string_view text) const {
  auto w = term_frequencies(text);
  for (std::size_t i = 0; i < dimension_; ++i) w[i] *= idf_[i];
  return w;
}

EmbeddingVector NgramEmbedder::embed(std::string_view text) const {
  if (normalize(text).empty()) throw InputError("embed: empty text");
  return l2_normalize(weights(text));
}

// ---- compared text -----------------------------------------------------------------------

std::string compared_text(const BenchmarkItem& item) {
  std::string out = item.question;
  for (const auto& c : item.choices) {
    out += '\n';
    out += c;
  }
  return out;
}

std::string compared_text(const InstructionSample& sample) { return sample.prompter + "\n" + sample.assistant; }

std::vector<TrainText> train_texts(const std::vector<InstructionSample>& samples, const std::string& prefix) {
  std::vector<TrainText> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back({prefix + ":" + std::to_string(i + 1), compared_text(samples[i])});
  }
  return out;
}

// ---- scan -------------------------------------------------------------------------------

std::set<std::string> DecontamReport::contaminated_ids() const {
  std::set<std::string> out;
  for (const auto& r : records) {
    if (r.contaminated) out.insert(r.eval_id);
  }
  return out;
}

namespace {

double percent_of(std::size_t part, std::size_t whole) {
  return whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole);
}

struct SparseVector {
  std::vector<std::uint32_t> index;
  std::vector<double> value;
};

SparseVector sparsify(const EmbeddingVector& v) {
  SparseVector s;
  for (std::size_t i = 0; i < v.values.size(); ++i) {
    if (v.values[i] != 0.0) {
      s.index.push_back(static_cast<std::uint32_t>(i));
      s.value.push_back(v.values[i]);
    }
  }
  return s;
}

}  // namespace

DecontamReport recount(std::vector<ContaminationRecord> records, double threshold) {
  DecontamReport r;
  r.threshold = threshold;
  std::map<std::string, BenchmarkContamination> by_label;
  for (auto& rec : records) {
    rec.contaminated = rec.similarity > threshold;
    auto& b = by_label[rec.benchmark];
    b.label = rec.benchmark;
    b.total += 1;
    b.contaminated += rec.contaminated ? 1 : 0;
    r.total += 1;
    r.contaminated += rec.contaminated ? 1 : 0;
  }
  for (auto& [label, b] : by_label) {
    b.percent = percent_of(b.contaminated, b.total);
    r.benchmarks.push_back(b);
  }
  r.percent = percent_of(r.contaminated, r.total);
  r.records = std::move(records);
  return r;
}

DecontamReport scan(const std::vector<TrainText>& train, const std::vector<BenchmarkItem>& items,
                    const EmbeddingProvider& provider, double threshold) {
  if (train.empty()) throw InputError("scan: no training texts");
  if (items.empty()) throw InputError("scan: no evaluation items");

  std::vector<SparseVector> train_vecs(train.size());
  parallel_for(train.size(), 16, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) train_vecs[i] = sparsify(provider.embed(train[i].text));
  });

  std::vector<ContaminationRecord> records(items.size());
  parallel_for(items.size(), 4, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      const EmbeddingVector ev = provider.embed(compared_text(items[k]));
      double best = -2.0;
      std::size_t best_i = 0;
      for (std::size_t i = 0; i < train_vecs.size(); ++i) {
        const auto& tv = train_vecs[i];
        double dot = 0.0;
        for (std::size_t n = 0; n < tv.index.size(); ++n) dot += ev.values[tv.index[n]] * tv.value[n];
        if (dot > best) {
          best = dot;
          best_i = i;
        }
      }
      records[k] = {items[k].id, items[k].benchmark, train[best_i].id, best, false};
    }
  });
  return recount(std::move(records), threshold);
}

// ---- serialization ------------------------------------------------------------------------

void to_json(nlohmann::json& j, const DecontamReport& r) {
  nlohmann::json benches = nlohmann::json::array();
  for (const auto& b : r.benchmarks) {
    benches.push_back({{"label", b.label}, {"total", b.total}, {"contaminated", b.contaminated}, {"percent", b.percent}});
  }
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& rec : r.records) {
    recs.push_back({{"eval_id", rec.eval_id},
                    {"benchmark", rec.benchmark},
                    {"best_train_id", rec.best_train_id},
                    {"similarity", rec.similarity},
                    {"contaminated", rec.contaminated}});
  }
  j = nlohmann::json{{"threshold", r.threshold},
                     {"benchmarks", benches},
                     {"total", r.total},
                     {"contaminated", r.contaminated},
                     {"percent", r.percent},
                     {"records", recs}};
}

void from_json(const nlohmann::json& j, DecontamReport& r) {
  std::vector<ContaminationRecord> recs;
  for (const auto& x : j.at("records")) {
    recs.push_back({x.at("eval_id").get<std::string>(), x.at("benchmark").get<std::string>(),
                    x.at("best_train_id").get<std::string>(), x.at("similarity").get<double>(),
                    x.at("contaminated").get<bool>()});
  }
  std::vector<bool> stored;
  for (const auto& rec : recs) stored.push_back(rec.contaminated);
  r = recount(std::move(recs), j.at("threshold").get<double>());
  for (std::size_t i = 0; i < stored.size(); ++i) {
    if (stored[i] != r.records[i].contaminated) {
      throw InputError("contamination report: flag of " + r.records[i].eval_id + " disagrees with its similarity");
    }
  }
}

DecontamReport read_decontam_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open contamination report " + path.string());
  try {
    return nlohmann::json::parse(is).get<DecontamReport>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed contamination report " + path.string() + ": " + e.what());
  }
}

std::string format_contamination_table(const DecontamReport& report) {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-28s %8s %14s\n", "Dataset", "Total", "Contaminated");
  os << buf;
  for (const auto& b : report.benchmarks) {
    std::snprintf(buf, sizeof buf, "%-28s %8zu %6zu (%5.1f)\n", b.label.c_str(), b.total, b.contaminated, b.percent);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-28s %8zu %6zu (%5.1f)\n", "Total", report.total, report.contaminated,
                report.percent);
  os << buf;
  return os.str();
}

// ---- paired evaluation ------------------------------------------------------------------------

std::vector<AccuracyDelta> accuracy_deltas(const EvalReport& full, const EvalReport& decontaminated) {
  std::vector<AccuracyDelta> out;
  auto push = [&](std::string label, std::optional<double> a, std::optional<double> b) {
    AccuracyDelta d{std::move(label), a, b, std::nullopt};
    if (a && b) d.delta = *b - *a;
    out.push_back(std::move(d));
  };
  for (const auto& b : full.benchmarks) {
    const auto* other = decontaminated.find(b.label);
    push(b.label, b.accuracy, other ? other->accuracy : std::nullopt);
  }
  push("mmlu", full.mmlu_average, decontaminated.mmlu_average);
  push("usmle", full.usmle_average, decontaminated.usmle_average);
  return out;
}

DecontaminatedEval decontaminated_eval(const LanguageModel& model, const Tokenizer& tokenizer,
                                       const std::vector<BenchmarkItem>& items, const DecontamReport& report,
                                       ScoreMode mode, const PromptTemplate& prompt) {
  std::set<std::string> covered;
  for (const auto& r : report.records) covered.insert(r.eval_id);
  for (const auto& it : items) {
    if (!covered.contains(it.id)) throw InputError("contamination report does not cover item " + it.id);
  }
  DecontaminatedEval out;
  out.full = run_benchmark(model, tokenizer, items, mode, {}, prompt);
  out.decontaminated = run_benchmark(model, tokenizer, items, mode, report.contaminated_ids(), prompt);
  out.deltas = accuracy_deltas(out.full, out.decontaminated);
  return out;
}

void to_json(nlohmann::json& j, const DecontaminatedEval& e) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : e.deltas) {
    deltas.push_back(
        {{"label", d.label}, {"full", opt(d.full)}, {"decontaminated", opt(d.decontaminated)}, {"delta", opt(d.delta)}});
  }
  j = nlohmann::json{{"full", e.full}, {"decontaminated", e.decontaminated}, {"deltas", deltas}};
}

std::string format_delta_table(const std::vector<AccuracyDelta>& deltas) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %10s %15s %8s\n", "Dataset", "Full", "Decontaminated", "Delta");
  os << buf;
  auto fmt = [](const std::optional<double>& v, const char* spec) {
    char b[32];
    if (v) {
      std::snprintf(b, sizeof b, spec, *v);
    } else {
      std::snprintf(b, sizeof b, "%s", "-");
    }
    return std::string(b);
  };
  for (const auto& d : deltas) {
    std::snprintf(buf, sizeof buf, "%-28s %10s %15s %8s\n", d.label.c_str(), fmt(d.full, "%.1f").c_str(),
                  fmt(d.decontaminated, "%.1f").c_str(), fmt(d.delta, "%+.1f").c_str());
    os << buf;
  }
  return os.str();
}

}  // namespace medtune
