// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "contamination_fixture.hpp"
#include "medtune/errors.hpp"
#include "support.hpp"

using namespace medtune;
using namespace medtune::testing;

namespace {

// Hands back fixed vectors keyed by text.
class TableProvider final : public EmbeddingProvider {
 public:
  explicit TableProvider(std::map<std::string, EmbeddingVector> table) : table_(std::move(table)) {}
  std::size_t dimension() const override { return 2; }
  EmbeddingVector embed(std::string_view text) const override { return table_.at(std::string(text)); }

 private:
  std::map<std::string, EmbeddingVector> table_;
};

std::vector<std::string> texts_of(const std::vector<TrainText>& train) {
  std::vector<std::string> out;
  for (const auto& t : train) out.push_back(t.text);
  return out;
}

// Answers correctly on the listed ids and wrongly elsewhere.
class OracleLM final : public LanguageModel {
 public:
  std::size_t context_length() const override { return 4096; }
  std::vector<double> target_logprobs(std::span<const int> tokens, std::size_t first_target) const override {
    std::vector<double> out;
    for (std::size_t i = first_target; i < tokens.size(); ++i) out.push_back(tokens[i] == 'R' ? -0.1 : -3.0);
    return out;
  }
};

BenchmarkItem graded(const std::string& id, bool correct) {
  return {id, "Question " + id, {"RRR", "WWW"}, correct ? 0u : 1u, "medqa", false};
}

}  // namespace

TEST_CASE("ngram embedder: identity, disjointness, determinism and symmetry") {
  NgramEmbedder e;
  const auto a = e.embed("Glasgow Coma Scale");
  const auto b = e.embed("glasgow   coma\nscale");
  CHECK(a.values == b.values);
  CHECK(cosine(a, b) == doctest::Approx(1.0).epsilon(1e-12));
  double norm = 0.0;
  for (double v : a.values) norm += v * v;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-9));

  // No shared 3-grams and no bucket collisions for these two strings.
  const auto x = e.embed("aaaa");
  const auto y = e.embed("bbbb");
  CHECK(cosine(x, y) == 0.0);

  e.fit({"peaked t waves", "median nerve", "coma scale"});
  const auto p = e.embed("median nerve compression");
  const auto q = e.embed("ulnar nerve compression");
  CHECK(e.embed("median nerve compression").values == p.values);
  CHECK(cosine(p, q) == cosine(q, p));
  CHECK(cosine(p, q) > 0.0);
  CHECK(cosine(p, q) < 1.0);
  CHECK(e.documents() == 3);

  CHECK(e.embed("ab").values.size() == 4096);
  CHECK_THROWS_AS(e.embed(""), InputError);
  CHECK_THROWS_AS(e.embed("   "), InputError);
  CHECK_THROWS_AS(cosine(a, EmbeddingVector{{1.0}}), DimensionError);
  CHECK_THROWS_AS(l2_normalize({0.0, 0.0}), ContractError);
  CHECK(NgramEmbedder::normalize("  A\tB  c ") == "a b c");
}

TEST_CASE("ngram embedder matches the brute-force oracle") {
  const std::vector<std::string> corpus = {"Which nerve is compressed in carpal tunnel syndrome?",
                                           "What is the antidote for paracetamol overdose?",
                                           "Which valve is most often affected in rheumatic heart disease?"};
  NgramEmbedder e;
  e.fit(corpus);
  const BruteForceTfIdf hashed(corpus, NgramEmbedder::kDefaultDimension);
  const std::vector<std::string> probes = {"Which nerve is compressed at the wrist?", "antidote for overdose",
                                           "rheumatic valve disease", "xy"};
  for (const auto& a : probes) {
    for (const auto& b : corpus) {
      CHECK(cosine(e.embed(a), e.embed(b)) == doctest::Approx(hashed.cosine(a, b)).epsilon(1e-12));
    }
  }
}

TEST_CASE("scale invariance of similarities") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> u(16), v(16);
    for (auto& x : u) x = rng.normal(0.0, 1.0);
    for (auto& x : v) x = rng.normal(0.0, 1.0);
    std::vector<double> su = u;
    const double c = 0.01 + 100.0 * rng.uniform();
    for (auto& x : su) x *= c;
    CHECK(cosine(l2_normalize(u), l2_normalize(v)) ==
          doctest::Approx(cosine(l2_normalize(su), l2_normalize(v))).epsilon(1e-12));
    CHECK(cosine(l2_normalize(u), l2_normalize(u)) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("compared texts and train ids") {
  const BenchmarkItem item{"i", "Q?", {"a", "b"}, 0, "medqa", false};
  CHECK(compared_text(item) == "Q?\na\nb");
  CHECK(compared_text(InstructionSample{"sys", "P", "A", "s"}) == "P\nA");
  const auto t = train_texts({{"", "p1", "a1", ""}, {"", "p2", "a2", ""}}, "med");
  REQUIRE(t.size() == 2);
  CHECK(t[1].id == "med:2");
  CHECK(t[1].text == "p2\na2");
}

TEST_CASE("scan: strict threshold, verbatim copies and earliest best match") {
  const BenchmarkItem at{"at", "at", {"x", "y"}, 0, "medqa", false};
  const BenchmarkItem above{"above", "above", {"x", "y"}, 0, "medqa", false};
  // cos((1, 0), (0.8, 0.6)) is exactly 0.8 in double arithmetic.
  const TableProvider provider({{"train", {{1.0, 0.0}}},
                                {"twin", {{1.0, 0.0}}},
                                {compared_text(at), {{0.8, 0.6}}},
                                {compared_text(above), {{0.81, std::sqrt(1.0 - 0.81 * 0.81)}}}});
  const auto r = scan({{"t:1", "train"}, {"t:2", "twin"}}, {at, above}, provider, 0.8);
  CHECK(r.records[0].similarity == 0.8);
  CHECK_FALSE(r.records[0].contaminated);
  CHECK(r.records[1].contaminated);
  CHECK(r.records[0].best_train_id == "t:1");
  CHECK(r.contaminated == 1);
  CHECK(r.percent == 50.0);
  CHECK_THROWS_AS(scan({}, {at}, provider), InputError);
  CHECK_THROWS_AS(scan({{"t:1", "train"}}, {}, provider), InputError);

  NgramEmbedder e;
  const BenchmarkItem copy{"c", "Which nerve is compressed in carpal tunnel syndrome?", {"Median", "Ulnar"}, 0,
                           "medqa", false};
  const auto v = scan({{"t:1", "unrelated text about dosing"}, {"t:2", compared_text(copy)}}, {copy}, e);
  CHECK(v.records[0].similarity == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v.records[0].best_train_id == "t:2");
  CHECK(v.records[0].contaminated);
}

TEST_CASE("scan: planted corpus flags match the oracle") {
  const auto c = planted_corpus();
  const auto train = train_texts(c.train, "train");
  NgramEmbedder e;
  e.fit(texts_of(train));
  const auto report = scan(train, c.items, e, 0.8);
  const BruteForceTfIdf exact(texts_of(train));
  const BruteForceTfIdf hashed(texts_of(train), NgramEmbedder::kDefaultDimension);

  std::size_t flagged_planted = 0;
  for (std::size_t k = 0; k < c.items.size(); ++k) {
    double best_exact = -2.0, best_hashed = -2.0;
    for (const auto& t : train) {
      best_exact = std::max(best_exact, exact.cosine(compared_text(c.items[k]), t.text));
      best_hashed = std::max(best_hashed, hashed.cosine(compared_text(c.items[k]), t.text));
    }
    const auto& rec = report.records[k];
    CHECK(rec.similarity == doctest::Approx(best_hashed).epsilon(1e-12));
    CHECK(rec.contaminated == (best_hashed > 0.8));
    CHECK(rec.contaminated == (best_exact > 0.8));
    if (rec.contaminated) {
      CHECK(c.planted.contains(rec.eval_id));
      ++flagged_planted;
    }
  }
  // All verbatim copies and the light rewordings; heavy rewordings slip under.
  CHECK(flagged_planted == 16);
  CHECK(report.contaminated == 16);
}

TEST_CASE("report arithmetic, threshold monotonicity and JSON round trip") {
  const auto c = planted_corpus();
  const auto train = train_texts(c.train, "train");
  NgramEmbedder e;
  e.fit(texts_of(train));
  const auto report = scan(train, c.items, e);

  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& r : report.records) {
    counts[r.benchmark].first += r.contaminated ? 1 : 0;
    counts[r.benchmark].second += 1;
  }
  REQUIRE(report.benchmarks.size() == counts.size());
  for (const auto& b : report.benchmarks) {
    CHECK(b.contaminated == counts[b.label].first);
    CHECK(b.total == counts[b.label].second);
    CHECK(b.percent == 100.0 * static_cast<double>(b.contaminated) / static_cast<double>(b.total));
  }
  CHECK(report.total == 50);
  CHECK(report.percent == 100.0 * 16.0 / 50.0);

  std::size_t prev = report.records.size() + 1;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    const auto r = recount(report.records, t);
    CHECK(r.contaminated <= prev);
    prev = r.contaminated;
  }

  TempDir dir("dc");
  {
    std::ofstream os(dir / "r.json");
    os << nlohmann::json(report).dump(2);
  }
  const auto back = read_decontam_report(dir / "r.json");
  CHECK(nlohmann::json(back) == nlohmann::json(report));
  CHECK(back.contaminated_ids().size() == 16);

  auto tampered = nlohmann::json(report);
  tampered["records"][0]["contaminated"] = false;
  {
    std::ofstream os(dir / "bad.json");
    os << tampered.dump();
  }
  CHECK_THROWS_AS(read_decontam_report(dir / "bad.json"), InputError);

  const auto table = format_contamination_table(report);
  CHECK(table.find("medqa") != std::string::npos);
  CHECK(table.find("16") != std::string::npos);
}

TEST_CASE("decontaminated evaluation deltas") {
  const auto tok = Tokenizer::byte_level();
  const OracleLM lm;
  std::vector<BenchmarkItem> items;
  for (int i = 0; i < 10; ++i) items.push_back(graded("q" + std::to_string(i), i < 8));

  SUBCASE("two contaminated items, both correct: 80.0 to 75.0") {
    std::vector<ContaminationRecord> recs;
    for (const auto& it : items) recs.push_back({it.id, it.benchmark, "t:1", it.id == "q0" || it.id == "q1" ? 0.9 : 0.1, false});
    const auto report = recount(recs, 0.8);
    const auto d = decontaminated_eval(lm, tok, items, report, ScoreMode::raw);
    CHECK(*d.full.find("medqa")->accuracy == 80.0);
    CHECK(*d.decontaminated.find("medqa")->accuracy == 75.0);
    const auto it = std::find_if(d.deltas.begin(), d.deltas.end(), [](const auto& x) { return x.label == "medqa"; });
    REQUIRE(it != d.deltas.end());
    CHECK(*it->delta == -5.0);
    CHECK(format_delta_table(d.deltas).find("-5.0") != std::string::npos);
  }
  SUBCASE("nothing contaminated: every delta is exactly zero") {
    std::vector<ContaminationRecord> recs;
    for (const auto& it : items) recs.push_back({it.id, it.benchmark, "t:1", 0.2, false});
    const auto d = decontaminated_eval(lm, tok, items, recount(recs, 0.8), ScoreMode::raw);
    for (const auto& x : d.deltas) {
      if (x.delta) CHECK(*x.delta == 0.0);
    }
  }
  SUBCASE("a report that misses items is rejected") {
    std::vector<ContaminationRecord> recs{{"q0", "medqa", "t:1", 0.9, false}};
    CHECK_THROWS_AS(decontaminated_eval(lm, tok, items, recount(recs, 0.8), ScoreMode::raw), InputError);
  }
}
