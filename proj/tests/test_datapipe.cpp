// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "medtune/datapipe.hpp"
#include "medtune/errors.hpp"
#include "medtune/rng.hpp"
#include "support.hpp"

using namespace medtune;
using namespace medtune::testing;

namespace {

// Encoded length is 4 keyword tokens plus the field bytes.
InstructionSample sample_of_length(std::size_t tokens, char fill) {
  return {"", "q", std::string(tokens - 5, fill), "test"};
}

std::vector<InstructionSample> random_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  auto text = [&](std::size_t max_len) {
    std::string s(rng.below(max_len + 1), ' ');
    for (auto& c : s) c = static_cast<char>('a' + rng.below(26));
    return s;
  };
  std::vector<InstructionSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    InstructionSample s{text(12), text(40), text(30), "rand"};
    if (s.assistant.empty()) s.assistant = "x";
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("render_template: worked example and spans") {
  const auto r = render_template({"You are helpful", "2+2?", "4", "x"});
  CHECK(r.text == "<|system|>You are helpful<|prompter|>2+2?<|assistant|>4<|end|>");
  // 10 + 15 + 12 + 4 + 13 = 54 bytes precede the response.
  CHECK(r.assistant_begin == 54);
  CHECK(r.assistant_end == 62);
  CHECK(r.text.substr(r.assistant_begin, r.assistant_end - r.assistant_begin) == "4<|end|>");

  const auto e = render_template({"", "2+2?", "4", "x"});
  CHECK(e.text == "<|system|><|prompter|>2+2?<|assistant|>4<|end|>");
  CHECK(e.assistant_begin == 39);
  CHECK(e.assistant_end - e.assistant_begin == r.assistant_end - r.assistant_begin);
}

TEST_CASE("encode_sample: keyword ids and response span") {
  const auto tok = Tokenizer::byte_level();
  const auto e = encode_sample(tok, {"You are helpful", "2+2?", "4", "x"});
  REQUIRE(e.tokens.size() == 4 + 15 + 4 + 1);
  CHECK(e.tokens.front() == tok.system_id());
  CHECK(e.tokens[16] == tok.prompter_id());
  CHECK(e.tokens[21] == tok.assistant_id());
  CHECK(e.response_begin == 22);
  CHECK(e.response_end == 24);
  CHECK(e.tokens[22] == '4');
  CHECK(e.tokens[23] == tok.end_id());
  // Keyword text inside a field stays content.
  const auto k = encode_sample(tok, {"", "<|end|>", "ok", ""});
  CHECK(std::count(k.tokens.begin(), k.tokens.end(), tok.end_id()) == 1);
  CHECK(tok.decode(k.tokens) == render_template({"", "<|end|>", "ok", ""}).text);
}

TEST_CASE("tokenizer round trips in both modes") {
  const std::string text = "<|system|>Dose: 5 mg/kg\n<|prompter|>caf\xc3\xa9?<|assistant|>abcabc<|end|>";
  const auto bytes = Tokenizer::byte_level();
  CHECK(bytes.vocab_size() == 261);
  CHECK(bytes.decode(bytes.encode(text)) == text);
  CHECK(bytes.encode("<|end|>") == std::vector<int>{bytes.end_id()});
  CHECK(bytes.encode_content("<|end|>").size() == 7);
  CHECK(bytes.decode(std::vector<int>{'a', bytes.pad_id(), 'b'}) == "ab");
  CHECK_THROWS_AS(bytes.decode(std::vector<int>{261}), InputError);

  TempDir dir("vocab");
  {
    std::ofstream os(dir / "vocab.json");
    os << R"(["abc", "ab", "x", "mg/kg", "abc"])";
  }
  const auto ext = Tokenizer::from_vocab_file((dir / "vocab.json").string());
  CHECK(ext.mode() == TokenizerMode::external_vocab);
  CHECK(ext.content_size() == 259);
  CHECK(ext.vocab_size() == 264);
  CHECK(ext.encode_content("abcab") == std::vector<int>{256, 257});
  CHECK(ext.decode(ext.encode(text)) == text);
  CHECK(ext.encode(text).size() < bytes.encode(text).size());
  CHECK_THROWS_AS(Tokenizer::from_vocab_file((dir / "none.json").string()), InputError);
}

TEST_CASE("mixture counts") {
  MixtureSpec two{{{"a", 0.6}, {"b", 0.4}}, 1};
  CHECK(mixture_counts(two, 10) == std::vector<std::size_t>{6, 4});

  // Residue goes to the largest entry.
  MixtureSpec thirds{{{"a", 1.0 / 3}, {"b", 1.0 / 3}, {"c", 1.0 / 3}}, 1};
  const auto c = mixture_counts(thirds, 10);
  CHECK(std::accumulate(c.begin(), c.end(), std::size_t{0}) == 10);
  CHECK(c == std::vector<std::size_t>{4, 3, 3});

  // A medical/general aggregate split of 411,064 and 295,649 records.
  const double total = 411064.0 + 295649.0;
  MixtureSpec agg{{{"medical", 411064.0 / total}, {"general", 295649.0 / total}}, 1};
  const auto n = mixture_counts(agg, 706713);
  CHECK(n == std::vector<std::size_t>{411064, 295649});
  auto percent = [&](std::size_t k) { return std::round(1e4 * static_cast<double>(n[k]) / total) / 100.0; };
  CHECK(percent(0) == 58.17);
  CHECK(percent(1) == 41.83);
  const auto small = mixture_counts(agg, 10);
  CHECK(small == std::vector<std::size_t>{6, 4});

  MixtureSpec bad{{{"a", 0.6}, {"b", 0.5}}, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  MixtureSpec empty{{}, 1};
  CHECK_THROWS_AS(empty.validate(), ConfigError);
  CHECK_THROWS_AS(mixture_counts(thirds, 2), ConfigError);
}

TEST_CASE("assemble_mixture: determinism, sampling and warnings") {
  const auto a = random_samples(20, 1);
  const auto b = random_samples(3, 2);
  MixtureSpec spec{{{"a", 0.5}, {"b", 0.5}}, 11};
  const auto r1 = assemble_mixture(spec, {a, b}, 10);
  const auto r2 = assemble_mixture(spec, {a, b}, 10);
  REQUIRE(r1.samples.size() == 10);
  CHECK(r1.counts == std::vector<std::size_t>{5, 5});
  for (std::size_t i = 0; i < 10; ++i) CHECK(r1.samples[i].prompter == r2.samples[i].prompter);
  REQUIRE(r1.warnings.size() == 1);
  CHECK(r1.warnings[0].find("with replacement") != std::string::npos);

  // Without replacement the draws from "a" are distinct.
  std::set<std::string> from_a;
  for (const auto& s : r1.samples) {
    if (std::any_of(a.begin(), a.end(), [&](const auto& x) { return x.prompter == s.prompter; })) {
      from_a.insert(s.prompter);
    }
  }
  CHECK(from_a.size() == 5);

  spec.seed = 12;
  const auto r3 = assemble_mixture(spec, {a, b}, 10);
  bool differs = false;
  for (std::size_t i = 0; i < 10; ++i) differs |= r1.samples[i].prompter != r3.samples[i].prompter;
  CHECK(differs);
}

TEST_CASE("mixture spec files resolve relative paths") {
  TempDir dir("mix");
  write_dataset(dir / "a.jsonl", random_samples(8, 3));
  write_dataset(dir / "b.jsonl", random_samples(8, 4));
  {
    std::ofstream os(dir / "mix.json");
    os << R"({"seed": 5, "entries": [{"path": "a.jsonl", "ratio": 0.75}, {"path": "b.jsonl", "ratio": 0.25}]})";
  }
  const auto spec = read_mixture_spec(dir / "mix.json");
  CHECK(spec.seed == 5);
  CHECK(spec.entries[0].path == dir / "a.jsonl");
  const auto r = assemble_mixture(spec, 8);
  CHECK(r.counts == std::vector<std::size_t>{6, 2});
  CHECK(r.warnings.empty());
  {
    std::ofstream os(dir / "gone.json");
    os << R"({"entries": [{"path": "missing.jsonl", "ratio": 1.0}]})";
  }
  CHECK_THROWS_AS(assemble_mixture(read_mixture_spec(dir / "gone.json"), 4), InputError);
}

TEST_CASE("pack: 2000 + 2500 tokens at context 4096") {
  const auto tok = Tokenizer::byte_level();
  const std::vector<InstructionSample> samples{sample_of_length(2000, 'a'), sample_of_length(2500, 'b')};
  REQUIRE(encode_sample(tok, samples[0]).tokens.size() == 2000);
  REQUIRE(encode_sample(tok, samples[1]).tokens.size() == 2500);
  const auto chunks = pack(samples, tok, 4096);
  REQUIRE(chunks.size() == 2);

  const auto& c1 = chunks[0];
  REQUIRE(c1.boundaries.size() == 2);
  CHECK(c1.boundaries[0].sample_id == 0);
  CHECK(c1.boundaries[0].start == 0);
  CHECK(c1.boundaries[0].end == 2000);
  CHECK(c1.boundaries[1].sample_id == 1);
  CHECK(c1.boundaries[1].end - c1.boundaries[1].start == 2096);
  CHECK(c1.tokens[2000] == tok.system_id());
  CHECK(c1.next_token == 'b');

  const auto& c2 = chunks[1];
  REQUIRE(c2.boundaries.size() == 1);
  CHECK(c2.boundaries[0].sample_id == 1);
  CHECK(c2.boundaries[0].start == 0);
  CHECK(c2.boundaries[0].end == 404);
  CHECK(c2.tokens[403] == tok.end_id());
  for (std::size_t i = 404; i < 4096; ++i) {
    CHECK(c2.tokens[i] == tok.pad_id());
    CHECK(c2.loss_mask[i] == 0);
  }
  CHECK(c2.next_token == tok.pad_id());

  // Sample 1 has 1995 response bytes plus <|end|> as targets; sample 2 has 2496.
  std::size_t mask_sum = 0;
  for (const auto& c : chunks) mask_sum += std::accumulate(c.loss_mask.begin(), c.loss_mask.end(), std::size_t{0});
  CHECK(mask_sum == 1996 + 2496);
}

TEST_CASE("pack: single short sample and oversized sample") {
  const auto tok = Tokenizer::byte_level();
  const auto chunks = pack({{"s", "p", "r", ""}}, tok, 16);
  REQUIRE(chunks.size() == 1);
  // [sys s prm p ast r end] then pad; positions 4 and 5 predict 'r' and <|end|>.
  const std::vector<std::uint8_t> want{0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(chunks[0].loss_mask == want);
  CHECK(chunks[0].tokens[7] == tok.pad_id());

  CHECK_NOTHROW(pack({sample_of_length(64, 'z')}, tok, 16));
  CHECK_THROWS_AS(pack({sample_of_length(65, 'z')}, tok, 16), InputError);
  CHECK_THROWS_AS(pack({}, tok, 1), ConfigError);
  CHECK(pack({}, tok, 16).empty());
}

TEST_CASE("pack invariants on random samples") {
  const auto tok = Tokenizer::byte_level();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto samples = random_samples(40, seed);
    for (std::size_t ctx : {24u, 32u, 100u}) {
      const auto chunks = pack(samples, tok, ctx);

      // Rebuild the stream and its response flags independently.
      std::vector<int> stream;
      std::vector<std::uint8_t> response;
      std::size_t response_targets = 0;
      for (const auto& s : samples) {
        const auto text = render_template(s);
        const auto ids = tok.encode(text.text.substr(0, text.assistant_begin));
        const auto resp = tok.encode(text.text.substr(text.assistant_begin));
        stream.insert(stream.end(), ids.begin(), ids.end());
        response.insert(response.end(), ids.size(), 0);
        stream.insert(stream.end(), resp.begin(), resp.end());
        response.insert(response.end(), resp.size(), 1);
        response_targets += resp.size();
      }
      CHECK(chunks.size() == (stream.size() + ctx - 1) / ctx);

      std::vector<int> joined;
      std::size_t mask_sum = 0;
      for (std::size_t k = 0; k < chunks.size(); ++k) {
        const auto& c = chunks[k];
        REQUIRE(c.tokens.size() == ctx);
        REQUIRE(c.loss_mask.size() == ctx);
        const auto targets = c.targets();
        for (std::size_t i = 0; i < ctx; ++i) {
          const std::size_t g = k * ctx + i;
          if (g < stream.size()) joined.push_back(c.tokens[i]);
          const bool want = g + 1 < stream.size() && response[g + 1];
          CHECK(c.loss_mask[i] == (want ? 1 : 0));
          if (c.loss_mask[i]) {
            CHECK(targets[i] == stream[g + 1]);
            CHECK((targets[i] == tok.end_id() || !tok.is_special(targets[i])));
          }
          mask_sum += c.loss_mask[i];
        }
        std::uint32_t covered = 0;
        for (const auto& b : c.boundaries) covered += b.end - b.start;
        CHECK(covered == std::min(ctx, stream.size() - k * ctx));
      }
      CHECK(joined == stream);
      // The first token of the stream is never a target.
      CHECK(mask_sum == response_targets);
      CHECK(pack(samples, tok, ctx).size() == chunks.size());
    }
  }
}

TEST_CASE("dataset files: round trip and line-numbered errors") {
  TempDir dir("ds");
  const auto samples = random_samples(5, 9);
  write_dataset(dir / "d.jsonl", samples);
  const auto back = read_dataset(dir / "d.jsonl");
  REQUIRE(back.size() == 5);
  CHECK(back[4].assistant == samples[4].assistant);
  CHECK(back[4].source == "rand");

  auto expect_line = [&](const std::string& body, std::size_t line) {
    {
      std::ofstream os(dir / "bad.jsonl");
      os << body;
    }
    try {
      read_dataset(dir / "bad.jsonl");
      FAIL("expected DatasetError");
    } catch (const DatasetError& e) {
      CHECK(e.line() == line);
      CHECK(std::string(e.what()).find("bad.jsonl:" + std::to_string(line)) != std::string::npos);
    }
  };
  const std::string good = R"({"system": "", "prompter": "p", "assistant": "a", "source": "s"})";
  expect_line(good + "\n\n" + good + "\n{not json\n", 4);
  expect_line(good + "\n" + R"({"prompter": "p"})" + "\n", 2);
  expect_line(R"({"prompter": 3, "assistant": "a"})", 1);
  expect_line(good + "\n" + R"({"prompter": "p", "assistant": ""})", 2);
  expect_line("[1, 2]\n", 1);
  CHECK_THROWS_AS(read_dataset(dir / "absent.jsonl"), InputError);
}

TEST_CASE("packed files round trip and reject damage") {
  TempDir dir("pk");
  const auto tok = Tokenizer::byte_level();
  PackedFile f{32, TokenizerMode::byte_level, tok.vocab_size(), pack(random_samples(12, 5), tok, 32)};
  write_packed(dir / "p.bin", f);
  const auto g = read_packed(dir / "p.bin");
  CHECK(g.context_length == 32);
  CHECK(g.vocab_size == 261);
  REQUIRE(g.chunks.size() == f.chunks.size());
  for (std::size_t i = 0; i < f.chunks.size(); ++i) {
    CHECK(g.chunks[i].tokens == f.chunks[i].tokens);
    CHECK(g.chunks[i].loss_mask == f.chunks[i].loss_mask);
    CHECK(g.chunks[i].next_token == f.chunks[i].next_token);
    CHECK(g.chunks[i].boundaries.size() == f.chunks[i].boundaries.size());
  }
  const auto size = std::filesystem::file_size(dir / "p.bin");
  std::filesystem::resize_file(dir / "p.bin", size - 5);
  CHECK_THROWS_AS(read_packed(dir / "p.bin"), InputError);
  {
    std::ofstream os(dir / "junk.bin");
    os << "not a pack file at all";
  }
  CHECK_THROWS_AS(read_packed(dir / "junk.bin"), InputError);
}
