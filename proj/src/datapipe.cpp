// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "le_io.hpp"
#include "medtune/errors.hpp"
#include "medtune/rng.hpp"

namespace medtune {

// ---- dataset files ----------------------------------------------------------------

std::vector<InstructionSample> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open dataset " + path.string());
  std::vector<InstructionSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw DatasetError(path.string(), lineno, "malformed JSON record");
    }
    if (!j.is_object()) throw DatasetError(path.string(), lineno, "record is not an object");
    auto field = [&](const char* name, bool required) -> std::string {
      if (!j.contains(name)) {
        if (required) throw DatasetError(path.string(), lineno, std::string("missing field '") + name + "'");
        return {};
      }
      if (!j[name].is_string()) {
        throw DatasetError(path.string(), lineno, std::string("field '") + name + "' is not a string");
      }
      return j[name].get<std::string>();
    };
    InstructionSample s{field("system", false), field("prompter", true), field("assistant", true),
                        field("source", false)};
    if (s.assistant.empty()) throw DatasetError(path.string(), lineno, "empty assistant response");
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, const std::vector<InstructionSample>& samples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write dataset " + path.string());
  for (const auto& s : samples) {
    os << nlohmann::json{{"system", s.system}, {"prompter", s.prompter}, {"assistant", s.assistant},
                         {"source", s.source}}
              .dump()
       << '\n';
  }
}

// ---- template ----------------------------------------------------------------------

RenderedSample render_template(const InstructionSample& sample) {
  RenderedSample r;
  r.text.reserve(sample.system.size() + sample.prompter.size() + sample.assistant.size() + 48);
  r.text += kSystemKeyword;
  r.text += sample.system;
  r.text += kPrompterKeyword;
  r.text += sample.prompter;
  r.text += kAssistantKeyword;
  r.assistant_begin = r.text.size();
  r.text += sample.assistant;
  r.text += kEndKeyword;
  r.assistant_end = r.text.size();
  return r;
}

EncodedSample encode_sample(const Tokenizer& tokenizer, const InstructionSample& sample) {
  EncodedSample e;
  auto append = [&](const std::string& text) {
    const auto ids = tokenizer.encode_content(text);
    e.tokens.insert(e.tokens.end(), ids.begin(), ids.end());
  };
  e.tokens.push_back(tokenizer.system_id());
  append(sample.system);
  e.tokens.push_back(tokenizer.prompter_id());
  append(sample.prompter);
  e.tokens.push_back(tokenizer.assistant_id());
  e.response_begin = e.tokens.size();
  append(sample.assistant);
  e.tokens.push_back(tokenizer.end_id());
  e.response_end = e.tokens.size();
  return e;
}

// ---- mixtures ----------------------------------------------------------------------

void MixtureSpec::validate() const {
  if (entries.empty()) throw ConfigError("mixture: no entries");
  double total = 0.0;
  for (const auto& e : entries) {
    if (!(e.ratio > 0.0 && e.ratio <= 1.0)) {
      throw ConfigError("mixture: ratio for " + e.path.string() + " must lie in (0, 1]");
    }
    total += e.ratio;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("mixture: ratios sum to " + std::to_string(total) + ", expected 1");
  }
}

MixtureSpec read_mixture_spec(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open mixture spec " + path.string());
  MixtureSpec spec;
  try {
    const auto j = nlohmann::json::parse(is);
    spec.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.at("entries")) {
      std::filesystem::path p = e.at("path").get<std::string>();
      if (p.is_relative()) p = path.parent_path() / p;
      spec.entries.push_back({p, e.at("ratio").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": malformed mixture spec: " + e.what());
  }
  spec.validate();
  return spec;
}

std::vector<std::size_t> mixture_counts(const MixtureSpec& spec, std::size_t total) {
  spec.validate();
  if (total < spec.entries.size()) throw ConfigError("mixture: total smaller than the number of entries");
  std::vector<std::size_t> counts;
  std::size_t assigned = 0;
  std::size_t largest = 0;
  for (std::size_t i = 0; i < spec.entries.size(); ++i) {
    counts.push_back(static_cast<std::size_t>(std::llround(spec.entries[i].ratio * static_cast<double>(total))));
    assigned += counts.back();
    if (spec.entries[i].ratio > spec.entries[largest].ratio) largest = i;
  }
  const auto residue = static_cast<long long>(total) - static_cast<long long>(assigned);
  const auto adjusted = static_cast<long long>(counts[largest]) + residue;
  if (adjusted < 0) throw ConfigError("mixture: rounding residue exceeds the largest entry");
  counts[largest] = static_cast<std::size_t>(adjusted);
  return counts;
}

MixtureResult assemble_mixture(const MixtureSpec& spec, const std::vector<std::vector<InstructionSample>>& sources,
                               std::size_t total) {
  if (sources.size() != spec.entries.size()) throw ContractError("mixture: one source per entry required");
  MixtureResult result;
  result.counts = mixture_counts(spec, total);
  for (std::size_t e = 0; e < sources.size(); ++e) {
    const auto& src = sources[e];
    const std::size_t want = result.counts[e];
    if (want == 0) continue;
    if (src.empty()) throw InputError("mixture: source " + spec.entries[e].path.string() + " is empty");
    Rng rng(Rng::derive(spec.seed, e));
    if (want <= src.size()) {
      std::vector<std::size_t> idx(src.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      // Partial Fisher-Yates: the first `want` slots are a uniform sample.
      for (std::size_t i = 0; i < want; ++i) {
        std::swap(idx[i], idx[i + static_cast<std::size_t>(rng.below(src.size() - i))]);
        result.samples.push_back(src[idx[i]]);
      }
    } else {
      result.warnings.push_back(spec.entries[e].path.string() + ": " + std::to_string(want) +
                                " samples requested from " + std::to_string(src.size()) +
                                ", drawing with replacement");
      for (std::size_t i = 0; i < want; ++i) result.samples.push_back(src[rng.below(src.size())]);
    }
  }
  Rng order(Rng::derive(spec.seed, sources.size()));
  order.shuffle(std::span<InstructionSample>(result.samples));
  return result;
}

MixtureResult assemble_mixture(const MixtureSpec& spec, std::size_t total) {
  spec.validate();
  std::vector<std::vector<InstructionSample>> sources;
  for (const auto& e : spec.entries) sources.push_back(read_dataset(e.path));
  return assemble_mixture(spec, sources, total);
}

// ---- packing ------------------------------------------------------------------------

std::vector<int> PackedChunk::targets() const {
  if (!target_override.empty()) {
    if (target_override.size() != tokens.size()) throw ContractError("chunk: target override length mismatch");
    return target_override;
  }
  std::vector<int> out(tokens.begin() + 1, tokens.end());
  out.push_back(next_token);
  return out;
}

std::vector<PackedChunk> pack(const std::vector<InstructionSample>& samples, const Tokenizer& tokenizer,
                              std::size_t context_length) {
  if (context_length < 2) throw ConfigError("pack: context_length must be at least 2");
  std::vector<int> stream;
  std::vector<std::uint8_t> is_response;
  std::vector<std::uint32_t> owner;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const EncodedSample enc = encode_sample(tokenizer, samples[s]);
    if (enc.tokens.size() > kMaxSampleChunks * context_length) {
      throw InputError("pack: sample " + std::to_string(s) + " has " + std::to_string(enc.tokens.size()) +
                       " tokens, more than " + std::to_string(kMaxSampleChunks) + " x context length");
    }
    for (std::size_t i = 0; i < enc.tokens.size(); ++i) {
      stream.push_back(enc.tokens[i]);
      is_response.push_back(i >= enc.response_begin && i < enc.response_end ? 1 : 0);
      owner.push_back(static_cast<std::uint32_t>(s));
    }
  }

  std::vector<PackedChunk> chunks;
  const std::size_t n = stream.size();
  for (std::size_t begin = 0; begin < n; begin += context_length) {
    const std::size_t end = std::min(n, begin + context_length);
    PackedChunk c;
    c.tokens.assign(context_length, tokenizer.pad_id());
    c.loss_mask.assign(context_length, 0);
    std::copy(stream.begin() + static_cast<std::ptrdiff_t>(begin), stream.begin() + static_cast<std::ptrdiff_t>(end),
              c.tokens.begin());
    c.next_token = end < n ? stream[end] : tokenizer.pad_id();
    for (std::size_t g = begin; g < end; ++g) {
      // Position g predicts stream[g + 1].
      if (g + 1 < n && is_response[g + 1]) c.loss_mask[g - begin] = 1;
      const auto local = static_cast<std::uint32_t>(g - begin);
      if (c.boundaries.empty() || c.boundaries.back().sample_id != owner[g]) {
        c.boundaries.push_back({owner[g], local, local + 1});
      } else {
        c.boundaries.back().end = local + 1;
      }
    }
    chunks.push_back(std::move(c));
  }
  return chunks;
}

// ---- packed file ----------------------------------------------------------------------

namespace {
constexpr char kPackMagic[8] = {'M', 'D', 'T', 'P', 'A', 'C', 'K', '1'};
constexpr std::uint32_t kPackVersion = 1;
}  // namespace

void write_packed(const std::filesystem::path& path, const PackedFile& file) {
  using detail::write_le;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write packed file " + path.string());
  os.write(kPackMagic, sizeof kPackMagic);
  write_le<std::uint32_t>(os, kPackVersion);
  write_le<std::uint64_t>(os, file.chunks.size());
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(file.context_length));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(file.tokenizer_mode));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(file.vocab_size));
  for (const auto& c : file.chunks) {
    if (c.tokens.size() != file.context_length || c.loss_mask.size() != file.context_length) {
      throw ContractError("write_packed: chunk length differs from context_length");
    }
    if (!c.target_override.empty()) throw ContractError("write_packed: target overrides are not serialized");
    for (int t : c.tokens) write_le<std::int32_t>(os, t);
    write_le<std::int32_t>(os, c.next_token);
    os.write(reinterpret_cast<const char*>(c.loss_mask.data()), static_cast<std::streamsize>(c.loss_mask.size()));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.boundaries.size()));
    for (const auto& b : c.boundaries) {
      write_le<std::uint32_t>(os, b.sample_id);
      write_le<std::uint32_t>(os, b.start);
      write_le<std::uint32_t>(os, b.end);
    }
  }
  if (!os) throw IoError("failed writing packed file " + path.string());
}

PackedFile read_packed(const std::filesystem::path& path) {
  using detail::read_le;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open packed file " + path.string());
  char magic[sizeof kPackMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kPackMagic, sizeof magic) != 0) {
    throw InputError(path.string() + ": not a packed chunk file");
  }
  if (read_le<std::uint32_t>(is) != kPackVersion) throw InputError(path.string() + ": unsupported version");
  PackedFile f;
  const auto count = read_le<std::uint64_t>(is);
  f.context_length = read_le<std::uint32_t>(is);
  const auto mode = read_le<std::uint32_t>(is);
  if (mode > 1) throw InputError(path.string() + ": unknown tokenizer mode");
  f.tokenizer_mode = static_cast<TokenizerMode>(mode);
  f.vocab_size = read_le<std::uint32_t>(is);
  if (!is || f.context_length < 2) throw InputError(path.string() + ": malformed header");
  for (std::uint64_t i = 0; i < count; ++i) {
    PackedChunk c;
    c.tokens.resize(f.context_length);
    for (auto& t : c.tokens) t = read_le<std::int32_t>(is);
    c.next_token = read_le<std::int32_t>(is);
    c.loss_mask.resize(f.context_length);
    is.read(reinterpret_cast<char*>(c.loss_mask.data()), static_cast<std::streamsize>(f.context_length));
    const auto nb = read_le<std::uint32_t>(is);
    if (!is || nb > f.context_length) throw InputError(path.string() + ": truncated chunk " + std::to_string(i));
    for (std::uint32_t b = 0; b < nb; ++b) {
      SampleSpan s;
      s.sample_id = read_le<std::uint32_t>(is);
      s.start = read_le<std::uint32_t>(is);
      s.end = read_le<std::uint32_t>(is);
      c.boundaries.push_back(s);
    }
    if (!is) throw InputError(path.string() + ": truncated chunk " + std::to_string(i));
    f.chunks.push_back(std::move(c));
  }
  return f;
}

}  // namespace medtune
