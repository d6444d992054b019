// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Instruction samples -> keyword template -> token stream -> fixed-length
// packed chunks with a response-only loss mask.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "medtune/tokenizer.hpp"

namespace medtune {

struct InstructionSample {
  std::string system;
  std::string prompter;
  std::string assistant;
  std::string source;
};

// One JSON object per line with string fields system, prompter, assistant
// and source. Blank lines are skipped. Throws DatasetError with the 1-based
// line number of the first malformed record.
std::vector<InstructionSample> read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const std::vector<InstructionSample>& samples);

struct RenderedSample {
  std::string text;
  // Byte span [assistant_begin, assistant_end) covering the response text
  // and the terminator keyword that follows it.
  std::size_t assistant_begin = 0;
  std::size_t assistant_end = 0;
};

RenderedSample render_template(const InstructionSample& sample);

struct EncodedSample {
  std::vector<int> tokens;
  // Token span [response_begin, response_end) of the response and its <|end|>.
  std::size_t response_begin = 0;
  std::size_t response_end = 0;
};

// Encodes segment by segment, so keyword-looking text inside a field stays
// ordinary content.
EncodedSample encode_sample(const Tokenizer& tokenizer, const InstructionSample& sample);

// ---- mixtures -------------------------------------------------------------------

struct MixtureEntry {
  std::filesystem::path path;
  double ratio = 0.0;
};

struct MixtureSpec {
  std::vector<MixtureEntry> entries;
  std::uint64_t seed = 0;

  // Ratios in (0, 1] summing to 1 within 1e-9.
  void validate() const;
};

// {"seed": n, "entries": [{"path": ..., "ratio": ...}]}; relative paths are
// resolved against the spec file's directory.
MixtureSpec read_mixture_spec(const std::filesystem::path& path);

// round(ratio * total) per entry, with the rounding residue going to the
// largest-ratio entry.
std::vector<std::size_t> mixture_counts(const MixtureSpec& spec, std::size_t total);

struct MixtureResult {
  std::vector<InstructionSample> samples;
  std::vector<std::size_t> counts;    // per entry, in spec order
  std::vector<std::string> warnings;  // entries sampled with replacement
};

// Draws without replacement when the source is large enough, otherwise
// with replacement plus a warning, then shuffles the union. Deterministic in
// spec.seed.
MixtureResult assemble_mixture(const MixtureSpec& spec, std::size_t total);
MixtureResult assemble_mixture(const MixtureSpec& spec, const std::vector<std::vector<InstructionSample>>& sources,
                               std::size_t total);

// ---- packing --------------------------------------------------------------------

struct SampleSpan {
  std::uint32_t sample_id = 0;
  std::uint32_t start = 0;  // chunk-local, inclusive
  std::uint32_t end = 0;    // chunk-local, exclusive
};

struct PackedChunk {
  std::vector<int> tokens;  // context_length ids, padded at the end of the stream
  // The stream token that follows this chunk (pad at the end of the stream);
  // it is the prediction target of the last position.
  int next_token = 0;
  // loss_mask[i] == 1 iff the target of position i is a response token or a
  // response terminator.
  std::vector<std::uint8_t> loss_mask;
  std::vector<SampleSpan> boundaries;
  // In-memory only. When non-empty it replaces the shifted targets, which
  // lets targets change without changing the inputs.
  std::vector<int> target_override;

  // Prediction target of every position: tokens shifted left by one, with
  // next_token last, unless target_override is set.
  std::vector<int> targets() const;
};

inline constexpr std::size_t kMaxSampleChunks = 4;

// Concatenates all encoded samples into one stream and cuts it every
// context_length tokens; samples may straddle chunk boundaries. Throws
// InputError for a sample longer than kMaxSampleChunks * context_length.
std::vector<PackedChunk> pack(const std::vector<InstructionSample>& samples, const Tokenizer& tokenizer,
                              std::size_t context_length);

struct PackedFile {
  std::size_t context_length = 0;
  TokenizerMode tokenizer_mode = TokenizerMode::byte_level;
  std::size_t vocab_size = 0;
  std::vector<PackedChunk> chunks;
};

// Little-endian: magic "MDTPACK1", u32 version, u64 chunk count, u32
// context_length, u32 tokenizer mode, u32 vocab size; then per chunk
// context_length i32 tokens, i32 next_token, context_length mask bytes, u32
// boundary count and (u32 sample_id, u32 start, u32 end) triples.
void write_packed(const std::filesystem::path& path, const PackedFile& file);
PackedFile read_packed(const std::filesystem::path& path);

}  // namespace medtune
