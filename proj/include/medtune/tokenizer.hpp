// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace medtune {

inline constexpr std::string_view kSystemKeyword = "<|system|>";
inline constexpr std::string_view kPrompterKeyword = "<|prompter|>";
inline constexpr std::string_view kAssistantKeyword = "<|assistant|>";
inline constexpr std::string_view kEndKeyword = "<|end|>";

enum class TokenizerMode { byte_level, external_vocab };

std::string_view to_string(TokenizerMode mode);

// Content ids come first: the 256 byte values, then (external_vocab mode)
// the multi-byte pieces of the vocabulary file in file order. The four
// keyword tokens and the pad token follow, so special ids never collide
// with content ids. Byte fallback keeps encode/decode lossless in both modes.
class Tokenizer {
 public:
  static Tokenizer byte_level();
  // JSON array of piece strings. Pieces of length < 2 are ignored since
  // single bytes are always present.
  static Tokenizer from_vocab_file(const std::string& path);
  static Tokenizer from_pieces(std::vector<std::string> pieces);

  TokenizerMode mode() const { return mode_; }
  std::size_t content_size() const { return 256 + pieces_.size(); }
  std::size_t vocab_size() const { return content_size() + 5; }

  int system_id() const { return static_cast<int>(content_size()); }
  int prompter_id() const { return system_id() + 1; }
  int assistant_id() const { return system_id() + 2; }
  int end_id() const { return system_id() + 3; }
  int pad_id() const { return system_id() + 4; }
  bool is_special(int id) const { return id >= system_id(); }

  // Plain text; keyword strings inside it are encoded as ordinary bytes.
  std::vector<int> encode_content(std::string_view text) const;
  // Recognizes the four keyword strings and emits their dedicated ids.
  std::vector<int> encode(std::string_view text) const;
  // The pad token decodes to nothing.
  std::string decode(std::span<const int> ids) const;

  const std::vector<std::string>& pieces() const { return pieces_; }

 private:
  Tokenizer() = default;

  TokenizerMode mode_ = TokenizerMode::byte_level;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> piece_ids_;
  std::size_t max_piece_ = 1;
};

}  // namespace medtune
