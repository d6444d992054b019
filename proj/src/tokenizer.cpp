// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "medtune/tokenizer.hpp"

#include <array>
#include <fstream>

#include <nlohmann/json.hpp>

#include "medtune/errors.hpp"

namespace medtune {

std::string_view to_string(TokenizerMode mode) {
  return mode == TokenizerMode::byte_level ? "byte_level" : "external_vocab";
}

Tokenizer Tokenizer::byte_level() { return Tokenizer(); }

Tokenizer Tokenizer::from_pieces(std::vector<std::string> pieces) {
  Tokenizer t;
  t.mode_ = TokenizerMode::external_vocab;
  for (auto& p : pieces) {
    if (p.size() < 2 || t.piece_ids_.contains(p)) continue;
    t.piece_ids_.emplace(p, static_cast<int>(256 + t.pieces_.size()));
    t.max_piece_ = std::max(t.max_piece_, p.size());
    t.pieces_.push_back(std::move(p));
  }
  return t;
}

Tokenizer Tokenizer::from_vocab_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open vocabulary file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": malformed vocabulary: " + e.what());
  }
  if (!j.is_array()) throw InputError(path + ": vocabulary must be a JSON array of strings");
  return from_pieces(j.get<std::vector<std::string>>());
}

std::vector<int> Tokenizer::encode_content(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    int id = static_cast<unsigned char>(text[pos]);
    std::size_t len = 1;
    for (std::size_t n = std::min(max_piece_, text.size() - pos); n >= 2; --n) {
      auto it = piece_ids_.find(std::string(text.substr(pos, n)));
      if (it != piece_ids_.end()) {
        id = it->second;
        len = n;
        break;
      }
    }
    ids.push_back(id);
    pos += len;
  }
  return ids;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  const std::array<std::pair<std::string_view, int>, 4> keywords = {{
      {kSystemKeyword, system_id()},
      {kPrompterKeyword, prompter_id()},
      {kAssistantKeyword, assistant_id()},
      {kEndKeyword, end_id()},
  }};
  std::vector<int> ids;
  std::size_t start = 0, pos = 0;
  while (pos < text.size()) {
    bool matched = false;
    if (text[pos] == '<') {
      for (const auto& [kw, id] : keywords) {
        if (text.substr(pos, kw.size()) == kw) {
          auto chunk = encode_content(text.substr(start, pos - start));
          ids.insert(ids.end(), chunk.begin(), chunk.end());
          ids.push_back(id);
          pos += kw.size();
          start = pos;
          matched = true;
          break;
        }
      }
    }
    if (!matched) ++pos;
  }
  auto tail = encode_content(text.substr(start));
  ids.insert(ids.end(), tail.begin(), tail.end());
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
      throw InputError("decode: token id " + std::to_string(id) + " out of range");
    }
    if (id < 256) {
      out.push_back(static_cast<char>(id));
    } else if (static_cast<std::size_t>(id) < content_size()) {
      out += pieces_[static_cast<std::size_t>(id) - 256];
    } else if (id == system_id()) {
      out += kSystemKeyword;
    } else if (id == prompter_id()) {
      out += kPrompterKeyword;
    } else if (id == assistant_id()) {
      out += kAssistantKeyword;
    } else if (id == end_id()) {
      out += kEndKeyword;
    }
  }
  return out;
}

}  // namespace medtune
