/*
 * Copyright 2026 The fsqa Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Word-level vocabulary with a character fallback.
//
// Layout of ids:
//   [0, 105)    special tokens: <pad> <s> </s> <mask> [S] <extra_id_0..99>
//   [105, 199)  word-initial characters, printable ASCII '!'..'~'
//   [199, 293)  continuation characters "##c", glued to the previous token
//   [293, ...)  whole words, most frequent first
//
// Encoding splits on whitespace. A whitespace chunk that is a known token
// encodes to that token. Otherwise the chunk is cut at special markers,
// runs of alphanumerics and single punctuation characters; the first piece
// may be a known word, everything after it is spelled with continuation
// characters. Decoding joins tokens with single spaces and glues
// continuation characters, so decode(encode(s)) reproduces s up to
// whitespace normalization.

#ifndef FSQA_VOCAB_HPP
#define FSQA_VOCAB_HPP

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fsqa/errors.hpp"

namespace fsqa {

inline constexpr int kNumSentinels = 100;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;
  static constexpr int kSep = 4;
  static constexpr int kFirstSentinel = 5;
  static constexpr int kNumSpecials = kFirstSentinel + kNumSentinels;
  static constexpr char kFirstChar = '!';
  static constexpr char kLastChar = '~';
  static constexpr int kNumChars = kLastChar - kFirstChar + 1;
  static constexpr int kFirstCharId = kNumSpecials;
  static constexpr int kFirstContinuationId = kFirstCharId + kNumChars;
  static constexpr int kFirstWordId = kFirstContinuationId + kNumChars;

  static constexpr std::string_view kMaskMarker = "<mask>";
  static constexpr std::string_view kSepMarker = "[S]";

  static std::string sentinel_marker(int k) {
    return "<extra_id_" + std::to_string(k) + ">";
  }
  static constexpr int sentinel(int k) { return kFirstSentinel + k; }

  Vocab() { reset_base(); }

  // Vocab holding only specials and characters.
  static Vocab base() { return Vocab(); }

  // Reads the line-per-token format written by save().
  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocab file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return from_tokens(tokens);
  }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    if (tokens.size() < static_cast<std::size_t>(kFirstWordId)) {
      throw FormatError("vocab has " + std::to_string(tokens.size()) +
                        " tokens, fewer than the fixed prefix");
    }
    for (int i = 0; i < kFirstWordId; ++i) {
      if (tokens[i] != v.id_to_token_[i]) {
        throw FormatError("vocab line " + std::to_string(i + 1) +
                          " should be '" + v.id_to_token_[i] + "', found '" +
                          tokens[i] + "'");
      }
    }
    for (std::size_t i = kFirstWordId; i < tokens.size(); ++i) {
      if (!v.add(tokens[i])) {
        throw FormatError("duplicate or invalid vocab token '" + tokens[i] +
                          "' on line " + std::to_string(i + 1));
      }
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocab file " + path);
    for (const auto& t : id_to_token_) out << t << '\n';
    if (!out) throw IoError("failed writing vocab file " + path);
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) {
      throw IndexError("token id " + std::to_string(id) + " outside [0, " +
                       std::to_string(size()) + ")");
    }
    return id_to_token_[id];
  }

  // -1 when absent.
  int find(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? -1 : it->second;
  }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }
  static bool is_sentinel(int id) {
    return id >= kFirstSentinel && id < kNumSpecials;
  }
  static bool is_continuation(int id) {
    return id >= kFirstContinuationId && id < kFirstWordId;
  }

  static int char_id(char c, bool continuation) {
    return (continuation ? kFirstContinuationId : kFirstCharId) +
           (c - kFirstChar);
  }

  static bool in_alphabet(char c) { return c >= kFirstChar && c <= kLastChar; }

  // Appends a word token. Returns false if it is a duplicate or not a
  // valid word (empty, contains whitespace or non-alphabet characters).
  bool add(const std::string& word) {
    if (word.empty() || token_to_id_.count(word)) return false;
    for (char c : word)
      if (!in_alphabet(c)) return false;
    token_to_id_.emplace(word, size());
    id_to_token_.push_back(word);
    return true;
  }

 private:
  void reset_base() {
    id_to_token_.clear();
    token_to_id_.clear();
    auto push = [this](std::string t) {
      token_to_id_.emplace(t, size());
      id_to_token_.push_back(std::move(t));
    };
    push("<pad>");
    push("<s>");
    push("</s>");
    push(std::string(kMaskMarker));
    push(std::string(kSepMarker));
    for (int k = 0; k < kNumSentinels; ++k) push(sentinel_marker(k));
    for (char c = kFirstChar; c <= kLastChar; ++c) push(std::string(1, c));
    for (char c = kFirstChar; c <= kLastChar; ++c) push("##" + std::string(1, c));
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

namespace detail {

inline std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
      ++i;
    std::size_t j = i;
    while (j < text.size() &&
           !std::isspace(static_cast<unsigned char>(text[j])))
      ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

// Special id whose literal marker starts at text[pos], with its length.
inline std::pair<int, std::size_t> match_marker(std::string_view text,
                                                std::size_t pos) {
  static const Vocab kBase = Vocab::base();
  if (text[pos] != '<' && text[pos] != '[') return {-1, 0};
  for (int id = 0; id < Vocab::kNumSpecials; ++id) {
    const std::string& m = kBase.token(id);
    if (text.substr(pos, m.size()) == m) return {id, m.size()};
  }
  return {-1, 0};
}

inline bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

}  // namespace detail

// Builds a vocabulary from the leading alphanumeric run of every
// whitespace-separated chunk of `corpus`; punctuation is always spelled
// with character tokens. Frequency ties go to the lexicographically smaller
// word.
inline Vocab build_vocab(std::span<const std::string> corpus, int max_size) {
  if (corpus.empty()) throw ConfigError("build_vocab: corpus is empty");
  if (max_size <= Vocab::kNumSpecials + 256) {
    throw ConfigError("build_vocab: max_size " + std::to_string(max_size) +
                      " must exceed " + std::to_string(Vocab::kNumSpecials + 256));
  }
  Vocab vocab;
  std::map<std::string, long> counts;
  for (const auto& text : corpus) {
    for (auto chunk : detail::split_whitespace(text)) {
      std::size_t n = 0;
      while (n < chunk.size() && detail::is_word_char(chunk[n])) ++n;
      if (n > 1) ++counts[std::string(chunk.substr(0, n))];
    }
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  for (const auto& [word, count] : ranked) {
    if (vocab.size() >= max_size) break;
    vocab.add(word);
  }
  return vocab;
}

inline std::vector<int> encode(const Vocab& vocab, std::string_view text) {
  std::vector<int> ids;
  for (auto chunk : detail::split_whitespace(text)) {
    for (char c : chunk) {
      if (!Vocab::in_alphabet(c)) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "0x%02X", static_cast<unsigned char>(c));
        throw EncodingError("character " + std::string(buf) +
                            " is outside the fallback alphabet in '" +
                            std::string(chunk) + "'");
      }
    }
    const bool continuation_literal =
        chunk.size() >= 2 && chunk[0] == '#' && chunk[1] == '#';
    if (!continuation_literal) {
      const int whole = vocab.find(chunk);
      if (whole >= 0) {
        ids.push_back(whole);
        continue;
      }
    }
    // A piece starts a new spelled word when it is the first in the chunk
    // or follows a special marker.
    bool at_start = true;
    std::size_t i = 0;
    while (i < chunk.size()) {
      auto [special, len] = detail::match_marker(chunk, i);
      if (special >= 0) {
        ids.push_back(special);
        i += len;
        at_start = true;
        continue;
      }
      std::size_t j = i + 1;
      if (detail::is_word_char(chunk[i])) {
        while (j < chunk.size() && detail::is_word_char(chunk[j])) ++j;
      }
      const std::string_view piece = chunk.substr(i, j - i);
      const int word = at_start && piece.size() > 1 ? vocab.find(piece) : -1;
      if (word >= 0) {
        ids.push_back(word);
      } else {
        for (std::size_t k = 0; k < piece.size(); ++k)
          ids.push_back(Vocab::char_id(piece[k], !(at_start && k == 0)));
      }
      at_start = false;
      i = j;
    }
  }
  return ids;
}

inline std::string decode(const Vocab& vocab, std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    const std::string& token = vocab.token(id);
    if (id == Vocab::kEos) break;
    if (id == Vocab::kPad || id == Vocab::kBos) continue;
    if (Vocab::is_continuation(id)) {
      out.push_back(token[2]);
      continue;
    }
    if (!out.empty()) out.push_back(' ');
    out += token;
  }
  return out;
}

}  // namespace fsqa

#endif  // FSQA_VOCAB_HPP
