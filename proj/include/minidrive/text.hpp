#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace minidrive {

/// Lowercases, splits on whitespace, and keeps punctuation characters as
/// single-character tokens.
std::vector<std::string> tokenize_words(const std::string& text);

/// Joins tokens with spaces; punctuation tokens attach to the previous
/// word, so detokenize(tokenize(s)) == s for canonically spaced text.
std::string detokenize_words(const std::vector<std::string>& tokens);

/// Corpus-derived token table. Ids 0..3 are reserved (<pad>, <bos>,
/// <eos>, <unk>); the rest are assigned by descending frequency with
/// lexicographic tie-break, so the table is deterministic for a corpus.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  static Vocabulary build(const std::vector<std::string>& corpus);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_of(const std::string& token) const;

  /// tokenize + map to ids (OOV -> unk), truncated to max_len tokens.
  std::vector<int> encode(const std::string& text, int max_len) const;
  /// ids -> text, skipping reserved ids.
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;  // one token per line, line index = id
  static Vocabulary load(const std::string& path);

  bool operator==(const Vocabulary& other) const { return id_to_token == other.id_to_token; }
};

}  // namespace minidrive
