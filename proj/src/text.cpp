#include "minidrive/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "minidrive/serialize.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive {

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

namespace {
bool is_punct_token(const std::string& t) {
  return t.size() == 1 && !std::isalnum(static_cast<unsigned char>(t[0]));
}
}  // namespace

std::string detokenize_words(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty() && !is_punct_token(t)) out.push_back(' ');
    out += t;
  }
  return out;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.id_to_token = std::move(tokens);
  for (size_t i = 0; i < v.id_to_token.size(); ++i)
    v.token_to_id.emplace(v.id_to_token[i], static_cast<int>(i));
  if (v.size() < 4) throw ValidationError("vocabulary: missing reserved tokens");
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus) {
  std::map<std::string, int64_t> freq;
  for (const auto& text : corpus)
    for (const auto& tok : tokenize_words(text)) ++freq[tok];

  std::vector<std::pair<std::string, int64_t>> entries(freq.begin(), freq.end());
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& [tok, _] : entries) tokens.push_back(tok);
  return from_tokens(std::move(tokens));
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text, int max_len) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize_words(text)) {
    if (static_cast<int>(ids.size()) >= max_len) break;
    ids.push_back(id_of(tok));
  }
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  for (int id : ids) {
    if (id >= kPad && id <= kUnk) continue;
    if (id < 0 || id >= size())
      throw ValidationError("vocabulary: id " + std::to_string(id) + " out of range");
    tokens.push_back(id_to_token[static_cast<size_t>(id)]);
  }
  return detokenize_words(tokens);
}

void Vocabulary::save(const std::string& path) const {
  std::ostringstream os;
  for (const auto& tok : id_to_token) os << tok << '\n';
  atomic_write_file(path, os.str());
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open vocab file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) tokens.push_back(line);
  return from_tokens(std::move(tokens));
}

}  // namespace minidrive
