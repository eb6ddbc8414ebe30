#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "promptrisk/common.hpp"
#include "promptrisk/corpus.hpp"

namespace promptrisk::text {

using TokenId = std::int32_t;

// Lowercased word tokens. ASCII whitespace and punctuation separate tokens
// and are dropped; non-ASCII bytes are kept as word characters.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    const bool sep = c < 0x80 && !(std::isalnum(c));
    if (sep) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kMask = 2;
  static constexpr TokenId kCls = 3;
  static constexpr std::size_t kNumSpecials = 4;

  Vocabulary() : tokens_{"<pad>", "<unk>", "<mask>", "<cls>"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view tok) const { return index_.count(std::string(tok)) != 0; }

  void add(const std::string& tok) {
    if (index_.count(tok)) throw ConfigError("duplicate vocabulary token '" + tok + "'");
    index_.emplace(tok, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(tok);
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Most frequent tokens first; equal counts ordered lexicographically.
inline Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t max_size) {
  if (max_size < Vocabulary::kNumSpecials)
    throw ConfigError("vocabulary max_size " + std::to_string(max_size) + " is smaller than the " +
                      std::to_string(Vocabulary::kNumSpecials) + " special tokens");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& tok : tokenize(t)) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, n] : ranked) {
    if (v.size() == max_size) break;
    if (!v.contains(tok)) v.add(tok);
  }
  return v;
}

inline Vocabulary build_vocab(const Corpus& corpus, std::size_t max_size) {
  if (corpus.empty()) throw ConfigError("cannot build a vocabulary from an empty corpus");
  std::vector<std::string> texts;
  for (const auto& p : corpus)
    for (const auto& n : p.notes) texts.push_back(n.text);
  return build_vocab(texts, max_size);
}

inline void save_vocab(const Vocabulary& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write vocabulary " + path);
  for (std::size_t i = 0; i < v.size(); ++i) os << v.token(static_cast<TokenId>(i)) << '\t' << i << '\n';
}

inline Vocabulary load_vocab(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read vocabulary " + path);
  Vocabulary v;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected token<TAB>id", line_no);
    const std::string tok = line.substr(0, tab);
    std::size_t id = 0;
    try {
      id = std::stoul(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError("malformed id", line_no);
    }
    if (line_no <= Vocabulary::kNumSpecials) {
      if (id != line_no - 1 || v.token(static_cast<TokenId>(id)) != tok)
        throw ParseError("special token mismatch", line_no);
      continue;
    }
    if (id != v.size()) throw ParseError("ids must be dense and ascending", line_no);
    v.add(tok);
  }
  return v;
}

struct TokenizedNote {
  std::vector<TokenId> ids;  // exactly max_len entries, PAD-filled
  std::size_t length = 0;    // non-PAD prefix, including CLS

  std::span<const TokenId> active() const { return {ids.data(), length}; }
};

inline constexpr std::size_t kDefaultMaxLen = 512;

inline TokenizedNote encode(std::string_view note, const Vocabulary& vocab, std::size_t max_len = kDefaultMaxLen) {
  TokenizedNote out;
  out.ids.assign(max_len, Vocabulary::kPad);
  if (max_len == 0) return out;
  out.ids[0] = Vocabulary::kCls;
  out.length = 1;
  for (const auto& tok : tokenize(note)) {
    if (out.length == max_len) break;
    out.ids[out.length++] = vocab.id(tok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Character n-grams with the hashing trick.

struct NgramConfig {
  std::size_t n_min = 3;
  std::size_t n_max = 6;
  std::uint64_t n_buckets = 1ULL << 20;
};

// UTF-8 aware: n counts code points of "<" + token + ">". The first entry is
// the whole wrapped token; an n-gram spanning the whole wrapped token is not
// repeated.
inline std::vector<std::uint64_t> char_ngrams(std::string_view token, std::size_t n_min, std::size_t n_max,
                                              std::uint64_t n_buckets) {
  const std::string wrapped = "<" + std::string(token) + ">";
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < wrapped.size(); ++i)
    if ((static_cast<unsigned char>(wrapped[i]) & 0xC0) != 0x80) starts.push_back(i);
  starts.push_back(wrapped.size());
  const std::size_t n_chars = starts.size() - 1;

  std::vector<std::uint64_t> out;
  out.push_back(fnv1a(wrapped) % n_buckets);
  for (std::size_t n = n_min; n <= n_max; ++n) {
    if (n >= n_chars) break;  // n == n_chars is the whole token, already emitted
    for (std::size_t c = 0; c + n <= n_chars; ++c) {
      const std::string_view gram(wrapped.data() + starts[c], starts[c + n] - starts[c]);
      out.push_back(fnv1a(gram) % n_buckets);
    }
  }
  return out;
}

inline std::vector<std::uint64_t> char_ngrams(std::string_view token, const NgramConfig& cfg = {}) {
  return char_ngrams(token, cfg.n_min, cfg.n_max, cfg.n_buckets);
}

}  // namespace promptrisk::text
