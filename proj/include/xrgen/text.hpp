#pragma once

// Report cleaning, vocabulary construction, and fixed-length sequence coding.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xrgen/error.hpp"
#include "xrgen/rng.hpp"

namespace xrgen {

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// Cleaning rules
// ---------------------------------------------------------------------------

/// Line-oriented rule set with `[remove]`, `[stopwords]` and `[punct]`
/// sections. Removal lines are ECMAScript regexes matched case-insensitively
/// against the lowercased report. Stopword lines hold whitespace-separated
/// words. Punct lines map one character to `,`, `.` or `drop`.
struct CleaningRules {
  struct Pattern {
    std::string source;
    std::regex re;
  };
  std::vector<Pattern> remove;
  std::set<std::string> stopwords;
  std::map<char, std::string> punct;  // value is "," or "." or "" (drop)
  std::string version;                // FNV-1a of the rule text

  static CleaningRules parse(std::string_view text) {
    CleaningRules r;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) h = (h ^ c) * 0x100000001b3ULL;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    r.version = buf;

    enum class Section { none, remove, stopwords, punct } sec = Section::none;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      if (line == "[remove]") { sec = Section::remove; continue; }
      if (line == "[stopwords]") { sec = Section::stopwords; continue; }
      if (line == "[punct]") { sec = Section::punct; continue; }
      auto where = [&] { return "cleaning rules line " + std::to_string(lineno); };
      switch (sec) {
        case Section::none:
          throw FormatError(where() + ": entry outside of a section");
        case Section::remove:
          try {
            r.remove.push_back({line, std::regex(line, std::regex::ECMAScript | std::regex::icase)});
          } catch (const std::regex_error& e) {
            throw FormatError(where() + ": bad pattern: " + e.what());
          }
          break;
        case Section::stopwords: {
          std::istringstream ws(line);
          std::string w;
          while (ws >> w) r.stopwords.insert(lowercase(w));
          break;
        }
        case Section::punct: {
          std::istringstream ps(line);
          std::string from, to;
          if (!(ps >> from >> to) || from.size() != 1 ||
              (to != "," && to != "." && to != "drop")) {
            throw FormatError(where() + ": expected '<char> ,|.|drop'");
          }
          r.punct[from[0]] = to == "drop" ? "" : to;
          break;
        }
      }
    }
    return r;
  }

  static CleaningRules load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open cleaning rules file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  static std::string lowercase(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  }
};

// ---------------------------------------------------------------------------
// Cleaned reports
// ---------------------------------------------------------------------------

inline bool is_punct_token(std::string_view t) { return t == "," || t == "."; }

struct CleanedReport {
  std::vector<std::string> tokens;  // words plus "," and "."
  std::string original;

  bool empty() const { return tokens.empty(); }

  std::size_t word_count() const {
    return static_cast<std::size_t>(
        std::count_if(tokens.begin(), tokens.end(), [](const auto& t) { return !is_punct_token(t); }));
  }

  /// Sentences split after each "." token; the "." stays with its sentence.
  std::vector<std::vector<std::string>> sentences() const {
    std::vector<std::vector<std::string>> out;
    std::vector<std::string> cur;
    for (const auto& t : tokens) {
      cur.push_back(t);
      if (t == ".") {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  /// Tokens joined with spaces, punctuation attached to the previous word.
  std::string text() const { return join_tokens(tokens); }

  static std::string join_tokens(const std::vector<std::string>& toks) {
    std::string s;
    for (const auto& t : toks) {
      if (!s.empty() && !is_punct_token(t)) s += ' ';
      s += t;
    }
    return s;
  }
};

/// Applies removal patterns, drops stopwords, then normalizes punctuation to
/// "," and ".". Leading punctuation is dropped, runs collapse to a single mark
/// ("." wins), and a non-empty report always ends with ".".
inline CleanedReport clean_report(std::string_view raw, const CleaningRules& rules) {
  CleanedReport out;
  out.original = std::string(raw);
  std::string text = CleaningRules::lowercase(std::string(raw));
  for (const auto& p : rules.remove) text = std::regex_replace(text, p.re, " ");

  // Split into word tokens and single-character punctuation tokens.
  std::vector<std::string> raw_tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) raw_tokens.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c) || c >= 0x80) {
      word += static_cast<char>(c);
    } else if (c == '.' && !word.empty() && std::isdigit(static_cast<unsigned char>(word.back())) &&
               i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1]))) {
      word += '.';  // decimal number
    } else if (std::isspace(c)) {
      flush();
    } else {
      flush();
      raw_tokens.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();

  std::vector<std::string> kept;
  for (auto& t : raw_tokens) {
    const bool is_word = std::isalnum(static_cast<unsigned char>(t[0])) || static_cast<unsigned char>(t[0]) >= 0x80;
    if (is_word) {
      if (!rules.stopwords.count(t)) kept.push_back(std::move(t));
      continue;
    }
    std::string mapped;
    if (t == "," || t == ".") {
      mapped = t;
    } else if (auto it = rules.punct.find(t[0]); it != rules.punct.end()) {
      mapped = it->second;
    }
    if (!mapped.empty()) kept.push_back(std::move(mapped));
  }

  for (auto& t : kept) {
    if (is_punct_token(t)) {
      if (out.tokens.empty()) continue;
      if (is_punct_token(out.tokens.back())) {
        if (t == ".") out.tokens.back() = ".";
        continue;
      }
    }
    out.tokens.push_back(std::move(t));
  }
  if (!out.tokens.empty()) {
    if (out.tokens.back() == ",") {
      out.tokens.back() = ".";
    } else if (out.tokens.back() != ".") {
      out.tokens.emplace_back(".");
    }
  }
  return out;
}

/// Uniformly permutes the sentence order; token content is unchanged.
inline CleanedReport shuffle_sentences(const CleanedReport& report, Rng& rng) {
  auto sents = report.sentences();
  rng.shuffle(sents);
  CleanedReport out;
  out.original = report.original;
  for (auto& s : sents) out.tokens.insert(out.tokens.end(), s.begin(), s.end());
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocab {
 public:
  static constexpr TokenId PAD = 0;
  static constexpr TokenId START = 1;
  static constexpr TokenId END = 2;
  static constexpr TokenId UNK = 3;
  static constexpr TokenId kReserved = 4;

  Vocab() {
    for (const char* t : {"<pad>", "<start>", "<end>", "<unk>"}) {
      index_.emplace(t, static_cast<TokenId>(tokens_.size()));
      tokens_.emplace_back(t);
      freqs_.push_back(0);
    }
  }

  /// Tokens with corpus frequency >= min_freq, ordered by descending
  /// frequency with ties broken lexicographically.
  static Vocab build(const std::vector<CleanedReport>& corpus, std::size_t min_freq = 5) {
    if (corpus.empty()) throw DataError("build_vocab: empty training corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& r : corpus)
      for (const auto& t : r.tokens) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, n] : counts) {
      if (n >= min_freq) kept.emplace_back(tok, n);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (auto& [tok, n] : kept) v.append(tok, n);
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? UNK : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) {
      throw UsageError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  std::size_t freq(TokenId id) const { return freqs_.at(id); }

  /// `token<TAB>id<TAB>freq` per line, reserved ids first.
  std::string serialize() const {
    std::string s;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      s += tokens_[i] + '\t' + std::to_string(i) + '\t' + std::to_string(freqs_[i]) + '\n';
    }
    return s;
  }

  static Vocab parse(std::string_view text) {
    Vocab v;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t expect = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string tok, id_s, f_s;
      if (!std::getline(ls, tok, '\t') || !std::getline(ls, id_s, '\t') || !std::getline(ls, f_s)) {
        throw FormatError("vocab line " + std::to_string(expect + 1) + ": expected token<TAB>id<TAB>freq");
      }
      std::size_t id = 0, f = 0;
      try {
        id = std::stoul(id_s);
        f = std::stoul(f_s);
      } catch (const std::exception&) {
        throw FormatError("vocab line " + std::to_string(expect + 1) + ": bad number");
      }
      if (id != expect) throw FormatError("vocab ids must be dense and ordered, got " + id_s);
      if (id < kReserved) {
        if (tok != v.tokens_[id]) throw FormatError("vocab reserved id " + id_s + " must be " + v.tokens_[id]);
      } else {
        if (v.index_.count(tok)) throw FormatError("vocab token '" + tok + "' listed twice");
        v.append(tok, f);
      }
      ++expect;
    }
    if (expect < kReserved) throw FormatError("vocab missing reserved entries");
    return v;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_ && freqs_ == o.freqs_; }

 private:
  void append(const std::string& tok, std::size_t n) {
    index_.emplace(tok, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(tok);
    freqs_.push_back(n);
  }

  std::vector<std::string> tokens_;
  std::vector<std::size_t> freqs_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Fixed-length sequences
// ---------------------------------------------------------------------------

/// Layout [IMG, START, w1..wk, END, PAD...]. Position 0 is the image slot; it
/// holds PAD as a placeholder and is masked out.
struct EncodedSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;

  std::size_t length() const { return ids.size(); }
  bool operator==(const EncodedSequence&) const = default;
};

inline constexpr std::size_t kDefaultUnroll = 33;

inline EncodedSequence encode_sequence(const CleanedReport& report, const Vocab& vocab,
                                       std::size_t L = kDefaultUnroll) {
  if (L < 4) throw UsageError("encode_sequence: length must be >= 4, got " + std::to_string(L));
  const std::size_t k = std::min(report.tokens.size(), L - 3);
  EncodedSequence s;
  s.ids.assign(L, Vocab::PAD);
  s.mask.assign(L, 0);
  s.ids[1] = Vocab::START;
  s.mask[1] = 1;
  for (std::size_t i = 0; i < k; ++i) {
    s.ids[2 + i] = vocab.id(report.tokens[i]);
    s.mask[2 + i] = 1;
  }
  s.ids[2 + k] = Vocab::END;
  s.mask[2 + k] = 1;
  return s;
}

/// Tokens up to the first END, skipping PAD and START.
inline std::vector<std::string> decode_tokens(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    const std::string& t = vocab.token(id);
    if (id == Vocab::END) break;
    if (id == Vocab::PAD || id == Vocab::START) continue;
    out.push_back(t);
  }
  return out;
}

inline std::string decode_sequence(const std::vector<TokenId>& ids, const Vocab& vocab) {
  return CleanedReport::join_tokens(decode_tokens(ids, vocab));
}

}  // namespace xrgen
