#include "cstbir/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "cstbir/error.hpp"

namespace cstbir {
namespace {

constexpr char kEndOfWord = '\0';
constexpr std::string_view kHeader = "#cstbir-bpe 1";

std::vector<std::string> split_words(const std::string& normalized) {
  std::vector<std::string> words;
  std::istringstream in(normalized);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> symbols;
  symbols.reserve(word.size());
  for (char c : word) symbols.emplace_back(1, c);
  symbols.back().push_back(kEndOfWord);
  return symbols;
}

// Replaces every left-to-right occurrence of (left, right) by its concatenation.
void apply_merge(std::vector<std::string>& symbols, const std::string& left,
                 const std::string& right) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

std::string hex(const std::string& s) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out += digits[c >> 4];
    out += digits[c & 15];
  }
  return out;
}

std::string unhex(const std::string& s) {
  require(s.size() % 2 == 0, ErrorCode::corrupt, "bpe: malformed hex symbol");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    fail(ErrorCode::corrupt, "bpe: malformed hex symbol");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); i += 2) {
    out += static_cast<char>(nibble(s[i]) * 16 + nibble(s[i + 1]));
  }
  return out;
}

}  // namespace

Tokenizer::Tokenizer() {
  symbols_ = {"<pad>", "<cls>"};
  for (int pass = 0; pass < 2; ++pass) {
    for (int b = 0; b < 256; ++b) {
      std::string s(1, static_cast<char>(b));
      if (pass == 1) s.push_back(kEndOfWord);
      symbols_.push_back(s);
    }
  }
  for (std::size_t i = 2; i < symbols_.size(); ++i) {
    symbol_ids_.emplace(symbols_[i], static_cast<std::int64_t>(i));
  }
}

std::string Tokenizer::normalize(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (c < 0x20 || c == 0x7f) continue;
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += (c < 0x80) ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
  }
  return out;
}

void Tokenizer::add_merge(const std::string& left, const std::string& right) {
  merge_rank_.emplace(std::make_pair(left, right), merges_.size());
  merges_.emplace_back(left, right);
  std::string joined = left + right;
  if (!symbol_ids_.contains(joined)) {
    symbol_ids_.emplace(joined, static_cast<std::int64_t>(symbols_.size()));
    symbols_.push_back(std::move(joined));
  }
}

Tokenizer Tokenizer::train(const std::vector<std::string>& corpus, std::size_t vocab_size) {
  Tokenizer tok;
  std::map<std::string, std::size_t> word_counts;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize(line))) ++word_counts[w];
  }
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  words.reserve(word_counts.size());
  for (const auto& [w, n] : word_counts) words.emplace_back(word_symbols(w), n);

  while (tok.vocab_size() < vocab_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (const auto& [symbols, n] : words) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        pair_counts[{symbols[i], symbols[i + 1]}] += n;
      }
    }
    // std::map iteration order makes the lexicographically smallest pair win ties.
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 1;
    for (const auto& [pair, n] : pair_counts) {
      if (n > best_count) {
        best = &pair;
        best_count = n;
      }
    }
    if (best == nullptr) break;
    const auto merge = *best;
    tok.add_merge(merge.first, merge.second);
    for (auto& [symbols, n] : words) apply_merge(symbols, merge.first, merge.second);
  }
  return tok;
}

std::vector<std::int64_t> Tokenizer::encode_word(const std::string& word) const {
  auto symbols = word_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = merges_.size();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
      if (it != merge_rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == merges_.size()) break;
    apply_merge(symbols, merges_[best_rank].first, merges_[best_rank].second);
  }
  std::vector<std::int64_t> ids;
  ids.reserve(symbols.size());
  for (const auto& s : symbols) ids.push_back(symbol_ids_.at(s));
  return ids;
}

std::vector<std::int64_t> Tokenizer::encode_words(const std::string& text) const {
  std::vector<std::int64_t> ids;
  for (const auto& w : split_words(normalize(text))) {
    auto word_ids = encode_word(w);
    ids.insert(ids.end(), word_ids.begin(), word_ids.end());
  }
  return ids;
}

std::vector<std::int64_t> Tokenizer::tokenize(const std::string& text, std::size_t max_len) const {
  require(max_len >= 1, ErrorCode::invalid_argument, "tokenize: max_len must be >= 1");
  std::vector<std::int64_t> ids{kCls};
  for (const auto& w : split_words(normalize(text))) {
    auto word_ids = encode_word(w);
    if (ids.size() + word_ids.size() > max_len) {
      // A first word longer than the budget is hard-truncated.
      if (ids.size() == 1) ids.insert(ids.end(), word_ids.begin(), word_ids.begin() + (max_len - 1));
      break;
    }
    ids.insert(ids.end(), word_ids.begin(), word_ids.end());
  }
  ids.resize(max_len, kPad);
  return ids;
}

std::string Tokenizer::detokenize(const std::vector<std::int64_t>& ids) const {
  std::string out;
  for (auto id : ids) {
    if (id == kPad || id == kCls) continue;
    require(id >= 0 && static_cast<std::size_t>(id) < symbols_.size(), ErrorCode::out_of_range,
            "detokenize: id out of vocabulary");
    for (char c : symbols_[static_cast<std::size_t>(id)]) {
      out += (c == kEndOfWord) ? ' ' : c;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::string Tokenizer::serialize() const {
  std::ostringstream out;
  out << kHeader << '\n';
  for (const auto& [l, r] : merges_) {
    out << "merge " << hex(l) << ' ' << hex(r) << ' ' << symbol_ids_.at(l + r) << '\n';
  }
  return out.str();
}

Tokenizer Tokenizer::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(std::getline(in, line) && line == kHeader, ErrorCode::corrupt,
          "bpe: missing vocabulary header");
  Tokenizer tok;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string tag, l, r;
    std::int64_t id = -1;
    require(static_cast<bool>(fields >> tag >> l >> r >> id) && tag == "merge", ErrorCode::corrupt,
            "bpe: malformed line: " + line);
    tok.add_merge(unhex(l), unhex(r));
    require(tok.symbol_ids_.at(unhex(l) + unhex(r)) == id, ErrorCode::corrupt,
            "bpe: id mismatch on line: " + line);
  }
  return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
  out << serialize();
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace cstbir
