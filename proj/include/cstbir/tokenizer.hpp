#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cstbir {

// Byte-level BPE over lowercased, whitespace-split words. Each word's final
// symbol carries an end-of-word marker so word boundaries survive decoding.
//
// Id layout: 0 = PAD, 1 = CLS, 2..257 = bytes, 258..513 = bytes + end-of-word,
// then one id per learned merge in rank order.
class Tokenizer {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kCls = 1;
  static constexpr std::int64_t kBaseVocab = 2 + 256 * 2;

  Tokenizer();

  // Learns merges until the vocabulary reaches `vocab_size` or no pair occurs
  // at least twice. Deterministic: ties broken by lexicographic pair order.
  static Tokenizer train(const std::vector<std::string>& corpus, std::size_t vocab_size);

  std::size_t vocab_size() const { return symbols_.size(); }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  // Subword ids without CLS or padding.
  std::vector<std::int64_t> encode_words(const std::string& text) const;
  // CLS + ids, truncated at a word boundary and padded with PAD to `max_len`.
  std::vector<std::int64_t> tokenize(const std::string& text, std::size_t max_len) const;
  // Ignores PAD/CLS; words joined with single spaces.
  std::string detokenize(const std::vector<std::int64_t>& ids) const;

  static std::string normalize(const std::string& text);

  // Text format: "#cstbir-bpe 1", then "merge <left> <right>" per line in
  // rank order. Symbols are hex-escaped so arbitrary bytes survive.
  std::string serialize() const;
  static Tokenizer parse(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

  bool operator==(const Tokenizer& other) const { return merges_ == other.merges_; }

 private:
  void add_merge(const std::string& left, const std::string& right);
  std::vector<std::int64_t> encode_word(const std::string& word) const;

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, std::int64_t> symbol_ids_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<std::string, std::string>, std::size_t> merge_rank_;
};

}  // namespace cstbir
