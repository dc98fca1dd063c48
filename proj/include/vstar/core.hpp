#pragma once

// Vocabulary, semantic-ID / prefix value types and the sparse prefix trie
// shared by every other module.

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vstar/error.hpp"

namespace vstar {

using Token = std::uint16_t;
using ContextId = std::uint32_t;
using QueryId = std::uint32_t;

inline constexpr int kMaxDepth = 8;
inline constexpr std::uint64_t kMaxEnumeration = 10'000'000;

class Vocab {
 public:
  explicit Vocab(int size);
  int size() const { return size_; }
  bool operator==(const Vocab&) const = default;

 private:
  int size_;
};

// A token sequence of length 0..kMaxDepth. Unused slots stay zero so the
// defaulted ordering is lexicographic with shorter prefixes first on ties.
class Prefix {
 public:
  Prefix() = default;
  Prefix(std::initializer_list<int> tokens);
  explicit Prefix(std::span<const Token> tokens);

  int size() const { return size_; }
  bool empty() const { return size_ == 0; }
  Token operator[](int i) const { return tokens_[static_cast<std::size_t>(i)]; }
  std::span<const Token> tokens() const { return {tokens_.data(), size_}; }

  Prefix child(Token v) const;
  Prefix parent() const;
  Prefix head(int n) const;
  bool starts_with(const Prefix& p) const;

  auto operator<=>(const Prefix&) const = default;
  bool operator==(const Prefix&) const = default;

 private:
  std::array<Token, kMaxDepth> tokens_{};
  std::uint8_t size_ = 0;
};

// The complete V-ary depth-L trie. Every prefix has a dense integer key:
// keys of depth d occupy [offset(d), offset(d) + V^d).
class SidSpace {
 public:
  SidSpace(Vocab vocab, int length);

  int vocab_size() const { return vocab_.size(); }
  const Vocab& vocab() const { return vocab_; }
  int length() const { return length_; }

  std::uint64_t num_leaves() const { return pow_[static_cast<std::size_t>(length_)]; }
  std::uint64_t num_nodes() const { return offset_[static_cast<std::size_t>(length_) + 1]; }

  // Throws InvalidArgument when the prefix is too long or has a token >= V.
  void validate(const Prefix& p) const;

  std::uint64_t key(const Prefix& p) const;
  Prefix prefix_of_key(std::uint64_t key) const;
  std::uint64_t leaf_index(const Prefix& full) const;
  Prefix leaf_at(std::uint64_t index) const;
  std::uint64_t nodes_at_depth(int depth) const { return pow_[static_cast<std::size_t>(depth)]; }

  bool operator==(const SidSpace& o) const { return vocab_ == o.vocab_ && length_ == o.length_; }

 private:
  Vocab vocab_;
  int length_;
  std::vector<std::uint64_t> pow_;
  std::vector<std::uint64_t> offset_;
};

// A complete semantic ID: a prefix of exactly L tokens, all < V.
class Sid {
 public:
  Sid(const SidSpace& space, Prefix tokens);
  Sid(const SidSpace& space, std::initializer_list<int> tokens);

  int length() const { return tokens_.size(); }
  Token operator[](int i) const { return tokens_[i]; }
  const Prefix& prefix() const { return tokens_; }
  Prefix head(int n) const { return tokens_.head(n); }
  bool starts_with(const Prefix& p) const { return tokens_.starts_with(p); }

  auto operator<=>(const Sid&) const = default;
  bool operator==(const Sid&) const = default;

 private:
  Prefix tokens_;
};

struct SidHash {
  std::size_t operator()(const Sid& s) const noexcept;
};
struct PrefixHash {
  std::size_t operator()(const Prefix& p) const noexcept;
};

// Renders `<a_3><b_0><c_7>` style display strings.
std::string render(const Prefix& p);
inline std::string render(const Sid& s) { return render(s.prefix()); }

// Compact machine form "3.0.7" (empty prefix renders as "").
std::string to_dotted(const Prefix& p);
Prefix parse_dotted(const std::string& text);

int lcp_len(const Sid& a, const Sid& b);
int lcp_len(const Prefix& a, const Prefix& b);

// All V^L SIDs in lexicographic order. Throws BudgetExceeded past 10^7.
std::vector<Sid> enumerate_all_sids(int vocab_size, int length);
std::vector<Sid> enumerate_all_sids(const SidSpace& space);

// Sparse map from prefix to payload over a SidSpace.
template <class T>
class PrefixTrie {
 public:
  explicit PrefixTrie(SidSpace space) : space_(std::move(space)) {}

  const SidSpace& space() const { return space_; }

  const T* find(const Prefix& p) const {
    auto it = nodes_.find(space_.key(p));
    return it == nodes_.end() ? nullptr : &it->second;
  }
  T* find(const Prefix& p) {
    auto it = nodes_.find(space_.key(p));
    return it == nodes_.end() ? nullptr : &it->second;
  }
  bool contains(const Prefix& p) const { return nodes_.count(space_.key(p)) != 0; }

  T& operator[](const Prefix& p) { return nodes_[space_.key(p)]; }
  T& insert(const Prefix& p, T value) {
    auto [it, inserted] = nodes_.insert_or_assign(space_.key(p), std::move(value));
    return it->second;
  }
  bool erase(const Prefix& p) { return nodes_.erase(space_.key(p)) != 0; }
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // Visits entries in key order (depth-major, lexicographic within depth).
  template <class F>
  void for_each_sorted(F&& f) const {
    std::vector<std::uint64_t> keys;
    keys.reserve(nodes_.size());
    for (const auto& [k, _] : nodes_) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    for (auto k : keys) f(space_.prefix_of_key(k), nodes_.at(k));
  }

  template <class F>
  void for_each(F&& f) const {
    for (const auto& [k, v] : nodes_) f(k, v);
  }

 private:
  SidSpace space_;
  std::unordered_map<std::uint64_t, T> nodes_;
};

// Which leaves are catalog items. Prefix validity means "has at least one
// valid leaf below". An empty mask marks every leaf valid.
class ValidityMask {
 public:
  explicit ValidityMask(const SidSpace& space);  // all valid
  ValidityMask(const SidSpace& space, std::vector<bool> leaf_valid);

  bool all_valid() const { return all_valid_; }
  bool valid(const Prefix& p) const;
  bool valid(const Sid& s) const { return valid(s.prefix()); }
  std::uint64_t valid_leaves_under(const Prefix& p) const;
  const std::vector<bool>& leaf_flags() const { return leaf_valid_; }
  const SidSpace& space() const { return space_; }

 private:
  SidSpace space_;
  bool all_valid_ = true;
  std::vector<bool> leaf_valid_;
  std::vector<std::uint32_t> counts_;  // indexed by SidSpace::key
};

}  // namespace vstar
