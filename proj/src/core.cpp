#include "vstar/core.hpp"

#include <algorithm>
#include <sstream>

namespace vstar {

Vocab::Vocab(int size) : size_(size) {
  if (size < 2) throw InvalidArgument("vocabulary size must be >= 2, got " + std::to_string(size));
  if (size > 65535) throw InvalidArgument("vocabulary size exceeds token width");
}

Prefix::Prefix(std::initializer_list<int> tokens) {
  if (tokens.size() > static_cast<std::size_t>(kMaxDepth)) {
    throw InvalidArgument("prefix longer than kMaxDepth");
  }
  for (int t : tokens) {
    if (t < 0 || t > 65535) throw InvalidArgument("token out of range");
    tokens_[size_++] = static_cast<Token>(t);
  }
}

Prefix::Prefix(std::span<const Token> tokens) {
  if (tokens.size() > static_cast<std::size_t>(kMaxDepth)) {
    throw InvalidArgument("prefix longer than kMaxDepth");
  }
  for (Token t : tokens) tokens_[size_++] = t;
}

Prefix Prefix::child(Token v) const {
  if (size_ >= kMaxDepth) throw InvalidArgument("prefix already at kMaxDepth");
  Prefix out = *this;
  out.tokens_[out.size_++] = v;
  return out;
}

Prefix Prefix::parent() const {
  if (size_ == 0) throw InvalidArgument("empty prefix has no parent");
  return head(size_ - 1);
}

Prefix Prefix::head(int n) const {
  if (n < 0 || n > size_) throw InvalidArgument("head length out of range");
  Prefix out;
  for (int i = 0; i < n; ++i) out.tokens_[static_cast<std::size_t>(i)] = tokens_[static_cast<std::size_t>(i)];
  out.size_ = static_cast<std::uint8_t>(n);
  return out;
}

bool Prefix::starts_with(const Prefix& p) const {
  if (p.size_ > size_) return false;
  return std::equal(p.tokens_.begin(), p.tokens_.begin() + p.size_, tokens_.begin());
}

SidSpace::SidSpace(Vocab vocab, int length) : vocab_(vocab), length_(length) {
  if (length < 1 || length > kMaxDepth) {
    throw InvalidArgument("SID length must be in [1, " + std::to_string(kMaxDepth) + "]");
  }
  pow_.resize(static_cast<std::size_t>(length) + 1);
  offset_.resize(static_cast<std::size_t>(length) + 2);
  pow_[0] = 1;
  for (int d = 1; d <= length; ++d) {
    const auto prev = pow_[static_cast<std::size_t>(d) - 1];
    if (prev > (std::uint64_t{1} << 62) / static_cast<std::uint64_t>(vocab.size())) {
      throw BudgetExceeded("trie too large to address");
    }
    pow_[static_cast<std::size_t>(d)] = prev * static_cast<std::uint64_t>(vocab.size());
  }
  offset_[0] = 0;
  for (int d = 0; d <= length; ++d) {
    offset_[static_cast<std::size_t>(d) + 1] = offset_[static_cast<std::size_t>(d)] + pow_[static_cast<std::size_t>(d)];
  }
}

void SidSpace::validate(const Prefix& p) const {
  if (p.size() > length_) {
    throw InvalidArgument("prefix length " + std::to_string(p.size()) + " exceeds L=" +
                          std::to_string(length_));
  }
  for (Token t : p.tokens()) {
    if (t >= vocab_.size()) {
      throw InvalidArgument("token " + std::to_string(t) + " out of vocabulary (V=" +
                            std::to_string(vocab_.size()) + ")");
    }
  }
}

std::uint64_t SidSpace::key(const Prefix& p) const {
  std::uint64_t idx = 0;
  for (Token t : p.tokens()) idx = idx * static_cast<std::uint64_t>(vocab_.size()) + t;
  return offset_[static_cast<std::size_t>(p.size())] + idx;
}

Prefix SidSpace::prefix_of_key(std::uint64_t key) const {
  if (key >= num_nodes()) throw InvalidArgument("prefix key out of range");
  int depth = 0;
  while (key >= offset_[static_cast<std::size_t>(depth) + 1]) ++depth;
  std::uint64_t idx = key - offset_[static_cast<std::size_t>(depth)];
  std::array<Token, kMaxDepth> buf{};
  const auto v = static_cast<std::uint64_t>(vocab_.size());
  for (int i = depth - 1; i >= 0; --i) {
    buf[static_cast<std::size_t>(i)] = static_cast<Token>(idx % v);
    idx /= v;
  }
  return Prefix(std::span<const Token>(buf.data(), static_cast<std::size_t>(depth)));
}

std::uint64_t SidSpace::leaf_index(const Prefix& full) const {
  if (full.size() != length_) throw InvalidArgument("leaf_index needs a full-length prefix");
  return key(full) - offset_[static_cast<std::size_t>(length_)];
}

Prefix SidSpace::leaf_at(std::uint64_t index) const {
  if (index >= num_leaves()) throw InvalidArgument("leaf index out of range");
  return prefix_of_key(offset_[static_cast<std::size_t>(length_)] + index);
}

Sid::Sid(const SidSpace& space, Prefix tokens) : tokens_(tokens) {
  if (tokens.size() != space.length()) {
    throw InvalidArgument("SID must have exactly L=" + std::to_string(space.length()) +
                          " tokens, got " + std::to_string(tokens.size()));
  }
  space.validate(tokens);
}

Sid::Sid(const SidSpace& space, std::initializer_list<int> tokens) : Sid(space, Prefix(tokens)) {}

std::size_t PrefixHash::operator()(const Prefix& p) const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ static_cast<std::uint64_t>(p.size());
  for (Token t : p.tokens()) {
    h ^= t;
    h *= 0x100000001b3ULL;
  }
  return static_cast<std::size_t>(h);
}

std::size_t SidHash::operator()(const Sid& s) const noexcept { return PrefixHash{}(s.prefix()); }

std::string render(const Prefix& p) {
  std::string out;
  for (int i = 0; i < p.size(); ++i) {
    out += '<';
    out += static_cast<char>('a' + (i % 26));
    out += '_';
    out += std::to_string(p[i]);
    out += '>';
  }
  return out;
}

std::string to_dotted(const Prefix& p) {
  std::string out;
  for (int i = 0; i < p.size(); ++i) {
    if (i) out += '.';
    out += std::to_string(p[i]);
  }
  return out;
}

Prefix parse_dotted(const std::string& text) {
  if (text.empty()) return Prefix{};
  std::vector<Token> toks;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw InvalidArgument("malformed prefix '" + text + "'");
    std::size_t pos = 0;
    const long v = std::stol(part, &pos);
    if (pos != part.size() || v < 0 || v > 65535) throw InvalidArgument("malformed prefix '" + text + "'");
    toks.push_back(static_cast<Token>(v));
  }
  return Prefix(std::span<const Token>(toks));
}

int lcp_len(const Prefix& a, const Prefix& b) {
  if (a.size() != b.size()) throw InvalidArgument("lcp_len: length mismatch");
  int n = 0;
  while (n < a.size() && a[n] == b[n]) ++n;
  return n;
}

int lcp_len(const Sid& a, const Sid& b) { return lcp_len(a.prefix(), b.prefix()); }

std::vector<Sid> enumerate_all_sids(const SidSpace& space) {
  if (space.num_leaves() > kMaxEnumeration) {
    throw BudgetExceeded("V^L = " + std::to_string(space.num_leaves()) + " exceeds enumeration cap 10^7");
  }
  std::vector<Sid> out;
  out.reserve(space.num_leaves());
  for (std::uint64_t i = 0; i < space.num_leaves(); ++i) out.emplace_back(space, space.leaf_at(i));
  return out;
}

std::vector<Sid> enumerate_all_sids(int vocab_size, int length) {
  // Guard before SidSpace so absurd sizes report budget, not addressing, errors.
  long double n = 1;
  for (int i = 0; i < length; ++i) {
    n *= static_cast<long double>(vocab_size);
    if (n > static_cast<long double>(kMaxEnumeration)) {
      throw BudgetExceeded("V^L exceeds enumeration cap 10^7");
    }
  }
  return enumerate_all_sids(SidSpace(Vocab(vocab_size), length));
}

ValidityMask::ValidityMask(const SidSpace& space) : space_(space) {}

ValidityMask::ValidityMask(const SidSpace& space, std::vector<bool> leaf_valid)
    : space_(space), leaf_valid_(std::move(leaf_valid)) {
  if (leaf_valid_.size() != space.num_leaves()) {
    throw InvalidArgument("validity mask size does not match V^L");
  }
  all_valid_ = std::all_of(leaf_valid_.begin(), leaf_valid_.end(), [](bool b) { return b; });
  if (all_valid_) {
    leaf_valid_.clear();
    return;
  }
  counts_.assign(space.num_nodes(), 0);
  for (std::uint64_t i = 0; i < space.num_leaves(); ++i) {
    if (!leaf_valid_[i]) continue;
    const Prefix leaf = space.leaf_at(i);
    for (int d = 0; d <= space.length(); ++d) ++counts_[space.key(leaf.head(d))];
  }
}

std::uint64_t ValidityMask::valid_leaves_under(const Prefix& p) const {
  if (all_valid_) return space_.nodes_at_depth(space_.length() - p.size());
  return counts_[space_.key(p)];
}

bool ValidityMask::valid(const Prefix& p) const {
  if (all_valid_) return true;
  return counts_[space_.key(p)] > 0;
}

}  // namespace vstar
