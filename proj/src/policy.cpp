#include "vstar/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>

#include "vstar/io.hpp"
#include "vstar/rng.hpp"

namespace vstar {

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    z += out[i];
  }
  for (double& p : out) p /= z;
  return out;
}

double entropy_of(std::span<const double> dist) {
  double h = 0.0;
  for (double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

PolicyTable::PolicyTable(SidSpace space, std::size_t num_contexts, double temperature)
    : space_(std::move(space)), temperature_(temperature),
      zeros_(static_cast<std::size_t>(space_.vocab_size()), 0.0) {
  if (!(temperature > 0.0)) throw InvalidArgument("policy temperature must be positive");
  if (num_contexts == 0) throw InvalidArgument("policy needs at least one context");
  tables_.reserve(num_contexts);
  for (std::size_t i = 0; i < num_contexts; ++i) tables_.emplace_back(space_);
}

void PolicyTable::set_temperature(double t) {
  if (!(t > 0.0)) throw InvalidArgument("policy temperature must be positive");
  temperature_ = t;
}

void PolicyTable::check_context(ContextId x) const {
  if (x >= tables_.size()) throw InvalidArgument("unknown context " + std::to_string(x));
}

void PolicyTable::check_nonterminal(const Prefix& p) const {
  space_.validate(p);
  if (p.size() >= space_.length()) {
    throw InvalidArgument("terminal prefix has no next-token distribution");
  }
}

std::span<const double> PolicyTable::logits(ContextId x, const Prefix& p) const {
  check_context(x);
  check_nonterminal(p);
  if (const auto* l = tables_[x].find(p)) return *l;
  return zeros_;
}

std::vector<double>& PolicyTable::mutable_logits(ContextId x, const Prefix& p) {
  check_context(x);
  check_nonterminal(p);
  auto& slot = tables_[x][p];
  if (slot.empty()) slot.assign(static_cast<std::size_t>(space_.vocab_size()), 0.0);
  return slot;
}

bool PolicyTable::has_logits(ContextId x, const Prefix& p) const {
  check_context(x);
  return tables_[x].contains(p);
}

std::size_t PolicyTable::stored_nodes() const {
  std::size_t n = 0;
  for (const auto& t : tables_) n += t.size();
  return n;
}

std::vector<double> PolicyTable::next_dist(ContextId x, const Prefix& p) const {
  return softmax(logits(x, p), temperature_);
}

std::vector<double> PolicyTable::next_dist(ContextId x, const Prefix& p, const ValidityMask& mask,
                                           double temperature_scale) const {
  if (!(temperature_scale > 0.0)) throw InvalidArgument("temperature scale must be positive");
  auto dist = softmax(logits(x, p), temperature_ * temperature_scale);
  if (mask.all_valid()) return dist;
  double z = 0.0;
  for (std::size_t v = 0; v < dist.size(); ++v) {
    if (!mask.valid(p.child(static_cast<Token>(v)))) dist[v] = 0.0;
    z += dist[v];
  }
  if (!(z > 0.0)) throw InvalidArgument("prefix " + to_dotted(p) + " has no valid children");
  for (double& q : dist) q /= z;
  return dist;
}

std::vector<double> PolicyTable::step_logprobs(ContextId x, const Sid& y, const ValidityMask* mask) const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(y.length()));
  for (int l = 0; l < y.length(); ++l) {
    const Prefix h = y.head(l);
    const auto dist = mask ? next_dist(x, h, *mask) : next_dist(x, h);
    out.push_back(std::log(dist[y[l]]));
  }
  return out;
}

double PolicyTable::sequence_logprob(ContextId x, const Sid& y) const {
  const auto steps = step_logprobs(x, y);
  return std::accumulate(steps.begin(), steps.end(), 0.0);
}

double PolicyTable::sequence_logprob(ContextId x, const Sid& y, const ValidityMask& mask) const {
  const auto steps = step_logprobs(x, y, &mask);
  return std::accumulate(steps.begin(), steps.end(), 0.0);
}

double PolicyTable::entropy(ContextId x, const Prefix& p) const { return entropy_of(next_dist(x, p)); }

double PolicyTable::entropy(ContextId x, const Prefix& p, const ValidityMask& mask) const {
  return entropy_of(next_dist(x, p, mask));
}

std::vector<double> PolicyTable::logprob_grad(ContextId x, const Prefix& p, Token v) const {
  auto g = next_dist(x, p);
  if (v >= g.size()) throw InvalidArgument("token out of vocabulary");
  for (double& q : g) q = -q / temperature_;
  g[v] += 1.0 / temperature_;
  return g;
}

std::uint64_t PolicyTable::fingerprint() const {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(space_.vocab_size()) * 31 +
                          static_cast<std::uint64_t>(space_.length()));
  h = mix64(h ^ std::bit_cast<std::uint64_t>(temperature_));
  for (std::size_t x = 0; x < tables_.size(); ++x) {
    tables_[x].for_each_sorted([&](const Prefix& p, const std::vector<double>& l) {
      h = mix64(h ^ (x * 0x9e3779b97f4a7c15ULL) ^ space_.key(p));
      for (double v : l) h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
    });
  }
  return h;
}

void PolicyTable::save(std::ostream& out) const {
  out << "vstar-policy 1\n";
  out << "vocab " << space_.vocab_size() << "\n";
  out << "length " << space_.length() << "\n";
  out << "temperature " << io::hex(temperature_) << "\n";
  out << "contexts " << tables_.size() << "\n";
  out << "nodes " << stored_nodes() << "\n";
  for (std::size_t x = 0; x < tables_.size(); ++x) {
    tables_[x].for_each_sorted([&](const Prefix& p, const std::vector<double>& l) {
      out << x << ' ' << (p.empty() ? std::string("-") : to_dotted(p));
      for (double v : l) out << ' ' << io::hex(v);
      out << '\n';
    });
  }
}

PolicyTable PolicyTable::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "vstar-policy 1") {
    throw InvalidArgument("not a vstar policy snapshot (bad header)");
  }
  const int vocab = io::parse_int<int>(io::expect_field(in, "vocab"));
  const int length = io::parse_int<int>(io::expect_field(in, "length"));
  const double temperature = io::parse_hex(io::expect_field(in, "temperature"));
  const auto contexts = io::parse_int<std::size_t>(io::expect_field(in, "contexts"));
  const auto nodes = io::parse_int<std::size_t>(io::expect_field(in, "nodes"));
  PolicyTable policy(SidSpace(Vocab(vocab), length), contexts, temperature);
  for (std::size_t i = 0; i < nodes; ++i) {
    if (!std::getline(in, line)) throw InvalidArgument("policy snapshot truncated");
    const auto parts = io::split_ws(line);
    if (parts.size() != static_cast<std::size_t>(vocab) + 2) {
      throw InvalidArgument("malformed policy row: " + line);
    }
    const auto x = io::parse_int<ContextId>(parts[0]);
    const Prefix p = parts[1] == "-" ? Prefix{} : parse_dotted(std::string(parts[1]));
    auto& l = policy.mutable_logits(x, p);
    for (int v = 0; v < vocab; ++v) l[static_cast<std::size_t>(v)] = io::parse_hex(parts[static_cast<std::size_t>(v) + 2]);
  }
  return policy;
}

void CandidateSet::add(Candidate c) {
  if (contains(c.sid)) throw InvalidArgument("duplicate SID " + to_dotted(c.sid.prefix()) + " in candidate set");
  entries_.push_back(std::move(c));
}

bool CandidateSet::contains(const Sid& s) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Candidate& c) { return c.sid == s; });
}

std::vector<Sid> CandidateSet::sids() const {
  std::vector<Sid> out;
  out.reserve(entries_.size());
  for (const auto& c : entries_) out.push_back(c.sid);
  return out;
}

std::vector<double> CandidateSet::rewards() const {
  std::vector<double> out;
  out.reserve(entries_.size());
  for (const auto& c : entries_) {
    if (!c.reward) throw InternalError("candidate reward not assigned");
    out.push_back(*c.reward);
  }
  return out;
}

DistCache::DistCache(const PolicyTable& policy, ContextId x, const ValidityMask* mask)
    : policy_(policy), context_(x), mask_(mask && !mask->all_valid() ? mask : nullptr) {}

const std::vector<double>& DistCache::get(const Prefix& p) {
  const auto key = policy_.space().key(p);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  auto dist = mask_ ? policy_.next_dist(context_, p, *mask_) : policy_.next_dist(context_, p);
  ++cost_;
  return cache_.emplace(key, std::move(dist)).first->second;
}

const std::vector<double>* DistCache::find(const Prefix& p) const {
  auto it = cache_.find(policy_.space().key(p));
  return it == cache_.end() ? nullptr : &it->second;
}

Candidate make_candidate(DistCache& cache, const Sid& sid) {
  Candidate c{sid, 0.0, std::nullopt, std::nullopt, {}};
  c.step_logprobs.reserve(static_cast<std::size_t>(sid.length()));
  for (int l = 0; l < sid.length(); ++l) {
    const double lp = std::log(cache.get(sid.head(l))[sid[l]]);
    c.step_logprobs.push_back(lp);
    c.logprob += lp;
  }
  return c;
}

namespace {

bool better(const BeamHyp& a, const BeamHyp& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return a.prefix < b.prefix;
}

void rank_by_logprob(CandidateSet& set) {
  auto& e = set.entries();
  std::sort(e.begin(), e.end(), [](const Candidate& a, const Candidate& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.sid < b.sid;
  });
}

}  // namespace

std::vector<std::vector<BeamHyp>> beam_levels(DistCache& cache, int width) {
  const auto& space = cache.policy().space();
  if (width < 1 || static_cast<std::uint64_t>(width) > space.num_leaves()) {
    throw InvalidArgument("beam width must be in [1, V^L]");
  }
  std::vector<std::vector<BeamHyp>> levels{{BeamHyp{Prefix{}, 0.0}}};
  for (int depth = 0; depth < space.length(); ++depth) {
    std::vector<BeamHyp> next;
    for (const auto& b : levels.back()) {
      const auto& dist = cache.get(b.prefix);
      for (int v = 0; v < space.vocab_size(); ++v) {
        const double q = dist[static_cast<std::size_t>(v)];
        if (q <= 0.0) continue;
        next.push_back({b.prefix.child(static_cast<Token>(v)), b.logprob + std::log(q)});
      }
    }
    const auto keep = std::min(next.size(), static_cast<std::size_t>(width));
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), better);
    next.resize(keep);
    levels.push_back(std::move(next));
  }
  return levels;
}

DecodeResult beam_search(const PolicyTable& policy, ContextId x, int width, const ValidityMask* mask) {
  DistCache cache(policy, x, mask);
  const auto levels = beam_levels(cache, width);
  DecodeResult result{CandidateSet(x, 0), 0, false};
  for (const auto& b : levels.back()) result.candidates.add(make_candidate(cache, Sid(policy.space(), b.prefix)));
  rank_by_logprob(result.candidates);
  result.cost = cache.cost();
  return result;
}

DecodeResult topk_sample(const PolicyTable& policy, ContextId x, const TopKOptions& opts,
                         const ValidityMask* mask) {
  const auto& space = policy.space();
  const int vocab = space.vocab_size();
  if (opts.k < 1 || opts.k > vocab) throw InvalidArgument("top-K requires 1 <= K <= V");
  if (opts.count < 1) throw InvalidArgument("top-K count must be positive");
  if (!(opts.temperature > 0.0)) throw InvalidArgument("sampling temperature must be positive");

  DistCache cache(policy, x, mask);
  Rng rng(mix64(opts.seed));
  DecodeResult result{CandidateSet(x, 0), 0, false};
  const long attempts = static_cast<long>(opts.retry_factor) * opts.count;
  std::vector<double> weights(static_cast<std::size_t>(vocab));
  std::vector<int> order(static_cast<std::size_t>(vocab));

  for (long a = 0; a < attempts && result.candidates.size() < static_cast<std::size_t>(opts.count); ++a) {
    Prefix p;
    for (int depth = 0; depth < space.length(); ++depth) {
      const auto& dist = cache.get(p);
      for (int v = 0; v < vocab; ++v) {
        const double q = dist[static_cast<std::size_t>(v)];
        weights[static_cast<std::size_t>(v)] = (opts.temperature == 1.0 || q <= 0.0) ? q : std::pow(q, 1.0 / opts.temperature);
      }
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
        return weights[static_cast<std::size_t>(i)] > weights[static_cast<std::size_t>(j)];
      });
      for (int r = opts.k; r < vocab; ++r) weights[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = 0.0;
      const auto v = sample_index(rng, weights);
      if (v >= weights.size()) throw InternalError("top-K: no valid token to sample");
      p = p.child(static_cast<Token>(v));
    }
    Sid sid(space, p);
    if (!result.candidates.contains(sid)) result.candidates.add(make_candidate(cache, sid));
  }
  result.underfilled = result.candidates.size() < static_cast<std::size_t>(opts.count);
  rank_by_logprob(result.candidates);
  result.cost = cache.cost();
  return result;
}

}  // namespace vstar
