#pragma once

// Exact tabular autoregressive policy over semantic IDs, and the
// likelihood-driven decoders (beam search, top-K sampling) built on it.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "vstar/core.hpp"

namespace vstar {

std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
// Shannon entropy in nats with 0 log 0 := 0.
double entropy_of(std::span<const double> dist);

// pi_theta(v | x, p) = softmax(logits(x, p) / temperature). Prefixes without
// stored logits behave as all-zero logits (uniform).
class PolicyTable {
 public:
  PolicyTable(SidSpace space, std::size_t num_contexts, double temperature = 1.0);

  const SidSpace& space() const { return space_; }
  std::size_t num_contexts() const { return tables_.size(); }
  double temperature() const { return temperature_; }
  void set_temperature(double t);

  std::span<const double> logits(ContextId x, const Prefix& p) const;
  std::vector<double>& mutable_logits(ContextId x, const Prefix& p);
  bool has_logits(ContextId x, const Prefix& p) const;
  std::size_t stored_nodes() const;

  std::vector<double> next_dist(ContextId x, const Prefix& p) const;
  // Invalid children get probability 0 and the rest is renormalised.
  // `temperature_scale` multiplies the policy temperature (sampling only).
  std::vector<double> next_dist(ContextId x, const Prefix& p, const ValidityMask& mask,
                                double temperature_scale = 1.0) const;

  double sequence_logprob(ContextId x, const Sid& y) const;
  double sequence_logprob(ContextId x, const Sid& y, const ValidityMask& mask) const;
  std::vector<double> step_logprobs(ContextId x, const Sid& y, const ValidityMask* mask = nullptr) const;

  double entropy(ContextId x, const Prefix& p) const;
  double entropy(ContextId x, const Prefix& p, const ValidityMask& mask) const;

  // d log pi(v | x, p) / d logits(x, p) = (onehot(v) - pi(.|x,p)) / temperature.
  std::vector<double> logprob_grad(ContextId x, const Prefix& p, Token v) const;

  // Order-independent digest of every stored logit bit pattern.
  std::uint64_t fingerprint() const;

  template <class F>
  void for_each_node(ContextId x, F&& f) const {
    tables_.at(x).for_each_sorted(std::forward<F>(f));
  }

  void save(std::ostream& out) const;
  static PolicyTable load(std::istream& in);

 private:
  void check_context(ContextId x) const;
  void check_nonterminal(const Prefix& p) const;

  SidSpace space_;
  double temperature_;
  std::vector<PrefixTrie<std::vector<double>>> tables_;
  std::vector<double> zeros_;
};

struct Candidate {
  Sid sid;
  double logprob = 0.0;
  std::optional<double> reward;
  std::optional<double> value;
  // log pi_old(y_l | x, y_<l) for l = 1..L, recorded at decode time.
  std::vector<double> step_logprobs;
};

// Decoder output for one query: unique SIDs, ranked (rank 1 first).
class CandidateSet {
 public:
  CandidateSet() = default;
  CandidateSet(ContextId context, QueryId query) : context_(context), query_(query) {}

  ContextId context() const { return context_; }
  QueryId query() const { return query_; }
  void set_query(QueryId q) { query_ = q; }

  // Throws InvalidArgument on a duplicate SID.
  void add(Candidate c);
  bool contains(const Sid& s) const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const std::vector<Candidate>& entries() const { return entries_; }
  std::vector<Candidate>& entries() { return entries_; }
  const Candidate& operator[](std::size_t i) const { return entries_[i]; }
  Candidate& operator[](std::size_t i) { return entries_[i]; }

  std::vector<Sid> sids() const;
  std::vector<double> rewards() const;  // throws InternalError if any unset

 private:
  ContextId context_ = 0;
  QueryId query_ = 0;
  std::vector<Candidate> entries_;
};

// Per-decode memo of next-token distributions. Each distinct prefix whose
// distribution is computed costs one forward token, once.
class DistCache {
 public:
  DistCache(const PolicyTable& policy, ContextId x, const ValidityMask* mask = nullptr);

  const std::vector<double>& get(const Prefix& p);
  const std::vector<double>* find(const Prefix& p) const;
  bool cached(const Prefix& p) const { return find(p) != nullptr; }
  std::int64_t cost() const { return cost_; }

  const PolicyTable& policy() const { return policy_; }
  ContextId context() const { return context_; }
  const ValidityMask* mask() const { return mask_; }

 private:
  const PolicyTable& policy_;
  ContextId context_;
  const ValidityMask* mask_;
  std::unordered_map<std::uint64_t, std::vector<double>> cache_;
  std::int64_t cost_ = 0;
};

struct DecodeResult {
  CandidateSet candidates;
  std::int64_t cost = 0;  // forward tokens
  bool underfilled = false;
};

// Fills step log-probs and total log-prob of `sid` from cached distributions.
Candidate make_candidate(DistCache& cache, const Sid& sid);

struct BeamHyp {
  Prefix prefix;
  double logprob = 0.0;
};

// Hypotheses kept at each depth 0..L by a width-B beam, computing
// distributions through `cache` (so its cost is the beam's cost).
std::vector<std::vector<BeamHyp>> beam_levels(DistCache& cache, int width);

// Width-B beam search; top-B prefixes per depth by cumulative log-prob,
// ties broken by lexicographic prefix order.
DecodeResult beam_search(const PolicyTable& policy, ContextId x, int width,
                         const ValidityMask* mask = nullptr);

struct TopKOptions {
  int k = 1;
  int count = 16;
  std::uint64_t seed = 0;
  double temperature = 1.0;  // multiplies the policy temperature
  int retry_factor = 20;     // attempts = retry_factor * count
};

// Per-step renormalised top-K sampling with de-duplication. Output is ranked
// by policy log-prob.
DecodeResult topk_sample(const PolicyTable& policy, ContextId x, const TopKOptions& opts,
                         const ValidityMask* mask = nullptr);

}  // namespace vstar
