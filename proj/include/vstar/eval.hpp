#pragma once

// Ranking metrics, candidate-set diagnostics and the prefix-level
// signal/reward alignment study.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "vstar/core.hpp"
#include "vstar/env.hpp"
#include "vstar/policy.hpp"

namespace vstar {

// 1 iff truth is among the first k entries. Throws if list.size() < k.
double hr_at_k(std::span<const Sid> list, const Sid& truth, int k);

// 1 / log2(rank + 1) for a single relevant item at rank <= k, else 0.
double ndcg_at_k(std::span<const Sid> list, const Sid& truth, int k);

// Mean over unordered pairs of 1 - lcp_len / L.
double lcp_diversity(std::span<const Sid> sids);

// Best terminal reward in the set for query q.
double max_reward(const Environment& env, QueryId q, std::span<const Sid> sids);

// 1-based ranks with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> xs);

struct SpearmanResult {
  double rho = 0.0;
  bool constant = false;  // an input had no spread; rho is reported as 0
};

SpearmanResult spearman(std::span<const double> xs, std::span<const double> ys);

// Mean stored reward of the candidates under p. Throws EmptyBucket.
double prefix_reward(const CandidateSet& cands, const Prefix& p);

struct AlignmentConfig {
  int pool_size = 64;
  double temperature = 1.5;  // sampling temperature multiplier
  std::uint64_t seed = 0;
  int max_attempts_factor = 50;  // sampling attempts = factor * pool_size
};

// Prefix signal under evaluation, e.g. a value estimate for query q.
using PrefixSignal = std::function<double(QueryId q, const Prefix& p)>;

struct AlignmentLevel {
  int level = 0;
  double rho_logprob = 0.0;
  double rho_value = 0.0;
  std::size_t queries = 0;   // queries with >= 2 distinct prefixes at this level
  std::size_t constant = 0;  // of those, queries where a signal or the reward was constant
};

// Builds a de-duplicated pool per query by temperature sampling, splitting the
// draws evenly across the policy variants. At each level, ranks the distinct
// prefixes in the pool by log-prob under variants[0] and by `value`, and
// correlates each with the prefix reward; rho is averaged over queries.
std::vector<AlignmentLevel> alignment_study(const Environment& env, std::span<const PolicyTable* const> variants,
                                            const PrefixSignal& value, std::span<const QueryId> queries,
                                            const AlignmentConfig& cfg);

// The pool one query gets in the study, with terminal rewards attached.
CandidateSet alignment_pool(const Environment& env, std::span<const PolicyTable* const> variants, QueryId q,
                            const AlignmentConfig& cfg);

}  // namespace vstar
