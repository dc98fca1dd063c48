#pragma once

// Synthetic recommendation environment. A context is what the policy
// conditions on (a user profile); a query is one interaction of a context
// with its own ground-truth next item. Item embeddings are hierarchical so
// items sharing longer SID prefixes are more similar.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "vstar/core.hpp"
#include "vstar/policy.hpp"

namespace vstar {

struct EnvSizes {
  int vocab = 16;
  int length = 3;
  int embed_dim = 16;
  int contexts = 200;
  int queries = 2000;
  double heldout_fraction = 0.2;
  double alpha = 0.5;  // semantic payoff scale; 0 gives exact-match reward only
  // Per-level Gaussian perturbation scales, non-increasing with depth.
  std::vector<double> embedding_scales = {1.0, 0.35, 0.12};
  int log_samples = 200;               // logged interactions per context for the ML fit
  double smoothing = 0.5;              // additive pseudo-count in the fit
  double popularity_exponent = 1.2;    // Zipf exponent of the planted popularity
  double target_concentration = 0.8;   // P(query truth == the context's anchor item)
  double valid_fraction = 1.0;         // share of leaves that are catalog items

  void validate() const;
};

struct MisalignmentSpec {
  double fraction = 0.5;   // share of contexts whose anchor is planted low
  double quantile = 0.25;  // bottom quantile of first-token probabilities
  std::uint64_t seed = 0;

  void validate() const;
};

class Environment {
 public:
  const SidSpace& space() const { return space_; }
  int embed_dim() const { return dim_; }
  double alpha() const { return alpha_; }
  std::uint64_t seed() const { return seed_; }
  const MisalignmentSpec& misalignment() const { return spec_; }

  std::size_t num_contexts() const { return anchors_.size(); }
  std::size_t num_queries() const { return query_context_.size(); }

  ContextId context_of(QueryId q) const;
  const Sid& truth(QueryId q) const;
  const Sid& anchor(ContextId x) const;
  bool planted(ContextId x) const;

  const std::vector<QueryId>& train_queries() const { return train_; }
  const std::vector<QueryId>& heldout_queries() const { return heldout_; }

  const ValidityMask& mask() const { return mask_; }
  std::span<const double> embedding(const Sid& s) const;
  // Unit-normalised mean embedding of the valid leaves under p.
  std::span<const double> prefix_centroid(const Prefix& p) const;
  double cosine(const Sid& a, const Sid& b) const;

  // 1 on exact match, else alpha * max(0, cos(e(y), e(y*))).
  double terminal_reward(QueryId q, const Sid& y) const;

  void save(std::ostream& out) const;
  static Environment load(std::istream& in);

 private:
  Environment(SidSpace space, int dim);
  void build_centroids();
  void check_query(QueryId q) const;

  friend struct EnvBuilder;

  SidSpace space_;
  int dim_;
  double alpha_ = 0.5;
  std::uint64_t seed_ = 0;
  MisalignmentSpec spec_;
  ValidityMask mask_;
  std::vector<Sid> anchors_;
  std::vector<bool> planted_;
  std::vector<ContextId> query_context_;
  std::vector<Sid> truth_;
  std::vector<QueryId> train_, heldout_;
  std::vector<double> embeddings_;  // num_leaves x dim, unit rows
  std::vector<double> centroids_;   // num_nodes x dim
};

struct GeneratedEnv {
  Environment env;
  PolicyTable policy;  // maximum-likelihood fit to the synthetic logs
};

// Throws ConfigError when the spec cannot be satisfied (e.g. the bottom
// quantile holds no first token).
GeneratedEnv generate(const MisalignmentSpec& spec, const EnvSizes& sizes);

struct MisalignmentAudit {
  std::size_t queries = 0;
  std::size_t planted_queries = 0;
  std::size_t contexts = 0;
  std::size_t planted_contexts = 0;
  double fraction = 0.0;  // planted_queries / queries
};

// Counts queries whose truth's first token lies in the bottom `quantile` of
// the policy's first-token distribution for the query's context.
MisalignmentAudit audit_misalignment(const Environment& env, const PolicyTable& policy, double quantile);

// Rank (1 = most probable) of token `v` among valid first tokens.
int first_token_rank(const PolicyTable& policy, const ValidityMask& mask, ContextId x, Token v);

// Mean cosine between distinct items grouped by lcp_len 0..L-1; entry L is
// 1 (an item with itself). Exact, via per-prefix embedding sums.
std::vector<double> embedding_similarity_profile(const Environment& env);

}  // namespace vstar
