#pragma once

// Prefix value estimation. State s_l is (context, y_<=l) for l = 1..L and
// V(s_l) estimates the discounted sum of step rewards r_l .. r_L.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "vstar/core.hpp"
#include "vstar/env.hpp"
#include "vstar/policy.hpp"

namespace vstar {

struct StepRewardParams {
  std::vector<double> w = {0.3, 0.5, 1.0};

  // Positive, non-decreasing, one weight per level.
  void validate(int length) const;
};

class ValueEstimator {
 public:
  virtual ~ValueEstimator() = default;
  virtual double value(ContextId x, const Prefix& p) const = 0;
};

// One TD sample. `next` is absent at the terminal step (s.size() == L).
struct Transition {
  ContextId context = 0;
  Prefix state;
  double reward = 0.0;
  std::optional<Prefix> next;
};

// Estimator that td_fit can train.
class TrainableValue : public ValueEstimator {
 public:
  virtual double gamma() const = 0;
  virtual double learning_rate() const = 0;
  // One synchronous step given residuals (target - V) computed on a frozen copy.
  virtual void apply_residuals(std::span<const Transition> batch, std::span<const double> residuals) = 0;
};

// How a table answers for a prefix it has never stored.
enum class ColdStart {
  Zero,     // 0
  Backoff,  // mean of stored same-depth nodes under the deepest ancestor that has any, else 0
};

// Per-context table over visited prefixes.
class ValueTable : public TrainableValue {
 public:
  ValueTable(SidSpace space, std::size_t num_contexts, double gamma = 0.99, double learning_rate = 0.1);

  const SidSpace& space() const { return space_; }
  std::size_t num_contexts() const { return tables_.size(); }
  double gamma() const override { return gamma_; }
  double learning_rate() const override { return lr_; }

  double value(ContextId x, const Prefix& p) const override;
  bool visited(ContextId x, const Prefix& p) const;
  void set(ContextId x, const Prefix& p, double v);
  std::size_t stored_nodes() const;

  ColdStart cold_start() const { return cold_; }
  void set_cold_start(ColdStart c) { cold_ = c; }

  // Tabular TD: each state moves by lr times its mean residual over the batch.
  void apply_residuals(std::span<const Transition> batch, std::span<const double> residuals) override;

  std::uint64_t fingerprint() const;
  void save(std::ostream& out) const;
  static ValueTable load(std::istream& in);

 private:
  void check_context(ContextId x) const;
  void store(ContextId x, const Prefix& p, double v);
  std::uint64_t group_key(const Prefix& ancestor, int depth) const;

  struct Group {
    double sum = 0.0;
    std::int64_t count = 0;
  };

  SidSpace space_;
  double gamma_;
  double lr_;
  ColdStart cold_ = ColdStart::Zero;
  std::vector<PrefixTrie<double>> tables_;
  // Per context: (ancestor, depth) -> stored values at that depth below it.
  std::vector<std::unordered_map<std::uint64_t, Group>> groups_;
};

// V(x, p) = <w_depth, centroid(p)> + b_depth, shared across contexts.
class LinearValue : public TrainableValue {
 public:
  LinearValue(const Environment& env, double gamma = 0.99, double learning_rate = 0.1);

  double gamma() const override { return gamma_; }
  double learning_rate() const override { return lr_; }
  double value(ContextId x, const Prefix& p) const override;
  // Semi-gradient TD averaged over the batch.
  void apply_residuals(std::span<const Transition> batch, std::span<const double> residuals) override;

  std::span<const double> weights(int depth) const;

 private:
  const Environment& env_;
  double gamma_;
  double lr_;
  int dim_;
  std::vector<double> params_;  // per depth 0..L: dim weights then bias
};

// Expected terminal reward of one query under the policy's (masked)
// completion distribution, by backward induction over the full trie.
class OracleValue : public ValueEstimator {
 public:
  OracleValue(const Environment& env, const PolicyTable& policy, QueryId q);
  double value(ContextId x, const Prefix& p) const override;
  ContextId context() const { return context_; }

 private:
  SidSpace space_;
  ContextId context_;
  std::vector<double> v_;  // by dense key
};

std::vector<const Candidate*> prefix_bucket(const CandidateSet& cands, const Prefix& p);

// Arithmetic mean of member embeddings, not renormalised. Throws EmptyBucket.
std::vector<double> prefix_embedding(const Environment& env, const CandidateSet& cands, const Prefix& p);

// Diagnostics for step rewards on prefixes with no sampled members.
struct StepRewardStats {
  std::int64_t empty_buckets = 0;
};

enum class EmptyBucketPolicy { ZeroCosine, Throw };

// w_l if p matches the truth's prefix, else -w_l * (1 - cos(mean bucket
// embedding, e(y*))). On an empty bucket either cos := 0 (counted) or throw.
double step_reward(const Environment& env, const CandidateSet& cands, const StepRewardParams& params, QueryId q,
                   const Prefix& p, StepRewardStats* stats = nullptr,
                   EmptyBucketPolicy on_empty = EmptyBucketPolicy::ZeroCosine);

double td_target(const ValueEstimator& value, double gamma, double reward, ContextId x,
                 const std::optional<Prefix>& next);

// All L transitions of every candidate in the set.
std::vector<Transition> harvest_transitions(const Environment& env, const CandidateSet& cands,
                                            const StepRewardParams& params, StepRewardStats* stats = nullptr);

// Batch-synchronous TD(0): each sweep freezes V, computes residuals and
// applies one update. Returns the mean squared TD error seen by each sweep.
std::vector<double> td_fit(TrainableValue& value, std::span<const Transition> batch, int sweeps);

}  // namespace vstar
