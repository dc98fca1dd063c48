#pragma once

// The closed decode -> reward -> TD fit -> policy update loop, the
// likelihood-decoder baselines, and held-out evaluation.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vstar/env.hpp"
#include "vstar/policy.hpp"
#include "vstar/rl.hpp"
#include "vstar/value.hpp"
#include "vstar/ved.hpp"

namespace vstar {

enum class DecoderKind { Beam, TopK, Ved };

const char* to_string(DecoderKind d);
DecoderKind parse_decoder(const std::string& s);

struct DecoderConfig {
  DecoderKind kind = DecoderKind::Ved;
  int beam_width = 16;
  int topk_k = 8;
  int topk_count = 16;
  double topk_temperature = 1.0;
  VedConfig ved;

  void validate(const SidSpace& space) const;
};

struct DecodeOutput {
  CandidateSet candidates;
  std::int64_t cost = 0;
  bool underfilled = false;
};

// Candidates for query q under the decoder; `seed` feeds the stochastic ones.
DecodeOutput decode_query(const Environment& env, const PolicyTable& policy, const ValueEstimator& value, QueryId q,
                          const DecoderConfig& cfg, std::uint64_t seed);

struct RankingMetrics {
  std::vector<int> ks;
  std::vector<double> hr;    // mean HR@k per entry of ks
  std::vector<double> ndcg;  // mean NDCG@k
  std::size_t queries = 0;

  double hr_at(int k) const;
  double ndcg_at(int k) const;
};

// Test-time metrics: width-max(K) beam search on each query's context.
RankingMetrics eval_checkpoint(const Environment& env, const PolicyTable& policy, std::span<const QueryId> queries,
                               std::span<const int> ks);

struct DecoderMetrics {
  RankingMetrics ranking;       // over the decoder's own ranked candidates
  double diversity = 0.0;       // mean lcp_diversity per set
  double max_reward = 0.0;      // mean best-in-set reward
  double mean_cost = 0.0;       // forward tokens per query
  std::size_t underfilled = 0;  // sets shorter than requested
  std::vector<bool> hits;       // per query: truth anywhere in the set
};

// Decode every query and score the candidate lists directly.
DecoderMetrics evaluate_decoder(const Environment& env, const PolicyTable& policy, const ValueEstimator& value,
                                const DecoderConfig& cfg, std::span<const QueryId> queries, std::span<const int> ks,
                                std::uint64_t seed);

struct LoopConfig {
  int iterations = 30;
  int batch_queries = 0;  // training queries per iteration; 0 means all
  DecoderConfig decoder;
  Objective objective = Objective::Joint;
  RlConfig rl;
  StepRewardParams step;
  double value_gamma = 0.99;
  double value_lr = 0.5;
  ColdStart value_cold = ColdStart::Backoff;
  int td_sweeps = 20;
  int td_every = 1;  // fit the value every n-th iteration
  int policy_steps = 1;
  bool update_policy = true;
  std::vector<int> eval_k = {1, 5, 10};
  int eval_every = 1;  // held-out evaluation cadence; the last iteration is always evaluated
  std::uint64_t seed = 0;

  void validate(const SidSpace& space) const;
};

struct IterationRecord {
  int iteration = 0;  // 1-based
  std::uint64_t snapshot_hash = 0;
  std::size_t queries = 0;
  double mean_reward = 0.0;
  double mean_max_reward = 0.0;
  double mean_diversity = 0.0;
  double mean_cost = 0.0;
  std::size_t underfilled = 0;
  std::size_t hits = 0;  // training sets containing the truth
  std::optional<double> td_loss_first, td_loss_last;
  std::int64_t empty_buckets = 0;
  UpdateStats update;
  std::optional<RankingMetrics> heldout;

  std::string to_json() const;
};

struct RunRecord {
  RankingMetrics initial;
  std::vector<IterationRecord> iterations;
  RankingMetrics final_eval;
  std::uint64_t policy_fingerprint = 0;
  std::uint64_t value_fingerprint = 0;

  // One JSON object per line: an "initial" line, one per iteration, a "final" line.
  std::string to_jsonl() const;
  // iteration,hr@k...,ndcg@k...,mean_reward,... with iteration 0 the initial policy.
  std::string summary_csv() const;
};

// Optional per-iteration callback, e.g. for checkpoint files.
using IterationHook = std::function<void(const IterationRecord&, const PolicyTable&, const ValueTable&)>;

// Mutates policy and value in place. The KL reference is the policy as passed in.
RunRecord run_loop(const Environment& env, PolicyTable& policy, ValueTable& value, const LoopConfig& cfg,
                   const IterationHook& hook = {});

ValueTable make_value(const Environment& env, const LoopConfig& cfg);

}  // namespace vstar
