#pragma once

// Value-guided budgeted decoding over the SID trie: a warm-start beam tree,
// then repeated UCB selection, depth-gated one-child expansion and
// aggregate updates until the forward-token budget is spent.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vstar/core.hpp"
#include "vstar/policy.hpp"
#include "vstar/rng.hpp"
#include "vstar/value.hpp"

namespace vstar {

enum class PriorityRule { Joint, ValueOnly, EntropyOnly };

const char* to_string(PriorityRule r);
PriorityRule parse_priority_rule(const std::string& s);

struct VedConfig {
  std::int64_t budget = 33;  // forward tokens; 1 + 2*16 matches a width-16 beam at L=3
  double lambda = 0.1;
  double beta = 1.0;
  int init_width = 8;
  int output_size = 16;
  PriorityRule rule = PriorityRule::Joint;
  int traversal_cap_factor = 50;  // max traversals = factor * budget

  void validate(const SidSpace& space) const;
};

// G(s): V + lambda * H below depth L, V at depth L (entropy absent).
double priority(double value, std::optional<double> entropy, double lambda,
                PriorityRule rule = PriorityRule::Joint);

double ucb(double g, std::int64_t visits, std::int64_t root_visits, double beta);

struct SearchNode {
  Prefix prefix;
  int parent = -1;
  double value = 0.0;
  std::optional<double> entropy;  // absent at depth L
  double g = 0.0;
  std::int64_t visits = 0;
  std::vector<int> children;       // node ids, ascending by token
  std::vector<Token> unexpanded;   // valid child tokens not yet in the tree
  bool from_init = false;

  int depth() const { return prefix.size(); }
  bool fully_expanded() const { return unexpanded.empty(); }
};

struct ExpansionEvent {
  std::int64_t traversal = 0;
  Prefix parent;
  Token token = 0;
  double g = 0.0;     // parent priority at trigger time
  double g_bar = 0.0; // depth mean at trigger time
  std::int64_t cost_after = 0;
};

struct SearchStats {
  std::int64_t budget = 0;
  std::int64_t init_cost = 0;
  std::int64_t cost = 0;
  std::int64_t traversals = 0;
  std::int64_t expansions = 0;
  std::int64_t gated = 0;    // gate checks that failed
  std::int64_t refused = 0;  // expansions refused by the budget
  bool exhausted = false;
  bool cap_hit = false;
  bool saturated = false;
  std::vector<std::int64_t> nodes_per_depth;
  std::int64_t from_leaves = 0, from_completion = 0, from_init = 0;
  std::vector<ExpansionEvent> events;

  // One JSON object on one line.
  std::string to_json(bool with_events = true) const;
};

class SearchTree {
 public:
  // Stage 1: width-b beam warm start; every tree node evaluated once.
  // Throws ConfigError if the budget cannot cover the warm start.
  static SearchTree initialize(const PolicyTable& policy, const ValueEstimator& value, ContextId x,
                               const VedConfig& cfg, const ValidityMask* mask = nullptr);

  // Stage 2: argmax-U descent; increments N on the path and N_root once.
  std::vector<int> select_path();

  // Stage 3: one sampled child per gated, non-full node on the path. Gates
  // use the aggregates as they stood when the stage began. Returns new ids.
  std::vector<int> gated_expand(const std::vector<int>& path, Rng& rng);

  // Stage 4: fold new nodes into the per-depth aggregates.
  void backprop(const std::vector<int>& fresh);

  // Runs stages 2-4 until the budget, the traversal cap or saturation stops it.
  void search(Rng& rng);

  CandidateSet extract(QueryId q = 0);

  const std::vector<SearchNode>& nodes() const { return nodes_; }
  const SearchNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  int find(const Prefix& p) const;
  double depth_mean(int depth) const;
  std::int64_t depth_count(int depth) const { return count_.at(static_cast<std::size_t>(depth)); }
  double depth_sum(int depth) const { return sum_.at(static_cast<std::size_t>(depth)); }
  std::int64_t root_visits() const { return root_visits_; }
  std::int64_t cost() const { return cache_.cost(); }
  const SearchStats& stats() const { return stats_; }
  const std::vector<Sid>& init_sequences() const { return init_leaves_; }
  bool saturated() const;

 private:
  SearchTree(const PolicyTable& policy, const ValueEstimator& value, ContextId x, const VedConfig& cfg,
             const ValidityMask* mask);
  int add_node(const Prefix& p, int parent, bool from_init);
  void evaluate(SearchNode& n);

  const PolicyTable* policy_;
  const ValueEstimator* value_;
  ContextId context_;
  VedConfig cfg_;
  const ValidityMask* mask_;
  DistCache cache_;
  std::vector<SearchNode> nodes_;
  std::unordered_map<std::uint64_t, int> index_;
  std::vector<std::int64_t> count_;
  std::vector<double> sum_;
  std::int64_t root_visits_ = 0;
  std::vector<Sid> init_leaves_;
  SearchStats stats_;
};

struct VedResult {
  CandidateSet candidates;
  SearchStats stats;
  bool underfilled = false;
};

VedResult ved_decode(const PolicyTable& policy, const ValueEstimator& value, ContextId x, const VedConfig& cfg,
                     std::uint64_t seed, const ValidityMask* mask = nullptr);

}  // namespace vstar
