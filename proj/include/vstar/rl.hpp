#pragma once

// Group-normalised advantages (global and sibling-relative), the GRPO and
// Sibling-GRPO surrogate objectives with analytic gradients over tabular
// logits, and the joint ascent step.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vstar/core.hpp"
#include "vstar/policy.hpp"

namespace vstar {

enum class Objective { Grpo, Sibling, Joint };

const char* to_string(Objective o);
Objective parse_objective(const std::string& s);

// How J_sib is scaled: by 1/|C| as written, or by 1/(number of node terms).
enum class SibNormalization { Candidates, Nodes };

// How joint_update combines candidate sets. Mean averages every term over
// the whole batch. PerContext averages within each context and sums across
// contexts, so each context's logits take a full step regardless of how many
// other contexts share the batch.
enum class BatchReduction { Mean, PerContext };

struct RlConfig {
  double eps = 1e-6;
  double kappa = 1.0;        // weight of J_sib in the joint objective
  double kl_coeff = 1e-3;
  double learning_rate = 0.05;
  std::optional<double> clip;  // PPO-style ratio clip, off by default
  SibNormalization sib_norm = SibNormalization::Candidates;
  BatchReduction reduction = BatchReduction::PerContext;

  void validate() const;
};

// (R - mean) / (std + eps) with population std; all zero when std is 0.
std::vector<double> global_advantages(std::span<const double> rewards, double eps);

double reward_range(std::span<const double> rewards);

struct CompressionDiagnostics {
  double range = 0.0;      // Delta_R
  double sigma_r = 0.0;
  double sigma_a = 0.0;    // population std of the advantages
  double max_abs_a = 0.0;
  bool abs_bound = true;   // |A| <= Delta_R / (sigma_R + eps)
  bool eps_bound = true;   // Delta_R / (sigma_R + eps) <= Delta_R / eps
  bool sigma_bound = true; // sigma_A <= Delta_R / eps
  bool var_bound = true;   // Var[A] <= (Delta_R / eps)^2

  bool ok() const { return abs_bound && eps_bound && sigma_bound && var_bound; }
};

CompressionDiagnostics compression_diagnostics(std::span<const double> rewards, double eps);

struct SiblingGroup {
  Prefix parent;                                  // h, depth l-1
  std::vector<Token> children;                    // S(h), ascending
  std::vector<std::vector<std::size_t>> members;  // G(h, v) as candidate indices
  std::vector<double> mean_reward;                // R-bar(h, v)

  int depth() const { return parent.size() + 1; }
  std::size_t size() const;  // |G(h)|
};

// Every parent prefix present among the candidates, for depths 1..L,
// ordered by depth then parent.
std::vector<SiblingGroup> build_sibling_groups(const CandidateSet& cands);

// A_node per (group, child); 0 for single-child groups and zero-spread groups.
std::vector<std::vector<double>> sibling_advantages(const std::vector<SiblingGroup>& groups, double eps);

// pi(v | x, h) / pi_old(v | x, h) under the (optional) validity mask.
double importance_ratio(const PolicyTable& policy, const PolicyTable& snapshot, ContextId x, const Prefix& h,
                        Token v, const ValidityMask* mask = nullptr);

// Gradient over logits, keyed by (context, prefix key); deterministic order.
class SparseGrad {
 public:
  std::vector<double>& at(ContextId x, const SidSpace& space, const Prefix& p);
  void add_scaled(const SparseGrad& other, double scale);
  double norm() const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<double>* find(ContextId x, std::uint64_t key) const;
  // policy logits += scale * grad
  void apply(PolicyTable& policy, double scale) const;

 private:
  std::map<std::pair<ContextId, std::uint64_t>, std::vector<double>> entries_;
};

struct ObjectiveValue {
  double value = 0.0;
  SparseGrad grad;
};

ObjectiveValue sib_objective(const PolicyTable& policy, const PolicyTable& snapshot, const CandidateSet& cands,
                             const std::vector<SiblingGroup>& groups, const std::vector<std::vector<double>>& adv,
                             const RlConfig& cfg, const ValidityMask* mask = nullptr);

ObjectiveValue grpo_objective(const PolicyTable& policy, const PolicyTable& snapshot, const CandidateSet& cands,
                              std::span<const double> adv, const RlConfig& cfg, const ValidityMask* mask = nullptr);

// Mean over distinct touched (context, prefix) nodes of KL(pi || pi_ref).
ObjectiveValue kl_penalty(const PolicyTable& policy, const PolicyTable& reference, std::span<const CandidateSet> batch,
                          const ValidityMask* mask = nullptr);

struct UpdateStats {
  double j_grpo = 0.0;
  double j_sib = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  double grad_norm_grpo = 0.0;
  double grad_norm_sib = 0.0;
  double grad_norm_kl = 0.0;
  double grad_norm = 0.0;
  std::size_t touched_nodes = 0;
  double mean_range = 0.0;      // mean Delta_R over the batch
  double mean_sigma_a = 0.0;    // mean global sigma_A
  double mean_sib_spread = 0.0; // mean |A_node| over multi-child groups
};

// One ascent step on w_grpo*J_grpo + w_sib*kappa*J_sib - kl_coeff*KL, each
// term reduced over the batch per cfg.reduction. Candidates must carry rewards.
// The diagnostic means (range, sigma_A, spread) are always per set.
UpdateStats joint_update(PolicyTable& policy, const PolicyTable& snapshot, const PolicyTable& reference,
                         std::span<const CandidateSet> batch, const RlConfig& cfg, Objective objective,
                         const ValidityMask* mask = nullptr);

}  // namespace vstar
