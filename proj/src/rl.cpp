#include "vstar/rl.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace vstar {

const char* to_string(Objective o) {
  switch (o) {
    case Objective::Grpo: return "grpo";
    case Objective::Sibling: return "sibling";
    case Objective::Joint: return "joint";
  }
  return "?";
}

Objective parse_objective(const std::string& s) {
  if (s == "grpo") return Objective::Grpo;
  if (s == "sibling") return Objective::Sibling;
  if (s == "joint") return Objective::Joint;
  throw ConfigError("unknown objective '" + s + "' (grpo, sibling, joint)");
}

void RlConfig::validate() const {
  if (!(eps > 0.0)) throw ConfigError("rl.eps must be positive");
  if (!(kappa >= 0.0)) throw ConfigError("rl.kappa must be >= 0");
  if (!(kl_coeff >= 0.0)) throw ConfigError("rl.kl_coeff must be >= 0");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("rl.learning_rate must be >= 0");
  if (clip && !(*clip > 0.0)) throw ConfigError("rl.clip must be positive when set");
}

namespace {

struct Moments {
  double mean = 0.0;
  double sd = 0.0;
};

Moments moments(std::span<const double> v) {
  Moments m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m.mean) * (x - m.mean);
  m.sd = std::sqrt(var / static_cast<double>(v.size()));
  return m;
}

std::vector<double> normalise(std::span<const double> v, double eps) {
  std::vector<double> out(v.size(), 0.0);
  if (v.size() < 2) return out;
  // Exactly equal rewards give zero spread; the rounding in the mean would
  // otherwise leave tiny residuals amplified by 1/eps.
  if (std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; })) return out;
  const auto m = moments(v);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - m.mean) / (m.sd + eps);
  return out;
}

}  // namespace

std::vector<double> global_advantages(std::span<const double> rewards, double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("eps must be positive");
  return normalise(rewards, eps);
}

double reward_range(std::span<const double> rewards) {
  if (rewards.empty()) throw InvalidArgument("reward_range of an empty group");
  const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  return *hi - *lo;
}

CompressionDiagnostics compression_diagnostics(std::span<const double> rewards, double eps) {
  CompressionDiagnostics d;
  d.range = reward_range(rewards);
  d.sigma_r = moments(rewards).sd;
  const auto a = global_advantages(rewards, eps);
  d.sigma_a = moments(a).sd;
  for (double x : a) d.max_abs_a = std::max(d.max_abs_a, std::abs(x));
  const double local = d.range / (d.sigma_r + eps);
  const double global = d.range / eps;
  d.abs_bound = d.max_abs_a <= local;
  d.eps_bound = local <= global;
  d.sigma_bound = d.sigma_a <= global;
  d.var_bound = d.sigma_a * d.sigma_a <= global * global;
  return d;
}

std::size_t SiblingGroup::size() const {
  std::size_t n = 0;
  for (const auto& m : members) n += m.size();
  return n;
}

std::vector<SiblingGroup> build_sibling_groups(const CandidateSet& cands) {
  std::vector<SiblingGroup> out;
  if (cands.empty()) return out;
  const auto rewards = cands.rewards();
  const int L = cands[0].sid.length();
  for (int l = 1; l <= L; ++l) {
    std::map<Prefix, std::map<Token, std::vector<std::size_t>>> by_parent;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const Sid& y = cands[i].sid;
      by_parent[y.head(l - 1)][y[l - 1]].push_back(i);
    }
    for (auto& [h, kids] : by_parent) {
      SiblingGroup g;
      g.parent = h;
      for (auto& [v, members] : kids) {
        double sum = 0.0;
        for (auto i : members) sum += rewards[i];
        g.children.push_back(v);
        g.mean_reward.push_back(sum / static_cast<double>(members.size()));
        g.members.push_back(std::move(members));
      }
      out.push_back(std::move(g));
    }
  }
  return out;
}

std::vector<std::vector<double>> sibling_advantages(const std::vector<SiblingGroup>& groups, double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("eps must be positive");
  std::vector<std::vector<double>> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(normalise(g.mean_reward, eps));
  return out;
}

namespace {

std::vector<double> dist_of(const PolicyTable& p, ContextId x, const Prefix& h, const ValidityMask* mask) {
  return mask ? p.next_dist(x, h, *mask) : p.next_dist(x, h);
}

// d log pi(v) / d z = (onehot_v - pi) / T, accumulated with weight w.
void add_logprob_grad(std::vector<double>& g, const std::vector<double>& pi, Token v, double w, double temp) {
  for (std::size_t u = 0; u < pi.size(); ++u) g[u] -= w * pi[u] / temp;
  g[v] += w / temp;
}

// Surrogate for one (x, h, v) term: returns its value and the weight on
// d log pi(v)/dz (zero when the clip is active).
std::pair<double, double> surrogate(double ratio, double adv, const std::optional<double>& clip) {
  if (!clip) return {ratio * adv, ratio * adv};
  const double clipped = std::clamp(ratio, 1.0 - *clip, 1.0 + *clip);
  const double a = ratio * adv, b = clipped * adv;
  if (a <= b) return {a, a};
  return {b, 0.0};
}

}  // namespace

double importance_ratio(const PolicyTable& policy, const PolicyTable& snapshot, ContextId x, const Prefix& h, Token v,
                        const ValidityMask* mask) {
  const double old = dist_of(snapshot, x, h, mask).at(v);
  if (!(old > 0.0)) throw DegenerateRatio("behaviour probability of " + render(h.child(v)) + " is zero");
  return dist_of(policy, x, h, mask)[v] / old;
}

std::vector<double>& SparseGrad::at(ContextId x, const SidSpace& space, const Prefix& p) {
  auto& g = entries_[{x, space.key(p)}];
  if (g.empty()) g.assign(static_cast<std::size_t>(space.vocab_size()), 0.0);
  return g;
}

void SparseGrad::add_scaled(const SparseGrad& other, double scale) {
  for (const auto& [k, v] : other.entries_) {
    auto& g = entries_[k];
    if (g.empty()) g.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) g[i] += scale * v[i];
  }
}

double SparseGrad::norm() const {
  double s = 0.0;
  for (const auto& [_, v] : entries_)
    for (double x : v) s += x * x;
  return std::sqrt(s);
}

const std::vector<double>* SparseGrad::find(ContextId x, std::uint64_t key) const {
  auto it = entries_.find({x, key});
  return it == entries_.end() ? nullptr : &it->second;
}

void SparseGrad::apply(PolicyTable& policy, double scale) const {
  if (scale == 0.0) return;
  for (const auto& [k, v] : entries_) {
    auto& l = policy.mutable_logits(k.first, policy.space().prefix_of_key(k.second));
    for (std::size_t i = 0; i < v.size(); ++i) l[i] += scale * v[i];
  }
}

ObjectiveValue sib_objective(const PolicyTable& policy, const PolicyTable& snapshot, const CandidateSet& cands,
                             const std::vector<SiblingGroup>& groups, const std::vector<std::vector<double>>& adv,
                             const RlConfig& cfg, const ValidityMask* mask) {
  ObjectiveValue out;
  if (cands.empty()) return out;
  if (adv.size() != groups.size()) throw InvalidArgument("sibling advantages do not match the groups");
  const ContextId x = cands.context();
  const double temp = policy.temperature();
  std::size_t terms = 0;
  for (const auto& g : groups) terms += g.children.size();
  const double scale = cfg.sib_norm == SibNormalization::Candidates ? 1.0 / static_cast<double>(cands.size())
                                                                    : 1.0 / static_cast<double>(terms);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    if (std::all_of(adv[gi].begin(), adv[gi].end(), [](double a) { return a == 0.0; })) continue;
    const auto pi = dist_of(policy, x, g.parent, mask);
    const auto old = dist_of(snapshot, x, g.parent, mask);
    auto* grad = &out.grad.at(x, policy.space(), g.parent);
    for (std::size_t ci = 0; ci < g.children.size(); ++ci) {
      const Token v = g.children[ci];
      if (!(old[v] > 0.0)) throw DegenerateRatio("behaviour probability of " + render(g.parent.child(v)) + " is zero");
      const auto [val, w] = surrogate(pi[v] / old[v], adv[gi][ci], cfg.clip);
      out.value += scale * val;
      add_logprob_grad(*grad, pi, v, scale * w, temp);
    }
  }
  return out;
}

ObjectiveValue grpo_objective(const PolicyTable& policy, const PolicyTable& snapshot, const CandidateSet& cands,
                              std::span<const double> adv, const RlConfig& cfg, const ValidityMask* mask) {
  ObjectiveValue out;
  if (cands.empty()) return out;
  if (adv.size() != cands.size()) throw InvalidArgument("advantages do not match the candidates");
  const ContextId x = cands.context();
  const double temp = policy.temperature();
  const int L = cands[0].sid.length();
  const double scale = 1.0 / (static_cast<double>(cands.size()) * L);
  std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>> dists;
  const auto& space = policy.space();
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (adv[i] == 0.0) continue;
    const Sid& y = cands[i].sid;
    for (int l = 0; l < L; ++l) {
      const Prefix h = y.head(l);
      auto it = dists.find(space.key(h));
      if (it == dists.end()) {
        it = dists.emplace(space.key(h), std::make_pair(dist_of(policy, x, h, mask), dist_of(snapshot, x, h, mask))).first;
      }
      const auto& [pi, old] = it->second;
      const Token v = y[l];
      if (!(old[v] > 0.0)) throw DegenerateRatio("behaviour probability of " + render(h.child(v)) + " is zero");
      const auto [val, w] = surrogate(pi[v] / old[v], adv[i], cfg.clip);
      out.value += scale * val;
      add_logprob_grad(out.grad.at(x, space, h), pi, v, scale * w, temp);
    }
  }
  return out;
}

ObjectiveValue kl_penalty(const PolicyTable& policy, const PolicyTable& reference, std::span<const CandidateSet> batch,
                          const ValidityMask* mask) {
  ObjectiveValue out;
  std::set<std::pair<ContextId, std::uint64_t>> nodes;
  const auto& space = policy.space();
  for (const auto& set : batch) {
    for (const auto& c : set.entries()) {
      for (int l = 0; l < c.sid.length(); ++l) nodes.insert({set.context(), space.key(c.sid.head(l))});
    }
  }
  if (nodes.empty()) return out;
  const double scale = 1.0 / static_cast<double>(nodes.size());
  const double temp = policy.temperature();
  for (const auto& [x, key] : nodes) {
    const Prefix h = space.prefix_of_key(key);
    const auto pi = dist_of(policy, x, h, mask);
    const auto ref = dist_of(reference, x, h, mask);
    double kl = 0.0;
    std::vector<double> logratio(pi.size(), 0.0);
    for (std::size_t u = 0; u < pi.size(); ++u) {
      if (pi[u] <= 0.0) continue;
      if (!(ref[u] > 0.0)) throw DegenerateRatio("reference assigns zero probability where the policy does not");
      logratio[u] = std::log(pi[u] / ref[u]);
      kl += pi[u] * logratio[u];
    }
    out.value += scale * kl;
    // d KL / d z_u = pi_u (log(pi_u / ref_u) - KL) / T
    auto& g = out.grad.at(x, space, h);
    for (std::size_t u = 0; u < pi.size(); ++u) g[u] += scale * pi[u] * (logratio[u] - kl) / temp;
  }
  return out;
}

UpdateStats joint_update(PolicyTable& policy, const PolicyTable& snapshot, const PolicyTable& reference,
                         std::span<const CandidateSet> batch, const RlConfig& cfg, Objective objective,
                         const ValidityMask* mask) {
  cfg.validate();
  UpdateStats st;
  if (batch.empty()) return st;
  const double w_grpo = objective == Objective::Sibling ? 0.0 : 1.0;
  const double w_sib = objective == Objective::Grpo ? 0.0 : cfg.kappa;
  const double per_set = 1.0 / static_cast<double>(batch.size());

  // Weight of each set in the reduced objective, and the KL groups.
  std::map<ContextId, std::vector<std::size_t>> by_context;
  for (std::size_t i = 0; i < batch.size(); ++i) by_context[batch[i].context()].push_back(i);
  std::vector<double> weight(batch.size(), per_set);
  if (cfg.reduction == BatchReduction::PerContext) {
    for (const auto& [x, idx] : by_context) {
      for (auto i : idx) weight[i] = 1.0 / static_cast<double>(idx.size());
    }
  }

  SparseGrad g_grpo, g_sib;
  std::size_t spread_n = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& set = batch[i];
    const auto rewards = set.rewards();
    const auto diag = compression_diagnostics(rewards, cfg.eps);
    st.mean_range += per_set * diag.range;
    st.mean_sigma_a += per_set * diag.sigma_a;
    const auto groups = build_sibling_groups(set);
    const auto node_adv = sibling_advantages(groups, cfg.eps);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      if (groups[gi].children.size() < 2) continue;
      for (double a : node_adv[gi]) st.mean_sib_spread += std::abs(a);
      spread_n += node_adv[gi].size();
    }
    if (w_grpo != 0.0) {
      const auto adv = global_advantages(rewards, cfg.eps);
      auto j = grpo_objective(policy, snapshot, set, adv, cfg, mask);
      st.j_grpo += weight[i] * j.value;
      g_grpo.add_scaled(j.grad, weight[i]);
    }
    if (w_sib != 0.0) {
      auto j = sib_objective(policy, snapshot, set, groups, node_adv, cfg, mask);
      st.j_sib += weight[i] * j.value;
      g_sib.add_scaled(j.grad, weight[i]);
    }
  }
  if (spread_n) st.mean_sib_spread /= static_cast<double>(spread_n);

  SparseGrad total;
  total.add_scaled(g_grpo, w_grpo);
  total.add_scaled(g_sib, w_sib);
  if (cfg.kl_coeff > 0.0) {
    SparseGrad g_kl;
    if (cfg.reduction == BatchReduction::PerContext) {
      for (const auto& [x, idx] : by_context) {
        std::vector<CandidateSet> sub;
        sub.reserve(idx.size());
        for (auto i : idx) sub.push_back(batch[i]);
        auto kl = kl_penalty(policy, reference, sub, mask);
        st.kl += kl.value;
        g_kl.add_scaled(kl.grad, 1.0);
      }
    } else {
      auto kl = kl_penalty(policy, reference, batch, mask);
      st.kl = kl.value;
      g_kl = std::move(kl.grad);
    }
    st.grad_norm_kl = g_kl.norm();
    total.add_scaled(g_kl, -cfg.kl_coeff);
  }
  st.grad_norm_grpo = g_grpo.norm();
  st.grad_norm_sib = g_sib.norm();
  st.grad_norm = total.norm();
  st.touched_nodes = total.size();
  st.objective = w_grpo * st.j_grpo + w_sib * st.j_sib - cfg.kl_coeff * st.kl;
  total.apply(policy, cfg.learning_rate);
  return st;
}

}  // namespace vstar
