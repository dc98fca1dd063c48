#include "vstar/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "vstar/rng.hpp"

namespace vstar {

namespace {

int rank_of(std::span<const Sid> list, const Sid& truth, int k) {
  if (k < 1) throw InvalidArgument("k must be positive");
  if (list.size() < static_cast<std::size_t>(k)) {
    throw InvalidArgument("ranked list has " + std::to_string(list.size()) + " entries, k = " + std::to_string(k));
  }
  for (int i = 0; i < k; ++i) {
    if (list[static_cast<std::size_t>(i)] == truth) return i + 1;
  }
  return 0;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

bool all_equal(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(), [&](double v) { return v == xs[0]; });
}

}  // namespace

double hr_at_k(std::span<const Sid> list, const Sid& truth, int k) {
  return rank_of(list, truth, k) > 0 ? 1.0 : 0.0;
}

double ndcg_at_k(std::span<const Sid> list, const Sid& truth, int k) {
  const int r = rank_of(list, truth, k);
  return r > 0 ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

double lcp_diversity(std::span<const Sid> sids) {
  if (sids.size() < 2) throw InvalidArgument("lcp_diversity needs at least two SIDs");
  const double L = static_cast<double>(sids[0].length());
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < sids.size(); ++i) {
    for (std::size_t j = i + 1; j < sids.size(); ++j) {
      total += 1.0 - static_cast<double>(lcp_len(sids[i], sids[j])) / L;
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

double max_reward(const Environment& env, QueryId q, std::span<const Sid> sids) {
  if (sids.empty()) throw InvalidArgument("max_reward of an empty set");
  double best = -INFINITY;
  for (const auto& s : sids) best = std::max(best, env.terminal_reward(q, s));
  return best;
}

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

SpearmanResult spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InvalidArgument("spearman inputs differ in length");
  if (xs.size() < 2) throw InvalidArgument("spearman needs at least two points");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (std::isnan(xs[i]) || std::isnan(ys[i])) throw InvalidArgument("spearman input contains NaN");
  }
  if (all_equal(xs) || all_equal(ys)) return {0.0, true};
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  return {std::clamp(pearson(rx, ry), -1.0, 1.0), false};
}

double prefix_reward(const CandidateSet& cands, const Prefix& p) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : cands.entries()) {
    if (!c.sid.starts_with(p)) continue;
    if (!c.reward) throw InternalError("candidate " + render(c.sid) + " has no reward");
    sum += *c.reward;
    ++n;
  }
  if (n == 0) throw EmptyBucket("no candidate under prefix " + render(p));
  return sum / static_cast<double>(n);
}

CandidateSet alignment_pool(const Environment& env, std::span<const PolicyTable* const> variants, QueryId q,
                            const AlignmentConfig& cfg) {
  if (variants.empty()) throw InvalidArgument("alignment study needs at least one policy");
  if (cfg.pool_size < 2) throw ConfigError("alignment pool size must be at least 2");
  if (!(cfg.temperature > 0.0)) throw ConfigError("alignment temperature must be positive");
  const auto& space = env.space();
  const ContextId x = env.context_of(q);
  Rng rng = make_rng(cfg.seed, "alignment", q);
  CandidateSet pool(x, q);
  const std::int64_t attempts = static_cast<std::int64_t>(cfg.max_attempts_factor) * cfg.pool_size;
  for (std::int64_t a = 0; a < attempts && pool.size() < static_cast<std::size_t>(cfg.pool_size); ++a) {
    const PolicyTable& pol = *variants[static_cast<std::size_t>(a) % variants.size()];
    Prefix p;
    while (p.size() < space.length()) {
      const auto dist = pol.next_dist(x, p, env.mask(), cfg.temperature);
      const auto t = sample_index(rng, dist);
      if (t >= dist.size()) throw InternalError("no valid continuation of " + render(p));
      p = p.child(static_cast<Token>(t));
    }
    Sid s(space, p);
    if (pool.contains(s)) continue;
    pool.add(Candidate{s, 0.0, env.terminal_reward(q, s), std::nullopt, {}});
  }
  return pool;
}

std::vector<AlignmentLevel> alignment_study(const Environment& env, std::span<const PolicyTable* const> variants,
                                            const PrefixSignal& value, std::span<const QueryId> queries,
                                            const AlignmentConfig& cfg) {
  const int L = env.space().length();
  const PolicyTable& base = *variants.front();
  std::vector<AlignmentLevel> out(static_cast<std::size_t>(L));
  std::vector<double> sum_lp(out.size(), 0.0), sum_v(out.size(), 0.0);
  for (int l = 1; l <= L; ++l) out[static_cast<std::size_t>(l - 1)].level = l;

  for (QueryId q : queries) {
    const auto pool = alignment_pool(env, variants, q, cfg);
    const ContextId x = pool.context();
    for (int l = 1; l <= L; ++l) {
      std::map<Prefix, int> seen;
      for (const auto& c : pool.entries()) seen.emplace(c.sid.head(l), 0);
      if (seen.size() < 2) continue;
      std::vector<double> lp, v, r;
      for (const auto& [p, _] : seen) {
        double logprob = 0.0;
        for (int d = 0; d < l; ++d) {
          const auto dist = base.next_dist(x, p.head(d), env.mask());
          logprob += std::log(dist[p[d]]);
        }
        lp.push_back(logprob);
        v.push_back(value(q, p));
        r.push_back(prefix_reward(pool, p));
      }
      auto& row = out[static_cast<std::size_t>(l - 1)];
      const auto a = spearman(lp, r), b = spearman(v, r);
      sum_lp[static_cast<std::size_t>(l - 1)] += a.rho;
      sum_v[static_cast<std::size_t>(l - 1)] += b.rho;
      ++row.queries;
      row.constant += a.constant || b.constant;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].queries == 0) continue;
    out[i].rho_logprob = sum_lp[i] / static_cast<double>(out[i].queries);
    out[i].rho_value = sum_v[i] / static_cast<double>(out[i].queries);
  }
  return out;
}

}  // namespace vstar
