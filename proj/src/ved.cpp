#include "vstar/ved.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace vstar {

const char* to_string(PriorityRule r) {
  switch (r) {
    case PriorityRule::Joint: return "joint";
    case PriorityRule::ValueOnly: return "value";
    case PriorityRule::EntropyOnly: return "entropy";
  }
  return "?";
}

PriorityRule parse_priority_rule(const std::string& s) {
  if (s == "joint") return PriorityRule::Joint;
  if (s == "value") return PriorityRule::ValueOnly;
  if (s == "entropy") return PriorityRule::EntropyOnly;
  throw ConfigError("unknown priority rule '" + s + "' (joint, value, entropy)");
}

void VedConfig::validate(const SidSpace& space) const {
  const auto leaves = space.num_leaves();
  if (budget < 1) throw ConfigError("ved.budget must be positive");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("ved.lambda must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("ved.beta must be >= 0");
  if (output_size < 1 || static_cast<std::uint64_t>(output_size) > leaves) {
    throw ConfigError("ved.output_size must be in [1, V^L]");
  }
  if (init_width < 1 || init_width > output_size) throw ConfigError("ved.init_width must be in [1, output_size]");
  if (traversal_cap_factor < 1) throw ConfigError("ved.traversal_cap_factor must be positive");
}

double priority(double value, std::optional<double> entropy, double lambda, PriorityRule rule) {
  if (!entropy) return value;
  switch (rule) {
    case PriorityRule::Joint: return value + lambda * *entropy;
    case PriorityRule::ValueOnly: return value;
    case PriorityRule::EntropyOnly: return *entropy;
  }
  throw InternalError("bad priority rule");
}

double ucb(double g, std::int64_t visits, std::int64_t root_visits, double beta) {
  return g + beta * std::sqrt(std::log(static_cast<double>(root_visits) + 1.0) / (static_cast<double>(visits) + 1.0));
}

std::string SearchStats::to_json(bool with_events) const {
  nlohmann::json j = {
      {"budget", budget},         {"init_cost", init_cost},   {"cost", cost},
      {"traversals", traversals}, {"expansions", expansions}, {"gated", gated},
      {"refused", refused},       {"exhausted", exhausted},   {"cap_hit", cap_hit},
      {"saturated", saturated},   {"nodes_per_depth", nodes_per_depth},
      {"from_leaves", from_leaves}, {"from_completion", from_completion}, {"from_init", from_init},
  };
  if (with_events) {
    auto ev = nlohmann::json::array();
    for (const auto& e : events) {
      ev.push_back({{"t", e.traversal},
                    {"parent", to_dotted(e.parent)},
                    {"token", e.token},
                    {"g", e.g},
                    {"g_bar", e.g_bar},
                    {"cost", e.cost_after}});
    }
    j["events"] = std::move(ev);
  }
  return j.dump();
}

SearchTree::SearchTree(const PolicyTable& policy, const ValueEstimator& value, ContextId x, const VedConfig& cfg,
                       const ValidityMask* mask)
    : policy_(&policy), value_(&value), context_(x), cfg_(cfg), mask_(mask), cache_(policy, x, mask) {
  const auto depths = static_cast<std::size_t>(policy.space().length()) + 1;
  count_.assign(depths, 0);
  sum_.assign(depths, 0.0);
}

void SearchTree::evaluate(SearchNode& n) {
  n.value = value_->value(context_, n.prefix);
  if (!std::isfinite(n.value)) throw InternalError("non-finite value at " + render(n.prefix));
  if (n.depth() < policy_->space().length()) {
    const auto& dist = cache_.get(n.prefix);
    n.entropy = entropy_of(dist);
    for (std::size_t t = 0; t < dist.size(); ++t) {
      if (dist[t] > 0.0) n.unexpanded.push_back(static_cast<Token>(t));
    }
  }
  n.g = priority(n.value, n.entropy, cfg_.lambda, cfg_.rule);
}

int SearchTree::add_node(const Prefix& p, int parent, bool from_init) {
  const int id = static_cast<int>(nodes_.size());
  SearchNode n;
  n.prefix = p;
  n.parent = parent;
  n.from_init = from_init;
  evaluate(n);
  nodes_.push_back(std::move(n));
  index_.emplace(policy_->space().key(p), id);
  if (parent >= 0) {
    auto& par = nodes_[static_cast<std::size_t>(parent)];
    const Token t = p[p.size() - 1];
    auto it = std::find(par.unexpanded.begin(), par.unexpanded.end(), t);
    if (it == par.unexpanded.end()) throw InternalError("child " + render(p) + " is not an open slot");
    par.unexpanded.erase(it);
    auto pos = std::lower_bound(par.children.begin(), par.children.end(), t, [&](int c, Token tok) {
      const auto& cp = nodes_[static_cast<std::size_t>(c)].prefix;
      return cp[cp.size() - 1] < tok;
    });
    par.children.insert(pos, id);
  }
  return id;
}

int SearchTree::find(const Prefix& p) const {
  auto it = index_.find(policy_->space().key(p));
  return it == index_.end() ? -1 : it->second;
}

double SearchTree::depth_mean(int depth) const {
  const auto d = static_cast<std::size_t>(depth);
  if (count_.at(d) == 0) throw InternalError("depth mean of an empty level");
  return sum_[d] / static_cast<double>(count_[d]);
}

bool SearchTree::saturated() const {
  return std::all_of(nodes_.begin(), nodes_.end(), [](const SearchNode& n) { return n.fully_expanded(); });
}

SearchTree SearchTree::initialize(const PolicyTable& policy, const ValueEstimator& value, ContextId x,
                                  const VedConfig& cfg, const ValidityMask* mask) {
  cfg.validate(policy.space());
  SearchTree tree(policy, value, x, cfg, mask);
  const auto levels = beam_levels(tree.cache_, cfg.init_width);
  if (tree.cache_.cost() > cfg.budget) {
    throw ConfigError("ved budget " + std::to_string(cfg.budget) + " is below the warm-start cost " +
                      std::to_string(tree.cache_.cost()));
  }
  std::vector<int> fresh;
  for (const auto& level : levels) {
    for (const auto& h : level) {
      const int parent = h.prefix.empty() ? -1 : tree.find(h.prefix.parent());
      fresh.push_back(tree.add_node(h.prefix, parent, true));
    }
  }
  for (const auto& h : levels.back()) tree.init_leaves_.emplace_back(policy.space(), h.prefix);
  tree.backprop(fresh);
  tree.stats_.budget = cfg.budget;
  tree.stats_.init_cost = tree.cache_.cost();
  tree.stats_.cost = tree.cache_.cost();
  return tree;
}

std::vector<int> SearchTree::select_path() {
  std::vector<int> path{0};
  while (true) {
    const auto& n = nodes_[static_cast<std::size_t>(path.back())];
    if (n.children.empty()) break;
    int best = -1;
    double best_u = 0.0;
    for (int c : n.children) {  // ascending token, so strict > keeps the smallest on ties
      const auto& cn = nodes_[static_cast<std::size_t>(c)];
      const double u = ucb(cn.g, cn.visits, root_visits_, cfg_.beta);
      if (best < 0 || u > best_u) {
        best = c;
        best_u = u;
      }
    }
    path.push_back(best);
  }
  for (int id : path) ++nodes_[static_cast<std::size_t>(id)].visits;
  ++root_visits_;
  return path;
}

std::vector<int> SearchTree::gated_expand(const std::vector<int>& path, Rng& rng) {
  const int L = policy_->space().length();
  std::vector<double> g_bar(count_.size(), 0.0);
  for (std::size_t d = 0; d < count_.size(); ++d) g_bar[d] = count_[d] ? sum_[d] / static_cast<double>(count_[d]) : 0.0;

  std::vector<int> fresh;
  std::vector<double> w;
  for (int id : path) {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.depth() >= L || n.fully_expanded()) continue;
    const double mean = g_bar[static_cast<std::size_t>(n.depth())];
    // Tolerate summation rounding so that a level of equal priorities passes.
    if (n.g < mean - 1e-12 * std::max(1.0, std::abs(mean))) {
      ++stats_.gated;
      continue;
    }
    if (n.depth() + 1 < L && cache_.cost() + 1 > cfg_.budget) {
      ++stats_.refused;
      stats_.exhausted = true;
      break;
    }
    const auto* dist = cache_.find(n.prefix);
    if (!dist) throw InternalError("expanding an unevaluated node");
    w.clear();
    for (Token t : n.unexpanded) w.push_back((*dist)[t]);
    const auto pick = sample_index(rng, w);
    if (pick >= w.size()) throw InternalError("no open child with positive probability");
    const Token tok = n.unexpanded[pick];
    const Prefix parent_prefix = n.prefix;
    const double parent_g = n.g;
    fresh.push_back(add_node(parent_prefix.child(tok), id, false));  // may reallocate nodes_
    ++stats_.expansions;
    stats_.events.push_back({stats_.traversals, parent_prefix, tok, parent_g, mean, cache_.cost()});
  }
  return fresh;
}

void SearchTree::backprop(const std::vector<int>& fresh) {
  for (int id : fresh) {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    const auto d = static_cast<std::size_t>(n.depth());
    ++count_[d];
    sum_[d] += n.g;
  }
}

void SearchTree::search(Rng& rng) {
  const std::int64_t cap = static_cast<std::int64_t>(cfg_.traversal_cap_factor) * cfg_.budget;
  while (cache_.cost() < cfg_.budget && !stats_.exhausted) {
    if (stats_.traversals >= cap) {
      stats_.cap_hit = true;
      break;
    }
    if (saturated()) {
      stats_.saturated = true;
      break;
    }
    const auto path = select_path();
    ++stats_.traversals;
    backprop(gated_expand(path, rng));
  }
  stats_.cost = cache_.cost();
}

CandidateSet SearchTree::extract(QueryId q) {
  const auto& space = policy_->space();
  const int L = space.length();
  const auto want = static_cast<std::size_t>(cfg_.output_size);
  const std::int64_t cost_before = cache_.cost();
  CandidateSet out(context_, q);

  auto take = [&](const Prefix& leaf, double value) {
    Candidate c = make_candidate(cache_, Sid(space, leaf));
    c.value = value;
    out.add(std::move(c));
  };

  // (a) tree leaves by value.
  std::vector<int> leaves;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].depth() == L) leaves.push_back(static_cast<int>(i));
  }
  std::sort(leaves.begin(), leaves.end(), [&](int a, int b) {
    const auto& na = nodes_[static_cast<std::size_t>(a)];
    const auto& nb = nodes_[static_cast<std::size_t>(b)];
    if (na.value != nb.value) return na.value > nb.value;
    return na.prefix < nb.prefix;
  });
  for (int id : leaves) {
    if (out.size() >= want) break;
    take(nodes_[static_cast<std::size_t>(id)].prefix, nodes_[static_cast<std::size_t>(id)].value);
    ++stats_.from_leaves;
  }

  // (b) complete high-priority depth L-1 prefixes from their cached
  // distributions, one child per prefix per round.
  if (out.size() < want) {
    std::vector<int> parents;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].depth() == L - 1) parents.push_back(static_cast<int>(i));
    }
    std::sort(parents.begin(), parents.end(), [&](int a, int b) {
      const auto& na = nodes_[static_cast<std::size_t>(a)];
      const auto& nb = nodes_[static_cast<std::size_t>(b)];
      if (na.g != nb.g) return na.g > nb.g;
      return na.prefix < nb.prefix;
    });
    std::vector<std::vector<Token>> queues;
    for (int id : parents) {
      const auto& p = nodes_[static_cast<std::size_t>(id)].prefix;
      const auto& dist = *cache_.find(p);
      std::vector<Token> order;
      for (std::size_t t = 0; t < dist.size(); ++t) {
        if (dist[t] > 0.0) order.push_back(static_cast<Token>(t));
      }
      std::stable_sort(order.begin(), order.end(), [&](Token a, Token b) { return dist[a] > dist[b]; });
      std::reverse(order.begin(), order.end());  // pop from the back
      queues.push_back(std::move(order));
    }
    bool progress = true;
    while (out.size() < want && progress) {
      progress = false;
      for (std::size_t i = 0; i < parents.size() && out.size() < want; ++i) {
        auto& qv = queues[i];
        const auto& p = nodes_[static_cast<std::size_t>(parents[i])].prefix;
        while (!qv.empty()) {
          const Prefix leaf = p.child(qv.back());
          qv.pop_back();
          if (out.contains(Sid(space, leaf))) continue;
          take(leaf, value_->value(context_, leaf));
          ++stats_.from_completion;
          progress = true;
          break;
        }
      }
    }
  }

  // (c) warm-start beam sequences.
  for (const auto& s : init_leaves_) {
    if (out.size() >= want) break;
    if (out.contains(s)) continue;
    take(s.prefix(), value_->value(context_, s.prefix()));
    ++stats_.from_init;
  }

  if (cache_.cost() != cost_before) throw InternalError("extraction computed a new distribution");
  stats_.nodes_per_depth.assign(count_.begin(), count_.end());
  stats_.cost = cache_.cost();
  return out;
}

VedResult ved_decode(const PolicyTable& policy, const ValueEstimator& value, ContextId x, const VedConfig& cfg,
                     std::uint64_t seed, const ValidityMask* mask) {
  SearchTree tree = SearchTree::initialize(policy, value, x, cfg, mask);
  Rng rng = make_rng(seed, "ved", x);
  tree.search(rng);
  VedResult r;
  r.candidates = tree.extract();
  r.stats = tree.stats();
  r.underfilled = r.candidates.size() < static_cast<std::size_t>(cfg.output_size);
  return r;
}

}  // namespace vstar
