#include "vstar/value.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>

#include "vstar/io.hpp"
#include "vstar/rng.hpp"

namespace vstar {

void StepRewardParams::validate(int length) const {
  if (w.size() != static_cast<std::size_t>(length)) {
    throw ConfigError("step reward weights need one entry per level (" + std::to_string(length) + ")");
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!(w[i] > 0.0)) throw ConfigError("step reward weights must be positive");
    if (i > 0 && w[i] < w[i - 1]) throw ConfigError("step reward weights must be non-decreasing");
  }
}

ValueTable::ValueTable(SidSpace space, std::size_t num_contexts, double gamma, double learning_rate)
    : space_(space), gamma_(gamma), lr_(learning_rate) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("value gamma must be in (0, 1]");
  if (!(learning_rate > 0.0 && learning_rate <= 1.0)) throw ConfigError("value learning rate must be in (0, 1]");
  if (num_contexts == 0) throw InvalidArgument("value table needs at least one context");
  tables_.assign(num_contexts, PrefixTrie<double>(space_));
  groups_.resize(num_contexts);
}

std::uint64_t ValueTable::group_key(const Prefix& ancestor, int depth) const {
  return space_.key(ancestor) * static_cast<std::uint64_t>(space_.length() + 1) + static_cast<std::uint64_t>(depth);
}

void ValueTable::store(ContextId x, const Prefix& p, double v) {
  double* old = tables_[x].find(p);
  const double delta = old ? v - *old : v;
  for (int k = 0; k < p.size(); ++k) {
    auto& g = groups_[x][group_key(p.head(k), p.size())];
    g.sum += delta;
    g.count += old ? 0 : 1;
  }
  if (old) *old = v;
  else tables_[x].insert(p, v);
}

void ValueTable::check_context(ContextId x) const {
  if (x >= tables_.size()) throw InvalidArgument("unknown context " + std::to_string(x));
}

double ValueTable::value(ContextId x, const Prefix& p) const {
  check_context(x);
  const double* v = tables_[x].find(p);
  if (v) return *v;
  if (cold_ == ColdStart::Backoff) {
    const auto& groups = groups_[x];
    for (int k = p.size() - 1; k >= 0; --k) {
      auto it = groups.find(group_key(p.head(k), p.size()));
      if (it != groups.end() && it->second.count > 0) return it->second.sum / static_cast<double>(it->second.count);
    }
  }
  return 0.0;
}

bool ValueTable::visited(ContextId x, const Prefix& p) const {
  check_context(x);
  return tables_[x].contains(p);
}

void ValueTable::set(ContextId x, const Prefix& p, double v) {
  check_context(x);
  space_.validate(p);
  if (!std::isfinite(v)) throw InvalidArgument("non-finite value");
  store(x, p, v);
}

std::size_t ValueTable::stored_nodes() const {
  std::size_t n = 0;
  for (const auto& t : tables_) n += t.size();
  return n;
}

void ValueTable::apply_residuals(std::span<const Transition> batch, std::span<const double> residuals) {
  struct Acc {
    double sum = 0.0;
    int n = 0;
  };
  std::map<std::uint64_t, Acc> acc;
  const auto n_nodes = space_.num_nodes();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_context(batch[i].context);
    auto& a = acc[batch[i].context * n_nodes + space_.key(batch[i].state)];
    a.sum += residuals[i];
    a.n += 1;
  }
  // Read every base value before writing so cold states back off to the
  // frozen table.
  std::vector<double> next;
  next.reserve(acc.size());
  for (const auto& [k, a] : acc) {
    next.push_back(value(static_cast<ContextId>(k / n_nodes), space_.prefix_of_key(k % n_nodes)) + lr_ * a.sum / a.n);
  }
  std::size_t i = 0;
  for (const auto& [k, a] : acc) store(static_cast<ContextId>(k / n_nodes), space_.prefix_of_key(k % n_nodes), next[i++]);
}

std::uint64_t ValueTable::fingerprint() const {
  std::uint64_t h = mix64(0x76616c7565ULL ^ std::bit_cast<std::uint64_t>(gamma_));
  for (std::size_t x = 0; x < tables_.size(); ++x) {
    tables_[x].for_each_sorted([&](const Prefix& p, double v) {
      h = mix64(h ^ (x * 0x9e3779b97f4a7c15ULL) ^ space_.key(p));
      h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
    });
  }
  return h;
}

void ValueTable::save(std::ostream& out) const {
  out << "vstar-value 1\n";
  out << "vocab " << space_.vocab_size() << "\n";
  out << "length " << space_.length() << "\n";
  out << "gamma " << io::hex(gamma_) << "\n";
  out << "lr " << io::hex(lr_) << "\n";
  out << "contexts " << tables_.size() << "\n";
  out << "nodes " << stored_nodes() << "\n";
  for (std::size_t x = 0; x < tables_.size(); ++x) {
    tables_[x].for_each_sorted([&](const Prefix& p, double v) {
      out << x << ' ' << (p.empty() ? std::string("-") : to_dotted(p)) << ' ' << io::hex(v) << '\n';
    });
  }
}

ValueTable ValueTable::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "vstar-value 1") throw InvalidArgument("not a vstar value file");
  const int vocab = io::parse_int<int>(io::expect_field(in, "vocab"));
  const int length = io::parse_int<int>(io::expect_field(in, "length"));
  const double gamma = io::parse_hex(io::expect_field(in, "gamma"));
  const double lr = io::parse_hex(io::expect_field(in, "lr"));
  const auto contexts = io::parse_int<std::size_t>(io::expect_field(in, "contexts"));
  const auto nodes = io::parse_int<std::size_t>(io::expect_field(in, "nodes"));
  ValueTable t(SidSpace(Vocab(vocab), length), contexts, gamma, lr);
  for (std::size_t i = 0; i < nodes; ++i) {
    if (!std::getline(in, line)) throw InvalidArgument("value file truncated");
    const auto parts = io::split_ws(line);
    if (parts.size() != 3) throw InvalidArgument("bad value row: " + line);
    const auto x = io::parse_int<ContextId>(parts[0]);
    const Prefix p = parts[1] == "-" ? Prefix{} : parse_dotted(std::string(parts[1]));
    t.set(x, p, io::parse_hex(parts[2]));
  }
  return t;
}

LinearValue::LinearValue(const Environment& env, double gamma, double learning_rate)
    : env_(env), gamma_(gamma), lr_(learning_rate), dim_(env.embed_dim()) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("value gamma must be in (0, 1]");
  if (!(learning_rate > 0.0)) throw ConfigError("value learning rate must be positive");
  params_.assign(static_cast<std::size_t>(env.space().length() + 1) * static_cast<std::size_t>(dim_ + 1), 0.0);
}

std::span<const double> LinearValue::weights(int depth) const {
  const auto stride = static_cast<std::size_t>(dim_ + 1);
  return {params_.data() + static_cast<std::size_t>(depth) * stride, stride};
}

double LinearValue::value(ContextId, const Prefix& p) const {
  const auto w = weights(p.size());
  const auto f = env_.prefix_centroid(p);
  double v = w[static_cast<std::size_t>(dim_)];
  for (int j = 0; j < dim_; ++j) v += w[static_cast<std::size_t>(j)] * f[static_cast<std::size_t>(j)];
  return v;
}

void LinearValue::apply_residuals(std::span<const Transition> batch, std::span<const double> residuals) {
  if (batch.empty()) return;
  std::vector<double> grad(params_.size(), 0.0);
  const auto stride = static_cast<std::size_t>(dim_ + 1);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto base = static_cast<std::size_t>(batch[i].state.size()) * stride;
    const auto f = env_.prefix_centroid(batch[i].state);
    for (int j = 0; j < dim_; ++j) grad[base + static_cast<std::size_t>(j)] += residuals[i] * f[static_cast<std::size_t>(j)];
    grad[base + static_cast<std::size_t>(dim_)] += residuals[i];
  }
  const double scale = lr_ / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i] += scale * grad[i];
}

OracleValue::OracleValue(const Environment& env, const PolicyTable& policy, QueryId q)
    : space_(env.space()), context_(env.context_of(q)), v_(env.space().num_nodes(), 0.0) {
  const int L = space_.length();
  for (std::uint64_t i = 0; i < space_.num_leaves(); ++i) {
    const Prefix leaf = space_.leaf_at(i);
    if (env.mask().valid(leaf)) v_[space_.key(leaf)] = env.terminal_reward(q, Sid(space_, leaf));
  }
  // Keys are depth-major, so walking them backwards visits children first.
  for (std::uint64_t k = space_.num_nodes(); k-- > 0;) {
    const Prefix p = space_.prefix_of_key(k);
    if (p.size() == L || !env.mask().valid(p)) continue;
    const auto dist = policy.next_dist(context_, p, env.mask());
    double v = 0.0;
    for (std::size_t t = 0; t < dist.size(); ++t) {
      if (dist[t] > 0.0) v += dist[t] * v_[space_.key(p.child(static_cast<Token>(t)))];
    }
    v_[k] = v;
  }
}

double OracleValue::value(ContextId x, const Prefix& p) const {
  if (x != context_) throw InvalidArgument("oracle value queried for a different context");
  return v_[space_.key(p)];
}

std::vector<const Candidate*> prefix_bucket(const CandidateSet& cands, const Prefix& p) {
  std::vector<const Candidate*> out;
  for (const auto& c : cands.entries()) {
    if (c.sid.prefix().starts_with(p)) out.push_back(&c);
  }
  return out;
}

std::vector<double> prefix_embedding(const Environment& env, const CandidateSet& cands, const Prefix& p) {
  const auto bucket = prefix_bucket(cands, p);
  if (bucket.empty()) throw EmptyBucket("no sampled candidate under prefix " + render(p));
  std::vector<double> mean(static_cast<std::size_t>(env.embed_dim()), 0.0);
  for (const Candidate* c : bucket) {
    const auto e = env.embedding(c->sid);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += e[j];
  }
  for (double& v : mean) v /= static_cast<double>(bucket.size());
  return mean;
}

double step_reward(const Environment& env, const CandidateSet& cands, const StepRewardParams& params, QueryId q,
                   const Prefix& p, StepRewardStats* stats, EmptyBucketPolicy on_empty) {
  const int l = p.size();
  if (l < 1 || l > env.space().length()) throw InvalidArgument("step reward needs depth in [1, L]");
  if (params.w.size() != static_cast<std::size_t>(env.space().length())) {
    throw ConfigError("step reward weights do not match SID length");
  }
  const double w = params.w[static_cast<std::size_t>(l) - 1];
  const Sid& star = env.truth(q);
  if (star.head(l) == p) return w;

  double cos = 0.0;
  std::vector<double> mean;
  try {
    mean = prefix_embedding(env, cands, p);
  } catch (const EmptyBucket&) {
    if (on_empty == EmptyBucketPolicy::Throw) throw;
    if (stats) ++stats->empty_buckets;
  }
  if (!mean.empty()) {
    const auto e = env.embedding(star);
    double dot = 0.0, norm = 0.0;
    for (std::size_t j = 0; j < mean.size(); ++j) {
      dot += mean[j] * e[j];
      norm += mean[j] * mean[j];
    }
    norm = std::sqrt(norm);
    cos = norm > 0.0 ? std::clamp(dot / norm, -1.0, 1.0) : 0.0;
  }
  return -w * (1.0 - cos);
}

double td_target(const ValueEstimator& value, double gamma, double reward, ContextId x,
                 const std::optional<Prefix>& next) {
  if (!next) return reward;
  return reward + gamma * value.value(x, *next);
}

std::vector<Transition> harvest_transitions(const Environment& env, const CandidateSet& cands,
                                            const StepRewardParams& params, StepRewardStats* stats) {
  const int L = env.space().length();
  std::vector<Transition> out;
  out.reserve(cands.size() * static_cast<std::size_t>(L));
  for (const auto& c : cands.entries()) {
    for (int l = 1; l <= L; ++l) {
      Transition t;
      t.context = cands.context();
      t.state = c.sid.head(l);
      t.reward = step_reward(env, cands, params, cands.query(), t.state, stats);
      if (l < L) t.next = c.sid.head(l + 1);
      out.push_back(t);
    }
  }
  return out;
}

std::vector<double> td_fit(TrainableValue& value, std::span<const Transition> batch, int sweeps) {
  if (batch.empty()) throw InvalidArgument("td_fit needs a non-empty batch");
  if (sweeps < 0) throw InvalidArgument("td_fit sweeps must be >= 0");
  for (const auto& t : batch) {
    if (t.next && t.next->size() != t.state.size() + 1) throw InvalidArgument("transition skips a level");
  }
  std::vector<double> losses;
  std::vector<double> residuals(batch.size());
  for (int s = 0; s < sweeps; ++s) {
    double sq = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& t = batch[i];
      residuals[i] = td_target(value, value.gamma(), t.reward, t.context, t.next) - value.value(t.context, t.state);
      sq += residuals[i] * residuals[i];
    }
    losses.push_back(sq / static_cast<double>(batch.size()));
    value.apply_residuals(batch, residuals);
  }
  return losses;
}

}  // namespace vstar
