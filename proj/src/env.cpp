#include "vstar/env.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include "vstar/io.hpp"
#include "vstar/rng.hpp"

namespace vstar {

void EnvSizes::validate() const {
  if (vocab < 2 || vocab > 32) throw ConfigError("env.vocab must be in [2, 32]");
  if (length < 1 || length > 4) throw ConfigError("env.length must be in [1, 4]");
  if (std::pow(static_cast<double>(vocab), length) > 1.1e6) throw ConfigError("env: V^L too large for desk scale");
  if (embed_dim < 1 || embed_dim > 512) throw ConfigError("env.embed_dim must be in [1, 512]");
  if (contexts < 1) throw ConfigError("env.contexts must be positive");
  if (queries < 1 || queries > 100000) throw ConfigError("env.queries must be in [1, 100000]");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("env.heldout_fraction must be in [0, 1)");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("env.alpha must be in [0, 1]");
  if (embedding_scales.size() != static_cast<std::size_t>(length)) {
    throw ConfigError("env.embedding_scales needs one entry per level");
  }
  for (std::size_t i = 0; i < embedding_scales.size(); ++i) {
    if (!(embedding_scales[i] > 0.0)) throw ConfigError("env.embedding_scales must be positive");
    if (i > 0 && embedding_scales[i] > embedding_scales[i - 1]) {
      throw ConfigError("env.embedding_scales must be non-increasing with depth");
    }
  }
  if (log_samples < 0) throw ConfigError("env.log_samples must be >= 0");
  if (!(smoothing > 0.0)) throw ConfigError("env.smoothing must be positive");
  if (!(popularity_exponent >= 0.0)) throw ConfigError("env.popularity_exponent must be >= 0");
  if (!(target_concentration >= 0.0 && target_concentration <= 1.0)) {
    throw ConfigError("env.target_concentration must be in [0, 1]");
  }
  if (!(valid_fraction > 0.0 && valid_fraction <= 1.0)) throw ConfigError("env.valid_fraction must be in (0, 1]");
}

void MisalignmentSpec::validate() const {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("misalignment.fraction must be in [0, 1]");
  if (!(quantile > 0.0 && quantile < 1.0)) throw ConfigError("misalignment.quantile must be in (0, 1)");
}

Environment::Environment(SidSpace space, int dim) : space_(space), dim_(dim), mask_(space) {}

void Environment::check_query(QueryId q) const {
  if (q >= truth_.size()) throw InvalidArgument("unknown query " + std::to_string(q));
}

ContextId Environment::context_of(QueryId q) const {
  check_query(q);
  return query_context_[q];
}

const Sid& Environment::truth(QueryId q) const {
  check_query(q);
  return truth_[q];
}

const Sid& Environment::anchor(ContextId x) const {
  if (x >= anchors_.size()) throw InvalidArgument("unknown context " + std::to_string(x));
  return anchors_[x];
}

bool Environment::planted(ContextId x) const {
  if (x >= planted_.size()) throw InvalidArgument("unknown context " + std::to_string(x));
  return planted_[x];
}

std::span<const double> Environment::embedding(const Sid& s) const {
  const auto i = space_.leaf_index(s.prefix());
  return {embeddings_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
}

std::span<const double> Environment::prefix_centroid(const Prefix& p) const {
  space_.validate(p);
  const auto k = space_.key(p);
  return {centroids_.data() + k * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
}

double Environment::cosine(const Sid& a, const Sid& b) const {
  const auto ea = embedding(a), eb = embedding(b);
  return std::inner_product(ea.begin(), ea.end(), eb.begin(), 0.0);
}

double Environment::terminal_reward(QueryId q, const Sid& y) const {
  check_query(q);
  const Sid& star = truth_[q];
  if (y == star) return 1.0;
  return alpha_ * std::max(0.0, cosine(y, star));
}

void Environment::build_centroids() {
  const auto d = static_cast<std::size_t>(dim_);
  centroids_.assign(space_.num_nodes() * d, 0.0);
  for (std::uint64_t i = 0; i < space_.num_leaves(); ++i) {
    const Prefix leaf = space_.leaf_at(i);
    if (!mask_.valid(leaf)) continue;
    const double* e = embeddings_.data() + i * d;
    for (int depth = 0; depth <= space_.length(); ++depth) {
      double* c = centroids_.data() + space_.key(leaf.head(depth)) * d;
      for (std::size_t j = 0; j < d; ++j) c[j] += e[j];
    }
  }
  for (std::uint64_t k = 0; k < space_.num_nodes(); ++k) {
    double* c = centroids_.data() + k * d;
    double n = 0.0;
    for (std::size_t j = 0; j < d; ++j) n += c[j] * c[j];
    n = std::sqrt(n);
    if (n > 0.0)
      for (std::size_t j = 0; j < d; ++j) c[j] /= n;
  }
}

struct EnvBuilder {
  static Environment make(const SidSpace& space, int dim) { return Environment(space, dim); }

  // Deterministic per-node popularity: Zipf weights over a node-specific
  // random permutation of the tokens.
  static std::vector<double> popularity(std::uint64_t seed, ContextId x, std::uint64_t key, int vocab,
                                        double exponent) {
    Rng rng(substream_seed(seed, "popularity", (static_cast<std::uint64_t>(x) << 32) ^ key));
    std::vector<int> perm(static_cast<std::size_t>(vocab));
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> w(static_cast<std::size_t>(vocab));
    for (int r = 0; r < vocab; ++r) {
      w[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])] = 1.0 / std::pow(r + 1.0, exponent);
    }
    return w;
  }

  static GeneratedEnv generate(const MisalignmentSpec& spec, const EnvSizes& sizes) {
    spec.validate();
    sizes.validate();
    const SidSpace space(Vocab(sizes.vocab), sizes.length);
    const int vocab = sizes.vocab, length = sizes.length;
    const auto d = static_cast<std::size_t>(sizes.embed_dim);
    Environment env(space, sizes.embed_dim);
    env.alpha_ = sizes.alpha;
    env.seed_ = spec.seed;
    env.spec_ = spec;

    // Hierarchical Gaussian embeddings.
    {
      Rng rng = make_rng(spec.seed, "embeddings");
      std::vector<double> level{0.0};
      level.assign(d, 0.0);  // root vector
      for (int depth = 1; depth <= length; ++depth) {
        const auto parents = space.nodes_at_depth(depth - 1);
        std::vector<double> next(parents * static_cast<std::uint64_t>(vocab) * d);
        const double s = sizes.embedding_scales[static_cast<std::size_t>(depth) - 1];
        for (std::uint64_t p = 0; p < parents; ++p) {
          for (int v = 0; v < vocab; ++v) {
            const auto idx = p * static_cast<std::uint64_t>(vocab) + static_cast<std::uint64_t>(v);
            for (std::size_t j = 0; j < d; ++j) next[idx * d + j] = level[p * d + j] + s * standard_normal(rng);
          }
        }
        level = std::move(next);
      }
      for (std::uint64_t i = 0; i < space.num_leaves(); ++i) {
        double n = 0.0;
        for (std::size_t j = 0; j < d; ++j) n += level[i * d + j] * level[i * d + j];
        n = std::sqrt(n);
        for (std::size_t j = 0; j < d; ++j) level[i * d + j] /= n;
      }
      env.embeddings_ = std::move(level);
    }

    if (sizes.valid_fraction < 1.0) {
      Rng rng = make_rng(spec.seed, "mask");
      std::vector<bool> flags(space.num_leaves());
      std::size_t n_valid = 0;
      for (std::uint64_t i = 0; i < space.num_leaves(); ++i) {
        flags[i] = uniform01(rng) < sizes.valid_fraction;
        n_valid += flags[i];
      }
      if (n_valid == 0) throw ConfigError("env: validity mask left no valid items");
      env.mask_ = ValidityMask(space, std::move(flags));
    }
    env.build_centroids();

    // Maximum-likelihood (additively smoothed) fit to logs sampled from the
    // planted popularity distribution.
    const auto n_ctx = static_cast<std::size_t>(sizes.contexts);
    PolicyTable policy(space, n_ctx);
    {
      Rng rng = make_rng(spec.seed, "logs");
      std::vector<double> w;
      for (ContextId x = 0; x < n_ctx; ++x) {
        std::unordered_map<std::uint64_t, std::vector<double>> counts;
        for (int s = 0; s < sizes.log_samples; ++s) {
          Prefix p;
          for (int depth = 0; depth < length; ++depth) {
            w = popularity(spec.seed, x, space.key(p), vocab, sizes.popularity_exponent);
            for (int v = 0; v < vocab; ++v) {
              if (!env.mask_.valid(p.child(static_cast<Token>(v)))) w[static_cast<std::size_t>(v)] = 0.0;
            }
            const auto v = sample_index(rng, w);
            auto& c = counts[space.key(p)];
            if (c.empty()) c.assign(static_cast<std::size_t>(vocab), 0.0);
            c[v] += 1.0;
            p = p.child(static_cast<Token>(v));
          }
        }
        std::vector<std::uint64_t> keys;
        for (const auto& [k, _] : counts) keys.push_back(k);
        std::sort(keys.begin(), keys.end());
        for (auto k : keys) {
          auto& l = policy.mutable_logits(x, space.prefix_of_key(k));
          const auto& c = counts[k];
          for (int v = 0; v < vocab; ++v) {
            l[static_cast<std::size_t>(v)] = std::log(c[static_cast<std::size_t>(v)] + sizes.smoothing);
          }
        }
      }
    }

    // Anchors: planted contexts get a first token from the bottom quantile.
    {
      Rng rng = make_rng(spec.seed, "anchors");
      std::vector<ContextId> order(n_ctx);
      std::iota(order.begin(), order.end(), 0);
      shuffle(order.begin(), order.end(), rng);
      const auto n_planted = static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(n_ctx)));
      env.planted_.assign(n_ctx, false);
      for (std::size_t i = 0; i < n_planted; ++i) env.planted_[order[i]] = true;

      for (ContextId x = 0; x < n_ctx; ++x) {
        const auto dist = policy.next_dist(x, Prefix{}, env.mask_);
        std::vector<int> valid_tokens;
        for (int v = 0; v < vocab; ++v) {
          if (env.mask_.valid(Prefix{v})) valid_tokens.push_back(v);
        }
        // Ascending probability; ties put the larger token id lower.
        std::sort(valid_tokens.begin(), valid_tokens.end(), [&](int a, int b) {
          const double pa = dist[static_cast<std::size_t>(a)], pb = dist[static_cast<std::size_t>(b)];
          if (pa != pb) return pa < pb;
          return a > b;
        });
        const auto n_valid = valid_tokens.size();
        const auto bottom = static_cast<std::size_t>(std::floor(spec.quantile * static_cast<double>(n_valid) + 1e-9));
        if (env.planted_[x] && bottom == 0) {
          throw ConfigError("misalignment infeasible: the bottom " + io::dec(spec.quantile) +
                            " quantile of " + std::to_string(n_valid) + " first tokens is empty");
        }
        if (!env.planted_[x] && bottom == n_valid) {
          throw ConfigError("misalignment infeasible: no first token above the bottom quantile");
        }
        std::vector<double> w(static_cast<std::size_t>(vocab), 0.0);
        if (env.planted_[x]) {
          for (std::size_t r = 0; r < bottom; ++r) w[static_cast<std::size_t>(valid_tokens[r])] = 1.0;
        } else {
          for (std::size_t r = bottom; r < n_valid; ++r) {
            const auto v = static_cast<std::size_t>(valid_tokens[r]);
            w[v] = dist[v];
          }
        }
        Prefix p{static_cast<int>(sample_index(rng, w))};
        while (p.size() < length) {
          const auto next = policy.next_dist(x, p, env.mask_);
          p = p.child(static_cast<Token>(sample_index(rng, next)));
        }
        env.anchors_.emplace_back(space, p);
      }
    }

    // Queries: truth is the anchor or, otherwise, a valid sibling of it.
    {
      Rng rng = make_rng(spec.seed, "queries");
      const auto n_q = static_cast<std::size_t>(sizes.queries);
      for (std::size_t q = 0; q < n_q; ++q) {
        const auto x = static_cast<ContextId>(q % n_ctx);
        env.query_context_.push_back(x);
        const Sid& a = env.anchors_[x];
        Sid t = a;
        if (uniform01(rng) >= sizes.target_concentration) {
          const Prefix parent = a.head(length - 1);
          std::vector<Token> sib;
          for (int v = 0; v < vocab; ++v) {
            const Prefix leaf = parent.child(static_cast<Token>(v));
            if (v != a[length - 1] && env.mask_.valid(leaf)) sib.push_back(static_cast<Token>(v));
          }
          if (!sib.empty()) t = Sid(space, parent.child(sib[rng() % sib.size()]));
        }
        env.truth_.push_back(t);
      }
      std::vector<QueryId> ids(n_q);
      std::iota(ids.begin(), ids.end(), 0);
      shuffle(ids.begin(), ids.end(), rng);
      const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n_q) * (1.0 - sizes.heldout_fraction)));
      env.train_.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
      env.heldout_.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
      std::sort(env.train_.begin(), env.train_.end());
      std::sort(env.heldout_.begin(), env.heldout_.end());
    }
    return GeneratedEnv{std::move(env), std::move(policy)};
  }
};

GeneratedEnv generate(const MisalignmentSpec& spec, const EnvSizes& sizes) {
  return EnvBuilder::generate(spec, sizes);
}

void Environment::save(std::ostream& out) const {
  out << "vstar-env 1\n";
  out << "vocab " << space_.vocab_size() << "\n";
  out << "length " << space_.length() << "\n";
  out << "dim " << dim_ << "\n";
  out << "seed " << seed_ << "\n";
  out << "alpha " << io::hex(alpha_) << "\n";
  out << "fraction " << io::hex(spec_.fraction) << "\n";
  out << "quantile " << io::hex(spec_.quantile) << "\n";
  out << "contexts " << anchors_.size() << "\n";
  for (std::size_t x = 0; x < anchors_.size(); ++x) {
    out << x << ' ' << to_dotted(anchors_[x].prefix()) << ' ' << (planted_[x] ? 1 : 0) << '\n';
  }
  out << "queries " << truth_.size() << "\n";
  std::vector<char> split(truth_.size(), 't');
  for (auto q : heldout_) split[q] = 'h';
  for (std::size_t q = 0; q < truth_.size(); ++q) {
    out << q << ' ' << query_context_[q] << ' ' << to_dotted(truth_[q].prefix()) << ' ' << split[q] << '\n';
  }
  if (mask_.all_valid()) {
    out << "mask all\n";
  } else {
    std::string bits;
    for (bool b : mask_.leaf_flags()) bits += b ? '1' : '0';
    out << "mask " << bits << "\n";
  }
  out << "embeddings " << space_.num_leaves() << "\n";
  const auto d = static_cast<std::size_t>(dim_);
  for (std::uint64_t i = 0; i < space_.num_leaves(); ++i) {
    out << to_dotted(space_.leaf_at(i));
    for (std::size_t j = 0; j < d; ++j) out << ' ' << io::hex(embeddings_[i * d + j]);
    out << '\n';
  }
}

Environment Environment::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "vstar-env 1") throw InvalidArgument("not a vstar environment file");
  const int vocab = io::parse_int<int>(io::expect_field(in, "vocab"));
  const int length = io::parse_int<int>(io::expect_field(in, "length"));
  const int dim = io::parse_int<int>(io::expect_field(in, "dim"));
  const SidSpace space(Vocab(vocab), length);
  Environment env(space, dim);
  env.seed_ = io::parse_int<std::uint64_t>(io::expect_field(in, "seed"));
  env.alpha_ = io::parse_hex(io::expect_field(in, "alpha"));
  env.spec_.fraction = io::parse_hex(io::expect_field(in, "fraction"));
  env.spec_.quantile = io::parse_hex(io::expect_field(in, "quantile"));
  env.spec_.seed = env.seed_;
  const auto n_ctx = io::parse_int<std::size_t>(io::expect_field(in, "contexts"));
  for (std::size_t x = 0; x < n_ctx; ++x) {
    if (!std::getline(in, line)) throw InvalidArgument("environment file truncated (contexts)");
    const auto parts = io::split_ws(line);
    if (parts.size() != 3 || io::parse_int<std::size_t>(parts[0]) != x) throw InvalidArgument("bad context row: " + line);
    env.anchors_.emplace_back(space, parse_dotted(std::string(parts[1])));
    env.planted_.push_back(parts[2] == "1");
  }
  const auto n_q = io::parse_int<std::size_t>(io::expect_field(in, "queries"));
  for (std::size_t q = 0; q < n_q; ++q) {
    if (!std::getline(in, line)) throw InvalidArgument("environment file truncated (queries)");
    const auto parts = io::split_ws(line);
    if (parts.size() != 4 || io::parse_int<std::size_t>(parts[0]) != q) throw InvalidArgument("bad query row: " + line);
    const auto x = io::parse_int<ContextId>(parts[1]);
    if (x >= n_ctx) throw InvalidArgument("query references unknown context");
    env.query_context_.push_back(x);
    env.truth_.emplace_back(space, parse_dotted(std::string(parts[2])));
    (parts[3] == "h" ? env.heldout_ : env.train_).push_back(static_cast<QueryId>(q));
  }
  const std::string mask = io::expect_field(in, "mask");
  if (mask != "all") {
    if (mask.size() != space.num_leaves()) throw InvalidArgument("mask length mismatch");
    std::vector<bool> flags(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) flags[i] = mask[i] == '1';
    env.mask_ = ValidityMask(space, std::move(flags));
  }
  const auto n_leaves = io::parse_int<std::uint64_t>(io::expect_field(in, "embeddings"));
  if (n_leaves != space.num_leaves()) throw InvalidArgument("embedding count mismatch");
  const auto d = static_cast<std::size_t>(dim);
  env.embeddings_.resize(n_leaves * d);
  for (std::uint64_t i = 0; i < n_leaves; ++i) {
    if (!std::getline(in, line)) throw InvalidArgument("environment file truncated (embeddings)");
    const auto parts = io::split_ws(line);
    if (parts.size() != d + 1) throw InvalidArgument("bad embedding row");
    for (std::size_t j = 0; j < d; ++j) env.embeddings_[i * d + j] = io::parse_hex(parts[j + 1]);
  }
  env.build_centroids();
  return env;
}

int first_token_rank(const PolicyTable& policy, const ValidityMask& mask, ContextId x, Token v) {
  const auto dist = policy.next_dist(x, Prefix{}, mask);
  int rank = 1;
  for (std::size_t u = 0; u < dist.size(); ++u) {
    if (u == v || !mask.valid(Prefix{static_cast<int>(u)})) continue;
    // Ties rank the smaller token id higher, matching the generator.
    if (dist[u] > dist[v] || (dist[u] == dist[v] && u < v)) ++rank;
  }
  return rank;
}

MisalignmentAudit audit_misalignment(const Environment& env, const PolicyTable& policy, double quantile) {
  MisalignmentAudit a;
  const auto& space = env.space();
  int n_valid = 0;
  for (int v = 0; v < space.vocab_size(); ++v) n_valid += env.mask().valid(Prefix{v});
  const int bottom = static_cast<int>(std::floor(quantile * n_valid + 1e-9));
  std::vector<int> rank(env.num_contexts());
  a.contexts = env.num_contexts();
  for (ContextId x = 0; x < env.num_contexts(); ++x) {
    rank[x] = first_token_rank(policy, env.mask(), x, env.anchor(x)[0]);
    a.planted_contexts += rank[x] > n_valid - bottom;
  }
  a.queries = env.num_queries();
  for (QueryId q = 0; q < env.num_queries(); ++q) {
    const ContextId x = env.context_of(q);
    const int r = env.truth(q)[0] == env.anchor(x)[0]
                      ? rank[x]
                      : first_token_rank(policy, env.mask(), x, env.truth(q)[0]);
    a.planted_queries += r > n_valid - bottom;
  }
  a.fraction = a.queries ? static_cast<double>(a.planted_queries) / static_cast<double>(a.queries) : 0.0;
  return a;
}

std::vector<double> embedding_similarity_profile(const Environment& env) {
  const auto& space = env.space();
  const int length = space.length();
  const auto d = static_cast<std::size_t>(env.embed_dim());
  // For each depth, sum over groups of sum_{i != j in group} <e_i, e_j> and
  // the number of ordered pairs; these count pairs with lcp >= depth.
  std::vector<double> dot_ge(static_cast<std::size_t>(length) + 1, 0.0), pairs_ge(dot_ge.size(), 0.0);
  for (int depth = 0; depth <= length; ++depth) {
    std::unordered_map<std::uint64_t, std::pair<std::vector<double>, double>> groups;
    for (std::uint64_t i = 0; i < space.num_leaves(); ++i) {
      const Sid s(space, space.leaf_at(i));
      if (!env.mask().valid(s)) continue;
      auto& g = groups[space.key(s.head(depth))];
      if (g.first.empty()) g.first.assign(d, 0.0);
      const auto e = env.embedding(s);
      for (std::size_t j = 0; j < d; ++j) g.first[j] += e[j];
      g.second += 1.0;
    }
    for (const auto& [_, g] : groups) {
      double sq = 0.0;
      for (double v : g.first) sq += v * v;
      // |sum e|^2 - sum |e|^2 with unit rows.
      dot_ge[static_cast<std::size_t>(depth)] += sq - g.second;
      pairs_ge[static_cast<std::size_t>(depth)] += g.second * (g.second - 1.0);
    }
  }
  std::vector<double> out(static_cast<std::size_t>(length) + 1, 0.0);
  for (int l = 0; l < length; ++l) {
    const auto i = static_cast<std::size_t>(l);
    const double pairs = pairs_ge[i] - pairs_ge[i + 1];
    out[i] = pairs > 0.0 ? (dot_ge[i] - dot_ge[i + 1]) / pairs : 0.0;
  }
  out[static_cast<std::size_t>(length)] = 1.0;
  return out;
}

}  // namespace vstar
