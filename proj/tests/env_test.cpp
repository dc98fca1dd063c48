#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "vstar/env.hpp"

using namespace vstar;

namespace {

EnvSizes small_sizes() {
  EnvSizes s;
  s.vocab = 8;
  s.length = 3;
  s.embed_dim = 8;
  s.contexts = 40;
  s.queries = 200;
  s.log_samples = 100;
  return s;
}

std::string bytes_of(const Environment& env) {
  std::ostringstream out;
  env.save(out);
  return out.str();
}

std::string bytes_of(const PolicyTable& p) {
  std::ostringstream out;
  p.save(out);
  return out.str();
}

// Rank of token v by brute-force sorting the softmax of the root logits.
int rank_oracle(const PolicyTable& policy, ContextId x, int v) {
  const auto l = policy.logits(x, Prefix{});
  std::vector<int> order(l.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return l[static_cast<std::size_t>(a)] > l[static_cast<std::size_t>(b)];
  });
  return static_cast<int>(std::find(order.begin(), order.end(), v) - order.begin()) + 1;
}

}  // namespace

TEST_CASE("terminal reward") {
  auto g = generate(MisalignmentSpec{0.0, 0.25, 3}, small_sizes());
  const auto& env = g.env;
  const QueryId q = 0;
  const Sid& star = env.truth(q);
  CHECK(env.terminal_reward(q, star) == 1.0);

  for (const auto& y : enumerate_all_sids(env.space())) {
    const double r = env.terminal_reward(q, y);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    if (y == star) continue;
    CHECK(r < 1.0);
    const double c = env.cosine(y, star);
    CHECK(r == doctest::Approx(0.5 * std::max(0.0, c)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(env.terminal_reward(static_cast<QueryId>(env.num_queries()), star), InvalidArgument);
}

TEST_CASE("terminal reward is zero for non-positive cosine") {
  auto g = generate(MisalignmentSpec{0.0, 0.25, 3}, small_sizes());
  const auto& env = g.env;
  const Sid& star = env.truth(0);
  bool saw_positive = false;
  for (const auto& y : enumerate_all_sids(env.space())) {
    const double c = env.cosine(y, star);
    if (y == star) continue;
    if (c <= 0.0) CHECK(env.terminal_reward(0, y) == 0.0);
    if (c > 0.0) saw_positive = true;
  }
  CHECK(saw_positive);
}

TEST_CASE("embeddings are unit norm and truth is valid") {
  auto sizes = small_sizes();
  sizes.valid_fraction = 0.6;
  auto g = generate(MisalignmentSpec{0.5, 0.25, 11}, sizes);
  const auto& env = g.env;
  for (const auto& y : enumerate_all_sids(env.space())) {
    const auto e = env.embedding(y);
    double n = 0.0;
    for (double v : e) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
  }
  for (QueryId q = 0; q < env.num_queries(); ++q) CHECK(env.mask().valid(env.truth(q)));
}

TEST_CASE("fraction 0 keeps every anchor in the likely region") {
  auto g = generate(MisalignmentSpec{0.0, 0.25, 5}, small_sizes());
  const int V = 8, bottom = 2;
  for (ContextId x = 0; x < g.env.num_contexts(); ++x) {
    const int v = g.env.anchor(x)[0];
    CHECK(rank_oracle(g.policy, x, v) <= V - bottom);
    CHECK_FALSE(g.env.planted(x));
  }
  // A width-V beam at depth 1 keeps every first token, so each truth's head is covered.
  for (QueryId q = 0; q < g.env.num_queries(); ++q) CHECK(g.env.truth(q)[0] < V);
}

TEST_CASE("fraction 1 plants every anchor in the bottom quantile") {
  auto g = generate(MisalignmentSpec{1.0, 0.25, 5}, small_sizes());
  for (ContextId x = 0; x < g.env.num_contexts(); ++x) {
    const int v = g.env.anchor(x)[0];
    CHECK(rank_oracle(g.policy, x, v) > 6);
    CHECK(first_token_rank(g.policy, g.env.mask(), x, static_cast<Token>(v)) == rank_oracle(g.policy, x, v));
  }
}

TEST_CASE("misalignment audit matches the requested fraction") {
  EnvSizes sizes = small_sizes();
  sizes.contexts = 1000;
  sizes.queries = 1000;
  sizes.log_samples = 60;
  sizes.embed_dim = 4;
  for (double f : {0.0, 0.3, 0.7}) {
    auto g = generate(MisalignmentSpec{f, 0.25, 17}, sizes);
    const auto a = audit_misalignment(g.env, g.policy, 0.25);
    CHECK(a.contexts == 1000);
    CHECK(std::abs(static_cast<double>(a.planted_contexts) / 1000.0 - f) <= 0.05);
    // Queries whose truth is a sibling of the anchor share its first token.
    CHECK(std::abs(a.fraction - f) <= 0.05);
  }
}

TEST_CASE("generation is deterministic for a fixed seed") {
  const auto a = generate(MisalignmentSpec{0.5, 0.25, 9}, small_sizes());
  const auto b = generate(MisalignmentSpec{0.5, 0.25, 9}, small_sizes());
  const auto c = generate(MisalignmentSpec{0.5, 0.25, 10}, small_sizes());
  CHECK(bytes_of(a.env) == bytes_of(b.env));
  CHECK(bytes_of(a.policy) == bytes_of(b.policy));
  CHECK(bytes_of(a.env) != bytes_of(c.env));
}

TEST_CASE("infeasible specs are config errors") {
  auto sizes = small_sizes();
  sizes.vocab = 3;
  CHECK_THROWS_AS(generate(MisalignmentSpec{0.5, 0.25, 1}, sizes), ConfigError);
  CHECK_NOTHROW(generate(MisalignmentSpec{0.0, 0.25, 1}, sizes));
  CHECK_THROWS_AS(generate(MisalignmentSpec{1.5, 0.25, 1}, small_sizes()), ConfigError);
  CHECK_THROWS_AS(generate(MisalignmentSpec{0.5, 0.0, 1}, small_sizes()), ConfigError);
  sizes = small_sizes();
  sizes.embedding_scales = {0.1, 0.5, 0.1};
  CHECK_THROWS_AS(generate(MisalignmentSpec{0.5, 0.25, 1}, sizes), ConfigError);
}

TEST_CASE("similarity profile decays with tree distance") {
  auto g = generate(MisalignmentSpec{0.5, 0.25, 21}, small_sizes());
  const auto prof = embedding_similarity_profile(g.env);
  REQUIRE(prof.size() == 4);
  CHECK(prof[3] == 1.0);
  CHECK(prof[2] >= prof[1]);
  CHECK(prof[1] >= prof[0]);
  for (double c : prof) {
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }

  // Pairwise brute force.
  const auto all = enumerate_all_sids(g.env.space());
  std::vector<double> sum(3, 0.0), n(3, 0.0);
  for (const auto& a : all) {
    for (const auto& b : all) {
      if (a == b) continue;
      const int l = lcp_len(a, b);
      sum[static_cast<std::size_t>(l)] += g.env.cosine(a, b);
      n[static_cast<std::size_t>(l)] += 1.0;
    }
  }
  for (std::size_t l = 0; l < 3; ++l) CHECK(prof[l] == doctest::Approx(sum[l] / n[l]).epsilon(1e-9));
}

TEST_CASE("environment save and load round-trip") {
  auto sizes = small_sizes();
  sizes.valid_fraction = 0.7;
  const auto g = generate(MisalignmentSpec{0.4, 0.25, 33}, sizes);
  const std::string text = bytes_of(g.env);
  std::istringstream in(text);
  const Environment back = Environment::load(in);
  CHECK(bytes_of(back) == text);
  for (QueryId q = 0; q < back.num_queries(); q += 7) {
    const Sid y = back.anchor(back.context_of(q));
    CHECK(back.terminal_reward(q, y) == g.env.terminal_reward(q, y));
  }
  CHECK(back.train_queries() == g.env.train_queries());
  const auto c1 = back.prefix_centroid(Prefix{1});
  const auto c2 = g.env.prefix_centroid(Prefix{1});
  CHECK(std::equal(c1.begin(), c1.end(), c2.begin()));

  std::istringstream bad("vstar-policy 1\n");
  CHECK_THROWS_AS(Environment::load(bad), InvalidArgument);
}

TEST_CASE("train and heldout split partitions the queries") {
  const auto g = generate(MisalignmentSpec{0.5, 0.25, 2}, small_sizes());
  const auto& tr = g.env.train_queries();
  const auto& he = g.env.heldout_queries();
  CHECK(tr.size() == 160);
  CHECK(he.size() == 40);
  std::vector<QueryId> all(tr);
  all.insert(all.end(), he.begin(), he.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
}
