#include <cmath>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "vstar/value.hpp"

using namespace vstar;
using vstar::testing::hand_env;

namespace {

// V=2, L=3 with 2-d embeddings: leaves under first token 0 point along e1,
// leaves under 1 along e2. Truth of query 0 is 0.0.0.
Environment axis_env() {
  std::vector<std::vector<double>> e;
  for (int i = 0; i < 8; ++i) e.push_back(i < 4 ? std::vector<double>{1.0, 0.0} : std::vector<double>{0.0, 1.0});
  return hand_env(2, 3, e, {Prefix{0, 0, 0}});
}

CandidateSet make_set(const SidSpace& space, const std::vector<Prefix>& items) {
  CandidateSet c(0, 0);
  for (const auto& p : items) c.add(Candidate{Sid(space, p)});
  return c;
}

}  // namespace

TEST_CASE("prefix_bucket filters by prefix") {
  const SidSpace space(Vocab(3), 3);
  const auto set = make_set(space, {{0, 1, 2}, {1, 0, 0}, {0, 2, 2}, {2, 2, 2}, {0, 1, 0}});
  CHECK(prefix_bucket(set, Prefix{}).size() == 5);
  const auto single = prefix_bucket(set, Prefix{2, 2, 2});
  REQUIRE(single.size() == 1);
  CHECK(single[0]->sid.prefix() == Prefix{2, 2, 2});
  const auto zeros = prefix_bucket(set, Prefix{0});
  REQUIRE(zeros.size() == 3);
  for (const auto* c : zeros) CHECK(c->sid[0] == 0);
  CHECK(prefix_bucket(set, Prefix{1, 1}).empty());
}

TEST_CASE("prefix_embedding is the unnormalised bucket mean") {
  const auto env = axis_env();
  const auto& space = env.space();
  const auto single = make_set(space, {{1, 0, 1}});
  const auto e = prefix_embedding(env, single, Prefix{1});
  CHECK(e == std::vector<double>{0.0, 1.0});

  const auto same = make_set(space, {{0, 0, 1}, {0, 1, 1}});
  CHECK(prefix_embedding(env, same, Prefix{0}) == std::vector<double>{1.0, 0.0});

  const auto ortho = make_set(space, {{0, 0, 1}, {1, 1, 1}});
  const auto m = prefix_embedding(env, ortho, Prefix{});
  CHECK(std::hypot(m[0], m[1]) == doctest::Approx(1.0 / std::sqrt(2.0)));

  CHECK_THROWS_AS(prefix_embedding(env, ortho, Prefix{0, 1}), EmptyBucket);
}

TEST_CASE("step_reward examples") {
  const auto env = axis_env();
  const auto& space = env.space();
  const StepRewardParams params;
  const auto set = make_set(space, {{0, 0, 0}, {0, 1, 1}, {1, 0, 0}, {1, 1, 0}});

  SUBCASE("matching prefix at depth 3 pays w_3") {
    CHECK(step_reward(env, set, params, 0, Prefix{0, 0, 0}) == 1.0);
    CHECK(step_reward(env, set, params, 0, Prefix{0}) == 0.3);
  }
  SUBCASE("mismatch with cos 1 pays nothing") {
    // 0.1.1 shares the truth's embedding direction.
    CHECK(step_reward(env, set, params, 0, Prefix{0, 1}) == doctest::Approx(0.0));
    CHECK(step_reward(env, set, params, 0, Prefix{0, 1, 1}) == doctest::Approx(0.0));
  }
  SUBCASE("mismatch at depth 1 with cos 0 is -w_1") {
    CHECK(step_reward(env, set, params, 0, Prefix{1}) == doctest::Approx(-0.3));
  }
  SUBCASE("empty bucket falls back to cos 0 and is counted") {
    StepRewardStats stats;
    const auto small = make_set(space, {{0, 0, 0}});
    CHECK(step_reward(env, small, params, 0, Prefix{1, 1}, &stats) == doctest::Approx(-0.5));
    CHECK(stats.empty_buckets == 1);
    CHECK_THROWS_AS(step_reward(env, small, params, 0, Prefix{1, 1}, &stats, EmptyBucketPolicy::Throw), EmptyBucket);
  }
  SUBCASE("bounds") {
    for (const auto& c : set.entries()) {
      for (int l = 1; l <= 3; ++l) {
        const double r = step_reward(env, set, params, 0, c.sid.head(l));
        const double w = params.w[static_cast<std::size_t>(l) - 1];
        CHECK(r <= w);
        CHECK(r >= -2.0 * w);
        CHECK((r > 0.0) == (c.sid.head(l) == env.truth(0).head(l)));
      }
    }
  }
}

TEST_CASE("step reward weights validation") {
  CHECK_NOTHROW(StepRewardParams{}.validate(3));
  const auto check = [](std::vector<double> w) { StepRewardParams{std::move(w)}.validate(3); };
  CHECK_THROWS_AS(check({0.5, 0.3, 1.0}), ConfigError);
  CHECK_THROWS_AS(check({0.0, 0.3, 1.0}), ConfigError);
  CHECK_THROWS_AS(check({0.3, 1.0}), ConfigError);
}

TEST_CASE("td_target examples") {
  const SidSpace space(Vocab(2), 3);
  ValueTable v(space, 1, 0.99);
  v.set(0, Prefix{0, 1}, 1.0);
  CHECK(td_target(v, 0.99, 0.5, 0, Prefix{0, 1}) == doctest::Approx(1.49));
  CHECK(td_target(v, 0.0, 0.5, 0, Prefix{0, 1}) == 0.5);
  v.set(0, Prefix{0, 1, 1}, 100.0);
  CHECK(td_target(v, 0.99, 0.7, 0, std::nullopt) == 0.7);
}

TEST_CASE("value table cold default and visit flag") {
  const SidSpace space(Vocab(4), 3);
  ValueTable v(space, 2);
  CHECK(v.value(1, Prefix{2}) == 0.0);
  CHECK_FALSE(v.visited(1, Prefix{2}));
  v.set(1, Prefix{2}, 0.0);
  CHECK(v.visited(1, Prefix{2}));
  CHECK_FALSE(v.visited(0, Prefix{2}));
  CHECK_THROWS_AS(v.value(2, Prefix{}), InvalidArgument);
  CHECK_THROWS_AS(ValueTable(space, 1, 0.0), ConfigError);
}

TEST_CASE("td_fit converges on a repeated terminal transition") {
  const SidSpace space(Vocab(2), 2);
  ValueTable v(space, 1, 0.99, 0.1);
  std::vector<Transition> batch(5, Transition{0, Prefix{1, 0}, 0.8, std::nullopt});
  const auto losses = td_fit(v, batch, 300);
  CHECK(std::abs(v.value(0, Prefix{1, 0}) - 0.8) < 1e-6);
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] <= losses[i - 1]);
}

TEST_CASE("td_fit matches discounted returns on a single path") {
  const SidSpace space(Vocab(3), 3);
  const double g = 0.99;
  ValueTable v(space, 1, g, 0.2);
  const std::vector<double> r = {0.3, -0.25, 1.0};
  const Prefix y{2, 0, 1};
  std::vector<Transition> batch;
  for (int l = 1; l <= 3; ++l) {
    Transition t{0, y.head(l), r[static_cast<std::size_t>(l) - 1], std::nullopt};
    if (l < 3) t.next = y.head(l + 1);
    batch.push_back(t);
  }
  td_fit(v, batch, 2000);
  for (int l = 1; l <= 3; ++l) {
    double ret = 0.0;
    for (int t = l; t <= 3; ++t) ret += std::pow(g, t - l) * r[static_cast<std::size_t>(t) - 1];
    CHECK(std::abs(v.value(0, y.head(l)) - ret) < 1e-4);
  }
}

TEST_CASE("td_fit matches backward induction on a branching trie") {
  // Transitions from every leaf of a V=2, L=3 trie with hand-set rewards. The
  // fixed point of tabular TD is the empirical mean target at each state,
  // which backward induction computes bottom-up.
  const SidSpace space(Vocab(2), 3);
  const double g = 0.99;
  Rng rng(5);
  std::map<Prefix, double> reward;
  for (std::uint64_t k = 1; k < space.num_nodes(); ++k) reward[space.prefix_of_key(k)] = uniform01(rng) * 2.0 - 1.0;

  std::vector<Transition> batch;
  std::vector<Prefix> leaves;
  for (std::uint64_t i = 0; i < space.num_leaves(); ++i) leaves.push_back(space.leaf_at(i));
  leaves.push_back(Prefix{1, 1, 0});  // duplicate weighting on one branch
  for (const auto& y : leaves) {
    for (int l = 1; l <= 3; ++l) {
      Transition t{0, y.head(l), reward[y.head(l)], std::nullopt};
      if (l < 3) t.next = y.head(l + 1);
      batch.push_back(t);
    }
  }

  std::map<Prefix, double> oracle;
  for (int l = 3; l >= 1; --l) {
    std::map<Prefix, std::pair<double, int>> acc;
    for (const auto& t : batch) {
      if (t.state.size() != l) continue;
      const double target = t.reward + (t.next ? g * oracle.at(*t.next) : 0.0);
      acc[t.state].first += target;
      acc[t.state].second += 1;
    }
    for (const auto& [p, a] : acc) oracle[p] = a.first / a.second;
  }

  ValueTable v(space, 1, g, 0.3);
  const auto losses = td_fit(v, batch, 3000);
  for (const auto& [p, want] : oracle) CHECK(std::abs(v.value(0, p) - want) < 1e-4);
  // Branching successors leave irreducible TD error; the trace settles.
  CHECK(std::abs(losses.back() - losses[losses.size() - 2]) < 1e-12);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("zero rewards keep the zero fixed point") {
  const SidSpace space(Vocab(2), 2);
  ValueTable v(space, 1);
  std::vector<Transition> batch = {{0, Prefix{0}, 0.0, Prefix{0, 1}}, {0, Prefix{0, 1}, 0.0, std::nullopt}};
  const auto losses = td_fit(v, batch, 10);
  CHECK(v.value(0, Prefix{0}) == 0.0);
  CHECK(v.value(0, Prefix{0, 1}) == 0.0);
  for (double l : losses) CHECK(l == 0.0);
  CHECK_THROWS_AS(td_fit(v, std::vector<Transition>{}, 1), InvalidArgument);
}

TEST_CASE("oracle value equals the enumerated expectation") {
  EnvSizes sizes;
  sizes.vocab = 4;
  sizes.embed_dim = 6;
  sizes.contexts = 5;
  sizes.queries = 10;
  sizes.valid_fraction = 0.8;
  auto g = generate(MisalignmentSpec{0.4, 0.25, 8}, sizes);
  const QueryId q = 3;
  const OracleValue oracle(g.env, g.policy, q);
  const ContextId x = g.env.context_of(q);
  // Sum over valid leaves of P(leaf | prefix) * R, with P from sequence probabilities.
  for (std::uint64_t k = 0; k < g.env.space().num_nodes(); ++k) {
    const Prefix p = g.env.space().prefix_of_key(k);
    if (!g.env.mask().valid(p)) continue;
    double num = 0.0, den = 0.0;
    for (const auto& y : enumerate_all_sids(g.env.space())) {
      if (!g.env.mask().valid(y) || !y.prefix().starts_with(p)) continue;
      const double py = std::exp(g.policy.sequence_logprob(x, y, g.env.mask()));
      num += py * g.env.terminal_reward(q, y);
      den += py;
    }
    CHECK(oracle.value(x, p) == doctest::Approx(num / den).epsilon(1e-10));
  }
  CHECK_THROWS_AS(oracle.value(x + 1, Prefix{}), InvalidArgument);
}

TEST_CASE("harvested transitions cover every prefix of every candidate") {
  const auto env = axis_env();
  const auto set = make_set(env.space(), {{0, 0, 0}, {1, 1, 0}});
  const auto batch = harvest_transitions(env, set, StepRewardParams{});
  REQUIRE(batch.size() == 6);
  CHECK(batch[0].state == Prefix{0});
  CHECK(batch[0].reward == 0.3);
  CHECK(batch[2].reward == 1.0);
  CHECK_FALSE(batch[2].next.has_value());
  CHECK(batch[3].reward == doctest::Approx(-0.3));
}

TEST_CASE("linear value reduces TD error") {
  EnvSizes sizes;
  sizes.vocab = 4;
  sizes.embed_dim = 4;
  sizes.contexts = 4;
  sizes.queries = 8;
  auto g = generate(MisalignmentSpec{0.0, 0.25, 4}, sizes);
  LinearValue v(g.env, 0.99, 0.5);
  const auto beam = beam_search(g.policy, 0, 8, &g.env.mask());
  CandidateSet set(0, 0);
  for (const auto& c : beam.candidates.entries()) set.add(c);
  const auto batch = harvest_transitions(g.env, set, StepRewardParams{});
  const auto losses = td_fit(v, batch, 400);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("value table save and load round-trip") {
  const SidSpace space(Vocab(3), 3);
  ValueTable v(space, 3, 0.9, 0.25);
  v.set(0, Prefix{}, 0.125);
  v.set(2, Prefix{1, 2}, -1.0 / 3.0);
  std::ostringstream out;
  v.save(out);
  std::istringstream in(out.str());
  const auto back = ValueTable::load(in);
  CHECK(back.fingerprint() == v.fingerprint());
  CHECK(back.value(2, Prefix{1, 2}) == -1.0 / 3.0);
  CHECK(back.visited(0, Prefix{}));
  CHECK(back.gamma() == 0.9);
}
