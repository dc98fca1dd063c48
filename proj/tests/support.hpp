#pragma once

// Test-only helpers: random instances and brute-force oracles that never go
// through the code paths they check.

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vstar/core.hpp"
#include "vstar/env.hpp"
#include "vstar/io.hpp"
#include "vstar/policy.hpp"
#include "vstar/rng.hpp"

namespace vstar::testing {

// Fills every internal node of every context with N(0, scale^2) logits.
inline PolicyTable random_policy(const SidSpace& space, std::size_t contexts, std::uint64_t seed,
                                 double scale = 1.5) {
  PolicyTable policy(space, contexts);
  Rng rng(seed);
  for (ContextId x = 0; x < contexts; ++x) {
    for (std::uint64_t key = 0; key < space.num_nodes(); ++key) {
      const Prefix p = space.prefix_of_key(key);
      if (p.size() >= space.length()) continue;
      auto& l = policy.mutable_logits(x, p);
      for (double& v : l) v = scale * standard_normal(rng);
    }
  }
  return policy;
}

// Probability of a prefix computed by summing exp(logprob) over every leaf
// below it (marginalisation rather than the chain rule).
inline std::map<Prefix, double> prefix_marginals(const PolicyTable& policy, ContextId x) {
  std::map<Prefix, double> out;
  for (const auto& sid : enumerate_all_sids(policy.space())) {
    const double p = std::exp(policy.sequence_logprob(x, sid));
    for (int d = 0; d <= sid.length(); ++d) out[sid.head(d)] += p;
  }
  return out;
}

// Central finite difference of f with respect to one scalar.
template <class F>
double central_difference(F&& f, double& param, double h = 1e-6) {
  const double saved = param;
  param = saved + h;
  const double up = f();
  param = saved - h;
  const double down = f();
  param = saved;
  return (up - down) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Builds an environment with hand-chosen embeddings through the file
// format. `embeddings` lists one row per leaf in leaf order; rows are used
// as given (callers pass unit vectors). Query q belongs to context q and
// has truth truths[q]; every query is in the train split.
inline Environment hand_env(int vocab, int length, const std::vector<std::vector<double>>& embeddings,
                            const std::vector<Prefix>& truths, double alpha = 0.5) {
  const SidSpace space(Vocab(vocab), length);
  std::ostringstream out;
  out << "vstar-env 1\nvocab " << vocab << "\nlength " << length << "\ndim " << embeddings.at(0).size()
      << "\nseed 0\nalpha " << io::hex(alpha) << "\nfraction " << io::hex(0.0) << "\nquantile "
      << io::hex(0.25) << "\ncontexts " << truths.size() << "\n";
  for (std::size_t x = 0; x < truths.size(); ++x) out << x << ' ' << to_dotted(truths[x]) << " 0\n";
  out << "queries " << truths.size() << "\n";
  for (std::size_t q = 0; q < truths.size(); ++q) out << q << ' ' << q << ' ' << to_dotted(truths[q]) << " t\n";
  out << "mask all\nembeddings " << space.num_leaves() << "\n";
  for (std::uint64_t i = 0; i < space.num_leaves(); ++i) {
    out << to_dotted(space.leaf_at(i));
    for (double v : embeddings.at(i)) out << ' ' << io::hex(v);
    out << '\n';
  }
  std::istringstream in(out.str());
  return Environment::load(in);
}

}  // namespace vstar::testing
