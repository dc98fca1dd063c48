#include "vstar/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "vstar/eval.hpp"
#include "vstar/io.hpp"
#include "vstar/rng.hpp"

namespace vstar {

const char* to_string(DecoderKind d) {
  switch (d) {
    case DecoderKind::Beam: return "beam";
    case DecoderKind::TopK: return "topk";
    case DecoderKind::Ved: return "ved";
  }
  return "?";
}

DecoderKind parse_decoder(const std::string& s) {
  if (s == "beam") return DecoderKind::Beam;
  if (s == "topk") return DecoderKind::TopK;
  if (s == "ved") return DecoderKind::Ved;
  throw ConfigError("unknown decoder '" + s + "' (beam, topk, ved)");
}

void DecoderConfig::validate(const SidSpace& space) const {
  const auto leaves = space.num_leaves();
  if (beam_width < 1 || static_cast<std::uint64_t>(beam_width) > leaves) {
    throw ConfigError("decoder.beam_width must be in [1, V^L]");
  }
  if (topk_k < 1 || topk_k > space.vocab_size()) throw ConfigError("decoder.topk_k must be in [1, V]");
  if (topk_count < 1 || static_cast<std::uint64_t>(topk_count) > leaves) {
    throw ConfigError("decoder.topk_count must be in [1, V^L]");
  }
  if (!(topk_temperature > 0.0) || !std::isfinite(topk_temperature)) {
    throw ConfigError("decoder.topk_temperature must be positive");
  }
  ved.validate(space);
  if (kind == DecoderKind::Ved) {
    // Warm-start cost with every prefix valid; a mask can only lower it.
    std::int64_t cost = 1, level = 1;
    for (int d = 1; d < space.length(); ++d) {
      level = std::min<std::int64_t>(level * space.vocab_size(), ved.init_width);
      cost += level;
    }
    if (ved.budget < cost) {
      throw ConfigError("ved.budget " + std::to_string(ved.budget) + " is below the warm-start cost " +
                        std::to_string(cost));
    }
  }
}

DecodeOutput decode_query(const Environment& env, const PolicyTable& policy, const ValueEstimator& value, QueryId q,
                          const DecoderConfig& cfg, std::uint64_t seed) {
  const ContextId x = env.context_of(q);
  DecodeOutput out;
  switch (cfg.kind) {
    case DecoderKind::Beam: {
      auto r = beam_search(policy, x, cfg.beam_width, &env.mask());
      out = {std::move(r.candidates), r.cost, r.underfilled};
      break;
    }
    case DecoderKind::TopK: {
      TopKOptions o;
      o.k = cfg.topk_k;
      o.count = cfg.topk_count;
      o.temperature = cfg.topk_temperature;
      o.seed = substream_seed(seed, "topk", q);
      auto r = topk_sample(policy, x, o, &env.mask());
      out = {std::move(r.candidates), r.cost, r.underfilled};
      break;
    }
    case DecoderKind::Ved: {
      auto r = ved_decode(policy, value, x, cfg.ved, substream_seed(seed, "expansion", q), &env.mask());
      out = {std::move(r.candidates), r.stats.cost, r.underfilled};
      break;
    }
  }
  out.candidates.set_query(q);
  return out;
}

double RankingMetrics::hr_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return hr[i];
  }
  throw InvalidArgument("HR@" + std::to_string(k) + " was not computed");
}

double RankingMetrics::ndcg_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return ndcg[i];
  }
  throw InvalidArgument("NDCG@" + std::to_string(k) + " was not computed");
}

namespace {

RankingMetrics empty_metrics(std::span<const int> ks) {
  RankingMetrics m;
  m.ks.assign(ks.begin(), ks.end());
  m.hr.assign(ks.size(), 0.0);
  m.ndcg.assign(ks.size(), 0.0);
  return m;
}

void accumulate(RankingMetrics& m, std::span<const Sid> list, const Sid& truth) {
  for (std::size_t i = 0; i < m.ks.size(); ++i) {
    m.hr[i] += hr_at_k(list, truth, m.ks[i]);
    m.ndcg[i] += ndcg_at_k(list, truth, m.ks[i]);
  }
  ++m.queries;
}

void finish(RankingMetrics& m) {
  if (m.queries == 0) return;
  for (auto& v : m.hr) v /= static_cast<double>(m.queries);
  for (auto& v : m.ndcg) v /= static_cast<double>(m.queries);
}

void check_ks(std::span<const int> ks) {
  if (ks.empty()) throw ConfigError("at least one K is required");
  for (int k : ks) {
    if (k < 1) throw ConfigError("K must be positive");
  }
}

nlohmann::json metrics_json(const RankingMetrics& m) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < m.ks.size(); ++i) {
    j["hr@" + std::to_string(m.ks[i])] = m.hr[i];
    j["ndcg@" + std::to_string(m.ks[i])] = m.ndcg[i];
  }
  j["queries"] = m.queries;
  return j;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << v;
  return s.str();
}

}  // namespace

RankingMetrics eval_checkpoint(const Environment& env, const PolicyTable& policy, std::span<const QueryId> queries,
                               std::span<const int> ks) {
  check_ks(ks);
  const int width = *std::max_element(ks.begin(), ks.end());
  auto m = empty_metrics(ks);
  // Beam output depends only on the context.
  std::unordered_map<ContextId, std::vector<Sid>> lists;
  for (QueryId q : queries) {
    const ContextId x = env.context_of(q);
    auto it = lists.find(x);
    if (it == lists.end()) it = lists.emplace(x, beam_search(policy, x, width, &env.mask()).candidates.sids()).first;
    accumulate(m, it->second, env.truth(q));
  }
  finish(m);
  return m;
}

DecoderMetrics evaluate_decoder(const Environment& env, const PolicyTable& policy, const ValueEstimator& value,
                                const DecoderConfig& cfg, std::span<const QueryId> queries, std::span<const int> ks,
                                std::uint64_t seed) {
  check_ks(ks);
  cfg.validate(env.space());
  DecoderMetrics out;
  out.ranking = empty_metrics(ks);
  for (QueryId q : queries) {
    const auto r = decode_query(env, policy, value, q, cfg, seed);
    const auto sids = r.candidates.sids();
    accumulate(out.ranking, sids, env.truth(q));
    out.diversity += sids.size() >= 2 ? lcp_diversity(sids) : 0.0;
    out.max_reward += max_reward(env, q, sids);
    out.mean_cost += static_cast<double>(r.cost);
    out.underfilled += r.underfilled;
    out.hits.push_back(r.candidates.contains(env.truth(q)));
  }
  finish(out.ranking);
  if (!queries.empty()) {
    const double n = static_cast<double>(queries.size());
    out.diversity /= n;
    out.max_reward /= n;
    out.mean_cost /= n;
  }
  return out;
}

void LoopConfig::validate(const SidSpace& space) const {
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (batch_queries < 0) throw ConfigError("batch_queries must be >= 0");
  decoder.validate(space);
  rl.validate();
  step.validate(space.length());
  if (!(value_gamma > 0.0 && value_gamma <= 1.0)) throw ConfigError("value.gamma must be in (0, 1]");
  if (!(value_lr > 0.0 && value_lr <= 1.0)) throw ConfigError("value.learning_rate must be in (0, 1]");
  if (td_sweeps < 0) throw ConfigError("value.td_sweeps must be >= 0");
  if (td_every < 1) throw ConfigError("value.td_every must be >= 1");
  if (policy_steps < 1) throw ConfigError("policy_steps must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  check_ks(eval_k);
  if (static_cast<std::uint64_t>(*std::max_element(eval_k.begin(), eval_k.end())) > space.num_leaves()) {
    throw ConfigError("eval K exceeds the number of SIDs");
  }
}

std::string IterationRecord::to_json() const {
  nlohmann::json j = {
      {"kind", "iteration"},
      {"iteration", iteration},
      {"snapshot", hex64(snapshot_hash)},
      {"queries", queries},
      {"mean_reward", mean_reward},
      {"mean_max_reward", mean_max_reward},
      {"mean_diversity", mean_diversity},
      {"mean_cost", mean_cost},
      {"underfilled", underfilled},
      {"train_hits", hits},
      {"empty_buckets", empty_buckets},
      {"j_grpo", update.j_grpo},
      {"j_sib", update.j_sib},
      {"kl", update.kl},
      {"objective", update.objective},
      {"grad_norm", update.grad_norm},
      {"grad_norm_grpo", update.grad_norm_grpo},
      {"grad_norm_sib", update.grad_norm_sib},
      {"grad_norm_kl", update.grad_norm_kl},
      {"touched_nodes", update.touched_nodes},
      {"mean_reward_range", update.mean_range},
      {"mean_sigma_a", update.mean_sigma_a},
      {"mean_sib_spread", update.mean_sib_spread},
  };
  j["td_loss_first"] = td_loss_first ? nlohmann::json(*td_loss_first) : nlohmann::json(nullptr);
  j["td_loss_last"] = td_loss_last ? nlohmann::json(*td_loss_last) : nlohmann::json(nullptr);
  j["heldout"] = heldout ? metrics_json(*heldout) : nlohmann::json(nullptr);
  return j.dump();
}

std::string RunRecord::to_jsonl() const {
  std::string out;
  nlohmann::json first = {{"kind", "initial"}, {"heldout", metrics_json(initial)}};
  out += first.dump() + "\n";
  for (const auto& r : iterations) out += r.to_json() + "\n";
  nlohmann::json last = {{"kind", "final"},
                         {"heldout", metrics_json(final_eval)},
                         {"policy", hex64(policy_fingerprint)},
                         {"value", hex64(value_fingerprint)}};
  out += last.dump() + "\n";
  return out;
}

std::string RunRecord::summary_csv() const {
  std::ostringstream s;
  s << "iteration";
  for (int k : initial.ks) s << ",hr@" << k;
  for (int k : initial.ks) s << ",ndcg@" << k;
  s << ",mean_reward,mean_diversity,td_loss,kl\n";
  auto row = [&](int it, const RankingMetrics& m, const IterationRecord* r) {
    s << it;
    for (double v : m.hr) s << ',' << io::dec(v);
    for (double v : m.ndcg) s << ',' << io::dec(v);
    if (r) {
      s << ',' << io::dec(r->mean_reward) << ',' << io::dec(r->mean_diversity) << ','
        << (r->td_loss_last ? io::dec(*r->td_loss_last) : "") << ',' << io::dec(r->update.kl) << '\n';
    } else {
      s << ",,,,\n";
    }
  };
  row(0, initial, nullptr);
  for (const auto& r : iterations) {
    if (r.heldout) row(r.iteration, *r.heldout, &r);
  }
  return s.str();
}

ValueTable make_value(const Environment& env, const LoopConfig& cfg) {
  ValueTable v(env.space(), env.num_contexts(), cfg.value_gamma, cfg.value_lr);
  v.set_cold_start(cfg.value_cold);
  return v;
}

RunRecord run_loop(const Environment& env, PolicyTable& policy, ValueTable& value, const LoopConfig& cfg,
                   const IterationHook& hook) {
  cfg.validate(env.space());
  if (!(policy.space() == env.space()) || policy.num_contexts() != env.num_contexts()) {
    throw ConfigError("policy does not match the environment");
  }
  if (!(value.space() == env.space()) || value.num_contexts() != env.num_contexts()) {
    throw ConfigError("value table does not match the environment");
  }
  const auto& train = env.train_queries();
  const auto& heldout = env.heldout_queries();
  if (train.empty()) throw ConfigError("environment has no training queries");
  if (cfg.batch_queries > 0 && static_cast<std::size_t>(cfg.batch_queries) > train.size()) {
    throw ConfigError("batch_queries exceeds the training split");
  }

  const PolicyTable reference = policy;
  RunRecord run;
  run.initial = eval_checkpoint(env, policy, heldout, cfg.eval_k);

  for (int t = 1; t <= cfg.iterations; ++t) {
    IterationRecord rec;
    rec.iteration = t;

    std::vector<QueryId> batch_q(train.begin(), train.end());
    if (cfg.batch_queries > 0) {
      Rng rng = make_rng(cfg.seed, "batch", static_cast<std::uint64_t>(t));
      shuffle(batch_q.begin(), batch_q.end(), rng);
      batch_q.resize(static_cast<std::size_t>(cfg.batch_queries));
      std::sort(batch_q.begin(), batch_q.end());
    }

    const PolicyTable snapshot = policy;
    rec.snapshot_hash = snapshot.fingerprint();
    const std::uint64_t decode_seed = substream_seed(cfg.seed, "decode", static_cast<std::uint64_t>(t));

    std::vector<CandidateSet> batch;
    batch.reserve(batch_q.size());
    for (QueryId q : batch_q) {
      auto r = decode_query(env, snapshot, value, q, cfg.decoder, decode_seed);
      double best = -INFINITY, sum = 0.0;
      for (auto& c : r.candidates.entries()) {
        c.reward = env.terminal_reward(q, c.sid);
        sum += *c.reward;
        best = std::max(best, *c.reward);
      }
      const auto sids = r.candidates.sids();
      rec.mean_reward += sum / static_cast<double>(sids.size());
      rec.mean_max_reward += best;
      rec.mean_diversity += sids.size() >= 2 ? lcp_diversity(sids) : 0.0;
      rec.mean_cost += static_cast<double>(r.cost);
      rec.underfilled += r.underfilled;
      rec.hits += r.candidates.contains(env.truth(q));
      batch.push_back(std::move(r.candidates));
    }
    rec.queries = batch.size();
    const double n = static_cast<double>(batch.size());
    rec.mean_reward /= n;
    rec.mean_max_reward /= n;
    rec.mean_diversity /= n;
    rec.mean_cost /= n;

    // The value only ever sees this iteration's candidates.
    if (cfg.td_sweeps > 0 && t % cfg.td_every == 0) {
      StepRewardStats stats;
      std::vector<Transition> transitions;
      for (const auto& set : batch) {
        auto tr = harvest_transitions(env, set, cfg.step, &stats);
        transitions.insert(transitions.end(), tr.begin(), tr.end());
      }
      const auto loss = td_fit(value, transitions, cfg.td_sweeps);
      rec.td_loss_first = loss.front();
      rec.td_loss_last = loss.back();
      rec.empty_buckets = stats.empty_buckets;
    }

    if (cfg.update_policy) {
      for (int s = 0; s < cfg.policy_steps; ++s) {
        rec.update = joint_update(policy, snapshot, reference, batch, cfg.rl, cfg.objective, &env.mask());
      }
    }

    if (t % cfg.eval_every == 0 || t == cfg.iterations) rec.heldout = eval_checkpoint(env, policy, heldout, cfg.eval_k);
    if (hook) hook(rec, policy, value);
    run.iterations.push_back(std::move(rec));
  }

  run.final_eval = cfg.iterations > 0 && run.iterations.back().heldout ? *run.iterations.back().heldout : run.initial;
  run.policy_fingerprint = policy.fingerprint();
  run.value_fingerprint = value.fingerprint();
  return run;
}

}  // namespace vstar
