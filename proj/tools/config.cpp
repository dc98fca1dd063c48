#include "config.hpp"

#include "vstar/error.hpp"

namespace vstar::cli {

using nlohmann::json;

namespace {

const char* to_string(SibNormalization s) { return s == SibNormalization::Nodes ? "nodes" : "candidates"; }
const char* to_string(BatchReduction r) { return r == BatchReduction::Mean ? "mean" : "per_context"; }
const char* to_string(ColdStart c) { return c == ColdStart::Backoff ? "backoff" : "zero"; }

SibNormalization parse_sib_norm(const std::string& s) {
  if (s == "candidates") return SibNormalization::Candidates;
  if (s == "nodes") return SibNormalization::Nodes;
  throw ConfigError("rl.sib_norm must be 'candidates' or 'nodes'");
}

BatchReduction parse_reduction(const std::string& s) {
  if (s == "per_context") return BatchReduction::PerContext;
  if (s == "mean") return BatchReduction::Mean;
  throw ConfigError("rl.reduction must be 'per_context' or 'mean'");
}

ColdStart parse_cold(const std::string& s) {
  if (s == "zero") return ColdStart::Zero;
  if (s == "backoff") return ColdStart::Backoff;
  throw ConfigError("value.cold_start must be 'zero' or 'backoff'");
}

// Every key in `doc` must exist in `schema`; objects recurse.
void check_keys(const json& doc, const json& schema, const std::string& path) {
  if (!doc.is_object()) throw ConfigError((path.empty() ? "config" : path) + " must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    const auto& s = schema.at(it.key());
    if (s.is_object()) check_keys(it.value(), s, key);
  }
}

void overlay(json& base, const json& doc) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (it.value().is_object() && base[it.key()].is_object()) overlay(base[it.key()], it.value());
    else base[it.key()] = it.value();
  }
}

template <class T>
T get(const json& doc, const std::string& dotted) {
  const json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    node = &node->at(dotted.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!node->is_number_integer()) throw ConfigError("config key '" + dotted + "' must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (node->is_number_integer() && !node->is_number_unsigned()) {
          throw ConfigError("config key '" + dotted + "' must be non-negative");
        }
      }
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!node->is_number()) throw ConfigError("config key '" + dotted + "' must be a number");
    }
    return node->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + dotted + "' has the wrong type: " + e.what());
  }
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  const auto& l = c.loop;
  const auto& v = l.decoder.ved;
  return json{
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"out", c.out},
      {"env_dir", c.env_dir ? json(*c.env_dir) : json(nullptr)},
      {"env",
       {{"vocab", c.env.vocab},
        {"length", c.env.length},
        {"embed_dim", c.env.embed_dim},
        {"contexts", c.env.contexts},
        {"queries", c.env.queries},
        {"heldout_fraction", c.env.heldout_fraction},
        {"alpha", c.env.alpha},
        {"embedding_scales", c.env.embedding_scales},
        {"log_samples", c.env.log_samples},
        {"smoothing", c.env.smoothing},
        {"popularity_exponent", c.env.popularity_exponent},
        {"target_concentration", c.env.target_concentration},
        {"valid_fraction", c.env.valid_fraction}}},
      {"misalignment", {{"fraction", c.misalignment.fraction}, {"quantile", c.misalignment.quantile}}},
      {"loop",
       {{"iterations", l.iterations},
        {"batch_queries", l.batch_queries},
        {"objective", vstar::to_string(l.objective)},
        {"policy_steps", l.policy_steps},
        {"update_policy", l.update_policy},
        {"eval_k", l.eval_k},
        {"eval_every", l.eval_every},
        {"checkpoint_every", c.checkpoint_every}}},
      {"decoder",
       {{"kind", vstar::to_string(l.decoder.kind)},
        {"beam_width", l.decoder.beam_width},
        {"topk_k", l.decoder.topk_k},
        {"topk_count", l.decoder.topk_count},
        {"topk_temperature", l.decoder.topk_temperature}}},
      {"ved",
       {{"budget", v.budget},
        {"lambda", v.lambda},
        {"beta", v.beta},
        {"init_width", v.init_width},
        {"output_size", v.output_size},
        {"rule", vstar::to_string(v.rule)},
        {"traversal_cap_factor", v.traversal_cap_factor}}},
      {"rl",
       {{"eps", l.rl.eps},
        {"kappa", l.rl.kappa},
        {"kl_coeff", l.rl.kl_coeff},
        {"learning_rate", l.rl.learning_rate},
        {"clip", l.rl.clip ? json(*l.rl.clip) : json(nullptr)},
        {"sib_norm", to_string(l.rl.sib_norm)},
        {"reduction", to_string(l.rl.reduction)}}},
      {"value",
       {{"gamma", l.value_gamma},
        {"learning_rate", l.value_lr},
        {"cold_start", to_string(l.value_cold)},
        {"td_sweeps", l.td_sweeps},
        {"td_every", l.td_every},
        {"step_weights", l.step.w}}},
      {"scale",
       {{"multipliers", c.scale.multipliers},
        {"base_width", c.scale.base_width},
        {"value_iterations", c.scale.value_iterations}}},
      {"alignment",
       {{"pool_size", c.alignment.pool_size},
        {"temperature", c.alignment.temperature},
        {"queries", c.alignment_queries}}},
  };
}

json default_config_json() { return to_json(ExperimentConfig{}); }

ExperimentConfig parse_config(const json& doc) {
  const json defaults = default_config_json();
  check_keys(doc, defaults, "");
  json m = defaults;
  overlay(m, doc);

  ExperimentConfig c;
  c.seed = get<std::uint64_t>(m, "seed");
  c.seeds = get<std::vector<std::uint64_t>>(m, "seeds");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  c.out = get<std::string>(m, "out");
  if (!m.at("env_dir").is_null()) c.env_dir = get<std::string>(m, "env_dir");

  c.env.vocab = get<int>(m, "env.vocab");
  c.env.length = get<int>(m, "env.length");
  c.env.embed_dim = get<int>(m, "env.embed_dim");
  c.env.contexts = get<int>(m, "env.contexts");
  c.env.queries = get<int>(m, "env.queries");
  c.env.heldout_fraction = get<double>(m, "env.heldout_fraction");
  c.env.alpha = get<double>(m, "env.alpha");
  c.env.embedding_scales = get<std::vector<double>>(m, "env.embedding_scales");
  c.env.log_samples = get<int>(m, "env.log_samples");
  c.env.smoothing = get<double>(m, "env.smoothing");
  c.env.popularity_exponent = get<double>(m, "env.popularity_exponent");
  c.env.target_concentration = get<double>(m, "env.target_concentration");
  c.env.valid_fraction = get<double>(m, "env.valid_fraction");
  c.misalignment.fraction = get<double>(m, "misalignment.fraction");
  c.misalignment.quantile = get<double>(m, "misalignment.quantile");
  c.misalignment.seed = c.seed;

  auto& l = c.loop;
  l.iterations = get<int>(m, "loop.iterations");
  l.batch_queries = get<int>(m, "loop.batch_queries");
  l.objective = parse_objective(get<std::string>(m, "loop.objective"));
  l.policy_steps = get<int>(m, "loop.policy_steps");
  l.update_policy = get<bool>(m, "loop.update_policy");
  l.eval_k = get<std::vector<int>>(m, "loop.eval_k");
  l.eval_every = get<int>(m, "loop.eval_every");
  c.checkpoint_every = get<int>(m, "loop.checkpoint_every");
  if (c.checkpoint_every < 0) throw ConfigError("loop.checkpoint_every must be >= 0");
  l.seed = c.seed;

  l.decoder.kind = parse_decoder(get<std::string>(m, "decoder.kind"));
  l.decoder.beam_width = get<int>(m, "decoder.beam_width");
  l.decoder.topk_k = get<int>(m, "decoder.topk_k");
  l.decoder.topk_count = get<int>(m, "decoder.topk_count");
  l.decoder.topk_temperature = get<double>(m, "decoder.topk_temperature");

  auto& v = l.decoder.ved;
  v.budget = get<std::int64_t>(m, "ved.budget");
  v.lambda = get<double>(m, "ved.lambda");
  v.beta = get<double>(m, "ved.beta");
  v.init_width = get<int>(m, "ved.init_width");
  v.output_size = get<int>(m, "ved.output_size");
  v.rule = parse_priority_rule(get<std::string>(m, "ved.rule"));
  v.traversal_cap_factor = get<int>(m, "ved.traversal_cap_factor");

  l.rl.eps = get<double>(m, "rl.eps");
  l.rl.kappa = get<double>(m, "rl.kappa");
  l.rl.kl_coeff = get<double>(m, "rl.kl_coeff");
  l.rl.learning_rate = get<double>(m, "rl.learning_rate");
  if (!m.at("rl").at("clip").is_null()) l.rl.clip = get<double>(m, "rl.clip");
  l.rl.sib_norm = parse_sib_norm(get<std::string>(m, "rl.sib_norm"));
  l.rl.reduction = parse_reduction(get<std::string>(m, "rl.reduction"));

  l.value_gamma = get<double>(m, "value.gamma");
  l.value_lr = get<double>(m, "value.learning_rate");
  l.value_cold = parse_cold(get<std::string>(m, "value.cold_start"));
  l.td_sweeps = get<int>(m, "value.td_sweeps");
  l.td_every = get<int>(m, "value.td_every");
  l.step.w = get<std::vector<double>>(m, "value.step_weights");

  c.scale.multipliers = get<std::vector<int>>(m, "scale.multipliers");
  c.scale.base_width = get<int>(m, "scale.base_width");
  c.scale.value_iterations = get<int>(m, "scale.value_iterations");
  if (c.scale.multipliers.empty()) throw ConfigError("scale.multipliers must not be empty");
  for (int k : c.scale.multipliers) {
    if (k < 1) throw ConfigError("scale.multipliers must be positive");
  }
  if (c.scale.base_width < 1) throw ConfigError("scale.base_width must be positive");
  if (c.scale.value_iterations < 0) throw ConfigError("scale.value_iterations must be >= 0");

  c.alignment.pool_size = get<int>(m, "alignment.pool_size");
  c.alignment.temperature = get<double>(m, "alignment.temperature");
  c.alignment_queries = get<int>(m, "alignment.queries");
  if (c.alignment_queries < 0) throw ConfigError("alignment.queries must be >= 0");

  c.env.validate();
  c.misalignment.validate();
  const SidSpace space(Vocab(c.env.vocab), c.env.length);
  l.validate(space);
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("bad --set key '" + key + "'");
    if (!node->is_object()) throw ConfigError("--set key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace vstar::cli
