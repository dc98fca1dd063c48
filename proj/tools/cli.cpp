#include "cli.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "config.hpp"
#include "json.hpp"
#include "vstar/eval.hpp"
#include "vstar/io.hpp"
#include "vstar/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vstar::cli {

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  std::string axis;
  std::vector<std::string> inputs;
};

ExperimentConfig load_config(const Options& o) {
  json doc = json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ConfigError("cannot open config file '" + o.config_path + "'");
    doc = json::parse(in, nullptr, false, true);
    if (doc.is_discarded()) throw ConfigError("config file '" + o.config_path + "' is not valid JSON");
  }
  for (const auto& s : o.sets) apply_override(doc, s);
  if (o.seed) {
    doc["seed"] = *o.seed;
    doc["seeds"] = json::array({*o.seed});
  }
  if (!o.out.empty()) doc["out"] = o.out;
  auto cfg = parse_config(doc);
  // A relative output directory lives under $VSTAR_OUT when it is set.
  if (const char* root = std::getenv("VSTAR_OUT"); root && *root && fs::path(cfg.out).is_relative()) {
    cfg.out = (fs::path(root) / cfg.out).string();
  }
  return cfg;
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw Error("write failed for '" + p.string() + "'");
}

template <class T>
std::string to_text(const T& obj) {
  std::ostringstream s;
  obj.save(s);
  return s.str();
}

GeneratedEnv generate_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  MisalignmentSpec spec = cfg.misalignment;
  spec.seed = seed;
  return generate(spec, cfg.env);
}

GeneratedEnv load_env(const std::string& dir) {
  const fs::path env_path = fs::path(dir) / "env.txt";
  const fs::path policy_path = fs::path(dir) / "policy.txt";
  std::ifstream e(env_path), p(policy_path);
  if (!e) throw Error("missing environment file '" + env_path.string() + "'");
  if (!p) throw Error("missing policy file '" + policy_path.string() + "'");
  auto env = Environment::load(e);
  auto policy = PolicyTable::load(p);
  if (!(policy.space() == env.space()) || policy.num_contexts() != env.num_contexts()) {
    throw Error("policy in '" + dir + "' does not match its environment");
  }
  return {std::move(env), std::move(policy)};
}

// The environment for one seed: loaded from env_dir when given, else generated.
GeneratedEnv env_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.env_dir ? load_env(*cfg.env_dir) : generate_for(cfg, seed);
}

// Long-format metric rows: study,method,setting,metric,k,seed,value.
struct MetricRows {
  std::ostringstream s;
  MetricRows() { s << "study,method,setting,metric,k,seed,value\n"; }
  void add(const std::string& study, const std::string& method, const std::string& setting, const std::string& metric,
           int k, std::uint64_t seed, double value) {
    s << study << ',' << method << ',' << setting << ',' << metric << ',' << (k > 0 ? std::to_string(k) : "") << ','
      << seed << ',' << io::dec(value) << '\n';
  }
  void ranking(const std::string& study, const std::string& method, const std::string& setting,
               const RankingMetrics& m, std::uint64_t seed) {
    for (std::size_t i = 0; i < m.ks.size(); ++i) {
      add(study, method, setting, "hr", m.ks[i], seed, m.hr[i]);
      add(study, method, setting, "ndcg", m.ks[i], seed, m.ndcg[i]);
    }
  }
};

std::vector<QueryId> alignment_queries(const Environment& env, int limit) {
  std::vector<QueryId> qs(env.heldout_queries().begin(), env.heldout_queries().end());
  if (limit > 0 && static_cast<std::size_t>(limit) < qs.size()) qs.resize(static_cast<std::size_t>(limit));
  return qs;
}

int cmd_gen_env(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o);
  auto g = generate_for(cfg, cfg.seed);
  const fs::path dir(cfg.out);
  write_file(dir / "env.txt", to_text(g.env));
  write_file(dir / "policy.txt", to_text(g.policy));
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  const auto a = audit_misalignment(g.env, g.policy, cfg.misalignment.quantile);
  json j = {{"kind", "audit"},
            {"queries", a.queries},
            {"planted_queries", a.planted_queries},
            {"contexts", a.contexts},
            {"planted_contexts", a.planted_contexts},
            {"fraction", a.fraction},
            {"target", cfg.misalignment.fraction}};
  out << j.dump() << "\n";
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o);
  auto g = env_for(cfg, cfg.seed);
  const fs::path dir(cfg.out);
  const PolicyTable initial = g.policy;
  PolicyTable policy = g.policy;
  auto value = make_value(g.env, cfg.loop);
  std::ofstream log;
  fs::create_directories(dir);
  log.open(dir / "records.jsonl", std::ios::binary);
  if (!log) throw Error("cannot write run records in '" + dir.string() + "'");

  IterationHook hook = [&](const IterationRecord& r, const PolicyTable& p, const ValueTable& v) {
    log << r.to_json() << "\n" << std::flush;
    if (cfg.checkpoint_every > 0 && r.iteration % cfg.checkpoint_every == 0) {
      const auto stem = dir / "checkpoints" / ("iter_" + std::to_string(r.iteration));
      write_file(stem.string() + ".policy.txt", to_text(p));
      write_file(stem.string() + ".value.txt", to_text(v));
    }
    if (r.heldout) {
      out << "iteration " << r.iteration << " hr@" << r.heldout->ks.back() << "=" << io::dec(r.heldout->hr.back())
          << " reward=" << io::dec(r.mean_reward) << "\n";
    }
  };
  const auto run = run_loop(g.env, policy, value, cfg.loop, hook);
  log.close();
  // The complete record (with the initial and final lines) replaces the streamed one.
  write_file(dir / "records.jsonl", run.to_jsonl());
  write_file(dir / "summary.csv", run.summary_csv());
  write_file(dir / "policy.txt", to_text(policy));
  write_file(dir / "value.txt", to_text(value));
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");

  const std::string method = std::string(to_string(cfg.loop.decoder.kind)) + "+" + to_string(cfg.loop.objective);
  MetricRows rows;
  rows.ranking("train", method, "heldout", run.final_eval, cfg.seed);
  const auto& heldout = g.env.heldout_queries();
  const auto dm = evaluate_decoder(g.env, policy, value, cfg.loop.decoder, heldout, cfg.loop.eval_k,
                                   substream_seed(cfg.seed, "decode", 0));
  rows.ranking("decode", method, "candidates", dm.ranking, cfg.seed);
  rows.add("decode", method, "candidates", "diversity", 0, cfg.seed, dm.diversity);
  rows.add("decode", method, "candidates", "max_reward", 0, cfg.seed, dm.max_reward);
  rows.add("decode", method, "candidates", "cost", 0, cfg.seed, dm.mean_cost);

  const std::vector<const PolicyTable*> variants{&policy, &initial};
  AlignmentConfig ac = cfg.alignment;
  ac.seed = substream_seed(cfg.seed, "alignment");
  const auto qs = alignment_queries(g.env, cfg.alignment_queries);
  const auto levels = alignment_study(
      g.env, variants, [&](QueryId q, const Prefix& p) { return value.value(g.env.context_of(q), p); }, qs, ac);
  for (const auto& l : levels) {
    rows.add("alignment", "logprob", "level", "rho", l.level, cfg.seed, l.rho_logprob);
    rows.add("alignment", "value", "level", "rho", l.level, cfg.seed, l.rho_value);
  }
  write_file(dir / "metrics.csv", rows.s.str());
  out << "final hr@" << run.final_eval.ks.back() << "=" << io::dec(run.final_eval.hr.back()) << " -> " << dir.string()
      << "\n";
  return kOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o);
  struct Variant {
    std::string name;
    LoopConfig loop;
  };
  std::vector<Variant> variants;
  auto base = cfg.loop;
  if (o.axis == "decoder") {
    for (auto d : {DecoderKind::Beam, DecoderKind::TopK, DecoderKind::Ved}) {
      auto l = base;
      l.decoder.kind = d;
      variants.push_back({to_string(d), l});
    }
  } else if (o.axis == "expansion-rule") {
    for (auto r : {PriorityRule::ValueOnly, PriorityRule::EntropyOnly, PriorityRule::Joint}) {
      auto l = base;
      l.decoder.kind = DecoderKind::Ved;
      l.decoder.ved.rule = r;
      variants.push_back({to_string(r), l});
    }
  } else if (o.axis == "objective") {
    for (auto ob : {Objective::Grpo, Objective::Sibling, Objective::Joint}) {
      auto l = base;
      l.objective = ob;
      variants.push_back({to_string(ob), l});
    }
  } else {
    throw ConfigError("unknown ablation axis '" + o.axis + "' (decoder, expansion-rule, objective)");
  }
  for (const auto& v : variants) v.loop.validate(SidSpace(Vocab(cfg.env.vocab), cfg.env.length));

  std::ostringstream wide;
  wide << "axis,variant,seed";
  for (int k : base.eval_k) wide << ",hr@" << k;
  for (int k : base.eval_k) wide << ",ndcg@" << k;
  wide << ",diversity,max_reward\n";
  MetricRows rows;
  const std::string study = "ablate-" + o.axis;
  for (auto seed : cfg.seeds) {
    const auto g = env_for(cfg, seed);
    for (const auto& v : variants) {
      auto loop = v.loop;
      loop.seed = seed;
      PolicyTable policy = g.policy;
      auto value = make_value(g.env, loop);
      const auto run = run_loop(g.env, policy, value, loop);
      const auto dm = evaluate_decoder(g.env, policy, value, loop.decoder, g.env.heldout_queries(), loop.eval_k,
                                       substream_seed(seed, "decode", 0));
      wide << o.axis << ',' << v.name << ',' << seed;
      for (double x : run.final_eval.hr) wide << ',' << io::dec(x);
      for (double x : run.final_eval.ndcg) wide << ',' << io::dec(x);
      wide << ',' << io::dec(dm.diversity) << ',' << io::dec(dm.max_reward) << '\n';
      rows.ranking(study, v.name, "heldout", run.final_eval, seed);
      rows.add(study, v.name, "candidates", "diversity", 0, seed, dm.diversity);
      rows.add(study, v.name, "candidates", "max_reward", 0, seed, dm.max_reward);
      out << study << " seed " << seed << " " << v.name << " hr@" << run.final_eval.ks.back() << "="
          << io::dec(run.final_eval.hr.back()) << "\n";
    }
  }
  const fs::path dir(cfg.out);
  write_file(dir / ("ablate_" + o.axis + ".csv"), wide.str());
  write_file(dir / "metrics.csv", rows.s.str());
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  return kOk;
}

int cmd_scale(const Options& o, std::ostream& out) {
  const auto cfg = load_config(o);
  const int L = cfg.env.length;
  const int B = cfg.scale.base_width;
  // Budget k x (1 + (L-1) B) in forward tokens; beam width floor((budget-1)/(L-1)).
  struct Point {
    int multiplier;
    std::int64_t budget;
    int width;
  };
  std::vector<Point> points;
  for (int k : cfg.scale.multipliers) {
    const std::int64_t budget = 1 + static_cast<std::int64_t>(L - 1) * k * B;
    points.push_back({k, budget, static_cast<int>((budget - 1) / (L - 1))});
  }
  const SidSpace space(Vocab(cfg.env.vocab), cfg.env.length);
  for (const auto& p : points) {
    DecoderConfig d = cfg.loop.decoder;
    d.kind = DecoderKind::Ved;
    d.ved.budget = p.budget;
    d.validate(space);
    d.kind = DecoderKind::Beam;
    d.beam_width = p.width;
    d.validate(space);
  }

  std::ostringstream wide;
  wide << "method,multiplier,budget,seed,width,mean_cost";
  for (int k : cfg.loop.eval_k) wide << ",hr@" << k;
  for (int k : cfg.loop.eval_k) wide << ",ndcg@" << k;
  wide << '\n';
  MetricRows rows;
  for (auto seed : cfg.seeds) {
    const auto g = env_for(cfg, seed);
    // Value fitted by TD on VED candidates at the 1x budget; the policy stays fixed.
    LoopConfig fit = cfg.loop;
    fit.seed = seed;
    fit.iterations = cfg.scale.value_iterations;
    fit.update_policy = false;
    fit.decoder.kind = DecoderKind::Ved;
    fit.decoder.ved.budget = points.front().budget;
    PolicyTable policy = g.policy;
    auto value = make_value(g.env, fit);
    run_loop(g.env, policy, value, fit);

    for (const auto& p : points) {
      for (auto kind : {DecoderKind::Beam, DecoderKind::Ved}) {
        DecoderConfig d = cfg.loop.decoder;
        d.kind = kind;
        d.beam_width = p.width;
        d.ved.budget = p.budget;
        const auto m = evaluate_decoder(g.env, g.policy, value, d, g.env.heldout_queries(), cfg.loop.eval_k,
                                        substream_seed(seed, "decode", 0));
        const std::string name = to_string(kind);
        wide << name << ',' << p.multiplier << ',' << p.budget << ',' << seed << ','
             << (kind == DecoderKind::Beam ? std::to_string(p.width) : "") << ',' << io::dec(m.mean_cost);
        for (double x : m.ranking.hr) wide << ',' << io::dec(x);
        for (double x : m.ranking.ndcg) wide << ',' << io::dec(x);
        wide << '\n';
        rows.ranking("scale", name, std::to_string(p.budget), m.ranking, seed);
        rows.add("scale", name, std::to_string(p.budget), "cost", 0, seed, m.mean_cost);
        out << "scale seed " << seed << " " << name << " budget " << p.budget << " hr@" << m.ranking.ks.back() << "="
            << io::dec(m.ranking.hr.back()) << "\n";
      }
    }
  }
  const fs::path dir(cfg.out);
  write_file(dir / "scale.csv", wide.str());
  write_file(dir / "metrics.csv", rows.s.str());
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  return kOk;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      f.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  f.push_back(cur);
  return f;
}

int cmd_report(const Options& o, std::ostream& out) {
  if (o.inputs.empty()) throw ConfigError("report needs at least one run directory or metrics file");
  std::string out_dir = o.out.empty() ? "report" : o.out;
  if (const char* root = std::getenv("VSTAR_OUT"); root && *root && fs::path(out_dir).is_relative()) {
    out_dir = (fs::path(root) / out_dir).string();
  }
  using Key = std::tuple<std::string, std::string, std::string, std::string, std::string>;
  std::map<Key, std::vector<double>> groups;
  for (const auto& in : o.inputs) {
    fs::path p(in);
    if (fs::is_directory(p)) p /= "metrics.csv";
    std::ifstream f(p);
    if (!f) throw Error("cannot read metrics from '" + p.string() + "'");
    std::string line;
    if (!std::getline(f, line) || line.rfind("study,method,setting,metric,k,seed,value", 0) != 0) {
      throw Error("'" + p.string() + "' is not a metrics table");
    }
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      const auto c = split_csv_line(line);
      if (c.size() != 7) throw Error("malformed metrics row in '" + p.string() + "': " + line);
      groups[{c[0], c[1], c[2], c[3], c[4]}].push_back(std::stod(c[6]));
    }
  }
  if (groups.empty()) throw ConfigError("report inputs contain no metric rows");

  const std::string header = "study,method,setting,metric,k,n,mean,std\n";
  std::ostringstream all, align, scale, div;
  all << header;
  align << header;
  scale << header;
  div << header;
  for (const auto& [key, xs] : groups) {
    const auto& [study, method, setting, metric, k] = key;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    std::string sd;
    if (xs.size() > 1) {
      double ss = 0.0;
      for (double x : xs) ss += (x - mean) * (x - mean);
      sd = io::dec(std::sqrt(ss / static_cast<double>(xs.size() - 1)));
    }
    std::ostringstream row;
    row << study << ',' << method << ',' << setting << ',' << metric << ',' << k << ',' << xs.size() << ','
        << io::dec(mean) << ',' << sd << '\n';
    all << row.str();
    if (study == "alignment") align << row.str();
    if (study == "scale") scale << row.str();
    if (metric == "diversity" || metric == "max_reward") div << row.str();
    out << row.str();
  }
  const fs::path dir(out_dir);
  write_file(dir / "aggregate.csv", all.str());
  write_file(dir / "fig_alignment.csv", align.str());
  write_file(dir / "fig_scaling.csv", scale.str());
  write_file(dir / "fig_diversity.csv", div.str());
  return kOk;
}

void error_line(std::ostream& err, const char* kind, const std::string& msg) {
  std::string m = msg;
  for (char& c : m) {
    if (c == '\n') c = ' ';
  }
  err << "error kind=" << kind << " msg=" << m << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"vstar: value-guided decoding and sibling-relative RL on a synthetic recommender", "vstar"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file");
    sub->add_option("--seed", o.seed, "Root seed (also replaces the seed list)");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--set", o.sets, "Override a config key: key.path=value")->take_all();
  };
  auto* gen = app.add_subcommand("gen-env", "Generate and save an environment and its fitted policy");
  common(gen);
  auto* train = app.add_subcommand("train", "Run the decode / TD / policy-update loop");
  common(train);
  auto* ablate = app.add_subcommand("ablate", "Compare variants along one axis over the seed list");
  common(ablate);
  ablate->add_option("--axis", o.axis, "decoder | expansion-rule | objective")->required();
  auto* scale = app.add_subcommand("scale", "Beam vs VED at matched forward-token budgets");
  common(scale);
  auto* report = app.add_subcommand("report", "Aggregate metrics tables into mean/std summaries");
  report->add_option("inputs", o.inputs, "Run directories or metrics.csv files")->required();
  report->add_option("--out", o.out, "Output directory (default: report)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    error_line(err, "config", e.what());
    return kConfigError;
  }

  try {
    if (gen->parsed()) return cmd_gen_env(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (ablate->parsed()) return cmd_ablate(o, out);
    if (scale->parsed()) return cmd_scale(o, out);
    if (report->parsed()) return cmd_report(o, out);
  } catch (const ConfigError& e) {
    error_line(err, "config", e.what());
    return kConfigError;
  } catch (const json::exception& e) {
    error_line(err, "config", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    error_line(err, "runtime", e.what());
    return kRuntimeError;
  }
  error_line(err, "config", "no command given");
  return kConfigError;
}

}  // namespace vstar::cli
