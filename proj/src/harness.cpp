#include "amimic/harness.hpp"

#include "amimic/parallel.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace amimic {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Config field lists. Each visit() names every field once; the same list
// drives parsing and serialization.

template <class V>
void visit(V& v, Schedule& s) {
  std::string kind = s.kind == Schedule::Kind::Constant ? "constant" : "robbins_monro";
  v.field("kind", kind);
  v.field("a", s.a);
  v.field("b", s.b);
  if (kind == "constant") s.kind = Schedule::Kind::Constant;
  else if (kind == "robbins_monro") s.kind = Schedule::Kind::RobbinsMonro;
  else v.fail("kind", "expected 'constant' or 'robbins_monro'");
}

template <class V>
void visit(V& v, DqnConfig& c) {
  v.field("hidden", c.hidden);
  v.field("replay_capacity", c.replay_capacity);
  v.field("warmup", c.warmup);
  v.field("batch_size", c.batch_size);
  v.field("target_sync_period", c.target_sync_period);
  v.field("epsilon_start", c.epsilon_start);
  v.field("epsilon_end", c.epsilon_end);
  v.field("epsilon_decay_frames", c.epsilon_decay_frames);
  v.field("frames", c.frames);
  v.field("learning_rate", c.learning_rate);
  v.field("rmsprop", c.rmsprop);
  v.field("eval_epsilon", c.eval_epsilon);
  v.field("eval_episodes", c.eval_episodes);
  v.field("divergence_threshold", c.divergence_threshold);
}

template <class V>
void visit(V& v, AmnConfig& c) {
  v.field("tau", c.tau);
  v.field("beta", c.beta);
  v.field("epsilon", c.epsilon);
  v.field("replay_capacity", c.replay_capacity);
  v.field("batch_size", c.batch_size);
  v.field("hidden", c.hidden);
  std::string source = to_string(c.source);
  v.field("source", source);
  v.convert("source", [&] { c.source = parse_sample_source(source); });
  std::string interleave = to_string(c.interleave);
  v.field("interleave", interleave);
  v.convert("interleave", [&] { c.interleave = parse_interleave(interleave); });
  v.field("block_size", c.block_size);
  v.field("rmsprop", c.rmsprop);
  v.field("learning_rate", c.learning_rate);
  v.field("steps", c.steps);
  v.field("epochs", c.epochs);
  v.field("eval_epsilon", c.eval_epsilon);
  v.field("eval_episodes", c.eval_episodes);
  v.field("divergence_threshold", c.divergence_threshold);
}

template <class V>
void visit(V& v, FixedPointOptions& o) {
  v.field("tol", o.tol);
  v.field("max_iters", o.max_iters);
  v.field("stochastic", o.stochastic);
  v.field("stochastic_steps", o.stochastic_steps);
  v.object("schedule", o.schedule);
  v.field("average_from", o.average_from);
  v.field("seed", o.seed);
}

template <class V>
void visit(V& v, FixedPointStudyConfig& c) {
  v.field("instances", c.instances);
  v.field("lambda", c.lambda);
  v.field("inits", c.inits);
  v.field("init_scale", c.init_scale);
  v.field("agreement_tol", c.agreement_tol);
  v.field("stochastic_tol", c.stochastic_tol);
  v.object("options", c.options);
  v.field("seed", c.seed);
}

template <class V>
void visit(V& v, PolicyIterationOptions& o) {
  v.field("outer_iters", o.outer_iters);
  v.field("epsilon", o.epsilon);
  v.field("temperature", o.temperature);
  v.field("tol", o.tol);
  v.field("ratio_floor", o.ratio_floor);
  v.field("inner_tol", o.inner.tol);
  v.field("inner_max_iters", o.inner.max_iters);
}

template <class V>
void visit(V& v, ContractionStudyConfig& c) {
  v.field("instances", c.instances);
  v.field("num_states", c.num_states);
  v.field("lambda", c.lambda);
  v.field("residual_tol", c.residual_tol);
  v.object("options", c.options);
  v.field("seed", c.seed);
}

template <class V>
void visit(V& v, LemmaStudyConfig& c) {
  v.field("instances", c.instances);
  v.field("pairs_per_instance", c.pairs_per_instance);
  v.field("num_states", c.num_states);
  v.field("seed", c.seed);
}

template <class V>
void visit(V& v, CostToGoConfig& c) {
  v.object("amn", c.amn);
  v.field("horizons", c.horizons);
  v.field("seeds", c.seeds);
}

template <class V>
void visit(V& v, TheoryStageConfig& c) {
  v.object("fixed_point", c.fixed_point);
  v.object("contraction", c.contraction);
  v.object("lemma", c.lemma);
  v.field("run_cost_to_go", c.cost_to_go);
  v.object("cost_to_go", c.cost);
}

template <class V>
void visit(V& v, TransferConfig& c) {
  v.object("dqn", c.dqn);
  v.field("milestones", c.milestones);
  std::vector<std::string> modes;
  for (InitMode m : c.modes) modes.push_back(to_string(m));
  v.field("modes", modes);
  v.convert("modes", [&] {
    c.modes.clear();
    for (const std::string& m : modes) c.modes.push_back(parse_init_mode(m));
  });
  v.field("seeds", c.seeds);
}

template <class V>
void visit(V& v, TransferStageConfig& c) {
  v.field("targets", c.targets);
  v.object("run", c.transfer);
  v.field("pretrain_steps", c.pretrain_steps);
  v.field("feature_beta", c.feature_beta);
}

template <class V>
void visit(V& v, BaselineConfig& c) {
  std::string variant = to_string(c.variant);
  v.field("variant", variant);
  v.convert("variant", [&] { c.variant = parse_baseline_variant(variant); });
  v.object("dqn", c.dqn);
  v.field("epochs", c.epochs);
}

template <class V>
void visit(V& v, ExpertStageConfig& c) {
  v.field("kinds", c.kinds);
  v.field("eval_episodes", c.eval_episodes);
  v.object("dqn", c.dqn);
}

template <class V>
void visit(V& v, ExperimentConfig& c) {
  v.field("stages", c.stages);
  v.field("games", c.games);
  v.field("seed", c.seed);
  v.field("output_dir", c.output_dir);
  v.field("teacher", c.teacher);
  v.object("experts", c.experts);
  v.object("amn", c.amn);
  v.object("baseline", c.baseline);
  v.object("theory", c.theory);
  v.object("transfer", c.transfer);
}

class Writer {
 public:
  json out = json::object();

  template <class T>
  void field(const char* key, const T& value) {
    out[key] = value;
  }
  template <class T>
  void object(const char* key, T& value) {
    Writer child;
    visit(child, value);
    out[key] = std::move(child.out);
  }
  template <class F>
  void convert(const char*, F&&) {}
  void fail(const char*, const std::string&) {}
};

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <class T>
  void field(const char* key, T& value) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    read(*it, value, qualified(key));
    present_.insert(key);
  }
  template <class T>
  void object(const char* key, T& value) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    Reader child(*it, qualified(key));
    visit(child, value);
    child.finish();
  }
  template <class F>
  void convert(const char* key, F&& f) {
    if (!present_.count(key)) return;
    try {
      f();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(qualified(key) + ": " + e.what());
    }
  }
  void fail(const char* key, const std::string& msg) { throw ConfigError(qualified(key) + ": " + msg); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(qualified(it.key()) + ": unknown field");
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static void read(const json& j, bool& out, const std::string& path) {
    if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
    out = j.get<bool>();
  }
  static void read(const json& j, double& out, const std::string& path) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    out = j.get<double>();
  }
  static void read(const json& j, std::string& out, const std::string& path) {
    if (!j.is_string()) throw ConfigError(path + ": expected a string");
    out = j.get<std::string>();
  }
  template <class T>
    requires std::is_integral_v<T>
  static void read(const json& j, T& out, const std::string& path) {
    if (!j.is_number_integer()) throw ConfigError(path + ": expected an integer");
    if (std::is_unsigned_v<T> && j.is_number_integer() && !j.is_number_unsigned())
      throw ConfigError(path + ": expected a non-negative integer");
    out = j.get<T>();
  }
  template <class T>
  static void read(const json& j, std::vector<T>& out, const std::string& path) {
    if (!j.is_array()) throw ConfigError(path + ": expected a list");
    std::vector<T> tmp(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) read(j[i], tmp[i], path + "[" + std::to_string(i) + "]");
    out = std::move(tmp);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
  std::set<std::string> present_;
};

json config_json(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  Writer w;
  visit(w, copy);
  return w.out;
}

// ---------------------------------------------------------------------------

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::vector<std::string> suite_names() {
  std::vector<std::string> out;
  for (const Game& g : build_game_suite()) out.push_back(g.name);
  return out;
}

std::vector<std::string> target_names() {
  std::vector<std::string> out;
  for (const Game& g : build_transfer_targets()) out.push_back(g.name);
  return out;
}

void check(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) throw ConfigError(field + ": " + msg);
}

void check_dqn(const DqnConfig& c, const std::string& path) {
  for (int h : c.hidden) check(h >= 1, path + ".hidden", "sizes must be positive");
  check(c.replay_capacity >= 1, path + ".replay_capacity", "must be positive");
  check(c.warmup >= 0 && c.warmup <= c.replay_capacity, path + ".warmup", "must be in [0, replay_capacity]");
  check(c.batch_size >= 1, path + ".batch_size", "must be positive");
  check(c.target_sync_period >= 1, path + ".target_sync_period", "must be positive");
  check(c.frames >= 0, path + ".frames", "must be non-negative");
  check(c.learning_rate > 0.0, path + ".learning_rate", "must be positive");
  check(c.eval_epsilon >= 0.0 && c.eval_epsilon <= 1.0, path + ".eval_epsilon", "must be in [0, 1]");
  check(c.eval_episodes >= 1, path + ".eval_episodes", "must be positive");
}

void check_amn(const AmnConfig& c, const std::string& path) {
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    if (msg.rfind("amn.", 0) == 0) msg = path + msg.substr(3);
    throw ConfigError(msg);
  }
}

// ---------------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

void save_net(const fs::path& path, const MlpQ& net) {
  fs::create_directories(path.parent_path());
  save_checkpoint(path.string(), net);
}

struct Context {
  const ExperimentConfig& config;
  int jobs;
  fs::path out;
  std::vector<Game> games;
  std::vector<FeatureMap> features;
  std::vector<ExpertBundle> oracle;
  std::vector<ExpertBundle> dqn;
  MetricSeries metrics;
};

void stage_experts(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const int n = static_cast<int>(ctx.games.size());
  const bool want_dqn = contains(c.experts.kinds, "dqn");
  std::vector<std::optional<ExpertBundle>> oracle(n), dqn(n);
  parallel_for(n, ctx.jobs, [&](int i) {
    const std::uint64_t base = derive_seed(c.seed, 1000 + static_cast<std::uint64_t>(i));
    oracle[i] = oracle_expert(ctx.games[i], c.experts.eval_episodes, derive_seed(base, 1));
    if (want_dqn) {
      DqnConfig d = c.experts.dqn;
      d.eval_episodes = c.experts.eval_episodes;
      dqn[i] = dqn_train(ctx.games[i], ctx.features[i], d, derive_seed(base, 2));
    }
  });
  for (int i = 0; i < n; ++i) {
    const Game& g = ctx.games[i];
    const double uniform = expected_return(g.mdp, PolicyMatrix::uniform(g.mdp));
    ctx.metrics.append("experts", g.name, 0, "uniform_expected_return", uniform, c.seed);
    auto record = [&](const ExpertBundle& e) {
      ctx.metrics.append("experts", g.name, 0, e.kind + "_mean_return", e.stats.mean, c.seed);
      ctx.metrics.append("experts", g.name, 0, e.kind + "_max_return", e.stats.max, c.seed);
      ctx.metrics.append("experts", g.name, 0, e.kind + "_expected_return",
                         expected_return(g.mdp, gamma_operator(e.q, g.mdp, 0.05)), c.seed);
    };
    record(*oracle[i]);
    ctx.oracle.push_back(std::move(*oracle[i]));
    if (want_dqn) {
      record(*dqn[i]);
      save_net(ctx.out / "experts" / (g.name + ".dqn.ckpt"), *dqn[i]->net);
      ctx.dqn.push_back(std::move(*dqn[i]));
    }
  }
}

std::vector<DistillTask> distill_tasks(const Context& ctx, bool from_dqn) {
  std::vector<DistillTask> tasks;
  for (std::size_t i = 0; i < ctx.games.size(); ++i)
    tasks.push_back({&ctx.games[i], &ctx.features[i], from_dqn ? &ctx.dqn[i] : &ctx.oracle[i]});
  return tasks;
}

void stage_amn(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const AmnResult r = train_amn(distill_tasks(ctx, c.teacher == "dqn"), c.amn, derive_seed(c.seed, 3), "amn");
  ctx.metrics.extend(r.metrics);
  save_net(ctx.out / "amn_policy.ckpt", r.model.net);
}

void stage_baseline(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  std::vector<BaselineTask> tasks;
  for (std::size_t i = 0; i < ctx.games.size(); ++i) tasks.push_back({&ctx.games[i], &ctx.features[i]});
  const BaselineResult r = train_multitask_baseline(tasks, c.baseline, derive_seed(c.seed, 4), "baseline");
  ctx.metrics.extend(r.metrics);
}

void stage_theory(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const TheoryStageConfig& t = c.theory;
  json report = json::object();
  auto metric = [&](const std::string& study, const std::string& name, double v) {
    ctx.metrics.append("theory", study, 0, name, v, c.seed);
  };

  FixedPointStudyConfig fp = t.fixed_point;
  fp.jobs = ctx.jobs;
  const FixedPointStudy f = fixed_point_study(fp);
  report["fixed_point"] = {{"instances", f.sizes.size()},     {"agreeing", f.agreeing},
                           {"stochastic_within", f.stochastic_within}, {"worst_pairwise", f.worst_pairwise},
                           {"worst_stochastic", f.worst_stochastic},   {"pairwise", f.pairwise},
                           {"stochastic", f.stochastic},               {"passed", f.passed()}};
  metric("fixed_point", "worst_pairwise", f.worst_pairwise);
  metric("fixed_point", "worst_stochastic", f.worst_stochastic);
  metric("fixed_point", "passed", f.passed());

  ContractionStudyConfig cc = t.contraction;
  cc.jobs = ctx.jobs;
  const ContractionStudy k = contraction_study(cc);
  report["contraction"] = {{"instances", k.moduli.size()},   {"verified", k.verified},
                           {"worst_modulus", k.worst_modulus}, {"worst_residual", k.worst_residual},
                           {"moduli", k.moduli},               {"residuals", k.residuals},
                           {"outer_iterations", k.outer_iterations}, {"passed", k.passed()}};
  metric("contraction", "worst_modulus", k.worst_modulus);
  metric("contraction", "worst_residual", k.worst_residual);
  metric("contraction", "passed", k.passed());

  const LemmaStudy l = lemma_study(t.lemma);
  report["lemma"] = {{"pairs", l.constants.ratios_j.size()},  {"skipped", l.constants.skipped},
                     {"c_d", l.constants.c_d},                 {"c_j", l.constants.c_j},
                     {"c_j_bound", l.constants.c_j_bound},     {"within_bound", l.constants.within_bound},
                     {"finite", l.constants.finite},           {"passed", l.passed()}};
  metric("lemma", "c_d", l.constants.c_d);
  metric("lemma", "c_j", l.constants.c_j);
  metric("lemma", "passed", l.passed());

  if (t.cost_to_go) {
    const Game game = build_cost_to_go_game();
    const ExpertBundle expert = oracle_expert(game, 1, derive_seed(c.seed, 6));
    const CostToGoReport r = cost_to_go_comparison(game, expert, t.cost);
    json seeds = json::array();
    for (const CostToGoSeed& s : r.seeds) {
      auto arm = [](const CostToGoArm& a) {
        return json{{"gaps", a.gaps},
                    {"linear_rss", a.fit.linear_rss},
                    {"quadratic_rss", a.fit.quadratic_rss},
                    {"mixed_linear", a.fit.mixed_linear},
                    {"mixed_quadratic", a.fit.mixed_quadratic},
                    {"final_loss", a.final_loss}};
      };
      seeds.push_back({{"seed", s.seed},
                       {"from_amn", arm(s.from_amn)},
                       {"from_expert", arm(s.from_expert)},
                       {"direction_holds", s.direction_holds()}});
    }
    const bool passed = 5 * r.direction_count() >= 4 * static_cast<int>(r.seeds.size());
    report["cost_to_go"] = {{"game", r.game},       {"horizons", r.horizons}, {"margin_u", r.margin_u},
                            {"seeds", seeds},       {"direction_count", r.direction_count()},
                            {"passed", passed}};
    metric("cost_to_go", "direction_count", r.direction_count());
    metric("cost_to_go", "margin_u", r.margin_u);
    metric("cost_to_go", "passed", passed);
  }
  write_text(ctx.out / "theory.json", report.dump(2) + "\n");
}

void stage_transfer(Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const TransferStageConfig& t = c.transfer;
  std::vector<Game> targets;
  for (Game& g : build_transfer_targets())
    if (t.targets.empty() || contains(t.targets, g.name)) targets.push_back(std::move(g));

  const bool want_policy = std::count(t.transfer.modes.begin(), t.transfer.modes.end(), InitMode::AmnPolicy) > 0;
  const bool want_feature = std::count(t.transfer.modes.begin(), t.transfer.modes.end(), InitMode::AmnFeature) > 0;
  AmnConfig pre = c.amn;
  pre.hidden = t.transfer.dqn.hidden;
  pre.steps = t.pretrain_steps;
  pre.epochs = 1;
  std::optional<MlpQ> policy_ckpt, feature_ckpt;
  if (want_policy) {
    pre.beta = 0.0;
    const AmnResult r = train_amn(distill_tasks(ctx, c.teacher == "dqn"), pre, derive_seed(c.seed, 5), "transfer_pretrain");
    policy_ckpt = r.model.net;
    save_net(ctx.out / "transfer" / "amn_policy.ckpt", *policy_ckpt);
  }
  if (want_feature) {
    pre.beta = t.feature_beta;
    const AmnResult r = train_amn(distill_tasks(ctx, true), pre, derive_seed(c.seed, 5), "transfer_pretrain_feature");
    feature_ckpt = r.model.net;
    save_net(ctx.out / "transfer" / "amn_feature.ckpt", *feature_ckpt);
  }
  std::vector<std::string> sources;
  for (const Game& g : ctx.games) sources.push_back(g.name);
  const TransferTable table = run_transfer_matrix(sources, targets, policy_ckpt ? &*policy_ckpt : nullptr,
                                                  feature_ckpt ? &*feature_ckpt : nullptr, t.transfer, ctx.jobs);
  std::ostringstream os;
  table.write(os);
  write_text(ctx.out / "transfer.tsv", os.str());
  ctx.metrics.extend(table.metrics("transfer"));
  std::string errors;
  for (const TransferCell& cell : table.cells)
    if (!cell.error.empty())
      errors += cell.target + "\t" + to_string(cell.mode) + "\t" + std::to_string(cell.seed) + "\t" + cell.error + "\n";
  if (!errors.empty()) write_text(ctx.out / "transfer_errors.tsv", errors);
}

void write_metrics_file(const Context& ctx) {
  std::ostringstream os;
  write_metrics(os, ctx.metrics);
  write_text(ctx.out / "metrics.tsv", os.str());
}

void write_manifest(const Context& ctx, const PipelineResult& result) {
  json files = json::object();
  for (const std::string& rel : list_files(ctx.out))
    if (rel != "manifest.json") files[rel] = sha256_file(ctx.out / rel);
  json m = {{"config_hash", config_hash(ctx.config)},
            {"seed", ctx.config.seed},
            {"stages", ctx.config.stages},
            {"completed", result.completed},
            {"status", result.ok() ? "complete" : "partial"},
            {"files", files}};
  if (!result.ok()) {
    m["failed_stage"] = result.failed_stage;
    m["error"] = result.error;
  }
  write_text(ctx.out / "manifest.json", m.dump(2) + "\n");
}

}  // namespace

void ExperimentConfig::validate() const {
  check(!stages.empty(), "stages", "at least one stage is required");
  std::size_t last = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto it = std::find(kStageOrder.begin(), kStageOrder.end(), stages[i]);
    check(it != kStageOrder.end(), "stages", "unknown stage '" + stages[i] + "'");
    const std::size_t pos = static_cast<std::size_t>(it - kStageOrder.begin());
    check(i == 0 || pos > last, "stages", "stages must be distinct and follow experts, amn, baseline, theory, transfer");
    last = pos;
  }
  auto has = [&](const char* s) { return contains(stages, s); };
  check(!has("amn") || has("experts"), "stages", "amn requires the experts stage");
  check(!has("baseline") || has("experts"), "stages", "baseline requires the experts stage");
  check(!has("transfer") || has("amn"), "stages", "transfer requires the amn stage");

  const std::vector<std::string> known = suite_names();
  std::set<std::string> unique;
  for (const std::string& g : games) {
    check(contains(known, g), "games", "unknown game '" + g + "'");
    check(unique.insert(g).second, "games", "game '" + g + "' listed twice");
  }

  check(!experts.kinds.empty(), "experts.kinds", "at least one kind is required");
  for (const std::string& k : experts.kinds)
    check(k == "oracle" || k == "dqn", "experts.kinds", "unknown kind '" + k + "' (expected oracle or dqn)");
  check(contains(experts.kinds, "oracle"), "experts.kinds", "oracle experts are required as the reference");
  check(experts.eval_episodes >= 1, "experts.eval_episodes", "must be positive");
  check_dqn(experts.dqn, "experts.dqn");
  check(teacher == "oracle" || teacher == "dqn", "teacher", "expected oracle or dqn");
  check(teacher == "oracle" || contains(experts.kinds, "dqn"), "teacher", "dqn teacher needs experts.kinds to include dqn");
  check_amn(amn, "amn");
  check(amn.beta == 0.0 || teacher == "dqn", "amn.beta", "feature regression needs the dqn teacher");

  check_dqn(baseline.dqn, "baseline.dqn");
  check(baseline.epochs >= 1, "baseline.epochs", "must be positive");

  check(theory.fixed_point.instances >= 1, "theory.fixed_point.instances", "must be positive");
  check(theory.fixed_point.lambda > 0.0, "theory.fixed_point.lambda", "must be positive");
  check(theory.fixed_point.inits >= 1, "theory.fixed_point.inits", "must be positive");
  check(theory.fixed_point.options.stochastic_steps >= 0, "theory.fixed_point.options.stochastic_steps",
        "must be non-negative");
  check(theory.contraction.instances >= 1, "theory.contraction.instances", "must be positive");
  check(theory.contraction.lambda > 0.0, "theory.contraction.lambda", "must be positive");
  check(theory.contraction.num_states >= 2, "theory.contraction.num_states", "must be at least 2");
  check(theory.contraction.options.outer_iters >= 1, "theory.contraction.options.outer_iters", "must be positive");
  check(theory.lemma.instances >= 1, "theory.lemma.instances", "must be positive");
  check(theory.lemma.pairs_per_instance >= 1, "theory.lemma.pairs_per_instance", "must be positive");
  check(theory.lemma.num_states >= 2, "theory.lemma.num_states", "must be at least 2");
  check_amn(theory.cost.amn, "theory.cost_to_go.amn");
  check(!theory.cost.seeds.empty(), "theory.cost_to_go.seeds", "at least one seed is required");
  for (int h : theory.cost.horizons) check(h >= 0, "theory.cost_to_go.horizons", "must be non-negative");

  const std::vector<std::string> held_out = target_names();
  for (const std::string& g : transfer.targets)
    check(contains(held_out, g), "transfer.targets", "unknown target '" + g + "'");
  check_dqn(transfer.transfer.dqn, "transfer.run.dqn");
  check(transfer.transfer.milestones >= 1, "transfer.run.milestones", "must be positive");
  check(!transfer.transfer.seeds.empty(), "transfer.run.seeds", "at least one seed is required");
  check(!transfer.transfer.modes.empty(), "transfer.run.modes", "at least one mode is required");
  const bool feature_mode =
      std::count(transfer.transfer.modes.begin(), transfer.transfer.modes.end(), InitMode::AmnFeature) > 0;
  check(!has("transfer") || !feature_mode || contains(experts.kinds, "dqn"), "transfer.run.modes",
        "amn_feature needs experts.kinds to include dqn");
  check(transfer.pretrain_steps >= 0, "transfer.pretrain_steps", "must be non-negative");
  check(5 * transfer.pretrain_steps <= experts.dqn.frames, "transfer.pretrain_steps",
        "exceeds 20% of the expert budget (" + std::to_string(experts.dqn.frames) + " frames)");
  check(transfer.feature_beta > 0.0, "transfer.feature_beta", "must be positive");
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON (") + e.what() + ")");
  }
  ExperimentConfig config;
  Reader r(j, "");
  visit(r, config);
  r.finish();
  return config;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& config) { return config_json(config).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig& config) {
  json j = config_json(config);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

PipelineResult run_pipeline(const ExperimentConfig& config, int jobs) {
  config.validate();
  Context ctx{config, std::max(1, jobs), fs::path(config.output_dir), {}, {}, {}, {}, {}};
  fs::create_directories(ctx.out);
  for (Game& g : build_game_suite())
    if (config.games.empty() || contains(config.games, g.name)) ctx.games.push_back(std::move(g));
  for (const Game& g : ctx.games) ctx.features.push_back(grid_features(g.spec));
  write_text(ctx.out / "config.json", config_to_json(config));

  PipelineResult result;
  const std::map<std::string, void (*)(Context&)> runners = {{"experts", stage_experts},
                                                             {"amn", stage_amn},
                                                             {"baseline", stage_baseline},
                                                             {"theory", stage_theory},
                                                             {"transfer", stage_transfer}};
  for (const std::string& stage : config.stages) {
    try {
      runners.at(stage)(ctx);
      result.completed.push_back(stage);
    } catch (const std::exception& e) {
      result.failed_stage = stage;
      result.error = e.what();
      break;
    }
    write_metrics_file(ctx);
  }
  write_metrics_file(ctx);
  write_manifest(ctx, result);
  return result;
}

VerifyReport verify_results(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw std::runtime_error("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw std::runtime_error("unreadable manifest: " + std::string(e.what()));
  }
  if (!m.contains("files") || !m["files"].is_object()) throw std::runtime_error("manifest has no file list");
  VerifyReport report;
  std::set<std::string> listed;
  for (auto it = m["files"].begin(); it != m["files"].end(); ++it) {
    listed.insert(it.key());
    const fs::path file = dir / it.key();
    if (!fs::exists(file)) {
      report.missing.push_back(it.key());
      continue;
    }
    ++report.checked;
    if (sha256_file(file) != it.value().get<std::string>()) report.mismatched.push_back(it.key());
  }
  for (const std::string& rel : list_files(dir))
    if (rel != "manifest.json" && !listed.count(rel)) report.unlisted.push_back(rel);
  return report;
}

Summary summarize_metrics(const MetricSeries& metrics) {
  Summary s;
  std::vector<std::string> order;
  std::set<std::string> stages;
  for (const MetricRecord& r : metrics.records()) {
    stages.insert(r.stage);
    if ((r.stage == "experts" || r.stage == "amn") && !contains(order, r.game)) order.push_back(r.game);
  }
  for (const std::string& g : order) {
    GameSummary row;
    row.game = g;
    const double oracle_mean = metrics.last("experts", g, "oracle_mean_return");
    row.expert_mean = std::isnan(oracle_mean) ? metrics.last("experts", g, "dqn_mean_return") : oracle_mean;
    row.amn_mean = metrics.last("amn", g, "mean_return");
    const auto maxes = metrics.values("amn", g, "max_return");
    row.amn_max = maxes.empty() ? kNaN : *std::max_element(maxes.begin(), maxes.end());
    row.ratio_percent = 100.0 * row.amn_mean / row.expert_mean;
    const double uniform = metrics.last("experts", g, "uniform_expected_return");
    const double expert = metrics.last("experts", g, "oracle_expected_return");
    auto norm = [&](double v) {
      if (std::isnan(v) || std::isnan(uniform) || std::isnan(expert) || expert == uniform) return kNaN;
      return normalized_return(v, uniform, expert);
    };
    row.amn_normalized = norm(metrics.last("amn", g, "expected_return"));
    row.baseline_normalized = norm(metrics.last("baseline", g, "expected_return"));
    s.games.push_back(row);
  }

  // Transfer medians over seeds, keyed by "target/mode".
  std::map<std::string, std::map<int, std::vector<double>>> cells;
  std::vector<std::string> cell_order;
  for (const MetricRecord& r : metrics.records()) {
    if (r.stage != "transfer" || r.metric != "expected_return") continue;
    if (!cells.count(r.game)) cell_order.push_back(r.game);
    cells[r.game][r.epoch].push_back(r.value);
  }
  for (const std::string& key : cell_order) {
    TransferSummaryRow row;
    const auto slash = key.find('/');
    row.target = key.substr(0, slash);
    row.mode = slash == std::string::npos ? "" : key.substr(slash + 1);
    for (auto& [milestone, v] : cells[key]) {
      std::sort(v.begin(), v.end());
      const std::size_t n = v.size();
      row.medians.push_back(n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
    }
    s.transfer.push_back(std::move(row));
  }

  for (const MetricRecord& r : metrics.records())
    if (r.stage == "theory" && r.metric == "passed") s.theory.emplace_back(r.game, r.value != 0.0);

  for (const char* stage : {"experts", "amn", "baseline", "theory", "transfer"})
    if (!stages.count(stage)) s.gaps.emplace_back(stage);
  return s;
}

Summary summarize_results(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw std::runtime_error("no manifest.json in " + dir.string());
  if (!fs::exists(dir / "metrics.tsv")) throw std::runtime_error("no metrics.tsv in " + dir.string());
  std::ifstream is(dir / "metrics.tsv");
  const MetricSeries metrics = read_metrics(is);
  if (metrics.empty()) throw std::runtime_error("metrics.tsv in " + dir.string() + " has no records");
  return summarize_metrics(metrics);
}

std::string Summary::render() const {
  std::ostringstream os;
  auto num = [](double v, int prec = 3) {
    if (std::isnan(v)) return std::string("-");
    std::ostringstream o;
    o << std::fixed << std::setprecision(prec) << v;
    return o.str();
  };
  if (!games.empty()) {
    os << "multitask\n";
    os << std::left << std::setw(18) << "game" << std::right << std::setw(12) << "expert_mean" << std::setw(12)
       << "amn_mean" << std::setw(12) << "amn_max" << std::setw(10) << "ratio%" << std::setw(10) << "amn_norm"
       << std::setw(10) << "base_norm" << '\n';
    for (const GameSummary& g : games)
      os << std::left << std::setw(18) << g.game << std::right << std::setw(12) << num(g.expert_mean)
         << std::setw(12) << num(g.amn_mean) << std::setw(12) << num(g.amn_max) << std::setw(10)
         << num(g.ratio_percent, 1) << std::setw(10) << num(g.amn_normalized) << std::setw(10)
         << num(g.baseline_normalized) << '\n';
  }
  if (!transfer.empty()) {
    os << "\ntransfer (median expected return per milestone)\n";
    for (const TransferSummaryRow& r : transfer) {
      os << std::left << std::setw(20) << r.target << std::setw(13) << r.mode << std::right;
      for (double m : r.medians) os << std::setw(8) << num(m, 2);
      os << '\n';
    }
  }
  if (!theory.empty()) {
    os << "\ntheory\n";
    for (const auto& [name, ok] : theory) os << "  " << std::left << std::setw(14) << name << (ok ? "PASS" : "FAIL") << '\n';
  }
  for (const std::string& g : gaps) os << "\n(no " << g << " data)";
  if (!gaps.empty()) os << '\n';
  return os.str();
}

}  // namespace amimic
