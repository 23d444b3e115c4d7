#include "steerkit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <sstream>

#include "steerkit/errors.hpp"
#include "steerkit/parallel.hpp"
#include "steerkit/result_store.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/sae_checkpoint.hpp"

namespace steerkit {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

namespace {

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

std::string lower_copy(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  return s;
}

std::string knob_label(const SaeConfig& sae) {
  switch (sae.architecture) {
    case SaeArchitecture::TopK:
    case SaeArchitecture::BatchTopK:
      return "k=" + std::to_string(sae.k);
    case SaeArchitecture::JumpReLU: {
      std::ostringstream out;
      out << "target_l0=" << sae.target_l0;
      return out.str();
    }
    default: {
      std::ostringstream out;
      out << "lambda=" << sae.lambda;
      return out.str();
    }
  }
}

}  // namespace

std::uint64_t ExperimentConfig::seed(const std::string& name) const {
  auto it = seeds.find(name);
  if (it != seeds.end()) return it->second;
  auto master = seeds.find("master");
  if (master == seeds.end())
    throw ValidationError("config: seed '" + name + "' missing and no master");
  return derive_seed(master->second, std::hash<std::string>{}(name));
}

const RunSpec& ExperimentConfig::run(const std::string& run_id) const {
  for (const auto& r : runs)
    if (r.run_id == run_id) return r;
  throw ValidationError("config: unknown run id '" + run_id + "'");
}

json default_desk_config() {
  json matrix = json::array();
  auto add = [&](const std::string& arch, const json& knobs) {
    json entry{{"architecture", arch}};
    entry.update(knobs);
    matrix.push_back(entry);
  };
  add("ReLU", {{"lambda", 0.012}});
  add("ReLU", {{"lambda", 0.04}});
  add("Gated", {{"lambda", 0.012}});
  add("Gated", {{"lambda", 0.04}});
  add("TopK", {{"k", 8}});
  add("TopK", {{"k", 32}});
  add("BatchTopK", {{"k", 8}});
  add("BatchTopK", {{"k", 32}});
  add("JumpReLU", {{"target_l0", 8}});
  add("JumpReLU", {{"target_l0", 32}});

  return json{
      {"output", "runs/desk"},
      {"threads", 0},
      {"seeds", {{"master", 1}}},
      {"lm",
       {{"vocab_size", 256},
        {"d_model", 64},
        {"n_layers", 2},
        {"n_heads", 4},
        {"context", 128},
        {"seed", 7}}},
      {"data", {{"n_tokens", 120000}}},
      {"sae", {{"dict_size", 512}, {"seed", 3}, {"matrix", matrix}}},
      {"train",
       {{"lr", 3e-4},
        {"lr_warmup_steps", 200},
        {"sparsity_warmup_steps", 600},
        {"decay_start_fraction", 0.8},
        {"total_steps", 1500},
        {"batch", 128},
        {"aux_k_coeff", 1.0 / 32.0},
        {"k_aux", 32},
        {"dead_window", 500},
        {"threshold_tracking_start", 1000},
        {"threshold_momentum", 0.999}}},
      {"interp",
       {{"n_latents", 200}, {"concept_count", 25}, {"judge", "keyword"}}},
      {"steer",
       {{"factor_grid", {0.5, 1.0, 2.0, 4.0, 8.0, 16.0}},
        {"max_tokens", 32},
        {"judge", "synthetic"},
        {"mode", "decoder_atom"}}},
      {"select",
       {{"alpha", 10.0},
        {"k", 1},
        {"intervention", "additive"},
        {"tier_mode", "abs"},
        {"tier_topk", {1, 2, 3, 4, 5}},
        {"prefix", kDefaultProbePrefix}}},
      {"stats", {{"n_perm", 10000}, {"n_boot", 10000}, {"level", 0.95}}},
  };
}

ExperimentConfig config_from_json(json j) {
  // Fill defaults for missing sections from the desk config.
  json base = default_desk_config();
  for (auto& [key, value] : base.items()) {
    if (!j.contains(key)) j[key] = value;
  }

  ExperimentConfig cfg;
  cfg.output = j.at("output").get<std::string>();
  cfg.threads = j.value("threads", 0);

  for (auto& [name, value] : j.at("seeds").items())
    cfg.seeds[name] = value.get<std::uint64_t>();
  if (!cfg.seeds.count("master"))
    throw ValidationError("config: seeds.master is required");

  const json& lm = j.at("lm");
  cfg.lm.vocab_size = lm.value("vocab_size", 256);
  cfg.lm.d_model = lm.value("d_model", 64);
  cfg.lm.n_layers = lm.value("n_layers", 2);
  cfg.lm.n_heads = lm.value("n_heads", 4);
  cfg.lm.context = lm.value("context", 128);
  cfg.lm.seed = lm.value("seed", std::uint64_t(7));
  cfg.lm.validate();

  cfg.corpus_tokens = j.at("data").value("n_tokens", 120000);

  const json& sae = j.at("sae");
  const int default_dict = sae.value("dict_size", 512);
  const std::uint64_t sae_seed = sae.value("seed", std::uint64_t(3));
  std::set<std::string> ids;
  for (const json& entry : sae.at("matrix")) {
    RunSpec run;
    run.sae.architecture =
        parse_architecture(entry.at("architecture").get<std::string>());
    run.sae.d = cfg.lm.d_model;
    run.sae.dict_size = entry.value("dict_size", default_dict);
    run.sae.k = entry.value("k", 0);
    run.sae.lambda = entry.value("lambda", 0.0);
    run.sae.target_l0 = entry.value("target_l0", 0.0);
    run.sae.seed = entry.value("seed", sae_seed);
    run.sae.validate();
    run.sparsity_label = knob_label(run.sae);
    run.run_id = entry.value(
        "run_id", lower_copy(to_string(run.sae.architecture)) + "-" +
                      run.sparsity_label + "-s" + std::to_string(run.sae.seed));
    if (!ids.insert(run.run_id).second)
      throw ValidationError("config: duplicate run id '" + run.run_id + "'");
    cfg.runs.push_back(std::move(run));
  }
  if (cfg.runs.empty()) throw ValidationError("config: empty sae matrix");

  const json& train = j.at("train");
  cfg.train.lr = train.value("lr", 3e-4);
  cfg.train.lr_warmup_steps = train.value("lr_warmup_steps", 1000);
  cfg.train.sparsity_warmup_steps = train.value("sparsity_warmup_steps", 5000);
  cfg.train.decay_start_fraction = train.value("decay_start_fraction", 0.8);
  cfg.train.total_steps = train.at("total_steps").get<int>();
  cfg.train.batch = train.at("batch").get<int>();
  cfg.train.aux_k_coeff = train.value("aux_k_coeff", 1.0 / 32.0);
  cfg.train.k_aux = train.value("k_aux", 32);
  cfg.train.dead_window = train.value("dead_window", 1000);
  cfg.train.threshold_tracking_start =
      train.value("threshold_tracking_start", 1000);
  cfg.train.threshold_momentum = train.value("threshold_momentum", 0.999);
  cfg.train.seed = cfg.seed("train");
  cfg.train.validate();

  const json& interp = j.at("interp");
  cfg.interp.n_latents = interp.value("n_latents", 200);
  cfg.interp.concept_count = interp.value("concept_count", 25);
  cfg.interp.threads = cfg.threads;
  cfg.interp_judge = interp.value("judge", std::string("keyword"));
  cfg.oracle_rho = interp.value("oracle_rho", 0.0);
  if (cfg.interp_judge != "keyword" && cfg.interp_judge != "oracle" &&
      cfg.interp_judge != "external")
    throw ValidationError("config: interp.judge must be keyword|oracle|external");

  const json& steer = j.at("steer");
  cfg.factor_grid = steer.at("factor_grid").get<std::vector<double>>();
  if (cfg.factor_grid.empty())
    throw ValidationError("config: steer.factor_grid must be non-empty");
  cfg.steer_max_tokens = steer.value("max_tokens", 32);
  cfg.steering_judge = steer.value("judge", std::string("synthetic"));
  if (cfg.steering_judge != "synthetic" && cfg.steering_judge != "external")
    throw ValidationError("config: steer.judge must be synthetic|external");
  const std::string mode = steer.value("mode", std::string("decoder_atom"));
  if (mode == "decoder_atom")
    cfg.steering_mode = SteeringMode::DecoderAtom;
  else if (mode == "code_amplify")
    cfg.steering_mode = SteeringMode::CodeAmplify;
  else
    throw ValidationError("config: steer.mode must be decoder_atom|code_amplify");

  const json& select = j.at("select");
  cfg.select_alpha = select.value("alpha", 10.0);
  cfg.select_k = select.value("k", 1);
  const std::string intervention =
      select.value("intervention", std::string("additive"));
  if (intervention == "additive")
    cfg.select_intervention = InterventionMode::Additive;
  else if (intervention == "amplify")
    cfg.select_intervention = InterventionMode::Amplify;
  else
    throw ValidationError("config: select.intervention must be additive|amplify");
  const std::string tier_mode = select.value("tier_mode", std::string("abs"));
  if (tier_mode == "abs")
    cfg.tier_mode = TierMode::Abs;
  else if (tier_mode == "up")
    cfg.tier_mode = TierMode::Up;
  else if (tier_mode == "down")
    cfg.tier_mode = TierMode::Down;
  else
    throw ValidationError("config: select.tier_mode must be abs|up|down");
  cfg.tier_topk = select.value("tier_topk", std::vector<int>{1, 2, 3, 4, 5});
  cfg.probe_prefix = select.value("prefix", std::string(kDefaultProbePrefix));

  const json& stats = j.at("stats");
  cfg.stats.n_perm = stats.value("n_perm", 10000);
  cfg.stats.n_boot = stats.value("n_boot", 10000);
  cfg.stats.level = stats.value("level", 0.95);
  cfg.stats.seed = cfg.seed("stats");

  if (j.contains("judge_external")) {
    const json& ext = j.at("judge_external");
    cfg.external.endpoint = ext.value("endpoint", std::string());
    cfg.external.model = ext.value("model", std::string());
    cfg.external.auth_env = ext.value("auth_env", std::string("JUDGE_API_KEY"));
    cfg.external.timeout_seconds = ext.value("timeout_seconds", 30);
    cfg.external.max_retries = ext.value("max_retries", 3);
    cfg.external.backoff_seconds = ext.value("backoff_seconds", 0.5);
    cfg.external.max_in_flight = ext.value("max_in_flight", 4);
  }

  // Hash of the resolved config, output path excluded so a relocated run
  // directory stays valid.
  json hashed = j;
  hashed.erase("output");
  cfg.config_hash = fnv1a_hex(hashed.dump());
  return cfg;
}

ExperimentConfig validate_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config file '" + path.string() + "' missing");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw ValidationError("config file '" + path.string() + "' is not valid JSON");
  return config_from_json(std::move(j));
}

// ---------------------------------------------------------------------------
// Stage plumbing

Stage parse_stage(const std::string& name) {
  if (name == "gen-data") return Stage::GenData;
  if (name == "train-sae") return Stage::TrainSae;
  if (name == "eval-interp") return Stage::EvalInterp;
  if (name == "eval-steering") return Stage::EvalSteering;
  if (name == "select-features") return Stage::SelectFeatures;
  if (name == "rank-analysis") return Stage::RankAnalysis;
  if (name == "report") return Stage::Report;
  throw ValidationError("unknown stage '" + name + "'");
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::GenData: return "gen-data";
    case Stage::TrainSae: return "train-sae";
    case Stage::EvalInterp: return "eval-interp";
    case Stage::EvalSteering: return "eval-steering";
    case Stage::SelectFeatures: return "select-features";
    case Stage::RankAnalysis: return "rank-analysis";
    case Stage::Report: return "report";
  }
  return "?";
}

namespace {

const char* kDataToken = "__data__";

std::vector<std::string> stage_record_kinds(Stage stage) {
  switch (stage) {
    case Stage::TrainSae: return {"train_metrics"};
    case Stage::EvalInterp: return {"interp", "latent_score", "concept"};
    case Stage::EvalSteering: return {"steering", "steering_concept"};
    case Stage::SelectFeatures: return {"selection", "delta_histogram"};
    case Stage::RankAnalysis: return {"rank_table1", "rank_table2"};
    default: return {};
  }
}

struct StageContext {
  const ExperimentConfig& cfg;
  StageOptions opt;

  fs::path out() const { return cfg.output; }
  fs::path data_dir() const { return out() / "data"; }
  fs::path sae_dir() const { return out() / "sae"; }
  fs::path report_dir() const { return out() / "report"; }
  fs::path store_path() const { return out() / "results.jsonl"; }
  fs::path stamp_path(Stage s) const {
    return out() / "stamps" / (to_string(s) + ".json");
  }
  fs::path corpus_path() const { return data_dir() / "corpus.stkt"; }
  fs::path lm_path() const { return data_dir() / "toy_lm.stkt"; }
  fs::path checkpoint_path(const std::string& run) const {
    return sae_dir() / (run + ".stkt");
  }

  std::vector<std::string> requested_units(Stage s) const {
    if (s == Stage::GenData || s == Stage::RankAnalysis || s == Stage::Report)
      return {kDataToken};
    std::vector<std::string> out_ids;
    for (const auto& r : cfg.runs)
      if (opt.runs_filter.empty() ||
          r.run_id.find(opt.runs_filter) != std::string::npos)
        out_ids.push_back(r.run_id);
    if (out_ids.empty())
      throw ValidationError("runs filter '" + opt.runs_filter +
                            "' matches no run ids");
    return out_ids;
  }

  std::set<std::string> completed_units(Stage s) const {
    const fs::path path = stamp_path(s);
    if (!fs::exists(path)) return {};
    std::ifstream in(path);
    json stamp = json::parse(in, nullptr, false);
    if (stamp.is_discarded() ||
        stamp.value("config_hash", "") != cfg.config_hash)
      return {};
    std::set<std::string> done;
    for (const auto& u : stamp.value("units", json::array()))
      done.insert(u.get<std::string>());
    return done;
  }

  void write_stamp(Stage s, const std::set<std::string>& units) const {
    fs::create_directories(stamp_path(s).parent_path());
    json stamp{{"config_hash", cfg.config_hash},
               {"units", json::array()}};
    for (const auto& u : units) stamp["units"].push_back(u);
    std::ofstream out_file(stamp_path(s));
    out_file << stamp.dump(2) << "\n";
  }

  void require(Stage dep, const std::vector<std::string>& units) const {
    const std::set<std::string> done = completed_units(dep);
    for (const auto& u : units)
      if (!done.count(u))
        throw MissingDependencyError("stage " + to_string(dep) +
                                     " has not produced '" + u +
                                     "' (run it first)");
  }

  // Units of `stage` still to do; purges their stale records first.
  std::vector<std::string> pending_units(Stage stage) {
    const std::vector<std::string> requested = requested_units(stage);
    std::set<std::string> done =
        opt.force ? std::set<std::string>{} : completed_units(stage);
    std::vector<std::string> todo;
    for (const auto& u : requested)
      if (!done.count(u)) todo.push_back(u);
    const auto kinds = stage_record_kinds(stage);
    if (!todo.empty() && !kinds.empty() && fs::exists(store_path())) {
      std::set<std::string> todo_set(todo.begin(), todo.end());
      ResultStore::compact(store_path(), [&](const json& rec) {
        if (!todo_set.count(rec.at("run_id").get<std::string>())) return true;
        const std::string kind = rec.at("kind").get<std::string>();
        return std::find(kinds.begin(), kinds.end(), kind) == kinds.end();
      });
    }
    return todo;
  }

  void mark_done(Stage stage, const std::vector<std::string>& finished) const {
    std::set<std::string> done = completed_units(stage);
    done.insert(finished.begin(), finished.end());
    write_stamp(stage, done);
  }
};

std::unique_ptr<SteeringJudge> make_steering_judge(const ExperimentConfig& cfg) {
  if (cfg.steering_judge == "synthetic")
    return std::make_unique<SyntheticSteeringJudge>(cfg.seed("steer"));
  auto client = std::make_shared<LlmClient>(cfg.external);
  return std::make_unique<ExternalSteeringJudge>(client);
}

std::unique_ptr<InterpJudge> make_interp_judge(const ExperimentConfig& cfg) {
  if (cfg.interp_judge == "keyword")
    return std::make_unique<KeywordInterpJudge>();
  if (cfg.interp_judge == "oracle")
    return std::make_unique<OracleInterpJudge>(cfg.oracle_rho,
                                               cfg.seed("interp"));
  auto client = std::make_shared<LlmClient>(cfg.external);
  return std::make_unique<LlmInterpJudge>(client);
}

// ---------------------------------------------------------------------------
// Stages

void stage_gen_data(StageContext& ctx) {
  const auto todo = ctx.pending_units(Stage::GenData);
  if (todo.empty()) return;
  fs::create_directories(ctx.data_dir());
  const ToyLm lm(ctx.cfg.lm);
  const ActivationDataset ds =
      lm.build_corpus(ctx.cfg.corpus_tokens, ctx.cfg.seed("corpus"));
  save_dataset(ctx.corpus_path(), ds);
  write_container(ctx.lm_path(), lm.weights_container());
  ctx.mark_done(Stage::GenData, todo);
}

void stage_train_sae(StageContext& ctx) {
  ctx.require(Stage::GenData, {kDataToken});
  const auto todo = ctx.pending_units(Stage::TrainSae);
  if (todo.empty()) return;
  fs::create_directories(ctx.sae_dir());
  const ActivationDataset ds = load_dataset(ctx.corpus_path());

  struct RunOutput {
    std::string run_id;
    TrainMetrics metrics;
  };
  std::vector<RunOutput> outputs(todo.size());
  parallel_for(todo.size(), ctx.cfg.threads, [&](std::size_t i) {
    const RunSpec& spec = ctx.cfg.run(todo[i]);
    TrainConfig tc = ctx.cfg.train;
    tc.seed = derive_seed(ctx.cfg.seed("train"),
                          std::hash<std::string>{}(spec.run_id));
    TrainResult result = train(ds, spec.sae, tc);
    save_sae(ctx.checkpoint_path(spec.run_id), result.params);
    outputs[i] = RunOutput{spec.run_id, std::move(result.metrics)};
  });

  ResultStore store(ctx.store_path());
  for (const auto& out : outputs) {
    const TrainMetrics& m = out.metrics;
    const std::size_t head = std::max<std::size_t>(1, m.total.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < head; ++i) {
      first += m.total[i];
      last += m.total[m.total.size() - 1 - i];
    }
    store.append(out.run_id, "train_metrics",
                 json{{"final_l0", m.final_l0},
                      {"steps", m.total.size()},
                      {"total_first_decile_mean", first / double(head)},
                      {"total_last_decile_mean", last / double(head)},
                      {"final_lr", m.lr.back()},
                      {"final_lambda_eff", m.lambda_eff.back()}});
  }
  ctx.mark_done(Stage::TrainSae, todo);
}

void stage_eval_interp(StageContext& ctx) {
  ctx.require(Stage::GenData, {kDataToken});
  const auto todo = ctx.pending_units(Stage::EvalInterp);
  if (todo.empty()) return;
  ctx.require(Stage::TrainSae, todo);

  const ActivationDataset ds = load_dataset(ctx.corpus_path());
  ResultStore store(ctx.store_path());

  for (const auto& run_id : todo) {
    const SaeParams params = load_sae(ctx.checkpoint_path(run_id));
    auto judge = make_interp_judge(ctx.cfg);
    const InterpResult result = sae_interp_score(
        params, ds, *judge,
        derive_seed(ctx.cfg.seed("interp"), std::hash<std::string>{}(run_id)),
        ctx.cfg.interp);

    for (const auto& s : result.scored)
      store.append(run_id, "latent_score",
                   json{{"latent", s.latent},
                        {"accuracy", s.accuracy},
                        {"description", s.description}},
                   std::to_string(s.latent));
    for (const auto& c : result.concepts)
      store.append(run_id, "concept",
                   json{{"latent", c.latent},
                        {"concept_id", c.concept_id},
                        {"description", c.description},
                        {"accuracy", c.accuracy}},
                   c.concept_id);
    store.append(run_id, "interp",
                 json{{"mu", result.mu},
                      {"n_scored", result.scored.size()},
                      {"concept_count", result.concepts.size()}});
  }
  ctx.mark_done(Stage::EvalInterp, todo);
}

json record_of(const GenerationRecord& rec) {
  return json{{"instruction", rec.instruction_index},
              {"factor", rec.factor},
              {"hm", rec.hm},
              {"concept_score", rec.rating.concept_score},
              {"instruction_score", rec.rating.instruction},
              {"fluency", rec.rating.fluency},
              {"judge_failed", rec.judge_failed}};
}

ConceptTask make_task(const ExperimentConfig& cfg, const std::string& run_id,
                      int latent, const std::string& concept_id,
                      const std::string& description) {
  ConceptTask task;
  task.concept_id = concept_id;
  task.feature = latent;
  task.description = description;
  const std::uint64_t task_seed =
      derive_seed(cfg.seed("steer"), std::hash<std::string>{}(run_id),
                  std::uint64_t(latent));
  task.instructions =
      concept_instructions(concept_keyword(description), task_seed);
  assign_splits(task, task_seed);
  return task;
}

void stage_eval_steering(StageContext& ctx) {
  ctx.require(Stage::GenData, {kDataToken});
  const auto todo = ctx.pending_units(Stage::EvalSteering);
  if (todo.empty()) return;
  ctx.require(Stage::EvalInterp, todo);

  const ActivationDataset ds = load_dataset(ctx.corpus_path());
  const ToyLm lm(ctx.cfg.lm);
  ResultStore store(ctx.store_path());

  for (const auto& run_id : todo) {
    const SaeParams params = load_sae(ctx.checkpoint_path(run_id));
    const Eigen::VectorXd max_acts = feature_max_activations(params, ds);
    const auto concepts = store.find(run_id, "concept");

    struct ConceptOutput {
      std::string concept_id;
      SteeringOutcome outcome;
      ConceptTask task;
    };
    std::vector<ConceptOutput> outputs(concepts.size());
    auto judge = make_steering_judge(ctx.cfg);

    parallel_for(concepts.size(), ctx.cfg.threads, [&](std::size_t i) {
      const json& c = concepts[i];
      const int latent = c.at("latent").get<int>();
      ConceptTask task =
          make_task(ctx.cfg, run_id, latent,
                    c.at("concept_id").get<std::string>(),
                    c.at("description").get<std::string>());
      SteeringSpec spec;
      spec.feature = latent;
      spec.scale = max_acts(latent);
      spec.layer = ds.layer;
      spec.mode = ctx.cfg.steering_mode;

      SteeringEvalConfig ec;
      ec.max_tokens = ctx.cfg.steer_max_tokens;
      ec.seed = derive_seed(ctx.cfg.seed("steer"),
                            std::hash<std::string>{}(run_id));
      SteeringOutcome outcome = sweep_factors(task, ctx.cfg.factor_grid, spec,
                                              lm, params, *judge, ec);
      heldout_score(task, outcome, spec, lm, params, *judge, ec);
      outputs[i] = ConceptOutput{task.concept_id, std::move(outcome),
                                 std::move(task)};
    });

    std::vector<double> per_concept;
    for (const auto& out : outputs) {
      per_concept.push_back(out.outcome.heldout_mean);
      json dev = json::array(), held = json::array();
      for (const auto& r : out.outcome.dev_records) dev.push_back(record_of(r));
      for (const auto& r : out.outcome.heldout_records)
        held.push_back(record_of(r));
      store.append(run_id, "steering_concept",
                   json{{"concept_id", out.concept_id},
                        {"feature", out.task.feature},
                        {"factor_grid", out.outcome.factor_grid},
                        {"dev_mean", out.outcome.dev_mean},
                        {"best_factor", out.outcome.best_factor},
                        {"heldout_mean", out.outcome.heldout_mean},
                        {"dev_split", out.task.dev_split},
                        {"heldout_split", out.task.heldout_split},
                        {"dev_records", dev},
                        {"heldout_records", held}},
                   out.concept_id);
    }
    store.append(run_id, "steering",
                 json{{"g", sae_steering_score(per_concept)},
                      {"concepts", per_concept.size()}});
  }
  ctx.mark_done(Stage::EvalSteering, todo);
}

void stage_select_features(StageContext& ctx) {
  ctx.require(Stage::GenData, {kDataToken});
  const auto todo = ctx.pending_units(Stage::SelectFeatures);
  if (todo.empty()) return;
  ctx.require(Stage::EvalSteering, todo);

  const ActivationDataset ds = load_dataset(ctx.corpus_path());
  const ToyLm lm(ctx.cfg.lm);
  ResultStore store(ctx.store_path());

  std::vector<int> prefix_tokens;
  prefix_tokens.push_back(ToyLm::kDocSep);
  for (int t : text_to_tokens(ctx.cfg.probe_prefix)) prefix_tokens.push_back(t);

  for (const auto& run_id : todo) {
    const SaeParams params = load_sae(ctx.checkpoint_path(run_id));
    const Eigen::VectorXd max_acts = feature_max_activations(params, ds);

    const std::vector<DeltaRecord> deltas = delta_confidence_all(
        lm, params, ctx.cfg.select_alpha, ctx.cfg.select_k, prefix_tokens,
        ctx.cfg.select_intervention, ds.layer, ctx.cfg.threads);

    json delta_dump = json::array();
    for (const auto& d : deltas) delta_dump.push_back(d.delta);
    store.append(run_id, "delta_histogram",
                 json{{"alpha", ctx.cfg.select_alpha},
                      {"k", ctx.cfg.select_k},
                      {"deltas", delta_dump}});

    // Tier pool: features with a persisted description.
    std::map<int, std::string> descriptions;
    for (const auto& rec : store.find(run_id, "latent_score"))
      descriptions[rec.at("latent").get<int>()] =
          rec.at("description").get<std::string>();
    std::vector<DeltaRecord> pool;
    for (const auto& d : deltas)
      if (descriptions.count(d.feature)) pool.push_back(d);
    if (pool.empty())
      throw MissingDependencyError("select-features: no described features");

    std::vector<SelectionSet> tiers;
    for (int k_tier : ctx.cfg.tier_topk) {
      TierRule rule;
      rule.kind = TierRule::Kind::TopK;
      rule.top_k = k_tier;
      tiers.push_back(rank_and_tier(pool, rule, ctx.cfg.tier_mode));
    }

    // Dev-protocol evaluation per feature, memoized across nested tiers.
    auto judge = make_steering_judge(ctx.cfg);
    SteeringEvalConfig ec;
    ec.max_tokens = ctx.cfg.steer_max_tokens;
    ec.seed =
        derive_seed(ctx.cfg.seed("steer"), std::hash<std::string>{}(run_id));

    struct FeatureEval {
      ConceptTask task;
      SteeringOutcome outcome;
      double dev_best = 0.0;
    };
    std::map<int, FeatureEval> cache;
    auto evaluate_feature = [&](int feature) -> FeatureEval& {
      auto it = cache.find(feature);
      if (it != cache.end()) return it->second;
      FeatureEval fe;
      fe.task = make_task(ctx.cfg, run_id, feature,
                          std::to_string(ds.layer) + "_" +
                              std::to_string(feature),
                          descriptions.at(feature));
      SteeringSpec spec;
      spec.feature = feature;
      spec.scale = max_acts(feature);
      spec.layer = ds.layer;
      spec.mode = ctx.cfg.steering_mode;
      fe.outcome = sweep_factors(fe.task, ctx.cfg.factor_grid, spec, lm,
                                 params, *judge, ec);
      fe.dev_best = *std::max_element(fe.outcome.dev_mean.begin(),
                                      fe.outcome.dev_mean.end());
      return cache.emplace(feature, std::move(fe)).first->second;
    };
    const auto tier_dev_score = [&](const SelectionSet& tier) {
      double acc = 0.0;
      for (int f : tier.features) acc += evaluate_feature(f).dev_best;
      return tier.features.empty() ? 0.0 : acc / double(tier.features.size());
    };

    const SelectionSet best_tier = select_best_tier(tiers, tier_dev_score);

    double selected_sum = 0.0;
    json tier_features = json::array();
    for (int f : best_tier.features) {
      FeatureEval& fe = evaluate_feature(f);
      SteeringSpec spec;
      spec.feature = f;
      spec.scale = max_acts(f);
      spec.layer = ds.layer;
      spec.mode = ctx.cfg.steering_mode;
      const double held =
          heldout_score(fe.task, fe.outcome, spec, lm, params, *judge, ec);
      selected_sum += held;
      tier_features.push_back(json{{"feature", f},
                                   {"best_factor", fe.outcome.best_factor},
                                   {"dev_best", fe.dev_best},
                                   {"heldout", held}});
    }
    const double selected =
        selected_sum / double(best_tier.features.size());

    const double base = store.get(run_id, "steering").at("g").get<double>();
    json selection{{"rule", best_tier.rule},
                   {"mode", int(best_tier.mode)},
                   {"features", best_tier.features},
                   {"tier_detail", tier_features},
                   {"selected_score", selected},
                   {"base_score", base}};
    if (base > 0.0)
      selection["gain"] = steering_gain(base, selected);
    else
      selection["gain"] = nullptr;  // undefined at base = 0
    store.append(run_id, "selection", std::move(selection));
  }
  ctx.mark_done(Stage::SelectFeatures, todo);
}

// ----- rank analysis -------------------------------------------------------

json tau_to_json(const TauResult& t) {
  json out{{"tau_b", t.tau_b}, {"n", t.n}, {"pairs", t.pairs}};
  out["p"] = t.p_value ? json(*t.p_value) : json(nullptr);
  if (t.ci)
    out["ci"] = json{{"lo", t.ci->first},
                     {"hi", t.ci->second},
                     {"method", t.ci_method}};
  else
    out["ci"] = nullptr;
  return out;
}

json axis_to_json(const AxisSummary& a) {
  json groups = json::array();
  for (const auto& g : a.groups)
    groups.push_back(json{{"label", g.label}, {"tau", tau_to_json(g.tau)}});
  return json{{"axis", to_string(a.axis)},
              {"psi", a.psi},
              {"se", a.se},
              {"boot_ci", {a.boot_ci.first, a.boot_ci.second}},
              {"groups", groups}};
}

json analyze_fields(const std::vector<ScoreRecord>& records, Field x, Field y,
                    const StatsSettings& settings) {
  std::vector<double> xs, ys;
  for (const auto& r : records) {
    xs.push_back(field_value(r, x));
    ys.push_back(field_value(r, y));
  }

  json out;
  json overall;
  try {
    TauResult tau = kendall_tau_b(xs, ys);
    if (int(xs.size()) >= 8) {
      tau.ci = bca_bootstrap_ci(xs, ys, settings.n_boot, settings.seed,
                                settings.level);
      tau.ci_method = "bca_bootstrap";
    }
    overall = tau_to_json(tau);
  } catch (const DegenerateInputError& e) {
    overall = json{{"degenerate", e.what()}};
  }
  out["overall"] = overall;

  json axes = json::array();
  std::vector<double> psis;
  for (Axis axis :
       {Axis::Architecture, Axis::MatchedSparsity, Axis::Model}) {
    try {
      const AxisSummary summary =
          granulated_psi(records, axis, x, y, settings);
      psis.push_back(summary.psi);
      axes.push_back(axis_to_json(summary));
    } catch (const DegenerateInputError& e) {
      axes.push_back(json{{"axis", to_string(axis)}, {"degenerate", e.what()}});
    }
  }
  out["axes"] = axes;
  out["Psi"] = psis.empty() ? json(nullptr) : json(aggregate_psi(psis));

  json ids = json::array();
  for (const auto& r : records) ids.push_back(r.sae_id);
  out["records"] = ids;
  return out;
}

void stage_rank_analysis(StageContext& ctx) {
  const auto todo = ctx.pending_units(Stage::RankAnalysis);
  if (todo.empty()) return;
  std::vector<std::string> all_runs;
  for (const auto& r : ctx.cfg.runs) all_runs.push_back(r.run_id);
  ctx.require(Stage::EvalInterp, all_runs);
  ctx.require(Stage::EvalSteering, all_runs);
  ctx.require(Stage::SelectFeatures, all_runs);

  ResultStore store(ctx.store_path());
  const std::string model_label = ctx.cfg.lm.model_id();

  // Matched-sparsity slots: rank of measured final L0 within each
  // (model, architecture) family.
  std::map<std::string, std::vector<std::pair<double, std::string>>> families;
  for (const auto& run : ctx.cfg.runs) {
    const double final_l0 =
        store.get(run.run_id, "train_metrics").at("final_l0").get<double>();
    families[to_string(run.sae.architecture)].emplace_back(final_l0,
                                                           run.run_id);
  }
  std::map<std::string, std::string> slot_of;
  for (auto& [arch, members] : families) {
    std::sort(members.begin(), members.end());
    for (std::size_t i = 0; i < members.size(); ++i)
      slot_of[members[i].second] = "slot" + std::to_string(i);
  }

  std::vector<ScoreRecord> records;
  for (const auto& run : ctx.cfg.runs) {
    ScoreRecord rec;
    rec.sae_id = run.run_id;
    rec.arch_label = to_string(run.sae.architecture);
    rec.sparsity_slot = slot_of.at(run.run_id);
    rec.model_label = model_label;
    rec.mu = store.get(run.run_id, "interp").at("mu").get<double>();
    rec.g = store.get(run.run_id, "steering").at("g").get<double>();
    const json gain = store.get(run.run_id, "selection").at("gain");
    if (!gain.is_null()) rec.gain = gain.get<double>();
    records.push_back(std::move(rec));
  }

  StatsSettings settings = ctx.cfg.stats;
  store.append("__analysis__", "rank_table1",
               analyze_fields(records, Field::Mu, Field::G, settings));

  std::vector<ScoreRecord> with_gain;
  for (const auto& r : records)
    if (r.gain) with_gain.push_back(r);
  json table2;
  if (with_gain.size() >= 2) {
    settings.seed = derive_seed(ctx.cfg.stats.seed, 2);
    table2 = analyze_fields(with_gain, Field::Mu, Field::Gain, settings);
  } else {
    table2 = json{{"degenerate", "fewer than 2 records with defined gain"}};
  }
  store.append("__analysis__", "rank_table2", std::move(table2));
  ctx.mark_done(Stage::RankAnalysis, todo);
}

// ----- report --------------------------------------------------------------

std::string fmt(double v, int prec = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(prec);
  out << v;
  return out.str();
}

std::string tau_row(const std::string& axis, const std::string& label,
                    const json& tau) {
  std::ostringstream out;
  out << axis << "\t" << label << "\t";
  if (tau.contains("degenerate")) {
    out << "degenerate: " << tau.at("degenerate").get<std::string>();
    return out.str();
  }
  out << tau.at("n").get<int>() << "\t" << tau.at("pairs").get<long>() << "\t"
      << fmt(tau.at("tau_b").get<double>());
  out << "\t";
  if (tau.at("p").is_null())
    out << "---";
  else
    out << fmt(tau.at("p").get<double>());
  out << "\t";
  if (tau.at("ci").is_null()) {
    out << "---";
  } else {
    const json& ci = tau.at("ci");
    out << "[" << fmt(ci.at("lo").get<double>()) << ", "
        << fmt(ci.at("hi").get<double>()) << "] ("
        << ci.at("method").get<std::string>() << ")";
  }
  return out.str();
}

std::string render_rank_table(const std::string& title, const json& table) {
  std::ostringstream out;
  out << "== " << title << " ==\n";
  out << "Axis\tSAEs\tn\tPairs\ttau_b\tp\t95% CI\n";
  out << tau_row("Overall", "All SAEs", table.at("overall")) << "\n";
  if (table.contains("axes")) {
    for (const json& axis : table.at("axes")) {
      const std::string axis_name = axis.at("axis").get<std::string>();
      if (axis.contains("degenerate")) {
        out << axis_name << "\t(" << axis.at("degenerate").get<std::string>()
            << ")\n";
        continue;
      }
      out << "Psi " << axis_name << " = " << fmt(axis.at("psi").get<double>())
          << " (SE " << fmt(axis.at("se").get<double>()) << ", boot CI ["
          << fmt(axis.at("boot_ci")[0].get<double>()) << ", "
          << fmt(axis.at("boot_ci")[1].get<double>()) << "])\n";
      for (const json& group : axis.at("groups"))
        out << tau_row(axis_name, group.at("label").get<std::string>(),
                       group.at("tau"))
            << "\n";
    }
  }
  if (!table.contains("degenerate")) {
    const json& psi = table.at("Psi");
    out << "Psi = "
        << (psi.is_null() ? std::string("---") : fmt(psi.get<double>()))
        << "\n";
  } else {
    out << "(" << table.at("degenerate").get<std::string>() << ")\n";
  }
  return out.str();
}

}  // namespace

std::string render_method_table(const std::vector<MethodComparisonRow>& rows) {
  std::ostringstream out;
  out << "Method";
  for (const auto& r : rows) out << "\t" << r.model;
  out << "\n";
  out << "SAE-based";
  for (const auto& r : rows) out << "\t" << fmt(r.base, 3);
  out << "\n";
  out << "+dTC (selected)";
  for (const auto& r : rows) out << "\t" << fmt(r.selected, 3);
  out << "\n";
  out << "Lift";
  for (const auto& r : rows) {
    out << "\t";
    if (r.base > 0.0) {
      const double lift = steering_gain(r.base, r.selected);
      out << (lift >= 0 ? "+" : "") << fmt(lift, 1) << "%";
    } else {
      out << "---";
    }
  }
  out << "\n";
  return out.str();
}

namespace {

void stage_report(StageContext& ctx) {
  const auto todo = ctx.pending_units(Stage::Report);
  if (todo.empty()) return;
  std::vector<std::string> all_runs;
  for (const auto& r : ctx.cfg.runs) all_runs.push_back(r.run_id);
  ctx.require(Stage::RankAnalysis, {kDataToken});
  ctx.require(Stage::SelectFeatures, all_runs);

  ResultStore store(ctx.store_path());
  fs::create_directories(ctx.report_dir());

  const json table1 = store.get("__analysis__", "rank_table1");
  const json table2 = store.get("__analysis__", "rank_table2");

  // Method comparison: per model, mean base g vs mean selected score.
  const std::string model = ctx.cfg.lm.model_id();
  double base_sum = 0.0, sel_sum = 0.0;
  json table3_rows = json::array();
  for (const auto& run : ctx.cfg.runs) {
    const json sel = store.get(run.run_id, "selection");
    base_sum += sel.at("base_score").get<double>();
    sel_sum += sel.at("selected_score").get<double>();
    table3_rows.push_back(json{{"run_id", run.run_id},
                               {"base", sel.at("base_score")},
                               {"selected", sel.at("selected_score")},
                               {"gain", sel.at("gain")}});
  }
  MethodComparisonRow row;
  row.model = model;
  row.base = base_sum / double(ctx.cfg.runs.size());
  row.selected = sel_sum / double(ctx.cfg.runs.size());

  // report.txt
  {
    std::ofstream out(ctx.report_dir() / "report.txt");
    out << "steerkit desk report\n";
    out << "config_hash: " << ctx.cfg.config_hash << "\n\n";
    out << render_rank_table(
        "Interpretability score vs steering score (Table 1 shape)", table1);
    out << "\n";
    out << render_rank_table(
        "Interpretability score vs steering gain (Table 2 shape)", table2);
    out << "\n== Steering score after feature selection (Table 3 shape) ==\n";
    out << render_method_table({row});
    out << "\n== Delta token confidence histograms ==\n";
    out << "per-model JSONL files: hist_" << model << ".jsonl\n";
  }

  // TSV tables
  {
    std::ofstream out(ctx.report_dir() / "table1.tsv");
    out << render_rank_table("table1", table1);
  }
  {
    std::ofstream out(ctx.report_dir() / "table2.tsv");
    out << render_rank_table("table2", table2);
  }
  {
    std::ofstream out(ctx.report_dir() / "table3.tsv");
    out << "run_id\tbase\tselected\tgain_percent\n";
    for (const json& r : table3_rows) {
      out << r.at("run_id").get<std::string>() << "\t"
          << fmt(r.at("base").get<double>(), 6) << "\t"
          << fmt(r.at("selected").get<double>(), 6) << "\t";
      if (r.at("gain").is_null())
        out << "---";
      else
        out << fmt(r.at("gain").get<double>(), 2);
      out << "\n";
    }
  }

  // Histogram plot data: one record per (run, feature).
  {
    std::ofstream out(ctx.report_dir() / ("hist_" + model + ".jsonl"));
    for (const auto& run : ctx.cfg.runs) {
      const json hist = store.get(run.run_id, "delta_histogram");
      const json& deltas = hist.at("deltas");
      for (std::size_t f = 0; f < deltas.size(); ++f) {
        out << json{{"run_id", run.run_id},
                    {"feature", f},
                    {"delta", deltas[f].get<double>()}}
                   .dump()
            << "\n";
      }
    }
  }

  // Manifest: config hash + seeds (no timestamps; reports stay byte-stable).
  {
    json seeds;
    for (const auto& [name, value] : ctx.cfg.seeds) seeds[name] = value;
    std::ofstream out(ctx.report_dir() / "manifest.json");
    out << json{{"config_hash", ctx.cfg.config_hash}, {"seeds", seeds}}.dump(2)
        << "\n";
  }
  ctx.mark_done(Stage::Report, todo);
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::string> concept_instructions(const std::string& keyword,
                                              std::uint64_t seed) {
  static const std::vector<std::string> kPatterns = {
      "write a short story about the KW",
      "tell me something about the KW",
      "describe the KW in a few words",
      "explain why the KW matters",
      "share a memory about the KW",
      "give advice about the KW",
      "continue a tale about the KW",
      "note three things about the KW",
      "say what the KW means to you",
      "describe one day with the KW",
  };
  static const std::vector<std::string> kFillers = {"old",   "small", "bright",
                                                    "quiet", "warm",  "green"};
  Rng rng(derive_seed(seed, 0x1257c));
  std::vector<std::string> out;
  for (const auto& pattern : kPatterns) {
    const std::string filler = kFillers[rng.index(kFillers.size())];
    std::string text = pattern;
    const std::string target = "KW";
    const std::size_t pos = text.find(target);
    text.replace(pos, target.size(), filler + " " + keyword);
    out.push_back(text);
  }
  return out;
}

void run_stage(const ExperimentConfig& config, Stage stage,
               const StageOptions& options) {
  StageContext ctx{config, options};
  fs::create_directories(config.output);
  switch (stage) {
    case Stage::GenData: stage_gen_data(ctx); break;
    case Stage::TrainSae: stage_train_sae(ctx); break;
    case Stage::EvalInterp: stage_eval_interp(ctx); break;
    case Stage::EvalSteering: stage_eval_steering(ctx); break;
    case Stage::SelectFeatures: stage_select_features(ctx); break;
    case Stage::RankAnalysis: stage_rank_analysis(ctx); break;
    case Stage::Report: stage_report(ctx); break;
  }
}

void run_pipeline(const ExperimentConfig& config, const StageOptions& options) {
  for (Stage stage :
       {Stage::GenData, Stage::TrainSae, Stage::EvalInterp,
        Stage::EvalSteering, Stage::SelectFeatures, Stage::RankAnalysis,
        Stage::Report})
    run_stage(config, stage, options);
}

}  // namespace steerkit
