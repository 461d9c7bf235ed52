// Command-line front end binding every pipeline stage behind one binary.
//
// Exit codes: 0 success, 1 usage error (unknown flag / subcommand), 2 runtime
// failure (unreadable files, bad config values, training errors). Each run
// echoes its fully resolved configuration before doing any work, so a log
// line is always enough to reproduce the run.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "steppref/avsync.hpp"
#include "steppref/config.hpp"
#include "steppref/errors.hpp"
#include "steppref/io.hpp"
#include "steppref/pipeline.hpp"
#include "steppref/policy.hpp"
#include "steppref/rng.hpp"
#include "steppref/select.hpp"
#include "steppref/synthenv.hpp"
#include "steppref/trace.hpp"

namespace {

using namespace steppref;
namespace fs = std::filesystem;

// --- config schema ----------------------------------------------------------

// Full key set across every stage. A config file may carry sections for
// stages other than the one being run (one file per experiment grid), but a
// key nobody would ever consume is a typo and gets rejected up front.
const std::map<std::string, std::set<std::string>>& config_schema() {
  static const std::map<std::string, std::set<std::string>> schema = {
      {"run", {"seed", "workers"}},
      {"env", {"num_symbols", "hops", "num_choices", "encoding_dim", "modality_split"}},
      {"policy", {"embed_dim", "hidden_dim"}},
      {"data", {"train_episodes", "eval_episodes"}},
      {"sft", {"learning_rate", "batch_size", "max_updates", "eval_every"}},
      {"collect",
       {"num_paths", "rollouts_per_step", "top_t", "temperature", "max_steps",
        "perturbation", "epsilon", "max_fullpath_pairs", "max_attempts", "label_mode",
        "mu"}},
      {"pdpo",
       {"learning_rate", "batch_size", "max_updates", "eval_every", "beta",
        "label_mode", "mu", "batch_mix"}},
      {"rm", {"head", "learning_rate", "batch_size", "max_updates"}},
      {"eval", {"mode", "n", "temperature", "scorer", "max_steps", "direct_answer"}},
      {"grad", {"instances", "tolerance"}},
  };
  return schema;
}

void validate_schema(const ConfigMap& config) {
  const auto& schema = config_schema();
  for (const auto& [section, keys] : config.sections()) {
    auto it = schema.find(section);
    if (it == schema.end()) {
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [key, value] : keys) {
      if (!it->second.count(key)) {
        throw ConfigError("unknown config key " + section + "." + key);
      }
    }
  }
}

// --- resolved run context -----------------------------------------------------

struct CommonFlags {
  std::string config_path;
  uint64_t seed = 0;
  std::string out;
  int workers = 0;
};

struct RunContext {
  ConfigMap config;
  uint64_t seed = 0;
  int workers = 1;
  fs::path out;
  std::vector<std::pair<std::string, std::string>> echo_lines;
};

std::string fmt_value(const std::string& v) { return v; }
std::string fmt_value(const char* v) { return v; }
std::string fmt_value(bool v) { return v ? "true" : "false"; }
std::string fmt_value(double v) { return nlohmann::json(v).dump(); }
template <typename T>
std::string fmt_value(T v) {
  return std::to_string(v);
}

template <typename T>
void echo(RunContext& ctx, const std::string& section, const std::string& key,
          const T& value) {
  ctx.echo_lines.emplace_back(section + "." + key, fmt_value(value));
}

void print_resolved(const RunContext& ctx) {
  for (const auto& [key, value] : ctx.echo_lines) {
    std::cout << "[config] " << key << " = " << value << "\n";
  }
}

int default_workers() {
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

RunContext make_context(const CLI::App* sub, const CommonFlags& flags) {
  RunContext ctx;
  if (!flags.config_path.empty()) {
    ctx.config = ConfigMap::load(flags.config_path);
    validate_schema(ctx.config);
  }
  ctx.seed = sub->count("--seed") ? flags.seed
                                  : static_cast<uint64_t>(ctx.config.get_int("run", "seed", 0));
  if (sub->count("--workers")) {
    ctx.workers = flags.workers;
  } else {
    ctx.workers = static_cast<int>(ctx.config.get_int("run", "workers", default_workers()));
  }
  if (ctx.workers < 1) ctx.workers = 1;

  if (sub->count("--out")) {
    ctx.out = flags.out;
  } else if (const char* env_out = std::getenv("STEPPREF_OUT")) {
    ctx.out = env_out;
  } else {
    ctx.out = "out";
  }
  fs::create_directories(ctx.out);

  echo(ctx, "run", "seed", ctx.seed);
  echo(ctx, "run", "workers", ctx.workers);
  echo(ctx, "run", "out", ctx.out.string());
  return ctx;
}

// Typed config getters that remember what they resolved for the echo.
long cfg_int(RunContext& ctx, const char* section, const char* key, long fallback) {
  long v = ctx.config.get_int(section, key, fallback);
  echo(ctx, section, key, v);
  return v;
}
double cfg_double(RunContext& ctx, const char* section, const char* key, double fallback) {
  double v = ctx.config.get_double(section, key, fallback);
  echo(ctx, section, key, v);
  return v;
}
std::string cfg_string(RunContext& ctx, const char* section, const char* key,
                       const std::string& fallback) {
  std::string v = ctx.config.get_string(section, key, fallback);
  echo(ctx, section, key, v);
  return v;
}
bool cfg_bool(RunContext& ctx, const char* section, const char* key, bool fallback) {
  bool v = ctx.config.get_bool(section, key, fallback);
  echo(ctx, section, key, v);
  return v;
}

// --- shared resolvers ---------------------------------------------------------

EnvConfig resolve_env(RunContext& ctx) {
  EnvConfig env;
  env.num_symbols = static_cast<int>(cfg_int(ctx, "env", "num_symbols", env.num_symbols));
  env.hops = static_cast<int>(cfg_int(ctx, "env", "hops", env.hops));
  env.num_choices = static_cast<int>(cfg_int(ctx, "env", "num_choices", env.num_choices));
  env.encoding_dim = static_cast<int>(cfg_int(ctx, "env", "encoding_dim", env.encoding_dim));
  env.modality_split = cfg_double(ctx, "env", "modality_split", env.modality_split);
  env.validate();
  return env;
}

SftTrainConfig resolve_sft(RunContext& ctx) {
  SftTrainConfig sft;
  sft.learning_rate = cfg_double(ctx, "sft", "learning_rate", sft.learning_rate);
  sft.batch_size = static_cast<int>(cfg_int(ctx, "sft", "batch_size", sft.batch_size));
  sft.max_updates = cfg_int(ctx, "sft", "max_updates", sft.max_updates);
  sft.eval_every = cfg_int(ctx, "sft", "eval_every", sft.eval_every);
  return sft;
}

bool parse_hard_labels(const std::string& mode) {
  if (mode == "hard") return true;
  if (mode == "soft") return false;
  throw ConfigError("label_mode must be 'hard' or 'soft', got '" + mode + "'");
}

ValueHead parse_value_head(const std::string& name) {
  if (name == "prm") return ValueHead::prm;
  if (name == "orm") return ValueHead::orm;
  throw ConfigError("value head must be 'prm' or 'orm', got '" + name + "'");
}

EvalConfig::Mode parse_eval_mode(const std::string& name) {
  if (name == "one_best") return EvalConfig::Mode::one_best;
  if (name == "major_at_n") return EvalConfig::Mode::major_at_n;
  if (name == "rm_at_n") return EvalConfig::Mode::rm_at_n;
  throw ConfigError("eval mode must be one_best, major_at_n or rm_at_n, got '" + name +
                    "'");
}

// "gaussian", "gaussian:0.05", "audio_mask", "visual_mask".
PerturbationSpec parse_perturbation(const std::string& text, double default_eps) {
  PerturbationSpec spec;
  spec.eps = default_eps;
  const size_t colon = text.find(':');
  spec.kind = parse_perturb_kind(colon == std::string::npos ? text : text.substr(0, colon));
  if (colon != std::string::npos) {
    try {
      spec.eps = std::stod(text.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad perturbation scale in '" + text + "'");
    }
  }
  return spec;
}

// --- small io helpers ---------------------------------------------------------

std::vector<EpisodeSpec> load_episode_file(const std::string& path) {
  std::vector<EpisodeSpec> episodes = read_episodes(path);
  if (episodes.empty()) throw EmptyDataset("no episodes in " + path);
  return episodes;
}

// The checkpoint remembers the environment shape it was trained for.
void require_matching_shapes(const PolicyModel& model, std::span<const EpisodeSpec> episodes,
                             const std::string& checkpoint_path) {
  if (episodes.empty()) return;
  const EnvConfig& env = episodes.front().config;
  if (model.config.num_symbols != env.num_symbols ||
      model.config.obs_dim != env.encoding_dim) {
    throw DimensionMismatch(checkpoint_path + ": checkpoint shape (V=" +
                            std::to_string(model.config.num_symbols) + ", d=" +
                            std::to_string(model.config.obs_dim) +
                            ") does not match the episode file (V=" +
                            std::to_string(env.num_symbols) + ", d=" +
                            std::to_string(env.encoding_dim) + ")");
  }
}

void write_eval_records(const std::string& path,
                        std::span<const EpisodeEvalRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const EpisodeEvalRecord& rec : records) {
    nlohmann::ordered_json j;
    j["episode_id"] = rec.episode_id;
    j["answer"] = rec.answer ? nlohmann::ordered_json(*rec.answer)
                             : nlohmann::ordered_json(nullptr);
    j["correct"] = rec.correct;
    out << j.dump() << '\n';
  }
}

std::string out_path(const RunContext& ctx, const char* name) {
  return (ctx.out / name).string();
}

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void report_time(const char* stage, const Stopwatch& watch) {
  // Console only: output files must stay byte-identical across reruns.
  std::cout << "[time] " << stage << " " << std::fixed << std::setprecision(2)
            << watch.seconds() << "s\n";
  std::cout.unsetf(std::ios::fixed);
  std::cout << std::setprecision(6);
}

// --- subcommands ---------------------------------------------------------------

int cmd_gen_data(RunContext& ctx, long episodes) {
  EnvConfig env = resolve_env(ctx);
  echo(ctx, "data", "episodes", episodes);
  print_resolved(ctx);
  Stopwatch watch;

  std::vector<EpisodeSpec> set =
      generate_episode_set(env, static_cast<int>(episodes), ctx.seed);
  const std::string episode_file = out_path(ctx, "episodes.jsonl");
  const std::string stream_file = out_path(ctx, "streams.jsonl");
  write_episodes(episode_file, set);
  write_streams(stream_file, set);

  std::cout << "wrote " << set.size() << " episodes -> " << episode_file << "\n";
  std::cout << "wrote encoder streams -> " << stream_file << "\n";
  report_time("gen-data", watch);
  return 0;
}

int cmd_sft(RunContext& ctx, const std::string& train_file, const std::string& eval_file) {
  std::vector<EpisodeSpec> train = load_episode_file(train_file);
  std::vector<EpisodeSpec> held_out;
  if (!eval_file.empty()) held_out = load_episode_file(eval_file);

  PolicyConfig policy_config;
  policy_config.num_symbols = train.front().config.num_symbols;
  policy_config.obs_dim = train.front().config.encoding_dim;
  policy_config.embed_dim =
      static_cast<int>(cfg_int(ctx, "policy", "embed_dim", policy_config.embed_dim));
  policy_config.hidden_dim =
      static_cast<int>(cfg_int(ctx, "policy", "hidden_dim", policy_config.hidden_dim));
  SftTrainConfig sft = resolve_sft(ctx);
  print_resolved(ctx);
  Stopwatch watch;

  const PolicyModel init = make_policy(policy_config, derive_seed(ctx.seed, "init"));
  TrainResult result = run_sft(init, train, held_out, sft, ctx.seed, ctx.workers);

  const std::string checkpoint_file = out_path(ctx, "checkpoint.bin");
  const std::string metrics_file = out_path(ctx, "metrics.jsonl");
  save_checkpoint(result.model, checkpoint_file);
  write_metrics(metrics_file, result.metrics);

  std::cout << "wrote checkpoint -> " << checkpoint_file << "\n";
  std::cout << "wrote metrics -> " << metrics_file << "\n";
  if (!result.metrics.empty()) {
    const MetricsRecord& last = result.metrics.back();
    std::cout << "final loss " << last.loss;
    if (last.accuracy) std::cout << ", held-out accuracy " << *last.accuracy;
    std::cout << "\n";
  }
  report_time("sft", watch);
  return 0;
}

int cmd_collect(RunContext& ctx, const CLI::App* sub, const std::string& checkpoint_file,
                const std::string& episode_file, const std::string& perturbation_flag,
                long top_t_flag) {
  const PolicyModel model = load_checkpoint(checkpoint_file);
  std::vector<EpisodeSpec> episodes = load_episode_file(episode_file);
  require_matching_shapes(model, episodes, checkpoint_file);

  CollectConfig cc;
  cc.num_paths = static_cast<int>(cfg_int(ctx, "collect", "num_paths", cc.num_paths));
  cc.rollouts_per_step =
      static_cast<int>(cfg_int(ctx, "collect", "rollouts_per_step", cc.rollouts_per_step));
  long top_t = ctx.config.get_int("collect", "top_t", cc.top_t);
  if (sub->count("--top-t")) top_t = top_t_flag;
  cc.top_t = static_cast<int>(top_t);
  echo(ctx, "collect", "top_t", top_t);
  cc.temperature = cfg_double(ctx, "collect", "temperature", cc.temperature);
  cc.max_steps = static_cast<int>(cfg_int(ctx, "collect", "max_steps", cc.max_steps));
  const double eps = ctx.config.get_double("collect", "epsilon", cc.perturbation.eps);
  std::string kind = ctx.config.get_string("collect", "perturbation",
                                           perturb_kind_name(cc.perturbation.kind));
  cc.perturbation = sub->count("--perturbation")
                        ? parse_perturbation(perturbation_flag, eps)
                        : parse_perturbation(kind, eps);
  echo(ctx, "collect", "perturbation", perturb_kind_name(cc.perturbation.kind));
  echo(ctx, "collect", "epsilon", cc.perturbation.eps);
  cc.max_fullpath_pairs =
      static_cast<int>(cfg_int(ctx, "collect", "max_fullpath_pairs", cc.max_fullpath_pairs));
  cc.max_attempts = static_cast<int>(cfg_int(ctx, "collect", "max_attempts", cc.max_attempts));
  cc.hard_labels = parse_hard_labels(
      cfg_string(ctx, "collect", "label_mode", cc.hard_labels ? "hard" : "soft"));
  cc.mu = cfg_double(ctx, "collect", "mu", cc.mu);
  print_resolved(ctx);
  Stopwatch watch;

  std::vector<SusceptibilityRecord> dumps;
  PreferenceDataset dataset =
      run_preference_collection(model, episodes, cc, ctx.seed, ctx.workers, &dumps);

  const std::string pref_file = out_path(ctx, "preferences.jsonl");
  const std::string sus_file = out_path(ctx, "susceptibility.jsonl");
  write_preferences(pref_file, dataset);
  write_susceptibilities(sus_file, dumps);

  std::cout << "inspected " << dumps.size() << " traces\n";
  std::cout << "wrote " << dataset.step_pairs.size() << " step pairs, "
            << dataset.fullpath_pairs.size() << " full-path pairs -> " << pref_file << "\n";
  std::cout << "wrote susceptibility dumps -> " << sus_file << "\n";
  report_time("collect", watch);
  return 0;
}

int cmd_pdpo(RunContext& ctx, const std::string& checkpoint_file,
             const std::string& data_file, const std::string& episode_file,
             const std::string& eval_file) {
  const PolicyModel sft_model = load_checkpoint(checkpoint_file);
  PreferenceDataset dataset = read_preferences(data_file);
  std::vector<EpisodeSpec> episodes = load_episode_file(episode_file);
  require_matching_shapes(sft_model, episodes, checkpoint_file);
  std::vector<EpisodeSpec> held_out;
  if (!eval_file.empty()) held_out = load_episode_file(eval_file);

  PdpoTrainConfig pd;
  pd.learning_rate = cfg_double(ctx, "pdpo", "learning_rate", pd.learning_rate);
  pd.batch_size = static_cast<int>(cfg_int(ctx, "pdpo", "batch_size", pd.batch_size));
  pd.max_updates = cfg_int(ctx, "pdpo", "max_updates", pd.max_updates);
  pd.eval_every = cfg_int(ctx, "pdpo", "eval_every", pd.eval_every);
  pd.objective.beta = cfg_double(ctx, "pdpo", "beta", pd.objective.beta);
  pd.objective.soft_labels = !parse_hard_labels(
      cfg_string(ctx, "pdpo", "label_mode", pd.objective.soft_labels ? "soft" : "hard"));
  pd.objective.mu = cfg_double(ctx, "pdpo", "mu", pd.objective.mu);
  pd.batch_mix = cfg_string(ctx, "pdpo", "batch_mix", pd.batch_mix);
  print_resolved(ctx);
  Stopwatch watch;

  TrainResult result = run_pdpo(sft_model, dataset, episodes, held_out, pd, ctx.seed,
                                ctx.workers);

  const std::string out_checkpoint = out_path(ctx, "checkpoint.bin");
  const std::string metrics_file = out_path(ctx, "metrics.jsonl");
  save_checkpoint(result.model, out_checkpoint);
  write_metrics(metrics_file, result.metrics);

  std::cout << "wrote checkpoint -> " << out_checkpoint << "\n";
  std::cout << "wrote metrics -> " << metrics_file << "\n";
  if (!result.metrics.empty()) {
    const MetricsRecord& last = result.metrics.back();
    std::cout << "final loss " << last.loss;
    if (last.accuracy) std::cout << ", held-out accuracy " << *last.accuracy;
    std::cout << "\n";
  }
  report_time("pdpo", watch);
  return 0;
}

int cmd_train_rm(RunContext& ctx, const CLI::App* sub, const std::string& checkpoint_file,
                 const std::string& data_file, const std::string& episode_file,
                 const std::string& head_flag) {
  const PolicyModel init = load_checkpoint(checkpoint_file);
  PreferenceDataset dataset = read_preferences(data_file);
  std::vector<EpisodeSpec> episodes = load_episode_file(episode_file);
  require_matching_shapes(init, episodes, checkpoint_file);

  RmTrainConfig rm;
  std::string head =
      ctx.config.get_string("rm", "head", rm.head == ValueHead::prm ? "prm" : "orm");
  if (sub->count("--head")) head = head_flag;
  rm.head = parse_value_head(head);
  echo(ctx, "rm", "head", head);
  rm.learning_rate = cfg_double(ctx, "rm", "learning_rate", rm.learning_rate);
  rm.batch_size = static_cast<int>(cfg_int(ctx, "rm", "batch_size", rm.batch_size));
  rm.max_updates = cfg_int(ctx, "rm", "max_updates", rm.max_updates);
  print_resolved(ctx);
  Stopwatch watch;

  TrainResult result = train_rm(init, dataset, episodes, rm, ctx.seed);

  const std::string out_checkpoint = out_path(ctx, "checkpoint.bin");
  const std::string metrics_file = out_path(ctx, "metrics.jsonl");
  save_checkpoint(result.model, out_checkpoint);
  write_metrics(metrics_file, result.metrics);

  std::cout << "wrote checkpoint -> " << out_checkpoint << "\n";
  std::cout << "wrote metrics -> " << metrics_file << "\n";
  if (!result.metrics.empty()) {
    std::cout << "final loss " << result.metrics.back().loss << "\n";
  }
  report_time("train-rm", watch);
  return 0;
}

int cmd_eval(RunContext& ctx, const CLI::App* sub, const std::string& checkpoint_file,
             const std::string& episode_file, const std::string& mode_flag, long n_flag) {
  const PolicyModel model = load_checkpoint(checkpoint_file);
  std::vector<EpisodeSpec> episodes = load_episode_file(episode_file);
  require_matching_shapes(model, episodes, checkpoint_file);

  EvalConfig ec;
  std::string mode = ctx.config.get_string("eval", "mode", "one_best");
  if (sub->count("--mode")) mode = mode_flag;
  ec.mode = parse_eval_mode(mode);
  echo(ctx, "eval", "mode", mode);
  long n = ctx.config.get_int("eval", "n", ec.n);
  if (sub->count("--n")) n = n_flag;
  ec.n = static_cast<int>(n);
  echo(ctx, "eval", "n", n);
  ec.temperature = cfg_double(ctx, "eval", "temperature", ec.temperature);
  ec.scorer = parse_value_head(
      cfg_string(ctx, "eval", "scorer", ec.scorer == ValueHead::prm ? "prm" : "orm"));
  ec.max_steps = static_cast<int>(cfg_int(ctx, "eval", "max_steps", ec.max_steps));
  ec.direct_answer = cfg_bool(ctx, "eval", "direct_answer", ec.direct_answer);
  print_resolved(ctx);
  Stopwatch watch;

  EvalResult result = evaluate(model, episodes, ec, ctx.seed, ctx.workers);

  const std::string eval_file = out_path(ctx, "eval.jsonl");
  const std::string metrics_file = out_path(ctx, "metrics.jsonl");
  write_eval_records(eval_file, result.records);
  MetricsRecord summary;
  summary.stage = "eval";
  summary.update = 0;
  summary.loss = 0.0;
  summary.accuracy = result.accuracy;
  summary.seed = ctx.seed;
  write_metrics(metrics_file, std::vector<MetricsRecord>{summary});

  std::cout << "wrote per-episode results -> " << eval_file << "\n";
  std::cout << "accuracy = " << result.accuracy << " (" << result.records.size()
            << " episodes)\n";
  report_time("eval", watch);
  return 0;
}

int cmd_ablate(RunContext& ctx) {
  EnvConfig env = resolve_env(ctx);
  const long train_count = cfg_int(ctx, "data", "train_episodes", 500);
  const long eval_count = cfg_int(ctx, "data", "eval_episodes", 200);
  SftTrainConfig sft = resolve_sft(ctx);
  print_resolved(ctx);
  Stopwatch watch;

  std::vector<AblationRow> rows = run_ablation(env, static_cast<int>(train_count),
                                               static_cast<int>(eval_count), sft, ctx.seed,
                                               ctx.workers);

  const std::string csv_file = out_path(ctx, "ablation.csv");
  const std::vector<std::string> header = {"train_data", "inference", "accuracy"};
  std::vector<std::vector<std::string>> cells;
  for (const AblationRow& row : rows) {
    cells.push_back({row.train_data, row.inference, fmt_value(row.accuracy)});
  }
  write_csv(csv_file, header, cells);

  std::cout << "wrote ablation grid -> " << csv_file << "\n";
  for (const AblationRow& row : rows) {
    std::cout << "  train=" << row.train_data << " inference=" << row.inference
              << " accuracy=" << row.accuracy << "\n";
  }
  report_time("ablate", watch);
  return 0;
}

int cmd_avsync_inspect(RunContext& ctx, const std::string& stream_file,
                       const std::string& episode_filter) {
  print_resolved(ctx);
  std::vector<StreamRecord> records = read_streams(stream_file);

  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<VisualFrameGroup>, std::vector<AudioSegment>>>
      by_id;
  for (const StreamRecord& rec : records) {
    if (!by_id.count(rec.episode_id)) order.push_back(rec.episode_id);
    auto& [visual, audio] = by_id[rec.episode_id];
    if (rec.modality == Modality::visual) {
      visual.push_back({rec.timestamp, rec.vectors});
    } else {
      audio.push_back({rec.timestamp, rec.vectors});
    }
  }

  bool found = false;
  for (const std::string& id : order) {
    if (!episode_filter.empty() && id != episode_filter) continue;
    found = true;
    const auto& [visual, audio] = by_id[id];
    std::cout << id << " " << interleave(visual, audio).tag_string() << "\n";
  }
  if (!episode_filter.empty() && !found) {
    throw IoError("episode '" + episode_filter + "' not present in " + stream_file);
  }
  return 0;
}

int cmd_check_grad(RunContext& ctx, const CLI::App* sub, long instances_flag,
                   double tolerance_flag) {
  long instances = ctx.config.get_int("grad", "instances", 10);
  if (sub->count("--instances")) instances = instances_flag;
  echo(ctx, "grad", "instances", instances);
  double tolerance = ctx.config.get_double("grad", "tolerance", 1e-4);
  if (sub->count("--tolerance")) tolerance = tolerance_flag;
  echo(ctx, "grad", "tolerance", tolerance);
  print_resolved(ctx);
  Stopwatch watch;

  std::vector<GradSuiteResult> results =
      run_gradient_suite(ctx.seed, static_cast<int>(instances));
  bool all_ok = true;
  for (const GradSuiteResult& r : results) {
    const bool ok = r.max_rel_err <= tolerance;
    all_ok = all_ok && ok;
    std::cout << "[grad] " << r.loss_name << " max_rel_err=" << r.max_rel_err << " "
              << (ok ? "ok" : "FAIL") << "\n";
  }
  report_time("check-grad", watch);
  if (!all_ok) {
    std::cerr << "error: analytic gradients disagree with finite differences\n";
    return 2;
  }
  return 0;
}

}  // namespace

// --- argument parsing / dispatch -------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"step-level preference optimization on a synthetic multi-hop QA bench"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "plain-text config file");
    cmd->add_option("--seed", flags.seed, "seed override (wins over the config file)");
    cmd->add_option("--out", flags.out,
                    "output directory (default $STEPPREF_OUT, then ./out)");
    cmd->add_option("--workers", flags.workers, "parallelism bound (default all cores)");
    return cmd;
  };

  long gen_episodes = 500;
  CLI::App* gen = add_common(app.add_subcommand("gen-data", "generate an episode set"));
  gen->add_option("--episodes", gen_episodes, "number of episodes to generate");

  std::string train_file, eval_file;
  CLI::App* sft = add_common(app.add_subcommand("sft", "supervised training on reference traces"));
  sft->add_option("--train", train_file, "training episode file")->required();
  sft->add_option("--eval", eval_file, "held-out episode file");

  std::string checkpoint_file, episode_file, perturbation_flag;
  long top_t_flag = 3;
  CLI::App* collect =
      add_common(app.add_subcommand("collect", "sample paths and build preference pairs"));
  collect->add_option("--checkpoint", checkpoint_file, "policy checkpoint")->required();
  collect->add_option("--episodes", episode_file, "episode file")->required();
  collect->add_option("--perturbation", perturbation_flag,
                      "gaussian[:eps] | audio_mask | visual_mask");
  collect->add_option("--top-t", top_t_flag, "steps selected per trace");

  std::string pref_file;
  CLI::App* pdpo =
      add_common(app.add_subcommand("pdpo", "preference optimization from collected pairs"));
  pdpo->add_option("--checkpoint", checkpoint_file, "starting policy checkpoint")->required();
  pdpo->add_option("--data", pref_file, "preference pair file")->required();
  pdpo->add_option("--episodes", episode_file, "episode file the pairs reference")->required();
  pdpo->add_option("--eval", eval_file, "held-out episode file");

  std::string head_flag;
  CLI::App* rm = add_common(app.add_subcommand("train-rm", "train a value head as a reward model"));
  rm->add_option("--checkpoint", checkpoint_file, "starting policy checkpoint")->required();
  rm->add_option("--data", pref_file, "preference pair file")->required();
  rm->add_option("--episodes", episode_file, "episode file the pairs reference")->required();
  rm->add_option("--head", head_flag, "prm | orm");

  std::string mode_flag;
  long n_flag = 20;
  CLI::App* eval_cmd = add_common(app.add_subcommand("eval", "evaluate a checkpoint"));
  eval_cmd->add_option("--checkpoint", checkpoint_file, "policy checkpoint")->required();
  eval_cmd->add_option("--episodes", episode_file, "episode file")->required();
  eval_cmd->add_option("--mode", mode_flag, "one_best | major_at_n | rm_at_n");
  eval_cmd->add_option("--n", n_flag, "paths sampled per episode");

  CLI::App* ablate =
      add_common(app.add_subcommand("ablate", "2x2 reasoning/direct training-inference grid"));

  std::string stream_file, episode_filter;
  CLI::App* inspect = add_common(
      app.add_subcommand("avsync-inspect", "print modality tag strings of a stream file"));
  inspect->add_option("--streams", stream_file, "stream file from gen-data")->required();
  inspect->add_option("--episode", episode_filter, "restrict to one episode id");

  long instances_flag = 10;
  double tolerance_flag = 1e-4;
  CLI::App* grad = add_common(
      app.add_subcommand("check-grad", "finite-difference certification of every loss"));
  grad->add_option("--instances", instances_flag, "random instances per loss");
  grad->add_option("--tolerance", tolerance_flag, "max relative error accepted");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // --help / --version exit 0; usage errors exit 1
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    RunContext ctx = make_context(sub, flags);
    if (sub == gen) return cmd_gen_data(ctx, gen_episodes);
    if (sub == sft) return cmd_sft(ctx, train_file, eval_file);
    if (sub == collect)
      return cmd_collect(ctx, sub, checkpoint_file, episode_file, perturbation_flag,
                         top_t_flag);
    if (sub == pdpo) return cmd_pdpo(ctx, checkpoint_file, pref_file, episode_file, eval_file);
    if (sub == rm)
      return cmd_train_rm(ctx, sub, checkpoint_file, pref_file, episode_file, head_flag);
    if (sub == eval_cmd)
      return cmd_eval(ctx, sub, checkpoint_file, episode_file, mode_flag, n_flag);
    if (sub == ablate) return cmd_ablate(ctx);
    if (sub == inspect) return cmd_avsync_inspect(ctx, stream_file, episode_filter);
    if (sub == grad) return cmd_check_grad(ctx, sub, instances_flag, tolerance_flag);
    throw Error("unhandled subcommand");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
