#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steppref/io.hpp"
#include "steppref/objectives.hpp"
#include "steppref/policy.hpp"
#include "steppref/rollout.hpp"
#include "steppref/select.hpp"
#include "steppref/synthenv.hpp"

namespace steppref {

// ============================================================================
// End-to-end stages: supervised fine-tuning, preference-pair collection,
// preference optimization, value-head training, and evaluation. Every stage
// is a pure function of (inputs, seed): worker threads only fill per-index
// result slots and training reductions run in a fixed order, so outputs are
// byte-identical across reruns and across --workers settings.
// ============================================================================

// --- optimizer ----------------------------------------------------------

// Adaptive per-coordinate first-order updates (bias-corrected running
// moments). An optional coordinate mask freezes everything outside it.
class Adam {
 public:
  Adam(int total, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step(std::span<double> params, std::span<const double> grad,
            const std::vector<char>* mask = nullptr);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

// Runs fn(0..n-1) on up to `workers` threads (<= 1 means inline). The caller
// writes results into per-index slots; exceptions from fn are rethrown.
void parallel_for(long n, int workers, const std::function<void(long)>& fn);

// --- episode sets ---------------------------------------------------------

// count episodes with per-index derived seeds; ids are distinct.
std::vector<EpisodeSpec> generate_episode_set(const EnvConfig& config, int count,
                                              uint64_t seed);

// --- stage configs --------------------------------------------------------

struct SftTrainConfig {
  double learning_rate = 1e-2;
  int batch_size = 16;
  long max_updates = 2000;
  long eval_every = 250;       // greedy held-out accuracy cadence; 0 = never
  bool direct_answer = false;  // train on bare answer steps (ablation cell)
};

struct CollectConfig {
  int num_paths = 10;        // sampled solutions per episode
  int rollouts_per_step = 6; // N per branch of a step pair
  int top_t = 3;             // susceptibility-ranked steps taken per trace
  double temperature = 0.9;
  int max_steps = 0;         // 0 resolves to hops + 2
  PerturbationSpec perturbation;
  int max_fullpath_pairs = 4;
  int max_attempts = 64;     // alternative-step rejection budget
  bool hard_labels = true;   // stored alpha convention (ties -> 0.5)
  double mu = 0.1;           // soft-label temperature when hard_labels = false
};

struct PdpoTrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  long max_updates = 250;
  long eval_every = 100;
  PreferenceObjectiveConfig objective;
  std::string batch_mix = "1:1";  // step:fullpath interleaving ratio
};

struct RmTrainConfig {
  ValueHead head = ValueHead::prm;
  double learning_rate = 1e-2;
  int batch_size = 32;
  long max_updates = 400;
};

struct EvalConfig {
  enum class Mode { one_best, major_at_n, rm_at_n };
  Mode mode = Mode::one_best;
  int n = 20;
  double temperature = 1.0;          // sampling temperature for the n paths
  ValueHead scorer = ValueHead::prm; // rm_at_n head
  int max_steps = 0;                 // 0 resolves to hops + 2
  bool direct_answer = false;        // grammar forcing an immediate answer step
};

// --- results ---------------------------------------------------------------

struct TrainResult {
  PolicyModel model;
  std::vector<MetricsRecord> metrics;
};

struct EpisodeEvalRecord {
  std::string episode_id;
  std::optional<std::string> answer;
  bool correct = false;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<EpisodeEvalRecord> records;
};

// --- stages -----------------------------------------------------------------

// Mini-batch training on reference traces. DivergedTraining on non-finite
// loss. held_out may be empty (skips accuracy rows).
TrainResult run_sft(const PolicyModel& init, std::span<const EpisodeSpec> train,
                    std::span<const EpisodeSpec> held_out, const SftTrainConfig& config,
                    uint64_t seed, int workers);

// Samples solutions per episode, keeps episodes with at least one incorrect
// path (all-correct episodes carry no signal), emits capped full-path pairs
// for mixed episodes plus susceptibility-selected step pairs with pairwise
// rollout labels. EmptyDataset when nothing is retained. Susceptibility
// dumps for the inspected traces land in *dumps when given.
PreferenceDataset run_preference_collection(const PolicyModel& model,
                                            std::span<const EpisodeSpec> episodes,
                                            const CollectConfig& config, uint64_t seed,
                                            int workers,
                                            std::vector<SusceptibilityRecord>* dumps = nullptr);

// Preference optimization against a frozen snapshot of `sft_model`. Stored
// pairs are rehydrated against `episodes` (observation + grammar by id);
// hard mode drops tied step pairs up front.
TrainResult run_pdpo(const PolicyModel& sft_model, const PreferenceDataset& dataset,
                     std::span<const EpisodeSpec> episodes,
                     std::span<const EpisodeSpec> held_out, const PdpoTrainConfig& config,
                     uint64_t seed, int workers);

// Trains one value head on examples derived from the dataset (prm: both
// branches of every step pair against their rollout estimates; orm: closed
// traces of full-path pairs against 1/0). The trunk and the other head stay
// frozen via a coordinate mask.
TrainResult train_rm(const PolicyModel& init, const PreferenceDataset& dataset,
                     std::span<const EpisodeSpec> episodes, const RmTrainConfig& config,
                     uint64_t seed);

// Trace scorer override for rm_at_n (oracle experiments); higher wins.
using TraceScorer = std::function<double(const EpisodeSpec&, const SampledTrace&)>;

// one_best: greedy decode, judge. major_at_n: most frequent answer over n
// sampled paths (unanswered paths do not vote), ties to the answer holding
// the highest-log-prob path. rm_at_n: answer of the highest-scoring answered
// path (prm: min over per-step head scores; orm: head on the closed
// solution), ties to higher log prob.
EvalResult evaluate(const PolicyModel& model, std::span<const EpisodeSpec> episodes,
                    const EvalConfig& config, uint64_t seed, int workers,
                    const TraceScorer* custom_scorer = nullptr);

// --- ablation grid ------------------------------------------------------------

// 2x2: SFT on multi-hop reference traces vs direct answers, evaluated with
// reasoning steps vs direct-answer grammar. Same init and seeds per cell.
struct AblationRow {
  std::string train_data;  // "reasoning" | "direct"
  std::string inference;   // "reasoning" | "direct"
  double accuracy = 0.0;
};

std::vector<AblationRow> run_ablation(const EnvConfig& env, int train_episodes,
                                      int eval_episodes, const SftTrainConfig& sft,
                                      uint64_t seed, int workers);

// --- gradient certification suite ----------------------------------------------

struct GradSuiteResult {
  std::string loss_name;   // sft | orm | prm | pdpo_hard | pdpo_soft
  double max_rel_err = 0.0;
};

// Checks every loss's analytic gradient against central finite differences on
// `instances_per_loss` random small instances (policy under 500 parameters,
// noise-perturbed so no path is dead). Worst relative error per loss.
std::vector<GradSuiteResult> run_gradient_suite(uint64_t seed, int instances_per_loss = 10);

}  // namespace steppref
