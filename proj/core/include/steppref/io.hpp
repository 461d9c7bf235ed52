#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steppref/avsync.hpp"
#include "steppref/synthenv.hpp"
#include "steppref/trace.hpp"

namespace steppref {

// ============================================================================
// File formats. Everything line-delimited (one JSON record per line) except
// summary tables, which are CSV. Writers emit keys in a fixed order and
// readers validate, so identical inputs produce byte-identical files and a
// rerun can be diffed against the original. Malformed input raises IoError.
// ============================================================================

// --- episodes -----------------------------------------------------------

// {id, seed, config{...}, facts[[key,value,"audio"|"visual"]...],
//  question{start_key,hops}, choices[...], reference_answer}
void write_episodes(const std::string& path, std::span<const EpisodeSpec> episodes);
std::vector<EpisodeSpec> read_episodes(const std::string& path);

// --- timed encoding streams ----------------------------------------------

// One record per visual group / audio segment:
// {episode_id, modality, timestamp, vectors[[...]...]}
struct StreamRecord {
  std::string episode_id;
  Modality modality = Modality::visual;
  double timestamp = 0.0;
  std::vector<std::vector<double>> vectors;
};

void write_streams(const std::string& path, std::span<const EpisodeSpec> episodes);
std::vector<StreamRecord> read_streams(const std::string& path);

// --- traces ----------------------------------------------------------------

// {episode_id, steps[[token ids]...], answer | null}
void write_traces(const std::string& path, std::span<const ReasoningTrace> traces);
std::vector<ReasoningTrace> read_traces(const std::string& path);

// --- preference dataset ----------------------------------------------------

struct StoredEstimate {
  int num_rollouts = 0;
  int num_correct = 0;

  double p_hat() const {
    return num_rollouts > 0 ? static_cast<double>(num_correct) / num_rollouts : 0.0;
  }
};

// {type:"step", episode_id, prefix[[ids]...], a[ids], b[ids],
//  est_a{n,correct}, est_b{n,correct}, alpha}
struct StoredStepPair {
  std::string episode_id;
  std::vector<std::vector<TokenId>> prefix_steps;
  std::vector<TokenId> step_a;
  std::vector<TokenId> step_b;
  StoredEstimate est_a;
  StoredEstimate est_b;
  double alpha = 0.5;  // label at collection time; trainers relabel from the estimates
};

// {type:"fullpath", episode_id, preferred[[ids]...], rejected[[ids]...], log_prob_gap}
struct StoredFullPathPair {
  std::string episode_id;
  std::vector<std::vector<TokenId>> preferred;
  std::vector<std::vector<TokenId>> rejected;
  double log_prob_gap = 0.0;
};

// {type:"step_value", episode_id, prefix[[ids]...], est{n,correct}}
// Rollout-estimated correctness of a step-boundary prefix; the per-step
// targets the process value head trains on. A prefix closed by an answer
// step needs no rollouts, so its estimate is the exact judgement over one
// trial.
struct StoredStepValue {
  std::string episode_id;
  std::vector<std::vector<TokenId>> prefix_steps;
  StoredEstimate est;
};

struct PreferenceDataset {
  std::vector<StoredStepPair> step_pairs;
  std::vector<StoredFullPathPair> fullpath_pairs;
  std::vector<StoredStepValue> step_values;

  size_t size() const {
    return step_pairs.size() + fullpath_pairs.size() + step_values.size();
  }
};

void write_preferences(const std::string& path, const PreferenceDataset& dataset);
PreferenceDataset read_preferences(const std::string& path);

// --- metrics -----------------------------------------------------------------

// Append-only training/eval log. Wall-clock time is deliberately not a field:
// metrics files must be byte-identical across reruns, so timing goes to the
// console instead.
struct MetricsRecord {
  std::string stage;
  long update = 0;
  double loss = 0.0;
  std::optional<double> accuracy;
  uint64_t seed = 0;
};

void write_metrics(const std::string& path, std::span<const MetricsRecord> records);
std::vector<MetricsRecord> read_metrics(const std::string& path);

// --- step susceptibility dumps ----------------------------------------------

// {episode_id, d[...], selected[...]} per inspected trace.
struct SusceptibilityRecord {
  std::string episode_id;
  std::vector<double> d;
  std::vector<int> selected;
};

void write_susceptibilities(const std::string& path,
                            std::span<const SusceptibilityRecord> records);
std::vector<SusceptibilityRecord> read_susceptibilities(const std::string& path);

// --- csv tables -------------------------------------------------------------

void write_csv(const std::string& path, std::span<const std::string> header,
               std::span<const std::vector<std::string>> rows);

}  // namespace steppref
