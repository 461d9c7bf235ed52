#pragma once

#include <cstdint>
#include <vector>

#include "steppref/policy.hpp"
#include "steppref/synthenv.hpp"
#include "steppref/trace.hpp"

namespace steppref {

// ============================================================================
// Rollout-based step correctness and preference-pair construction.
//
// The expected correctness of a partial solution is estimated by sampling N
// completions and counting exact-match answers. Complete solutions are
// sampled per episode, split into correct/incorrect by the judge, and turned
// into two kinds of preference pairs: full-path pairs (correct vs incorrect
// whole traces) and step pairs (two alternative next steps under a shared
// prefix, each labelled by its rollout estimate).
// ============================================================================

struct RolloutEstimate {
  int num_rollouts = 0;
  int num_correct = 0;

  double p_hat() const {
    return num_rollouts > 0 ? static_cast<double>(num_correct) / num_rollouts : 0.0;
  }
};

struct SolutionSample {
  ReasoningTrace trace;
  double total_log_prob = 0.0;  // log prob of the whole sampled trace
  bool correct = false;
};

struct EpisodeSolutions {
  std::vector<SolutionSample> samples;
  bool any_correct = false;
  bool any_incorrect = false;

  // Mixed outcomes: the episode can contribute full-path pairs.
  bool retained() const { return any_correct && any_incorrect; }
};

struct FullPathPair {
  std::string episode_id;
  ReasoningTrace preferred;  // judged correct
  ReasoningTrace rejected;   // judged incorrect
  double log_prob_gap = 0.0; // |log p(preferred) - log p(rejected)|
};

struct StepPreferencePair {
  std::string episode_id;
  PrefixSolution prefix;
  Step step_a;  // the step taken by the sampled solution
  Step step_b;  // a sampled alternative, != step_a
  RolloutEstimate est_a;
  RolloutEstimate est_b;
  double alpha = 0.5;  // preference label assigned at collection time
};

// Samples N completions of `prefix` (temperature > 0) and returns the
// fraction judged correct. Rollout n draws its own derived seed, so the
// result is independent of evaluation order. max_steps bounds the total step
// count of each completed trace.
RolloutEstimate estimate_correctness(const PolicyModel& model, std::span<const double> obs,
                                     const GrammarSpec& grammar, const PrefixSolution& prefix,
                                     const EpisodeSpec& episode, int num_rollouts,
                                     double temperature, uint64_t seed, int max_steps);

// Samples num_paths full solutions of the episode and judges each.
EpisodeSolutions collect_solutions(const PolicyModel& model, std::span<const double> obs,
                                   const GrammarSpec& grammar, const EpisodeSpec& episode,
                                   int num_paths, double temperature, uint64_t seed,
                                   int max_steps);

// Every (correct, incorrect) cross pair, capped at max_pairs per episode by
// descending |log-prob gap| (ties resolved by sample order). Requires a
// retained episode.
std::vector<FullPathPair> build_fullpath_pairs(const EpisodeSpec& episode,
                                               const EpisodeSolutions& solutions,
                                               int max_pairs);

// Rejection-samples a single step from `prefix` until it differs from
// `taken`; the accepted step is distributed as the policy's one-step
// distribution renormalized without `taken`. NoAlternativeFound after
// max_attempts identical draws.
Step sample_alternative_step(const PolicyModel& model, std::span<const double> obs,
                             const GrammarSpec& grammar,
                             std::span<const TokenId> prefix_tokens, const Step& taken,
                             double temperature, uint64_t seed, int max_attempts = 64);

// Estimates both branches of a step pair under derived per-branch seeds.
std::pair<RolloutEstimate, RolloutEstimate> pairwise_rollout(
    const PolicyModel& model, std::span<const double> obs, const GrammarSpec& grammar,
    const PrefixSolution& prefix, const Step& step_a, const Step& step_b,
    const EpisodeSpec& episode, int num_rollouts, double temperature, uint64_t seed,
    int max_steps);

}  // namespace steppref
