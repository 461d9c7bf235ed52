#include "steppref/rollout.hpp"

#include <algorithm>
#include <tuple>

#include "steppref/errors.hpp"
#include "steppref/rng.hpp"

namespace steppref {

RolloutEstimate estimate_correctness(const PolicyModel& model, std::span<const double> obs,
                                     const GrammarSpec& grammar, const PrefixSolution& prefix,
                                     const EpisodeSpec& episode, int num_rollouts,
                                     double temperature, uint64_t seed, int max_steps) {
  RolloutEstimate est;
  est.num_rollouts = num_rollouts;
  for (int n = 0; n < num_rollouts; ++n) {
    uint64_t rollout_seed = derive_seed(seed, "rollout", static_cast<uint64_t>(n));
    SampledTrace sampled = sample_trace(model, obs, grammar, prefix, temperature,
                                        rollout_seed, max_steps, episode.id);
    if (judge(sampled.trace.answer, episode)) ++est.num_correct;
  }
  return est;
}

EpisodeSolutions collect_solutions(const PolicyModel& model, std::span<const double> obs,
                                   const GrammarSpec& grammar, const EpisodeSpec& episode,
                                   int num_paths, double temperature, uint64_t seed,
                                   int max_steps) {
  EpisodeSolutions out;
  out.samples.reserve(static_cast<size_t>(num_paths));
  PrefixSolution empty;
  empty.episode_id = episode.id;
  for (int i = 0; i < num_paths; ++i) {
    uint64_t path_seed = derive_seed(seed, "path", static_cast<uint64_t>(i));
    SampledTrace sampled =
        sample_trace(model, obs, grammar, empty, temperature, path_seed, max_steps, episode.id);
    SolutionSample sample;
    sample.trace = std::move(sampled.trace);
    sample.total_log_prob = sampled.log_prob;
    sample.correct = judge(sample.trace.answer, episode);
    (sample.correct ? out.any_correct : out.any_incorrect) = true;
    out.samples.push_back(std::move(sample));
  }
  return out;
}

std::vector<FullPathPair> build_fullpath_pairs(const EpisodeSpec& episode,
                                               const EpisodeSolutions& solutions,
                                               int max_pairs) {
  std::vector<size_t> correct, incorrect;
  for (size_t i = 0; i < solutions.samples.size(); ++i) {
    (solutions.samples[i].correct ? correct : incorrect).push_back(i);
  }

  // Rank every cross pair by how confidently the policy separates the two
  // traces; a larger gap in either direction marks a more informative pair.
  struct Candidate {
    size_t ci, ii;
    double gap;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(correct.size() * incorrect.size());
  for (size_t ci : correct) {
    for (size_t ii : incorrect) {
      double gap = std::abs(solutions.samples[ci].total_log_prob -
                            solutions.samples[ii].total_log_prob);
      candidates.push_back({ci, ii, gap});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.gap != b.gap) return a.gap > b.gap;
    return std::tie(a.ci, a.ii) < std::tie(b.ci, b.ii);
  });
  if (max_pairs >= 0 && candidates.size() > static_cast<size_t>(max_pairs)) {
    candidates.resize(static_cast<size_t>(max_pairs));
  }

  std::vector<FullPathPair> pairs;
  pairs.reserve(candidates.size());
  for (const Candidate& c : candidates) {
    FullPathPair pair;
    pair.episode_id = episode.id;
    pair.preferred = solutions.samples[c.ci].trace;
    pair.rejected = solutions.samples[c.ii].trace;
    pair.log_prob_gap = c.gap;
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

Step sample_alternative_step(const PolicyModel& model, std::span<const double> obs,
                             const GrammarSpec& grammar,
                             std::span<const TokenId> prefix_tokens, const Step& taken,
                             double temperature, uint64_t seed, int max_attempts) {
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    uint64_t attempt_seed = derive_seed(seed, "alt", static_cast<uint64_t>(attempt));
    Step candidate = sample_step(model, obs, grammar, prefix_tokens, temperature, attempt_seed);
    if (candidate.tokens != taken.tokens) return candidate;
  }
  throw NoAlternativeFound("no alternative step found in " + std::to_string(max_attempts) +
                           " attempts (near-deterministic policy at this prefix)");
}

std::pair<RolloutEstimate, RolloutEstimate> pairwise_rollout(
    const PolicyModel& model, std::span<const double> obs, const GrammarSpec& grammar,
    const PrefixSolution& prefix, const Step& step_a, const Step& step_b,
    const EpisodeSpec& episode, int num_rollouts, double temperature, uint64_t seed,
    int max_steps) {
  PrefixSolution with_a = prefix;
  with_a.steps.push_back(step_a);
  PrefixSolution with_b = prefix;
  with_b.steps.push_back(step_b);
  RolloutEstimate est_a =
      estimate_correctness(model, obs, grammar, with_a, episode, num_rollouts, temperature,
                           derive_seed(seed, "a"), max_steps);
  RolloutEstimate est_b =
      estimate_correctness(model, obs, grammar, with_b, episode, num_rollouts, temperature,
                           derive_seed(seed, "b"), max_steps);
  return {est_a, est_b};
}

}  // namespace steppref
