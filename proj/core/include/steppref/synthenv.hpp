#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "steppref/avsync.hpp"
#include "steppref/policy.hpp"
#include "steppref/trace.hpp"

namespace steppref {

// ============================================================================
// Synthetic multi-hop lookup environment.
//
// An episode is a key/value fact set over V symbols containing one designated
// chain k_{i0} -> v_{i1}, k_{i1} -> v_{i2}, ... of exactly L hops. Every
// other symbol except the chain terminus also carries one (distractor) fact,
// so "the current value's key has no outgoing fact" happens exactly when the
// chain is complete. Fact keys are distinct, which makes the chain from the
// question's start key unique. The task: follow L hops from the start key and
// answer with the final value, picked out of C candidate choices.
//
// Observations: each fact is rendered as one deterministic d-dim vector and
// routed into a visual frame group or an audio segment by its modality tag,
// at increasing timestamps in fact order; placeholder visual anchors sit at
// the integer timestamps so the visual stream is never empty, and the anchor
// at t=0 encodes the question's start key. Because fact keys are distinct and
// each fact occupies its own two components (see fact_encoding), the pooled
// mean observation preserves every fact loss-free.
// ============================================================================

struct EnvConfig {
  int num_symbols = 8;         // V
  int hops = 3;                // L
  int num_choices = 5;         // C
  int encoding_dim = 16;       // d
  double modality_split = 0.5; // fraction of facts tagged audio

  // Raises InfeasibleConfig when V cannot host an L-hop chain of distinct
  // symbols plus C distinct choices, or on out-of-range fields.
  void validate() const;
};

struct Fact {
  int key = 0;
  int value = 0;
  Modality modality = Modality::visual;

  bool operator==(const Fact&) const = default;
};

struct Question {
  int start_key = 0;
  int hops = 0;
};

struct EpisodeSpec {
  std::string id;
  uint64_t seed = 0;
  EnvConfig config;
  std::vector<Fact> facts;      // chain facts first (hop order), distractors after
  Question question;
  std::vector<int> choices;     // candidate answer symbols, ascending, size C
  int reference_answer = 0;     // value symbol index; element of choices
};

// Deterministic in (config, seed).
EpisodeSpec generate_episode(const EnvConfig& config, uint64_t seed);

// The value symbol reached by following `hops` facts from start_key.
// Exists and is unique by construction.
int follow_chain(const EpisodeSpec& episode, int start_key, int hops);

// Fact/question rendering. Fact (k -> v) occupies components
// (2k mod d, 2k+1 mod d) with a unit vector whose angle identifies v; the
// question puts the off-circle marker (2, 0) into the start key's components.
std::vector<double> fact_encoding(const EnvConfig& config, int key, int value);
std::vector<double> question_encoding(const EnvConfig& config, int start_key);

// Streams as described above: anchors at t = 0..F, fact f at t = f + 0.5.
std::pair<std::vector<VisualFrameGroup>, std::vector<AudioSegment>> encode_observation(
    const EpisodeSpec& episode);

// encode -> interleave -> pool, the policy-facing observation vector.
std::vector<double> observation_of(const EpisodeSpec& episode);

// Step grammar for this episode (ANS restricted to its choices).
GrammarSpec grammar_of(const EpisodeSpec& episode, bool direct_answer = false);

// The intended solution: L lookup steps along the chain plus the answer step.
ReasoningTrace reference_trace(const EpisodeSpec& episode);

// Exact-match judge. nullopt (no parseable answer) is judged incorrect.
bool judge(const std::optional<std::string>& answer, const EpisodeSpec& episode);

struct ExactCorrectness {
  double p_star = 0.0;  // probability a policy completion answers correctly
  long leaves = 0;      // enumerated completion-tree leaves
};

// Brute-force oracle: enumerates every grammar-valid completion of `prefix`
// up to max_steps total steps and sums the probability mass of completions
// whose answer matches the reference (budget-truncated completions count as
// incorrect). Raises BudgetExceeded past leaf_budget leaves.
ExactCorrectness exact_correctness(const PolicyModel& model, std::span<const double> obs,
                                   const GrammarSpec& grammar, const PrefixSolution& prefix,
                                   const EpisodeSpec& episode, int max_steps,
                                   long leaf_budget = 10'000'000);

}  // namespace steppref
