#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steppref/vocab.hpp"

namespace steppref {

// ============================================================================
// Reasoning traces: delimiter-segmented token sequences.
//
// A trace is a list of steps, each a short token run ending with the step
// delimiter. Two step shapes exist: lookup steps [HOP key value <end_of_step>]
// and the answer step [ANS value <end_of_step>]. A complete trace ends with
// exactly one answer step; a trace cut off by a step budget carries no answer
// and is judged incorrect downstream.
// ============================================================================

// One step, trailing delimiter included.
struct Step {
  std::vector<TokenId> tokens;

  bool ends_with_delimiter() const {
    return !tokens.empty() && tokens.back() == kStepEndToken;
  }
  // Exactly [ANS, value, <end_of_step>].
  bool answer_form(const Vocabulary& vocab) const {
    return tokens.size() == 3 && tokens[0] == kAnsToken &&
           vocab.is_value(tokens[1]) && tokens[2] == kStepEndToken;
  }
  TokenId answer_token() const { return tokens[1]; }

  bool operator==(const Step&) const = default;
};

// A full reasoning trace. `answer` is the value surface ("v3") extracted from
// a well-formed final answer step, or nullopt when the trace never answered.
struct ReasoningTrace {
  std::string episode_id;
  std::vector<Step> steps;
  std::optional<std::string> answer;

  bool answered() const { return answer.has_value(); }
  int num_steps() const { return static_cast<int>(steps.size()); }
  std::vector<TokenId> tokens() const;

  bool operator==(const ReasoningTrace&) const = default;
};

// The first k steps of a trace, used as the conditioning context for rollouts
// and step-pair training. k may equal the full step count.
struct PrefixSolution {
  std::string episode_id;
  std::vector<Step> steps;

  int k() const { return static_cast<int>(steps.size()); }
  std::vector<TokenId> tokens() const;

  bool operator==(const PrefixSolution&) const = default;
};

// Splits a raw token sequence on delimiters. Trailing tokens after the last
// delimiter become a final step with the delimiter appended. Raises EmptyTrace
// when no non-delimiter token exists, EmptyStep on an empty interior segment,
// and MalformedAnswer when the final step is not answer-form.
ReasoningTrace segment_trace(std::span<const TokenId> raw, const Vocabulary& vocab,
                             std::string episode_id = "");

// Same segmentation, but a non-answer-form final step yields an unanswered
// trace instead of an error. Sampled traces truncated by a step budget take
// this path.
ReasoningTrace segment_trace_lenient(std::span<const TokenId> raw, const Vocabulary& vocab,
                                     std::string episode_id = "");

// First k steps of `trace`; IndexOutOfRange unless 0 <= k <= step count.
PrefixSolution prefix_of(const ReasoningTrace& trace, int k);

// Answer surface of the final step; MalformedAnswer if it is not answer-form
// (including the no-steps / never-answered case).
std::string extract_answer(const ReasoningTrace& trace, const Vocabulary& vocab);

// Text form: space-separated token surfaces, e.g.
// "HOP k1 v2 <end_of_step> ANS v2 <end_of_step>".
std::string to_text(const ReasoningTrace& trace, const Vocabulary& vocab);

// Parses the text form (strict: final step must be answer-form).
ReasoningTrace from_text(std::string_view text, const Vocabulary& vocab,
                         std::string episode_id = "");

}  // namespace steppref
