#pragma once

#include <span>
#include <vector>

#include "steppref/errors.hpp"
#include "steppref/vocab.hpp"

namespace steppref {

// ============================================================================
// Step grammar.
//
// Decoding is constrained to two step shapes:
//   lookup step:  HOP <key> <value> <end_of_step>
//   answer step:  ANS <choice> <end_of_step>
// where <choice> ranges over the episode's candidate answers only. After an
// answer step the sequence is closed: nothing more may be emitted. A grammar
// with direct_answer set admits only answer steps (used by the "answer
// immediately, no reasoning" inference mode).
// ============================================================================

enum class Slot {
  step_start,  // expects HOP or ANS
  hop_key,     // expects a key token
  hop_value,   // expects a value token
  ans_choice,  // expects one of the episode's choice tokens
  step_end,    // expects the delimiter
  done,        // answer step closed; nothing admissible
};

struct GrammarSpec {
  int num_symbols = 0;                // V
  std::vector<TokenId> choices;       // admissible ANS values, ascending
  bool direct_answer = false;         // restrict step_start to ANS
};

struct GrammarState {
  Slot slot = Slot::step_start;
  bool in_answer_step = false;
  int steps_done = 0;  // completed steps so far
};

inline bool at_step_boundary(const GrammarState& s) {
  return s.slot == Slot::step_start || s.slot == Slot::done;
}

inline bool is_terminal(const GrammarState& s) { return s.slot == Slot::done; }

// Admissible token ids for the current slot, ascending. Empty iff terminal.
void allowed_tokens(const GrammarSpec& spec, const GrammarState& state,
                    std::vector<TokenId>& out);

// Consumes one token; raises GrammarViolation if it is not admissible.
GrammarState advance(const GrammarSpec& spec, const GrammarState& state, TokenId token);

// Walks a whole token sequence from the initial state.
GrammarState advance_all(const GrammarSpec& spec, std::span<const TokenId> tokens);

}  // namespace steppref
