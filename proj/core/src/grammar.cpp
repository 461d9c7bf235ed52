#include "steppref/grammar.hpp"

namespace steppref {

void allowed_tokens(const GrammarSpec& spec, const GrammarState& state,
                    std::vector<TokenId>& out) {
  out.clear();
  switch (state.slot) {
    case Slot::step_start:
      if (!spec.direct_answer) out.push_back(kHopToken);
      out.push_back(kAnsToken);
      break;
    case Slot::hop_key:
      for (int i = 0; i < spec.num_symbols; ++i) out.push_back(kMarkerCount + i);
      break;
    case Slot::hop_value:
      for (int i = 0; i < spec.num_symbols; ++i) {
        out.push_back(kMarkerCount + spec.num_symbols + i);
      }
      break;
    case Slot::ans_choice:
      out.assign(spec.choices.begin(), spec.choices.end());
      break;
    case Slot::step_end:
      out.push_back(kStepEndToken);
      break;
    case Slot::done:
      break;
  }
}

GrammarState advance(const GrammarSpec& spec, const GrammarState& state, TokenId token) {
  std::vector<TokenId> ok;
  allowed_tokens(spec, state, ok);
  bool admissible = false;
  for (TokenId t : ok) admissible = admissible || t == token;
  if (!admissible) {
    throw GrammarViolation("advance: token " + std::to_string(token) +
                           " not admissible in current slot");
  }

  GrammarState next = state;
  switch (state.slot) {
    case Slot::step_start:
      next.in_answer_step = token == kAnsToken;
      next.slot = token == kAnsToken ? Slot::ans_choice : Slot::hop_key;
      break;
    case Slot::hop_key:
      next.slot = Slot::hop_value;
      break;
    case Slot::hop_value:
    case Slot::ans_choice:
      next.slot = Slot::step_end;
      break;
    case Slot::step_end:
      ++next.steps_done;
      next.slot = state.in_answer_step ? Slot::done : Slot::step_start;
      next.in_answer_step = false;
      break;
    case Slot::done:
      break;  // unreachable: allowed set is empty
  }
  return next;
}

GrammarState advance_all(const GrammarSpec& spec, std::span<const TokenId> tokens) {
  GrammarState s;
  for (TokenId t : tokens) s = advance(spec, s, t);
  return s;
}

}  // namespace steppref
