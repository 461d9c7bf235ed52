#include "steppref/trace.hpp"

#include <sstream>

namespace steppref {

std::vector<TokenId> ReasoningTrace::tokens() const {
  std::vector<TokenId> out;
  for (const Step& s : steps) out.insert(out.end(), s.tokens.begin(), s.tokens.end());
  return out;
}

std::vector<TokenId> PrefixSolution::tokens() const {
  std::vector<TokenId> out;
  for (const Step& s : steps) out.insert(out.end(), s.tokens.begin(), s.tokens.end());
  return out;
}

namespace {

ReasoningTrace segment_impl(std::span<const TokenId> raw, const Vocabulary& vocab,
                            std::string episode_id, bool require_answer) {
  bool any_content = false;
  for (TokenId t : raw) any_content = any_content || t != kStepEndToken;
  if (!any_content) throw EmptyTrace();

  ReasoningTrace trace;
  trace.episode_id = std::move(episode_id);
  Step current;
  for (TokenId t : raw) {
    current.tokens.push_back(t);
    if (t == kStepEndToken) {
      if (current.tokens.size() == 1) throw EmptyStep();
      trace.steps.push_back(std::move(current));
      current = Step{};
    }
  }
  if (!current.tokens.empty()) {
    // Missing trailing delimiter: close the final step implicitly.
    current.tokens.push_back(kStepEndToken);
    trace.steps.push_back(std::move(current));
  }

  const Step& last = trace.steps.back();
  if (last.answer_form(vocab)) {
    trace.answer = vocab.surface(last.answer_token());
  } else if (require_answer) {
    throw MalformedAnswer();
  }
  return trace;
}

}  // namespace

ReasoningTrace segment_trace(std::span<const TokenId> raw, const Vocabulary& vocab,
                             std::string episode_id) {
  return segment_impl(raw, vocab, std::move(episode_id), /*require_answer=*/true);
}

ReasoningTrace segment_trace_lenient(std::span<const TokenId> raw, const Vocabulary& vocab,
                                     std::string episode_id) {
  return segment_impl(raw, vocab, std::move(episode_id), /*require_answer=*/false);
}

PrefixSolution prefix_of(const ReasoningTrace& trace, int k) {
  if (k < 0 || k > trace.num_steps()) {
    throw IndexOutOfRange("prefix_of: k = " + std::to_string(k) + " with " +
                          std::to_string(trace.num_steps()) + " steps");
  }
  PrefixSolution p;
  p.episode_id = trace.episode_id;
  p.steps.assign(trace.steps.begin(), trace.steps.begin() + k);
  return p;
}

std::string extract_answer(const ReasoningTrace& trace, const Vocabulary& vocab) {
  if (trace.steps.empty() || !trace.steps.back().answer_form(vocab)) {
    throw MalformedAnswer();
  }
  return vocab.surface(trace.steps.back().answer_token());
}

std::string to_text(const ReasoningTrace& trace, const Vocabulary& vocab) {
  std::string out;
  bool first = true;
  for (TokenId t : trace.tokens()) {
    if (!first) out += ' ';
    out += vocab.surface(t);
    first = false;
  }
  return out;
}

ReasoningTrace from_text(std::string_view text, const Vocabulary& vocab,
                         std::string episode_id) {
  std::vector<TokenId> raw;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) raw.push_back(vocab.parse(word));
  return segment_trace(raw, vocab, std::move(episode_id));
}

}  // namespace steppref
