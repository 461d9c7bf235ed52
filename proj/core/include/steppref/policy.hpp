#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "steppref/grammar.hpp"
#include "steppref/trace.hpp"
#include "steppref/vocab.hpp"

namespace steppref {

// ============================================================================
// Token-level policy.
//
// A deliberately small differentiable model over the step grammar. The token
// after a prefix is scored from a bag-of-context summary: the mean of the
// prefix token embeddings, concatenated with the last token's embedding and
// the pooled observation, pushed through one tanh layer of width h:
//
//   z      = tanh(W_m * mean_emb + W_l * last_emb + W_obs * obs + b_h)
//   logits = W_out * z + b_out
//
// The empty prefix uses the fixed start summary mean_emb = last_emb = 0.
// Two scalar value heads (outcome and per-step) read the same hidden state:
// score = sigma(w_head . z + b_head). All parameters live in one flat vector
// so finite-difference checks and the optimizer stay trivial.
// ============================================================================

struct PolicyConfig {
  int num_symbols = 8;  // V; vocabulary is the 3 markers + V keys + V values
  int obs_dim = 16;
  int embed_dim = 16;
  int hidden_dim = 128;

  int vocab_size() const { return 2 * num_symbols + kMarkerCount; }
};

// Offsets of each parameter block inside the flat vector.
struct ParamLayout {
  int vocab = 0, e = 0, h = 0, d = 0;
  int emb = 0;      // vocab x e, row-major
  int w_m = 0;      // h x e
  int w_l = 0;      // h x e
  int w_obs = 0;    // h x d
  int b_h = 0;      // h
  int w_out = 0;    // vocab x h
  int b_out = 0;    // vocab
  int w_orm = 0;    // h
  int b_orm = 0;    // 1
  int w_prm = 0;    // h
  int b_prm = 0;    // 1
  int total = 0;

  static ParamLayout make(const PolicyConfig& config);

  // Coordinates belonging to the two value heads (used to freeze the trunk
  // when only heads are trained).
  bool is_head_coord(int i) const { return i >= w_orm; }
};

struct PolicyModel {
  PolicyConfig config;
  std::vector<double> params;

  ParamLayout layout() const { return ParamLayout::make(config); }
};

// A frozen copy of the policy taken before preference training; never updated.
using ReferenceSnapshot = PolicyModel;

// Zero-initialized policy: uniform next-token distribution everywhere.
PolicyModel make_policy(const PolicyConfig& config);

// Gaussian-initialized policy (deterministic in seed). Weight blocks are
// scaled by 1/sqrt(fan_in); biases and value heads start at zero.
PolicyModel make_policy(const PolicyConfig& config, uint64_t seed);

ReferenceSnapshot snapshot_reference(const PolicyModel& model);

// Raises NonFiniteParameters if any parameter is NaN/inf.
void validate_finite(const PolicyModel& model);

// Post-tanh hidden state used to score the token following `prefix`.
std::vector<double> hidden_state(const PolicyModel& model, std::span<const double> obs,
                                 std::span<const TokenId> prefix);

// Raw (unmasked) logits over the whole vocabulary for the next token.
std::vector<double> next_token_logits(const PolicyModel& model, std::span<const double> obs,
                                      std::span<const TokenId> prefix);

struct SequenceScore {
  double total = 0.0;               // sum of scored per-token log probs
  std::vector<double> per_token;    // one entry per scored position
};

// Log probability of tokens[score_from..] given (tokens[..score_from], obs).
// With grammar_mask on, each position's softmax is renormalized over the
// grammar's admissible set and a token outside it raises GrammarViolation;
// with the mask off the full softmax is used.
SequenceScore sequence_log_prob(const PolicyModel& model, std::span<const double> obs,
                                const GrammarSpec& grammar, std::span<const TokenId> tokens,
                                bool grammar_mask, int score_from = 0);

// Adds coeff * d(log prob of tokens[score_from..])/d(params) into grad (size
// layout().total) and returns that log probability. Exact gradient, including
// the embedding paths through the mean and last-token summaries.
double accumulate_log_prob_grad(const PolicyModel& model, std::span<const double> obs,
                                const GrammarSpec& grammar, std::span<const TokenId> tokens,
                                bool grammar_mask, int score_from, double coeff,
                                std::span<double> grad);

enum class ValueHead { orm, prm };

// sigma(w_head . z + b_head) at the end-of-prefix hidden state. The prm head
// requires the prefix to end on a step boundary, the orm head a closed
// (answered) solution; otherwise MisalignedPrefix.
double value_head_score(const PolicyModel& model, std::span<const double> obs,
                        const GrammarSpec& grammar, std::span<const TokenId> prefix,
                        ValueHead head);

// The head's pre-activation w_head . z + b_head (value_head_score before the
// sigmoid); losses use this form for numerical stability.
double value_head_logit(const PolicyModel& model, std::span<const double> obs,
                        const GrammarSpec& grammar, std::span<const TokenId> prefix,
                        ValueHead head);

// Adds coeff * d(w_head . z + b_head)/d(params) into grad (backprop from the
// head pre-activation; combine with dLoss/dlogit in the caller).
void accumulate_value_head_logit_grad(const PolicyModel& model, std::span<const double> obs,
                                      const GrammarSpec& grammar,
                                      std::span<const TokenId> prefix, ValueHead head,
                                      double coeff, std::span<double> grad);

// Incremental evaluation context over a growing/shrinking prefix: push and
// pop tokens in O(embed_dim) and query next-token logits without rescanning
// the prefix. Backbone of the completion-tree enumerator.
class PrefixCursor {
 public:
  PrefixCursor(const PolicyModel& model, std::span<const double> obs);

  void push(TokenId t);
  void pop();  // undoes the most recent push
  int length() const { return static_cast<int>(stack_.size()); }

  // Raw logits over the whole vocabulary for the next token.
  void next_logits(std::vector<double>& out) const;

 private:
  const PolicyModel* model_;
  ParamLayout lay_;
  std::span<const double> obs_;
  std::vector<double> emb_sum_;
  std::vector<TokenId> stack_;
};

struct SampledTrace {
  ReasoningTrace trace;
  double log_prob = 0.0;  // log probability of the sampled continuation
};

// Samples whole steps after `prefix` (often empty) until an answer step
// closes the trace or it reaches max_steps total steps, in which case the
// trace is returned unanswered. temperature > 0 scales logits; temperature 0
// decodes greedily with ties broken toward the lowest token id. Deterministic
// in seed.
SampledTrace sample_trace(const PolicyModel& model, std::span<const double> obs,
                          const GrammarSpec& grammar, const PrefixSolution& prefix,
                          double temperature, uint64_t seed, int max_steps,
                          std::string episode_id);

// Samples exactly one step following prefix_tokens. GrammarViolation if the
// prefix is already closed.
Step sample_step(const PolicyModel& model, std::span<const double> obs,
                 const GrammarSpec& grammar, std::span<const TokenId> prefix_tokens,
                 double temperature, uint64_t seed);

// --- checkpoint io ----------------------------------------------------------
// Flat binary layout (see README): magic "SPPC", u32 version, u32 num_symbols,
// u32 obs_dim, u32 embed_dim, u32 hidden_dim, u64 count, count f64 params.

void save_checkpoint(const PolicyModel& model, const std::string& path);
PolicyModel load_checkpoint(const std::string& path);

}  // namespace steppref
