#pragma once

#include <functional>
#include <span>
#include <vector>

#include "steppref/grammar.hpp"
#include "steppref/policy.hpp"

namespace steppref {

// ============================================================================
// Training objectives. Every loss returns its value together with the exact
// gradient w.r.t. the full parameter vector, so a single finite-difference
// harness can certify all of them. Scalar building blocks are exposed
// separately — they carry the closed-form values the unit tests pin down.
// ============================================================================

struct LossReport {
  double value = 0.0;
  std::vector<double> gradient;  // d value / d params, size layout().total
};

// --- scalar building blocks -------------------------------------------------

double sigmoid(double x);
double log_sigmoid(double x);  // numerically stable log(sigmoid(x))

// -[p*log r + (1-p)*log(1-r)] straight on probabilities (test oracle form).
double binary_cross_entropy(double target_p, double predicted_r);

// Probability that branch a is preferred given the scaled reward gap.
double preference_prob(double delta);  // sigmoid(delta)

// -[alpha*log_sigmoid(delta) + (1-alpha)*log_sigmoid(-delta)]
double paired_logistic_loss(double delta, double alpha);

// Soft preference label sigmoid((p_a - p_b) / mu).
double soft_alpha(double p_a, double p_b, double mu);

// beta * (reward_a - reward_b), the logistic-loss argument.
double step_reward_diff(double beta, double reward_a, double reward_b);

// The same quantity evaluated from the models: rewards are policy-vs-
// reference log-prob gaps of each step given (prefix, obs). The shared
// prefix must sit on a step boundary (PrefixMismatch otherwise); sharing it
// is what cancels the soft-partition normalizer exactly.
double step_reward_diff(const PolicyModel& model, const ReferenceSnapshot& reference,
                        std::span<const double> obs, const GrammarSpec& grammar,
                        std::span<const TokenId> prefix, const Step& step_a,
                        const Step& step_b, double beta);

// --- supervised fine-tuning ---------------------------------------------

struct SftExample {
  std::vector<double> obs;
  GrammarSpec grammar;
  std::vector<TokenId> tokens;  // a full reference solution
};

// Mean NLL per token over the batch, grammar-masked. EmptyBatch / EmptyTrace.
LossReport sft_loss(const PolicyModel& model, std::span<const SftExample> batch);

// --- step / full-path preference objective -----------------------------------

enum class PairKind { step, fullpath };

struct PreferencePair {
  PairKind kind = PairKind::step;
  std::vector<double> obs;
  GrammarSpec grammar;
  std::vector<TokenId> prefix;  // shared context, possibly empty
  std::vector<TokenId> a;       // continuation tokens of each branch
  std::vector<TokenId> b;
  double p_a = 0.0;             // estimated correctness labels (step pairs);
  double p_b = 0.0;             // fullpath pairs carry 1/0 by construction
};

struct PreferenceObjectiveConfig {
  double beta = 1.0;        // reward-gap scale
  bool soft_labels = false; // hard: alpha = 1{p_a > p_b}, exact ties dropped
  double mu = 0.1;          // soft label temperature
};

struct PreferenceLossReport : LossReport {
  int pairs_used = 0;
  int pairs_dropped = 0;  // hard-label exact ties
};

// Mean paired logistic loss over the used pairs. Rewards are policy-vs-
// reference log-prob gaps of each continuation given the shared prefix; the
// reference is a constant (no gradient flows into it). Fullpath pairs always
// use alpha = 1. EmptyBatch when no pair survives.
PreferenceLossReport pdpo_loss(const PolicyModel& model, const ReferenceSnapshot& reference,
                               std::span<const PreferencePair> pairs,
                               const PreferenceObjectiveConfig& config);

// --- value heads --------------------------------------------------------

struct ValueExample {
  std::vector<double> obs;
  GrammarSpec grammar;
  std::vector<TokenId> prefix;  // ends at a step delimiter (prm) / closed (orm)
  double target = 0.0;          // rollout estimate (prm) or 0/1 outcome (orm)
};

// Mean binary cross-entropy of the head score against the target. The
// gradient covers the full parameter vector; trainers that keep the trunk
// frozen apply their own coordinate mask.
LossReport value_head_loss(const PolicyModel& model, std::span<const ValueExample> batch,
                           ValueHead head);

// Named forms: prm scores step-boundary prefixes against rollout estimates,
// orm scores closed solutions against 0/1 outcomes.
LossReport prm_loss(const PolicyModel& model, std::span<const ValueExample> batch);
LossReport orm_loss(const PolicyModel& model, std::span<const ValueExample> batch);

// --- finite-difference certification ------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_coord = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// Central differences on every coordinate: rel err is
// |analytic - numeric| / max(|analytic| + |numeric|, floor).
GradCheckReport check_gradients(const PolicyModel& model,
                                const std::function<LossReport(const PolicyModel&)>& loss,
                                double step = 1e-5, double floor = 1e-8);

}  // namespace steppref
