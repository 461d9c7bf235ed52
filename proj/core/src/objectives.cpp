#include "steppref/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "steppref/errors.hpp"

namespace steppref {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double log_sigmoid(double x) {
  // log(1/(1+e^-x)) without overflow on either tail.
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double binary_cross_entropy(double target_p, double predicted_r) {
  // 0 * log(0) contributes 0, so exact 0/1 targets stay finite even when the
  // prediction saturates.
  const double hit = target_p > 0.0 ? target_p * std::log(predicted_r) : 0.0;
  const double miss =
      target_p < 1.0 ? (1.0 - target_p) * std::log(1.0 - predicted_r) : 0.0;
  return -(hit + miss);
}

double preference_prob(double delta) { return sigmoid(delta); }

double paired_logistic_loss(double delta, double alpha) {
  return -(alpha * log_sigmoid(delta) + (1.0 - alpha) * log_sigmoid(-delta));
}

double soft_alpha(double p_a, double p_b, double mu) { return sigmoid((p_a - p_b) / mu); }

double step_reward_diff(double beta, double reward_a, double reward_b) {
  return beta * (reward_a - reward_b);
}

// ----------------------------------------------------------------------------

LossReport sft_loss(const PolicyModel& model, std::span<const SftExample> batch) {
  if (batch.empty()) throw EmptyBatch("sft_loss: empty batch");
  const ParamLayout L = model.layout();
  LossReport report;
  report.gradient.assign(static_cast<size_t>(L.total), 0.0);

  long total_tokens = 0;
  for (const SftExample& ex : batch) {
    if (ex.tokens.empty()) throw EmptyTrace("sft_loss: example has no tokens");
    total_tokens += static_cast<long>(ex.tokens.size());
  }
  const double scale = -1.0 / static_cast<double>(total_tokens);

  double total_log_prob = 0.0;
  for (const SftExample& ex : batch) {
    total_log_prob += accumulate_log_prob_grad(model, ex.obs, ex.grammar, ex.tokens,
                                               /*grammar_mask=*/true, /*score_from=*/0, scale,
                                               report.gradient);
  }
  report.value = -total_log_prob / static_cast<double>(total_tokens);
  return report;
}

// ----------------------------------------------------------------------------

namespace {

double continuation_log_prob(const PolicyModel& model, const PreferencePair& pair,
                             std::span<const TokenId> continuation) {
  std::vector<TokenId> tokens(pair.prefix.begin(), pair.prefix.end());
  tokens.insert(tokens.end(), continuation.begin(), continuation.end());
  return sequence_log_prob(model, pair.obs, pair.grammar, tokens, /*grammar_mask=*/true,
                           static_cast<int>(pair.prefix.size()))
      .total;
}

double continuation_log_prob_grad(const PolicyModel& model, const PreferencePair& pair,
                                  std::span<const TokenId> continuation, double coeff,
                                  std::span<double> grad) {
  std::vector<TokenId> tokens(pair.prefix.begin(), pair.prefix.end());
  tokens.insert(tokens.end(), continuation.begin(), continuation.end());
  return accumulate_log_prob_grad(model, pair.obs, pair.grammar, tokens, /*grammar_mask=*/true,
                                  static_cast<int>(pair.prefix.size()), coeff, grad);
}

// Resolves the label; nullopt means the pair is dropped (hard-label tie).
std::optional<double> pair_alpha(const PreferencePair& pair,
                                 const PreferenceObjectiveConfig& config) {
  if (pair.kind == PairKind::fullpath) return 1.0;
  if (config.soft_labels) return soft_alpha(pair.p_a, pair.p_b, config.mu);
  if (pair.p_a == pair.p_b) return std::nullopt;
  return pair.p_a > pair.p_b ? 1.0 : 0.0;
}

// Both branches of a pair must grow from a step boundary; anything else is a
// malformed pair, not a grammar problem of one branch.
void require_step_boundary(const GrammarSpec& grammar, std::span<const TokenId> prefix,
                           const char* who) {
  if (!at_step_boundary(advance_all(grammar, prefix))) {
    throw PrefixMismatch(std::string(who) + ": shared prefix does not end on a step boundary");
  }
}

}  // namespace

double step_reward_diff(const PolicyModel& model, const ReferenceSnapshot& reference,
                        std::span<const double> obs, const GrammarSpec& grammar,
                        std::span<const TokenId> prefix, const Step& step_a,
                        const Step& step_b, double beta) {
  require_step_boundary(grammar, prefix, "step_reward_diff");
  auto continuation = [&](const PolicyModel& m, const Step& s) {
    std::vector<TokenId> tokens(prefix.begin(), prefix.end());
    tokens.insert(tokens.end(), s.tokens.begin(), s.tokens.end());
    return sequence_log_prob(m, obs, grammar, tokens, /*grammar_mask=*/true,
                             static_cast<int>(prefix.size()))
        .total;
  };
  const double reward_a = continuation(model, step_a) - continuation(reference, step_a);
  const double reward_b = continuation(model, step_b) - continuation(reference, step_b);
  return step_reward_diff(beta, reward_a, reward_b);
}

PreferenceLossReport pdpo_loss(const PolicyModel& model, const ReferenceSnapshot& reference,
                               std::span<const PreferencePair> pairs,
                               const PreferenceObjectiveConfig& config) {
  if (pairs.empty()) throw EmptyBatch("pdpo_loss: empty batch");
  if (model.config.vocab_size() != reference.config.vocab_size() ||
      model.layout().total != reference.layout().total) {
    throw DimensionMismatch("pdpo_loss: reference snapshot shape differs from the policy");
  }

  PreferenceLossReport report;
  std::vector<double> alphas(pairs.size(), 0.0);
  for (size_t i = 0; i < pairs.size(); ++i) {
    if (auto a = pair_alpha(pairs[i], config)) {
      alphas[i] = *a;
      ++report.pairs_used;
    } else {
      alphas[i] = -1.0;  // sentinel: dropped
      ++report.pairs_dropped;
    }
  }
  if (report.pairs_used == 0) throw EmptyBatch("pdpo_loss: every pair dropped as a tie");

  const ParamLayout L = model.layout();
  report.gradient.assign(static_cast<size_t>(L.total), 0.0);
  const double inv_n = 1.0 / static_cast<double>(report.pairs_used);

  for (size_t i = 0; i < pairs.size(); ++i) {
    if (alphas[i] < 0.0) continue;
    const PreferencePair& pair = pairs[i];
    const double alpha = alphas[i];
    require_step_boundary(pair.grammar, pair.prefix, "pdpo_loss");

    const double reward_a = continuation_log_prob(model, pair, pair.a) -
                            continuation_log_prob(reference, pair, pair.a);
    const double reward_b = continuation_log_prob(model, pair, pair.b) -
                            continuation_log_prob(reference, pair, pair.b);
    const double delta = step_reward_diff(config.beta, reward_a, reward_b);

    report.value += paired_logistic_loss(delta, alpha) * inv_n;

    // dLoss/ddelta = sigmoid(delta) - alpha; delta depends on the policy only
    // through the two continuation log probs, scaled by +/- beta.
    const double dl_ddelta = sigmoid(delta) - alpha;
    continuation_log_prob_grad(model, pair, pair.a, dl_ddelta * config.beta * inv_n,
                               report.gradient);
    continuation_log_prob_grad(model, pair, pair.b, -dl_ddelta * config.beta * inv_n,
                               report.gradient);
  }
  return report;
}

// ----------------------------------------------------------------------------

LossReport value_head_loss(const PolicyModel& model, std::span<const ValueExample> batch,
                           ValueHead head) {
  if (batch.empty()) throw EmptyBatch("value_head_loss: empty batch");
  const ParamLayout L = model.layout();
  LossReport report;
  report.gradient.assign(static_cast<size_t>(L.total), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (const ValueExample& ex : batch) {
    const double logit = value_head_logit(model, ex.obs, ex.grammar, ex.prefix, head);
    // BCE of sigmoid(logit) against the target, in the stable logit form.
    report.value -= (ex.target * log_sigmoid(logit) +
                     (1.0 - ex.target) * log_sigmoid(-logit)) *
                    inv_n;
    const double dl_dlogit = sigmoid(logit) - ex.target;
    accumulate_value_head_logit_grad(model, ex.obs, ex.grammar, ex.prefix, head,
                                     dl_dlogit * inv_n, report.gradient);
  }
  return report;
}

LossReport prm_loss(const PolicyModel& model, std::span<const ValueExample> batch) {
  return value_head_loss(model, batch, ValueHead::prm);
}

LossReport orm_loss(const PolicyModel& model, std::span<const ValueExample> batch) {
  return value_head_loss(model, batch, ValueHead::orm);
}

// ----------------------------------------------------------------------------

GradCheckReport check_gradients(const PolicyModel& model,
                                const std::function<LossReport(const PolicyModel&)>& loss,
                                double step, double floor) {
  const LossReport analytic = loss(model);
  const int total = model.layout().total;
  if (static_cast<int>(analytic.gradient.size()) != total) {
    throw DimensionMismatch("check_gradients: loss gradient size mismatch");
  }

  GradCheckReport report;
  PolicyModel probe = model;
  for (int i = 0; i < total; ++i) {
    const double original = probe.params[i];
    probe.params[i] = original + step;
    const double up = loss(probe).value;
    probe.params[i] = original - step;
    const double down = loss(probe).value;
    probe.params[i] = original;

    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic.gradient[i];
    const double rel = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), floor);
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coord = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

}  // namespace steppref
