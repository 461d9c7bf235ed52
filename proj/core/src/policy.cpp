#include "steppref/policy.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "steppref/rng.hpp"

namespace steppref {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

ParamLayout ParamLayout::make(const PolicyConfig& config) {
  ParamLayout L;
  L.vocab = config.vocab_size();
  L.e = config.embed_dim;
  L.h = config.hidden_dim;
  L.d = config.obs_dim;
  int off = 0;
  auto block = [&off](int n) {
    int at = off;
    off += n;
    return at;
  };
  L.emb = block(L.vocab * L.e);
  L.w_m = block(L.h * L.e);
  L.w_l = block(L.h * L.e);
  L.w_obs = block(L.h * L.d);
  L.b_h = block(L.h);
  L.w_out = block(L.vocab * L.h);
  L.b_out = block(L.vocab);
  L.w_orm = block(L.h);
  L.b_orm = block(1);
  L.w_prm = block(L.h);
  L.b_prm = block(1);
  L.total = off;
  return L;
}

PolicyModel make_policy(const PolicyConfig& config) {
  PolicyModel m;
  m.config = config;
  m.params.assign(ParamLayout::make(config).total, 0.0);
  return m;
}

PolicyModel make_policy(const PolicyConfig& config, uint64_t seed) {
  PolicyModel m = make_policy(config);
  const ParamLayout L = m.layout();
  Rng rng(derive_seed(seed, "policy-init"));
  auto fill = [&](int off, int count, double sigma) {
    for (int i = 0; i < count; ++i) m.params[off + i] = sigma * rng.gaussian();
  };
  fill(L.emb, L.vocab * L.e, 0.5);
  fill(L.w_m, L.h * L.e, 1.0 / std::sqrt(static_cast<double>(L.e)));
  fill(L.w_l, L.h * L.e, 1.0 / std::sqrt(static_cast<double>(L.e)));
  fill(L.w_obs, L.h * L.d, 1.0);
  fill(L.w_out, L.vocab * L.h, 1.0 / std::sqrt(static_cast<double>(L.h)));
  // b_h, b_out and both value heads start at zero.
  return m;
}

ReferenceSnapshot snapshot_reference(const PolicyModel& model) { return model; }

void validate_finite(const PolicyModel& model) {
  for (double v : model.params) {
    if (!std::isfinite(v)) throw NonFiniteParameters();
  }
}

namespace {

void check_obs(const PolicyModel& model, std::span<const double> obs) {
  if (static_cast<int>(obs.size()) != model.config.obs_dim) {
    throw DimensionMismatch("policy: observation dim " + std::to_string(obs.size()) +
                            " != " + std::to_string(model.config.obs_dim));
  }
}

void check_token(const ParamLayout& L, TokenId t) {
  if (t < 0 || t >= L.vocab) {
    throw IndexOutOfRange("policy: token id " + std::to_string(t) + " outside vocabulary");
  }
}

// z = tanh(W_m m + W_l emb[last] + W_obs obs + b_h); last < 0 means the fixed
// start summary (both prefix terms zero).
void hidden_from_summary(const PolicyModel& model, const ParamLayout& L,
                         std::span<const double> obs, const double* m, TokenId last,
                         double* z) {
  const double* P = model.params.data();
  const double* last_emb = last >= 0 ? P + L.emb + static_cast<int>(last) * L.e : nullptr;
  for (int j = 0; j < L.h; ++j) {
    double a = P[L.b_h + j];
    if (m != nullptr) {
      const double* wm = P + L.w_m + j * L.e;
      for (int c = 0; c < L.e; ++c) a += wm[c] * m[c];
    }
    if (last_emb != nullptr) {
      const double* wl = P + L.w_l + j * L.e;
      for (int c = 0; c < L.e; ++c) a += wl[c] * last_emb[c];
    }
    const double* wo = P + L.w_obs + j * L.d;
    for (int c = 0; c < L.d; ++c) a += wo[c] * obs[c];
    z[j] = std::tanh(a);
  }
}

void logits_from_hidden(const PolicyModel& model, const ParamLayout& L, const double* z,
                        double* out) {
  const double* P = model.params.data();
  for (int v = 0; v < L.vocab; ++v) {
    double s = P[L.b_out + v];
    const double* w = P + L.w_out + v * L.h;
    for (int j = 0; j < L.h; ++j) s += w[j] * z[j];
    out[v] = s;
  }
}

// Log-softmax restricted to `allowed` (empty = full vocabulary). Fills
// `probs` aligned with the restriction and returns log p(target).
double masked_log_softmax(const std::vector<double>& logits,
                          const std::vector<TokenId>& allowed, TokenId target,
                          std::vector<double>& probs) {
  const bool full = allowed.empty();
  const std::size_t n = full ? logits.size() : allowed.size();
  double mx = -1e300;
  for (std::size_t i = 0; i < n; ++i) {
    double v = logits[full ? i : static_cast<std::size_t>(allowed[i])];
    if (v > mx) mx = v;
  }
  probs.resize(n);
  double sum = 0.0;
  double target_logit = 0.0;
  bool target_seen = false;
  for (std::size_t i = 0; i < n; ++i) {
    TokenId id = full ? static_cast<TokenId>(i) : allowed[i];
    double v = logits[static_cast<std::size_t>(id)];
    probs[i] = std::exp(v - mx);
    sum += probs[i];
    if (id == target) {
      target_logit = v;
      target_seen = true;
    }
  }
  for (double& p : probs) p /= sum;
  if (!target_seen) {
    throw GrammarViolation("sequence scoring: target token not admissible");
  }
  return target_logit - mx - std::log(sum);
}

// Saved forward state for one scored position.
struct PosRec {
  int pos = 0;                    // position index i (m averages i embeddings)
  TokenId last = -1;              // token at i-1, -1 at the sequence start
  TokenId target = 0;             // token being scored
  std::vector<double> m;          // mean embedding (empty when pos == 0)
  std::vector<double> z;          // hidden state
  std::vector<TokenId> allowed;   // restriction (empty = full vocab)
  std::vector<double> probs;      // softmax over the restriction
};

}  // namespace

std::vector<double> hidden_state(const PolicyModel& model, std::span<const double> obs,
                                 std::span<const TokenId> prefix) {
  validate_finite(model);
  check_obs(model, obs);
  const ParamLayout L = model.layout();
  std::vector<double> emb_sum(L.e, 0.0);
  const double* P = model.params.data();
  for (TokenId t : prefix) {
    check_token(L, t);
    const double* row = P + L.emb + static_cast<int>(t) * L.e;
    for (int c = 0; c < L.e; ++c) emb_sum[c] += row[c];
  }
  std::vector<double> m(L.e, 0.0);
  const int n = static_cast<int>(prefix.size());
  if (n > 0) {
    for (int c = 0; c < L.e; ++c) m[c] = emb_sum[c] / n;
  }
  std::vector<double> z(L.h);
  hidden_from_summary(model, L, obs, n > 0 ? m.data() : nullptr,
                      n > 0 ? prefix[n - 1] : TokenId{-1}, z.data());
  return z;
}

std::vector<double> next_token_logits(const PolicyModel& model, std::span<const double> obs,
                                      std::span<const TokenId> prefix) {
  const ParamLayout L = model.layout();
  std::vector<double> z = hidden_state(model, obs, prefix);
  std::vector<double> out(L.vocab);
  logits_from_hidden(model, L, z.data(), out.data());
  return out;
}

SequenceScore sequence_log_prob(const PolicyModel& model, std::span<const double> obs,
                                const GrammarSpec& grammar, std::span<const TokenId> tokens,
                                bool grammar_mask, int score_from) {
  validate_finite(model);
  check_obs(model, obs);
  const ParamLayout L = model.layout();
  const int n = static_cast<int>(tokens.size());

  SequenceScore score;
  std::vector<double> emb_sum(L.e, 0.0), m(L.e), z(L.h), logits(L.vocab), probs;
  std::vector<TokenId> allowed;
  GrammarState st;
  const double* P = model.params.data();
  for (int i = 0; i < n; ++i) {
    const TokenId y = tokens[i];
    check_token(L, y);
    if (i >= score_from) {
      allowed.clear();
      if (grammar_mask) allowed_tokens(grammar, st, allowed);
      if (i > 0) {
        for (int c = 0; c < L.e; ++c) m[c] = emb_sum[c] / i;
      }
      hidden_from_summary(model, L, obs, i > 0 ? m.data() : nullptr,
                          i > 0 ? tokens[i - 1] : TokenId{-1}, z.data());
      logits_from_hidden(model, L, z.data(), logits.data());
      const double lp = masked_log_softmax(logits, allowed, y, probs);
      score.total += lp;
      score.per_token.push_back(lp);
    }
    if (grammar_mask) st = advance(grammar, st, y);
    const double* row = P + L.emb + static_cast<int>(y) * L.e;
    for (int c = 0; c < L.e; ++c) emb_sum[c] += row[c];
  }
  return score;
}

double accumulate_log_prob_grad(const PolicyModel& model, std::span<const double> obs,
                                const GrammarSpec& grammar, std::span<const TokenId> tokens,
                                bool grammar_mask, int score_from, double coeff,
                                std::span<double> grad) {
  validate_finite(model);
  check_obs(model, obs);
  const ParamLayout L = model.layout();
  if (static_cast<int>(grad.size()) != L.total) {
    throw DimensionMismatch("accumulate_log_prob_grad: gradient buffer size mismatch");
  }
  const int n = static_cast<int>(tokens.size());
  const double* P = model.params.data();

  // ---- forward, saving what the backward pass needs --------------------
  std::vector<PosRec> recs;
  std::vector<double> emb_sum(L.e, 0.0), logits(L.vocab);
  GrammarState st;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const TokenId y = tokens[i];
    check_token(L, y);
    if (i >= score_from) {
      PosRec r;
      r.pos = i;
      r.last = i > 0 ? tokens[i - 1] : TokenId{-1};
      r.target = y;
      if (grammar_mask) allowed_tokens(grammar, st, r.allowed);
      if (i > 0) {
        r.m.resize(L.e);
        for (int c = 0; c < L.e; ++c) r.m[c] = emb_sum[c] / i;
      }
      r.z.resize(L.h);
      hidden_from_summary(model, L, obs, i > 0 ? r.m.data() : nullptr, r.last, r.z.data());
      logits_from_hidden(model, L, r.z.data(), logits.data());
      total += masked_log_softmax(logits, r.allowed, y, r.probs);
      recs.push_back(std::move(r));
    }
    if (grammar_mask) st = advance(grammar, st, y);
    const double* row = P + L.emb + static_cast<int>(y) * L.e;
    for (int c = 0; c < L.e; ++c) emb_sum[c] += row[c];
  }

  // ---- backward ---------------------------------------------------------
  // S[i] collects the mean-summary gradient dm_i / i of position i; token j
  // then receives sum_{i > j} S[i], done with one suffix sweep at the end.
  std::vector<std::vector<double>> S(static_cast<std::size_t>(n) + 1);
  std::vector<double> dz(L.h), da(L.h), dvec(L.e);
  for (const PosRec& r : recs) {
    // d(logp)/dlogit_v = 1[v == target] - p_v, restricted to the allowed set.
    std::fill(dz.begin(), dz.end(), 0.0);
    const bool full = r.allowed.empty();
    const std::size_t nv = full ? static_cast<std::size_t>(L.vocab) : r.allowed.size();
    for (std::size_t vi = 0; vi < nv; ++vi) {
      const TokenId v = full ? static_cast<TokenId>(vi) : r.allowed[vi];
      const double dlogit = coeff * ((v == r.target ? 1.0 : 0.0) - r.probs[vi]);
      grad[L.b_out + v] += dlogit;
      double* gw = grad.data() + L.w_out + static_cast<int>(v) * L.h;
      const double* w = P + L.w_out + static_cast<int>(v) * L.h;
      for (int j = 0; j < L.h; ++j) {
        gw[j] += dlogit * r.z[j];
        dz[j] += dlogit * w[j];
      }
    }
    for (int j = 0; j < L.h; ++j) da[j] = dz[j] * (1.0 - r.z[j] * r.z[j]);

    for (int j = 0; j < L.h; ++j) {
      const double g = da[j];
      if (g == 0.0) continue;
      grad[L.b_h + j] += g;
      double* gobs = grad.data() + L.w_obs + j * L.d;
      for (int c = 0; c < L.d; ++c) gobs[c] += g * obs[c];
      if (r.pos > 0) {
        double* gm = grad.data() + L.w_m + j * L.e;
        for (int c = 0; c < L.e; ++c) gm[c] += g * r.m[c];
        const double* lrow = P + L.emb + static_cast<int>(r.last) * L.e;
        double* gl = grad.data() + L.w_l + j * L.e;
        for (int c = 0; c < L.e; ++c) gl[c] += g * lrow[c];
      }
    }
    if (r.pos > 0) {
      // mean-summary path into the embeddings
      std::fill(dvec.begin(), dvec.end(), 0.0);
      for (int j = 0; j < L.h; ++j) {
        const double g = da[j];
        if (g == 0.0) continue;
        const double* wm = P + L.w_m + j * L.e;
        for (int c = 0; c < L.e; ++c) dvec[c] += g * wm[c];
      }
      auto& slot = S[static_cast<std::size_t>(r.pos)];
      slot.assign(L.e, 0.0);
      for (int c = 0; c < L.e; ++c) slot[c] = dvec[c] / r.pos;
      // last-token path
      std::fill(dvec.begin(), dvec.end(), 0.0);
      for (int j = 0; j < L.h; ++j) {
        const double g = da[j];
        if (g == 0.0) continue;
        const double* wl = P + L.w_l + j * L.e;
        for (int c = 0; c < L.e; ++c) dvec[c] += g * wl[c];
      }
      double* ge = grad.data() + L.emb + static_cast<int>(r.last) * L.e;
      for (int c = 0; c < L.e; ++c) ge[c] += dvec[c];
    }
  }
  // suffix sweep: token j receives sum_{i > j} S[i]
  std::vector<double> suffix(L.e, 0.0);
  for (int j = n - 1; j >= 0; --j) {
    const auto& s = S[static_cast<std::size_t>(j) + 1];
    if (!s.empty()) {
      for (int c = 0; c < L.e; ++c) suffix[c] += s[c];
    }
    double* ge = grad.data() + L.emb + static_cast<int>(tokens[j]) * L.e;
    for (int c = 0; c < L.e; ++c) ge[c] += suffix[c];
  }
  return total;
}

namespace {

// Shared head plumbing: validates alignment, returns the hidden state.
std::vector<double> head_hidden(const PolicyModel& model, std::span<const double> obs,
                                const GrammarSpec& grammar, std::span<const TokenId> prefix,
                                ValueHead head) {
  if (prefix.empty()) throw MisalignedPrefix("value head: empty prefix");
  const GrammarState st = advance_all(grammar, prefix);
  if (head == ValueHead::orm && !is_terminal(st)) {
    throw MisalignedPrefix("orm head: prefix is not a closed solution");
  }
  if (head == ValueHead::prm && !at_step_boundary(st)) {
    throw MisalignedPrefix("prm head: prefix does not end at a step delimiter");
  }
  return hidden_state(model, obs, prefix);
}

}  // namespace

double value_head_logit(const PolicyModel& model, std::span<const double> obs,
                        const GrammarSpec& grammar, std::span<const TokenId> prefix,
                        ValueHead head) {
  const ParamLayout L = model.layout();
  const std::vector<double> z = head_hidden(model, obs, grammar, prefix, head);
  const double* P = model.params.data();
  const int w = head == ValueHead::orm ? L.w_orm : L.w_prm;
  const int b = head == ValueHead::orm ? L.b_orm : L.b_prm;
  double a = P[b];
  for (int j = 0; j < L.h; ++j) a += P[w + j] * z[j];
  return a;
}

double value_head_score(const PolicyModel& model, std::span<const double> obs,
                        const GrammarSpec& grammar, std::span<const TokenId> prefix,
                        ValueHead head) {
  return 1.0 / (1.0 + std::exp(-value_head_logit(model, obs, grammar, prefix, head)));
}

void accumulate_value_head_logit_grad(const PolicyModel& model, std::span<const double> obs,
                                      const GrammarSpec& grammar,
                                      std::span<const TokenId> prefix, ValueHead head,
                                      double coeff, std::span<double> grad) {
  const ParamLayout L = model.layout();
  if (static_cast<int>(grad.size()) != L.total) {
    throw DimensionMismatch("accumulate_value_head_logit_grad: gradient buffer size mismatch");
  }
  const std::vector<double> z = head_hidden(model, obs, grammar, prefix, head);
  const double* P = model.params.data();
  const int w = head == ValueHead::orm ? L.w_orm : L.w_prm;
  const int b = head == ValueHead::orm ? L.b_orm : L.b_prm;

  grad[b] += coeff;
  std::vector<double> da(L.h);
  for (int j = 0; j < L.h; ++j) {
    grad[w + j] += coeff * z[j];
    da[j] = coeff * P[w + j] * (1.0 - z[j] * z[j]);
  }

  const int n = static_cast<int>(prefix.size());
  std::vector<double> m(L.e, 0.0);
  for (TokenId t : prefix) {
    const double* row = P + L.emb + static_cast<int>(t) * L.e;
    for (int c = 0; c < L.e; ++c) m[c] += row[c];
  }
  for (int c = 0; c < L.e; ++c) m[c] /= n;
  const TokenId last = prefix[n - 1];
  const double* lrow = P + L.emb + static_cast<int>(last) * L.e;

  std::vector<double> dm(L.e, 0.0), dl(L.e, 0.0);
  for (int j = 0; j < L.h; ++j) {
    const double g = da[j];
    if (g == 0.0) continue;
    grad[L.b_h + j] += g;
    double* gobs = grad.data() + L.w_obs + j * L.d;
    for (int c = 0; c < L.d; ++c) gobs[c] += g * obs[c];
    double* gm = grad.data() + L.w_m + j * L.e;
    double* gl = grad.data() + L.w_l + j * L.e;
    const double* wm = P + L.w_m + j * L.e;
    const double* wl = P + L.w_l + j * L.e;
    for (int c = 0; c < L.e; ++c) {
      gm[c] += g * m[c];
      gl[c] += g * lrow[c];
      dm[c] += g * wm[c];
      dl[c] += g * wl[c];
    }
  }
  for (TokenId t : prefix) {
    double* ge = grad.data() + L.emb + static_cast<int>(t) * L.e;
    for (int c = 0; c < L.e; ++c) ge[c] += dm[c] / n;
  }
  double* ge = grad.data() + L.emb + static_cast<int>(last) * L.e;
  for (int c = 0; c < L.e; ++c) ge[c] += dl[c];
}

PrefixCursor::PrefixCursor(const PolicyModel& model, std::span<const double> obs)
    : model_(&model), lay_(model.layout()), obs_(obs), emb_sum_(lay_.e, 0.0) {
  validate_finite(model);
  check_obs(model, obs);
}

void PrefixCursor::push(TokenId t) {
  check_token(lay_, t);
  const double* row = model_->params.data() + lay_.emb + static_cast<int>(t) * lay_.e;
  for (int c = 0; c < lay_.e; ++c) emb_sum_[c] += row[c];
  stack_.push_back(t);
}

void PrefixCursor::pop() {
  const TokenId t = stack_.back();
  stack_.pop_back();
  const double* row = model_->params.data() + lay_.emb + static_cast<int>(t) * lay_.e;
  for (int c = 0; c < lay_.e; ++c) emb_sum_[c] -= row[c];
}

void PrefixCursor::next_logits(std::vector<double>& out) const {
  const int n = length();
  std::vector<double> m(lay_.e, 0.0), z(lay_.h);
  if (n > 0) {
    for (int c = 0; c < lay_.e; ++c) m[c] = emb_sum_[c] / n;
  }
  hidden_from_summary(*model_, lay_, obs_, n > 0 ? m.data() : nullptr,
                      n > 0 ? stack_.back() : TokenId{-1}, z.data());
  out.resize(static_cast<std::size_t>(lay_.vocab));
  logits_from_hidden(*model_, lay_, z.data(), out.data());
}

namespace {

// Draws one token for the current slot; returns (token, log prob under the
// un-tempered masked softmax).
std::pair<TokenId, double> draw_token(const PolicyModel& model, const ParamLayout& L,
                                      std::span<const double> obs,
                                      const std::vector<double>& emb_sum, int len,
                                      TokenId last, const std::vector<TokenId>& allowed,
                                      double temperature, Rng& rng) {
  std::vector<double> m(L.e, 0.0), z(L.h), logits(L.vocab), probs;
  if (len > 0) {
    for (int c = 0; c < L.e; ++c) m[c] = emb_sum[c] / len;
  }
  hidden_from_summary(model, L, obs, len > 0 ? m.data() : nullptr, last, z.data());
  logits_from_hidden(model, L, z.data(), logits.data());

  TokenId picked;
  if (temperature <= 0.0) {
    // greedy limit: argmax over the allowed set, ties to the lowest id
    picked = allowed.front();
    for (TokenId t : allowed) {
      if (logits[static_cast<std::size_t>(t)] > logits[static_cast<std::size_t>(picked)]) {
        picked = t;
      }
    }
  } else {
    double mx = -1e300;
    for (TokenId t : allowed) mx = std::max(mx, logits[static_cast<std::size_t>(t)]);
    std::vector<double> w(allowed.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      w[i] = std::exp((logits[static_cast<std::size_t>(allowed[i])] - mx) / temperature);
      sum += w[i];
    }
    const double r = rng.uniform01() * sum;
    double cum = 0.0;
    std::size_t pick = allowed.size() - 1;
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      cum += w[i];
      if (r < cum) {
        pick = i;
        break;
      }
    }
    picked = allowed[pick];
  }
  const double lp = masked_log_softmax(logits, allowed, picked, probs);
  return {picked, lp};
}

}  // namespace

SampledTrace sample_trace(const PolicyModel& model, std::span<const double> obs,
                          const GrammarSpec& grammar, const PrefixSolution& prefix,
                          double temperature, uint64_t seed, int max_steps,
                          std::string episode_id) {
  validate_finite(model);
  check_obs(model, obs);
  const ParamLayout L = model.layout();
  Rng rng(seed);

  std::vector<TokenId> prefix_tokens = prefix.tokens();
  GrammarState st = advance_all(grammar, prefix_tokens);
  std::vector<double> emb_sum(L.e, 0.0);
  const double* P = model.params.data();
  for (TokenId t : prefix_tokens) {
    check_token(L, t);
    const double* row = P + L.emb + static_cast<int>(t) * L.e;
    for (int c = 0; c < L.e; ++c) emb_sum[c] += row[c];
  }
  int len = static_cast<int>(prefix_tokens.size());
  TokenId last = len > 0 ? prefix_tokens.back() : TokenId{-1};

  SampledTrace out;
  out.trace.episode_id = std::move(episode_id);
  out.trace.steps = prefix.steps;

  std::vector<TokenId> allowed;
  while (!is_terminal(st) && st.steps_done < max_steps) {
    Step step;
    while (true) {  // one whole step: ends when the delimiter is consumed
      allowed_tokens(grammar, st, allowed);
      auto [tok, lp] = draw_token(model, L, obs, emb_sum, len, last, allowed, temperature, rng);
      out.log_prob += lp;
      step.tokens.push_back(tok);
      st = advance(grammar, st, tok);
      const double* row = P + L.emb + static_cast<int>(tok) * L.e;
      for (int c = 0; c < L.e; ++c) emb_sum[c] += row[c];
      ++len;
      last = tok;
      if (tok == kStepEndToken) break;
    }
    out.trace.steps.push_back(std::move(step));
  }

  const Vocabulary vocab{model.config.num_symbols};
  if (!out.trace.steps.empty() && out.trace.steps.back().answer_form(vocab)) {
    out.trace.answer = vocab.surface(out.trace.steps.back().answer_token());
  }
  return out;
}

Step sample_step(const PolicyModel& model, std::span<const double> obs,
                 const GrammarSpec& grammar, std::span<const TokenId> prefix_tokens,
                 double temperature, uint64_t seed) {
  validate_finite(model);
  check_obs(model, obs);
  const ParamLayout L = model.layout();
  Rng rng(seed);

  GrammarState st = advance_all(grammar, prefix_tokens);
  if (is_terminal(st)) {
    throw GrammarViolation("sample_step: prefix is already a closed solution");
  }
  std::vector<double> emb_sum(L.e, 0.0);
  const double* P = model.params.data();
  for (TokenId t : prefix_tokens) {
    const double* row = P + L.emb + static_cast<int>(t) * L.e;
    for (int c = 0; c < L.e; ++c) emb_sum[c] += row[c];
  }
  int len = static_cast<int>(prefix_tokens.size());
  TokenId last = len > 0 ? prefix_tokens.back() : TokenId{-1};

  Step step;
  std::vector<TokenId> allowed;
  while (true) {
    allowed_tokens(grammar, st, allowed);
    auto [tok, lp] = draw_token(model, L, obs, emb_sum, len, last, allowed, temperature, rng);
    (void)lp;
    step.tokens.push_back(tok);
    st = advance(grammar, st, tok);
    const double* row = P + L.emb + static_cast<int>(tok) * L.e;
    for (int c = 0; c < L.e; ++c) emb_sum[c] += row[c];
    ++len;
    last = tok;
    if (tok == kStepEndToken) break;
  }
  return step;
}

// --- checkpoint io ----------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'S', 'P', 'P', 'C'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void save_checkpoint(const PolicyModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, static_cast<uint32_t>(model.config.num_symbols));
  put<uint32_t>(out, static_cast<uint32_t>(model.config.obs_dim));
  put<uint32_t>(out, static_cast<uint32_t>(model.config.embed_dim));
  put<uint32_t>(out, static_cast<uint32_t>(model.config.hidden_dim));
  put<uint64_t>(out, static_cast<uint64_t>(model.params.size()));
  out.write(reinterpret_cast<const char*>(model.params.data()),
            static_cast<std::streamsize>(model.params.size() * sizeof(double)));
  if (!out) throw IoError("save_checkpoint: short write to " + path);
}

PolicyModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("load_checkpoint: bad magic in " + path);
  }
  if (get<uint32_t>(in) != kVersion) throw IoError("load_checkpoint: unknown version");
  PolicyConfig config;
  config.num_symbols = static_cast<int>(get<uint32_t>(in));
  config.obs_dim = static_cast<int>(get<uint32_t>(in));
  config.embed_dim = static_cast<int>(get<uint32_t>(in));
  config.hidden_dim = static_cast<int>(get<uint32_t>(in));
  const uint64_t count = get<uint64_t>(in);
  PolicyModel model = make_policy(config);
  if (count != model.params.size()) {
    throw IoError("load_checkpoint: parameter count does not match header config");
  }
  in.read(reinterpret_cast<char*>(model.params.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw IoError("load_checkpoint: truncated file " + path);
  return model;
}

}  // namespace steppref
