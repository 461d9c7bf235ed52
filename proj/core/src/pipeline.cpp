#include "steppref/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>
#include <unordered_map>

#include "steppref/errors.hpp"
#include "steppref/rng.hpp"

namespace steppref {

// --- optimizer ----------------------------------------------------------

Adam::Adam(int total, double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps),
      m_(static_cast<size_t>(total), 0.0), v_(static_cast<size_t>(total), 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad,
                const std::vector<char>* mask) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw DimensionMismatch("optimizer step: parameter/gradient size mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < m_.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

// --- parallel map over index slots ----------------------------------------

void parallel_for(long n, int workers, const std::function<void(long)>& fn) {
  if (n <= 0) return;
  long w = std::max(1, workers);
  w = std::min(w, n);
  if (w == 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<long> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(w));
  for (long t = 0; t < w; ++t) {
    pool.emplace_back([&] {
      for (long i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// --- shared helpers ----------------------------------------------------------

namespace {

// Portable Fisher-Yates so shuffles do not depend on the standard library's
// std::shuffle implementation.
template <typename T>
void shuffle_in_place(std::vector<T>& values, Rng& rng) {
  for (size_t i = values.size(); i > 1; --i) {
    std::swap(values[i - 1], values[rng.uniform_index(i)]);
  }
}

int resolve_max_steps(int configured, const EnvConfig& env) {
  return configured > 0 ? configured : env.hops + 2;
}

// The bare-answer counterpart of reference_trace (ablation training data).
ReasoningTrace direct_answer_trace(const EpisodeSpec& episode) {
  const Vocabulary vocab{episode.config.num_symbols};
  ReasoningTrace trace;
  trace.episode_id = episode.id;
  trace.steps.push_back(
      {{kAnsToken, vocab.value_token(episode.reference_answer), kStepEndToken}});
  trace.answer = vocab.surface(vocab.value_token(episode.reference_answer));
  return trace;
}

struct PreparedEpisode {
  const EpisodeSpec* episode = nullptr;
  std::vector<double> obs;
  GrammarSpec grammar;
};

std::vector<PreparedEpisode> prepare_episodes(std::span<const EpisodeSpec> episodes,
                                              bool direct_answer = false) {
  std::vector<PreparedEpisode> out(episodes.size());
  for (size_t i = 0; i < episodes.size(); ++i) {
    out[i].episode = &episodes[i];
    out[i].obs = observation_of(episodes[i]);
    out[i].grammar = grammar_of(episodes[i], direct_answer);
  }
  return out;
}

double greedy_accuracy(const PolicyModel& model, std::span<const EpisodeSpec> held_out,
                       bool direct_answer, int workers) {
  if (held_out.empty()) return 0.0;
  EvalConfig eval;
  eval.mode = EvalConfig::Mode::one_best;
  eval.direct_answer = direct_answer;
  return evaluate(model, held_out, eval, /*seed=*/0, workers).accuracy;
}

void check_finite_loss(double loss, const char* stage) {
  if (!std::isfinite(loss)) {
    throw DivergedTraining(std::string(stage) + ": non-finite loss");
  }
}

}  // namespace

// --- episode sets --------------------------------------------------------------

std::vector<EpisodeSpec> generate_episode_set(const EnvConfig& config, int count,
                                              uint64_t seed) {
  config.validate();
  std::vector<EpisodeSpec> episodes(static_cast<size_t>(std::max(0, count)));
  for (int i = 0; i < count; ++i) {
    episodes[static_cast<size_t>(i)] =
        generate_episode(config, derive_seed(seed, "ep", static_cast<uint64_t>(i)));
  }
  return episodes;
}

// --- supervised fine-tuning ----------------------------------------------------

TrainResult run_sft(const PolicyModel& init, std::span<const EpisodeSpec> train,
                    std::span<const EpisodeSpec> held_out, const SftTrainConfig& config,
                    uint64_t seed, int workers) {
  if (train.empty()) throw EmptyDataset("run_sft: no training episodes");

  std::vector<SftExample> examples(train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    const EpisodeSpec& e = train[i];
    examples[i].obs = observation_of(e);
    examples[i].grammar = grammar_of(e, config.direct_answer);
    const ReasoningTrace trace =
        config.direct_answer ? direct_answer_trace(e) : reference_trace(e);
    examples[i].tokens = trace.tokens();
  }

  TrainResult result{init, {}};
  Adam opt(init.layout().total, config.learning_rate);
  Rng shuffle_rng(derive_seed(seed, "sft-shuffle"));

  std::vector<size_t> order(examples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  size_t cursor = order.size();  // forces a shuffle on the first batch

  std::vector<SftExample> batch;
  for (long update = 1; update <= config.max_updates; ++update) {
    batch.clear();
    for (int k = 0; k < config.batch_size; ++k) {
      if (cursor == order.size()) {
        shuffle_in_place(order, shuffle_rng);
        cursor = 0;
      }
      batch.push_back(examples[order[cursor++]]);
    }

    LossReport report = sft_loss(result.model, batch);
    check_finite_loss(report.value, "run_sft");
    opt.step(result.model.params, report.gradient);

    MetricsRecord record{"sft", update, report.value, std::nullopt, seed};
    if (config.eval_every > 0 &&
        (update % config.eval_every == 0 || update == config.max_updates) &&
        !held_out.empty()) {
      record.accuracy = greedy_accuracy(result.model, held_out, config.direct_answer, workers);
    }
    result.metrics.push_back(std::move(record));
  }
  return result;
}

// --- preference collection -------------------------------------------------------

namespace {

struct EpisodeCollection {
  std::vector<StoredFullPathPair> fullpath;
  std::vector<StoredStepPair> step;
  std::vector<StoredStepValue> values;
  std::optional<SusceptibilityRecord> dump;
};

std::vector<std::vector<TokenId>> step_token_lists(std::span<const Step> steps) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(steps.size());
  for (const Step& s : steps) out.push_back(s.tokens);
  return out;
}

EpisodeCollection collect_for_episode(const PolicyModel& model, const EpisodeSpec& episode,
                                      const CollectConfig& config, uint64_t ep_seed) {
  EpisodeCollection out;
  const std::vector<double> obs = observation_of(episode);
  const GrammarSpec grammar = grammar_of(episode);
  const Vocabulary vocab{episode.config.num_symbols};
  const int max_steps = resolve_max_steps(config.max_steps, episode.config);

  EpisodeSolutions sols =
      collect_solutions(model, obs, grammar, episode, config.num_paths, config.temperature,
                        derive_seed(ep_seed, "paths"), max_steps);
  // All paths correct: nothing to contrast, the episode is discarded.
  if (!sols.any_incorrect) return out;

  if (sols.retained()) {
    for (FullPathPair& p :
         build_fullpath_pairs(episode, sols, config.max_fullpath_pairs)) {
      out.fullpath.push_back({p.episode_id, step_token_lists(p.preferred.steps),
                              step_token_lists(p.rejected.steps), p.log_prob_gap});
    }
  }

  // Step pairs grow from the first incorrect solution: the trace known to go
  // wrong somewhere is the one worth contrasting step by step.
  const SolutionSample* incorrect = nullptr;
  const SolutionSample* first_correct = nullptr;
  for (const SolutionSample& s : sols.samples) {
    if (!s.correct && !incorrect) incorrect = &s;
    if (s.correct && !first_correct) first_correct = &s;
  }

  // Per-step value targets along one incorrect and (when present) one correct
  // solution: every step-boundary prefix gets a rollout-estimated correctness
  // target for the process head. The prefix closed by the answer step needs
  // no rollouts; its correctness is the judgement itself, stored as one exact
  // trial.
  int sol_index = 0;
  for (const SolutionSample* sol : {incorrect, first_correct}) {
    const uint64_t sol_seed = derive_seed(ep_seed, "value", static_cast<uint64_t>(sol_index++));
    if (!sol) continue;
    PrefixSolution value_prefix;
    value_prefix.episode_id = episode.id;
    for (size_t k = 0; k < sol->trace.steps.size(); ++k) {
      value_prefix.steps.push_back(sol->trace.steps[k]);
      StoredEstimate est;
      if (sol->trace.steps[k].answer_form(vocab)) {
        est = {1, sol->correct ? 1 : 0};
      } else {
        const RolloutEstimate r = estimate_correctness(
            model, obs, grammar, value_prefix, episode, config.rollouts_per_step,
            config.temperature, derive_seed(sol_seed, "step", static_cast<uint64_t>(k)),
            max_steps);
        est = {r.num_rollouts, r.num_correct};
      }
      out.values.push_back({episode.id, step_token_lists(value_prefix.steps), est});
    }
  }

  const ReasoningTrace& trace = incorrect->trace;
  if (trace.steps.empty()) return out;

  const auto [visual, audio] = encode_observation(episode);
  const auto [pvis, paud] =
      perturb_streams(visual, audio, config.perturbation, derive_seed(ep_seed, "perturb"));
  const std::vector<double> obs_pert = pool_observation(interleave(pvis, paud));
  const std::vector<double> d = step_susceptibility(model, obs, obs_pert, trace);

  // Rollouts from a complete solution are undefined, so the answer step
  // never enters the ranking.
  std::vector<int> eligible;
  for (size_t k = 0; k < trace.steps.size(); ++k) {
    if (!trace.steps[k].answer_form(vocab)) eligible.push_back(static_cast<int>(k));
  }
  std::vector<double> eligible_d(eligible.size());
  for (size_t j = 0; j < eligible.size(); ++j) eligible_d[j] = d[eligible[j]];

  std::vector<int> selected;
  for (int pos : select_top_steps(eligible_d, config.top_t)) {
    selected.push_back(eligible[pos]);
  }
  out.dump = SusceptibilityRecord{episode.id, d, selected};

  for (int k : selected) {
    PrefixSolution prefix;
    prefix.episode_id = episode.id;
    prefix.steps.assign(trace.steps.begin(), trace.steps.begin() + k);
    const Step& step_a = trace.steps[static_cast<size_t>(k)];

    Step step_b;
    try {
      step_b = sample_alternative_step(model, obs, grammar, prefix.tokens(), step_a,
                                       config.temperature,
                                       derive_seed(ep_seed, "alt", static_cast<uint64_t>(k)),
                                       config.max_attempts);
    } catch (const NoAlternativeFound&) {
      continue;  // near-deterministic prefix: pair skipped
    }

    auto [est_a, est_b] = pairwise_rollout(
        model, obs, grammar, prefix, step_a, step_b, episode, config.rollouts_per_step,
        config.temperature, derive_seed(ep_seed, "roll", static_cast<uint64_t>(k)), max_steps);

    StoredStepPair pair;
    pair.episode_id = episode.id;
    pair.prefix_steps = step_token_lists(prefix.steps);
    pair.step_a = step_a.tokens;
    pair.step_b = step_b.tokens;
    pair.est_a = {est_a.num_rollouts, est_a.num_correct};
    pair.est_b = {est_b.num_rollouts, est_b.num_correct};
    if (config.hard_labels) {
      pair.alpha = est_a.p_hat() > est_b.p_hat()   ? 1.0
                   : est_a.p_hat() < est_b.p_hat() ? 0.0
                                                   : 0.5;
    } else {
      pair.alpha = soft_alpha(est_a.p_hat(), est_b.p_hat(), config.mu);
    }
    out.step.push_back(std::move(pair));
  }
  return out;
}

}  // namespace

PreferenceDataset run_preference_collection(const PolicyModel& model,
                                            std::span<const EpisodeSpec> episodes,
                                            const CollectConfig& config, uint64_t seed,
                                            int workers,
                                            std::vector<SusceptibilityRecord>* dumps) {
  std::vector<EpisodeCollection> slots(episodes.size());
  parallel_for(static_cast<long>(episodes.size()), workers, [&](long i) {
    slots[static_cast<size_t>(i)] =
        collect_for_episode(model, episodes[static_cast<size_t>(i)], config,
                            derive_seed(seed, "collect", static_cast<uint64_t>(i)));
  });

  PreferenceDataset dataset;
  for (EpisodeCollection& slot : slots) {
    std::move(slot.fullpath.begin(), slot.fullpath.end(),
              std::back_inserter(dataset.fullpath_pairs));
    std::move(slot.step.begin(), slot.step.end(), std::back_inserter(dataset.step_pairs));
    std::move(slot.values.begin(), slot.values.end(),
              std::back_inserter(dataset.step_values));
    if (dumps && slot.dump) dumps->push_back(std::move(*slot.dump));
  }
  if (dataset.size() == 0) {
    throw EmptyDataset("run_preference_collection: no episode produced a pair");
  }
  return dataset;
}

// --- preference optimization -------------------------------------------------------

namespace {

std::vector<TokenId> flatten_steps(const std::vector<std::vector<TokenId>>& steps) {
  std::vector<TokenId> out;
  for (const auto& s : steps) out.insert(out.end(), s.begin(), s.end());
  return out;
}

// step:fullpath interleaving ratio, e.g. "1:1" or "2:1".
std::pair<int, int> parse_batch_mix(const std::string& mix) {
  auto colon = mix.find(':');
  try {
    if (colon != std::string::npos) {
      int s = std::stoi(mix.substr(0, colon));
      int f = std::stoi(mix.substr(colon + 1));
      if (s >= 0 && f >= 0 && s + f > 0) return {s, f};
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("batch_mix: expected 'S:F' with nonnegative integers, got '" + mix + "'");
}

}  // namespace

TrainResult run_pdpo(const PolicyModel& sft_model, const PreferenceDataset& dataset,
                     std::span<const EpisodeSpec> episodes,
                     std::span<const EpisodeSpec> held_out, const PdpoTrainConfig& config,
                     uint64_t seed, int workers) {
  // Rehydrate stored pairs against their episodes' observations and grammars.
  std::unordered_map<std::string, PreparedEpisode> by_id;
  for (const PreparedEpisode& p : prepare_episodes(episodes)) by_id[p.episode->id] = p;
  auto prepared = [&](const std::string& id) -> const PreparedEpisode& {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw IoError("preference pair references unknown episode: " + id);
    }
    return it->second;
  };

  std::vector<PreferencePair> step_pairs, fullpath_pairs;
  for (const StoredStepPair& p : dataset.step_pairs) {
    if (!config.objective.soft_labels && p.est_a.p_hat() == p.est_b.p_hat()) {
      continue;  // hard-label tie: undefined preference, dropped up front
    }
    const PreparedEpisode& prep = prepared(p.episode_id);
    PreferencePair pair;
    pair.kind = PairKind::step;
    pair.obs = prep.obs;
    pair.grammar = prep.grammar;
    pair.prefix = flatten_steps(p.prefix_steps);
    pair.a = p.step_a;
    pair.b = p.step_b;
    pair.p_a = p.est_a.p_hat();
    pair.p_b = p.est_b.p_hat();
    step_pairs.push_back(std::move(pair));
  }
  for (const StoredFullPathPair& p : dataset.fullpath_pairs) {
    const PreparedEpisode& prep = prepared(p.episode_id);
    PreferencePair pair;
    pair.kind = PairKind::fullpath;
    pair.obs = prep.obs;
    pair.grammar = prep.grammar;
    pair.a = flatten_steps(p.preferred);
    pair.b = flatten_steps(p.rejected);
    pair.p_a = 1.0;
    pair.p_b = 0.0;
    fullpath_pairs.push_back(std::move(pair));
  }
  if (step_pairs.empty() && fullpath_pairs.empty()) {
    throw EmptyDataset("run_pdpo: dataset holds no usable pair");
  }

  const auto [mix_step, mix_full] = parse_batch_mix(config.batch_mix);
  // A zero share excludes that pool entirely (mix "1:0" trains on step pairs
  // alone), so the splice below always drains what it is given.
  if (mix_step == 0) step_pairs.clear();
  if (mix_full == 0) fullpath_pairs.clear();
  if (step_pairs.empty() && fullpath_pairs.empty()) {
    throw EmptyDataset("run_pdpo: batch mix excludes every stored pair");
  }

  TrainResult result{sft_model, {}};
  const ReferenceSnapshot reference = sft_model;  // frozen before the first update
  Adam opt(sft_model.layout().total, config.learning_rate);
  Rng shuffle_rng(derive_seed(seed, "pdpo-shuffle"));

  // One epoch = both pools shuffled and spliced by the mix ratio until both
  // are exhausted; batches are consecutive chunks of the spliced sequence.
  std::vector<const PreferencePair*> epoch;
  auto build_epoch = [&] {
    std::vector<const PreferencePair*> steps, fulls;
    steps.reserve(step_pairs.size());
    fulls.reserve(fullpath_pairs.size());
    for (const PreferencePair& p : step_pairs) steps.push_back(&p);
    for (const PreferencePair& p : fullpath_pairs) fulls.push_back(&p);
    shuffle_in_place(steps, shuffle_rng);
    shuffle_in_place(fulls, shuffle_rng);
    epoch.clear();
    size_t si = 0, fi = 0;
    while (si < steps.size() || fi < fulls.size()) {
      for (int k = 0; k < mix_step && si < steps.size(); ++k) epoch.push_back(steps[si++]);
      for (int k = 0; k < mix_full && fi < fulls.size(); ++k) epoch.push_back(fulls[fi++]);
    }
  };

  size_t cursor = 0;
  build_epoch();
  std::vector<PreferencePair> batch;
  for (long update = 1; update <= config.max_updates; ++update) {
    batch.clear();
    for (int k = 0; k < config.batch_size; ++k) {
      if (cursor == epoch.size()) {
        build_epoch();
        cursor = 0;
      }
      batch.push_back(*epoch[cursor++]);
    }

    PreferenceLossReport report = pdpo_loss(result.model, reference, batch, config.objective);
    check_finite_loss(report.value, "run_pdpo");
    opt.step(result.model.params, report.gradient);

    MetricsRecord record{"pdpo", update, report.value, std::nullopt, seed};
    if (config.eval_every > 0 &&
        (update % config.eval_every == 0 || update == config.max_updates) &&
        !held_out.empty()) {
      record.accuracy = greedy_accuracy(result.model, held_out, false, workers);
    }
    result.metrics.push_back(std::move(record));
  }
  return result;
}

// --- value-head training -----------------------------------------------------------

TrainResult train_rm(const PolicyModel& init, const PreferenceDataset& dataset,
                     std::span<const EpisodeSpec> episodes, const RmTrainConfig& config,
                     uint64_t seed) {
  std::unordered_map<std::string, PreparedEpisode> by_id;
  for (const PreparedEpisode& p : prepare_episodes(episodes)) by_id[p.episode->id] = p;
  auto prepared = [&](const std::string& id) -> const PreparedEpisode& {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw IoError("preference pair references unknown episode: " + id);
    }
    return it->second;
  };

  const Vocabulary vocab{episodes.empty() ? init.config.num_symbols
                                          : episodes.front().config.num_symbols};
  std::vector<ValueExample> examples;
  if (config.head == ValueHead::prm) {
    // Step-boundary prefixes with rollout estimates as targets: the per-step
    // annotations along collected solutions plus both branches of every step
    // pair.
    for (const StoredStepValue& v : dataset.step_values) {
      const PreparedEpisode& prep = prepared(v.episode_id);
      ValueExample ex;
      ex.obs = prep.obs;
      ex.grammar = prep.grammar;
      ex.prefix = flatten_steps(v.prefix_steps);
      ex.target = v.est.p_hat();
      examples.push_back(std::move(ex));
    }
    for (const StoredStepPair& p : dataset.step_pairs) {
      const PreparedEpisode& prep = prepared(p.episode_id);
      for (const auto& [branch, est] :
           {std::pair{&p.step_a, &p.est_a}, std::pair{&p.step_b, &p.est_b}}) {
        ValueExample ex;
        ex.obs = prep.obs;
        ex.grammar = prep.grammar;
        ex.prefix = flatten_steps(p.prefix_steps);
        ex.prefix.insert(ex.prefix.end(), branch->begin(), branch->end());
        ex.target = est->p_hat();
        examples.push_back(std::move(ex));
      }
    }
  } else {
    // Closed solutions scored 1/0 by the judge; truncated (answerless)
    // rejected traces have no final state for the head and are skipped.
    for (const StoredFullPathPair& p : dataset.fullpath_pairs) {
      const PreparedEpisode& prep = prepared(p.episode_id);
      for (const auto& [steps, target] :
           {std::pair{&p.preferred, 1.0}, std::pair{&p.rejected, 0.0}}) {
        if (steps->empty() || !Step{steps->back()}.answer_form(vocab)) continue;
        ValueExample ex;
        ex.obs = prep.obs;
        ex.grammar = prep.grammar;
        ex.prefix = flatten_steps(*steps);
        ex.target = target;
        examples.push_back(std::move(ex));
      }
    }
  }
  if (examples.empty()) throw EmptyDataset("train_rm: dataset yields no head examples");

  // Freeze everything but the trained head.
  const ParamLayout L = init.layout();
  std::vector<char> mask(static_cast<size_t>(L.total), 0);
  const int w = config.head == ValueHead::orm ? L.w_orm : L.w_prm;
  const int b = config.head == ValueHead::orm ? L.b_orm : L.b_prm;
  for (int i = 0; i < L.h; ++i) mask[static_cast<size_t>(w + i)] = 1;
  mask[static_cast<size_t>(b)] = 1;

  TrainResult result{init, {}};
  Adam opt(L.total, config.learning_rate);
  Rng shuffle_rng(derive_seed(seed, "rm-shuffle"));
  std::vector<size_t> order(examples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  size_t cursor = order.size();

  const std::string stage = config.head == ValueHead::orm ? "orm" : "prm";
  std::vector<ValueExample> batch;
  for (long update = 1; update <= config.max_updates; ++update) {
    batch.clear();
    for (int k = 0; k < config.batch_size; ++k) {
      if (cursor == order.size()) {
        shuffle_in_place(order, shuffle_rng);
        cursor = 0;
      }
      batch.push_back(examples[order[cursor++]]);
    }

    LossReport report = value_head_loss(result.model, batch, config.head);
    check_finite_loss(report.value, "train_rm");
    opt.step(result.model.params, report.gradient, &mask);
    result.metrics.push_back({stage, update, report.value, std::nullopt, seed});
  }
  return result;
}

// --- evaluation ---------------------------------------------------------------------

namespace {

double prm_min_score(const PolicyModel& model, const PreparedEpisode& prep,
                     const ReasoningTrace& trace) {
  double lowest = 1.0;
  std::vector<TokenId> prefix;
  for (const Step& s : trace.steps) {
    prefix.insert(prefix.end(), s.tokens.begin(), s.tokens.end());
    lowest = std::min(
        lowest, value_head_score(model, prep.obs, prep.grammar, prefix, ValueHead::prm));
  }
  return lowest;
}

EpisodeEvalRecord evaluate_episode(const PolicyModel& model, const PreparedEpisode& prep,
                                   const EvalConfig& config, uint64_t ep_seed,
                                   const TraceScorer* custom_scorer) {
  const EpisodeSpec& episode = *prep.episode;
  const int max_steps = resolve_max_steps(config.max_steps, episode.config);
  EpisodeEvalRecord record{episode.id, std::nullopt, false};
  PrefixSolution empty;
  empty.episode_id = episode.id;

  if (config.mode == EvalConfig::Mode::one_best) {
    SampledTrace greedy = sample_trace(model, prep.obs, prep.grammar, empty,
                                       /*temperature=*/0.0, derive_seed(ep_seed, "greedy"),
                                       max_steps, episode.id);
    record.answer = greedy.trace.answer;
    record.correct = judge(greedy.trace.answer, episode);
    return record;
  }

  std::vector<SampledTrace> samples(static_cast<size_t>(config.n));
  for (int j = 0; j < config.n; ++j) {
    samples[static_cast<size_t>(j)] =
        sample_trace(model, prep.obs, prep.grammar, empty, config.temperature,
                     derive_seed(ep_seed, "sample", static_cast<uint64_t>(j)), max_steps,
                     episode.id);
  }

  if (config.mode == EvalConfig::Mode::major_at_n) {
    // votes: answer -> (count, best log prob among its traces)
    std::map<std::string, std::pair<int, double>> votes;
    for (const SampledTrace& s : samples) {
      if (!s.trace.answer) continue;  // unanswered paths do not vote
      auto it = votes.try_emplace(*s.trace.answer, 0, s.log_prob).first;
      it->second.first += 1;
      it->second.second = std::max(it->second.second, s.log_prob);
    }
    const std::pair<int, double>* best = nullptr;
    for (const auto& [answer, tally] : votes) {
      if (!best || tally.first > best->first ||
          (tally.first == best->first && tally.second > best->second)) {
        best = &tally;
        record.answer = answer;
      }
    }
  } else {  // rm_at_n
    const SampledTrace* best = nullptr;
    double best_score = 0.0;
    for (const SampledTrace& s : samples) {
      if (!s.trace.answer) continue;  // no closed solution to score
      double score;
      if (custom_scorer) {
        score = (*custom_scorer)(episode, s);
      } else if (config.scorer == ValueHead::prm) {
        score = prm_min_score(model, prep, s.trace);
      } else {
        score = value_head_score(model, prep.obs, prep.grammar, s.trace.tokens(),
                                 ValueHead::orm);
      }
      if (!best || score > best_score ||
          (score == best_score && s.log_prob > best->log_prob)) {
        best = &s;
        best_score = score;
      }
    }
    if (best) record.answer = best->trace.answer;
  }

  record.correct = judge(record.answer, episode);
  return record;
}

}  // namespace

EvalResult evaluate(const PolicyModel& model, std::span<const EpisodeSpec> episodes,
                    const EvalConfig& config, uint64_t seed, int workers,
                    const TraceScorer* custom_scorer) {
  const std::vector<PreparedEpisode> prepared =
      prepare_episodes(episodes, config.direct_answer);
  EvalResult result;
  result.records.resize(episodes.size());
  parallel_for(static_cast<long>(episodes.size()), workers, [&](long i) {
    result.records[static_cast<size_t>(i)] =
        evaluate_episode(model, prepared[static_cast<size_t>(i)], config,
                         derive_seed(seed, "eval", static_cast<uint64_t>(i)), custom_scorer);
  });
  long correct = 0;
  for (const EpisodeEvalRecord& r : result.records) correct += r.correct ? 1 : 0;
  result.accuracy =
      episodes.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(episodes.size());
  return result;
}

// --- ablation grid --------------------------------------------------------------------

std::vector<AblationRow> run_ablation(const EnvConfig& env, int train_episodes,
                                      int eval_episodes, const SftTrainConfig& sft,
                                      uint64_t seed, int workers) {
  const std::vector<EpisodeSpec> train =
      generate_episode_set(env, train_episodes, derive_seed(seed, "ablate-train"));
  const std::vector<EpisodeSpec> held_out =
      generate_episode_set(env, eval_episodes, derive_seed(seed, "ablate-eval"));

  PolicyConfig policy_config;
  policy_config.num_symbols = env.num_symbols;
  policy_config.obs_dim = env.encoding_dim;
  const PolicyModel init = make_policy(policy_config, derive_seed(seed, "ablate-init"));

  std::vector<AblationRow> rows;
  for (bool direct_data : {false, true}) {
    SftTrainConfig cell = sft;
    cell.direct_answer = direct_data;
    cell.eval_every = 0;  // grid cells report final accuracy only
    TrainResult trained =
        run_sft(init, train, {}, cell, derive_seed(seed, "ablate-sft"), workers);
    for (bool direct_inference : {false, true}) {
      EvalConfig eval;
      eval.mode = EvalConfig::Mode::one_best;
      eval.direct_answer = direct_inference;
      EvalResult res = evaluate(trained.model, held_out, eval, seed, workers);
      rows.push_back({direct_data ? "direct" : "reasoning",
                      direct_inference ? "direct" : "reasoning", res.accuracy});
    }
  }
  return rows;
}

// --- gradient certification suite ----------------------------------------------

namespace {

// Noise on top of the scaled init so no weight block sits at zero (a zero
// value-head weight would cut the trunk out of the head losses entirely).
PolicyModel noisy_policy(const PolicyConfig& config, uint64_t seed) {
  PolicyModel model = make_policy(config, derive_seed(seed, "init"));
  Rng rng(derive_seed(seed, "noise"));
  for (double& p : model.params) p += 0.3 * rng.gaussian();
  return model;
}

}  // namespace

std::vector<GradSuiteResult> run_gradient_suite(uint64_t seed, int instances_per_loss) {
  EnvConfig env;
  env.num_symbols = 4;
  env.hops = 2;
  env.num_choices = 3;
  env.encoding_dim = 8;
  env.validate();

  PolicyConfig policy_config;
  policy_config.num_symbols = env.num_symbols;
  policy_config.obs_dim = env.encoding_dim;
  policy_config.embed_dim = 8;
  policy_config.hidden_dim = 8;

  std::vector<GradSuiteResult> results = {
      {"sft", 0.0}, {"orm", 0.0}, {"prm", 0.0}, {"pdpo_hard", 0.0}, {"pdpo_soft", 0.0}};
  auto fold = [&](const char* name, const GradCheckReport& report) {
    for (GradSuiteResult& r : results) {
      if (r.loss_name == name) r.max_rel_err = std::max(r.max_rel_err, report.max_rel_err);
    }
  };

  for (int i = 0; i < instances_per_loss; ++i) {
    const uint64_t inst = derive_seed(seed, "grad-instance", static_cast<uint64_t>(i));
    const EpisodeSpec ep_a = generate_episode(env, derive_seed(inst, "ep-a"));
    const EpisodeSpec ep_b = generate_episode(env, derive_seed(inst, "ep-b"));
    const PolicyModel model = noisy_policy(policy_config, derive_seed(inst, "model"));
    const ReferenceSnapshot reference = noisy_policy(policy_config, derive_seed(inst, "ref"));
    Rng rng(derive_seed(inst, "targets"));

    const std::vector<double> obs_a = observation_of(ep_a);
    const std::vector<double> obs_b = observation_of(ep_b);
    const GrammarSpec grammar_a = grammar_of(ep_a);
    const GrammarSpec grammar_b = grammar_of(ep_b);
    const ReasoningTrace trace_a = reference_trace(ep_a);
    const ReasoningTrace trace_b = reference_trace(ep_b);

    std::vector<SftExample> sft_batch = {{obs_a, grammar_a, trace_a.tokens()},
                                         {obs_b, grammar_b, trace_b.tokens()}};
    fold("sft", check_gradients(
                    model, [&](const PolicyModel& m) { return sft_loss(m, sft_batch); }));

    std::vector<ValueExample> prm_batch;
    std::vector<TokenId> cumulative;
    for (const Step& step : trace_a.steps) {
      cumulative.insert(cumulative.end(), step.tokens.begin(), step.tokens.end());
      prm_batch.push_back({obs_a, grammar_a, cumulative, rng.uniform01()});
    }
    fold("prm", check_gradients(
                    model, [&](const PolicyModel& m) { return prm_loss(m, prm_batch); }));

    std::vector<ValueExample> orm_batch = {{obs_a, grammar_a, trace_a.tokens(), 1.0},
                                           {obs_b, grammar_b, trace_b.tokens(), 0.0}};
    fold("orm", check_gradients(
                    model, [&](const PolicyModel& m) { return orm_loss(m, orm_batch); }));

    // One step pair branching after the first step, one whole-solution pair.
    std::vector<PreferencePair> pairs(2);
    pairs[0].kind = PairKind::step;
    pairs[0].obs = obs_a;
    pairs[0].grammar = grammar_a;
    pairs[0].prefix = trace_a.steps[0].tokens;
    pairs[0].a = trace_a.steps[1].tokens;
    pairs[0].b = sample_step(model, obs_a, grammar_a, pairs[0].prefix, 1.0,
                             derive_seed(inst, "alt-step"))
                     .tokens;
    pairs[0].p_a = 0.8;
    pairs[0].p_b = 0.3;
    pairs[1].kind = PairKind::fullpath;
    pairs[1].obs = obs_b;
    pairs[1].grammar = grammar_b;
    pairs[1].a = trace_b.tokens();
    pairs[1].b = sample_trace(model, obs_b, grammar_b, PrefixSolution{}, 1.0,
                              derive_seed(inst, "alt-path"), env.hops + 2, ep_b.id)
                     .trace.tokens();
    pairs[1].p_a = 1.0;
    pairs[1].p_b = 0.0;

    PreferenceObjectiveConfig hard;
    hard.beta = 0.1;
    PreferenceObjectiveConfig soft = hard;
    soft.soft_labels = true;
    soft.mu = 0.1;
    fold("pdpo_hard",
         check_gradients(model, [&](const PolicyModel& m) {
           return pdpo_loss(m, reference, pairs, hard);
         }));
    fold("pdpo_soft",
         check_gradients(model, [&](const PolicyModel& m) {
           return pdpo_loss(m, reference, pairs, soft);
         }));
  }
  return results;
}

}  // namespace steppref
