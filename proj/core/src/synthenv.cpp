#include "steppref/synthenv.hpp"

#include <algorithm>
#include <cmath>

#include "steppref/rng.hpp"

namespace steppref {

void EnvConfig::validate() const {
  if (num_symbols < 2 || hops < 1 || num_choices < 2 || encoding_dim < 2 ||
      modality_split < 0.0 || modality_split > 1.0) {
    throw InfeasibleConfig("env config out of range");
  }
  if (num_symbols < hops + 1) {
    throw InfeasibleConfig("need " + std::to_string(hops + 1) +
                           " distinct symbols for a " + std::to_string(hops) +
                           "-hop chain, have " + std::to_string(num_symbols));
  }
  if (num_symbols < num_choices) {
    throw InfeasibleConfig("need " + std::to_string(num_choices) +
                           " distinct choice symbols, have " + std::to_string(num_symbols));
  }
}

EpisodeSpec generate_episode(const EnvConfig& config, uint64_t seed) {
  config.validate();
  const int V = config.num_symbols;
  const int L = config.hops;
  Rng rng(derive_seed(seed, "episode"));

  // Chain: L+1 distinct symbols via a partial Fisher-Yates shuffle.
  std::vector<int> pool(V);
  for (int i = 0; i < V; ++i) pool[i] = i;
  for (int i = 0; i <= L; ++i) {
    std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<int> chain(pool.begin(), pool.begin() + L + 1);

  EpisodeSpec ep;
  ep.id = "e" + std::to_string(seed);
  ep.seed = seed;
  ep.config = config;
  ep.question = {chain[0], L};
  ep.reference_answer = chain[L];

  for (int j = 0; j < L; ++j) ep.facts.push_back({chain[j], chain[j + 1], Modality::visual});

  // One distractor fact per remaining symbol, in ascending key order. The
  // terminus stays unkeyed so the chain ends exactly after L hops.
  std::vector<bool> on_chain(V, false);
  for (int s : chain) on_chain[s] = true;
  for (int k = 0; k < V; ++k) {
    if (!on_chain[k]) {
      ep.facts.push_back({k, static_cast<int>(rng.uniform_index(V)), Modality::visual});
    }
  }

  // Striped modality tags: fact f is audio iff the running quota
  // floor((f+1)*split) gains a unit, which yields round(F*split) audio facts
  // spread evenly through the fact order.
  const double split = config.modality_split;
  for (std::size_t f = 0; f < ep.facts.size(); ++f) {
    const double lo = std::floor(static_cast<double>(f) * split);
    const double hi = std::floor(static_cast<double>(f + 1) * split);
    ep.facts[f].modality = hi > lo ? Modality::audio : Modality::visual;
  }

  // Choices: the reference answer plus C-1 distinct other symbols.
  std::vector<int> others;
  for (int s = 0; s < V; ++s) {
    if (s != ep.reference_answer) others.push_back(s);
  }
  for (int i = 0; i < config.num_choices - 1; ++i) {
    std::size_t j = i + rng.uniform_index(others.size() - i);
    std::swap(others[i], others[j]);
  }
  ep.choices.assign(others.begin(), others.begin() + (config.num_choices - 1));
  ep.choices.push_back(ep.reference_answer);
  std::sort(ep.choices.begin(), ep.choices.end());
  return ep;
}

int follow_chain(const EpisodeSpec& episode, int start_key, int hops) {
  int at = start_key;
  for (int j = 0; j < hops; ++j) {
    bool found = false;
    for (const Fact& f : episode.facts) {
      if (f.key == at) {
        at = f.value;
        found = true;
        break;
      }
    }
    if (!found) throw Error("follow_chain: no fact keyed by symbol " + std::to_string(at));
  }
  return at;
}

namespace {

// Angle layout for value symbols: the sine components are spread uniformly in
// [-0.95, 0.95] (monotone in v) and the cosine sign alternates, so values stay
// well separated both in the plane and along the axis orthogonal to the
// question marker, which points along (1, 0).
double value_angle(int V, int v) {
  const double s = V == 1 ? 0.0 : -0.95 + 1.9 * static_cast<double>(v) / (V - 1);
  const double a = std::asin(s);
  return v % 2 == 0 ? a : 3.14159265358979323846 - a;
}

}  // namespace

std::vector<double> fact_encoding(const EnvConfig& config, int key, int value) {
  std::vector<double> vec(config.encoding_dim, 0.0);
  const double theta = value_angle(config.num_symbols, value);
  vec[(2 * key) % config.encoding_dim] += std::cos(theta);
  vec[(2 * key + 1) % config.encoding_dim] += std::sin(theta);
  return vec;
}

std::vector<double> question_encoding(const EnvConfig& config, int start_key) {
  std::vector<double> vec(config.encoding_dim, 0.0);
  vec[(2 * start_key) % config.encoding_dim] += 2.0;
  return vec;
}

std::pair<std::vector<VisualFrameGroup>, std::vector<AudioSegment>> encode_observation(
    const EpisodeSpec& episode) {
  const int F = static_cast<int>(episode.facts.size());
  const int d = episode.config.encoding_dim;

  std::vector<VisualFrameGroup> visual;
  std::vector<AudioSegment> audio;
  for (int f = 0; f <= F; ++f) {
    // Anchor frame at each integer timestamp; t=0 carries the question.
    VisualFrameGroup anchor;
    anchor.timestamp = static_cast<double>(f);
    anchor.encodings.push_back(f == 0 ? question_encoding(episode.config,
                                                          episode.question.start_key)
                                      : std::vector<double>(d, 0.0));
    visual.push_back(std::move(anchor));

    if (f < F) {
      const Fact& fact = episode.facts[static_cast<std::size_t>(f)];
      std::vector<double> vec = fact_encoding(episode.config, fact.key, fact.value);
      const double t = static_cast<double>(f) + 0.5;
      if (fact.modality == Modality::visual) {
        visual.push_back({t, {std::move(vec)}});
      } else {
        audio.push_back({t, {std::move(vec)}});
      }
    }
  }
  return {std::move(visual), std::move(audio)};
}

std::vector<double> observation_of(const EpisodeSpec& episode) {
  auto [visual, audio] = encode_observation(episode);
  return pool_observation(interleave(visual, audio));
}

GrammarSpec grammar_of(const EpisodeSpec& episode, bool direct_answer) {
  const Vocabulary vocab{episode.config.num_symbols};
  GrammarSpec g;
  g.num_symbols = episode.config.num_symbols;
  for (int c : episode.choices) g.choices.push_back(vocab.value_token(c));
  g.direct_answer = direct_answer;
  return g;
}

ReasoningTrace reference_trace(const EpisodeSpec& episode) {
  const Vocabulary vocab{episode.config.num_symbols};
  ReasoningTrace trace;
  trace.episode_id = episode.id;
  int at = episode.question.start_key;
  for (int j = 0; j < episode.question.hops; ++j) {
    const int next = follow_chain(episode, at, 1);
    trace.steps.push_back(
        {{kHopToken, vocab.key_token(at), vocab.value_token(next), kStepEndToken}});
    at = next;
  }
  trace.steps.push_back({{kAnsToken, vocab.value_token(at), kStepEndToken}});
  trace.answer = vocab.surface(vocab.value_token(at));
  return trace;
}

bool judge(const std::optional<std::string>& answer, const EpisodeSpec& episode) {
  if (!answer.has_value()) return false;
  const Vocabulary vocab{episode.config.num_symbols};
  return *answer == vocab.surface(vocab.value_token(episode.reference_answer));
}

ExactCorrectness exact_correctness(const PolicyModel& model, std::span<const double> obs,
                                   const GrammarSpec& grammar, const PrefixSolution& prefix,
                                   const EpisodeSpec& episode, int max_steps,
                                   long leaf_budget) {
  const Vocabulary vocab{model.config.num_symbols};
  const TokenId correct = vocab.value_token(episode.reference_answer);

  const std::vector<TokenId> prefix_tokens = prefix.tokens();
  const GrammarState start = advance_all(grammar, prefix_tokens);

  PrefixCursor cursor(model, obs);
  for (TokenId t : prefix_tokens) cursor.push(t);

  ExactCorrectness result;
  std::vector<double> logits(static_cast<std::size_t>(model.config.vocab_size()));

  // Depth-first walk over every admissible continuation token. `answer`
  // remembers the choice consumed in the answer step for the leaf test.
  auto walk = [&](auto&& self, GrammarState st, double mass, TokenId answer) -> void {
    if (is_terminal(st)) {
      if (++result.leaves > leaf_budget) throw BudgetExceeded();
      if (answer == correct) result.p_star += mass;
      return;
    }
    if (at_step_boundary(st) && st.steps_done >= max_steps) {
      if (++result.leaves > leaf_budget) throw BudgetExceeded();
      return;  // truncated, unanswered: incorrect
    }
    std::vector<TokenId> allowed;
    allowed_tokens(grammar, st, allowed);
    cursor.next_logits(logits);
    double mx = -1e300;
    for (TokenId t : allowed) mx = std::max(mx, logits[static_cast<std::size_t>(t)]);
    double sum = 0.0;
    std::vector<double> weight(allowed.size());
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      weight[i] = std::exp(logits[static_cast<std::size_t>(allowed[i])] - mx);
      sum += weight[i];
    }
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      const TokenId t = allowed[i];
      const TokenId next_answer = st.slot == Slot::ans_choice ? t : answer;
      cursor.push(t);
      self(self, advance(grammar, st, t), mass * (weight[i] / sum), next_answer);
      cursor.pop();
    }
  };
  // A prefix that is already a closed solution carries its own answer.
  TokenId answer0 = -1;
  if (!prefix.steps.empty() && prefix.steps.back().answer_form(vocab)) {
    answer0 = prefix.steps.back().answer_token();
  }
  walk(walk, start, 1.0, answer0);
  return result;
}

}  // namespace steppref
