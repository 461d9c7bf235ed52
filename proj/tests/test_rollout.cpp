#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "steppref/errors.hpp"
#include "steppref/rng.hpp"
#include "steppref/rollout.hpp"
#include "steppref/synthenv.hpp"

using namespace steppref;

namespace {

EnvConfig small_env() {
  EnvConfig env;
  env.num_symbols = 4;
  env.hops = 2;
  env.num_choices = 3;
  env.encoding_dim = 8;
  return env;
}

PolicyModel small_policy(uint64_t seed) {
  PolicyConfig pc;
  pc.num_symbols = 4;
  pc.obs_dim = 8;
  pc.embed_dim = 8;
  pc.hidden_dim = 8;
  return seed == 0 ? make_policy(pc) : make_policy(pc, seed);
}

}  // namespace

TEST_CASE("rollout: estimate bookkeeping is plain division") {
  RolloutEstimate est{6, 4};
  CHECK(est.p_hat() == doctest::Approx(4.0 / 6.0).epsilon(1e-15));
  CHECK(RolloutEstimate{10, 0}.p_hat() == 0.0);
  CHECK(RolloutEstimate{0, 0}.p_hat() == 0.0);  // no rollouts, no signal
}

TEST_CASE("rollout: correctness estimates are deterministic and well-calibrated") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 33);
  const std::vector<double> obs = observation_of(ep);
  const GrammarSpec grammar = grammar_of(ep, /*direct_answer=*/true);
  const PolicyModel uniform = small_policy(0);

  RolloutEstimate a =
      estimate_correctness(uniform, obs, grammar, PrefixSolution{}, ep, 2000, 1.0, 7, 2);
  RolloutEstimate b =
      estimate_correctness(uniform, obs, grammar, PrefixSolution{}, ep, 2000, 1.0, 7, 2);
  CHECK(a.num_rollouts == 2000);
  CHECK(a.num_correct == b.num_correct);  // same seed, same outcome

  // Uniform direct answers land on the reference with probability 1/3; at
  // n = 2000 a 5-sigma band is about +/- 0.053.
  CHECK(a.p_hat() == doctest::Approx(1.0 / 3.0).epsilon(0.17));
}

TEST_CASE("rollout: collected solutions carry consistent flags and scores") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 34);
  const std::vector<double> obs = observation_of(ep);
  const GrammarSpec grammar = grammar_of(ep);
  const PolicyModel model = small_policy(91);

  EpisodeSolutions sols = collect_solutions(model, obs, grammar, ep, 10, 1.0, 55, 4);
  REQUIRE(sols.samples.size() == 10);
  bool saw_correct = false, saw_incorrect = false;
  for (const SolutionSample& s : sols.samples) {
    CHECK(s.correct == judge(s.trace.answer, ep));
    saw_correct = saw_correct || s.correct;
    saw_incorrect = saw_incorrect || !s.correct;
    const SequenceScore rescored =
        sequence_log_prob(model, obs, grammar, s.trace.tokens(), true);
    CHECK(s.total_log_prob == doctest::Approx(rescored.total).epsilon(1e-10));
  }
  CHECK(sols.any_correct == saw_correct);
  CHECK(sols.any_incorrect == saw_incorrect);
  CHECK(sols.retained() == (saw_correct && saw_incorrect));

  EpisodeSolutions rerun = collect_solutions(model, obs, grammar, ep, 10, 1.0, 55, 4);
  for (size_t i = 0; i < 10; ++i) CHECK(rerun.samples[i].trace == sols.samples[i].trace);
}

TEST_CASE("rollout: full-path pairs rank by gap and respect the cap") {
  EpisodeSpec ep = generate_episode(small_env(), 35);
  EpisodeSolutions sols;
  auto add = [&](double lp, bool correct) {
    SolutionSample s;
    s.trace.episode_id = ep.id;
    s.trace.answer = correct ? "v" + std::to_string(ep.reference_answer) : "v0*";
    s.total_log_prob = lp;
    s.correct = correct;
    sols.samples.push_back(s);
    sols.any_correct = sols.any_correct || correct;
    sols.any_incorrect = sols.any_incorrect || !correct;
  };
  add(-1.0, true);
  add(-2.0, false);
  add(-5.0, true);
  add(-9.0, false);

  // Cross gaps: |-1+2| = 1, |-1+9| = 8, |-5+2| = 3, |-5+9| = 4.
  std::vector<FullPathPair> all = build_fullpath_pairs(ep, sols, -1);
  REQUIRE(all.size() == 4);
  CHECK(all[0].log_prob_gap == doctest::Approx(8.0));
  CHECK(all[1].log_prob_gap == doctest::Approx(4.0));
  CHECK(all[2].log_prob_gap == doctest::Approx(3.0));
  CHECK(all[3].log_prob_gap == doctest::Approx(1.0));
  for (const FullPathPair& p : all) {
    CHECK(judge(p.preferred.answer, ep));
    CHECK_FALSE(judge(p.rejected.answer, ep));
    CHECK(p.episode_id == ep.id);
  }

  std::vector<FullPathPair> capped = build_fullpath_pairs(ep, sols, 2);
  REQUIRE(capped.size() == 2);
  CHECK(capped[0].log_prob_gap == doctest::Approx(8.0));
  CHECK(capped[1].log_prob_gap == doctest::Approx(4.0));
}

TEST_CASE("rollout: alternative steps follow the leave-one-out distribution") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 36);
  const std::vector<double> obs = observation_of(ep);
  GrammarSpec grammar = grammar_of(ep);
  const PolicyModel uniform = small_policy(0);
  const Vocabulary vocab{4};

  // Under the zero policy from the empty prefix: P(hop step) = 1/2 * 1/16,
  // P(answer step) = 1/2 * 1/3. Excluding the taken hop step and
  // renormalizing leaves mass 1 - 1/32.
  Step taken{{kHopToken, vocab.key_token(0), vocab.value_token(0), kStepEndToken}};
  const double p_hop = 1.0 / 32.0, p_ans = 1.0 / 6.0;
  const double renorm = 1.0 - p_hop;

  std::map<std::vector<TokenId>, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    Step alt = sample_alternative_step(uniform, obs, grammar, {}, taken, 1.0,
                                       derive_seed(777, "alt", i));
    CHECK_FALSE(alt == taken);
    ++counts[alt.tokens];
  }

  // Every other hop step: expected frequency (1/32)/renorm; answer steps:
  // (1/6)/renorm. Check a 4-sigma band around each.
  auto in_band = [&](int count, double p) {
    const double mean = draws * p / renorm;
    const double sd = std::sqrt(draws * (p / renorm) * (1.0 - p / renorm));
    return std::abs(count - mean) <= 4.0 * sd;
  };
  int checked_hops = 0, checked_answers = 0;
  for (int k = 0; k < 4; ++k) {
    for (int v = 0; v < 4; ++v) {
      Step s{{kHopToken, vocab.key_token(k), vocab.value_token(v), kStepEndToken}};
      if (s == taken) {
        CHECK(counts.find(s.tokens) == counts.end());
        continue;
      }
      CHECK(in_band(counts[s.tokens], p_hop));
      ++checked_hops;
    }
  }
  for (TokenId c : grammar.choices) {
    Step s{{kAnsToken, c, kStepEndToken}};
    CHECK(in_band(counts[s.tokens], p_ans));
    ++checked_answers;
  }
  CHECK(checked_hops == 15);
  CHECK(checked_answers == 3);
}

TEST_CASE("rollout: alternative sampling exhausts when no alternative exists") {
  EnvConfig env = small_env();
  env.num_choices = 2;
  EpisodeSpec ep = generate_episode(env, 37);
  const std::vector<double> obs = observation_of(ep);
  GrammarSpec grammar = grammar_of(ep, /*direct_answer=*/true);
  grammar.choices.resize(1);  // one admissible step in total
  const PolicyModel uniform = small_policy(0);

  Step only{{kAnsToken, grammar.choices[0], kStepEndToken}};
  CHECK_THROWS_AS(
      sample_alternative_step(uniform, obs, grammar, {}, only, 1.0, 5, /*max_attempts=*/8),
      NoAlternativeFound);
}

TEST_CASE("rollout: pairwise estimates are deterministic and branch-independent") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 38);
  const std::vector<double> obs = observation_of(ep);
  const GrammarSpec grammar = grammar_of(ep);
  const PolicyModel model = small_policy(70);
  const Vocabulary vocab{4};

  ReasoningTrace ref = reference_trace(ep);
  PrefixSolution prefix;
  prefix.episode_id = ep.id;
  prefix.steps.push_back(ref.steps[0]);
  const Step& step_a = ref.steps[1];
  Step step_b{{kAnsToken, vocab.value_token(ep.choices[0]), kStepEndToken}};

  auto [est_a, est_b] =
      pairwise_rollout(model, obs, grammar, prefix, step_a, step_b, ep, 6, 1.0, 99, 4);
  CHECK(est_a.num_rollouts == 6);
  CHECK(est_b.num_rollouts == 6);

  auto [re_a, re_b] =
      pairwise_rollout(model, obs, grammar, prefix, step_a, step_b, ep, 6, 1.0, 99, 4);
  CHECK(re_a.num_correct == est_a.num_correct);
  CHECK(re_b.num_correct == est_b.num_correct);

  // Swapping the branches swaps the derived seeds, so each branch keeps its
  // own estimate identity only through its own label.
  auto [sw_b, sw_a] =
      pairwise_rollout(model, obs, grammar, prefix, step_b, step_a, ep, 6, 1.0, 99, 4);
  CHECK(sw_a.num_rollouts == 6);
  CHECK(sw_b.num_rollouts == 6);
}
