#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "steppref/errors.hpp"
#include "steppref/rng.hpp"
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

// Frozen copy of the value-direction formula: spread the sine over
// [-0.95, 0.95], alternate the cosine sign by parity. Any drift in the
// library encoding breaks this oracle on purpose.
std::pair<double, double> expected_direction(int V, int v) {
  const double s = V == 1 ? 0.0 : -0.95 + 1.9 * static_cast<double>(v) / (V - 1);
  const double a = std::asin(s);
  const double theta = v % 2 == 0 ? a : 3.14159265358979323846 - a;
  return {std::cos(theta), std::sin(theta)};
}

}  // namespace

TEST_CASE("synthenv: generation is deterministic in (config, seed)") {
  EnvConfig env;  // defaults V=8 L=3 C=5
  EpisodeSpec a = generate_episode(env, 12345);
  EpisodeSpec b = generate_episode(env, 12345);
  CHECK(a.id == b.id);
  CHECK(a.facts == b.facts);
  CHECK(a.question.start_key == b.question.start_key);
  CHECK(a.choices == b.choices);
  CHECK(a.reference_answer == b.reference_answer);

  EpisodeSpec c = generate_episode(env, 12346);
  CHECK(a.id != c.id);
}

TEST_CASE("synthenv: episode structure invariants over 100 episodes") {
  EnvConfig env;  // V=8 L=3 C=5
  for (uint64_t seed = 0; seed < 100; ++seed) {
    EpisodeSpec ep = generate_episode(env, derive_seed(9000, "structure", seed));

    // Every symbol except the chain terminus keys exactly one fact.
    REQUIRE(static_cast<int>(ep.facts.size()) == env.num_symbols - 1);
    std::set<int> keys;
    for (const Fact& f : ep.facts) {
      CHECK(f.key >= 0);
      CHECK(f.key < env.num_symbols);
      CHECK(f.value >= 0);
      CHECK(f.value < env.num_symbols);
      keys.insert(f.key);
    }
    CHECK(static_cast<int>(keys.size()) == env.num_symbols - 1);  // distinct keys

    // Chain facts lead in hop order and actually chain.
    CHECK(ep.facts[0].key == ep.question.start_key);
    for (int h = 1; h < env.hops; ++h) {
      CHECK(ep.facts[h].key == ep.facts[h - 1].value);
    }
    const int terminus = ep.facts[env.hops - 1].value;
    CHECK_FALSE(keys.count(terminus));  // the terminus has no outgoing fact

    // follow_chain agrees with the reference answer and the chain facts.
    CHECK(follow_chain(ep, ep.question.start_key, env.hops) == ep.reference_answer);
    CHECK(ep.reference_answer == terminus);

    // Choices: ascending, distinct, contain the answer, size C.
    REQUIRE(static_cast<int>(ep.choices.size()) == env.num_choices);
    for (size_t i = 1; i < ep.choices.size(); ++i) CHECK(ep.choices[i - 1] < ep.choices[i]);
    CHECK(std::count(ep.choices.begin(), ep.choices.end(), ep.reference_answer) == 1);

    // Distractors after the chain facts come in ascending key order.
    for (size_t i = env.hops + 1; i < ep.facts.size(); ++i) {
      CHECK(ep.facts[i - 1].key < ep.facts[i].key);
    }
  }
}

TEST_CASE("synthenv: modality stripe matches floor((f+1)s) > floor(fs)") {
  for (double split : {0.0, 0.25, 0.5, 1.0}) {
    EnvConfig env;
    env.modality_split = split;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      EpisodeSpec ep = generate_episode(env, derive_seed(31, "stripe", seed));
      for (size_t f = 0; f < ep.facts.size(); ++f) {
        const bool audio = std::floor((static_cast<double>(f) + 1.0) * split) >
                           std::floor(static_cast<double>(f) * split);
        CHECK((ep.facts[f].modality == Modality::audio) == audio);
      }
    }
  }
  // At the default split the hop-2 fact (f = 1) always lands on audio.
  EnvConfig env;
  EpisodeSpec ep = generate_episode(env, 77);
  CHECK(ep.facts[1].modality == Modality::audio);
}

TEST_CASE("synthenv: reference trace walks the chain and answers") {
  EnvConfig env;
  for (uint64_t seed = 200; seed < 220; ++seed) {
    EpisodeSpec ep = generate_episode(env, seed);
    ReasoningTrace trace = reference_trace(ep);
    const Vocabulary vocab{env.num_symbols};

    REQUIRE(trace.num_steps() == env.hops + 1);
    int key = ep.question.start_key;
    for (int h = 0; h < env.hops; ++h) {
      const Step& s = trace.steps[h];
      REQUIRE(s.tokens.size() == 4);
      CHECK(s.tokens[0] == kHopToken);
      CHECK(s.tokens[1] == vocab.key_token(key));
      const int value = follow_chain(ep, key, 1);
      CHECK(s.tokens[2] == vocab.value_token(value));
      CHECK(s.tokens[3] == kStepEndToken);
      key = value;
    }
    CHECK(trace.steps.back().answer_form(vocab));
    CHECK(trace.answer == "v" + std::to_string(ep.reference_answer));
    CHECK(judge(trace.answer, ep));
  }
}

TEST_CASE("synthenv: judge is exact-match on the reference value surface") {
  EpisodeSpec ep = generate_episode(EnvConfig{}, 5);
  CHECK(judge("v" + std::to_string(ep.reference_answer), ep));
  CHECK_FALSE(judge("v" + std::to_string((ep.reference_answer + 1) % 8), ep));
  CHECK_FALSE(judge(std::nullopt, ep));
  CHECK_FALSE(judge("not a value", ep));
}

TEST_CASE("synthenv: pooled observation preserves every fact loss-free") {
  EnvConfig env;  // V=8, d=16: each key owns components (2k, 2k+1) exclusively
  for (uint64_t seed = 0; seed < 100; ++seed) {
    EpisodeSpec ep = generate_episode(env, derive_seed(555, "pool", seed));

    auto [visual, audio] = encode_observation(ep);
    size_t encodings = 0;
    for (const auto& g : visual) encodings += g.encodings.size();
    for (const auto& s : audio) encodings += s.encodings.size();

    // Un-pooled sum should equal question marker + per-fact unit vectors.
    std::vector<double> expected = question_encoding(env, ep.question.start_key);
    for (const Fact& f : ep.facts) {
      const std::vector<double> enc = fact_encoding(env, f.key, f.value);
      for (int i = 0; i < env.encoding_dim; ++i) expected[i] += enc[i];
    }
    const std::vector<double> pooled = observation_of(ep);
    REQUIRE(static_cast<int>(pooled.size()) == env.encoding_dim);
    for (int i = 0; i < env.encoding_dim; ++i) {
      CHECK(pooled[i] * static_cast<double>(encodings) ==
            doctest::Approx(expected[i]).epsilon(1e-9));
    }

    // Decode every fact value back out of its block: nearest frozen direction.
    for (const Fact& f : ep.facts) {
      const std::vector<double> enc = fact_encoding(env, f.key, f.value);
      const double c = enc[(2 * f.key) % env.encoding_dim];
      const double s = enc[(2 * f.key + 1) % env.encoding_dim];
      int best = -1;
      double best_dist = 1e300;
      for (int v = 0; v < env.num_symbols; ++v) {
        auto [ec, es] = expected_direction(env.num_symbols, v);
        const double dist = (ec - c) * (ec - c) + (es - s) * (es - s);
        if (dist < best_dist) {
          best_dist = dist;
          best = v;
        }
      }
      CHECK(best == f.value);
      CHECK(best_dist == doctest::Approx(0.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("synthenv: stream layout anchors integers and facts at halves") {
  EpisodeSpec ep = generate_episode(EnvConfig{}, 99);
  auto [visual, audio] = encode_observation(ep);

  const int F = static_cast<int>(ep.facts.size());
  int visual_facts = 0;
  for (const Fact& f : ep.facts) visual_facts += f.modality == Modality::visual ? 1 : 0;
  CHECK(static_cast<int>(visual.size()) == F + 1 + visual_facts);
  CHECK(static_cast<int>(audio.size()) == F - visual_facts);

  // Anchors at t = 0..F, facts at t = f + 0.5 in their modality stream.
  std::set<double> visual_times;
  for (const auto& g : visual) visual_times.insert(g.timestamp);
  for (int t = 0; t <= F; ++t) CHECK(visual_times.count(static_cast<double>(t)));
  for (int f = 0; f < F; ++f) {
    const double expected_time = static_cast<double>(f) + 0.5;
    if (ep.facts[f].modality == Modality::audio) {
      bool found = false;
      for (const auto& s : audio) found = found || s.timestamp == expected_time;
      CHECK(found);
    } else {
      CHECK(visual_times.count(expected_time));
    }
  }
}

TEST_CASE("synthenv: config validation rejects infeasible shapes") {
  EnvConfig env;
  env.num_symbols = 3;
  env.hops = 3;  // chain needs L+1 = 4 distinct symbols
  CHECK_THROWS_AS(env.validate(), InfeasibleConfig);

  env = EnvConfig{};
  env.num_symbols = 4;
  env.num_choices = 5;  // more choices than symbols
  CHECK_THROWS_AS(env.validate(), InfeasibleConfig);

  env = EnvConfig{};
  env.modality_split = 1.5;
  CHECK_THROWS_AS(env.validate(), InfeasibleConfig);

  env = EnvConfig{};
  env.encoding_dim = 1;
  CHECK_THROWS_AS(env.validate(), InfeasibleConfig);
}

TEST_CASE("synthenv: exact correctness on trivially enumerable policies") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 17);
  const std::vector<double> obs = observation_of(ep);

  SUBCASE("uniform direct-answer policy hits 1/C exactly") {
    const GrammarSpec grammar = grammar_of(ep, /*direct_answer=*/true);
    PolicyConfig pc;
    pc.num_symbols = env.num_symbols;
    pc.obs_dim = env.encoding_dim;
    const PolicyModel uniform = make_policy(pc);  // zero weights
    ExactCorrectness exact =
        exact_correctness(uniform, obs, grammar, PrefixSolution{}, ep, /*max_steps=*/2);
    CHECK(exact.leaves == env.num_choices);
    CHECK(exact.p_star == doctest::Approx(1.0 / env.num_choices).epsilon(1e-12));
  }

  SUBCASE("a closed prefix is judged outright") {
    const GrammarSpec grammar = grammar_of(ep);
    PolicyConfig pc;
    pc.num_symbols = env.num_symbols;
    pc.obs_dim = env.encoding_dim;
    const PolicyModel model = make_policy(pc, 3);
    const Vocabulary vocab{env.num_symbols};

    PrefixSolution correct;
    correct.steps.push_back({{kAnsToken, vocab.value_token(ep.reference_answer),
                              kStepEndToken}});
    ExactCorrectness right = exact_correctness(model, obs, grammar, correct, ep, 3);
    CHECK(right.leaves == 1);
    CHECK(right.p_star == 1.0);

    int wrong_choice = ep.choices[0] == ep.reference_answer ? ep.choices[1] : ep.choices[0];
    PrefixSolution incorrect;
    incorrect.steps.push_back({{kAnsToken, vocab.value_token(wrong_choice), kStepEndToken}});
    ExactCorrectness wrong = exact_correctness(model, obs, grammar, incorrect, ep, 3);
    CHECK(wrong.leaves == 1);
    CHECK(wrong.p_star == 0.0);
  }

  SUBCASE("leaf budget overruns raise") {
    const GrammarSpec grammar = grammar_of(ep);
    PolicyConfig pc;
    pc.num_symbols = env.num_symbols;
    pc.obs_dim = env.encoding_dim;
    const PolicyModel model = make_policy(pc, 4);
    CHECK_THROWS_AS(
        exact_correctness(model, obs, grammar, PrefixSolution{}, ep, 4, /*leaf_budget=*/3),
        BudgetExceeded);
  }
}
