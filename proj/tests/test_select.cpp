#include <doctest.h>

#include <cmath>
#include <vector>

#include "steppref/errors.hpp"
#include "steppref/policy.hpp"
#include "steppref/rng.hpp"
#include "steppref/select.hpp"
#include "steppref/synthenv.hpp"

using namespace steppref;

namespace {

EnvConfig small_env(double split = 0.5) {
  EnvConfig env;
  env.num_symbols = 4;
  env.hops = 2;
  env.num_choices = 3;
  env.encoding_dim = 8;
  env.modality_split = split;
  return env;
}

PolicyModel small_policy(uint64_t seed) {
  PolicyConfig pc;
  pc.num_symbols = 4;
  pc.obs_dim = 8;
  pc.embed_dim = 8;
  pc.hidden_dim = 8;
  return make_policy(pc, seed);
}

std::vector<double> pooled(const std::vector<VisualFrameGroup>& visual,
                           const std::vector<AudioSegment>& audio) {
  return pool_observation(interleave(visual, audio));
}

// Reference susceptibility: per step, the mean over its token positions of
// the full-softmax KL between next-token distributions under the original
// and perturbed observations. Recomputed here from raw logits.
std::vector<double> reference_susceptibility(const PolicyModel& model,
                                             const std::vector<double>& obs_a,
                                             const std::vector<double>& obs_b,
                                             const ReasoningTrace& trace) {
  auto log_softmax = [](std::vector<double> logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (double& v : logits) v -= lse;
    return logits;
  };
  std::vector<double> out;
  std::vector<TokenId> prefix;
  for (const Step& step : trace.steps) {
    double acc = 0.0;
    for (TokenId t : step.tokens) {
      const std::vector<double> pa = log_softmax(next_token_logits(model, obs_a, prefix));
      const std::vector<double> pb = log_softmax(next_token_logits(model, obs_b, prefix));
      double kl = 0.0;
      for (size_t i = 0; i < pa.size(); ++i) kl += std::exp(pa[i]) * (pa[i] - pb[i]);
      acc += kl;
      prefix.push_back(t);
    }
    out.push_back(acc / static_cast<double>(step.tokens.size()));
  }
  return out;
}

}  // namespace

TEST_CASE("select: top step ranking is stable with ties toward earlier indices") {
  const std::vector<double> d = {0.1, 0.5, 0.3, 0.5};
  CHECK(select_top_steps(d, 2) == std::vector<int>{1, 3});
  CHECK(select_top_steps(d, 3) == std::vector<int>{1, 3, 2});
  CHECK(select_top_steps(d, 10) == std::vector<int>{1, 3, 2, 0});  // truncates to length
  CHECK(select_top_steps(d, 0).empty());
  CHECK(select_top_steps({}, 3).empty());
}

TEST_CASE("select: perturbation kinds parse and render round-trip") {
  for (PerturbKind kind :
       {PerturbKind::gaussian, PerturbKind::audio_mask, PerturbKind::visual_mask}) {
    CHECK(parse_perturb_kind(perturb_kind_name(kind)) == kind);
  }
  CHECK_THROWS_AS(parse_perturb_kind("blur"), ConfigError);
}

TEST_CASE("select: masking zeroes one modality and keeps timestamps") {
  EpisodeSpec ep = generate_episode(small_env(), 41);
  auto [visual, audio] = encode_observation(ep);
  REQUIRE_FALSE(audio.empty());

  PerturbationSpec spec;
  spec.kind = PerturbKind::audio_mask;
  auto [pv, pa] = perturb_streams(visual, audio, spec, 1);

  REQUIRE(pv.size() == visual.size());
  REQUIRE(pa.size() == audio.size());
  for (size_t i = 0; i < visual.size(); ++i) {
    CHECK(pv[i].timestamp == visual[i].timestamp);
    CHECK(pv[i].encodings == visual[i].encodings);  // untouched modality
  }
  for (size_t i = 0; i < audio.size(); ++i) {
    CHECK(pa[i].timestamp == audio[i].timestamp);
    for (const auto& enc : pa[i].encodings) {
      for (double x : enc) CHECK(x == 0.0);
    }
  }
}

TEST_CASE("select: zero-scale gaussian perturbation gives exactly zero divergence") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 42);
  const PolicyModel model = small_policy(7);
  auto [visual, audio] = encode_observation(ep);

  PerturbationSpec spec;  // gaussian
  spec.eps = 0.0;
  auto [pv, pa] = perturb_streams(visual, audio, spec, 3);
  const std::vector<double> obs = pooled(visual, audio);
  const std::vector<double> obs_p = pooled(pv, pa);
  CHECK(obs == obs_p);  // identical doubles, not just close

  const ReasoningTrace trace = reference_trace(ep);
  for (double d : step_susceptibility(model, obs, obs_p, trace)) {
    CHECK(d == 0.0);
  }
}

TEST_CASE("select: susceptibility equals the per-step mean of token KLs") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 43);
  const PolicyModel model = small_policy(8);
  auto [visual, audio] = encode_observation(ep);

  PerturbationSpec spec;
  spec.eps = 0.05;
  auto [pv, pa] = perturb_streams(visual, audio, spec, 11);
  const std::vector<double> obs = pooled(visual, audio);
  const std::vector<double> obs_p = pooled(pv, pa);
  const ReasoningTrace trace = reference_trace(ep);

  const std::vector<double> fast = step_susceptibility(model, obs, obs_p, trace);
  const std::vector<double> slow = reference_susceptibility(model, obs, obs_p, trace);
  REQUIRE(fast.size() == slow.size());
  for (size_t i = 0; i < fast.size(); ++i) {
    CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-10));
    CHECK(fast[i] >= 0.0);  // KL is nonnegative
  }
}

TEST_CASE("select: divergence grows with the gaussian scale along a fixed draw") {
  EnvConfig env = small_env();
  EpisodeSpec ep = generate_episode(env, 44);
  const PolicyModel model = small_policy(9);
  auto [visual, audio] = encode_observation(ep);
  const std::vector<double> obs = pooled(visual, audio);
  const ReasoningTrace trace = reference_trace(ep);

  double previous = -1.0;
  for (double eps : {0.001, 0.01, 0.1}) {
    PerturbationSpec spec;
    spec.eps = eps;
    auto [pv, pa] = perturb_streams(visual, audio, spec, 77);  // same seed, same noise
    const std::vector<double> d = step_susceptibility(model, obs, pooled(pv, pa), trace);
    double mean = 0.0;
    for (double x : d) mean += x;
    mean /= static_cast<double>(d.size());
    CHECK(mean > previous);
    previous = mean;
  }
}

TEST_CASE("select: audio mask on an all-visual episode changes nothing") {
  EnvConfig env = small_env(/*split=*/0.0);  // every fact visual
  EpisodeSpec ep = generate_episode(env, 45);
  const PolicyModel model = small_policy(10);
  auto [visual, audio] = encode_observation(ep);
  CHECK(audio.empty());

  PerturbationSpec spec;
  spec.kind = PerturbKind::audio_mask;
  auto [pv, pa] = perturb_streams(visual, audio, spec, 5);
  CHECK(pooled(pv, pa) == pooled(visual, audio));

  const ReasoningTrace trace = reference_trace(ep);
  for (double d :
       step_susceptibility(model, pooled(visual, audio), pooled(pv, pa), trace)) {
    CHECK(d == 0.0);
  }
}

TEST_CASE("select: gaussian perturbation is deterministic in the seed") {
  EpisodeSpec ep = generate_episode(small_env(), 46);
  auto [visual, audio] = encode_observation(ep);
  PerturbationSpec spec;
  spec.eps = 0.02;
  auto [va, aa] = perturb_streams(visual, audio, spec, 123);
  auto [vb, ab] = perturb_streams(visual, audio, spec, 123);
  CHECK(va.size() == vb.size());
  for (size_t i = 0; i < va.size(); ++i) CHECK(va[i].encodings == vb[i].encodings);
  for (size_t i = 0; i < aa.size(); ++i) CHECK(aa[i].encodings == ab[i].encodings);

  auto [vc, ac] = perturb_streams(visual, audio, spec, 124);
  bool any_different = false;
  for (size_t i = 0; i < va.size(); ++i) {
    any_different = any_different || !(vc[i].encodings == va[i].encodings);
  }
  CHECK(any_different);
}

TEST_CASE("select: susceptibility rejects empty traces") {
  EpisodeSpec ep = generate_episode(small_env(), 47);
  const PolicyModel model = small_policy(11);
  const std::vector<double> obs = observation_of(ep);
  CHECK_THROWS_AS(step_susceptibility(model, obs, obs, ReasoningTrace{}), EmptyTrace);
}
