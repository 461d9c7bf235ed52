#include <doctest.h>

#include <cmath>
#include <vector>

#include "steppref/errors.hpp"
#include "steppref/objectives.hpp"
#include "steppref/policy.hpp"
#include "steppref/synthenv.hpp"

using namespace steppref;

namespace {

constexpr double kLn2 = 0.6931471805599453;

EnvConfig small_env() {
  EnvConfig env;
  env.num_symbols = 4;
  env.hops = 2;
  env.num_choices = 3;
  env.encoding_dim = 8;
  env.modality_split = 0.5;
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

struct Fixture {
  EpisodeSpec ep;
  std::vector<double> obs;
  GrammarSpec grammar;
  ReasoningTrace trace;

  explicit Fixture(uint64_t seed)
      : ep(generate_episode(small_env(), seed)),
        obs(observation_of(ep)),
        grammar(grammar_of(ep)),
        trace(reference_trace(ep)) {}
};

// A grammar-valid lookup step distinct from the reference chain hops is easy
// to spell directly.
std::vector<TokenId> any_hop_step(int key, int value) {
  Vocabulary vocab{4};
  return {kHopToken, vocab.key_token(key), vocab.value_token(value), kStepEndToken};
}

std::vector<TokenId> short_answer_path(const EpisodeSpec& ep, int choice_rank) {
  Vocabulary vocab{ep.config.num_symbols};
  std::vector<TokenId> out = any_hop_step(0, 0);
  out.push_back(kAnsToken);
  out.push_back(vocab.value_token(ep.choices[choice_rank]));
  out.push_back(kStepEndToken);
  return out;
}

// A two-pair batch (one step pair, one fullpath pair) with distinct labels.
std::vector<PreferencePair> mixed_batch(const Fixture& fx) {
  std::vector<PreferencePair> pairs(2);
  pairs[0].kind = PairKind::step;
  pairs[0].obs = fx.obs;
  pairs[0].grammar = fx.grammar;
  pairs[0].prefix = fx.trace.steps[0].tokens;
  pairs[0].a = fx.trace.steps[1].tokens;
  pairs[0].b = any_hop_step(1, 2);
  pairs[0].p_a = 0.8;
  pairs[0].p_b = 0.3;

  pairs[1].kind = PairKind::fullpath;
  pairs[1].obs = fx.obs;
  pairs[1].grammar = fx.grammar;
  pairs[1].a = fx.trace.tokens();
  pairs[1].b = short_answer_path(fx.ep, 0);
  pairs[1].p_a = 1.0;
  pairs[1].p_b = 0.0;
  return pairs;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// --- scalar building blocks ---------------------------------------------

TEST_CASE("objectives: scalar blocks match closed-form values") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(preference_prob(0.0) == 0.5);
  CHECK(preference_prob(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-14));

  // -(0.75 ln 0.75 + 0.25 ln 0.25)
  CHECK(binary_cross_entropy(0.75, 0.75) ==
        doctest::Approx(0.5623351446188084).epsilon(1e-14));
  // fully confident and right -> 0
  CHECK(binary_cross_entropy(1.0, 1.0) == doctest::Approx(0.0));

  // -ln sigmoid(ln 4) = ln(5/4)
  CHECK(paired_logistic_loss(std::log(4.0), 1.0) ==
        doctest::Approx(0.22314355131420976).epsilon(1e-14));
  // delta = 0 is ln 2 for every alpha
  CHECK(paired_logistic_loss(0.0, 0.5) == doctest::Approx(kLn2).epsilon(1e-14));
  CHECK(paired_logistic_loss(0.0, 1.0) == doctest::Approx(kLn2).epsilon(1e-14));

  // sigmoid((0.9 - 0.6) / 0.1) = sigmoid(3)
  CHECK(soft_alpha(0.9, 0.6, 0.1) ==
        doctest::Approx(0.9525741268224334).epsilon(1e-14));
  CHECK(soft_alpha(0.5, 0.5, 0.1) == 0.5);

  CHECK(step_reward_diff(0.1, 0.2, -0.5) == doctest::Approx(0.07).epsilon(1e-14));
}

TEST_CASE("objectives: log_sigmoid stays finite far into both tails") {
  CHECK(log_sigmoid(-1000.0) == doctest::Approx(-1000.0).epsilon(1e-12));
  CHECK(log_sigmoid(1000.0) == doctest::Approx(0.0));
  CHECK(std::isfinite(log_sigmoid(-1e8)));
  CHECK(std::isfinite(paired_logistic_loss(-1e8, 0.0)));
  CHECK(std::isfinite(paired_logistic_loss(1e8, 1.0)));
}

// --- preference loss identities -------------------------------------------

TEST_CASE("objectives: preference loss at the reference snapshot is ln 2") {
  Fixture fx(101);
  PolicyModel model = small_policy(5);
  ReferenceSnapshot reference = snapshot_reference(model);  // theta == ref
  PreferenceObjectiveConfig cfg;

  const auto pairs = mixed_batch(fx);
  const PreferenceLossReport hard = pdpo_loss(model, reference, pairs, cfg);
  CHECK(hard.value == doctest::Approx(kLn2).epsilon(1e-12));
  CHECK(hard.pairs_used == 2);
  CHECK(hard.pairs_dropped == 0);

  cfg.soft_labels = true;
  const PreferenceLossReport soft = pdpo_loss(model, reference, pairs, cfg);
  CHECK(soft.value == doctest::Approx(kLn2).epsilon(1e-12));
}

TEST_CASE("objectives: swapping a step pair with its labels leaves loss and gradient alike") {
  Fixture fx(102);
  PolicyModel model = small_policy(6);
  PolicyModel ref_model = small_policy(7);  // distinct reference, nonzero delta
  PreferenceObjectiveConfig cfg;

  // Step pairs only: their alpha comes from the labels, so swapping branches
  // together with labels re-expresses the same preference.
  auto pairs = mixed_batch(fx);
  pairs.resize(1);
  auto swapped = pairs;
  for (auto& p : swapped) {
    std::swap(p.a, p.b);
    std::swap(p.p_a, p.p_b);
  }

  for (bool soft : {false, true}) {
    cfg.soft_labels = soft;
    const auto lhs = pdpo_loss(model, ref_model, pairs, cfg);
    const auto rhs = pdpo_loss(model, ref_model, swapped, cfg);
    CHECK(lhs.value == doctest::Approx(rhs.value).epsilon(1e-12));
    CHECK(max_abs_diff(lhs.gradient, rhs.gradient) < 1e-12);
  }
}

TEST_CASE("objectives: a swapped fullpath pair flips the expressed preference") {
  Fixture fx(111);
  PolicyModel model = small_policy(6);
  PolicyModel ref_model = small_policy(7);
  PreferenceObjectiveConfig cfg;

  // Fullpath pairs carry alpha = 1 by construction (a is the judged-correct
  // path), so swapping branches negates the reward gap instead of cancelling.
  std::vector<PreferencePair> fp{mixed_batch(fx)[1]};
  auto swapped = fp;
  std::swap(swapped[0].a, swapped[0].b);
  std::swap(swapped[0].p_a, swapped[0].p_b);

  const double forward = pdpo_loss(model, ref_model, fp, cfg).value;
  const double backward = pdpo_loss(model, ref_model, swapped, cfg).value;
  // -log sigmoid(delta) and -log sigmoid(-delta): recover delta from one and
  // predict the other.
  const double delta = -std::log(std::expm1(forward));  // sigma(d)=e^-L -> d
  CHECK(backward == doctest::Approx(-log_sigmoid(-delta)).epsilon(1e-9));
}

TEST_CASE("objectives: shifting every output bias cancels out of sequence losses") {
  Fixture fx(103);
  PolicyModel model = small_policy(8);
  const ReferenceSnapshot reference = small_policy(9);
  const auto pairs = mixed_batch(fx);
  PreferenceObjectiveConfig cfg;

  const double before = pdpo_loss(model, reference, pairs, cfg).value;
  const SftExample ex{fx.obs, fx.grammar, fx.trace.tokens()};
  const double sft_before = sft_loss(model, std::vector<SftExample>{ex}).value;

  const ParamLayout lay = model.layout();
  for (int i = 0; i < lay.vocab; ++i) model.params[lay.b_out + i] += 0.37;

  CHECK(pdpo_loss(model, reference, pairs, cfg).value ==
        doctest::Approx(before).epsilon(1e-12));
  CHECK(sft_loss(model, std::vector<SftExample>{ex}).value ==
        doctest::Approx(sft_before).epsilon(1e-12));
}

TEST_CASE("objectives: near-zero temperature soft labels reproduce hard labels") {
  Fixture fx(104);
  PolicyModel model = small_policy(10);
  const ReferenceSnapshot reference = small_policy(11);
  const auto pairs = mixed_batch(fx);  // |p_a - p_b| = 0.5 and 1.0, both >= 0.05

  PreferenceObjectiveConfig hard;
  PreferenceObjectiveConfig soft;
  soft.soft_labels = true;
  soft.mu = 1e-6;

  const auto h = pdpo_loss(model, reference, pairs, hard);
  const auto s = pdpo_loss(model, reference, pairs, soft);
  CHECK(s.value == doctest::Approx(h.value).epsilon(1e-12));
  CHECK(max_abs_diff(s.gradient, h.gradient) < 1e-12);
}

TEST_CASE("objectives: hard labels drop exact ties; fullpath pairs never tie") {
  Fixture fx(105);
  PolicyModel model = small_policy(12);
  const ReferenceSnapshot reference = small_policy(13);
  PreferenceObjectiveConfig cfg;

  auto pairs = mixed_batch(fx);
  auto tied = pairs[0];
  tied.p_a = tied.p_b = 0.4;
  pairs.push_back(tied);

  const auto report = pdpo_loss(model, reference, pairs, cfg);
  CHECK(report.pairs_used == 2);
  CHECK(report.pairs_dropped == 1);
  // the tied pair contributes nothing: same value as the untied batch alone
  const auto untied = pdpo_loss(model, reference,
                                std::vector<PreferencePair>{pairs[0], pairs[1]}, cfg);
  CHECK(report.value == doctest::Approx(untied.value).epsilon(1e-12));

  // every pair tied -> nothing survives
  std::vector<PreferencePair> all_tied{tied};
  CHECK_THROWS_AS(pdpo_loss(model, reference, all_tied, cfg), EmptyBatch);

  // a fullpath pair with equal labels still trains with alpha = 1
  auto fp = pairs[1];
  fp.p_a = fp.p_b = 0.5;
  const auto fp_report =
      pdpo_loss(model, reference, std::vector<PreferencePair>{fp}, cfg);
  CHECK(fp_report.pairs_used == 1);
  CHECK(fp_report.pairs_dropped == 0);

  // soft labels keep ties (alpha = 0.5) instead of dropping them
  cfg.soft_labels = true;
  const auto soft_report = pdpo_loss(model, reference, all_tied, cfg);
  CHECK(soft_report.pairs_used == 1);
  CHECK(soft_report.pairs_dropped == 0);
}

TEST_CASE("objectives: empty batches and mismatched references are rejected") {
  Fixture fx(106);
  PolicyModel model = small_policy(14);
  const ReferenceSnapshot reference = snapshot_reference(model);
  PreferenceObjectiveConfig cfg;

  CHECK_THROWS_AS(sft_loss(model, {}), EmptyBatch);
  CHECK_THROWS_AS(pdpo_loss(model, reference, {}, cfg), EmptyBatch);
  CHECK_THROWS_AS(value_head_loss(model, {}, ValueHead::prm), EmptyBatch);

  PolicyConfig wide;
  wide.num_symbols = 4;
  wide.obs_dim = 8;
  wide.embed_dim = 8;
  wide.hidden_dim = 16;  // different trunk width
  const ReferenceSnapshot mismatched = make_policy(wide, 99);
  CHECK_THROWS_AS(pdpo_loss(model, mismatched, mixed_batch(fx), cfg),
                  DimensionMismatch);
}

// --- value heads -----------------------------------------------------------

TEST_CASE("objectives: a single value example reduces to scalar cross-entropy") {
  Fixture fx(107);
  PolicyModel model = small_policy(15);

  ValueExample orm_ex{fx.obs, fx.grammar, fx.trace.tokens(), 0.7};
  const double orm_score =
      value_head_score(model, fx.obs, fx.grammar, orm_ex.prefix, ValueHead::orm);
  CHECK(orm_loss(model, std::vector<ValueExample>{orm_ex}).value ==
        doctest::Approx(binary_cross_entropy(0.7, orm_score)).epsilon(1e-12));

  ValueExample prm_ex{fx.obs, fx.grammar, fx.trace.steps[0].tokens, 0.25};
  const double prm_score =
      value_head_score(model, fx.obs, fx.grammar, prm_ex.prefix, ValueHead::prm);
  CHECK(prm_loss(model, std::vector<ValueExample>{prm_ex}).value ==
        doctest::Approx(binary_cross_entropy(0.25, prm_score)).epsilon(1e-12));

  // named forms are the generic loss with the head picked
  const auto generic =
      value_head_loss(model, std::vector<ValueExample>{prm_ex}, ValueHead::prm);
  const auto named = prm_loss(model, std::vector<ValueExample>{prm_ex});
  CHECK(generic.value == named.value);
  CHECK(max_abs_diff(generic.gradient, named.gradient) == 0.0);
}

// --- finite-difference certification ----------------------------------------

TEST_CASE("objectives: analytic gradients of all five losses pass central differences") {
  Fixture fx(108);
  Fixture fx2(109);
  PolicyModel model = small_policy(16);
  const ReferenceSnapshot reference = small_policy(17);

  std::vector<SftExample> sft_batch{{fx.obs, fx.grammar, fx.trace.tokens()},
                                    {fx2.obs, fx2.grammar, fx2.trace.tokens()}};
  std::vector<ValueExample> orm_batch{{fx.obs, fx.grammar, fx.trace.tokens(), 1.0},
                                      {fx2.obs, fx2.grammar, fx2.trace.tokens(), 0.0}};
  std::vector<ValueExample> prm_batch{
      {fx.obs, fx.grammar, fx.trace.steps[0].tokens, 0.6},
      {fx.obs, fx.grammar, prefix_of(fx.trace, 2).tokens(), 0.1}};
  const auto pairs = mixed_batch(fx);
  PreferenceObjectiveConfig hard;
  PreferenceObjectiveConfig soft;
  soft.soft_labels = true;

  const auto cases = std::vector<std::pair<const char*,
                                           std::function<LossReport(const PolicyModel&)>>>{
      {"sft", [&](const PolicyModel& m) { return sft_loss(m, sft_batch); }},
      {"orm", [&](const PolicyModel& m) { return orm_loss(m, orm_batch); }},
      {"prm", [&](const PolicyModel& m) { return prm_loss(m, prm_batch); }},
      {"pdpo_hard",
       [&](const PolicyModel& m) {
         return static_cast<LossReport>(pdpo_loss(m, reference, pairs, hard));
       }},
      {"pdpo_soft",
       [&](const PolicyModel& m) {
         return static_cast<LossReport>(pdpo_loss(m, reference, pairs, soft));
       }},
  };

  for (const auto& [name, loss] : cases) {
    CAPTURE(name);
    const GradCheckReport report = check_gradients(model, loss);
    CHECK(report.max_rel_err <= 1e-4);
  }
}

TEST_CASE("objectives: the difference harness flags a corrupted gradient") {
  Fixture fx(110);
  PolicyModel model = small_policy(18);
  std::vector<SftExample> batch{{fx.obs, fx.grammar, fx.trace.tokens()}};

  const auto corrupted = [&](const PolicyModel& m) {
    LossReport r = sft_loss(m, batch);
    r.gradient[0] += 1e-3;
    return r;
  };
  CHECK(check_gradients(model, corrupted).max_rel_err > 1e-4);
}
