#include "steppref/select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "steppref/errors.hpp"
#include "steppref/rng.hpp"

namespace steppref {

PerturbKind parse_perturb_kind(const std::string& name) {
  if (name == "gaussian") return PerturbKind::gaussian;
  if (name == "audio_mask") return PerturbKind::audio_mask;
  if (name == "visual_mask") return PerturbKind::visual_mask;
  throw ConfigError("unknown perturbation kind '" + name +
                    "' (expected gaussian, audio_mask, or visual_mask)");
}

std::string perturb_kind_name(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::gaussian: return "gaussian";
    case PerturbKind::audio_mask: return "audio_mask";
    case PerturbKind::visual_mask: return "visual_mask";
  }
  return "?";
}

std::pair<std::vector<VisualFrameGroup>, std::vector<AudioSegment>> perturb_streams(
    const std::vector<VisualFrameGroup>& visual, const std::vector<AudioSegment>& audio,
    const PerturbationSpec& spec, uint64_t seed) {
  auto out = std::make_pair(visual, audio);
  switch (spec.kind) {
    case PerturbKind::gaussian: {
      Rng rng(derive_seed(seed, "perturb"));
      for (auto& group : out.first)
        for (auto& enc : group.encodings)
          for (double& x : enc) x += spec.eps * rng.gaussian();
      for (auto& seg : out.second)
        for (auto& enc : seg.encodings)
          for (double& x : enc) x += spec.eps * rng.gaussian();
      break;
    }
    case PerturbKind::audio_mask:
      for (auto& seg : out.second)
        for (auto& enc : seg.encodings) std::fill(enc.begin(), enc.end(), 0.0);
      break;
    case PerturbKind::visual_mask:
      for (auto& group : out.first)
        for (auto& enc : group.encodings) std::fill(enc.begin(), enc.end(), 0.0);
      break;
  }
  return out;
}

namespace {

// KL(P || Q) from two raw logit vectors over the same (full) vocabulary.
double kl_from_logits(const std::vector<double>& lp, const std::vector<double>& lq) {
  auto log_z = [](const std::vector<double>& l) {
    double mx = *std::max_element(l.begin(), l.end());
    double s = 0.0;
    for (double x : l) s += std::exp(x - mx);
    return mx + std::log(s);
  };
  const double zp = log_z(lp), zq = log_z(lq);
  double kl = 0.0;
  for (size_t v = 0; v < lp.size(); ++v) {
    double logp = lp[v] - zp;
    kl += std::exp(logp) * (logp - (lq[v] - zq));
  }
  return kl;
}

}  // namespace

std::vector<double> step_susceptibility(const PolicyModel& model,
                                        std::span<const double> obs_original,
                                        std::span<const double> obs_perturbed,
                                        const ReasoningTrace& trace) {
  if (trace.steps.empty()) throw EmptyTrace("step_susceptibility: trace has no steps");
  PrefixCursor original(model, obs_original);
  PrefixCursor perturbed(model, obs_perturbed);

  std::vector<double> out;
  out.reserve(trace.steps.size());
  std::vector<double> lp, lq;
  for (const Step& step : trace.steps) {
    if (step.tokens.empty()) throw EmptyStep("step_susceptibility: empty step");
    double sum = 0.0;
    for (TokenId t : step.tokens) {
      original.next_logits(lp);
      perturbed.next_logits(lq);
      sum += kl_from_logits(lp, lq);
      original.push(t);
      perturbed.push(t);
    }
    out.push_back(sum / static_cast<double>(step.tokens.size()));
  }
  return out;
}

std::vector<int> select_top_steps(std::span<const double> susceptibility, int top_t) {
  std::vector<int> order(susceptibility.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return susceptibility[a] > susceptibility[b];  // stable: ties keep the earlier index first
  });
  if (top_t >= 0 && order.size() > static_cast<size_t>(top_t)) order.resize(top_t);
  return order;
}

}  // namespace steppref
