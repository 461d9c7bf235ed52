#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "steppref/avsync.hpp"
#include "steppref/policy.hpp"
#include "steppref/trace.hpp"

namespace steppref {

// ============================================================================
// Contrastive step selection.
//
// To find the steps most worth refining, the same trace is re-scored under
// the original observation and under a perturbed one; a step whose token
// distributions move a lot is one the policy grounds in the perturbed part
// of the input. Susceptibility is the per-step mean (length-normalized) KL
// divergence between the two teacher-forced next-token distributions,
// computed over the full vocabulary softmax so the measure is independent of
// the grammar's admissible sets.
// ============================================================================

enum class PerturbKind { gaussian, audio_mask, visual_mask };

PerturbKind parse_perturb_kind(const std::string& name);  // ConfigError on unknown
std::string perturb_kind_name(PerturbKind kind);

struct PerturbationSpec {
  PerturbKind kind = PerturbKind::gaussian;
  double eps = 0.01;  // gaussian component scale; the mask kinds ignore it
};

// Perturbed copies of the streams. gaussian adds eps * N(0,1) noise to every
// encoding component (deterministic in seed); audio_mask / visual_mask zero
// out that modality's encodings. Timestamps are never touched.
std::pair<std::vector<VisualFrameGroup>, std::vector<AudioSegment>> perturb_streams(
    const std::vector<VisualFrameGroup>& visual, const std::vector<AudioSegment>& audio,
    const PerturbationSpec& spec, uint64_t seed);

// d_k for every step of the trace: the mean over the step's token positions
// of KL(P(.|original) || P(.|perturbed)), teacher-forced on the trace.
std::vector<double> step_susceptibility(const PolicyModel& model,
                                        std::span<const double> obs_original,
                                        std::span<const double> obs_perturbed,
                                        const ReasoningTrace& trace);

// Indices (0-based) of the top_t most susceptible steps, highest first, ties
// broken toward the earlier index. Returns fewer when the trace is shorter.
std::vector<int> select_top_steps(std::span<const double> susceptibility, int top_t);

}  // namespace steppref
