#pragma once

#include <string>
#include <vector>

#include "steppref/errors.hpp"

namespace steppref {

// ============================================================================
// Audio/visual stream fusion.
//
// A visual stream is a strictly time-ordered list of frame groups; an audio
// stream is a time-ordered list of segments. Fusion walks the visual timeline
// and splices each audio segment after the last visual group whose timestamp
// is <= the segment's: segment time tau lands in the half-open gap
// [t_i, t_{i+1}) after group i, before the first group when tau < t_1, and
// after the last group when tau >= t_K. Order within each modality is never
// changed, and every encoding appears exactly once.
// ============================================================================

struct VisualFrameGroup {
  double timestamp = 0.0;
  std::vector<std::vector<double>> encodings;  // n >= 1 vectors, dimension d
};

struct AudioSegment {
  double timestamp = 0.0;
  std::vector<std::vector<double>> encodings;  // m >= 1 vectors, dimension d
};

enum class Modality { visual, audio };

struct FusedItem {
  Modality modality = Modality::visual;
  double timestamp = 0.0;
  std::vector<double> encoding;
};

struct FusedSequence {
  std::vector<FusedItem> items;

  // Modality tags in order, e.g. "VVAAVVAVV".
  std::string tag_string() const;
};

// Merges the two streams by the gap rule above. Raises UnsortedStream when
// visual timestamps are not strictly increasing or audio timestamps decrease,
// DimensionMismatch when any encoding disagrees in dimension, and
// EmptyVisualStream when there is no visual group to anchor the timeline.
FusedSequence interleave(const std::vector<VisualFrameGroup>& visual,
                         const std::vector<AudioSegment>& audio);

// Arithmetic mean over every encoding in the sequence; the policy's fixed-size
// observation. Raises EmptyFusedSequence on an empty input.
std::vector<double> pool_observation(const FusedSequence& fused);

}  // namespace steppref
