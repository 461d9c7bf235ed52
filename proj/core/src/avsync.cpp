#include "steppref/avsync.hpp"

#include <cstddef>

namespace steppref {

std::string FusedSequence::tag_string() const {
  std::string out;
  out.reserve(items.size());
  for (const FusedItem& it : items) out += it.modality == Modality::visual ? 'V' : 'A';
  return out;
}

namespace {

void check_dim(const std::vector<std::vector<double>>& encodings, std::size_t& dim) {
  for (const auto& e : encodings) {
    if (dim == 0) dim = e.size();
    if (e.size() != dim || e.empty()) {
      throw DimensionMismatch("interleave: encoding dimension " + std::to_string(e.size()) +
                              " != " + std::to_string(dim));
    }
  }
}

}  // namespace

FusedSequence interleave(const std::vector<VisualFrameGroup>& visual,
                         const std::vector<AudioSegment>& audio) {
  if (visual.empty()) throw EmptyVisualStream();

  std::size_t dim = 0;
  for (std::size_t i = 0; i < visual.size(); ++i) {
    if (visual[i].encodings.empty()) {
      throw DimensionMismatch("interleave: visual group without encodings");
    }
    if (i > 0 && !(visual[i - 1].timestamp < visual[i].timestamp)) {
      throw UnsortedStream("interleave: visual timestamps must strictly increase");
    }
    check_dim(visual[i].encodings, dim);
  }
  for (std::size_t j = 0; j < audio.size(); ++j) {
    if (audio[j].encodings.empty()) {
      throw DimensionMismatch("interleave: audio segment without encodings");
    }
    if (j > 0 && audio[j - 1].timestamp > audio[j].timestamp) {
      throw UnsortedStream("interleave: audio timestamps must not decrease");
    }
    check_dim(audio[j].encodings, dim);
  }

  FusedSequence fused;
  std::size_t a = 0;
  auto emit_audio_before = [&](double bound) {
    while (a < audio.size() && audio[a].timestamp < bound) {
      for (const auto& e : audio[a].encodings) {
        fused.items.push_back({Modality::audio, audio[a].timestamp, e});
      }
      ++a;
    }
  };

  // Audio strictly before the first group leads the sequence.
  emit_audio_before(visual.front().timestamp);
  for (std::size_t i = 0; i < visual.size(); ++i) {
    for (const auto& e : visual[i].encodings) {
      fused.items.push_back({Modality::visual, visual[i].timestamp, e});
    }
    if (i + 1 < visual.size()) {
      emit_audio_before(visual[i + 1].timestamp);  // gap [t_i, t_{i+1})
    }
  }
  // Everything at or after the last group's timestamp trails.
  while (a < audio.size()) {
    for (const auto& e : audio[a].encodings) {
      fused.items.push_back({Modality::audio, audio[a].timestamp, e});
    }
    ++a;
  }
  return fused;
}

std::vector<double> pool_observation(const FusedSequence& fused) {
  if (fused.items.empty()) throw EmptyFusedSequence();
  std::vector<double> mean(fused.items[0].encoding.size(), 0.0);
  for (const FusedItem& it : fused.items) {
    if (it.encoding.size() != mean.size()) {
      throw DimensionMismatch("pool_observation: ragged encodings");
    }
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += it.encoding[c];
  }
  const double inv = 1.0 / static_cast<double>(fused.items.size());
  for (double& v : mean) v *= inv;
  return mean;
}

}  // namespace steppref
