#pragma once

#include <stdexcept>
#include <string>

namespace steppref {

// Base class for every domain error raised by this library. CLI entry points
// map these to exit code 2; anything else escaping is a plain bug.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define STEPPREF_ERROR(Name)                         \
  struct Name : Error {                              \
    using Error::Error;                              \
    Name() : Error(#Name) {}                         \
  };

// trace
STEPPREF_ERROR(EmptyTrace)       // raw sequence has no non-delimiter token
STEPPREF_ERROR(EmptyStep)        // a segment between delimiters is empty
STEPPREF_ERROR(MalformedAnswer)  // final step is not an answer-form step
STEPPREF_ERROR(IndexOutOfRange)  // prefix length outside [0, step count]

// avsync
STEPPREF_ERROR(UnsortedStream)      // timestamps out of order
STEPPREF_ERROR(DimensionMismatch)   // encoding dimensions disagree
STEPPREF_ERROR(EmptyVisualStream)   // interleave requires >= 1 visual group
STEPPREF_ERROR(EmptyFusedSequence)  // pooling over zero encodings

// synthenv
STEPPREF_ERROR(InfeasibleConfig)  // symbol budget too small for chain/choices
STEPPREF_ERROR(BudgetExceeded)    // exact enumeration tree above leaf budget

// policy
STEPPREF_ERROR(NonFiniteParameters)
STEPPREF_ERROR(GrammarViolation)  // token not admissible in current slot
STEPPREF_ERROR(MisalignedPrefix)  // value head asked off a step boundary

// rollout
STEPPREF_ERROR(NoAlternativeFound)  // alternative-step sampling exhausted
STEPPREF_ERROR(PrefixMismatch)      // paired steps do not share a prefix

// objectives / pipeline
STEPPREF_ERROR(EmptyBatch)
STEPPREF_ERROR(EmptyDataset)
STEPPREF_ERROR(DivergedTraining)

// io / config
STEPPREF_ERROR(ConfigError)
STEPPREF_ERROR(IoError)

#undef STEPPREF_ERROR

}  // namespace steppref
