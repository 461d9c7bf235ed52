#pragma once

#include <string>
#include <string_view>

#include "steppref/errors.hpp"

namespace steppref {

using TokenId = int;

// Fixed marker tokens. Keys and values for a vocabulary over V symbols follow
// at ids [3, V+2] and [V+3, 2V+2], so the vocabulary size is 2V+3.
inline constexpr TokenId kHopToken = 0;      // opens a lookup step
inline constexpr TokenId kAnsToken = 1;      // opens the final answer step
inline constexpr TokenId kStepEndToken = 2;  // step delimiter
inline constexpr int kMarkerCount = 3;

inline constexpr std::string_view kStepEndSurface = "<end_of_step>";

// Token inventory for an environment with V symbols: the three markers plus a
// key token ("k3") and a value token ("v3") per symbol.
struct Vocabulary {
  int num_symbols = 0;  // V

  int size() const { return 2 * num_symbols + kMarkerCount; }

  TokenId key_token(int i) const { return kMarkerCount + i; }
  TokenId value_token(int i) const { return kMarkerCount + num_symbols + i; }

  bool is_key(TokenId t) const {
    return t >= kMarkerCount && t < kMarkerCount + num_symbols;
  }
  bool is_value(TokenId t) const {
    return t >= kMarkerCount + num_symbols && t < size();
  }

  int key_index(TokenId t) const { return t - kMarkerCount; }
  int value_index(TokenId t) const { return t - kMarkerCount - num_symbols; }

  std::string surface(TokenId t) const {
    if (t == kHopToken) return "HOP";
    if (t == kAnsToken) return "ANS";
    if (t == kStepEndToken) return std::string(kStepEndSurface);
    if (is_key(t)) return "k" + std::to_string(key_index(t));
    if (is_value(t)) return "v" + std::to_string(value_index(t));
    throw Error("surface: token id " + std::to_string(t) + " out of range");
  }

  TokenId parse(std::string_view s) const {
    if (s == "HOP") return kHopToken;
    if (s == "ANS") return kAnsToken;
    if (s == kStepEndSurface) return kStepEndToken;
    if (s.size() >= 2 && (s[0] == 'k' || s[0] == 'v')) {
      int idx = 0;
      for (std::size_t i = 1; i < s.size(); ++i) {
        if (s[i] < '0' || s[i] > '9') idx = -1;
        if (idx < 0) break;
        idx = idx * 10 + (s[i] - '0');
      }
      if (idx >= 0 && idx < num_symbols) {
        return s[0] == 'k' ? key_token(idx) : value_token(idx);
      }
    }
    throw Error("parse: unknown token surface '" + std::string(s) + "'");
  }
};

}  // namespace steppref
