// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "xstr/errors.hpp"
#include "xstr/symbols.hpp"

namespace xstr {

/// Percentage of positions where the predicted sequence equals the reference
/// element-wise and in length.
inline double exact_match_accuracy(const std::vector<Label>& preds, const std::vector<Label>& refs) {
  require(preds.size() == refs.size(), ErrorCode::LengthMismatch,
          std::to_string(preds.size()) + " predictions for " + std::to_string(refs.size()) + " references");
  require(!refs.empty(), ErrorCode::EmptySet, "exact-match accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) hits += preds[i] == refs[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(refs.size());
}

}  // namespace xstr
