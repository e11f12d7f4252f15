// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace xstr {

using SymbolId = std::uint32_t;
using Label = std::vector<SymbolId>;

/// Specials occupy the last three vocabulary slots: SOS, EOS, PAD.
struct Specials {
  SymbolId sos, eos, pad;

  static constexpr std::size_t kCount = 3;

  static Specials for_vocab(std::size_t vocab_size) {
    const auto v = static_cast<SymbolId>(vocab_size);
    return {v - 3, v - 2, v - 1};
  }
};

}  // namespace xstr
