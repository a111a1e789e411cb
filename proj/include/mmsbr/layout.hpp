#pragma once

// Padded batch layout shared by both attention branches. Session b occupies
// rows [b*L, (b+1)*L) of every per-position tensor; rows past its length are
// padding.

#include <cstddef>
#include <vector>

#include "mmsbr/tensor.hpp"

namespace mmsbr {

struct SessionLayout {
  std::size_t sessions = 0;  // B
  std::size_t max_len = 0;   // L
  std::vector<std::size_t> lengths;

  Tensor valid;        // B*L x 1: 1 for real positions
  Tensor key_pad;      // B*L x L: 1 where key j of the row's session is padding
  Tensor mean_matrix;  // B x B*L: 1/len over the session's real positions
  Tensor sum_matrix;   // B x B*L: 1 over the session's real positions
  Tensor expand;       // B*L x B: copies session b's row to each of its positions
  std::vector<std::size_t> last_index;  // row of each session's last real position

  /// Throws std::invalid_argument on an empty batch or a zero length.
  static SessionLayout from_lengths(const std::vector<std::size_t>& lengths);
  std::size_t rows() const { return sessions * max_len; }
};

}  // namespace mmsbr
