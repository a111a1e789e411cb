#include "mmsbr/layout.hpp"

#include <algorithm>
#include <stdexcept>

namespace mmsbr {

SessionLayout SessionLayout::from_lengths(const std::vector<std::size_t>& lengths) {
  if (lengths.empty()) throw std::invalid_argument("session layout: empty batch");
  if (std::find(lengths.begin(), lengths.end(), std::size_t{0}) != lengths.end()) {
    throw std::invalid_argument("session layout: zero-length session");
  }
  SessionLayout s;
  s.sessions = lengths.size();
  s.max_len = *std::max_element(lengths.begin(), lengths.end());
  s.lengths = lengths;
  const std::size_t b_count = s.sessions, l = s.max_len, rows = b_count * l;
  s.valid = Tensor(rows, 1);
  s.key_pad = Tensor(rows, l);
  s.mean_matrix = Tensor(b_count, rows);
  s.sum_matrix = Tensor(b_count, rows);
  s.expand = Tensor(rows, b_count);
  for (std::size_t b = 0; b < b_count; ++b) {
    const std::size_t len = lengths[b];
    for (std::size_t i = 0; i < l; ++i) {
      const std::size_t r = b * l + i;
      s.expand(r, b) = 1.0;
      for (std::size_t j = len; j < l; ++j) s.key_pad(r, j) = 1.0;
      if (i < len) {
        s.valid[r] = 1.0;
        s.sum_matrix(b, r) = 1.0;
        s.mean_matrix(b, r) = 1.0 / static_cast<double>(len);
      }
    }
    s.last_index.push_back(b * l + len - 1);
  }
  return s;
}

}  // namespace mmsbr
