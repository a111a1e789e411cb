#include "mmsbr/probabilistic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mmsbr::prob {

using namespace diff;

namespace {

constexpr double kMaskedLogit = -1e30;

void check_index(const std::vector<std::size_t>& idx, std::size_t bound, const char* what) {
  for (std::size_t i : idx)
    if (i >= bound) {
      throw std::out_of_range(std::string(what) + " index " + std::to_string(i) + " outside [0, " +
                              std::to_string(bound) + ")");
    }
}

Var lookup_sum(const BoundParams& p, const char* table, const std::vector<std::size_t>& levels,
               const std::vector<std::size_t>& categories) {
  if (levels.size() != categories.size()) throw std::invalid_argument("price lookup: levels/categories length differ");
  Var t = p[table];
  Var cat = p["prob.category"];
  check_index(levels, t.rows(), "price level");
  check_index(categories, cat.rows(), "category");
  return gather_rows(t, levels) + gather_rows(cat, categories);
}

Gaussian map_gaussian(const BoundParams& p, const std::string& prefix, const Gaussian& g) {
  return {matmul(g.mu, p[prefix + ".mu"]), positive(matmul(g.sigma, p[prefix + ".sigma"]))};
}

}  // namespace

Gaussian price_embed(const BoundParams& p, const std::vector<std::size_t>& levels,
                     const std::vector<std::size_t>& categories) {
  return {lookup_sum(p, "prob.mu_table", levels, categories),
          positive(lookup_sum(p, "prob.sigma_table", levels, categories))};
}

double w2_distance(std::span<const double> mu1, std::span<const double> sigma1, std::span<const double> mu2,
                   std::span<const double> sigma2) {
  if (mu1.size() != mu2.size() || sigma1.size() != sigma2.size() || mu1.size() != sigma1.size()) {
    throw std::invalid_argument("w2_distance: dimension mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < mu1.size(); ++i) {
    const double dm = mu1[i] - mu2[i];
    const double ds = std::sqrt(sigma1[i]) - std::sqrt(sigma2[i]);
    acc += dm * dm + ds * ds;
  }
  return std::sqrt(std::max(acc, 0.0));
}

Var w2_pairwise(const Gaussian& a, const Gaussian& b) {
  Var mean_part = block_pairwise_sqdist(a.mu, b.mu, 1);
  Var cov_part = block_pairwise_sqdist(sqrt_guarded(a.sigma), sqrt_guarded(b.sigma), 1);
  return sqrt_guarded(mean_part + cov_part);
}

WsaOutput wasserstein_self_attention(const BoundParams& p, const Gaussian& seq, const SessionLayout& layout,
                                     bool literal) {
  const std::size_t blocks = layout.sessions;
  if (seq.mu.rows() != layout.rows()) {
    throw std::invalid_argument("wsa: " + std::to_string(seq.mu.rows()) + " rows for layout of " +
                                std::to_string(layout.rows()));
  }
  const Gaussian q = map_gaussian(p, "prob.wsa.q", seq);
  const Gaussian k = map_gaussian(p, "prob.wsa.k", seq);
  const Gaussian v = map_gaussian(p, "prob.wsa.v", seq);
  Var dist = sqrt_guarded(block_pairwise_sqdist(q.mu, k.mu, blocks) +
                          block_pairwise_sqdist(sqrt_guarded(q.sigma), sqrt_guarded(k.sigma), blocks));
  Tape& tape = *seq.mu.tape;
  Var w;
  if (literal) {
    Tensor keep = layout.key_pad;
    for (auto& x : keep.values()) x = 1.0 - x;
    w = mul(dist, tape.constant(std::move(keep)));
  } else {
    w = softmax_rows(masked_fill(scale(dist, -1.0), layout.key_pad, kMaskedLogit));
  }
  Gaussian h{block_matmul(w, v.mu, blocks), block_matmul(square(w), v.sigma, blocks)};
  return {h, w};
}

Gaussian user_price_range(const Gaussian& seq_out, const SessionLayout& layout) {
  return {gather_rows(seq_out.mu, layout.last_index), gather_rows(seq_out.sigma, layout.last_index)};
}

Var point_price_embed(const BoundParams& p, const std::vector<std::size_t>& levels,
                      const std::vector<std::size_t>& categories) {
  return lookup_sum(p, "prob.point_table", levels, categories);
}

Var dot_self_attention(const BoundParams& p, Var seq, const SessionLayout& layout) {
  const std::size_t blocks = layout.sessions;
  Var q = matmul(seq, p["prob.dp.q"]);
  Var k = matmul(seq, p["prob.dp.k"]);
  Var v = matmul(seq, p["prob.dp.v"]);
  Var logits = scale(block_matmul_nt(q, k, blocks), 1.0 / std::sqrt(static_cast<double>(seq.cols())));
  Var w = softmax_rows(masked_fill(logits, layout.key_pad, kMaskedLogit));
  return block_matmul(w, v, blocks);
}

}  // namespace mmsbr::prob
