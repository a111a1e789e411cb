#pragma once

// Price branch: diagonal Gaussian price embeddings, closed-form
// 2-Wasserstein distance, and Wasserstein self-attention.

#include <cstddef>
#include <span>
#include <vector>

#include "mmsbr/layout.hpp"
#include "mmsbr/params.hpp"
#include "mmsbr/tape.hpp"

namespace mmsbr::prob {

using diff::Var;

/// One diagonal Gaussian per row; sigma holds the variances.
struct Gaussian {
  Var mu;
  Var sigma;
};

/// mu = prob.mu_table[level] + prob.category[cat];
/// sigma = pos(prob.sigma_table[level] + prob.category[cat]).
/// Throws std::out_of_range for a bad level or category index.
Gaussian price_embed(const BoundParams& p, const std::vector<std::size_t>& levels,
                     const std::vector<std::size_t>& categories);

/// sqrt(||mu1 - mu2||^2 + ||sigma1^(1/2) - sigma2^(1/2)||^2), inner value
/// clamped at 0.
double w2_distance(std::span<const double> mu1, std::span<const double> sigma1, std::span<const double> mu2,
                   std::span<const double> sigma2);

/// out(i, j) = W2(a_i, b_j).
Var w2_pairwise(const Gaussian& a, const Gaussian& b);

struct WsaOutput {
  Gaussian h;   // B*L rows
  Var weights;  // B*L x L; zero at padded keys
};

/// Queries, keys and values map mu -> mu A_mu and sigma -> pos(sigma A_sigma)
/// with prob.wsa.{q,k,v}.{mu,sigma}. Weights are softmax_j(-W2(q_i, k_j)) over
/// real keys; h_mu = sum_j w_ij v_mu_j and h_sigma = sum_j w_ij^2 v_sigma_j.
/// `literal` uses the raw distances a_ij as weights instead.
WsaOutput wasserstein_self_attention(const BoundParams& p, const Gaussian& seq, const SessionLayout& layout,
                                     bool literal = false);

/// Output at the last real position of each session; B rows.
Gaussian user_price_range(const Gaussian& seq_out, const SessionLayout& layout);

// Point-vector price branch used by the de_price ablation.

/// prob.point_table[level] + prob.category[cat]
Var point_price_embed(const BoundParams& p, const std::vector<std::size_t>& levels,
                      const std::vector<std::size_t>& categories);
/// Scaled dot-product self-attention with prob.dp.{q,k,v}; B*L rows.
Var dot_self_attention(const BoundParams& p, Var seq, const SessionLayout& layout);

}  // namespace mmsbr::prob
