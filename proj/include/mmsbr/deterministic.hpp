#pragma once

// Deterministic branch: contrastive refinement of modality embeddings,
// feature sequences, hierarchical pivot fusion and session attention.
//
// Everything is batched. Item-level tensors hold one row per item; feature
// sequences hold C consecutive rows per item; session tensors follow
// SessionLayout. Affine maps use the row convention y = x W + b.

#include <cstddef>
#include <string>

#include "mmsbr/layout.hpp"
#include "mmsbr/params.hpp"
#include "mmsbr/tape.hpp"

namespace mmsbr::det {

using diff::Var;

/// x prefix.w + prefix.b
Var affine(const BoundParams& p, const std::string& prefix, Var x);
/// Two hidden ReLU layers: prefix.0 -> relu -> prefix.1 -> relu -> prefix.2.
Var mlp(const BoundParams& p, const std::string& prefix, Var x);
/// Residual map e + e W + b; the trainable part the contrastive term shapes.
Var refine(const BoundParams& p, const std::string& prefix, Var e);

/// Mean over rows of -log softmax_j(cos(a_i, b_j) / tau) at j = i. Row i of
/// `positives` pairs with row i of `anchors`; other rows are negatives.
/// `literal` drops the log and returns the negated ratio.
Var contrastive_term(Var anchors, Var positives, double tau, bool literal = false);
/// Image term plus text term. Throws when fewer than two items are given.
Var contrastive_loss(Var img, Var pseimg, Var txt, Var psetxt, double tau, bool literal = false);

/// Row k of item n's block is MLP_k(e_n), MLPs under prefix.{k}. Output has
/// N*C rows.
Var gen_feature_sequences(const BoundParams& p, const std::string& prefix, Var e, std::size_t c);

/// Pre-LN block applied independently to `blocks` equal row groups:
/// F* = MSA(LN(F)) + F, out = FCL(LN(F*)) + F*. Throws when d % heads != 0.
Var transformer_layer(const BoundParams& p, const std::string& prefix, Var f, std::size_t blocks,
                      std::size_t heads);

enum class Modalities { both, image_only, text_only };

struct FusionShape {
  std::size_t items = 1;  // N
  std::size_t c = 2;      // feature rows per modality
  std::size_t t = 2;      // pivot tokens
  std::size_t r = 1;      // stacked layers
  std::size_t heads = 2;
  Modalities modalities = Modalities::both;
};

/// Pivot tokens after every layer, N*T rows. Exposed for tests.
Var pivot_tokens(const BoundParams& p, Var z_img, Var z_txt, const FusionShape& shape);
/// e_n = MLP(concat of the final pivot tokens of item n); N x d.
Var pivot_fusion(const BoundParams& p, Var z_img, Var z_txt, const FusionShape& shape);
/// Concatenated feature sequences through one MLP (det.fusion_mlp); N x d.
Var mlp_fusion(const BoundParams& p, Var z_img, Var z_txt, const FusionShape& shape);

/// Unnormalized weights alpha_k = sigmoid(e_k A1 + mean(e) A2 + b) u for every
/// position, zero at padding; B*L x 1.
Var attention_weights(const BoundParams& p, Var e_seq, const SessionLayout& layout);
/// s_d = sum_k alpha_k e_k over real positions; B x d.
Var vanilla_attention(const BoundParams& p, Var e_seq, const SessionLayout& layout);

}  // namespace mmsbr::det
