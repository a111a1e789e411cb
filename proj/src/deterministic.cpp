#include "mmsbr/deterministic.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace mmsbr::det {

using namespace diff;

Var affine(const BoundParams& p, const std::string& prefix, Var x) {
  return add_row(matmul(x, p[prefix + ".w"]), p[prefix + ".b"]);
}

Var mlp(const BoundParams& p, const std::string& prefix, Var x) {
  Var h = relu(affine(p, prefix + ".0", x));
  h = relu(affine(p, prefix + ".1", h));
  return affine(p, prefix + ".2", h);
}

Var refine(const BoundParams& p, const std::string& prefix, Var e) { return e + affine(p, prefix, e); }

Var contrastive_term(Var anchors, Var positives, double tau, bool literal) {
  if (anchors.rows() < 2) {
    throw std::invalid_argument("contrastive loss needs at least 2 items, got " + std::to_string(anchors.rows()));
  }
  if (!anchors.value().same_shape(positives.value())) {
    throw std::invalid_argument("contrastive loss: shape mismatch " + anchors.value().shape_string() + " vs " +
                                positives.value().shape_string());
  }
  std::vector<std::size_t> diag(anchors.rows());
  std::iota(diag.begin(), diag.end(), 0);
  Var probs = softmax_rows(scale(cosine_similarity(anchors, positives), 1.0 / tau));
  Var own = pick(probs, std::move(diag));
  if (literal) return scale(mean(own), -1.0);
  return scale(mean(log_clamped(own)), -1.0);
}

Var contrastive_loss(Var img, Var pseimg, Var txt, Var psetxt, double tau, bool literal) {
  return contrastive_term(img, pseimg, tau, literal) + contrastive_term(txt, psetxt, tau, literal);
}

Var gen_feature_sequences(const BoundParams& p, const std::string& prefix, Var e, std::size_t c) {
  if (c == 0) throw std::invalid_argument("feature sequence length must be >= 1");
  std::vector<Var> parts;
  parts.reserve(c);
  for (std::size_t k = 0; k < c; ++k) parts.push_back(mlp(p, prefix + "." + std::to_string(k), e));
  // N x C*d, row-major, is the same buffer as N*C x d with item-major rows.
  return reshape(concat_cols(parts), e.rows() * c, e.cols());
}

Var transformer_layer(const BoundParams& p, const std::string& prefix, Var f, std::size_t blocks,
                      std::size_t heads) {
  const std::size_t d = f.cols();
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("transformer: d=" + std::to_string(d) + " not divisible by heads=" +
                                std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  Var x = layer_norm(f, p[prefix + ".ln1.g"], p[prefix + ".ln1.b"]);
  Var q = matmul(x, p[prefix + ".msa.wq"]);
  Var k = matmul(x, p[prefix + ".msa.wk"]);
  Var v = matmul(x, p[prefix + ".msa.wv"]);
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var w = softmax_rows(scale(block_matmul_nt(qh, kh, blocks), 1.0 / std::sqrt(static_cast<double>(dh))));
    head_out.push_back(block_matmul(w, vh, blocks));
  }
  Var msa = add_row(matmul(heads == 1 ? head_out[0] : concat_cols(head_out), p[prefix + ".msa.wo"]),
                    p[prefix + ".msa.bo"]);
  Var fstar = msa + f;
  Var y = layer_norm(fstar, p[prefix + ".ln2.g"], p[prefix + ".ln2.b"]);
  y = relu(add_row(matmul(y, p[prefix + ".fcl.w1"]), p[prefix + ".fcl.b1"]));
  y = add_row(matmul(y, p[prefix + ".fcl.w2"]), p[prefix + ".fcl.b2"]);
  return y + fstar;
}

namespace {

// One transformer pass over [Z_n ; P_n] per item; returns (Z', P').
std::pair<Var, Var> fuse_step(const BoundParams& p, const std::string& prefix, Var z, Var pivot,
                              const FusionShape& s) {
  const std::size_t n = s.items, c = s.c, t = s.t, w = c + t;
  std::vector<std::size_t> in(n * w), z_rows(n * c), p_rows(n * t);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      in[i * w + k] = i * c + k;
      z_rows[i * c + k] = i * w + k;
    }
    for (std::size_t k = 0; k < t; ++k) {
      in[i * w + c + k] = n * c + i * t + k;
      p_rows[i * t + k] = i * w + c + k;
    }
  }
  Var x = gather_rows(concat_rows({z, pivot}), std::move(in));
  Var out = transformer_layer(p, prefix, x, n, s.heads);
  return {gather_rows(out, std::move(z_rows)), gather_rows(out, std::move(p_rows))};
}

}  // namespace

Var pivot_tokens(const BoundParams& p, Var z_img, Var z_txt, const FusionShape& s) {
  if (s.r == 0) throw std::invalid_argument("pivot fusion needs at least one layer");
  std::vector<std::size_t> broadcast(s.items * s.t);
  for (std::size_t i = 0; i < broadcast.size(); ++i) broadcast[i] = i % s.t;
  Var pivot = gather_rows(p["det.pivot"], std::move(broadcast));
  for (std::size_t l = 0; l < s.r; ++l) {
    const std::string prefix = "det.layer." + std::to_string(l);
    Var pstar = pivot;
    if (s.modalities != Modalities::text_only) {
      auto [z_next, p_img] = fuse_step(p, prefix, z_img, pivot, s);
      z_img = z_next;
      pstar = scale(p_img + pivot, 0.5);
    }
    Var pnext = pstar;
    if (s.modalities != Modalities::image_only) {
      auto [z_next, p_txt] = fuse_step(p, prefix, z_txt, pstar, s);
      z_txt = z_next;
      pnext = scale(p_txt + pstar, 0.5);
    }
    pivot = pnext;
  }
  return pivot;
}

Var pivot_fusion(const BoundParams& p, Var z_img, Var z_txt, const FusionShape& s) {
  Var tokens = pivot_tokens(p, z_img, z_txt, s);
  return mlp(p, "det.head", reshape(tokens, s.items, s.t * tokens.cols()));
}

Var mlp_fusion(const BoundParams& p, Var z_img, Var z_txt, const FusionShape& s) {
  const std::size_t d = z_img.cols();
  Var img = reshape(z_img, s.items, s.c * d);
  Var txt = reshape(z_txt, s.items, s.c * d);
  Var x = s.modalities == Modalities::both         ? concat_cols({img, txt})
          : s.modalities == Modalities::image_only ? img
                                                   : txt;
  return mlp(p, "det.fusion_mlp", x);
}

Var attention_weights(const BoundParams& p, Var e_seq, const SessionLayout& layout) {
  Tape& tape = *e_seq.tape;
  Var mean_e = matmul(tape.constant(layout.mean_matrix), e_seq);  // B x d
  Var mean_rows = matmul(tape.constant(layout.expand), mean_e);   // B*L x d
  Var gate = sigmoid(add_row(matmul(e_seq, p["det.attn.a1"]) + matmul(mean_rows, p["det.attn.a2"]),
                             p["det.attn.b"]));
  return mul(matmul(gate, p["det.attn.u"]), tape.constant(layout.valid));
}

Var vanilla_attention(const BoundParams& p, Var e_seq, const SessionLayout& layout) {
  Var alpha = attention_weights(p, e_seq, layout);
  return matmul(e_seq.tape->constant(layout.sum_matrix), mul_rows(e_seq, alpha));
}

}  // namespace mmsbr::det
