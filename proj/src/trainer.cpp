#include "mmsbr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mmsbr/evalkit.hpp"

namespace mmsbr::model {

using namespace diff;

void HyperParams::validate() const {
  if (d == 0 || batch == 0 || r == 0 || c == 0 || t == 0 || heads == 0 || rho <= 0) {
    throw std::invalid_argument("hyper: d, batch, r, c, t, heads and rho must be positive");
  }
  if (d % heads != 0) {
    throw std::invalid_argument("hyper: d=" + std::to_string(d) + " not divisible by heads=" + std::to_string(heads));
  }
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("hyper: lr must be finite and >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("hyper: lambda must be finite and >= 0");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("hyper: tau must be positive");
}

namespace {

class Init {
 public:
  Init(ParamStore& store, std::size_t d, std::uint64_t seed)
      : store_(store), rng_(seed), bound_(1.0 / std::sqrt(static_cast<double>(d))) {}

  void uniform(const std::string& name, std::size_t rows, std::size_t cols) {
    std::uniform_real_distribution<double> u(-bound_, bound_);
    Tensor t(rows, cols);
    for (auto& x : t.values()) x = u(rng_);
    store_.add(name, std::move(t));
  }
  void fill(const std::string& name, std::size_t rows, std::size_t cols, double v) {
    store_.add(name, Tensor(rows, cols, v));
  }
  void affine(const std::string& prefix, std::size_t in, std::size_t out) {
    uniform(prefix + ".w", in, out);
    uniform(prefix + ".b", 1, out);
  }
  void mlp(const std::string& prefix, std::size_t in, std::size_t d) {
    affine(prefix + ".0", in, d);
    affine(prefix + ".1", d, d);
    affine(prefix + ".2", d, d);
  }

 private:
  ParamStore& store_;
  std::mt19937_64 rng_;
  double bound_;
};

bool uses_image(const Wiring& w) { return w.modalities != det::Modalities::text_only; }
bool uses_text(const Wiring& w) { return w.modalities != det::Modalities::image_only; }

std::size_t fused_modalities(const Wiring& w) { return w.modalities == det::Modalities::both ? 2 : 1; }

det::FusionShape fusion_shape(const HyperParams& h, const Wiring& w, std::size_t items) {
  return {items, h.c, h.t, h.r, h.heads, w.modalities};
}

}  // namespace

ParamStore init_params(const HyperParams& h, const Wiring& wiring, std::size_t n_categories, std::uint64_t seed) {
  h.validate();
  if (n_categories == 0) throw std::invalid_argument("init_params: no categories");
  ParamStore store;
  Init init(store, h.d, seed);
  const std::size_t d = h.d;
  init.affine("det.refine_img", d, d);
  init.affine("det.refine_txt", d, d);
  if (wiring.contrastive == ContrastiveMode::direct) init.mlp("det.pse_proj", d, d);
  for (const char* m : {"img", "txt"}) {
    const bool used = std::string(m) == "img" ? uses_image(wiring) : uses_text(wiring);
    if (!used) continue;
    for (std::size_t k = 0; k < h.c; ++k) init.mlp("det.mlp_" + std::string(m) + "." + std::to_string(k), d, d);
  }
  if (wiring.fusion == Fusion::pivot) {
    init.uniform("det.pivot", h.t, d);
    for (std::size_t l = 0; l < h.r; ++l) {
      const std::string p = "det.layer." + std::to_string(l);
      init.fill(p + ".ln1.g", 1, d, 1.0);
      init.fill(p + ".ln1.b", 1, d, 0.0);
      init.uniform(p + ".msa.wq", d, d);
      init.uniform(p + ".msa.wk", d, d);
      init.uniform(p + ".msa.wv", d, d);
      init.uniform(p + ".msa.wo", d, d);
      init.uniform(p + ".msa.bo", 1, d);
      init.fill(p + ".ln2.g", 1, d, 1.0);
      init.fill(p + ".ln2.b", 1, d, 0.0);
      init.uniform(p + ".fcl.w1", d, 2 * d);
      init.uniform(p + ".fcl.b1", 1, 2 * d);
      init.uniform(p + ".fcl.w2", 2 * d, d);
      init.uniform(p + ".fcl.b2", 1, d);
    }
    init.mlp("det.head", h.t * d, d);
  } else {
    init.mlp("det.fusion_mlp", fused_modalities(wiring) * h.c * d, d);
  }
  init.uniform("det.attn.u", d, 1);
  init.uniform("det.attn.a1", d, d);
  init.uniform("det.attn.a2", d, d);
  init.uniform("det.attn.b", 1, d);
  const auto rho = static_cast<std::size_t>(h.rho);
  if (wiring.price == PriceBranch::wasserstein) {
    init.uniform("prob.mu_table", rho, d);
    init.fill("prob.sigma_table", rho, d, 0.0);
    init.uniform("prob.category", n_categories, d);
    for (const char* role : {"q", "k", "v"})
      for (const char* part : {"mu", "sigma"}) init.uniform(std::string("prob.wsa.") + role + "." + part, d, d);
  } else if (wiring.price == PriceBranch::point) {
    init.uniform("prob.point_table", rho, d);
    init.uniform("prob.category", n_categories, d);
    for (const char* role : {"q", "k", "v"}) init.uniform(std::string("prob.dp.") + role, d, d);
  }
  if (h.precision == Precision::f32) round_to_f32(store);
  return store;
}

Catalog item_representations(const BoundParams& p, const ModelInputs& in, const HyperParams& h, const Wiring& w) {
  Tape& tape = p.tape();
  const auto& bundle = in.bundle;
  const std::size_t n = in.corpus.n_items();
  if (bundle.n_items() != n || bundle.dim() != h.d) {
    throw std::invalid_argument("model: bundle is " + bundle.img.data.shape_string() + ", expected (" +
                                std::to_string(n) + "," + std::to_string(h.d) + ")");
  }
  Catalog cat;
  cat.img = det::refine(p, "det.refine_img", tape.constant(bundle.img.data));
  cat.txt = det::refine(p, "det.refine_txt", tape.constant(bundle.txt.data));
  Var z_img = uses_image(w) ? det::gen_feature_sequences(p, "det.mlp_img", cat.img, h.c) : Var{};
  Var z_txt = uses_text(w) ? det::gen_feature_sequences(p, "det.mlp_txt", cat.txt, h.c) : Var{};
  if (!uses_image(w)) z_img = z_txt;
  if (!uses_text(w)) z_txt = z_img;
  const det::FusionShape shape = fusion_shape(h, w, n);
  cat.e = w.fusion == Fusion::pivot ? det::pivot_fusion(p, z_img, z_txt, shape) : det::mlp_fusion(p, z_img, z_txt, shape);

  std::vector<std::size_t> levels(n), cats(n);
  for (std::size_t i = 0; i < n; ++i) {
    levels[i] = static_cast<std::size_t>(in.corpus.items[i].price_level);
    cats[i] = in.corpus.items[i].category_index;
  }
  if (w.price == PriceBranch::wasserstein) cat.price = prob::price_embed(p, levels, cats);
  if (w.price == PriceBranch::point) cat.point = prob::point_price_embed(p, levels, cats);
  return cat;
}

Var score_items(Var s_d, const prob::Gaussian& s_p, Var catalog_e, const prob::Gaussian& catalog_price, SignW2 sign) {
  Var logits = matmul_nt(s_d, catalog_e);
  Var w2 = prob::w2_pairwise(s_p, catalog_price);
  logits = logits + scale(w2, sign == SignW2::minus ? -1.0 : 1.0);
  return softmax_rows(logits);
}

Var session_logits(const BoundParams& p, const Catalog& cat, const std::vector<data::IndexedSession>& batch,
                   const HyperParams& h, const Wiring& w) {
  std::vector<std::size_t> lengths;
  lengths.reserve(batch.size());
  for (const auto& s : batch) lengths.push_back(s.context.size());
  const SessionLayout layout = SessionLayout::from_lengths(lengths);
  std::vector<std::size_t> flat(layout.rows(), 0);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < batch[b].context.size(); ++i) flat[b * layout.max_len + i] = batch[b].context[i];

  Var s_d = det::vanilla_attention(p, gather_rows(cat.e, flat), layout);
  Var logits = matmul_nt(s_d, cat.e);
  if (w.price == PriceBranch::wasserstein) {
    const prob::Gaussian seq{gather_rows(cat.price.mu, flat), gather_rows(cat.price.sigma, flat)};
    const prob::WsaOutput wsa = prob::wasserstein_self_attention(p, seq, layout, h.literal_eq23);
    const prob::Gaussian s_p = prob::user_price_range(wsa.h, layout);
    logits = logits + scale(prob::w2_pairwise(s_p, cat.price), h.sign_w2 == SignW2::minus ? -1.0 : 1.0);
  } else if (w.price == PriceBranch::point) {
    Var h_seq = prob::dot_self_attention(p, gather_rows(cat.point, flat), layout);
    logits = logits + matmul_nt(gather_rows(h_seq, layout.last_index), cat.point);
  }
  return logits;
}

Var rec_loss(Var probs, const std::vector<std::size_t>& targets, bool literal) {
  if (targets.size() != probs.rows()) throw std::invalid_argument("rec_loss: one target per row required");
  if (!literal) return scale(mean(log_clamped(pick(probs, targets))), -1.0);
  Tensor y(probs.rows(), probs.cols());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= probs.cols()) throw std::out_of_range("rec_loss: target outside catalog");
    y(r, targets[r]) = 1.0;
  }
  Tensor not_y = y;
  for (auto& v : not_y.values()) v = 1.0 - v;
  Tape& tape = *probs.tape;
  Var pos = mul(tape.constant(std::move(y)), log_clamped(probs));
  Var neg = mul(tape.constant(std::move(not_y)), log_clamped(add_scalar(scale(probs, -1.0), 1.0)));
  return scale(sum(pos + neg), -1.0 / static_cast<double>(probs.rows()));
}

Var joint_loss(Var l_rec, Var l_con, double lambda) { return l_rec + scale(l_con, lambda); }

Var contrastive_for_items(const BoundParams& p, const Catalog& cat, const ModelInputs& in,
                          const std::vector<std::size_t>& items, const HyperParams& h, const Wiring& w) {
  Var img = gather_rows(cat.img, items);
  Var txt = gather_rows(cat.txt, items);
  if (w.contrastive == ContrastiveMode::direct) {
    Var a = det::mlp(p, "det.pse_proj", img);
    Var b = det::mlp(p, "det.pse_proj", txt);
    return det::contrastive_term(a, b, h.tau, h.literal_eq6) + det::contrastive_term(b, a, h.tau, h.literal_eq6);
  }
  Tape& tape = p.tape();
  auto rows = [&](const Tensor& m) {
    Tensor out(items.size(), m.cols());
    for (std::size_t i = 0; i < items.size(); ++i)
      std::copy_n(m.row_span(items[i]).begin(), m.cols(), out.row_span(i).begin());
    return tape.constant(std::move(out));
  };
  Var pseimg = det::refine(p, "det.refine_img", rows(in.bundle.pseimg.data));
  Var psetxt = det::refine(p, "det.refine_txt", rows(in.bundle.psetxt.data));
  return det::contrastive_loss(img, pseimg, txt, psetxt, h.tau, h.literal_eq6);
}

BatchLoss batch_loss(const BoundParams& p, const ModelInputs& in, const std::vector<data::IndexedSession>& batch,
                     const HyperParams& h, const Wiring& w, bool mask_unseen) {
  const Catalog cat = item_representations(p, in, h, w);
  BatchLoss out;
  out.logits = session_logits(p, cat, batch, h, w);
  Var logits = out.logits;
  if (mask_unseen) {
    Tensor mask(batch.size(), in.corpus.n_items());
    bool any = false;
    for (std::size_t i = 0; i < in.corpus.n_items(); ++i)
      if (!in.corpus.seen_in_train[i]) {
        any = true;
        for (std::size_t b = 0; b < batch.size(); ++b) mask(b, i) = 1.0;
      }
    if (any) logits = masked_fill(logits, mask, -1e30);
  }
  std::vector<std::size_t> targets;
  std::set<std::size_t> items;
  for (const auto& s : batch) {
    targets.push_back(s.target);
    items.insert(s.target);
    items.insert(s.context.begin(), s.context.end());
  }
  out.rec = rec_loss(softmax_rows(logits), targets, h.literal_eq26);
  out.loss = out.rec;
  if (h.lambda > 0.0 && items.size() >= 2) {
    out.con = contrastive_for_items(p, cat, in, std::vector<std::size_t>(items.begin(), items.end()), h, w);
    out.has_con = true;
    out.loss = joint_loss(out.rec, out.con, h.lambda);
  }
  return out;
}

Tensor session_scores(const ParamStore& params, const ModelInputs& in, const std::vector<data::IndexedSession>& sessions,
                      const HyperParams& h, const Wiring& w) {
  Tensor scores(sessions.size(), in.corpus.n_items());
  if (sessions.empty()) return scores;
  Tape tape;
  BoundParams p(tape, params, false);
  const Catalog cat = item_representations(p, in, h, w);
  const std::size_t chunk = std::max<std::size_t>(h.batch, 1);
  for (std::size_t begin = 0; begin < sessions.size(); begin += chunk) {
    const std::size_t end = std::min(sessions.size(), begin + chunk);
    const std::vector<data::IndexedSession> part(sessions.begin() + static_cast<std::ptrdiff_t>(begin),
                                                 sessions.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor& v = session_logits(p, cat, part, h, w).value();
    std::copy_n(v.data(), v.size(), scores.row_span(begin).begin());
  }
  return scores;
}

Adam::Adam(const ParamStore& like, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamStore& params, const ParamStore& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& x = params[i].value;
    const Tensor& g = grads[i].value;
    Tensor& m = m_[i].value;
    Tensor& v = v_[i].value;
    for (std::size_t j = 0; j < x.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

namespace {

void check_finite_step(double loss, const ParamStore& grads, std::size_t epoch, std::size_t batch) {
  if (std::isfinite(loss)) {
    for (const auto& g : grads)
      if (!g.value.all_finite()) {
        throw NonFiniteLoss("non-finite gradient at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(batch) + " in parameter '" + g.name + "'");
      }
    return;
  }
  std::string culprit = "none";
  for (const auto& g : grads)
    if (!g.value.all_finite()) {
      culprit = g.name;
      break;
    }
  throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) +
                      "; first non-finite gradient: '" + culprit + "'");
}

}  // namespace

TrainResult train(const ModelInputs& in, const HyperParams& h, const Wiring& w, const EpochCallback& on_epoch) {
  return train_from(init_params(h, w, in.corpus.n_categories(), h.seed), in, h, w, on_epoch);
}

TrainResult train_from(ParamStore params, const ModelInputs& in, const HyperParams& h, const Wiring& w,
                       const EpochCallback& on_epoch) {
  h.validate();
  const auto& train_set = in.corpus.train;
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");
  // Separate stream from init so that the shuffle order does not depend on
  // how many parameters the wiring has.
  std::mt19937_64 rng(h.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  Adam adam(params);
  TrainResult result;
  result.best = params;
  double best_prec = -1.0;
  for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += h.batch) {
      const std::size_t end = std::min(order.size(), begin + h.batch);
      std::vector<data::IndexedSession> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) batch.push_back(train_set[order[i]]);
      Tape tape;
      BoundParams p(tape, params);
      const BatchLoss bl = batch_loss(p, in, batch, h, w);
      const double loss = bl.loss.value().item();
      tape.backward(bl.loss);
      const ParamStore grads = p.grads();
      check_finite_step(loss, grads, epoch, n_batches);
      adam.step(params, grads, h.lr);
      if (h.precision == Precision::f32) round_to_f32(params);
      loss_sum += loss;
      ++n_batches;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_sum / static_cast<double>(n_batches);
    if (!in.corpus.val.empty()) {
      const eval::Report rep = eval::evaluate(params, in, h, w, in.corpus.val, {20}, "train", "val");
      entry.val_prec20 = rep.at(20).prec;
      entry.val_mrr20 = rep.at(20).mrr;
    }
    if (h.log_timing) {
      entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    if (entry.val_prec20 > best_prec) {
      best_prec = entry.val_prec20;
      result.best = params;
      result.best_epoch = epoch;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  result.last = std::move(params);
  if (h.epochs == 0) result.best = result.last;
  return result;
}

std::string format_log(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,mean_loss,val_prec20,val_mrr20,seconds\n";
  out.setf(std::ios::fixed);
  for (const auto& e : log) {
    out.precision(6);
    out << e.epoch << ',' << e.mean_loss << ',';
    out.precision(2);
    out << e.val_prec20 << ',' << e.val_mrr20 << ',';
    out.precision(3);
    out << e.seconds << '\n';
  }
  return out.str();
}

}  // namespace mmsbr::model
