#include "mmsbr/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mmsbr::eval {

std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) {
    throw std::out_of_range("target " + std::to_string(target) + " not in catalog of " +
                            std::to_string(scores.size()));
  }
  const double st = scores[target];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > st || (scores[j] == st && j < target)) ++rank;
  return rank;
}

std::vector<std::size_t> ranked_list(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(k);
  return idx;
}

double precision_at_k(std::size_t rank, std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

double mrr_at_k(std::size_t rank, std::size_t k) {
  if (k == 0) throw std::invalid_argument("k must be >= 1");
  return rank <= k ? 1.0 / static_cast<double>(rank) : 0.0;
}

const MetricRow& Report::at(std::size_t k) const {
  for (const auto& m : metrics)
    if (m.k == k) return m;
  throw std::out_of_range("report has no row for k=" + std::to_string(k));
}

Report evaluate_scores(const Tensor& scores, const std::vector<data::IndexedSession>& sessions,
                       const std::vector<std::size_t>& ks, const std::string& variant, const std::string& split) {
  if (scores.rows() != sessions.size()) throw std::invalid_argument("evaluate: one score row per session required");
  std::vector<std::size_t> ranks(sessions.size());
  for (std::size_t i = 0; i < sessions.size(); ++i) ranks[i] = rank_of(scores.row_span(i), sessions[i].target);

  const double n = std::max<double>(1.0, static_cast<double>(sessions.size()));
  Report rep;
  for (std::size_t k : ks) {
    double p = 0.0, m = 0.0;
    for (std::size_t r : ranks) {
      p += precision_at_k(r, k);
      m += mrr_at_k(r, k);
    }
    rep.metrics.push_back({variant, split, k, 100.0 * p / n, 100.0 * m / n});
  }

  std::vector<std::string> names = {"short", "long"};
  for (int len = 2; len <= 7; ++len) names.push_back("len" + std::to_string(len));
  names.push_back("len8+");
  std::vector<BucketRow> rows;
  for (const auto& name : names) rows.push_back({name, 0, 0.0, 0.0});
  for (std::size_t i = 0; i < sessions.size(); ++i) {
    const std::size_t ctx = sessions[i].context.size();
    const std::size_t len = ctx + 1;
    const double p = precision_at_k(ranks[i], 20), m = mrr_at_k(ranks[i], 20);
    for (std::size_t b : {ctx <= 3 ? std::size_t{0} : std::size_t{1}, std::min<std::size_t>(len, 8)}) {
      rows[b].count += 1;
      rows[b].prec20 += p;
      rows[b].mrr20 += m;
    }
  }
  for (auto& r : rows)
    if (r.count > 0) {
      r.prec20 = 100.0 * r.prec20 / static_cast<double>(r.count);
      r.mrr20 = 100.0 * r.mrr20 / static_cast<double>(r.count);
    }
  rep.buckets = std::move(rows);
  return rep;
}

Report evaluate(const ParamStore& params, const model::ModelInputs& in, const model::HyperParams& hyper,
                const model::Wiring& wiring, const std::vector<data::IndexedSession>& sessions,
                const std::vector<std::size_t>& ks, const std::string& variant, const std::string& split) {
  return evaluate_scores(model::session_scores(params, in, sessions, hyper, wiring), sessions, ks, variant, split);
}

std::vector<double> popularity(const data::SessionCorpus& corpus) {
  std::vector<double> freq(corpus.n_items(), 0.0);
  for (const auto& s : corpus.train) {
    for (auto i : s.context) freq[i] += 1.0;
    freq[s.target] += 1.0;
  }
  return freq;
}

Tensor popularity_scores(const data::SessionCorpus& corpus, std::size_t n_sessions) {
  const std::vector<double> freq = popularity(corpus);
  Tensor scores(n_sessions, freq.size());
  for (std::size_t r = 0; r < n_sessions; ++r) std::copy(freq.begin(), freq.end(), scores.row_span(r).begin());
  return scores;
}

Report popularity_baseline(const data::SessionCorpus& corpus, const std::vector<data::IndexedSession>& sessions,
                           const std::vector<std::size_t>& ks, const std::string& split) {
  return evaluate_scores(popularity_scores(corpus, sessions.size()), sessions, ks, "pop", split);
}

std::vector<data::IndexedSession> cold_target_sessions(const data::SessionCorpus& corpus) {
  std::vector<data::IndexedSession> out;
  for (const auto& s : corpus.test_plus)
    if (!corpus.seen_in_train[s.target]) out.push_back(s);
  return out;
}

const std::vector<VariantSpec>& all_variants() {
  static const std::vector<VariantSpec> v = {VariantSpec::full,       VariantSpec::no_con,   VariantSpec::pse_direct,
                                             VariantSpec::mlp_fusion, VariantSpec::de_price, VariantSpec::wo_image,
                                             VariantSpec::wo_text,    VariantSpec::wo_price};
  return v;
}

std::string to_string(VariantSpec v) {
  switch (v) {
    case VariantSpec::full: return "full";
    case VariantSpec::no_con: return "no_con";
    case VariantSpec::pse_direct: return "pse_direct";
    case VariantSpec::mlp_fusion: return "mlp_fusion";
    case VariantSpec::de_price: return "de_price";
    case VariantSpec::wo_image: return "wo_image";
    case VariantSpec::wo_text: return "wo_text";
    case VariantSpec::wo_price: return "wo_price";
  }
  return "unknown";
}

VariantSpec variant_from_string(const std::string& s) {
  for (VariantSpec v : all_variants())
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

ModelSetup build_variant(VariantSpec spec, const model::HyperParams& hyper) {
  ModelSetup setup{hyper, {}};
  auto& w = setup.wiring;
  switch (spec) {
    case VariantSpec::full: break;
    case VariantSpec::no_con: setup.hyper.lambda = 0.0; break;
    case VariantSpec::pse_direct: w.contrastive = model::ContrastiveMode::direct; break;
    case VariantSpec::mlp_fusion: w.fusion = model::Fusion::mlp; break;
    case VariantSpec::de_price: w.price = model::PriceBranch::point; break;
    case VariantSpec::wo_image: w.modalities = det::Modalities::text_only; break;
    case VariantSpec::wo_text: w.modalities = det::Modalities::image_only; break;
    case VariantSpec::wo_price: w.price = model::PriceBranch::none; break;
  }
  return setup;
}

namespace {
std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}
}  // namespace

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "variant,split,k,prec,mrr\n";
  for (const auto& r : rows)
    out += r.variant + "," + r.split + "," + std::to_string(r.k) + "," + fixed2(r.prec) + "," + fixed2(r.mrr) + "\n";
  return out;
}

std::string buckets_csv(const std::vector<BucketRow>& rows) {
  std::string out = "bucket,count,prec20,mrr20\n";
  for (const auto& r : rows)
    out += r.bucket + "," + std::to_string(r.count) + "," + fixed2(r.prec20) + "," + fixed2(r.mrr20) + "\n";
  return out;
}

GradCheckReport model_gradcheck(const GradCheckSetup& setup, const model::Wiring& wiring) {
  emb::SynthConfig sc;
  sc.n_items = 40;
  sc.n_categories = 3;
  sc.n_sessions = 400;
  sc.d = setup.d;
  sc.seed = setup.seed;
  const emb::SynthOutput world = emb::synthesize(sc);
  const model::ModelInputs in{world.corpus, world.bundle};

  std::vector<data::IndexedSession> batch;
  for (const auto& s : world.corpus.train) {
    if (s.context.size() < setup.context) continue;
    batch.push_back({std::vector<std::uint32_t>(s.context.end() - static_cast<std::ptrdiff_t>(setup.context), s.context.end()),
                     s.target});
    if (batch.size() == setup.batch) break;
  }
  if (batch.size() < setup.batch) throw std::runtime_error("gradcheck: not enough sessions of the requested length");

  model::HyperParams h;
  h.d = setup.d;
  h.c = setup.c;
  h.t = setup.t;
  h.r = setup.r;
  h.batch = setup.batch;
  h.seed = setup.seed;
  h.validate();
  ParamStore params = model::init_params(h, wiring, world.corpus.n_categories(), setup.seed);
  if (params.contains("prob.sigma_table")) {
    std::mt19937_64 rng(setup.seed + 17);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (double& v : params.at("prob.sigma_table").values()) v = u(rng);
  }
  return finite_diff_check(
      params, [&](const BoundParams& p) { return model::batch_loss(p, in, batch, h, wiring).loss; }, setup.h,
      setup.tolerance);
}

}  // namespace mmsbr::eval
