#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmsbr/embedding_store.hpp"

namespace mmsbr::emb {

namespace {

using Vec = std::vector<double>;

Vec gaussian_vec(std::mt19937_64& rng, std::size_t n, double sigma = 1.0) {
  std::normal_distribution<double> g(0.0, sigma);
  Vec v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

void normalize(Vec& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  s = std::sqrt(s);
  if (s > 0.0)
    for (auto& x : v) x /= s;
}

double cosine(const Vec& a, const Vec& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Random linear view of the latent space: out = V * latent + offset.
struct View {
  Tensor v;  // out_dim x latent
  Vec offset;

  Vec apply(const Vec& latent) const {
    Vec out = offset;
    for (std::size_t r = 0; r < v.rows(); ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < v.cols(); ++c) acc += v(r, c) * latent[c];
      out[r] += acc;
    }
    return out;
  }
};

View random_view(std::mt19937_64& rng, std::size_t out_dim, std::size_t latent) {
  View view{Tensor(out_dim, latent), gaussian_vec(rng, out_dim, 0.5)};
  std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(latent)));
  for (auto& x : view.v.values()) x = g(rng);
  return view;
}

std::size_t sample_index(std::mt19937_64& rng, const Vec& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::uniform_real_distribution<double> u(0.0, total);
  const double r = u(rng);
  double c = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    c += weights[i];
    if (r < c && weights[i] > 0.0) return i;
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0.0) return i;
  return 0;
}

}  // namespace

void SynthConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("synth: ") + name + " must be >= 1");
  };
  positive(n_items, "n_items");
  positive(n_categories, "n_categories");
  positive(d, "d");
  positive(n_sessions, "n_sessions");
  positive(style_clusters, "style_clusters");
  positive(latent_dim, "latent_dim");
  positive(img_dim, "img_dim");
  positive(txt_dim, "txt_dim");
  if (max_session_length < 2) throw std::invalid_argument("synth: max_session_length must be >= 2");
  if (!(price_weight >= 0.0 && price_weight <= 1.0)) throw std::invalid_argument("synth: price_weight outside [0,1]");
  if (!(pseudo_fidelity >= 0.0 && pseudo_fidelity <= 1.0))
    throw std::invalid_argument("synth: pseudo_fidelity outside [0,1]");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw std::invalid_argument("synth: noise_sigma must be >= 0");
  if (!(cold_fraction >= 0.0 && cold_fraction < 1.0)) throw std::invalid_argument("synth: cold_fraction outside [0,1)");
  if (!std::isfinite(style_sharpness) || !std::isfinite(band_halfwidth) || !std::isfinite(text_noise_scale) ||
      !(mean_extra_length >= 0.0))
    throw std::invalid_argument("synth: parameters must be finite");
  if (d > std::min(img_dim, txt_dim)) throw std::invalid_argument("synth: d exceeds raw embedding width");
}

std::vector<double> user_item_weights(const SynthWorld& world, const SynthConfig& config, std::size_t cluster,
                                      double band_center) {
  std::vector<double> w(world.style.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double affinity = config.style_sharpness * cosine(world.style[i], world.centers[cluster]);
    const bool in_band = std::abs(world.price_quantile[i] - band_center) <= config.band_halfwidth;
    w[i] = std::exp(affinity) * (in_band ? 1.0 : 1.0 - config.price_weight);
  }
  return w;
}

SynthOutput synthesize(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t n = config.n_items;

  SynthOutput out;
  SynthWorld& w = out.world;

  for (std::size_t k = 0; k < config.style_clusters; ++k) {
    Vec c = gaussian_vec(rng, config.latent_dim);
    normalize(c);
    w.centers.push_back(std::move(c));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  w.cluster.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) w.cluster[order[i]] = i % config.style_clusters;

  Vec category_base(config.n_categories);
  for (auto& b : category_base) b = std::exp(std::log(5.0) + unit(rng) * (std::log(500.0) - std::log(5.0)));
  std::uniform_int_distribution<std::size_t> pick_cat(0, config.n_categories - 1);
  // Per-coordinate jitter; the expected offset norm is 0.35 for any latent width.
  const double jitter = 0.35 / std::sqrt(static_cast<double>(config.latent_dim));
  for (std::size_t i = 0; i < n; ++i) {
    Vec s = w.centers[w.cluster[i]];
    Vec noise = gaussian_vec(rng, config.latent_dim, jitter);
    for (std::size_t j = 0; j < s.size(); ++j) s[j] += noise[j];
    normalize(s);
    w.style.push_back(std::move(s));
    w.category.push_back(pick_cat(rng));
    const double q = unit(rng);
    w.price_quantile.push_back(q);
    w.price.push_back(std::round(category_base[w.category.back()] * (0.5 + q) * 100.0) / 100.0);
  }
  w.fresh.assign(n, false);
  {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto n_fresh = static_cast<std::size_t>(std::floor(config.cold_fraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n_fresh; ++i) w.fresh[perm[i]] = true;
  }

  // Modality embeddings: two heterogeneous linear views of the latent style.
  const View img_view = random_view(rng, config.img_dim, config.latent_dim);
  const View txt_view = random_view(rng, config.txt_dim, config.latent_dim);
  const double img_sigma = config.noise_sigma;
  const double txt_sigma = config.noise_sigma * config.text_noise_scale;
  out.raw.img = {Kind::actual_image, Tensor(n, config.img_dim)};
  out.raw.txt = {Kind::actual_text, Tensor(n, config.txt_dim)};
  out.raw.pseimg = {Kind::pseudo_image, Tensor(n, config.img_dim)};
  out.raw.psetxt = {Kind::pseudo_text, Tensor(n, config.txt_dim)};
  const double f = config.pseudo_fidelity;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec& s = w.style[i];
    auto write = [&](EmbeddingMatrix& m, const View& view, const Vec& latent, double sigma) {
      Vec e = view.apply(latent);
      const Vec eps = gaussian_vec(rng, e.size());
      for (std::size_t c = 0; c < e.size(); ++c) m.data(i, c) = e[c] + sigma * eps[c];
    };
    write(out.raw.img, img_view, s, img_sigma);
    write(out.raw.txt, txt_view, s, txt_sigma);
    // Pseudo image comes from the text, pseudo text from the image: the same
    // latent content rendered in the other space, diluted by hallucination.
    Vec r1 = gaussian_vec(rng, config.latent_dim);
    Vec r2 = gaussian_vec(rng, config.latent_dim);
    normalize(r1);
    normalize(r2);
    Vec l1(s.size()), l2(s.size());
    for (std::size_t j = 0; j < s.size(); ++j) {
      l1[j] = f * s[j] + (1.0 - f) * r1[j];
      l2[j] = f * s[j] + (1.0 - f) * r2[j];
    }
    write(out.raw.pseimg, img_view, l1, img_sigma);
    write(out.raw.psetxt, txt_view, l2, txt_sigma);
  }

  // Sessions: one anonymous user per day.
  constexpr double kBase = 18519.0 * 86400.0;
  std::geometric_distribution<int> extra(1.0 / (1.0 + config.mean_extra_length));
  std::uniform_int_distribution<std::size_t> pick_cluster(0, config.style_clusters - 1);
  const auto fresh_from = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(config.n_sessions)));
  for (std::size_t s = 0; s < config.n_sessions; ++s) {
    const std::size_t cluster = pick_cluster(rng);
    const double band = unit(rng);
    std::vector<double> weights = user_item_weights(w, config, cluster, band);
    if (s < fresh_from)
      for (std::size_t i = 0; i < n; ++i)
        if (w.fresh[i]) weights[i] = 0.0;
    const std::size_t available =
        static_cast<std::size_t>(std::count_if(weights.begin(), weights.end(), [](double x) { return x > 0.0; }));
    const std::size_t len =
        std::min({static_cast<std::size_t>(2 + extra(rng)), config.max_session_length, available});
    const std::string user = "s" + std::to_string(s);
    for (std::size_t j = 0; j < len; ++j) {
      const std::size_t item = sample_index(rng, weights);
      weights[item] = 0.0;
      out.interactions.push_back({user, static_cast<data::ItemId>(item),
                                  kBase + static_cast<double>(s) * 86400.0 + 3600.0 + 60.0 * static_cast<double>(j),
                                  w.price[item], static_cast<data::CategoryId>(w.category[item])});
    }
  }

  data::CorpusOptions copt;
  copt.sessions.min_item_freq = config.min_item_freq;
  copt.rho = config.rho;
  out.corpus = data::build_corpus(out.interactions, copt);
  out.bundle = prepare_bundle(out.raw, out.corpus, {config.d, false});
  return out;
}

}  // namespace mmsbr::emb
