// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "mmsbr/evalkit.hpp"
#include "mmsbr/kernels.hpp"

using namespace mmsbr;
using namespace mmsbr::diff;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  eval::GradCheckSetup setup;  // d=8, C=2, T=2, R=2, m=3, batch=4, f64
  const GradCheckReport rep = eval::model_gradcheck(setup);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  bool has_sigma = false;
  for (const auto& e : rep.entries) {
    if (e.max_rel_error >= worst) {
      worst = e.max_rel_error;
      worst_name = e.name;
    }
    has_sigma = has_sigma || e.name == "prob.sigma_table";
  }
  return {rep.pass() && has_sigma && secs < 300.0,
          fmt("%zu parameter groups, worst %s %.2e (tol 1e-3), sigma table checked %s, %.1f s", rep.entries.size(),
              worst_name.c_str(), worst, has_sigma ? "yes" : "no", secs)};
}

// ---------------------------------------------------------------------------
// 2. Wasserstein metric laws

Outcome wasserstein_laws() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g(0.0, 2.0);
  std::uniform_real_distribution<double> u(0.01, 5.0);
  const std::size_t d = 16;
  auto draw = [&](std::vector<double>& mu, std::vector<double>& s) {
    mu.resize(d);
    s.resize(d);
    for (auto& x : mu) x = g(rng);
    for (auto& x : s) x = u(rng);
  };
  double worst_sym = 0.0, worst_tri = 0.0, worst_self = 0.0, min_dist = 1e300;
  std::vector<double> m1, s1, m2, s2, m3, s3;
  for (int i = 0; i < 1000; ++i) {
    draw(m1, s1);
    draw(m2, s2);
    draw(m3, s3);
    const double d12 = prob::w2_distance(m1, s1, m2, s2), d21 = prob::w2_distance(m2, s2, m1, s1);
    const double d13 = prob::w2_distance(m1, s1, m3, s3), d23 = prob::w2_distance(m2, s2, m3, s3);
    worst_sym = std::max(worst_sym, std::abs(d12 - d21));
    worst_tri = std::max(worst_tri, d13 - (d12 + d23));
    worst_self = std::max(worst_self, std::abs(prob::w2_distance(m1, s1, m1, s1)));
    min_dist = std::min({min_dist, d12, d13, d23});
  }
  const std::vector<double> a_mu = {0.0}, a_s = {1.0}, b_mu = {3.0}, b_s = {4.0};
  const double closed = prob::w2_distance(a_mu, a_s, b_mu, b_s);
  const bool pass = min_dist >= 0.0 && worst_self == 0.0 && worst_sym <= 1e-12 && worst_tri <= 1e-9 &&
                    std::abs(closed - std::sqrt(10.0)) <= 1e-9;
  return {pass, fmt("1000 triples d=16: symmetry %.1e, triangle excess %.1e, self %.1e; N(0,1) vs N(3,4) = %.12f",
                    worst_sym, std::max(0.0, worst_tri), worst_self, closed)};
}

// ---------------------------------------------------------------------------
// 3. Normalization invariants

Outcome normalization() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> dim(1, 8), items(2, 30), sessions(1, 4), len(1, 6);
  std::normal_distribution<double> g(0.0, 1.0);
  auto rand_tensor = [&](std::size_t r, std::size_t c, double scale) {
    Tensor t(r, c);
    for (double& x : t.values()) x = scale * g(rng);
    return t;
  };
  double worst_sum = 0.0, min_cov = 1e300;
  std::size_t softmaxes = 0;
  auto check_rows = [&](const Tensor& w, const Tensor* valid) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      if (valid && (*valid)(r, 0) == 0.0) continue;
      double s = 0.0;
      for (double x : w.row_span(r)) s += x;
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      ++softmaxes;
    }
  };
  auto check_pos = [&](const Tensor& s, const Tensor* valid) {
    for (std::size_t r = 0; r < s.rows(); ++r) {
      if (valid && (*valid)(r, 0) == 0.0) continue;
      for (double x : s.row_span(r)) min_cov = std::min(min_cov, x);
    }
  };

  const int passes = 10000;
  for (int pass = 0; pass < passes; ++pass) {
    const std::size_t d = dim(rng), n = items(rng), b = sessions(rng);
    const double mag = pass % 10 == 0 ? 20.0 : 1.0;  // some passes with extreme inputs
    ParamStore store;
    for (const char* role : {"q", "k", "v"}) {
      store.add(std::string("prob.wsa.") + role + ".mu", rand_tensor(d, d, mag));
      store.add(std::string("prob.wsa.") + role + ".sigma", rand_tensor(d, d, mag));
    }
    store.add("prob.mu_table", rand_tensor(10, d, mag));
    store.add("prob.sigma_table", rand_tensor(10, d, mag));
    store.add("prob.category", rand_tensor(3, d, mag));
    Tape tape;
    BoundParams p(tape, store);

    std::vector<std::size_t> lengths(b);
    for (auto& l : lengths) l = len(rng);
    const SessionLayout layout = SessionLayout::from_lengths(lengths);
    std::vector<std::size_t> levels(layout.rows()), cats(layout.rows());
    for (auto& l : levels) l = rng() % 10;
    for (auto& c : cats) c = rng() % 3;
    const prob::Gaussian seq = prob::price_embed(p, levels, cats);
    check_pos(seq.sigma.value(), nullptr);
    const prob::WsaOutput wsa = prob::wasserstein_self_attention(p, seq, layout);
    check_rows(wsa.weights.value(), &layout.valid);
    check_pos(wsa.h.sigma.value(), &layout.valid);
    const prob::Gaussian sp = prob::user_price_range(wsa.h, layout);
    check_pos(sp.sigma.value(), nullptr);

    // Catalog scores.
    std::vector<std::size_t> item_levels(n), item_cats(n);
    for (auto& l : item_levels) l = rng() % 10;
    for (auto& c : item_cats) c = rng() % 3;
    const prob::Gaussian catalog = prob::price_embed(p, item_levels, item_cats);
    const Var probs = model::score_items(tape.constant(rand_tensor(b, d, mag)), sp, tape.constant(rand_tensor(n, d, mag)),
                                         catalog, pass % 2 ? model::SignW2::plus : model::SignW2::minus);
    check_rows(probs.value(), nullptr);

    // Contrastive denominators: the same softmax the loss normalizes.
    const Var sims = softmax_rows(scale(cosine_similarity(tape.constant(rand_tensor(n, d, mag)),
                                                              tape.constant(rand_tensor(n, d, mag))),
                                            1.0 / (0.05 + std::abs(g(rng)))));
    check_rows(sims.value(), nullptr);
  }
  const bool pass = worst_sum <= 1e-6 && min_cov > 0.0;
  return {pass, fmt("%d forward passes, %zu softmax rows, max |sum-1| %.1e, min covariance %.3e", passes, softmaxes,
                    worst_sum, min_cov)};
}

// ---------------------------------------------------------------------------
// 4. Fusion and attention structure

Outcome fusion_structure() {
  model::HyperParams h;
  h.d = 8;
  h.c = 3;
  h.t = 2;
  h.r = 2;
  h.heads = 2;
  const ParamStore store = model::init_params(h, {}, 3, 5);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  auto rand_tensor = [&](std::size_t r, std::size_t c) {
    Tensor t(r, c);
    for (double& x : t.values()) x = g(rng);
    return t;
  };

  // Permutation equivariance of one layer over the rows of each block.
  double worst_perm = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    BoundParams p(tape, store);
    const std::size_t rows = 2 + static_cast<std::size_t>(trial % 7), blocks = 1 + static_cast<std::size_t>(trial % 3);
    const Tensor f = rand_tensor(rows * blocks, 8);
    std::vector<std::size_t> perm(rows);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor fp(rows * blocks, 8);
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t c = 0; c < 8; ++c) fp(b * rows + i, c) = f(b * rows + perm[i], c);
    const Tensor out = det::transformer_layer(p, "det.layer.0", tape.constant(f), blocks, 2).value();
    const Tensor outp = det::transformer_layer(p, "det.layer.0", tape.constant(fp), blocks, 2).value();
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t c = 0; c < 8; ++c)
          worst_perm = std::max(worst_perm, std::abs(outp(b * rows + i, c) - out(b * rows + perm[i], c)));
  }

  // Zero-weight stack leaves pivot tokens unchanged.
  ParamStore zero = store;
  for (auto& e : zero)
    if (e.name.rfind("det.layer.", 0) == 0)
      for (double& x : e.value.values()) x = 0.0;
  double worst_pivot = 0.0;
  {
    Tape tape;
    BoundParams p(tape, zero);
    const std::size_t n = 4;
    const det::FusionShape shape{n, h.c, h.t, h.r, h.heads, det::Modalities::both};
    const Tensor tokens =
        det::pivot_tokens(p, tape.constant(rand_tensor(n * h.c, 8)), tape.constant(rand_tensor(n * h.c, 8)), shape).value();
    const Tensor& pivot = zero.at("det.pivot");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < h.t; ++t)
        for (std::size_t c = 0; c < 8; ++c)
          worst_pivot = std::max(worst_pivot, std::abs(tokens(i * h.t + t, c) - pivot(t, c)));
  }

  // u = 0 gives s_d = 0.
  ParamStore no_u = store;
  for (double& x : no_u.at("det.attn.u").values()) x = 0.0;
  double worst_sd = 0.0;
  {
    Tape tape;
    BoundParams p(tape, no_u);
    const SessionLayout layout = SessionLayout::from_lengths({3, 1, 5});
    const Tensor sd = det::vanilla_attention(p, tape.constant(rand_tensor(layout.rows(), 8)), layout).value();
    for (double x : sd.values()) worst_sd = std::max(worst_sd, std::abs(x));
  }
  const bool pass = worst_perm <= 1e-12 && worst_pivot == 0.0 && worst_sd == 0.0;
  return {pass, fmt("permutation max diff %.1e over 50 trials, zero-stack pivot diff %.1e, u=0 max |s_d| %.1e",
                    worst_perm, worst_pivot, worst_sd)};
}

// ---------------------------------------------------------------------------
// 5. Metric correctness

Outcome metric_correctness() {
  std::mt19937_64 rng(55);
  std::size_t mismatches = 0, cases = 0;
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = 1 + rng() % 60;
    const int levels = 1 + static_cast<int>(rng() % 8);  // few levels force ties
    std::vector<double> s(n);
    for (auto& x : s) x = static_cast<double>(static_cast<int>(rng() % static_cast<unsigned>(levels)));
    const std::size_t target = rng() % n;
    // Oracle: stable sort by descending score, position of the target.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    const std::size_t oracle_rank =
        static_cast<std::size_t>(std::find(order.begin(), order.end(), target) - order.begin()) + 1;
    const std::size_t rank = eval::rank_of(s, target);
    for (std::size_t k : {1, 5, 10, 20}) {
      const double p = eval::precision_at_k(rank, k), m = eval::mrr_at_k(rank, k);
      const double po = oracle_rank <= k ? 1.0 : 0.0, mo = oracle_rank <= k ? 1.0 / static_cast<double>(oracle_rank) : 0.0;
      if (p != po || m != mo) ++mismatches;
    }
    const auto top = eval::ranked_list(s, 10);
    if (!std::equal(top.begin(), top.end(), order.begin())) ++mismatches;
    ++cases;
  }

  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<data::IndexedSession> sessions;
  Tensor scores(1000, 100);
  for (std::size_t i = 0; i < 1000; ++i) {
    sessions.push_back({{static_cast<std::uint32_t>(rng() % 100)}, static_cast<std::uint32_t>(rng() % 100)});
    for (std::size_t j = 0; j < 100; ++j) scores(i, j) = u(rng);
  }
  const double random_prec = eval::evaluate_scores(scores, sessions).at(10).prec;
  const bool pass = mismatches == 0 && std::abs(random_prec - 10.0) <= 3.0;
  return {pass, fmt("%zu hand cases, %zu mismatches vs brute-force oracle; random Prec@10 = %.2f (expect 10 +- 3)", cases,
                    mismatches, random_prec)};
}

// ---------------------------------------------------------------------------
// Training runs shared by criteria 6-8.

model::HyperParams synthetic_hyper(std::uint64_t seed) {
  model::HyperParams h;
  h.d = 16;
  h.lr = 0.003;
  h.r = 2;
  h.c = 4;
  h.t = 2;
  h.heads = 2;
  h.batch = 100;
  h.epochs = 20;
  h.seed = seed;
  return h;
}

struct World {
  double price_weight = 0.5;
  double text_noise_scale = 1.0;
  double cold_fraction = 0.0;
  auto key() const { return std::make_tuple(price_weight, text_noise_scale, cold_fraction); }
};

struct RunResult {
  double prec10 = 0.0, prec20 = 0.0;
  double pop10 = 0.0;
  double cold10 = 0.0, cold_pop10 = 0.0;
  std::size_t cold_sessions = 0;
  double seconds = 0.0;
};

const RunResult& run(const World& w, std::uint64_t seed, eval::VariantSpec variant) {
  static std::map<std::tuple<double, double, double, std::uint64_t, int>, RunResult> cache;
  const auto key = std::tuple_cat(w.key(), std::make_tuple(seed, static_cast<int>(variant)));
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  emb::SynthConfig sc;  // n=200, 5 clusters, 5000 sessions, d=16
  sc.seed = seed;
  sc.price_weight = w.price_weight;
  sc.text_noise_scale = w.text_noise_scale;
  sc.cold_fraction = w.cold_fraction;
  const emb::SynthOutput world = emb::synthesize(sc);
  const model::ModelInputs in{world.corpus, world.bundle};
  const auto setup = eval::build_variant(variant, synthetic_hyper(seed));
  const auto t0 = std::chrono::steady_clock::now();
  const model::TrainResult tr = model::train(in, setup.hyper, setup.wiring);
  RunResult r;
  r.seconds = seconds_since(t0);
  const auto rep = eval::evaluate(tr.best, in, setup.hyper, setup.wiring, world.corpus.test);
  r.prec10 = rep.at(10).prec;
  r.prec20 = rep.at(20).prec;
  r.pop10 = eval::popularity_baseline(world.corpus, world.corpus.test).at(10).prec;
  const auto cold = eval::cold_target_sessions(world.corpus);
  r.cold_sessions = cold.size();
  if (!cold.empty()) {
    r.cold10 = eval::evaluate(tr.best, in, setup.hyper, setup.wiring, cold).at(10).prec;
    r.cold_pop10 = eval::popularity_baseline(world.corpus, cold).at(10).prec;
  }
  std::printf("  run pw=%.1f text_noise=%.0f cold=%.1f seed=%llu %-10s P@10 %6.2f P@20 %6.2f pop P@10 %5.2f%s (%.0f s)\n",
              w.price_weight, w.text_noise_scale, w.cold_fraction, static_cast<unsigned long long>(seed),
              eval::to_string(variant).c_str(), r.prec10, r.prec20, r.pop10,
              cold.empty() ? "" : fmt(" cold P@10 %.2f vs pop %.2f on %zu", r.cold10, r.cold_pop10, cold.size()).c_str(),
              r.seconds);
  std::fflush(stdout);
  return cache.emplace(key, r).first->second;
}

const std::uint64_t kSeeds[] = {1, 2, 3};

// ---------------------------------------------------------------------------
// 6. Learning signal

Outcome learning_signal() {
  std::string detail;
  bool pass = true;
  for (auto seed : kSeeds) {
    const RunResult& r = run({}, seed, eval::VariantSpec::full);
    const bool ok = r.prec10 >= 2.0 * r.pop10 && r.seconds <= 600.0;
    pass = pass && ok;
    detail += fmt("%sseed %llu: %.2f vs pop %.2f (%.0f s)", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(seed), r.prec10, r.pop10, r.seconds);
  }
  return {pass, "test Prec@10 full vs 2x popularity, " + detail};
}

// ---------------------------------------------------------------------------
// 7. Ablation ordering

Outcome ablation_ordering() {
  struct Pair {
    const char* label;
    World world;
    eval::VariantSpec other;
  };
  const World base{}, price{0.9, 1.0, 0.0}, image{0.5, 4.0, 0.0};
  const std::vector<Pair> pairs = {{"no_con", base, eval::VariantSpec::no_con},
                                   {"mlp_fusion", base, eval::VariantSpec::mlp_fusion},
                                   {"de_price@pw0.9", price, eval::VariantSpec::de_price},
                                   {"wo_price@pw0.9", price, eval::VariantSpec::wo_price},
                                   {"wo_image@text_noise4", image, eval::VariantSpec::wo_image}};
  bool pass = true;
  std::string detail;
  for (const auto& pr : pairs) {
    double full = 0.0, other = 0.0;
    for (auto seed : kSeeds) {
      full += run(pr.world, seed, eval::VariantSpec::full).prec20 / 3.0;
      other += run(pr.world, seed, pr.other).prec20 / 3.0;
    }
    pass = pass && full >= other;
    detail += fmt("%sfull %.2f %s %s %.2f", detail.empty() ? "" : "; ", full, full >= other ? ">=" : "<", pr.label, other);
  }
  return {pass, "mean test Prec@20 over 3 seeds: " + detail};
}

// ---------------------------------------------------------------------------
// 8. Cold start

Outcome cold_start() {
  bool pass = true;
  std::string detail;
  const World cold{0.5, 1.0, 0.1};
  for (auto seed : kSeeds) {
    const RunResult& r = run(cold, seed, eval::VariantSpec::full);
    pass = pass && r.cold_sessions > 0 && r.cold10 > r.cold_pop10;
    detail += fmt("%sseed %llu: %.2f vs pop %.2f on %zu sessions", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(seed), r.cold10, r.cold_pop10, r.cold_sessions);
  }
  return {pass, "cold-target Prec@10, " + detail};
}

// ---------------------------------------------------------------------------
// 9. Determinism

Outcome determinism() {
  kernels::set_parallel_enabled(false);
  auto once = [] {
    emb::SynthConfig sc;
    sc.n_sessions = 2000;
    sc.seed = 11;
    const emb::SynthOutput world = emb::synthesize(sc);
    const model::ModelInputs in{world.corpus, world.bundle};
    auto h = synthetic_hyper(11);
    h.epochs = 3;
    const model::TrainResult tr = model::train(in, h);
    const auto rep = eval::evaluate(tr.best, in, h, {}, world.corpus.test);
    return std::make_pair(model::format_log(tr.log), eval::metrics_csv(rep.metrics) + eval::buckets_csv(rep.buckets));
  };
  const auto a = once(), b = once();
  kernels::set_parallel_enabled(true);
  const auto c = once();
  const std::hash<std::string> hash;
  const bool pass = a == b && a == c;
  return {pass, fmt("log hash %016zx/%016zx, eval hash %016zx/%016zx, parallel kernels %s", hash(a.first),
                    hash(b.first), hash(a.second), hash(b.second), a == c ? "match" : "differ")};
}

const std::vector<std::pair<const char*, std::function<Outcome()>>>& criteria() {
  static const std::vector<std::pair<const char*, std::function<Outcome()>>> c = {
      {"gradient fidelity", gradient_fidelity},   {"Wasserstein metric laws", wasserstein_laws},
      {"normalization invariants", normalization}, {"fusion and attention structure", fusion_structure},
      {"metric correctness", metric_correctness}, {"learning signal", learning_signal},
      {"ablation ordering", ablation_ordering},   {"cold-start capability", cold_start},
      {"determinism", determinism}};
  return c;
}
}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads_from_env();
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria().size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria()[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria()[i].first, o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
