#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "mmsbr/evalkit.hpp"
#include "mmsbr/gradcheck.hpp"

using namespace mmsbr;

namespace {

data::IndexedSession sess(std::vector<std::uint32_t> ctx, std::uint32_t target) { return {std::move(ctx), target}; }

const emb::SynthOutput& small_world() {
  static const emb::SynthOutput out = [] {
    emb::SynthConfig c;
    c.n_items = 60;
    c.n_sessions = 800;
    c.d = 8;
    c.seed = 9;
    c.cold_fraction = 0.1;
    return emb::synthesize(c);
  }();
  return out;
}

model::HyperParams small_hyper() {
  model::HyperParams h;
  h.d = 8;
  h.c = 2;
  h.r = 1;
  h.batch = 50;
  return h;
}

}  // namespace

TEST_CASE("rank examples") {
  const std::vector<double> top = {0.9, 0.1, 0.5};
  CHECK(eval::rank_of(top, 0) == 1);
  CHECK(eval::precision_at_k(eval::rank_of(top, 0), 10) == 1.0);
  CHECK(eval::mrr_at_k(eval::rank_of(top, 0), 10) == 1.0);

  const std::vector<double> third = {0.5, 0.9, 0.3, 0.7};
  CHECK(eval::rank_of(third, 0) == 3);
  CHECK(eval::precision_at_k(3, 10) == 1.0);
  CHECK(eval::mrr_at_k(3, 10) == doctest::Approx(1.0 / 3.0));

  std::vector<double> eleventh(20, 0.0);
  for (std::size_t i = 0; i < 10; ++i) eleventh[i] = 1.0 + static_cast<double>(i);
  eleventh[15] = 0.5;
  CHECK(eval::rank_of(eleventh, 15) == 11);
  CHECK(eval::precision_at_k(11, 10) == 0.0);
  CHECK(eval::mrr_at_k(11, 10) == 0.0);
}

TEST_CASE("ties break by ascending index") {
  const std::vector<double> s = {1.0, 1.0, 1.0};
  CHECK(eval::rank_of(s, 0) == 1);
  CHECK(eval::rank_of(s, 2) == 3);
  CHECK(eval::ranked_list(s, 2) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("target outside the catalog is an error") {
  const std::vector<double> s = {1.0, 2.0};
  CHECK_THROWS_AS(eval::rank_of(s, 2), std::out_of_range);
  CHECK_THROWS_AS(eval::precision_at_k(1, 0), std::invalid_argument);
}

TEST_CASE("one-hot scores give 100 percent") {
  std::vector<data::IndexedSession> ss;
  Tensor scores(30, 50, 0.0);
  for (std::uint32_t i = 0; i < 30; ++i) {
    ss.push_back(sess({i % 7}, (i * 13) % 50));
    scores(i, (i * 13) % 50) = 1.0;
  }
  const eval::Report r = eval::evaluate_scores(scores, ss, {1, 10, 20});
  for (std::size_t k : {1, 10, 20}) {
    CHECK(r.at(k).prec == 100.0);
    CHECK(r.at(k).mrr == 100.0);
  }
}

TEST_CASE("random scores land near k over n") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> pick(0, 99);
  const std::size_t m = 2000;
  std::vector<data::IndexedSession> ss;
  Tensor scores(m, 100);
  for (std::size_t i = 0; i < m; ++i) {
    ss.push_back(sess({pick(rng)}, pick(rng)));
    for (std::size_t j = 0; j < 100; ++j) scores(i, j) = u(rng);
  }
  const eval::Report r = eval::evaluate_scores(scores, ss);
  CHECK(std::abs(r.at(10).prec - 10.0) <= 3.0);
  CHECK(std::abs(r.at(20).prec - 20.0) <= 3.0);
}

TEST_CASE("metric properties on arbitrary scores") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> pick(0, 39);
  std::uniform_int_distribution<int> len(1, 11);
  std::vector<data::IndexedSession> ss;
  Tensor scores(300, 40), transformed(300, 40);
  for (std::size_t i = 0; i < 300; ++i) {
    std::vector<std::uint32_t> ctx(static_cast<std::size_t>(len(rng)));
    for (auto& c : ctx) c = pick(rng);
    ss.push_back(sess(ctx, pick(rng)));
    for (std::size_t j = 0; j < 40; ++j) {
      scores(i, j) = g(rng);
      transformed(i, j) = std::exp(3.0 * scores(i, j)) + 7.0;
    }
  }
  const eval::Report a = eval::evaluate_scores(scores, ss, {1, 5, 10, 20});
  const eval::Report b = eval::evaluate_scores(transformed, ss, {1, 5, 10, 20});
  double prev = 0.0;
  for (std::size_t k : {1, 5, 10, 20}) {
    CHECK(a.at(k).mrr <= a.at(k).prec);
    CHECK(a.at(k).prec >= prev);
    prev = a.at(k).prec;
    CHECK(a.at(k).prec == b.at(k).prec);
    CHECK(a.at(k).mrr == b.at(k).mrr);
  }
  CHECK(a.at(1).mrr == a.at(1).prec);

  std::size_t by_context = 0, by_length = 0;
  for (const auto& row : a.buckets) {
    if (row.bucket == "short" || row.bucket == "long")
      by_context += row.count;
    else
      by_length += row.count;
  }
  CHECK(by_context == ss.size());
  CHECK(by_length == ss.size());
  CHECK(a.buckets.size() == 9);
  CHECK(a.buckets.back().bucket == "len8+");
}

TEST_CASE("bucket assignment by context and total length") {
  std::vector<data::IndexedSession> ss = {sess({0}, 1), sess({0, 1, 2}, 3), sess({0, 1, 2, 3}, 4),
                                          sess(std::vector<std::uint32_t>(9, 0), 5)};
  const eval::Report r = eval::evaluate_scores(Tensor(4, 6, 0.0), ss);
  auto count = [&](const std::string& b) {
    for (const auto& row : r.buckets)
      if (row.bucket == b) return row.count;
    return std::size_t{999};
  };
  CHECK(count("short") == 2);
  CHECK(count("long") == 2);
  CHECK(count("len2") == 1);
  CHECK(count("len4") == 1);
  CHECK(count("len5") == 1);
  CHECK(count("len8+") == 1);
}

TEST_CASE("popularity baseline") {
  data::SessionCorpus corpus;
  corpus.items.resize(50);
  corpus.seen_in_train.assign(50, true);
  // Item 7 dominates the training split.
  for (std::uint32_t i = 0; i < 40; ++i) corpus.train.push_back(sess({7}, i % 50 == 7 ? 8 : 7));
  std::vector<data::IndexedSession> test(10, sess({1}, 7));
  CHECK(eval::popularity_baseline(corpus, test, {1}).at(1).prec == 100.0);

  // Uniform popularity: ties keep the first ten ids, uniform targets hit 10/50.
  corpus.train.clear();
  for (std::uint32_t i = 0; i < 50; ++i) corpus.train.push_back(sess({(i + 1) % 50}, i));
  test.clear();
  for (std::uint32_t i = 0; i < 50; ++i) test.push_back(sess({0}, i));
  const eval::Report r = eval::popularity_baseline(corpus, test);
  CHECK(r.at(10).prec == doctest::Approx(20.0));
  CHECK(r.metrics.front().variant == "pop");
  // Deterministic.
  CHECK(eval::metrics_csv(r.metrics) == eval::metrics_csv(eval::popularity_baseline(corpus, test).metrics));
}

TEST_CASE("popularity counts context and target occurrences") {
  data::SessionCorpus corpus;
  corpus.items.resize(4);
  corpus.train = {sess({0, 1}, 2), sess({1}, 2), sess({1, 3}, 0)};
  CHECK(eval::popularity(corpus) == std::vector<double>{2.0, 3.0, 2.0, 1.0});
}

TEST_CASE("cold target sessions") {
  data::SessionCorpus corpus;
  corpus.items.resize(5);
  corpus.seen_in_train = {true, true, true, false, false};
  corpus.test_plus = {sess({0}, 1), sess({0}, 3), sess({3}, 2), sess({1}, 4)};
  const auto cold = eval::cold_target_sessions(corpus);
  REQUIRE(cold.size() == 2);
  CHECK(cold[0].target == 3);
  CHECK(cold[1].target == 4);
}

TEST_CASE("variant names round trip") {
  for (auto v : eval::all_variants()) CHECK(eval::variant_from_string(eval::to_string(v)) == v);
  CHECK(eval::all_variants().size() == 8);
  try {
    eval::variant_from_string("no_such");
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("no_such") != std::string::npos);
  }
}

TEST_CASE("variant wiring") {
  const auto h = small_hyper();
  using eval::VariantSpec;
  CHECK(eval::build_variant(VariantSpec::no_con, h).hyper.lambda == 0.0);
  CHECK(eval::build_variant(VariantSpec::pse_direct, h).wiring.contrastive == model::ContrastiveMode::direct);
  CHECK(eval::build_variant(VariantSpec::mlp_fusion, h).wiring.fusion == model::Fusion::mlp);
  CHECK(eval::build_variant(VariantSpec::de_price, h).wiring.price == model::PriceBranch::point);
  CHECK(eval::build_variant(VariantSpec::wo_price, h).wiring.price == model::PriceBranch::none);
  CHECK(eval::build_variant(VariantSpec::wo_image, h).wiring.modalities == det::Modalities::text_only);
  CHECK(eval::build_variant(VariantSpec::wo_text, h).wiring.modalities == det::Modalities::image_only);
  CHECK(eval::build_variant(VariantSpec::full, h).hyper.lambda == h.lambda);
}

TEST_CASE("no_con has zero contrastive gradient") {
  const model::ModelInputs in{small_world().corpus, small_world().bundle};
  // With text-only fusion the image refinement is reached only by the contrastive term.
  auto setup = eval::build_variant(eval::VariantSpec::no_con, small_hyper());
  setup.wiring.modalities = det::Modalities::text_only;
  const ParamStore store = model::init_params(setup.hyper, setup.wiring, in.corpus.n_categories(), 1);
  const std::vector<data::IndexedSession> batch(in.corpus.train.begin(), in.corpus.train.begin() + 20);
  const auto lg = analytic_gradients(
      store, [&](const BoundParams& p) { return model::batch_loss(p, in, batch, setup.hyper, setup.wiring).loss; });
  for (double g : lg.grads.at("det.refine_img.w").values()) CHECK(g == 0.0);
}

TEST_CASE("wo_price ignores the price tables") {
  const model::ModelInputs in{small_world().corpus, small_world().bundle};
  const auto h = small_hyper();
  ParamStore store = model::init_params(h, {}, in.corpus.n_categories(), 2);
  const auto setup = eval::build_variant(eval::VariantSpec::wo_price, h);
  const Tensor before = model::session_scores(store, in, in.corpus.test, setup.hyper, setup.wiring);
  for (double& v : store.at("prob.mu_table").values()) v += 3.0;
  for (double& v : store.at("prob.category").values()) v -= 1.5;
  const Tensor after = model::session_scores(store, in, in.corpus.test, setup.hyper, setup.wiring);
  CHECK(before == after);
  // The full model does read them.
  const Tensor full = model::session_scores(store, in, in.corpus.test, h, {});
  CHECK_FALSE(full == model::session_scores(model::init_params(h, {}, in.corpus.n_categories(), 2), in,
                                            in.corpus.test, h, {}));
}

TEST_CASE("cold items are scored from content alone") {
  const model::ModelInputs in{small_world().corpus, small_world().bundle};
  const auto h = small_hyper();
  const ParamStore store = model::init_params(h, {}, in.corpus.n_categories(), 3);
  const auto cold = eval::cold_target_sessions(in.corpus);
  REQUIRE_FALSE(cold.empty());
  const Tensor scores = model::session_scores(store, in, cold, h, {});
  for (double v : scores.values()) CHECK(std::isfinite(v));
  // Two items with identical content and price receive identical scores.
  emb::ModalityBundle twin = in.bundle;
  const std::uint32_t a = cold.front().target;
  const std::uint32_t b = a == 0 ? 1 : 0;
  data::SessionCorpus corpus = in.corpus;
  corpus.items[b].price_level = corpus.items[a].price_level;
  corpus.items[b].category_index = corpus.items[a].category_index;
  for (auto* m : {&twin.img, &twin.txt, &twin.pseimg, &twin.psetxt})
    for (std::size_t c = 0; c < m->data.cols(); ++c) m->data(b, c) = m->data(a, c);
  const model::ModelInputs twin_in{corpus, twin};
  const Tensor s = model::session_scores(store, twin_in, cold, h, {});
  for (std::size_t r = 0; r < s.rows(); ++r) CHECK(s(r, a) == doctest::Approx(s(r, b)).epsilon(1e-12));
}

TEST_CASE("csv formats") {
  const std::vector<eval::MetricRow> rows = {{"full", "test", 20, 12.345, 4.5}};
  CHECK(eval::metrics_csv(rows) == "variant,split,k,prec,mrr\nfull,test,20,12.35,4.50\n");
  const std::vector<eval::BucketRow> b = {{"short", 3, 33.333, 10.0}};
  CHECK(eval::buckets_csv(b) == "bucket,count,prec20,mrr20\nshort,3,33.33,10.00\n");
}

TEST_CASE("joint loss gradients match central differences") {
  const GradCheckReport rep = eval::model_gradcheck({});
  for (const auto& e : rep.entries) CHECK_MESSAGE(e.pass, e.name, " rel ", e.max_rel_error);
  CHECK(rep.entries.size() > 40);
}
