#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmsbr/deterministic.hpp"
#include "mmsbr/gradcheck.hpp"
#include "mmsbr/trainer.hpp"

using namespace mmsbr;
using namespace mmsbr::diff;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  Tensor t(r, c);
  for (auto& x : t.values()) x = g(rng);
  return t;
}

model::HyperParams small_hyper(std::size_t d = 4, std::size_t c = 2, std::size_t t = 2, std::size_t r = 2) {
  model::HyperParams h;
  h.d = d;
  h.c = c;
  h.t = t;
  h.r = r;
  h.heads = 2;
  h.rho = 10;
  return h;
}

ParamStore small_params(const model::HyperParams& h, std::uint64_t seed = 1) {
  return model::init_params(h, {}, 3, seed);
}

void zero_prefix(ParamStore& store, const std::string& prefix) {
  for (auto& e : store)
    if (e.name.rfind(prefix, 0) == 0 && e.name.find(".ln") == std::string::npos) e.value.fill(0.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double contrastive_value(const Tensor& img, const Tensor& pseimg, const Tensor& txt, const Tensor& psetxt,
                         bool literal = false) {
  Tape tape;
  return det::contrastive_loss(tape.constant(img), tape.constant(pseimg), tape.constant(txt), tape.constant(psetxt),
                               1.0, literal)
      .value()
      .item();
}

}  // namespace

TEST_CASE("contrastive loss on two orthogonal pairs") {
  const Tensor eye = Tensor::identity(2);
  const double expected = 2.0 * -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(contrastive_value(eye, eye, eye, eye) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.6265).epsilon(1e-4));
  // Printed form without the log.
  const double ratio = std::exp(1.0) / (std::exp(1.0) + 1.0);
  CHECK(contrastive_value(eye, eye, eye, eye, true) == doctest::Approx(-2.0 * ratio).epsilon(1e-12));
}

TEST_CASE("contrastive loss is minimized at the identity pairing") {
  for (std::size_t b = 2; b <= 5; ++b) {
    const Tensor eye = Tensor::identity(b);
    std::vector<std::size_t> perm(b);
    std::iota(perm.begin(), perm.end(), 0);
    const double at_identity = contrastive_value(eye, eye, eye, eye);
    double best = at_identity;
    std::size_t argmin_count = 0;
    do {
      Tensor permuted(b, b);
      for (std::size_t i = 0; i < b; ++i) permuted(i, perm[i]) = 1.0;
      const double v = contrastive_value(eye, permuted, eye, permuted);
      best = std::min(best, v);
      if (v <= at_identity + 1e-12) ++argmin_count;
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(best == at_identity);
    CHECK(argmin_count == 1);
  }
}

TEST_CASE("contrastive loss ignores row scale") {
  const Tensor a = random_tensor(4, 3, 1), pa = random_tensor(4, 3, 2);
  const Tensor t = random_tensor(4, 3, 3), pt = random_tensor(4, 3, 4);
  Tensor scaled = pa;
  for (std::size_t c = 0; c < 3; ++c) scaled(2, c) *= 3.0;
  Tensor scaled_t = t;
  for (std::size_t c = 0; c < 3; ++c) scaled_t(0, c) *= 3.0;
  const double base = contrastive_value(a, pa, t, pt);
  CHECK(std::abs(contrastive_value(a, scaled, scaled_t, pt) - base) <= 1e-12);
}

TEST_CASE("contrastive loss needs two items") {
  Tape tape;
  Var one = tape.constant(Tensor(1, 3, 1.0));
  CHECK_THROWS_AS(det::contrastive_loss(one, one, one, one, 1.0), std::invalid_argument);
}

TEST_CASE("moving pseudo rows toward their pairs lowers the loss") {
  const Tensor a = random_tensor(5, 4, 11), t = random_tensor(5, 4, 12);
  const Tensor pa = random_tensor(5, 4, 13), pt = random_tensor(5, 4, 14);
  auto unit = [](Tensor m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double n = 0;
      for (double x : m.row_span(r)) n += x * x;
      for (double& x : m.row_span(r)) x /= std::sqrt(n);
    }
    return m;
  };
  const Tensor ua = unit(a), upa = unit(pa), ut = unit(t), upt = unit(pt);
  // Slerp each pseudo row from its start toward its paired actual row.
  auto slerp = [](const Tensor& from, const Tensor& to, double s) {
    Tensor out(from.rows(), from.cols());
    for (std::size_t r = 0; r < from.rows(); ++r) {
      double dot = 0;
      for (std::size_t c = 0; c < from.cols(); ++c) dot += from(r, c) * to(r, c);
      const double omega = std::acos(std::clamp(dot, -1.0, 1.0));
      const double w0 = std::sin((1 - s) * omega) / std::sin(omega), w1 = std::sin(s * omega) / std::sin(omega);
      for (std::size_t c = 0; c < from.cols(); ++c) out(r, c) = w0 * from(r, c) + w1 * to(r, c);
    }
    return out;
  };
  double prev = contrastive_value(ua, upa, ut, upt);
  for (double s : {0.25, 0.5, 0.75, 1.0}) {
    const double v = contrastive_value(ua, slerp(upa, ua, s), ut, slerp(upt, ut, s));
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("feature sequences have one block of C rows per item") {
  const auto h = small_hyper(4, 1);
  const ParamStore store = small_params(h);
  Tape tape;
  BoundParams p(tape, store);
  Var z = det::gen_feature_sequences(p, "det.mlp_img", tape.constant(random_tensor(1, 4, 5)), 1);
  CHECK(z.rows() == 1);
  CHECK(z.cols() == 4);
}

TEST_CASE("zero input and zero biases give zero feature rows") {
  const auto h = small_hyper(4, 3);
  ParamStore store = small_params(h);
  for (auto& e : store)
    if (e.name.rfind("det.mlp_txt", 0) == 0 && e.name.back() == 'b') e.value.fill(0.0);
  Tape tape;
  BoundParams p(tape, store);
  Var z = det::gen_feature_sequences(p, "det.mlp_txt", tape.constant(Tensor(2, 4)), 3);
  CHECK(z.rows() == 6);
  for (double v : z.value().values()) CHECK(v == 0.0);
}

TEST_CASE("distinct feature MLPs give distinct rows and match per-item evaluation") {
  const auto h = small_hyper(4, 4);
  const ParamStore store = small_params(h, 7);
  Tape tape;
  BoundParams p(tape, store);
  const Tensor e = random_tensor(3, 4, 8);
  Var z = det::gen_feature_sequences(p, "det.mlp_img", tape.constant(e), 4);
  double min_dist = 1e300;
  for (std::size_t item = 0; item < 3; ++item)
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = a + 1; b < 4; ++b) {
        double d = 0;
        for (std::size_t c = 0; c < 4; ++c) {
          const double diff = z.value()(item * 4 + a, c) - z.value()(item * 4 + b, c);
          d += diff * diff;
        }
        min_dist = std::min(min_dist, d);
      }
  CHECK(min_dist > 0.0);
  // Row (item 2, k=3) equals MLP_3 applied to item 2 alone.
  Var single = det::mlp(p, "det.mlp_img.3", tape.constant(Tensor(1, 4, std::vector<double>(e.row_span(2).begin(), e.row_span(2).end()))));
  for (std::size_t c = 0; c < 4; ++c) CHECK(single.value()(0, c) == z.value()(2 * 4 + 3, c));
}

TEST_CASE("transformer with zero weights is the identity") {
  const auto h = small_hyper();
  ParamStore store = small_params(h);
  zero_prefix(store, "det.layer.0");
  Tape tape;
  BoundParams p(tape, store);
  const Tensor f = random_tensor(6, 4, 9);
  Var out = det::transformer_layer(p, "det.layer.0", tape.constant(f), 2, 2);
  CHECK(out.value() == f);
}

TEST_CASE("transformer is permutation equivariant") {
  const auto h = small_hyper();
  const ParamStore store = small_params(h, 3);
  Tape tape;
  BoundParams p(tape, store);
  const Tensor f = random_tensor(5, 4, 10);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  Tensor fp(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) fp(i, c) = f(perm[i], c);
  const Tensor out = det::transformer_layer(p, "det.layer.1", tape.constant(f), 1, 2).value();
  const Tensor outp = det::transformer_layer(p, "det.layer.1", tape.constant(fp), 1, 2).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(outp(i, c) - out(perm[i], c)) <= 1e-12);
}

TEST_CASE("single-row transformer matches hand evaluation at d=2") {
  auto h = small_hyper(2);
  const ParamStore store = small_params(h, 5);
  Tape tape;
  BoundParams p(tape, store);
  const Tensor f(1, 2, std::vector<double>{0.3, -1.1});
  const Tensor out = det::transformer_layer(p, "det.layer.0", tape.constant(f), 1, 2).value();

  const auto& s = store;
  const std::string pre = "det.layer.0";
  auto ln = [&](double a, double b, const std::string& which) {
    const double mu = (a + b) / 2, var = ((a - mu) * (a - mu) + (b - mu) * (b - mu)) / 2;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    const Tensor& g = s.at(pre + "." + which + ".g");
    const Tensor& bb = s.at(pre + "." + which + ".b");
    return std::pair{(a - mu) * inv * g[0] + bb[0], (b - mu) * inv * g[1] + bb[1]};
  };
  auto vecmat = [](std::pair<double, double> x, const Tensor& w) {
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t c = 0; c < w.cols(); ++c) out[c] = x.first * w(0, c) + x.second * w(1, c);
    return out;
  };
  // One key: every head puts weight exactly 1 on it, so MSA = LN(F) Wv Wo + bo.
  const auto x = ln(f[0], f[1], "ln1");
  const auto v = vecmat(x, s.at(pre + ".msa.wv"));
  const auto msa = vecmat({v[0], v[1]}, s.at(pre + ".msa.wo"));
  const double fs0 = msa[0] + s.at(pre + ".msa.bo")[0] + f[0];
  const double fs1 = msa[1] + s.at(pre + ".msa.bo")[1] + f[1];
  const auto y = ln(fs0, fs1, "ln2");
  auto hidden = vecmat(y, s.at(pre + ".fcl.w1"));
  for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = std::max(0.0, hidden[i] + s.at(pre + ".fcl.b1")[i]);
  const Tensor& w2 = s.at(pre + ".fcl.w2");
  for (std::size_t c = 0; c < 2; ++c) {
    double acc = s.at(pre + ".fcl.b2")[c];
    for (std::size_t i = 0; i < hidden.size(); ++i) acc += hidden[i] * w2(i, c);
    CHECK(out[c] == doctest::Approx(acc + (c == 0 ? fs0 : fs1)).epsilon(1e-12));
  }
}

TEST_CASE("transformer rejects d not divisible by heads") {
  const auto h = small_hyper();
  const ParamStore store = small_params(h);
  Tape tape;
  BoundParams p(tape, store);
  CHECK_THROWS_AS(det::transformer_layer(p, "det.layer.0", tape.constant(Tensor(2, 4)), 1, 3), std::invalid_argument);
}

TEST_CASE("zero transformer weights leave the pivot unchanged") {
  const auto h = small_hyper(4, 2, 3, 3);
  ParamStore store = small_params(h);
  zero_prefix(store, "det.layer.");
  Tape tape;
  BoundParams p(tape, store);
  const det::FusionShape shape{2, 2, 3, 3, 2, det::Modalities::both};
  Var tokens = det::pivot_tokens(p, tape.constant(random_tensor(4, 4, 1)), tape.constant(random_tensor(4, 4, 2)), shape);
  const Tensor& pivot = store.at("det.pivot");
  for (std::size_t item = 0; item < 2; ++item)
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t c = 0; c < 4; ++c) CHECK(tokens.value()(item * 3 + t, c) == pivot(t, c));
}

TEST_CASE("pivot fusion output is N x d for any C, T, R") {
  for (std::size_t c : {1, 3})
    for (std::size_t t : {1, 2})
      for (std::size_t r : {1, 3}) {
        const auto h = small_hyper(4, c, t, r);
        const ParamStore store = small_params(h);
        Tape tape;
        BoundParams p(tape, store);
        const det::FusionShape shape{3, c, t, r, 2, det::Modalities::both};
        Var e = det::pivot_fusion(p, tape.constant(random_tensor(3 * c, 4, 1)), tape.constant(random_tensor(3 * c, 4, 2)),
                                  shape);
        CHECK(e.rows() == 3);
        CHECK(e.cols() == 4);
      }
}

TEST_CASE("pivot fusion is asymmetric in image and text") {
  const auto h = small_hyper();
  const ParamStore store = small_params(h, 21);
  Tape tape;
  BoundParams p(tape, store);
  const det::FusionShape shape{1, 2, 2, 2, 2, det::Modalities::both};
  Var zi = tape.constant(random_tensor(2, 4, 3));
  Var zt = tape.constant(random_tensor(2, 4, 4));
  const Tensor e = det::pivot_fusion(p, zi, zt, shape).value();
  const Tensor swapped = det::pivot_fusion(p, zt, zi, shape).value();
  CHECK(max_abs_diff(e, swapped) > 0.0);
}

TEST_CASE("pivot fusion is computed per item") {
  const auto h = small_hyper();
  const ParamStore store = small_params(h, 22);
  Tape tape;
  BoundParams p(tape, store);
  const Tensor zi = random_tensor(6, 4, 5), zt = random_tensor(6, 4, 6);
  const Tensor all = det::pivot_fusion(p, tape.constant(zi), tape.constant(zt), {3, 2, 2, 2, 2, det::Modalities::both}).value();
  auto rows = [](const Tensor& m, std::size_t b, std::size_t n) {
    return Tensor(n, m.cols(), std::vector<double>(m.data() + b * m.cols(), m.data() + (b + n) * m.cols()));
  };
  const Tensor one =
      det::pivot_fusion(p, tape.constant(rows(zi, 2, 2)), tape.constant(rows(zt, 2, 2)), {1, 2, 2, 2, 2, det::Modalities::both})
          .value();
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(one(0, c) - all(1, c)) <= 1e-12);
}

TEST_CASE("gradient reaches the pivot tokens") {
  const auto h = small_hyper();
  const ParamStore store = small_params(h, 23);
  const Tensor zi = random_tensor(4, 4, 7), zt = random_tensor(4, 4, 8);
  auto build = [&](const BoundParams& p) {
    Tape& tape = p.tape();
    return sum(square(det::pivot_fusion(p, tape.constant(zi), tape.constant(zt), {2, 2, 2, 2, 2, det::Modalities::both})));
  };
  const auto analytic = analytic_gradients(store, build);
  double norm = 0.0;
  for (double g : analytic.grads.at("det.pivot").values()) norm += std::abs(g);
  CHECK(norm > 0.0);
  const GradCheckReport rep = finite_diff_check(store, build);
  CHECK(rep.pass());
}

TEST_CASE("vanilla attention with one position is alpha times the row") {
  const auto h = small_hyper();
  const ParamStore store = small_params(h, 31);
  Tape tape;
  BoundParams p(tape, store);
  const SessionLayout layout = SessionLayout::from_lengths({1});
  Var e = tape.constant(random_tensor(1, 4, 1));
  const double alpha = det::attention_weights(p, e, layout).value()[0];
  const Tensor s = det::vanilla_attention(p, e, layout).value();
  for (std::size_t c = 0; c < 4; ++c) CHECK(s[c] == doctest::Approx(alpha * e.value()[c]).epsilon(1e-14));
  // Hand formula: alpha = u . sigmoid(e A1 + e A2 + b).
  double expected = 0.0;
  for (std::size_t j = 0; j < 4; ++j) {
    double z = store.at("det.attn.b")[j];
    for (std::size_t i = 0; i < 4; ++i) z += e.value()[i] * (store.at("det.attn.a1")(i, j) + store.at("det.attn.a2")(i, j));
    expected += store.at("det.attn.u")[j] / (1.0 + std::exp(-z));
  }
  CHECK(alpha == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero u gives a zero session vector") {
  const auto h = small_hyper();
  ParamStore store = small_params(h, 32);
  store.at("det.attn.u").fill(0.0);
  Tape tape;
  BoundParams p(tape, store);
  const SessionLayout layout = SessionLayout::from_lengths({3});
  for (double v : det::vanilla_attention(p, tape.constant(random_tensor(3, 4, 2)), layout).value().values())
    CHECK(v == 0.0);
}

TEST_CASE("duplicate rows get identical weights and padding is ignored") {
  const auto h = small_hyper();
  const ParamStore store = small_params(h, 33);
  Tape tape;
  BoundParams p(tape, store);
  Tensor e = random_tensor(3, 4, 3);
  for (std::size_t c = 0; c < 4; ++c) e(2, c) = e(0, c);
  const Tensor alpha = det::attention_weights(p, tape.constant(e), SessionLayout::from_lengths({3})).value();
  CHECK(alpha[0] == alpha[2]);

  // Session of length 3 padded to 5 next to a longer one.
  Tensor padded(10, 4);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) padded(r, c) = e(r, c);
  const Tensor other = random_tensor(5, 4, 4);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 4; ++c) padded(5 + r, c) = other(r, c);
  padded(3, 0) = 99.0;  // padding content must not leak
  const Tensor batched = det::vanilla_attention(p, tape.constant(padded), SessionLayout::from_lengths({3, 5})).value();
  const Tensor single = det::vanilla_attention(p, tape.constant(e), SessionLayout::from_lengths({3})).value();
  for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(batched(0, c) - single(0, c)) <= 1e-12);
}
