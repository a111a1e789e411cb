#pragma once

// Ranking metrics, evaluation protocols and ablation variants.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mmsbr/dataset.hpp"
#include "mmsbr/gradcheck.hpp"
#include "mmsbr/trainer.hpp"

namespace mmsbr::eval {

/// 1-based rank of `target` when items are ordered by descending score, ties
/// broken by ascending index. Throws std::out_of_range for a bad target.
std::size_t rank_of(std::span<const double> scores, std::size_t target);
/// Top-k indices in the same order.
std::vector<std::size_t> ranked_list(std::span<const double> scores, std::size_t k);

/// 1 when rank <= k.
double precision_at_k(std::size_t rank, std::size_t k);
/// 1/rank when rank <= k, else 0.
double mrr_at_k(std::size_t rank, std::size_t k);

struct MetricRow {
  std::string variant, split;
  std::size_t k = 0;
  double prec = 0.0;  // percent
  double mrr = 0.0;   // percent
};

struct BucketRow {
  std::string bucket;
  std::size_t count = 0;
  double prec20 = 0.0;
  double mrr20 = 0.0;
};

struct Report {
  std::vector<MetricRow> metrics;
  std::vector<BucketRow> buckets;

  /// Row for k; throws when absent.
  const MetricRow& at(std::size_t k) const;
};

/// Buckets: `short` (context <= 3), `long`, then `len2` .. `len7` and `len8+`
/// by session length (context + target).
Report evaluate_scores(const Tensor& scores, const std::vector<data::IndexedSession>& sessions,
                       const std::vector<std::size_t>& ks = {10, 20}, const std::string& variant = "full",
                       const std::string& split = "test");

Report evaluate(const ParamStore& params, const model::ModelInputs& in, const model::HyperParams& hyper,
                const model::Wiring& wiring, const std::vector<data::IndexedSession>& sessions,
                const std::vector<std::size_t>& ks = {10, 20}, const std::string& variant = "full",
                const std::string& split = "test");

/// Train-split target and context frequency per catalog item.
std::vector<double> popularity(const data::SessionCorpus& corpus);
/// Same popularity row for every session.
Tensor popularity_scores(const data::SessionCorpus& corpus, std::size_t n_sessions);
Report popularity_baseline(const data::SessionCorpus& corpus, const std::vector<data::IndexedSession>& sessions,
                           const std::vector<std::size_t>& ks = {10, 20}, const std::string& split = "test");

/// test_plus sessions whose target was never seen in training.
std::vector<data::IndexedSession> cold_target_sessions(const data::SessionCorpus& corpus);

enum class VariantSpec { full, no_con, pse_direct, mlp_fusion, de_price, wo_image, wo_text, wo_price };

const std::vector<VariantSpec>& all_variants();
std::string to_string(VariantSpec v);
/// Throws std::invalid_argument naming the unknown variant.
VariantSpec variant_from_string(const std::string& s);

struct ModelSetup {
  model::HyperParams hyper;
  model::Wiring wiring;
};

ModelSetup build_variant(VariantSpec spec, const model::HyperParams& hyper);

struct GradCheckSetup {
  std::size_t d = 8, c = 2, t = 2, r = 2;
  std::size_t context = 3;  // items per session
  std::size_t batch = 4;
  std::uint64_t seed = 1;
  double h = 1e-5;
  double tolerance = 1e-3;
};

/// Central-difference check of the joint loss of a freshly initialised model
/// on a small synthetic corpus. Price sigma tables are drawn at random so the
/// positivity map is exercised away from its initial value.
GradCheckReport model_gradcheck(const GradCheckSetup& setup, const model::Wiring& wiring = {});

/// `variant,split,k,prec,mrr`, percentages with two decimals.
std::string metrics_csv(const std::vector<MetricRow>& rows);
/// `bucket,count,prec20,mrr20`.
std::string buckets_csv(const std::vector<BucketRow>& rows);

}  // namespace mmsbr::eval
