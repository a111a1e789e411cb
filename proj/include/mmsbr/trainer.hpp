#pragma once

// Model assembly, catalog scoring, the joint objective and mini-batch
// training with Adam.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmsbr/dataset.hpp"
#include "mmsbr/deterministic.hpp"
#include "mmsbr/embedding_store.hpp"
#include "mmsbr/layout.hpp"
#include "mmsbr/params.hpp"
#include "mmsbr/probabilistic.hpp"

namespace mmsbr::model {

using diff::Var;

enum class SignW2 { minus, plus };
enum class Precision { f32, f64 };

struct HyperParams {
  std::size_t d = 64;
  std::size_t batch = 100;
  double lr = 0.001;
  std::size_t r = 2;      // pivot layers
  std::size_t c = 4;      // feature rows per modality
  std::size_t t = 2;      // pivot tokens
  std::size_t heads = 2;
  int rho = 100;
  double lambda = 0.01;
  double tau = 1.0;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  SignW2 sign_w2 = SignW2::minus;
  Precision precision = Precision::f64;
  bool literal_eq6 = false;
  bool literal_eq23 = false;
  bool literal_eq26 = false;
  bool log_timing = false;  // wall-clock seconds in the log (breaks hash equality)

  void validate() const;
};

enum class Fusion { pivot, mlp };
enum class PriceBranch { wasserstein, point, none };
enum class ContrastiveMode { pseudo, direct };

/// Structural switches behind the ablation variants.
struct Wiring {
  ContrastiveMode contrastive = ContrastiveMode::pseudo;
  Fusion fusion = Fusion::pivot;
  det::Modalities modalities = det::Modalities::both;
  PriceBranch price = PriceBranch::wasserstein;
};

/// Every trainable array for the given wiring, in a stable order. Weights are
/// uniform in [-1/sqrt(d), 1/sqrt(d)], layer-norm gains 1 and biases 0, the
/// price sigma table 0.
ParamStore init_params(const HyperParams& hyper, const Wiring& wiring, std::size_t n_categories,
                       std::uint64_t seed);

/// Read-only data the model consumes.
struct ModelInputs {
  const data::SessionCorpus& corpus;
  const emb::ModalityBundle& bundle;
};

/// Per-item representations for the whole catalog.
struct Catalog {
  Var e;                // n x d descriptive embeddings
  Var img, txt;         // n x d refined actual embeddings
  prob::Gaussian price; // n rows (wasserstein branch)
  Var point;            // n x d (point branch)
};

Catalog item_representations(const BoundParams& p, const ModelInputs& in, const HyperParams& hyper,
                             const Wiring& wiring);

/// B x n logits: e_i . s_d + sign * W2(price_i, s_p), or the point-vector dot
/// product, or no price term, by wiring.
Var session_logits(const BoundParams& p, const Catalog& catalog, const std::vector<data::IndexedSession>& batch,
                   const HyperParams& hyper, const Wiring& wiring);

/// logits = s_d E^T + sign * W2(s_p, catalog prices); probabilities per row.
Var score_items(Var s_d, const prob::Gaussian& s_p, Var catalog_e, const prob::Gaussian& catalog_price,
                SignW2 sign);
/// Mean over rows of -log(probs[target]) (clamped at 1e-12), or the negated
/// binary sum over every item when `literal`.
Var rec_loss(Var probs, const std::vector<std::size_t>& targets, bool literal = false);
Var joint_loss(Var l_rec, Var l_con, double lambda);

/// Contrastive term over the given catalog rows (distinct items).
Var contrastive_for_items(const BoundParams& p, const Catalog& catalog, const ModelInputs& in,
                          const std::vector<std::size_t>& items, const HyperParams& hyper, const Wiring& wiring);

struct BatchLoss {
  Var loss, rec, con, logits;
  bool has_con = false;
};

/// Forward pass of one training batch. Items unseen in training are masked
/// out of the softmax when `mask_unseen`.
BatchLoss batch_loss(const BoundParams& p, const ModelInputs& in, const std::vector<data::IndexedSession>& batch,
                     const HyperParams& hyper, const Wiring& wiring, bool mask_unseen = true);

/// Logits for every session over the full catalog; rows follow `sessions`.
Tensor session_scores(const ParamStore& params, const ModelInputs& in, const std::vector<data::IndexedSession>& sessions,
                      const HyperParams& hyper, const Wiring& wiring);

class Adam {
 public:
  Adam(const ParamStore& like, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamStore& params, const ParamStore& grads, double lr);

 private:
  ParamStore m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_prec20 = 0.0;  // percent
  double val_mrr20 = 0.0;   // percent
  double seconds = 0.0;
};

struct TrainResult {
  ParamStore best;  // best validation Prec@20
  ParamStore last;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochLog&)>;

TrainResult train(const ModelInputs& in, const HyperParams& hyper, const Wiring& wiring = {},
                  const EpochCallback& on_epoch = {});
/// Same loop from given starting parameters.
TrainResult train_from(ParamStore params, const ModelInputs& in, const HyperParams& hyper, const Wiring& wiring,
                       const EpochCallback& on_epoch = {});

/// `epoch,mean_loss,val_prec20,val_mrr20,seconds` header plus one line per epoch.
std::string format_log(const std::vector<EpochLog>& log);

}  // namespace mmsbr::model
