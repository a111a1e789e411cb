#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmsbr/dataset.hpp"
#include "mmsbr/tensor.hpp"

namespace mmsbr::emb {

enum class Kind { actual_image, actual_text, pseudo_image, pseudo_text };

std::string to_string(Kind k);
Kind kind_from_string(const std::string& s);

struct EmbeddingMatrix {
  Kind kind = Kind::actual_image;
  Tensor data;  // rows x dim

  std::size_t rows() const { return data.rows(); }
  std::size_t dim() const { return data.cols(); }
};

/// The four matrices the model consumes, rows in catalog order.
struct ModalityBundle {
  EmbeddingMatrix img, txt, pseimg, psetxt;

  std::size_t n_items() const { return img.rows(); }
  std::size_t dim() const { return img.dim(); }
  /// Throws when row counts differ, a pseudo matrix is not in its actual
  /// modality's width, or a value is not finite.
  void validate() const;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary (`MMEB`, u32 n, u32 dim, f32 row-major, little-endian) or CSV (one
/// row per line, comma-separated). The format is detected from the magic.
EmbeddingMatrix load_modality_matrix(const std::filesystem::path& path, std::size_t expected_n, Kind kind);
void save_modality_matrix(const std::filesystem::path& path, const EmbeddingMatrix& m);
void save_modality_matrix_csv(const std::filesystem::path& path, const EmbeddingMatrix& m);

struct PcaBasis {
  Tensor mean;        // 1 x dim
  Tensor components;  // dim x d; missing directions are zero columns
  std::vector<double> eigenvalues;  // of the scatter matrix, length d (0 for padded)
};

/// Top-d principal directions of the mean-centered rows selected by `fit_rows`.
PcaBasis fit_pca(const Tensor& data, std::span<const std::size_t> fit_rows, std::size_t d);
/// (x - mean) * components for every row. No whitening.
Tensor apply_pca(const PcaBasis& basis, const Tensor& data);
EmbeddingMatrix pca_reduce(const EmbeddingMatrix& m, std::size_t d, std::span<const std::size_t> fit_rows);

struct PrepareOptions {
  std::size_t d = 64;
  /// Fit one basis per modality over stacked actual + pseudo rows instead of
  /// one basis per matrix.
  bool joint_modality_fit = false;
};

/// Raw matrices are indexed by item id. Picks the catalog rows, fits PCA on
/// items seen in training, and projects every catalog item.
ModalityBundle prepare_bundle(const ModalityBundle& by_item_id, const data::SessionCorpus& corpus,
                              const PrepareOptions& options);

// ---------------------------------------------------------------------------
// Synthetic corpora with planted style and price preferences.

struct SynthConfig {
  std::size_t n_items = 200;
  std::size_t n_categories = 10;
  std::size_t d = 16;
  std::size_t n_sessions = 5000;
  std::size_t style_clusters = 5;
  double price_weight = 0.5;     // 0: price ignored, 1: hard price band
  double noise_sigma = 0.5;
  double pseudo_fidelity = 0.8;
  std::uint64_t seed = 1;

  std::size_t latent_dim = 8;
  std::size_t img_dim = 64;
  std::size_t txt_dim = 48;
  double style_sharpness = 4.0;
  double band_halfwidth = 0.2;   // in within-category price quantile units
  double text_noise_scale = 1.0;
  double cold_fraction = 0.0;    // items only offered in the last tenth of sessions
  double mean_extra_length = 1.5;  // session length = 2 + geometric(mean)
  std::size_t max_session_length = 10;
  std::size_t min_item_freq = 5;
  int rho = 100;

  void validate() const;
};

/// Latent state behind a synthetic corpus.
struct SynthWorld {
  std::vector<std::size_t> cluster;            // per item
  std::vector<std::vector<double>> style;      // per item, unit latent vectors
  std::vector<std::vector<double>> centers;    // per cluster
  std::vector<double> price_quantile;          // per item, in [0, 1)
  std::vector<double> price;                   // per item
  std::vector<std::size_t> category;           // per item
  std::vector<bool> fresh;                     // cold-start items
};

/// Unnormalized next-item weights for a user with preferred cluster and
/// price-band centre: exp(sharpness * cos(style, center)) times 1 inside the
/// band and (1 - price_weight) outside.
std::vector<double> user_item_weights(const SynthWorld& world, const SynthConfig& config, std::size_t cluster,
                                      double band_center);

struct SynthOutput {
  SynthWorld world;
  std::vector<data::Interaction> interactions;
  ModalityBundle raw;  // by item id, raw widths
  data::SessionCorpus corpus;
  ModalityBundle bundle;  // catalog order, reduced to d
};

SynthOutput synthesize(const SynthConfig& config);

}  // namespace mmsbr::emb
