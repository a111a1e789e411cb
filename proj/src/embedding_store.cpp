#include "mmsbr/embedding_store.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmsbr::emb {

std::string to_string(Kind k) {
  switch (k) {
    case Kind::actual_image: return "actual_image";
    case Kind::actual_text: return "actual_text";
    case Kind::pseudo_image: return "pseudo_image";
    case Kind::pseudo_text: return "pseudo_text";
  }
  return "unknown";
}

Kind kind_from_string(const std::string& s) {
  for (Kind k : {Kind::actual_image, Kind::actual_text, Kind::pseudo_image, Kind::pseudo_text})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown embedding kind '" + s + "'");
}

void ModalityBundle::validate() const {
  // Pseudo matrices live in the space of the matching actual modality.
  const std::pair<const EmbeddingMatrix*, const EmbeddingMatrix*> pairs[] = {{&img, &img}, {&pseimg, &img},
                                                                             {&txt, &txt}, {&psetxt, &txt}};
  for (const auto& [m, ref] : pairs) {
    if (m->rows() != img.rows() || m->dim() != ref->dim()) {
      throw std::invalid_argument("modality bundle: " + to_string(m->kind) + " has shape " +
                                  m->data.shape_string() + ", expected (" + std::to_string(img.rows()) + "," +
                                  std::to_string(ref->dim()) + ")");
    }
    if (!m->data.all_finite()) throw std::invalid_argument("modality bundle: " + to_string(m->kind) + " not finite");
  }
}

namespace {

static_assert(std::endian::native == std::endian::little, "embedding I/O assumes little-endian host");

EmbeddingMatrix load_binary(std::ifstream& in, const std::filesystem::path& path, std::size_t expected_n, Kind kind) {
  std::uint32_t header[2];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) throw LoadError(path.string() + ": truncated header");
  const std::size_t n = header[0], dim = header[1];
  if (n != expected_n) {
    throw LoadError(path.string() + ": row count " + std::to_string(n) + " != " + std::to_string(expected_n));
  }
  EmbeddingMatrix m{kind, Tensor(n, dim)};
  std::vector<float> row(dim);
  for (std::size_t r = 0; r < n; ++r) {
    if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(dim * sizeof(float)))) {
      throw LoadError(path.string() + ": missing data at row " + std::to_string(r));
    }
    for (std::size_t c = 0; c < dim; ++c) {
      if (!std::isfinite(row[c])) {
        throw LoadError(path.string() + ": non-finite value at row " + std::to_string(r) + ", column " +
                        std::to_string(c));
      }
      m.data(r, c) = row[c];
    }
  }
  return m;
}

EmbeddingMatrix load_csv(std::ifstream& in, const std::filesystem::path& path, std::size_t expected_n, Kind kind) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    const std::size_t r = rows.size();
    while (std::getline(ss, cell, ',')) {
      double v;
      try {
        std::size_t used = 0;
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        throw LoadError(path.string() + ": unparseable value at row " + std::to_string(r));
      }
      if (!std::isfinite(v)) throw LoadError(path.string() + ": non-finite value at row " + std::to_string(r));
      vals.push_back(v);
    }
    if (!rows.empty() && vals.size() != rows.front().size()) {
      throw LoadError(path.string() + ": dimension mismatch at row " + std::to_string(r) + " (" +
                      std::to_string(vals.size()) + " != " + std::to_string(rows.front().size()) + ")");
    }
    rows.push_back(std::move(vals));
  }
  if (rows.size() != expected_n) {
    throw LoadError(path.string() + ": row count " + std::to_string(rows.size()) + " != " + std::to_string(expected_n));
  }
  const std::size_t dim = rows.empty() ? 0 : rows.front().size();
  EmbeddingMatrix m{kind, Tensor(rows.size(), dim)};
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), m.data.row_span(r).begin());
  return m;
}

}  // namespace

EmbeddingMatrix load_modality_matrix(const std::filesystem::path& path, std::size_t expected_n, Kind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() == 4 && std::memcmp(magic, "MMEB", 4) == 0) return load_binary(in, path, expected_n, kind);
  in.clear();
  in.seekg(0);
  return load_csv(in, path, expected_n, kind);
}

void save_modality_matrix(const std::filesystem::path& path, const EmbeddingMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("MMEB", 4);
  const std::uint32_t header[2] = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.dim())};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> buf(m.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(m.data[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void save_modality_matrix_csv(const std::filesystem::path& path, const EmbeddingMatrix& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.dim(); ++c) out << (c ? "," : "") << m.data(r, c);
    out << '\n';
  }
}

PcaBasis fit_pca(const Tensor& data, std::span<const std::size_t> fit_rows, std::size_t d) {
  const std::size_t dim = data.cols();
  if (d > dim) throw std::invalid_argument("pca: d=" + std::to_string(d) + " exceeds input width " + std::to_string(dim));
  if (fit_rows.empty()) throw std::invalid_argument("pca: no rows to fit");

  Eigen::MatrixXd x(static_cast<Eigen::Index>(fit_rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < fit_rows.size(); ++i)
    for (std::size_t c = 0; c < dim; ++c) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = data(fit_rows[i], c);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;

  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const Eigen::MatrixXd& v = svd.matrixV();
  const double tol = sv.size() > 0 ? sv(0) * 1e-10 * static_cast<double>(std::max(x.rows(), x.cols())) : 0.0;

  PcaBasis basis;
  basis.mean = Tensor(1, dim);
  for (std::size_t c = 0; c < dim; ++c) basis.mean[c] = mu(static_cast<Eigen::Index>(c));
  basis.components = Tensor(dim, d);
  basis.eigenvalues.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    if (kk >= sv.size() || sv(kk) <= tol) continue;  // rank-deficient: zero direction
    // Sign convention: the largest-magnitude loading is positive.
    Eigen::Index arg = 0;
    v.col(kk).cwiseAbs().maxCoeff(&arg);
    const double sign = v(arg, kk) < 0 ? -1.0 : 1.0;
    for (std::size_t c = 0; c < dim; ++c) basis.components(c, k) = sign * v(static_cast<Eigen::Index>(c), kk);
    basis.eigenvalues[k] = sv(kk) * sv(kk);
  }
  return basis;
}

Tensor apply_pca(const PcaBasis& basis, const Tensor& data) {
  if (data.cols() != basis.components.rows()) {
    throw std::invalid_argument("pca: data width " + std::to_string(data.cols()) + " != basis width " +
                                std::to_string(basis.components.rows()));
  }
  const std::size_t d = basis.components.cols();
  Tensor out(data.rows(), d);
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c) {
      const double centered = data(r, c) - basis.mean[c];
      for (std::size_t k = 0; k < d; ++k) out(r, k) += centered * basis.components(c, k);
    }
  return out;
}

EmbeddingMatrix pca_reduce(const EmbeddingMatrix& m, std::size_t d, std::span<const std::size_t> fit_rows) {
  return {m.kind, apply_pca(fit_pca(m.data, fit_rows, d), m.data)};
}

ModalityBundle prepare_bundle(const ModalityBundle& by_item_id, const data::SessionCorpus& corpus,
                              const PrepareOptions& options) {
  by_item_id.validate();
  std::vector<std::size_t> rows;
  rows.reserve(corpus.n_items());
  for (const auto& item : corpus.items) {
    if (item.item_id < 0 || static_cast<std::size_t>(item.item_id) >= by_item_id.n_items()) {
      throw std::out_of_range("item " + std::to_string(item.item_id) + " has no embedding row");
    }
    rows.push_back(static_cast<std::size_t>(item.item_id));
  }
  auto select = [&](const EmbeddingMatrix& m) {
    EmbeddingMatrix out{m.kind, Tensor(rows.size(), m.dim())};
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(m.data.row_span(rows[i]).begin(), m.dim(), out.data.row_span(i).begin());
    return out;
  };
  ModalityBundle sel{select(by_item_id.img), select(by_item_id.txt), select(by_item_id.pseimg),
                     select(by_item_id.psetxt)};
  const std::vector<std::size_t> fit = corpus.train_item_indices();

  ModalityBundle out;
  if (!options.joint_modality_fit) {
    out.img = pca_reduce(sel.img, options.d, fit);
    out.txt = pca_reduce(sel.txt, options.d, fit);
    out.pseimg = pca_reduce(sel.pseimg, options.d, fit);
    out.psetxt = pca_reduce(sel.psetxt, options.d, fit);
  } else {
    auto joint = [&](const EmbeddingMatrix& actual, const EmbeddingMatrix& pseudo) {
      const std::size_t n = actual.rows();
      Tensor stacked(2 * n, actual.dim());
      std::copy_n(actual.data.data(), actual.data.size(), stacked.data());
      std::copy_n(pseudo.data.data(), pseudo.data.size(), stacked.data() + actual.data.size());
      std::vector<std::size_t> rows2 = fit;
      for (std::size_t r : fit) rows2.push_back(r + n);
      const PcaBasis basis = fit_pca(stacked, rows2, options.d);
      return std::pair{EmbeddingMatrix{actual.kind, apply_pca(basis, actual.data)},
                       EmbeddingMatrix{pseudo.kind, apply_pca(basis, pseudo.data)}};
    };
    std::tie(out.img, out.pseimg) = joint(sel.img, sel.pseimg);
    std::tie(out.txt, out.psetxt) = joint(sel.txt, sel.psetxt);
  }
  out.validate();
  return out;
}

}  // namespace mmsbr::emb
