// Command-line entry points: synth, train, eval, ablate, gradcheck.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mmsbr/evalkit.hpp"
#include "mmsbr/kernels.hpp"

namespace fs = std::filesystem;
using namespace mmsbr;

namespace {

// Every accepted key with its default. Keys shared by the generator and the
// model (d, seed, rho) take one value for both.
const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = [] {
    const emb::SynthConfig s;
    const model::HyperParams h;
    auto num = [](auto v) {
      std::ostringstream os;
      os << v;
      return os.str();
    };
    return std::map<std::string, std::string>{
        // generator
        {"n_items", num(s.n_items)},
        {"n_categories", num(s.n_categories)},
        {"n_sessions", num(s.n_sessions)},
        {"style_clusters", num(s.style_clusters)},
        {"price_weight", num(s.price_weight)},
        {"noise_sigma", num(s.noise_sigma)},
        {"pseudo_fidelity", num(s.pseudo_fidelity)},
        {"latent_dim", num(s.latent_dim)},
        {"img_dim", num(s.img_dim)},
        {"txt_dim", num(s.txt_dim)},
        {"style_sharpness", num(s.style_sharpness)},
        {"band_halfwidth", num(s.band_halfwidth)},
        {"text_noise_scale", num(s.text_noise_scale)},
        {"cold_fraction", num(s.cold_fraction)},
        {"mean_extra_length", num(s.mean_extra_length)},
        {"max_session_length", num(s.max_session_length)},
        {"min_item_freq", num(s.min_item_freq)},
        // shared
        {"d", num(s.d)},
        {"seed", num(s.seed)},
        {"rho", num(s.rho)},
        // model
        {"batch", num(h.batch)},
        {"lr", num(h.lr)},
        {"r", num(h.r)},
        {"c", num(h.c)},
        {"t", num(h.t)},
        {"heads", num(h.heads)},
        {"lambda", num(h.lambda)},
        {"tau", num(h.tau)},
        {"epochs", num(h.epochs)},
        {"sign_w2", "minus"},
        {"precision", "f64"},
        {"literal_eq6", "false"},
        {"literal_eq23", "false"},
        {"literal_eq26", "false"},
        {"log_timing", "false"},
        // plumbing
        {"data", "data"},
        {"checkpoint", ""},
        {"variant", "full"},
    };
  }();
  return d;
}

class RunConfig {
 public:
  explicit RunConfig(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw std::invalid_argument("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const { return values_.at(key); }

  double real(const std::string& key) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(str(key), &used);
      if (used != str(key).size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config key '" + key + "' expects a number, got '" + str(key) + "'");
    }
  }

  std::size_t count(const std::string& key) const {
    const double v = real(key);
    if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
      throw std::invalid_argument("config key '" + key + "' expects a non-negative integer, got '" + str(key) + "'");
    return static_cast<std::size_t>(v);
  }

  bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config key '" + key + "' expects true or false, got '" + v + "'");
  }

  void write(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
  }

  emb::SynthConfig synth() const {
    emb::SynthConfig s;
    s.n_items = count("n_items");
    s.n_categories = count("n_categories");
    s.d = count("d");
    s.n_sessions = count("n_sessions");
    s.style_clusters = count("style_clusters");
    s.price_weight = real("price_weight");
    s.noise_sigma = real("noise_sigma");
    s.pseudo_fidelity = real("pseudo_fidelity");
    s.seed = count("seed");
    s.latent_dim = count("latent_dim");
    s.img_dim = count("img_dim");
    s.txt_dim = count("txt_dim");
    s.style_sharpness = real("style_sharpness");
    s.band_halfwidth = real("band_halfwidth");
    s.text_noise_scale = real("text_noise_scale");
    s.cold_fraction = real("cold_fraction");
    s.mean_extra_length = real("mean_extra_length");
    s.max_session_length = count("max_session_length");
    s.min_item_freq = count("min_item_freq");
    s.rho = static_cast<int>(count("rho"));
    return s;
  }

  model::HyperParams hyper() const {
    model::HyperParams h;
    h.d = count("d");
    h.batch = count("batch");
    h.lr = real("lr");
    h.r = count("r");
    h.c = count("c");
    h.t = count("t");
    h.heads = count("heads");
    h.rho = static_cast<int>(count("rho"));
    h.lambda = real("lambda");
    h.tau = real("tau");
    h.epochs = count("epochs");
    h.seed = count("seed");
    const std::string& sign = str("sign_w2");
    if (sign != "minus" && sign != "plus") throw std::invalid_argument("sign_w2 must be minus or plus");
    h.sign_w2 = sign == "plus" ? model::SignW2::plus : model::SignW2::minus;
    const std::string& prec = str("precision");
    if (prec != "f64" && prec != "f32") throw std::invalid_argument("precision must be f64 or f32");
    h.precision = prec == "f32" ? model::Precision::f32 : model::Precision::f64;
    h.literal_eq6 = flag("literal_eq6");
    h.literal_eq23 = flag("literal_eq23");
    h.literal_eq26 = flag("literal_eq26");
    h.log_timing = flag("log_timing");
    h.validate();
    return h;
  }

 private:
  std::map<std::string, std::string> values_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

const char* const kMatrixFiles[] = {"img.mmeb", "txt.mmeb", "pseimg.mmeb", "psetxt.mmeb"};

// Corpus, raw embeddings and the reduced bundle loaded from a synth directory.
struct LoadedData {
  data::SessionCorpus corpus;
  emb::ModalityBundle bundle;
};

LoadedData load_data(const RunConfig& cfg) {
  const fs::path dir = cfg.str("data");
  const fs::path interactions = dir / "interactions.csv";
  if (!fs::exists(interactions)) throw std::runtime_error("missing " + interactions.string() + " (run synth first)");
  data::CorpusOptions opt;
  opt.sessions.min_item_freq = cfg.count("min_item_freq");
  opt.rho = static_cast<int>(cfg.count("rho"));
  LoadedData out;
  out.corpus = data::build_corpus(data::read_interactions_csv(interactions), opt);
  const std::size_t rows = cfg.count("n_items");
  emb::ModalityBundle raw;
  raw.img = emb::load_modality_matrix(dir / kMatrixFiles[0], rows, emb::Kind::actual_image);
  raw.txt = emb::load_modality_matrix(dir / kMatrixFiles[1], rows, emb::Kind::actual_text);
  raw.pseimg = emb::load_modality_matrix(dir / kMatrixFiles[2], rows, emb::Kind::pseudo_image);
  raw.psetxt = emb::load_modality_matrix(dir / kMatrixFiles[3], rows, emb::Kind::pseudo_text);
  raw.validate();
  out.bundle = emb::prepare_bundle(raw, out.corpus, {cfg.count("d"), false});
  return out;
}

fs::path checkpoint_path(const RunConfig& cfg, const fs::path& out) {
  return cfg.str("checkpoint").empty() ? out / "checkpoint.bin" : fs::path(cfg.str("checkpoint"));
}

int cmd_synth(const RunConfig& cfg, const fs::path& out) {
  const emb::SynthOutput s = emb::synthesize(cfg.synth());
  fs::create_directories(out);
  data::write_interactions_csv(out / "interactions.csv", s.interactions);
  const emb::EmbeddingMatrix* mats[] = {&s.raw.img, &s.raw.txt, &s.raw.pseimg, &s.raw.psetxt};
  for (std::size_t i = 0; i < 4; ++i) emb::save_modality_matrix(out / kMatrixFiles[i], *mats[i]);
  data::write_manifest(out, s.corpus);
  cfg.write(out / "config.txt");
  std::printf("synth: %zu interactions, %zu catalog items, %zu/%zu/%zu/%zu train/val/test/test_plus sessions -> %s\n",
              s.interactions.size(), s.corpus.n_items(), s.corpus.train.size(), s.corpus.val.size(),
              s.corpus.test.size(), s.corpus.test_plus.size(), out.string().c_str());
  return 0;
}

model::TrainResult train_one(const RunConfig& cfg, const LoadedData& d, const fs::path& out) {
  const auto setup = eval::build_variant(eval::variant_from_string(cfg.str("variant")), cfg.hyper());
  const model::ModelInputs in{d.corpus, d.bundle};
  const ParamStore init = model::init_params(setup.hyper, setup.wiring, d.corpus.n_categories(), setup.hyper.seed);
  fs::create_directories(out);
  save_checkpoint((out / "init.bin").string(), init);
  const model::TrainResult r = model::train_from(init, in, setup.hyper, setup.wiring, [](const model::EpochLog& e) {
    std::printf("epoch %zu loss %.6f val_prec20 %.2f val_mrr20 %.2f\n", e.epoch, e.mean_loss, e.val_prec20, e.val_mrr20);
    std::fflush(stdout);
  });
  save_checkpoint((out / "checkpoint.bin").string(), r.best);
  write_text(out / "train_log.csv", model::format_log(r.log));
  cfg.write(out / "config.txt");
  return r;
}

// "R=3,4" -> {"r", {"3", "4"}}
std::vector<std::pair<std::string, std::vector<std::string>>> parse_grid(const std::vector<std::string>& specs) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
      throw std::invalid_argument("grid axis must look like KEY=v1,v2, got '" + spec + "'");
    std::string key = spec.substr(0, eq);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (!defaults().count(key)) throw std::invalid_argument("unknown grid key '" + key + "'");
    std::vector<std::string> vals;
    std::stringstream ss(spec.substr(eq + 1));
    for (std::string v; std::getline(ss, v, ',');)
      if (!v.empty()) vals.push_back(v);
    axes.emplace_back(key, vals);
  }
  return axes;
}

int cmd_train(const RunConfig& cfg, const fs::path& out, const std::vector<std::string>& grid) {
  const LoadedData d = load_data(cfg);
  if (grid.empty()) {
    const model::TrainResult r = train_one(cfg, d, out);
    std::printf("best epoch %zu val_prec20 %.2f\n", r.best_epoch, r.log[r.best_epoch - 1].val_prec20);
    return 0;
  }
  const auto axes = parse_grid(grid);
  std::vector<std::size_t> idx(axes.size(), 0);
  std::ostringstream csv;
  for (const auto& [k, v] : axes) csv << k << ",";
  csv << "best_epoch,val_prec20,val_mrr20,dir\n";
  double best = -1.0;
  fs::path best_dir;
  for (bool done = false; !done;) {
    RunConfig c = cfg;
    std::string name;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      c.set(axes[a].first, axes[a].second[idx[a]]);
      name += (a ? "_" : "") + axes[a].first + axes[a].second[idx[a]];
    }
    std::printf("grid %s\n", name.c_str());
    const model::TrainResult r = train_one(c, d, out / name);
    const model::EpochLog& e = r.log[r.best_epoch - 1];
    for (std::size_t a = 0; a < axes.size(); ++a) csv << axes[a].second[idx[a]] << ",";
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu,%.2f,%.2f,", r.best_epoch, e.val_prec20, e.val_mrr20);
    csv << buf << name << "\n";
    if (e.val_prec20 > best) {
      best = e.val_prec20;
      best_dir = out / name;
    }
    done = true;
    for (std::size_t a = axes.size(); a-- > 0;) {
      if (++idx[a] < axes[a].second.size()) {
        done = false;
        break;
      }
      idx[a] = 0;
    }
  }
  write_text(out / "grid.csv", csv.str());
  fs::copy_file(best_dir / "checkpoint.bin", out / "checkpoint.bin", fs::copy_options::overwrite_existing);
  fs::copy_file(best_dir / "config.txt", out / "config.txt", fs::copy_options::overwrite_existing);
  std::printf("best grid point %s val_prec20 %.2f\n", best_dir.filename().string().c_str(), best);
  return 0;
}

int cmd_eval(const RunConfig& cfg, const fs::path& out) {
  const fs::path ckpt = checkpoint_path(cfg, out);
  if (!fs::exists(ckpt)) throw std::runtime_error("missing checkpoint " + ckpt.string());
  const LoadedData d = load_data(cfg);
  const auto variant = cfg.str("variant");
  const auto setup = eval::build_variant(eval::variant_from_string(variant), cfg.hyper());
  const ParamStore params = load_checkpoint(ckpt.string());
  const model::ModelInputs in{d.corpus, d.bundle};
  const auto cold = eval::cold_target_sessions(d.corpus);

  std::vector<eval::MetricRow> rows;
  std::vector<eval::BucketRow> buckets;
  const std::vector<std::pair<std::string, const std::vector<data::IndexedSession>*>> splits = {
      {"test", &d.corpus.test}, {"test_plus", &d.corpus.test_plus}, {"cold", &cold}};
  for (const auto& [split, sessions] : splits) {
    if (sessions->empty()) continue;
    const auto rep = eval::evaluate(params, in, setup.hyper, setup.wiring, *sessions, {10, 20}, variant, split);
    const auto pop = eval::popularity_baseline(d.corpus, *sessions, {10, 20}, split);
    rows.insert(rows.end(), rep.metrics.begin(), rep.metrics.end());
    rows.insert(rows.end(), pop.metrics.begin(), pop.metrics.end());
    if (split == "test") buckets = rep.buckets;
  }
  fs::create_directories(out);
  write_text(out / "metrics.csv", eval::metrics_csv(rows));
  write_text(out / "buckets.csv", eval::buckets_csv(buckets));
  cfg.write(out / "config.txt");
  std::cout << eval::metrics_csv(rows);
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& out) {
  const LoadedData d = load_data(cfg);
  const model::ModelInputs in{d.corpus, d.bundle};
  std::vector<eval::MetricRow> rows;
  for (const auto v : eval::all_variants()) {
    const std::string name = eval::to_string(v);
    std::printf("variant %s\n", name.c_str());
    RunConfig c = cfg;
    c.set("variant", name);
    const model::TrainResult r = train_one(c, d, out / name);
    const auto setup = eval::build_variant(v, c.hyper());
    const auto rep = eval::evaluate(r.best, in, setup.hyper, setup.wiring, d.corpus.test, {20}, name, "test");
    rows.push_back(rep.at(20));
  }
  write_text(out / "ablation.csv", eval::metrics_csv(rows));
  cfg.write(out / "config.txt");
  std::cout << eval::metrics_csv(rows);
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, const fs::path& out) {
  eval::GradCheckSetup setup;
  setup.seed = cfg.count("seed");
  const auto wiring = eval::build_variant(eval::variant_from_string(cfg.str("variant")), cfg.hyper()).wiring;
  const GradCheckReport rep = eval::model_gradcheck(setup, wiring);
  std::ostringstream csv;
  csv << "parameter,max_rel_error,pass\n";
  for (const auto& e : rep.entries) {
    std::printf("%s %-28s max_rel_error %.3e\n", e.pass ? "PASS" : "FAIL", e.name.c_str(), e.max_rel_error);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.6e,%d\n", e.name.c_str(), e.max_rel_error, e.pass ? 1 : 0);
    csv << buf;
  }
  fs::create_directories(out);
  write_text(out / "gradcheck.csv", csv.str());
  cfg.write(out / "config.txt");
  std::printf("%s\n", rep.pass() ? "gradcheck passed" : ("gradcheck failed at " + rep.first_failure()).c_str());
  return rep.pass() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::configure_threads_from_env();

  CLI::App app{"Multimodal session-based recommendation: synthesize, train, evaluate, ablate, gradient-check"};
  app.require_subcommand(1);
  // Every config key is also a flag; flags win over the file, unknown keys in
  // the file are rejected.
  app.set_config("--config", "", "key = value config file");
  app.allow_config_extras(CLI::config_extras_mode::error);
  std::map<std::string, std::string> values = defaults();
  for (auto& [key, value] : values) app.add_option("--" + key, value)->capture_default_str()->group("Config keys");
  std::string out_dir = "out";
  std::vector<std::string> grid;
  bool eq6 = false, eq23 = false, eq26 = false;
  app.add_option("--out", out_dir, "output directory");
  app.add_flag("--literal-eq6", eq6, "contrastive term without the log");
  app.add_flag("--literal-eq23", eq23, "raw distances as attention weights");
  app.add_flag("--literal-eq26", eq26, "full binary cross-entropy sum");

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and raw embeddings");
  auto* train = app.add_subcommand("train", "train and keep the best validation checkpoint");
  train->add_option("--grid", grid, "grid axes such as R=3,4 C=4 T=4");
  auto* evaluate = app.add_subcommand("eval", "score test, test_plus and cold-target sessions");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate every variant");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the joint loss (d=8)");
  for (auto* sub : {synth, train, evaluate, ablate, gradcheck}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (eq6) values["literal_eq6"] = "true";
    if (eq23) values["literal_eq23"] = "true";
    if (eq26) values["literal_eq26"] = "true";
    const RunConfig cfg(values);
    const fs::path out = out_dir;
    if (*synth) return cmd_synth(cfg, out);
    if (*train) return cmd_train(cfg, out, grid);
    if (*evaluate) return cmd_eval(cfg, out);
    if (*ablate) return cmd_ablate(cfg, out);
    return cmd_gradcheck(cfg, out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "mmsbr: error: %s\n", e.what());
    return 1;
  }
}
