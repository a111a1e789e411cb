#include "mmsbr/params.hpp"

#include <bit>
#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mmsbr {

void ParamStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value)});
}

bool ParamStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Tensor& ParamStore::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].value;
}

const Tensor& ParamStore::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second].value;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore z;
  for (const auto& e : entries_) z.add(e.name, Tensor(e.value.rows(), e.value.cols()));
  return z;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value))
      return false;
  }
  return true;
}

BoundParams::BoundParams(diff::Tape& tape, const ParamStore& store, bool trainable)
    : tape_(&tape), store_(&store) {
  vars_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store[i];
    vars_.push_back(trainable ? tape.variable(e.value, e.name) : tape.constant(e.value));
    index_.emplace(e.name, i);
  }
}

diff::Var BoundParams::operator[](std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return vars_[it->second];
}

ParamStore BoundParams::grads() const {
  ParamStore g;
  for (std::size_t i = 0; i < store_->size(); ++i) g.add((*store_)[i].name, tape_->grad(vars_[i]));
  return g;
}

namespace {

namespace bai = boost::archive::iterators;
using ToBase64 = bai::base64_from_binary<bai::transform_width<const char*, 6, 8>>;
using FromBase64 = bai::transform_width<bai::binary_from_base64<std::string::const_iterator>, 8, 6>;

std::string encode_base64(const std::string& bytes) {
  std::string out(ToBase64(bytes.data()), ToBase64(bytes.data() + bytes.size()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

std::string decode_base64(std::string text) {
  std::size_t pad = 0;
  while (!text.empty() && text.back() == '=') {
    text.pop_back();
    ++pad;
  }
  // binary_from_base64 needs whole 4-char groups; 'A' decodes to zero bits
  // that the length trim below discards.
  text.append(pad, 'A');
  std::string out(FromBase64(text.cbegin()), FromBase64(text.cend()));
  out.resize(out.size() - pad);
  return out;
}

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian host");

}  // namespace

void write_checkpoint(std::ostream& out, const ParamStore& params) {
  for (const auto& e : params) {
    std::string bytes(e.value.size() * sizeof(float), '\0');
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const auto f = static_cast<float>(e.value[i]);
      std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
    }
    out << e.name << ' ' << e.value.rows() << 'x' << e.value.cols() << ' ' << encode_base64(bytes) << '\n';
  }
}

ParamStore read_checkpoint(std::istream& in) {
  ParamStore params;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape, payload;
    if (!(ls >> name >> shape)) throw std::runtime_error("checkpoint line " + std::to_string(lineno) + ": malformed");
    ls >> payload;
    const auto x = shape.find('x');
    if (x == std::string::npos) throw std::runtime_error("checkpoint line " + std::to_string(lineno) + ": bad shape");
    const std::size_t rows = std::stoul(shape.substr(0, x));
    const std::size_t cols = std::stoul(shape.substr(x + 1));
    const std::string bytes = decode_base64(payload);
    if (bytes.size() != rows * cols * sizeof(float)) {
      throw std::runtime_error("checkpoint line " + std::to_string(lineno) + ": payload has " +
                               std::to_string(bytes.size()) + " bytes for shape " + shape);
    }
    Tensor t(rows, cols);
    for (std::size_t i = 0; i < t.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
      t[i] = f;
    }
    params.add(name, std::move(t));
  }
  return params;
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(out, params);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

void round_to_f32(ParamStore& params) {
  for (auto& e : params)
    for (double& v : e.value.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace mmsbr
