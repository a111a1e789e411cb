#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmsbr/tape.hpp"
#include "mmsbr/tensor.hpp"

namespace mmsbr {

/// Named trainable arrays, enumerated in insertion order. Paths look like
/// "det.mlp_img.0.1.w" or "prob.wsa.q.mu".
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value);
  bool contains(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  std::vector<std::string> names() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }

  /// Same names and shapes, all zeros.
  ParamStore zeros_like() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape as gradient-receiving leaves (or as
/// constants, for inference).
class BoundParams {
 public:
  BoundParams(diff::Tape& tape, const ParamStore& store, bool trainable = true);

  diff::Var operator[](std::string_view name) const;
  bool contains(std::string_view name) const { return store_->contains(name); }
  diff::Tape& tape() const { return *tape_; }

  /// Gradients of the last backward() for every parameter; unreached ones
  /// are zero.
  ParamStore grads() const;

 private:
  diff::Tape* tape_;
  const ParamStore* store_;
  std::vector<diff::Var> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Checkpoint: one line per parameter, `path RxC base64(f32 little-endian)`.
void write_checkpoint(std::ostream& out, const ParamStore& params);
ParamStore read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

/// Rounds every value to the nearest float, matching what a checkpoint stores.
void round_to_f32(ParamStore& params);

}  // namespace mmsbr
