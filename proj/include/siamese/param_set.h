#pragma once

#include <cstddef>
#include <deque>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "siamese/tensor.h"

namespace siamese {

// A learnable tensor addressed by a hierarchical dotted name such as
// "layer.3.attn.w_q" or "layer.3.mlp.ln_y.scale".
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Ordered collection of named parameters.
///
/// Insertion order is the flattening order. Element addresses stay valid
/// while parameters are added, so a tape may hold references into the set.
class ParamSet {
 public:
  Parameter& add(std::string name, Tensor value);

  bool contains(std::string_view name) const;
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  const Parameter* find(std::string_view name) const;
  Parameter* find(std::string_view name);

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t total_values() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  std::vector<double> flat_values() const;
  std::vector<double> flat_grads() const;
  void assign_flat_values(std::span<const double> flat);

  // Binary checkpoint: u64 little-endian header length, a JSON header listing
  // {name, offset, shape} per parameter (offsets in elements), then every
  // value as a little-endian IEEE-754 double.
  void save(const std::filesystem::path& path) const;
  static ParamSet load(const std::filesystem::path& path);

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace siamese
