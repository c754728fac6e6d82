#include "siamese/param_set.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "siamese/errors.h"

namespace siamese {
namespace {

constexpr const char* kFormatTag = "siamese-paramset";
constexpr int kFormatVersion = 1;

void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw ConfigError("checkpoint truncated in header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

void write_f64_le(std::ostream& out, double value) {
  write_u64_le(out, std::bit_cast<std::uint64_t>(value));
}

}  // namespace

Parameter& ParamSet::add(std::string name, Tensor value) {
  if (index_.contains(name)) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
  index_.emplace(name, params_.size());
  Tensor grad = Tensor::zeros_like(value);
  params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad)});
  return params_.back();
}

bool ParamSet::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

const Parameter* ParamSet::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter* ParamSet::find(std::string_view name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParamSet::at(std::string_view name) {
  Parameter* p = find(name);
  if (p == nullptr) throw IndexError("no parameter named '" + std::string(name) + "'");
  return *p;
}

const Parameter& ParamSet::at(std::string_view name) const {
  const Parameter* p = find(name);
  if (p == nullptr) throw IndexError("no parameter named '" + std::string(name) + "'");
  return *p;
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::vector<double> ParamSet::flat_values() const {
  std::vector<double> flat;
  flat.reserve(total_values());
  for (const auto& p : params_) {
    flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
  }
  return flat;
}

std::vector<double> ParamSet::flat_grads() const {
  std::vector<double> flat;
  flat.reserve(total_values());
  for (const auto& p : params_) {
    flat.insert(flat.end(), p.grad.data().begin(), p.grad.data().end());
  }
  return flat;
}

void ParamSet::assign_flat_values(std::span<const double> flat) {
  if (flat.size() != total_values()) {
    throw DimensionError("flat parameter vector has " + std::to_string(flat.size()) +
                         " values, expected " + std::to_string(total_values()));
  }
  std::size_t offset = 0;
  for (auto& p : params_) {
    auto dst = p.value.data();
    std::memcpy(dst.data(), flat.data() + offset, dst.size() * sizeof(double));
    offset += dst.size();
  }
}

void ParamSet::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = kFormatTag;
  header["version"] = kFormatVersion;
  header["count"] = total_values();
  auto& entries = header["params"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params_) {
    entries.push_back({{"name", p.name}, {"offset", offset}, {"shape", p.value.shape()}});
    offset += p.value.numel();
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path.string());
  write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params_) {
    for (double v : p.value.data()) write_f64_le(out, v);
  }
  if (!out) throw ConfigError("failed writing checkpoint: " + path.string());
}

ParamSet ParamSet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path.string());
  const std::uint64_t header_len = read_u64_le(in);
  if (header_len > (std::uint64_t{1} << 32)) {
    throw ConfigError("checkpoint header length implausible: " + path.string());
  }
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ConfigError("checkpoint truncated in JSON header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != kFormatTag) {
    throw ConfigError("not a parameter checkpoint: " + path.string());
  }
  const std::size_t count = header.at("count").get<std::size_t>();
  std::vector<double> flat(count);
  for (auto& v : flat) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw ConfigError("checkpoint truncated in value block");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
  }

  ParamSet set;
  for (const auto& entry : header.at("params")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n > count) throw ConfigError("checkpoint entry exceeds value block");
    std::vector<double> values(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                               flat.begin() + static_cast<std::ptrdiff_t>(offset + n));
    set.add(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  return set;
}

}  // namespace siamese
