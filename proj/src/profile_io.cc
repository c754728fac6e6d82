#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "siamese/analysis.h"
#include "siamese/errors.h"

namespace siamese {
namespace {

constexpr std::string_view kProfileHeader = "layer,magnitude_x,magnitude_y,grad_norm,ratio_x,ratio_y";

// Shortest representation that parses back to the same double.
std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_optional(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

double parse_double(std::string_view field, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    throw ConfigError("profile CSV line " + std::to_string(line) + ": bad number '" +
                      std::string(field) + "'");
  }
  return v;
}

std::optional<double> parse_optional(std::string_view field, std::size_t line) {
  if (field.empty()) return std::nullopt;
  return parse_double(field, line);
}

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

void write_profile_csv(std::ostream& out, const std::vector<ProfileRow>& rows) {
  out << kProfileHeader << '\n';
  for (const auto& r : rows) {
    out << r.layer << ',' << format_double(r.magnitude_x) << ','
        << format_optional(r.magnitude_y) << ',' << format_optional(r.grad_norm) << ','
        << format_optional(r.ratio_x) << ',' << format_optional(r.ratio_y) << '\n';
  }
}

std::vector<ProfileRow> parse_profile_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kProfileHeader) {
    throw ConfigError("profile CSV lacks the expected header");
  }
  std::vector<ProfileRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 6) {
      throw ConfigError("profile CSV line " + std::to_string(line_no) + ": expected 6 fields");
    }
    ProfileRow r;
    std::size_t layer = 0;
    const auto res =
        std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), layer);
    if (res.ec != std::errc() || res.ptr != fields[0].data() + fields[0].size()) {
      throw ConfigError("profile CSV line " + std::to_string(line_no) + ": bad layer index");
    }
    r.layer = layer;
    r.magnitude_x = parse_double(fields[1], line_no);
    r.magnitude_y = parse_optional(fields[2], line_no);
    r.grad_norm = parse_optional(fields[3], line_no);
    r.ratio_x = parse_optional(fields[4], line_no);
    r.ratio_y = parse_optional(fields[5], line_no);
    rows.push_back(r);
  }
  return rows;
}

void write_jacobian_json(std::ostream& out, const ModelConfig& config,
                         const std::vector<JacobianRecord>& records) {
  nlohmann::json doc;
  doc["kind"] = std::string(to_string(config.topology));
  doc["d"] = config.d_model;
  doc["seed"] = config.seed;
  doc["depth_scaling"] = config.depth_scaling;
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& r : records) {
    subs.push_back({{"sublayer", r.sublayer},
                    {"max_abs_diff", r.max_abs_diff},
                    {"assembled", matrix_json(r.assembled)},
                    {"bruteforce", matrix_json(r.bruteforce)}});
  }
  doc["sublayers"] = std::move(subs);
  out << doc.dump(2) << '\n';
}

}  // namespace siamese
