#include "siamese/config.h"

#include <set>

#include "json_fields.h"

#include "siamese/errors.h"

namespace siamese {
namespace {

struct TopologyName {
  TopologyKind kind;
  std::string_view name;
};

constexpr std::array<TopologyName, 7> kTopologyNames = {{
    {TopologyKind::kPreNorm, "PreNorm"},
    {TopologyKind::kPostNorm, "PostNorm"},
    {TopologyKind::kDeepNorm, "DeepNorm"},
    {TopologyKind::kResiDual, "ResiDual"},
    {TopologyKind::kHybridNorm, "HybridNorm"},
    {TopologyKind::kSiameseCanonical, "SiameseCanonical"},
    {TopologyKind::kSiamesePractical, "SiamesePractical"},
}};

}  // namespace

std::string_view to_string(TopologyKind kind) {
  for (const auto& entry : kTopologyNames) {
    if (entry.kind == kind) return entry.name;
  }
  return "Unknown";
}

TopologyKind parse_topology(std::string_view name) {
  for (const auto& entry : kTopologyNames) {
    if (entry.name == name) return entry.kind;
  }
  throw ConfigError("unknown topology '" + std::string(name) + "'");
}

bool is_two_stream(TopologyKind kind) {
  return kind == TopologyKind::kResiDual || is_siamese(kind);
}

bool is_siamese(TopologyKind kind) {
  return kind == TopologyKind::kSiameseCanonical ||
         kind == TopologyKind::kSiamesePractical;
}

void ModelConfig::validate() const {
  if (d_model == 0) throw ConfigError("d_model must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (ffn_mult == 0) throw ConfigError("ffn_mult must be positive");
  if (seq_len == 0) throw ConfigError("seq_len must be at least 1");
  if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
  if (!(norm_eps >= 0.0)) throw ConfigError("norm_eps must be non-negative");
  if (topology == TopologyKind::kDeepNorm && n_layers == 0) {
    throw ConfigError("DeepNorm needs n_layers >= 1 for its residual constants");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"n_layers", c.n_layers},
      {"d_model", c.d_model},
      {"n_heads", c.n_heads},
      {"ffn_mult", c.ffn_mult},
      {"vocab_size", c.vocab_size},
      {"seq_len", c.seq_len},
      {"topology", std::string(to_string(c.topology))},
      {"embed_norm", c.embed_norm},
      {"fused_input_norm", c.fused_input_norm},
      {"depth_scaling", c.depth_scaling},
      {"qk_norm", c.qk_norm},
      {"norm_eps", c.norm_eps},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  using json_fields::read;
  const std::string s = "model";
  json_fields::reject_unknown(
      j,
      {"n_layers", "d_model", "n_heads", "ffn_mult", "vocab_size", "seq_len", "topology",
       "embed_norm", "fused_input_norm", "depth_scaling", "qk_norm", "norm_eps", "seed"},
      s);
  read(j, "n_layers", c.n_layers, s);
  read(j, "d_model", c.d_model, s);
  read(j, "n_heads", c.n_heads, s);
  read(j, "ffn_mult", c.ffn_mult, s);
  read(j, "vocab_size", c.vocab_size, s);
  read(j, "seq_len", c.seq_len, s);
  std::string topology;
  read(j, "topology", topology, s);
  if (j.contains("topology")) c.topology = parse_topology(topology);
  read(j, "embed_norm", c.embed_norm, s);
  read(j, "fused_input_norm", c.fused_input_norm, s);
  read(j, "depth_scaling", c.depth_scaling, s);
  read(j, "qk_norm", c.qk_norm, s);
  read(j, "norm_eps", c.norm_eps, s);
  read(j, "seed", c.seed, s);
}

}  // namespace siamese
