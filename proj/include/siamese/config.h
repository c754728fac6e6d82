#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

namespace siamese {

enum class TopologyKind {
  kPreNorm,
  kPostNorm,
  kDeepNorm,
  kResiDual,
  kHybridNorm,
  kSiameseCanonical,
  kSiamesePractical,
};

inline constexpr std::array<TopologyKind, 7> kAllTopologies = {
    TopologyKind::kPreNorm,          TopologyKind::kPostNorm,
    TopologyKind::kDeepNorm,         TopologyKind::kResiDual,
    TopologyKind::kHybridNorm,       TopologyKind::kSiameseCanonical,
    TopologyKind::kSiamesePractical,
};

std::string_view to_string(TopologyKind kind);
TopologyKind parse_topology(std::string_view name);

// Y stream present: ResiDual and both Siamese variants.
bool is_two_stream(TopologyKind kind);
bool is_siamese(TopologyKind kind);

struct ModelConfig {
  std::size_t n_layers = 8;  // each layer = attention + MLP sub-layer
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 32;
  std::size_t seq_len = 32;
  TopologyKind topology = TopologyKind::kPreNorm;
  bool embed_norm = false;
  bool fused_input_norm = false;
  bool depth_scaling = false;
  bool qk_norm = false;
  double norm_eps = 1e-5;
  std::uint64_t seed = 0;

  std::size_t n_sublayers() const { return 2 * n_layers; }
  std::size_t ffn_hidden() const { return ffn_mult * d_model; }
  std::size_t head_dim() const { return d_model / n_heads; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
};

// Strict JSON mapping: unknown keys raise ConfigError.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace siamese
