#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "siamese/config.h"
#include "siamese/param_set.h"
#include "siamese/topology.h"

namespace siamese {

using Matrix = Eigen::MatrixXd;

/// Per-sub-layer transition Jacobian d[X', Y'] / d[X, Y] for one token.
///
/// Two-stream topologies fill all four d x d blocks; single-stream ones only
/// fill dxx and leave the others empty.
struct BlockJacobian {
  std::size_t layer_index = 0;
  bool two_stream = false;
  Matrix dxx, dxy, dyx, dyy;

  // [[dxx, dxy], [dyx, dyy]], or dxx alone for a single stream.
  Matrix assembled() const;
};

/// Chain-rule assembly of the sub-layer Jacobian from the Jacobians of its
/// parts (stream norms and the residual transformation), each obtained by
/// reverse-mode differentiation. `state` must hold a single token
/// ([1, 1, d]); multi-token input raises ContractError.
BlockJacobian block_jacobian_assembled(const ModelConfig& config, const ParamSet& params,
                                       const StreamState& state, std::size_t sublayer);

// Central-difference Jacobian of the whole layer_forward map, column by
// column. Throws DivergenceError if the layer produces non-finite values.
Matrix jacobian_bruteforce(const ModelConfig& config, const ParamSet& params,
                           const StreamState& state, std::size_t sublayer, double h = 1e-6);

// Central-difference Jacobian of an arbitrary vector map.
Matrix jacobian_bruteforce(const std::function<std::vector<double>(std::span<const double>)>& f,
                           std::span<const double> at, double h = 1e-6);

struct SpectralNorm {
  double value = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

// Largest singular value by power iteration on m^T m.
SpectralNorm spectral_norm(const Matrix& m, std::size_t max_iters = 1000, double tol = 1e-8);

struct ProfileRow {
  std::size_t layer = 0;
  double magnitude_x = 0.0;
  std::optional<double> magnitude_y;
  std::optional<double> grad_norm;
  std::optional<double> ratio_x;
  std::optional<double> ratio_y;

  friend bool operator==(const ProfileRow&, const ProfileRow&) = default;
};

// Mean over batch and positions of the per-token l2 norm of X (and Y).
std::vector<ProfileRow> magnitude_profile(const std::vector<StreamState>& trace);

struct GradNormProfile {
  std::vector<double> sublayer;  // all parameters under layer.<l>.attn/mlp
  double embedding = 0.0;
  double unembedding = 0.0;
  double final_norm = 0.0;
  double global = 0.0;
};

GradNormProfile grad_norm_profile(const ParamSet& params, const ModelConfig& config);

struct ContributionRatio {
  double ratio_x = 0.5;
  double ratio_y = 0.5;
};

// m_x / (m_x + m_y) and its complement; (0.5, 0.5) when both are zero.
ContributionRatio contribution_ratio(double m_x, double m_y);

/// Relative input contribution of the two Siamese streams per sub-layer.
///
/// The X side uses mean |gamma| at SiamesePractical attention inputs and
/// otherwise the mean |scale| of the norm that last wrote the X stream; the Y
/// side uses mean |ln_y scale|. A final entry compares the last X-side scale
/// with the final norm of the output fusion.
std::vector<ContributionRatio> stream_contribution_ratios(const ModelConfig& config,
                                                          const ParamSet& params);

// Fills ratio and grad columns of `rows` (one row per trace entry).
void attach_ratios(std::vector<ProfileRow>& rows, const std::vector<ContributionRatio>& ratios);
void attach_grad_norms(std::vector<ProfileRow>& rows, const GradNormProfile& grads);

struct LensMatch {
  double match_x = 0.0;
  double match_y = 0.0;
  double divergent_align_x = 0.0;
  double divergent_align_y = 0.0;
  std::size_t positions = 0;
  std::size_t divergent_positions = 0;
};

/// Logit-lens agreement between each stream and the model output.
///
/// Both final stream states pass through the same parameter-free RMSNorm and
/// the unembedding; their per-position argmax is compared with the argmax of
/// `fused_logits`. Positions whose target equals kIgnoreTarget are skipped
/// when `targets` is non-empty.
LensMatch logit_lens_match(const Tensor& x_final, const Tensor& y_final,
                           const Tensor& fused_logits, const Tensor& unembed, double eps,
                           std::span<const int> targets = {});

// CSV: layer,magnitude_x,magnitude_y,grad_norm,ratio_x,ratio_y with empty
// fields for absent values.
void write_profile_csv(std::ostream& out, const std::vector<ProfileRow>& rows);
std::vector<ProfileRow> parse_profile_csv(std::istream& in);

struct JacobianRecord {
  std::size_t sublayer = 0;
  Matrix assembled;
  Matrix bruteforce;
  double max_abs_diff = 0.0;
};

// JSON document {"kind", "d", "seed", "depth_scaling", "sublayers": [...]}
// with matrices as nested row arrays.
void write_jacobian_json(std::ostream& out, const ModelConfig& config,
                         const std::vector<JacobianRecord>& records);

}  // namespace siamese
