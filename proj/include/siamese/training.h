#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "siamese/analysis.h"
#include "siamese/config.h"
#include "siamese/param_set.h"
#include "siamese/tape.h"

namespace siamese {

// "a b = c" with c = (a + b) mod p; tokens 0..p-1 plus '=' as token p.
struct ModularAddSpec {
  int p = 31;
  std::size_t n_examples = 0;  // 0 = all p^2 pairs
  double train_fraction = 0.8;
};

// Random string s over the alphabet, a separator token, then s again.
struct CopySpec {
  std::size_t alphabet = 8;
  std::size_t length = 8;
  std::size_t n_examples = 4096;
  double train_fraction = 0.9;
};

// Raw bytes of a file, split by position.
struct TextFileSpec {
  std::string path;
  double train_fraction = 0.9;
};

using DatasetSpec = std::variant<ModularAddSpec, CopySpec, TextFileSpec>;

struct TrainConfig {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 3000;
  double final_lr_factor = 0.1;
  std::size_t batch_size = 64;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  double spike_factor = 2.0;
  DatasetSpec dataset = ModularAddSpec{};
  std::size_t eval_every = 50;
  std::uint64_t seed = 0;
  // When false, norm scales, gamma and embeddings are exempt from decay.
  bool decay_all = true;
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 10;
  std::size_t spike_window = 100;
  // Lower bound on the spike median as a fraction of the initial loss, so
  // minibatch noise on a near-zero loss is not counted as a spike.
  double spike_floor = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One sequence: model inputs and next-token targets (kIgnoreTarget = no loss).
struct Example {
  std::vector<int> input;
  std::vector<int> target;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> eval;
  std::size_t vocab = 0;    // smallest vocabulary covering every token
  std::size_t seq_len = 0;  // input length
};

Dataset make_modular_addition_dataset(int p, std::size_t n_examples, std::uint64_t seed,
                                      std::size_t vocab_size, double train_fraction = 0.8);
Dataset make_copy_dataset(std::size_t alphabet, std::size_t length, std::size_t n_examples,
                          std::uint64_t seed, std::size_t vocab_size,
                          double train_fraction = 0.9);
Dataset make_text_dataset(const std::string& path, std::size_t seq_len, std::size_t vocab_size,
                          double train_fraction = 0.9);
Dataset make_dataset(const DatasetSpec& spec, const ModelConfig& model, std::uint64_t seed);

struct Batch {
  TokenGrid inputs;
  std::vector<int> targets;
};

Batch make_batch(std::span<const Example> examples);

// Linear warmup from 0 to peak, then cosine decay to final_lr_factor * peak.
double cosine_lr(std::size_t step, const TrainConfig& cfg);

// Scales every gradient by max_norm / g when the global norm g exceeds
// max_norm and returns the factor applied (1 otherwise).
double clip_global_norm(ParamSet& params, double max_norm);
double clip_global_norm(std::span<double> grads, double max_norm);
double global_grad_norm(const ParamSet& params);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  bool decay_all = true;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One AdamW update with decoupled weight decay: theta is first multiplied
/// by (1 - lr * wd), then moved by -lr * m_hat / (sqrt(v_hat) + eps).
/// `step` starts at 1. A non-finite gradient raises DivergenceError before
/// any parameter or moment is touched.
void adamw_step(ParamSet& params, AdamState& state, const AdamHyper& hyper, std::size_t step);

// Parameters skipped by decay when decay_all is off.
bool decay_exempt(const std::string& name);

struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double clip_factor = 1.0;
  double eval_loss = 0.0;
  double eval_acc = 0.0;
  GradNormProfile grads;
  std::vector<ProfileRow> profile;
};

enum class RunStatus { kConverged, kDiverged, kSpikeDetected };
std::string_view to_string(RunStatus status);

struct RunOutcome {
  RunStatus status = RunStatus::kConverged;
  std::optional<std::size_t> diverged_step;
  std::vector<std::size_t> spike_steps;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_eval_loss = 0.0;
  double final_eval_acc = 0.0;
  std::vector<MetricsRecord> metrics;
  std::vector<double> step_losses;  // training loss of every completed step
  ParamSet params;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const ModelConfig& model, const ParamSet& params,
                    std::span<const Example> examples, std::size_t batch_size = 256);

/// Full training loop: forward, loss, backward, clip, AdamW, schedule.
///
/// A record (metrics plus magnitude/gradient profile) is taken at step 1,
/// every eval_every steps and at the last step. Non-finite loss or gradient,
/// or a loss above divergence_factor x initial loss on divergence_patience
/// consecutive records, ends the run as Diverged. A step loss above
/// spike_factor x max(trailing spike_window median, spike_floor x initial
/// loss) marks a spike; a run with spikes that does not diverge ends as
/// SpikeDetected.
RunOutcome train(const ModelConfig& model, const TrainConfig& cfg);
RunOutcome train(const ModelConfig& model, const TrainConfig& cfg, const Dataset& data);

// step,loss,lr,grad_norm,clip_factor,eval_acc
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records);
// step,loss for every step
void write_losses_csv(std::ostream& out, const std::vector<double>& losses);

}  // namespace siamese
