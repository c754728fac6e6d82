#include "siamese/training.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>

#include "json_fields.h"
#include "siamese/blocks.h"
#include "siamese/errors.h"
#include "siamese/topology.h"

namespace siamese {
namespace {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

nlohmann::json dataset_json(const DatasetSpec& spec) {
  return std::visit(
      [](const auto& s) -> nlohmann::json {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, ModularAddSpec>) {
          return {{"kind", "ModularAdd"},
                  {"p", s.p},
                  {"n_examples", s.n_examples},
                  {"train_fraction", s.train_fraction}};
        } else if constexpr (std::is_same_v<S, CopySpec>) {
          return {{"kind", "Copy"},
                  {"alphabet", s.alphabet},
                  {"length", s.length},
                  {"n_examples", s.n_examples},
                  {"train_fraction", s.train_fraction}};
        } else {
          return {{"kind", "TextFile"}, {"path", s.path}, {"train_fraction", s.train_fraction}};
        }
      },
      spec);
}

DatasetSpec parse_dataset(const nlohmann::json& j) {
  using json_fields::read;
  const std::string sec = "dataset";
  if (!j.is_object() || !j.contains("kind") || !j.at("kind").is_string()) {
    throw ConfigError("dataset needs a string 'kind'");
  }
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "ModularAdd") {
    json_fields::reject_unknown(j, {"kind", "p", "n_examples", "train_fraction"}, sec);
    ModularAddSpec s;
    read(j, "p", s.p, sec);
    read(j, "n_examples", s.n_examples, sec);
    read(j, "train_fraction", s.train_fraction, sec);
    return s;
  }
  if (kind == "Copy") {
    json_fields::reject_unknown(j, {"kind", "alphabet", "length", "n_examples", "train_fraction"},
                                sec);
    CopySpec s;
    read(j, "alphabet", s.alphabet, sec);
    read(j, "length", s.length, sec);
    read(j, "n_examples", s.n_examples, sec);
    read(j, "train_fraction", s.train_fraction, sec);
    return s;
  }
  if (kind == "TextFile") {
    json_fields::reject_unknown(j, {"kind", "path", "train_fraction"}, sec);
    TextFileSpec s;
    read(j, "path", s.path, sec);
    read(j, "train_fraction", s.train_fraction, sec);
    if (s.path.empty()) throw ConfigError("TextFile dataset needs a path");
    return s;
  }
  throw ConfigError("unknown dataset kind '" + kind + "'");
}

double median(std::vector<double> values) {
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
  std::nth_element(values.begin(), mid, values.end());
  if (values.size() % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(values.begin(), mid);
  return 0.5 * (lower + upper);
}

}  // namespace

void TrainConfig::validate() const {
  // A zero peak rate is allowed as a frozen-model control.
  if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) {
    throw ConfigError("peak_lr must be finite and non-negative");
  }
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
  if (warmup_steps >= total_steps) {
    throw ConfigError("warmup_steps (" + std::to_string(warmup_steps) +
                      ") must be below total_steps (" + std::to_string(total_steps) + ")");
  }
  if (!(final_lr_factor >= 0.0 && final_lr_factor <= 1.0)) {
    throw ConfigError("final_lr_factor must lie in [0, 1]");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(spike_factor > 1.0)) throw ConfigError("spike_factor must exceed 1");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (!(divergence_factor > 1.0)) throw ConfigError("divergence_factor must exceed 1");
  if (divergence_patience == 0) throw ConfigError("divergence_patience must be positive");
  if (spike_window == 0) throw ConfigError("spike_window must be positive");
  if (!(spike_floor >= 0.0)) throw ConfigError("spike_floor must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"peak_lr", c.peak_lr},
      {"warmup_steps", c.warmup_steps},
      {"total_steps", c.total_steps},
      {"final_lr_factor", c.final_lr_factor},
      {"batch_size", c.batch_size},
      {"weight_decay", c.weight_decay},
      {"betas", {c.beta1, c.beta2}},
      {"adam_eps", c.adam_eps},
      {"clip_norm", c.clip_norm},
      {"spike_factor", c.spike_factor},
      {"dataset", dataset_json(c.dataset)},
      {"eval_every", c.eval_every},
      {"seed", c.seed},
      {"decay_all", c.decay_all},
      {"divergence_factor", c.divergence_factor},
      {"divergence_patience", c.divergence_patience},
      {"spike_window", c.spike_window},
      {"spike_floor", c.spike_floor},
  };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  using json_fields::read;
  const std::string s = "train";
  json_fields::reject_unknown(
      j,
      {"peak_lr", "warmup_steps", "total_steps", "final_lr_factor", "batch_size", "weight_decay",
       "betas", "adam_eps", "clip_norm", "spike_factor", "dataset", "eval_every", "seed",
       "decay_all", "divergence_factor", "divergence_patience", "spike_window", "spike_floor"},
      s);
  read(j, "peak_lr", c.peak_lr, s);
  read(j, "warmup_steps", c.warmup_steps, s);
  read(j, "total_steps", c.total_steps, s);
  read(j, "final_lr_factor", c.final_lr_factor, s);
  read(j, "batch_size", c.batch_size, s);
  read(j, "weight_decay", c.weight_decay, s);
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
      throw ConfigError("train.betas must be a two-number array");
    }
    c.beta1 = b[0].get<double>();
    c.beta2 = b[1].get<double>();
  }
  read(j, "adam_eps", c.adam_eps, s);
  read(j, "clip_norm", c.clip_norm, s);
  read(j, "spike_factor", c.spike_factor, s);
  if (j.contains("dataset")) c.dataset = parse_dataset(j.at("dataset"));
  read(j, "eval_every", c.eval_every, s);
  read(j, "seed", c.seed, s);
  read(j, "decay_all", c.decay_all, s);
  read(j, "divergence_factor", c.divergence_factor, s);
  read(j, "divergence_patience", c.divergence_patience, s);
  read(j, "spike_window", c.spike_window, s);
  read(j, "spike_floor", c.spike_floor, s);
}

double cosine_lr(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw ContractError("step " + std::to_string(step) + " beyond total_steps");
  }
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  const double f = cfg.final_lr_factor;
  return cfg.peak_lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

double global_grad_norm(const ParamSet& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad.data()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_global_norm(std::span<double> grads, double max_norm) {
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (double& g : grads) g *= factor;
  return factor;
}

double clip_global_norm(ParamSet& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (auto& p : params) {
    for (double& g : p.grad.data()) g *= factor;
  }
  return factor;
}

bool decay_exempt(const std::string& name) {
  return name.ends_with(".scale") || name.ends_with(".gamma") || name.starts_with("embed.") ||
         name == "unembed";
}

void adamw_step(ParamSet& params, AdamState& state, const AdamHyper& h, std::size_t step) {
  if (step == 0) throw ContractError("adamw_step counts steps from 1");
  for (const auto& p : params) {
    if (p.grad.numel() != p.value.numel()) {
      throw ContractError("parameter '" + p.name + "' has no gradient buffer");
    }
    if (!p.grad.all_finite()) {
      throw DivergenceError("non-finite gradient in '" + p.name + "'", step);
    }
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros_like(p.value));
      state.v.push_back(Tensor::zeros_like(p.value));
    }
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  std::size_t k = 0;
  for (auto& p : params) {
    const bool decay = h.decay_all || !decay_exempt(p.name);
    const double shrink = decay ? 1.0 - h.lr * h.weight_decay : 1.0;
    auto theta = p.value.data();
    auto g = p.grad.data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] *= shrink;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      theta[i] -= h.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + h.eps);
    }
    ++k;
  }
}

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::kConverged:
      return "Converged";
    case RunStatus::kDiverged:
      return "Diverged";
    case RunStatus::kSpikeDetected:
      return "SpikeDetected";
  }
  return "Unknown";
}

EvalResult evaluate(const ModelConfig& model, const ParamSet& params,
                    std::span<const Example> examples, std::size_t batch_size) {
  if (examples.empty()) throw ContractError("evaluation needs at least one example");
  double total_loss = 0.0;
  std::size_t counted = 0, correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - start);
    const Batch batch = make_batch(examples.subspan(start, n));
    const ForwardResult fwd = model_forward(model, params, batch.inputs);
    if (fwd.divergence) return {std::numeric_limits<double>::infinity(), 0.0};
    const std::size_t V = fwd.logits.last_dim();
    for (std::size_t r = 0; r < batch.targets.size(); ++r) {
      const int target = batch.targets[r];
      if (target == kIgnoreTarget) continue;
      const auto row = fwd.logits.row(r);
      const auto best = std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - *best);
      total_loss += std::log(z) + *best - row[static_cast<std::size_t>(target)];
      correct += static_cast<std::size_t>(best - row.begin()) == static_cast<std::size_t>(target);
      ++counted;
    }
  }
  if (counted == 0) throw ContractError("evaluation set has no scored positions");
  return {total_loss / static_cast<double>(counted),
          static_cast<double>(correct) / static_cast<double>(counted)};
}

RunOutcome train(const ModelConfig& model, const TrainConfig& cfg) {
  model.validate();
  cfg.validate();
  return train(model, cfg, make_dataset(cfg.dataset, model, cfg.seed));
}

RunOutcome train(const ModelConfig& model, const TrainConfig& cfg, const Dataset& data) {
  model.validate();
  cfg.validate();
  if (data.vocab > model.vocab_size) {
    throw ConfigError("dataset vocabulary " + std::to_string(data.vocab) +
                      " exceeds model vocab_size " + std::to_string(model.vocab_size));
  }
  if (data.train.empty() || data.eval.empty()) {
    throw ConfigError("dataset needs non-empty train and eval splits");
  }

  RunOutcome out;
  out.params = init_params(model);
  ParamSet& params = out.params;
  AdamState adam;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
  std::deque<double> window;
  std::size_t above = 0;
  std::vector<Example> batch_examples(cfg.batch_size);
  const AdamHyper base{0.0, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay, cfg.decay_all};

  auto diverge = [&](std::size_t step) {
    out.status = RunStatus::kDiverged;
    out.diverged_step = step;
  };

  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    for (auto& ex : batch_examples) ex = data.train[pick(rng)];
    const Batch batch = make_batch(batch_examples);

    params.zero_grad();
    Tape tape;
    const BoundModel bound = bind_model(tape, params, model);
    const ForwardPass pass = model_forward(model, bound, batch.inputs);
    if (pass.divergence || !pass.logits) {
      diverge(step);
      break;
    }
    const Var loss = cross_entropy_logits(*pass.logits, batch.targets);
    const double loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) {
      diverge(step);
      break;
    }
    if (step == 1) out.initial_loss = loss_value;
    out.final_loss = loss_value;
    out.step_losses.push_back(loss_value);
    tape.backward(loss);

    const double grad_norm = global_grad_norm(params);
    if (!std::isfinite(grad_norm)) {
      diverge(step);
      break;
    }

    if (window.size() >= std::min<std::size_t>(10, cfg.spike_window)) {
      const double med = median(std::vector<double>(window.begin(), window.end()));
      if (loss_value > cfg.spike_factor * std::max(med, cfg.spike_floor * out.initial_loss)) {
        out.spike_steps.push_back(step);
      }
    }
    window.push_back(loss_value);
    if (window.size() > cfg.spike_window) window.pop_front();

    const bool record = step == 1 || step % cfg.eval_every == 0 || step == cfg.total_steps;
    std::optional<MetricsRecord> rec;
    if (record) {
      rec.emplace();
      rec->step = step;
      rec->loss = loss_value;
      rec->grad_norm = grad_norm;
      rec->grads = grad_norm_profile(params, model);
      rec->profile = magnitude_profile(pass.trace());
      attach_grad_norms(rec->profile, rec->grads);
      if (is_siamese(model.topology)) {
        attach_ratios(rec->profile, stream_contribution_ratios(model, params));
      }
      const EvalResult ev = evaluate(model, params, data.eval);
      rec->eval_loss = ev.loss;
      rec->eval_acc = ev.accuracy;
    }

    const double clip = clip_global_norm(params, cfg.clip_norm);
    AdamHyper hyper = base;
    hyper.lr = cosine_lr(step, cfg);
    try {
      adamw_step(params, adam, hyper, step);
    } catch (const DivergenceError&) {
      diverge(step);
      break;
    }

    if (rec) {
      rec->lr = hyper.lr;
      rec->clip_factor = clip;
      out.metrics.push_back(std::move(*rec));
      above = loss_value > cfg.divergence_factor * out.initial_loss ? above + 1 : 0;
      if (above >= cfg.divergence_patience) {
        diverge(step);
        break;
      }
    }
  }

  if (out.status == RunStatus::kDiverged) {
    if (!out.metrics.empty()) {
      out.final_eval_loss = out.metrics.back().eval_loss;
      out.final_eval_acc = out.metrics.back().eval_acc;
    }
    return out;
  }
  const EvalResult final_eval = evaluate(model, params, data.eval);
  out.final_eval_loss = final_eval.loss;
  out.final_eval_acc = final_eval.accuracy;
  if (!std::isfinite(final_eval.loss)) {
    diverge(cfg.total_steps);
    return out;
  }
  if (!out.spike_steps.empty()) out.status = RunStatus::kSpikeDetected;
  return out;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records) {
  out << "step,loss,lr,grad_norm,clip_factor,eval_acc\n";
  for (const auto& r : records) {
    out << r.step << ',' << format_double(r.loss) << ',' << format_double(r.lr) << ','
        << format_double(r.grad_norm) << ',' << format_double(r.clip_factor) << ','
        << format_double(r.eval_acc) << '\n';
  }
}

void write_losses_csv(std::ostream& out, const std::vector<double>& losses) {
  out << "step,loss\n";
  for (std::size_t k = 0; k < losses.size(); ++k) {
    out << k + 1 << ',' << format_double(losses[k]) << '\n';
  }
}

}  // namespace siamese
