#include "siamese/experiment.h"

#include <atomic>
#include <charconv>
#include <cmath>
#include <chrono>
#include <ctime>
#include <fstream>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "json_fields.h"
#include "siamese/analysis.h"
#include "siamese/blocks.h"
#include "siamese/errors.h"
#include "siamese/grad_check.h"
#include "siamese/topology.h"

#ifndef SIAMESE_GIT_DESCRIBE
#define SIAMESE_GIT_DESCRIBE "unknown"
#endif

namespace siamese {
namespace fs = std::filesystem;
namespace {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

template <typename Fn>
int guarded(std::ostream& log, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitError;
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

ExperimentConfig load_with_overrides(const fs::path& path, const Overrides& o) {
  ExperimentConfig exp = load_experiment(path);
  apply_overrides(exp, o);
  return exp;
}

// Loads a checkpoint and checks it has exactly the parameters the config
// would create.
ParamSet load_checkpoint(const fs::path& path, const ModelConfig& model) {
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path.string() + "' not found");
  ParamSet loaded = ParamSet::load(path);
  const ParamSet expected = init_params(model);
  if (loaded.size() != expected.size()) {
    throw ConfigError("checkpoint has " + std::to_string(loaded.size()) +
                      " parameters, config expects " + std::to_string(expected.size()));
  }
  for (const auto& p : expected) {
    const Parameter* q = loaded.find(p.name);
    if (q == nullptr) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
    if (q->value.shape() != p.value.shape()) {
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " +
                        shape_string(q->value.shape()) + ", expected " +
                        shape_string(p.value.shape()));
    }
  }
  return loaded;
}

std::string profile_csv_text(const std::vector<ProfileRow>& rows) {
  std::ostringstream ss;
  write_profile_csv(ss, rows);
  return ss.str();
}

RunOutcome run_and_write(const ExperimentConfig& exp, const fs::path& dir) {
  fs::create_directories(dir);
  RunOutcome outcome = train(exp.model, exp.train);

  std::ostringstream metrics;
  write_metrics_csv(metrics, outcome.metrics);
  write_file(dir / "metrics.csv", metrics.str());
  std::ostringstream losses;
  write_losses_csv(losses, outcome.step_losses);
  write_file(dir / "losses.csv", losses.str());
  write_file(dir / "profile.csv", profile_csv_text(outcome.metrics.empty()
                                                       ? std::vector<ProfileRow>{}
                                                       : outcome.metrics.back().profile));
  outcome.params.save(dir / "checkpoint.bin");

  nlohmann::json manifest;
  manifest["format"] = "siamese-run";
  manifest["config"] = exp;
  manifest["status"] = std::string(to_string(outcome.status));
  manifest["diverged_step"] =
      outcome.diverged_step ? nlohmann::json(*outcome.diverged_step) : nlohmann::json(nullptr);
  manifest["spike_steps"] = outcome.spike_steps;
  manifest["initial_loss"] = outcome.initial_loss;
  manifest["final_loss"] = outcome.final_loss;
  manifest["final_eval_loss"] = outcome.final_eval_loss;
  manifest["final_eval_acc"] = outcome.final_eval_acc;
  manifest["git_describe"] = SIAMESE_GIT_DESCRIBE;
  manifest["created"] = utc_timestamp();
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return outcome;
}

// Parameters with norm scales and mixing vectors moved away from one, so
// the checked gradients do not rely on unit scales.
ParamSet gradcheck_params(const ModelConfig& c, std::mt19937_64& rng) {
  ParamSet params = init_params(c);
  std::uniform_real_distribution<double> jitter(0.5, 1.5);
  for (auto& p : params) {
    if (p.name.ends_with(".scale") || p.name.ends_with(".gamma")) {
      for (double& v : p.value.data()) v = jitter(rng);
    }
  }
  return params;
}

double model_loss(const ModelConfig& c, const ParamSet& params, const TokenGrid& tokens,
                  std::span<const int> targets) {
  Tape tape;
  const BoundModel bound = bind_model(tape, params, c);
  const ForwardPass pass = model_forward(c, bound, tokens);
  if (!pass.logits) return std::numeric_limits<double>::quiet_NaN();
  return cross_entropy_logits(*pass.logits, targets).value().item();
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"model", c.model}, {"train", c.train}, {"output_dir", c.output_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  json_fields::reject_unknown(j, {"model", "train", "output_dir"}, "config");
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("train")) from_json(j.at("train"), c.train);
  json_fields::read(j, "output_dir", c.output_dir, "config");
}

ExperimentConfig parse_experiment(const std::string& text, const std::string& source) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, column = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t k = 0; k < end; ++k) {
      if (text[k] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(column) +
                      ": malformed JSON: " + e.what());
  }
  ExperimentConfig exp;
  from_json(doc, exp);
  exp.model.validate();
  exp.train.validate();
  if (exp.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  return exp;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment(ss.str(), path.string());
}

void apply_overrides(ExperimentConfig& c, const Overrides& o) {
  if (o.out) c.output_dir = *o.out;
  if (o.seed) {
    c.model.seed = *o.seed;
    c.train.seed = *o.seed;
  }
}

int exit_code(RunStatus status) {
  switch (status) {
    case RunStatus::kConverged:
      return kExitOk;
    case RunStatus::kDiverged:
      return kExitDiverged;
    case RunStatus::kSpikeDetected:
      return kExitSpike;
  }
  return kExitError;
}

int cmd_train(const fs::path& config, const Overrides& o, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig exp = load_with_overrides(config, o);
    const RunOutcome outcome = run_and_write(exp, exp.output_dir);
    log << to_string(exp.model.topology) << " lr=" << exp.train.peak_lr << ": "
        << to_string(outcome.status) << ", final loss " << outcome.final_loss << ", eval acc "
        << outcome.final_eval_acc << '\n';
    return exit_code(outcome.status);
  });
}

void write_comparison_csv(std::ostream& out, const std::vector<CompareRow>& rows) {
  out << "topology,lr,status,final_loss,eval_acc\n";
  for (const auto& r : rows) {
    out << r.topology << ',' << format_double(r.lr) << ',' << to_string(r.status) << ','
        << format_double(r.final_loss) << ',' << format_double(r.eval_acc) << '\n';
  }
}

int cmd_compare(const std::vector<fs::path>& configs, const Overrides& o, std::size_t jobs,
                std::ostream& log) {
  return guarded(log, [&] {
    if (configs.empty()) {
      log << "usage: compare needs at least one --config\n";
      return kExitError;
    }
    std::vector<ExperimentConfig> exps;
    for (const auto& path : configs) exps.push_back(load_with_overrides(path, o));
    const fs::path root = o.out ? fs::path(*o.out) : fs::path(exps.front().output_dir);

    std::vector<CompareRow> rows(exps.size());
    std::vector<std::string> errors(exps.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
      for (std::size_t k = next++; k < exps.size(); k = next++) {
        const auto& exp = exps[k];
        const fs::path dir =
            root / ("run_" + std::to_string(k) + "_" + std::string(to_string(exp.model.topology)));
        try {
          const RunOutcome outcome = run_and_write(exp, dir);
          rows[k] = {std::string(to_string(exp.model.topology)), exp.train.peak_lr,
                     outcome.status, outcome.final_loss, outcome.final_eval_acc};
          std::lock_guard lock(log_mutex);
          log << dir.string() << ": " << to_string(outcome.status) << '\n';
        } catch (const std::exception& e) {
          errors[k] = e.what();
        }
      }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, exps.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (std::size_t k = 0; k < errors.size(); ++k) {
      if (!errors[k].empty()) throw ConfigError(configs[k].string() + ": " + errors[k]);
    }

    fs::create_directories(root);
    std::ostringstream csv;
    write_comparison_csv(csv, rows);
    write_file(root / "comparison.csv", csv.str());
    return kExitOk;
  });
}

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opts) {
  std::vector<GradCheckResult> results;
  TapeOptions tape_options;
  if (opts.corrupt) tape_options.rms_norm_grad_fault = 1e-2;
  for (TopologyKind kind : kAllTopologies) {
    GradCheckResult result{kind, 0.0};
    for (std::size_t s = 0; s < opts.seeds; ++s) {
      ModelConfig c;
      c.n_layers = opts.n_layers;
      c.d_model = opts.d_model;
      c.n_heads = opts.d_model % 2 == 0 ? 2 : 1;
      c.ffn_mult = 2;
      c.vocab_size = 7;
      c.seq_len = opts.seq_len;
      c.topology = kind;
      c.seed = s;
      c.fused_input_norm = s % 2 == 1;
      c.depth_scaling = s % 2 == 1;
      c.qk_norm = s % 3 == 0;
      c.embed_norm = s % 4 == 1;

      std::mt19937_64 rng(1000 + s);
      ParamSet params = gradcheck_params(c, rng);
      std::uniform_int_distribution<int> token(0, static_cast<int>(c.vocab_size) - 1);
      TokenGrid tokens{2, opts.seq_len, {}};
      std::vector<int> targets;
      for (std::size_t k = 0; k < tokens.batch * tokens.time; ++k) {
        tokens.ids.push_back(token(rng));
        targets.push_back(k == 1 ? kIgnoreTarget : token(rng));
      }

      Tape tape(tape_options);
      params.zero_grad();
      const BoundModel bound = bind_model(tape, params, c);
      const ForwardPass pass = model_forward(c, bound, tokens);
      if (!pass.logits) throw DivergenceError("gradient check forward diverged");
      tape.backward(cross_entropy_logits(*pass.logits, targets));
      const std::vector<double> analytic = params.flat_grads();
      const std::vector<double> point = params.flat_values();

      ParamSet probe = params;
      const ScalarObjective f = [&](std::span<const double> flat) {
        probe.assign_flat_values(flat);
        return model_loss(c, probe, tokens, targets);
      };
      const GradCheckReport report = finite_diff_check(f, point, analytic);
      result.max_rel_error = std::max(result.max_rel_error, report.max_rel_error);
    }
    results.push_back(result);
  }
  return results;
}

int cmd_gradcheck(const GradCheckOptions& opts, std::ostream& log) {
  return guarded(log, [&] {
    bool ok = true;
    for (const auto& r : run_gradcheck(opts)) {
      const bool pass = r.max_rel_error <= opts.tolerance;
      ok = ok && pass;
      log << to_string(r.kind) << " max_rel_error=" << r.max_rel_error
          << (pass ? " ok" : " FAIL") << '\n';
    }
    return ok ? kExitOk : kExitError;
  });
}

int cmd_jacobian(const fs::path& config, const Overrides& o, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig exp = load_with_overrides(config, o);
    const ModelConfig& c = exp.model;
    if (c.d_model > 16) throw ContractError("Jacobian verification supports d_model <= 16");
    const ParamSet params = init_params(c);
    const TokenGrid token{1, 1, {static_cast<int>(c.seed % c.vocab_size)}};
    const ForwardResult fwd = model_forward(c, params, token);
    if (fwd.divergence) throw DivergenceError("forward pass diverged");

    std::vector<JacobianRecord> records;
    double worst = 0.0;
    for (std::size_t i = 0; i < c.n_sublayers(); ++i) {
      JacobianRecord rec;
      rec.sublayer = i;
      rec.assembled = block_jacobian_assembled(c, params, fwd.trace[i], i).assembled();
      rec.bruteforce = jacobian_bruteforce(c, params, fwd.trace[i], i);
      rec.max_abs_diff = (rec.assembled - rec.bruteforce).cwiseAbs().maxCoeff();
      worst = std::max(worst, rec.max_abs_diff);
      log << "sub-layer " << i << " max_abs_diff=" << rec.max_abs_diff << '\n';
      records.push_back(std::move(rec));
    }
    fs::create_directories(exp.output_dir);
    std::ostringstream json;
    write_jacobian_json(json, c, records);
    write_file(fs::path(exp.output_dir) / "jacobian.json", json.str());
    return worst <= 1e-6 ? kExitOk : kExitError;
  });
}

int cmd_profile(const fs::path& checkpoint, const fs::path& config, const Overrides& o,
                std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig exp = load_with_overrides(config, o);
    const ModelConfig& c = exp.model;
    ParamSet params = load_checkpoint(checkpoint, c);
    const Dataset data = make_dataset(exp.train.dataset, c, exp.train.seed);
    const std::size_t n = std::min(exp.train.batch_size, data.train.size());
    const Batch batch = make_batch(std::span(data.train).first(n));

    params.zero_grad();
    Tape tape;
    const BoundModel bound = bind_model(tape, params, c);
    const ForwardPass pass = model_forward(c, bound, batch.inputs);
    std::vector<ProfileRow> rows = magnitude_profile(pass.trace());
    if (pass.logits && !pass.divergence) {
      tape.backward(cross_entropy_logits(*pass.logits, batch.targets));
      attach_grad_norms(rows, grad_norm_profile(params, c));
    }
    if (is_siamese(c.topology)) attach_ratios(rows, stream_contribution_ratios(c, params));
    fs::create_directories(exp.output_dir);
    write_file(fs::path(exp.output_dir) / "profile.csv", profile_csv_text(rows));
    log << "wrote " << (fs::path(exp.output_dir) / "profile.csv").string() << '\n';
    return pass.divergence ? kExitDiverged : kExitOk;
  });
}

int cmd_lens(const fs::path& checkpoint, const fs::path& config, const Overrides& o,
             std::ostream& out, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig exp = load_with_overrides(config, o);
    const ModelConfig& c = exp.model;
    if (!is_two_stream(c.topology)) {
      throw ContractError("logit lens compares two streams; " +
                          std::string(to_string(c.topology)) + " has one");
    }
    const ParamSet params = load_checkpoint(checkpoint, c);
    const Dataset data = make_dataset(exp.train.dataset, c, exp.train.seed);
    const Tensor& unembed = params.at("unembed").value;

    double hit_x = 0, hit_y = 0, div_x = 0, div_y = 0;
    std::size_t positions = 0, divergent = 0;
    const std::size_t chunk = 256;
    for (std::size_t start = 0; start < data.eval.size(); start += chunk) {
      const auto examples =
          std::span(data.eval).subspan(start, std::min(chunk, data.eval.size() - start));
      const Batch batch = make_batch(examples);
      const ForwardResult fwd = model_forward(c, params, batch.inputs);
      if (fwd.divergence) throw DivergenceError("forward pass diverged");
      const StreamState& last = fwd.trace.back();
      const LensMatch m =
          logit_lens_match(last.x, *last.y, fwd.logits, unembed, c.norm_eps, batch.targets);
      const auto n = static_cast<double>(m.positions);
      const auto nd = static_cast<double>(m.divergent_positions);
      hit_x += std::round(m.match_x * n);
      hit_y += std::round(m.match_y * n);
      div_x += std::round(m.divergent_align_x * nd);
      div_y += std::round(m.divergent_align_y * nd);
      positions += m.positions;
      divergent += m.divergent_positions;
    }
    nlohmann::json summary;
    summary["topology"] = std::string(to_string(c.topology));
    summary["positions"] = positions;
    summary["match_x"] = hit_x / static_cast<double>(positions);
    summary["match_y"] = hit_y / static_cast<double>(positions);
    summary["divergent_positions"] = divergent;
    summary["divergent_align_x"] = divergent ? div_x / static_cast<double>(divergent) : 0.0;
    summary["divergent_align_y"] = divergent ? div_y / static_cast<double>(divergent) : 0.0;
    out << summary.dump(2) << '\n';
    return kExitOk;
  });
}

}  // namespace siamese
