#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "siamese/analysis.h"
#include "siamese/blocks.h"
#include "siamese/errors.h"
#include "siamese/experiment.h"

using namespace siamese;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "siamese_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json base_config(const std::string& topology, const fs::path& out) {
  return {
      {"model",
       {{"n_layers", 1},
        {"d_model", 8},
        {"n_heads", 2},
        {"ffn_mult", 2},
        {"vocab_size", 8},
        {"seq_len", 6},
        {"topology", topology}}},
      {"train",
       {{"peak_lr", 3e-3},
        {"warmup_steps", 4},
        {"total_steps", 20},
        {"batch_size", 8},
        {"eval_every", 10},
        {"dataset", {{"kind", "Copy"}, {"alphabet", 4}, {"length", 3}, {"n_examples", 120}}}}},
      {"output_dir", out.string()},
  };
}

fs::path write_config(const fs::path& dir, const std::string& name, const nlohmann::json& j) {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

int run_lab(const std::string& args) {
  const std::string cmd = std::string(SIAMESE_LAB) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("train writes every artifact and exits 0") {
  const fs::path dir = scratch("train");
  const fs::path cfg = write_config(dir, "c.json", base_config("SiamesePractical", dir / "run"));
  std::stringstream log;
  CHECK(cmd_train(cfg, {}, log) == kExitOk);
  for (const char* f : {"metrics.csv", "losses.csv", "profile.csv", "checkpoint.bin", "manifest.json"}) {
    CHECK(fs::exists(dir / "run" / f));
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "run" / "manifest.json"));
  CHECK(manifest["status"] == "Converged");
  CHECK(manifest.contains("git_describe"));
  CHECK(manifest["config"]["model"]["topology"] == "SiamesePractical");
  CHECK(slurp(dir / "run" / "metrics.csv").starts_with("step,loss,lr,grad_norm,clip_factor,eval_acc\n"));

  std::ifstream profile(dir / "run" / "profile.csv");
  const auto rows = parse_profile_csv(profile);
  CHECK(rows.size() == 3);
  CHECK(rows.front().ratio_x.has_value());

  const ParamSet ckpt = ParamSet::load(dir / "run" / "checkpoint.bin");
  CHECK(ckpt.contains("layer.0.attn.gamma"));
}

TEST_CASE("rerunning a command reproduces its artifacts byte for byte") {
  const fs::path dir = scratch("idempotent");
  const fs::path cfg = write_config(dir, "c.json", base_config("PostNorm", dir / "run"));
  std::stringstream log;
  REQUIRE(cmd_train(cfg, {}, log) == kExitOk);
  std::map<std::string, std::string> first;
  for (const char* f : {"metrics.csv", "losses.csv", "profile.csv", "checkpoint.bin"}) first[f] = slurp(dir / "run" / f);
  auto manifest = nlohmann::json::parse(slurp(dir / "run" / "manifest.json"));
  REQUIRE(cmd_train(cfg, {}, log) == kExitOk);
  for (const auto& [f, text] : first) CHECK(slurp(dir / "run" / f) == text);
  auto again = nlohmann::json::parse(slurp(dir / "run" / "manifest.json"));
  manifest.erase("created");
  again.erase("created");
  CHECK(manifest == again);
}

TEST_CASE("config errors exit 1 with a diagnostic") {
  const fs::path dir = scratch("errors");
  std::stringstream log;
  {
    std::ofstream(dir / "bad.json") << "{\n  \"model\": {\n    \"d_model\": 8,,\n  }\n}\n";
  }
  CHECK(cmd_train(dir / "bad.json", {}, log) == kExitError);
  CHECK(log.str().find("line 3") != std::string::npos);
  CHECK(log.str().find("column") != std::string::npos);

  auto j = base_config("PreNorm", dir / "run");
  j["model"]["colour"] = "blue";
  log.str("");
  CHECK(cmd_train(write_config(dir, "unknown.json", j), {}, log) == kExitError);
  CHECK(log.str().find("colour") != std::string::npos);

  j = base_config("PreNorm", dir / "run");
  j["model"]["n_heads"] = 3;
  CHECK(cmd_train(write_config(dir, "heads.json", j), {}, log) == kExitError);
  CHECK(cmd_train(dir / "missing.json", {}, log) == kExitError);

  CHECK_THROWS_AS(parse_experiment("{\"model\": {}, \"extra\": 1}"), ConfigError);
  CHECK_NOTHROW(parse_experiment("{}"));
}

TEST_CASE("overrides replace output directory and seeds") {
  ExperimentConfig c;
  c.model.seed = 1;
  c.train.seed = 2;
  Overrides o;
  o.out = "elsewhere";
  o.seed = 9;
  apply_overrides(c, o);
  CHECK(c.output_dir == "elsewhere");
  CHECK(c.model.seed == 9);
  CHECK(c.train.seed == 9);
}

TEST_CASE("train exit codes follow the run status") {
  const fs::path dir = scratch("exit_codes");
  std::stringstream log;
  auto diverging = base_config("PreNorm", dir / "div");
  diverging["train"]["peak_lr"] = 1e300;
  diverging["train"]["clip_norm"] = 1e300;
  CHECK(cmd_train(write_config(dir, "div.json", diverging), {}, log) == kExitDiverged);

  auto spiky = base_config("PreNorm", dir / "spike");
  spiky["train"]["peak_lr"] = 0.0;
  spiky["train"]["batch_size"] = 1;
  spiky["train"]["total_steps"] = 60;
  spiky["train"]["spike_factor"] = 1.05;
  spiky["train"]["spike_floor"] = 0.0;
  CHECK(cmd_train(write_config(dir, "spike.json", spiky), {}, log) == kExitSpike);
  CHECK(exit_code(RunStatus::kConverged) == 0);
}

TEST_CASE("compare transcribes each run") {
  const fs::path dir = scratch("compare");
  std::stringstream log;
  const auto a = write_config(dir, "a.json", base_config("PreNorm", dir / "unused"));
  auto diverging = base_config("HybridNorm", dir / "unused");
  diverging["train"]["peak_lr"] = 1e300;
  diverging["train"]["clip_norm"] = 1e300;
  const auto b = write_config(dir, "b.json", diverging);

  Overrides o;
  o.out = (dir / "out1").string();
  CHECK(cmd_compare({a, a, b}, o, 1, log) == kExitOk);
  const std::string csv = slurp(dir / "out1" / "comparison.csv");
  std::stringstream lines(csv);
  std::string header, r0, r1, r2;
  std::getline(lines, header);
  std::getline(lines, r0);
  std::getline(lines, r1);
  std::getline(lines, r2);
  CHECK(header == "topology,lr,status,final_loss,eval_acc");
  CHECK(r0 == r1);
  CHECK(r0.starts_with("PreNorm,0.003,"));
  CHECK(r2.starts_with("HybridNorm,1e+300,Diverged,"));
  CHECK(fs::exists(dir / "out1" / "run_2_HybridNorm" / "metrics.csv"));

  o.out = (dir / "out2").string();
  CHECK(cmd_compare({a, a, b}, o, 3, log) == kExitOk);
  CHECK(slurp(dir / "out2" / "comparison.csv") == csv);

  CHECK(cmd_compare({}, o, 1, log) == kExitError);
}

TEST_CASE("gradcheck command") {
  std::stringstream log;
  GradCheckOptions quick;
  quick.seeds = 1;
  CHECK(cmd_gradcheck(quick, log) == kExitOk);
  for (auto kind : kAllTopologies) CHECK(log.str().find(std::string(to_string(kind))) != std::string::npos);

  GradCheckOptions corrupt = quick;
  corrupt.corrupt = true;
  CHECK(cmd_gradcheck(corrupt, log) != kExitOk);

  GradCheckOptions minimal;
  minimal.d_model = 1;
  minimal.n_layers = 1;
  minimal.seq_len = 2;
  minimal.seeds = 2;
  CHECK(cmd_gradcheck(minimal, log) == kExitOk);
}

TEST_CASE("jacobian command") {
  const fs::path dir = scratch("jacobian");
  std::stringstream log;
  for (const char* kind : {"SiameseCanonical", "SiamesePractical", "ResiDual", "HybridNorm"}) {
    auto j = base_config(kind, dir / kind);
    j["model"]["d_model"] = 4;
    j["model"]["depth_scaling"] = true;
    CHECK(cmd_jacobian(write_config(dir, std::string(kind) + ".json", j), {}, log) == kExitOk);
    const auto doc = nlohmann::json::parse(slurp(dir / kind / "jacobian.json"));
    CHECK(doc["kind"] == kind);
    CHECK(doc["d"] == 4);
    CHECK(doc["sublayers"].size() == 2);
    for (const auto& s : doc["sublayers"]) CHECK(s["max_abs_diff"].get<double>() <= 1e-6);
  }
  auto wide = base_config("SiameseCanonical", dir / "wide");
  wide["model"]["d_model"] = 32;
  CHECK(cmd_jacobian(write_config(dir, "wide.json", wide), {}, log) == kExitError);
}

TEST_CASE("profile command") {
  const fs::path dir = scratch("profile");
  std::stringstream log;
  auto post = base_config("PostNorm", dir / "post");
  post["model"]["norm_eps"] = 0.0;
  const fs::path post_cfg = write_config(dir, "post.json", post);
  const ExperimentConfig exp = load_experiment(post_cfg);
  init_params(exp.model).save(dir / "post.bin");
  CHECK(cmd_profile(dir / "post.bin", post_cfg, {}, log) == kExitOk);
  std::ifstream in(dir / "post" / "profile.csv");
  const auto rows = parse_profile_csv(in);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(std::abs(r.magnitude_x - std::sqrt(8.0)) <= 1e-9);
    CHECK_FALSE(r.magnitude_y);
    CHECK_FALSE(r.ratio_x);
    // The final state has no sub-layer parameters of its own.
    CHECK(r.grad_norm.has_value() == (r.layer + 1 < rows.size()));
  }

  CHECK(cmd_profile(dir / "missing.bin", post_cfg, {}, log) == kExitError);

  const fs::path sia_cfg = write_config(dir, "sia.json", base_config("SiameseCanonical", dir / "sia"));
  CHECK(cmd_profile(dir / "post.bin", sia_cfg, {}, log) == kExitError);
  init_params(load_experiment(sia_cfg).model).save(dir / "sia.bin");
  CHECK(cmd_profile(dir / "sia.bin", sia_cfg, {}, log) == kExitOk);
  std::ifstream sin(dir / "sia" / "profile.csv");
  for (const auto& r : parse_profile_csv(sin)) {
    CHECK(r.ratio_x.has_value());
    CHECK(r.magnitude_y.has_value());
    CHECK(std::abs(*r.ratio_x + *r.ratio_y - 1.0) <= 1e-12);
  }
}

TEST_CASE("lens command") {
  const fs::path dir = scratch("lens");
  std::stringstream log;
  const fs::path cfg = write_config(dir, "c.json", base_config("SiamesePractical", dir / "run"));
  REQUIRE(cmd_train(cfg, {}, log) == kExitOk);
  std::stringstream out;
  CHECK(cmd_lens(dir / "run" / "checkpoint.bin", cfg, {}, out, log) == kExitOk);
  const auto summary = nlohmann::json::parse(out.str());
  for (const char* k : {"match_x", "match_y", "divergent_align_x", "divergent_align_y"}) {
    CHECK(summary[k].get<double>() >= 0.0);
    CHECK(summary[k].get<double>() <= 1.0);
  }
  CHECK(summary["divergent_align_x"].get<double>() + summary["divergent_align_y"].get<double>() <= 1.0);
  CHECK(summary["positions"].get<std::size_t>() > 0);

  const fs::path pre = write_config(dir, "pre.json", base_config("PreNorm", dir / "pre"));
  CHECK(cmd_lens(dir / "run" / "checkpoint.bin", pre, {}, out, log) == kExitError);
}

TEST_CASE("the command-line driver maps failures to exit codes") {
  const fs::path dir = scratch("driver");
  CHECK(run_lab("") == 1);
  CHECK(run_lab("train") == 1);
  CHECK(run_lab("train --config " + (dir / "missing.json").string()) == 1);
  CHECK(run_lab("compare --out " + dir.string()) == 1);
  CHECK(run_lab("gradcheck --d 4 --n-layers 1 --T 2 --seeds 1") == 0);
  CHECK(run_lab("gradcheck --d 4 --n-layers 1 --T 2 --seeds 1 --corrupt-grad") != 0);
  const fs::path cfg = write_config(dir, "c.json", base_config("SiameseCanonical", dir / "run"));
  CHECK(run_lab("train --config " + cfg.string() + " --out " + (dir / "o").string() +
                " --seed-override 5") == 0);
  const auto manifest = nlohmann::json::parse(slurp(dir / "o" / "manifest.json"));
  CHECK(manifest["config"]["model"]["seed"] == 5);
  CHECK(run_lab("profile --config " + cfg.string() + " --checkpoint " +
                (dir / "o" / "checkpoint.bin").string()) == 0);
  CHECK(run_lab("lens --config " + cfg.string() + " --checkpoint " +
                (dir / "o" / "checkpoint.bin").string()) == 0);
  CHECK(run_lab("jacobian --config " + cfg.string()) == 0);
}
