// Command-line driver: train, compare, gradcheck, jacobian, profile, lens.

#include <CLI11.hpp>
#include <iostream>

#include "siamese/experiment.h"

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;

  siamese::Overrides overrides() const {
    siamese::Overrides o;
    if (!out.empty()) o.out = out;
    o.seed = seed;
    return o;
  }
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required = true) {
  auto* opt = cmd->add_option("--config", flags.config, "Experiment config (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--out", flags.out, "Override output_dir");
  cmd->add_option("--seed-override", flags.seed, "Override model and data seeds");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stream residual normalization lab"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  auto* train = app.add_subcommand("train", "Train one configuration");
  add_common(train, train_flags);

  std::vector<std::string> compare_configs;
  std::string compare_out;
  std::optional<std::uint64_t> compare_seed;
  std::size_t jobs = 1;
  auto* compare = app.add_subcommand("compare", "Train several configurations");
  compare->add_option("--config", compare_configs, "Experiment configs")->expected(0, -1);
  compare->add_option("--out", compare_out, "Output root");
  compare->add_option("--seed-override", compare_seed, "Override model and data seeds");
  compare->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);

  siamese::GradCheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--d", gc.d_model, "Model width")->check(CLI::PositiveNumber);
  gradcheck->add_option("--n-layers", gc.n_layers, "Transformer layers");
  gradcheck->add_option("--T", gc.seq_len, "Sequence length")->check(CLI::PositiveNumber);
  gradcheck->add_option("--seeds", gc.seeds, "Seeds per topology");
  gradcheck->add_flag("--corrupt-grad", gc.corrupt)->group("");

  CommonFlags jac_flags;
  auto* jacobian = app.add_subcommand("jacobian", "Block Jacobian verification");
  add_common(jacobian, jac_flags);

  CommonFlags profile_flags;
  std::string profile_ckpt;
  auto* profile = app.add_subcommand("profile", "Magnitude, gradient and ratio profile");
  add_common(profile, profile_flags);
  profile->add_option("--checkpoint", profile_ckpt, "Checkpoint file")->required();

  CommonFlags lens_flags;
  std::string lens_ckpt;
  auto* lens = app.add_subcommand("lens", "Logit-lens stream agreement");
  add_common(lens, lens_flags);
  lens->add_option("--checkpoint", lens_ckpt, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : siamese::kExitError;
  }

  if (*train) return siamese::cmd_train(train_flags.config, train_flags.overrides(), std::cerr);
  if (*compare) {
    siamese::Overrides o;
    if (!compare_out.empty()) o.out = compare_out;
    o.seed = compare_seed;
    std::vector<std::filesystem::path> paths(compare_configs.begin(), compare_configs.end());
    return siamese::cmd_compare(paths, o, jobs, std::cerr);
  }
  if (*gradcheck) return siamese::cmd_gradcheck(gc, std::cout);
  if (*jacobian) return siamese::cmd_jacobian(jac_flags.config, jac_flags.overrides(), std::cout);
  if (*profile) {
    return siamese::cmd_profile(profile_ckpt, profile_flags.config, profile_flags.overrides(),
                                std::cerr);
  }
  if (*lens) {
    return siamese::cmd_lens(lens_ckpt, lens_flags.config, lens_flags.overrides(), std::cout,
                             std::cerr);
  }
  return siamese::kExitError;
}
