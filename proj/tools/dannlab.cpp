#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dannlab/harness.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> trials;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Experiment config (key=value lines)");
  cmd->add_option("--seed", o.seed, "Base seed for trials (train.seed)");
  cmd->add_option("--out", o.out, "Output directory (output.dir)");
  cmd->add_option("--trials", o.trials, "Number of trials (train.trials)");
}

dannlab::ExperimentConfig resolve(const Overrides& o, std::optional<dannlab::ExperimentKind> kind) {
  dannlab::ExperimentConfig config =
      o.config.empty() ? dannlab::ExperimentConfig{} : dannlab::ExperimentConfig::load(o.config);
  if (kind) config.kind = *kind;
  if (o.seed) config.train.seed = *o.seed;
  if (o.out) config.out_dir = *o.out;
  if (o.trials) config.train.trials = *o.trials;
  return config;
}

std::string quoted(const std::string& text) {
  std::string out = "\"";
  for (char c : text) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adversarial regression experiments"};
  app.require_subcommand(1);

  Overrides o;
  auto* sweep = app.add_subcommand("sweep", "Shared-layer sweep on the target dev split");
  auto* compare = app.add_subcommand("compare", "target / src / dann comparison with significance tests");
  auto* visualize = app.add_subcommand("visualize", "Per-layer 2D projections of both domains");
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic task as CSV files");
  for (auto* cmd : {sweep, compare, visualize, gen}) add_common(cmd, o);

  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::filesystem::path> files;
    if (gen->parsed()) {
      files = dannlab::export_synthetic(resolve(o, std::nullopt));
    } else {
      const auto kind = sweep->parsed()       ? dannlab::ExperimentKind::Sweep
                        : compare->parsed()   ? dannlab::ExperimentKind::Compare
                                              : dannlab::ExperimentKind::Visualize;
      files = dannlab::run_experiment(resolve(o, kind));
    }
    for (const auto& f : files) std::cout << f.string() << '\n';
    return 0;
  } catch (const dannlab::Error& e) {
    std::cerr << "error: kind=" << e.kind() << " message=" << quoted(e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: kind=internal message=" << quoted(e.what()) << '\n';
    return 3;
  }
}
