#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "arccap/pipeline.hpp"
#include "arccap/selfcheck.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CommonFlags {
  std::string config_path;
  std::string annotations;
  std::string regions;
  std::string split;
  std::string out;
  int beam = 0;
  double lambda = -1.0;
  std::int64_t seed = -1;
  int threads = -1;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags, bool with_decode_flags) {
  cmd->add_option("--config", flags.config_path, "Run configuration JSON");
  cmd->add_option("--annotations", flags.annotations, "COCO captions JSON");
  cmd->add_option("--regions", flags.regions, "Regions JSON");
  cmd->add_option("--split", flags.split, "Explicit split id-list JSON");
  cmd->add_option("--out", flags.out, "Primary output path for this command");
  cmd->add_option("--seed", flags.seed, "Random seed");
  cmd->add_option("--threads", flags.threads, "Worker thread cap (0 = all cores)");
  if (with_decode_flags) {
    cmd->add_option("--beam", flags.beam, "Beam size");
    cmd->add_option("--lambda", flags.lambda, "Marginal fusion weight");
  }
}

arccap::pipeline::RunConfig resolve_config(const CommonFlags& flags,
                                           const std::string& command) {
  arccap::pipeline::RunConfig cfg;
  if (!flags.config_path.empty()) cfg = arccap::pipeline::load_config(flags.config_path);
  if (!flags.annotations.empty()) cfg.paths.annotations = flags.annotations;
  if (!flags.regions.empty()) cfg.paths.regions = flags.regions;
  if (!flags.split.empty()) cfg.paths.split = flags.split;
  if (flags.seed >= 0) cfg.seed = static_cast<std::uint64_t>(flags.seed);
  if (flags.threads >= 0) cfg.threads = flags.threads;
  if (flags.beam > 0) cfg.decode_cfg.beam_size = flags.beam;
  if (flags.lambda >= 0.0) cfg.decode_cfg.fusion_lambda = flags.lambda;
  if (!flags.out.empty()) {
    if (command == "ingest") cfg.paths.prepared = flags.out;
    else if (command == "train-captioner") cfg.paths.captioner = flags.out;
    else if (command == "train-arc") cfg.paths.arc = flags.out;
    else if (command == "decode") cfg.paths.predictions = flags.out;
    else if (command == "eval") cfg.paths.report = flags.out;
  }
  cfg.validate();
  return cfg;
}

int run_command(const std::string& command, const CommonFlags& flags) {
  using namespace arccap;
  try {
    if (command == "selfcheck") {
      bool all_ok = true;
      for (const selfcheck::SuiteResult& suite : selfcheck::run_all()) {
        std::printf("%-4s %-18s %s\n", suite.passed ? "ok" : "FAIL", suite.name.c_str(),
                    suite.detail.c_str());
        all_ok = all_ok && suite.passed;
      }
      return all_ok ? kExitOk : kExitNumeric;
    }
    pipeline::RunConfig cfg = resolve_config(flags, command);
    if (command == "ingest") {
      pipeline::run_ingest(cfg);
    } else if (command == "train-captioner") {
      pipeline::run_train_captioner(cfg);
    } else if (command == "train-arc") {
      pipeline::run_train_arc(cfg);
    } else if (command == "decode") {
      pipeline::run_decode(cfg);
    } else if (command == "eval") {
      std::string table;
      pipeline::run_eval(cfg, &table);
      std::fputs(table.c_str(), stdout);
    }
    return kExitOk;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const ConvergenceError& e) {
    std::fprintf(stderr, "convergence error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arccap: adversarial robust cut image captioning toolkit"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    bool decode_flags;
  };
  const Command commands[] = {
      {"ingest", "Validate inputs and build the prepared dataset", false},
      {"train-captioner", "Train the masked-convolution captioner", false},
      {"train-arc", "Train adversarial robust cut weights", false},
      {"decode", "Beam-search captions for a split", true},
      {"eval", "Score predictions against references", false},
      {"selfcheck", "Run the built-in oracle suites", false},
  };

  CommonFlags flags;
  for (const Command& command : commands)
    add_common_flags(app.add_subcommand(command.name, command.help), flags,
                     command.decode_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    std::fprintf(stderr, "usage: arccap COMMAND [flags]; see arccap --help\n");
    return kExitUsage;
  }

  return run_command(app.get_subcommands().at(0)->get_name(), flags);
}
