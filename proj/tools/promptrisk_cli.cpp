#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "promptrisk/pipeline.hpp"

namespace pp = promptrisk::pipeline;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kInfeasible = 3, kVerification = 4 };

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> replicates;
  bool verify = false;
  bool parallel = false;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON run configuration (defaults apply to absent keys)");
  sub->add_option("--seed", f.seed, "Override the global seed");
  sub->add_option("--out", f.out, "Override the output directory");
  sub->add_flag("--verify", f.verify, "Rerun in a scratch directory and fail (exit 4) unless outputs are byte-identical");
  sub->add_flag("--parallel", f.parallel, "Use worker threads for note inference and sweep cells");
}

pp::RunConfig resolve(const Flags& f) {
  pp::RunConfig cfg = f.config.empty() ? pp::RunConfig{} : pp::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.paths.out = f.out;
  if (f.replicates) cfg.sweep.replicates = *f.replicates;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Risk prediction from synthetic clinical notes: corpus, cohort, training, evaluation and sweeps"};
  app.require_subcommand(1);
  Flags flags;
  std::string model;
  pp::Invocation inv;

  auto command = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, flags);
    sub->callback([&inv, name] { inv.command = name; });
    return sub;
  };
  command("gen-corpus", "Generate the synthetic patient corpus");
  command("build-cohort", "Apply inclusion criteria; write splits, dataset counts and the vocabulary");
  command("pretrain", "Masked-LM pretraining of the encoder and skip-gram pretraining of the word embeddings");
  auto* train = command("train", "Train one model on the balanced train split, selecting on valid");
  train->add_option("model", model, "ft | st | wem")->required()->check(CLI::IsMember({"ft", "st", "wem"}));
  auto* evaluate = command("evaluate", "Metrics on the balanced test_1 split");
  auto* imbalance = command("sweep-imbalance", "Evaluate on balanced test_2 and the imbalanced test sets");
  for (auto* sub : {evaluate, imbalance})
    sub->add_option("--model", model, "ft | st | wem | all")
        ->default_val("all")
        ->check(CLI::IsMember({"ft", "st", "wem", "all"}));
  auto* fewshot = command("sweep-fewshot", "Train and evaluate every model on each few-shot training size");
  fewshot->add_option("--replicates", flags.replicates, "Few-shot draws per size (overrides sweep.replicates)");
  command("report", "Join run manifests and test metrics into report.csv");
  auto* print = app.add_subcommand("print-config", "Print the resolved configuration as JSON");
  print->add_option("--config", flags.config, "JSON run configuration");
  print->add_option("--seed", flags.seed, "Override the global seed");
  print->add_option("--out", flags.out, "Override the output directory");
  print->callback([&inv] { inv.command = "print-config"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    const auto cfg = resolve(flags);
    if (inv.command == "print-config") {
      std::cout << pp::to_json(cfg).dump(2) << '\n';
      return kOk;
    }
    if (inv.command == "train" || inv.command == "evaluate" || inv.command == "sweep-imbalance") inv.selection = model;
    pp::Options opt;
    opt.parallel = flags.parallel;
    const auto res = flags.verify ? pp::run_verified(cfg, inv, opt) : pp::run(cfg, inv, opt);
    for (const auto& k : res.outputs) std::cout << pp::Layout(cfg.paths).path(k).string() << '\n';
    return kOk;
  } catch (const promptrisk::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const promptrisk::InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return kInfeasible;
  } catch (const promptrisk::VerificationError& e) {
    std::cerr << "verification failed: " << e.what() << '\n';
    return kVerification;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
