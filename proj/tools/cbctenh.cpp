#include <CLI11.hpp>

#include <cstdint>
#include <deque>
#include <fstream>
#include <iostream>
#include <string>

#include <json.hpp>

#include "cbct/harness.hpp"

namespace {

using cbct::harness::RunConfig;
using cbct::harness::RunManifest;

// The four flags every verb shares. Flags beat the config file, and the file
// beats the preset; --preset is applied to the document before resolution so
// it still controls the defaults of everything the file leaves unset.
struct Common {
  std::string config_file;
  std::string out_dir;
  std::string preset;
  std::uint64_t seed = 0;
  CLI::Option* seed_o = nullptr;
  CLI::Option* out_o = nullptr;
  CLI::Option* preset_o = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file,
                    "JSON run config; keys it omits fall back to the preset")
        ->check(CLI::ExistingFile);
    seed_o = cmd->add_option("--seed", seed, "Override the global seed");
    out_o = cmd->add_option("--out", out_dir, "Override the output directory");
    preset_o =
        cmd->add_option("--preset", preset, "Base preset: desk or paper-shape")
            ->check(CLI::IsMember({"desk", "paper-shape"}));
  }

  RunConfig resolve() const {
    nlohmann::json doc = nlohmann::json::object();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in.good())
        throw cbct::ValidationError("cannot read config file: " + config_file);
      in >> doc;
    }
    if (preset_o->count() > 0) doc["preset"] = preset;
    auto cfg = RunConfig::from_json(doc);
    if (seed_o->count() > 0) cfg.seed = seed;
    if (out_o->count() > 0) cfg.out_dir = out_dir;
    cfg.validate();
    return cfg;
  }
};

void report(const RunManifest& man) {
  std::cout << man.op << " done: " << man.root << "\n";
  for (auto it = man.outputs.begin(); it != man.outputs.end(); ++it)
    std::cout << "  " << it.key() << ": " << it.value().get<std::string>()
              << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CBCT-to-CT enhancement toolkit (phantom data, perceptual-loss "
               "training, evaluation matrix)"};
  app.require_subcommand(1);
  std::deque<Common> commons;
  auto leaf = [&](CLI::App* parent, const char* name, const char* desc) {
    auto* cmd = parent->add_subcommand(name, desc);
    commons.emplace_back().attach(cmd);
    return std::pair<CLI::App*, Common*>{cmd, &commons.back()};
  };

  auto* phantom =
      app.add_subcommand("phantom", "Synthetic paired CT/CBCT volumes");
  phantom->require_subcommand(1);
  {
    auto [cmd, c] = leaf(phantom, "gen", "Generate a paired phantom dataset");
    cmd->callback([c] { report(cbct::harness::run_phantom_gen(c->resolve())); });
  }

  auto* prep = app.add_subcommand("prep", "Dataset preparation");
  prep->require_subcommand(1);
  {
    auto [cmd, c] =
        leaf(prep, "run", "Align, mask and convert a raw dataset to LAC");
    static std::string prep_ds;
    cmd->add_option("--dataset", prep_ds, "Raw dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd->callback(
        [c] { report(cbct::harness::run_prep(c->resolve(), prep_ds)); });
  }

  auto* mtfs = app.add_subcommand("mtfs", "Multi-task loss-net training");
  mtfs->require_subcommand(1);
  {
    auto [cmd, c] = leaf(mtfs, "train",
                         "Train the feature network on the configured tasks");
    static std::string mtfs_ds;
    cmd->add_option("--dataset", mtfs_ds, "Prepared dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd->callback(
        [c] { report(cbct::harness::run_mtfs_train(c->resolve(), mtfs_ds)); });
  }

  auto* translate = app.add_subcommand("translate", "Translation networks");
  translate->require_subcommand(1);
  {
    auto [cmd, c] =
        leaf(translate, "train", "Train the configured translation model");
    static std::string tr_ds, tr_fae;
    cmd->add_option("--dataset", tr_ds, "Prepared dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd->add_option("--loss-net", tr_fae,
                    "Exported loss-net checkpoint (required for cfp loss)")
        ->check(CLI::ExistingDirectory);
    cmd->callback([c] {
      report(cbct::harness::run_translate_train(c->resolve(), tr_ds, tr_fae));
    });
  }

  {
    auto [cmd, c] =
        leaf(&app, "infer", "Translate one volume with a trained checkpoint");
    static std::string in_ckpt, in_vol;
    cmd->add_option("--checkpoint", in_ckpt, "Translation checkpoint directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd->add_option("--volume", in_vol, "Input LAC volume directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd->callback([c] {
      report(cbct::harness::run_infer(c->resolve(), in_ckpt, in_vol));
    });
  }

  {
    auto [cmd, c] = leaf(&app, "eval", "Metric report on the test split");
    static std::string ev_ds, ev_ckpt;
    cmd->add_option("--dataset", ev_ds, "Prepared dataset directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd->add_option("--checkpoint", ev_ckpt,
                    "Translation checkpoint; omit for the cbct baseline only")
        ->check(CLI::ExistingDirectory);
    cmd->callback(
        [c] { report(cbct::harness::run_eval(c->resolve(), ev_ds, ev_ckpt)); });
  }

  {
    auto [cmd, c] = leaf(&app, "experiment",
                         "Full chain: gen, prep, loss net, translate, eval");
    cmd->callback([c] {
      report(cbct::harness::run_experiment(c->resolve(), &std::cout));
    });
  }

  {
    auto [cmd, c] = leaf(&app, "matrix", "Run a comparison grid end to end");
    static std::string grid = "table1";
    cmd->add_option("--grid", grid,
                    "table1 (models x losses) or table2 (task-subset ablation)")
        ->check(CLI::IsMember({"table1", "table2"}));
    cmd->callback([c] {
      report(cbct::harness::run_matrix(c->resolve(), grid, &std::cout));
    });
  }

  {
    auto* cmd = app.add_subcommand(
        "rerun", "Re-execute a recorded run into a fresh directory");
    static std::string rr_run, rr_out;
    cmd->add_option("--run", rr_run, "Run directory holding manifest.json")
        ->required()
        ->check(CLI::ExistingDirectory);
    cmd->add_option("--out", rr_out, "Output directory for the re-execution")
        ->required();
    cmd->callback([] { report(cbct::harness::rerun(rr_run, rr_out)); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
