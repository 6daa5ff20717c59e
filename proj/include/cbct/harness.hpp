#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbct/metrics.hpp"
#include "cbct/mtfs.hpp"
#include "cbct/phantom.hpp"
#include "cbct/pipeline.hpp"
#include "cbct/translate.hpp"

namespace cbct::harness {

inline constexpr const char* kVersionTag = "cbctenh-0.1";

// Turns a raw HU dataset into network-ready LAC volumes:
// rigid re-alignment of the CBCT to its CT, lung masking, optional
// crop/resize, HU clipping, HU->LAC conversion. The output directory gets
// the same manifest layout as the generator, so every consumer that reads
// a DatasetManifest works on prepared data unchanged.
struct PrepConfig {
  int out_size = 0;  // 0 keeps the source resolution
  bool align = true;
  double rot_max = 3.0;
  double rot_step = 0.5;
  double shift_max = 5.0;
  double shift_step = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static PrepConfig from_json(const nlohmann::json& j);
};

phantom::DatasetManifest prep_run(const phantom::DatasetManifest& in,
                                  const PrepConfig& cfg,
                                  const std::string& out_dir);

// Deterministic train/val/test partition with exact floor proportions.
// Pairs are ranked by a hash of their directory name, so the assignment is
// reproducible and independent of generation order.
struct SplitIds {
  std::vector<int> train, val, test;
};

SplitIds split_pairs(const phantom::DatasetManifest& m,
                     double train_frac = 0.56, double val_frac = 0.14);

// View of a manifest restricted to the given pair ids (in the given order).
phantom::DatasetManifest subset_manifest(const phantom::DatasetManifest& m,
                                         const std::vector<int>& ids);

// One resolved experiment configuration. Build it with with_preset or
// from_json; a default-constructed RunConfig mixes scales and fails
// validation. The JSON layout groups fields by module:
//   seed / out_dir / device / preset
//   phantom   {n_pairs, spec, ranges}
//   pipeline  {prep, train_frac, val_frac}
//   fae       backbone / loss-net architecture (single source of truth;
//             must not be repeated inside the mtfs section)
//   mtfs      multi-task training (plus the task subset under "tasks")
//   cfp       perceptual-loss weights (must not be repeated inside translate)
//   translate model/loss kind and translation training
//   metrics   evaluation options
// from_json resolves preset defaults first, then overlays the document, so a
// config file only needs the keys it changes.
struct RunConfig {
  std::uint64_t seed = 17;
  std::string out_dir = "runs";
  std::string device = "cpu";  // hint only; execution is always on cpu
  std::string preset = "desk";
  int n_pairs = 200;
  double train_frac = 0.56;
  double val_frac = 0.14;
  phantom::PhantomSpec spec;
  phantom::ParamRanges ranges;
  PrepConfig prep;
  std::vector<int> tasks{1, 2, 3};
  mtfs::MtfsConfig mtfs;
  translate::TranslateConfig translate;
  metrics::EvalOptions eval;

  // image side after prep (prep.out_size = 0 keeps the phantom size)
  int final_size() const;
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  // "desk" (64 px, narrow nets, full grid in hours) or "paper-shape"
  // (256 px, full-width nets; shape checks only at desk budgets)
  static RunConfig with_preset(const std::string& name);
};

// Every runner drops its outputs under <out_dir>/<op>-<run_id>/ together
// with a manifest.json holding the resolved config, input hashes, output
// paths and timings. Run ids are content-addressed (hash of the config
// subset the op depends on plus its input hashes), so an already-completed
// identical run is detected and reused instead of re-executed.
struct RunManifest {
  std::string op;
  std::string run_id;
  std::string version = kVersionTag;
  nlohmann::json config;   // full resolved RunConfig echo
  nlohmann::json extra;    // op-specific (e.g. matrix grid)
  nlohmann::json inputs;   // name -> {path, hash}
  nlohmann::json outputs;  // name -> absolute path
  nlohmann::json timings;  // name -> seconds
  std::string root;        // run directory

  std::string output_path(const std::string& name) const;
  void save() const;  // writes <root>/manifest.json
  static RunManifest load(const std::string& dir);
};

RunManifest run_phantom_gen(const RunConfig& cfg);
RunManifest run_prep(const RunConfig& cfg, const std::string& dataset_dir);
// Trains cfg.tasks on the train split; outputs checkpoint/, fae/ (the
// exported loss net) and log.json.
RunManifest run_mtfs_train(const RunConfig& cfg,
                           const std::string& prepared_dir);
// fae_dir may be empty for loss_kind mse.
RunManifest run_translate_train(const RunConfig& cfg,
                                const std::string& prepared_dir,
                                const std::string& fae_dir);
RunManifest run_infer(const RunConfig& cfg, const std::string& ckpt_dir,
                      const std::string& volume_dir);
// Evaluates the test split; empty ckpt_dir gives the baseline-only report.
RunManifest run_eval(const RunConfig& cfg, const std::string& prepared_dir,
                     const std::string& ckpt_dir);

// Full chain for one model: generate, prep, (mtfs when the loss is cfp),
// translate, eval. Child runs land flat under cfg.out_dir so identical
// stages are shared between experiments.
RunManifest run_experiment(const RunConfig& cfg,
                           std::ostream* progress = nullptr);

// One row of a comparison grid.
struct MatrixCell {
  std::string name;
  bool baseline = false;  // evaluate raw cbct only, no model
  translate::ModelKind model = translate::ModelKind::Unet;
  translate::LossKind loss = translate::LossKind::Mse;
  std::vector<int> tasks;  // loss-net task subset for cfp rows
};

// "table1": base + {unet,gan,cyclegan} x {mse,cfp} with cfg.tasks.
// "table2": unet-cfp over all 7 task subsets plus the unet-mse baseline.
std::vector<MatrixCell> matrix_grid(const std::string& grid,
                                    const std::vector<int>& tasks);

// Runs the grid sequentially; a failed cell records its error and the rest
// continue. Outputs combined.csv (one row per cell) and cells.json.
RunManifest run_matrix(const RunConfig& cfg, const std::string& grid,
                       std::ostream* progress = nullptr);

// Re-executes the operation recorded in a run directory, writing into
// out_dir. Step ops need their recorded inputs still present and unchanged;
// experiment and matrix runs rebuild everything from the config alone.
RunManifest rerun(const std::string& run_dir, const std::string& out_dir);

}  // namespace cbct::harness
