#include "cbct/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "cbct/common.hpp"
#include "cbct/jsonutil.hpp"

namespace fs = std::filesystem;

namespace cbct::harness {

using nlohmann::json;

void PrepConfig::validate() const {
  require(out_size >= 0, "prep: out_size must be >= 0");
  if (out_size > 0)
    require(out_size >= 8 && out_size % 8 == 0,
            "prep: out_size must be a multiple of 8");
  require(rot_max >= 0.0 && shift_max >= 0.0,
          "prep: search ranges must be non-negative");
  require(rot_step > 0.0 && shift_step > 0.0,
          "prep: search steps must be positive");
}

nlohmann::json PrepConfig::to_json() const {
  return {{"out_size", out_size},   {"align", align},
          {"rot_max", rot_max},     {"rot_step", rot_step},
          {"shift_max", shift_max}, {"shift_step", shift_step}};
}

PrepConfig PrepConfig::from_json(const nlohmann::json& j) {
  require_known_keys(
      j, {"out_size", "align", "rot_max", "rot_step", "shift_max", "shift_step"},
      "prep config");
  PrepConfig c;
  c.out_size = j.value("out_size", c.out_size);
  c.align = j.value("align", c.align);
  c.rot_max = j.value("rot_max", c.rot_max);
  c.rot_step = j.value("rot_step", c.rot_step);
  c.shift_max = j.value("shift_max", c.shift_max);
  c.shift_step = j.value("shift_step", c.shift_step);
  c.validate();
  return c;
}

phantom::DatasetManifest prep_run(const phantom::DatasetManifest& in,
                                  const PrepConfig& cfg,
                                  const std::string& out_dir) {
  cfg.validate();
  require(!in.pairs.empty(), "prep: dataset has no pairs");

  const int out_size = cfg.out_size > 0 ? cfg.out_size : in.image_size;
  pipeline::SearchGrid grid;
  if (cfg.align)
    grid = pipeline::SearchGrid::symmetric(cfg.rot_max, cfg.rot_step,
                                           cfg.shift_max, cfg.shift_step);

  phantom::DatasetManifest out = in;
  out.image_size = out_size;
  out.root = out_dir;
  fs::create_directories(out_dir);

  for (std::size_t i = 0; i < in.pairs.size(); ++i) {
    phantom::PhantomPair p = phantom::load_pair(in, in.pairs[i]);
    Volume cbct = std::move(p.cbct);
    if (cfg.align) {
      auto t = pipeline::estimate_rigid(cbct, p.ct, grid);
      cbct = pipeline::rigid_align(cbct, t);
    }
    Volume ct = pipeline::apply_mask(p.ct, p.lung_mask);
    cbct = pipeline::apply_mask(cbct, p.lung_mask);
    Volume mask = std::move(p.lung_mask);
    if (out_size != in.image_size) {
      pipeline::Roi full{0, 0, in.image_size, in.image_size};
      ct = pipeline::crop_resize(ct, full, out_size);
      cbct = pipeline::crop_resize(cbct, full, out_size);
      mask = pipeline::binarize(pipeline::crop_resize(mask, full, out_size));
    }
    ct = pipeline::hu_to_lac(pipeline::clip_hu(ct));
    cbct = pipeline::hu_to_lac(pipeline::clip_hu(cbct));

    phantom::PairRecord& rec = out.pairs[i];
    fs::create_directories(fs::path(out_dir) / rec.dir);
    save_volume(ct, out.ct_dir(rec));
    save_volume(cbct, out.cbct_dir(rec));
    save_volume(mask, out.mask_dir(rec));
    rec.ct_hash = hex64(volume_content_hash(ct));
    rec.cbct_hash = hex64(volume_content_hash(cbct));
    rec.mask_hash = hex64(volume_content_hash(mask));
  }
  out.save(out_dir);
  return out;
}

SplitIds split_pairs(const phantom::DatasetManifest& m, double train_frac,
                     double val_frac) {
  require(train_frac >= 0.0 && val_frac >= 0.0 &&
              train_frac + val_frac <= 1.0 + 1e-12,
          "split: fractions must be non-negative and sum <= 1");
  require(!m.pairs.empty(), "split: dataset has no pairs");

  struct Keyed {
    std::uint64_t h;
    int id;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(m.pairs.size());
  for (const auto& r : m.pairs)
    keyed.push_back({fnv1a64(r.dir.data(), r.dir.size()), r.id});
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.h != b.h ? a.h < b.h : a.id < b.id;
  });

  const auto n = static_cast<std::ptrdiff_t>(keyed.size());
  const auto n_train = static_cast<std::ptrdiff_t>(train_frac * double(n));
  const auto n_val = static_cast<std::ptrdiff_t>(val_frac * double(n));
  SplitIds s;
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (i < n_train)
      s.train.push_back(keyed[i].id);
    else if (i < n_train + n_val)
      s.val.push_back(keyed[i].id);
    else
      s.test.push_back(keyed[i].id);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

phantom::DatasetManifest subset_manifest(const phantom::DatasetManifest& m,
                                         const std::vector<int>& ids) {
  require(!ids.empty(), "subset: no pair ids");
  phantom::DatasetManifest out = m;
  out.pairs.clear();
  for (int id : ids) {
    const auto it =
        std::find_if(m.pairs.begin(), m.pairs.end(),
                     [&](const phantom::PairRecord& r) { return r.id == id; });
    require(it != m.pairs.end(),
            "subset: pair id " + std::to_string(id) + " not in the manifest");
    out.pairs.push_back(*it);
  }
  return out;
}

// ---- run configuration ----

int RunConfig::final_size() const {
  return prep.out_size > 0 ? prep.out_size : spec.image_size;
}

void RunConfig::validate() const {
  require(!out_dir.empty(), "run config: out_dir must not be empty");
  require(preset == "desk" || preset == "paper-shape",
          "run config: preset must be 'desk' or 'paper-shape'");
  require(n_pairs >= 1, "run config: n_pairs must be >= 1");
  require(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0,
          "run config: split fractions must leave a non-empty test set");
  spec.validate();
  prep.validate();
  require(mtfs::normalize_task_subset(tasks) == tasks,
          "run config: tasks must be a normalized subset of {1,2,3}");
  mtfs.validate();
  translate.validate();
  eval.validate();
  const int size = final_size();
  require(mtfs.fae.input_size == size,
          "run config: fae input_size must match the prepared image size");
  require(translate.input_size == size,
          "run config: translate input_size must match the prepared image "
          "size");
}

json RunConfig::to_json() const {
  json mj = mtfs.to_json();
  mj.erase("fae");
  mj["tasks"] = tasks;
  json tj = translate.to_json();
  const json cj = tj.at("cfp");
  tj.erase("cfp");
  return {{"seed", seed},
          {"out_dir", out_dir},
          {"device", device},
          {"preset", preset},
          {"phantom",
           {{"n_pairs", n_pairs},
            {"spec", spec.to_json()},
            {"ranges", ranges.to_json()}}},
          {"pipeline",
           {{"prep", prep.to_json()},
            {"train_frac", train_frac},
            {"val_frac", val_frac}}},
          {"fae", mtfs.fae.to_json()},
          {"mtfs", mj},
          {"cfp", cj},
          {"translate", tj},
          {"metrics", eval.to_json()}};
}

RunConfig RunConfig::with_preset(const std::string& name) {
  RunConfig c;
  c.preset = name.empty() ? "desk" : name;
  if (c.preset == "desk") {
    c.n_pairs = 200;
    c.spec.image_size = 64;
    c.mtfs.fae.input_size = 64;
    c.mtfs.fae.width_multiplier = 0.25;  // channels 8, 16, 32, 64
    c.mtfs.fae.blocks_per_stage = {1, 1, 3, 1};
    c.mtfs.fae.residual_layers = 6;
    c.mtfs.epochs = 6;
    c.translate.input_size = 64;
    c.translate.base_channels = 8;
    c.translate.se_reduction = 4;
  } else if (c.preset == "paper-shape") {
    c.n_pairs = 20;
    c.spec.image_size = 256;
    // fae and translate defaults already carry the full-width 256 geometry
  } else {
    throw ValidationError("run config: unknown preset '" + name + "'");
  }
  c.validate();
  return c;
}

RunConfig RunConfig::from_json(const json& j) {
  require_known_keys(j,
                     {"seed", "out_dir", "device", "preset", "phantom",
                      "pipeline", "fae", "mtfs", "cfp", "translate", "metrics"},
                     "run config");
  const std::string preset = j.value("preset", std::string("desk"));
  json merged = with_preset(preset).to_json();
  merged.update(j, /*merge_objects=*/true);

  RunConfig c;
  c.seed = merged.at("seed").get<std::uint64_t>();
  c.out_dir = merged.at("out_dir").get<std::string>();
  c.device = merged.at("device").get<std::string>();
  c.preset = merged.at("preset").get<std::string>();

  const json& ph = merged.at("phantom");
  require_known_keys(ph, {"n_pairs", "spec", "ranges"}, "run config phantom");
  c.n_pairs = ph.at("n_pairs").get<int>();
  c.spec = phantom::PhantomSpec::from_json(ph.at("spec"));
  c.ranges = phantom::ParamRanges::from_json(ph.at("ranges"));

  const json& pl = merged.at("pipeline");
  require_known_keys(pl, {"prep", "train_frac", "val_frac"},
                     "run config pipeline");
  c.prep = PrepConfig::from_json(pl.at("prep"));
  c.train_frac = pl.at("train_frac").get<double>();
  c.val_frac = pl.at("val_frac").get<double>();

  json mj = merged.at("mtfs");
  require(!mj.contains("fae"),
          "run config: the loss-net backbone belongs in the top-level 'fae' "
          "section");
  c.tasks = mtfs::normalize_task_subset(
      mj.at("tasks").get<std::vector<int>>());
  mj.erase("tasks");
  mj["fae"] = merged.at("fae");
  c.mtfs = mtfs::MtfsConfig::from_json(mj);

  json tj = merged.at("translate");
  require(!tj.contains("cfp"),
          "run config: the perceptual-loss weights belong in the top-level "
          "'cfp' section");
  tj["cfp"] = merged.at("cfp");
  c.translate = translate::TranslateConfig::from_json(tj);

  c.eval = metrics::EvalOptions::from_json(merged.at("metrics"));
  c.validate();
  return c;
}

// ---- run manifests ----

std::string RunManifest::output_path(const std::string& name) const {
  require(outputs.contains(name),
          "run manifest: no output named '" + name + "'");
  return outputs.at(name).get<std::string>();
}

void RunManifest::save() const {
  require(!root.empty(), "run manifest: no run directory set");
  json j{{"format_version", 1},
         {"op", op},
         {"run_id", run_id},
         {"version", version},
         {"config", config},
         {"extra", extra},
         {"inputs", inputs},
         {"outputs", outputs},
         {"timings", timings},
         {"complete", true}};
  std::ofstream f(fs::path(root) / "manifest.json", std::ios::binary);
  if (!f) throw IoError("cannot write manifest in " + root);
  f << j.dump(2) << "\n";
}

RunManifest RunManifest::load(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  require(f.good(), "no run manifest in " + dir);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError("bad run manifest in " + dir + ": " + e.what());
  }
  require(j.value("complete", false), "run manifest in " + dir +
                                          " marks an incomplete run");
  RunManifest m;
  m.op = j.at("op").get<std::string>();
  m.run_id = j.at("run_id").get<std::string>();
  m.version = j.at("version").get<std::string>();
  m.config = j.at("config");
  m.extra = j.at("extra");
  m.inputs = j.at("inputs");
  m.outputs = j.at("outputs");
  m.timings = j.at("timings");
  m.root = fs::absolute(dir).string();
  return m;
}

// ---- runner plumbing ----

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

std::uint64_t file_hash(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  require(f.good(), "cannot read " + p.string());
  std::uint64_t h = fnv1a64(p.filename().string());
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    const auto n = f.gcount();
    if (n > 0) h = fnv1a64(buf, static_cast<std::size_t>(n), h);
  }
  return h;
}

// Dataset directories are hashed through their manifest (which already
// carries per-volume content hashes); other directories hash every file.
std::uint64_t path_hash(const fs::path& p) {
  if (!fs::is_directory(p)) return file_hash(p);
  if (fs::exists(p / "manifest.json")) return file_hash(p / "manifest.json");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a64(std::string("tree"));
  for (const auto& f : files) {
    h = fnv1a64(fs::relative(f, p).generic_string(), h);
    const std::uint64_t fh = file_hash(f);
    h = fnv1a64(&fh, sizeof(fh), h);
  }
  return h;
}

json input_record(const std::string& path) {
  const fs::path abs = fs::absolute(path).lexically_normal();
  require(fs::exists(abs), "input does not exist: " + abs.string());
  return {{"path", abs.string()}, {"hash", hex64(path_hash(abs))}};
}

std::string make_run_id(const std::string& op, const json& scope,
                        const json& inputs) {
  std::uint64_t h = fnv1a64(op);
  h = fnv1a64(scope.dump(), h);
  h = fnv1a64(inputs.dump(), h);
  return hex64(h);
}

std::optional<RunManifest> try_reuse(const fs::path& dir,
                                     const std::string& id) {
  if (!fs::exists(dir / "manifest.json")) return std::nullopt;
  try {
    RunManifest m = RunManifest::load(dir.string());
    if (m.run_id == id) return m;
  } catch (const std::exception&) {
    // stale or corrupt; fall through and re-execute
  }
  return std::nullopt;
}

double secs_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string abs_str(const fs::path& p) {
  return fs::absolute(p).lexically_normal().string();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

// Shared skeleton: resolve the run directory from the content id, reuse a
// completed identical run, otherwise execute `body` into a fresh directory
// and persist the manifest.
template <class F>
RunManifest execute(const std::string& op, const RunConfig& cfg,
                    const json& scope, const json& inputs, const json& extra,
                    F&& body) {
  const std::string id = make_run_id(op, scope, inputs);
  const fs::path dir = fs::path(cfg.out_dir) / (op + "-" + id);
  if (auto m = try_reuse(dir, id)) return *m;
  fs::remove_all(dir);
  fs::create_directories(dir);

  RunManifest man;
  man.op = op;
  man.run_id = id;
  man.config = cfg.to_json();
  man.extra = extra;
  man.inputs = inputs;
  man.root = abs_str(dir);
  const auto t0 = std::chrono::steady_clock::now();
  body(man, dir);
  man.timings["total"] = secs_since(t0);
  man.save();
  return man;
}

}  // namespace

// ---- step runners ----

RunManifest run_phantom_gen(const RunConfig& cfg) {
  cfg.validate();
  const json full = cfg.to_json();
  const json scope{{"seed", cfg.seed}, {"phantom", full.at("phantom")}};
  return execute(
      "phantom-gen", cfg, scope, json::object(), json::object(),
      [&](RunManifest& man, const fs::path& dir) {
        phantom::make_dataset(cfg.n_pairs, cfg.spec, cfg.ranges,
                              (dir / "dataset").string(),
                              derive_seed(cfg.seed, "dataset"));
        man.outputs["dataset"] = abs_str(dir / "dataset");
      });
}

RunManifest run_prep(const RunConfig& cfg, const std::string& dataset_dir) {
  cfg.validate();
  const auto in = phantom::DatasetManifest::load(dataset_dir);
  const json inputs{{"dataset", input_record(dataset_dir)}};
  const json scope{{"prep", cfg.prep.to_json()}};
  return execute("prep", cfg, scope, inputs, json::object(),
                 [&](RunManifest& man, const fs::path& dir) {
                   prep_run(in, cfg.prep, (dir / "dataset").string());
                   man.outputs["dataset"] = abs_str(dir / "dataset");
                 });
}

RunManifest run_mtfs_train(const RunConfig& cfg,
                           const std::string& prepared_dir) {
  cfg.validate();
  const auto prep = phantom::DatasetManifest::load(prepared_dir);
  const auto split = split_pairs(prep, cfg.train_frac, cfg.val_frac);
  const auto sub = subset_manifest(prep, split.train);
  const json full = cfg.to_json();
  const json inputs{{"dataset", input_record(prepared_dir)}};
  const json scope{{"seed", cfg.seed},
                   {"fae", full.at("fae")},
                   {"mtfs", full.at("mtfs")},
                   {"split", {cfg.train_frac, cfg.val_frac}}};
  return execute(
      "mtfs-train", cfg, scope, inputs, json::object(),
      [&](RunManifest& man, const fs::path& dir) {
        auto res = mtfs::train_mtfs(sub, cfg.tasks, cfg.mtfs,
                                    derive_seed(cfg.seed, "mtfs"));
        mtfs::save_mtfs(res.model, (dir / "checkpoint").string());
        mtfs::export_fae_checkpoint(res.model, (dir / "fae").string());
        write_text(dir / "log.json", res.log.dump(2) + "\n");
        man.outputs["checkpoint"] = abs_str(dir / "checkpoint");
        man.outputs["fae"] = abs_str(dir / "fae");
        man.outputs["log"] = abs_str(dir / "log.json");
      });
}

RunManifest run_translate_train(const RunConfig& cfg,
                                const std::string& prepared_dir,
                                const std::string& fae_dir) {
  cfg.validate();
  const auto prep = phantom::DatasetManifest::load(prepared_dir);
  const auto split = split_pairs(prep, cfg.train_frac, cfg.val_frac);
  const auto sub = subset_manifest(prep, split.train);
  const json full = cfg.to_json();
  json inputs{{"dataset", input_record(prepared_dir)}};
  if (!fae_dir.empty()) inputs["loss_net"] = input_record(fae_dir);
  const json scope{{"seed", cfg.seed},
                   {"translate", full.at("translate")},
                   {"cfp", full.at("cfp")},
                   {"split", {cfg.train_frac, cfg.val_frac}}};
  return execute(
      "translate-train", cfg, scope, inputs, json::object(),
      [&](RunManifest& man, const fs::path& dir) {
        auto res = translate::train_translation(
            sub, fae_dir, cfg.translate, derive_seed(cfg.seed, "translate"));
        translate::save_translation(res.model, (dir / "checkpoint").string());
        write_text(dir / "log.json", res.log.dump(2) + "\n");
        man.outputs["checkpoint"] = abs_str(dir / "checkpoint");
        man.outputs["log"] = abs_str(dir / "log.json");
      });
}

RunManifest run_infer(const RunConfig& cfg, const std::string& ckpt_dir,
                      const std::string& volume_dir) {
  cfg.validate();
  const json inputs{{"checkpoint", input_record(ckpt_dir)},
                    {"volume", input_record(volume_dir)}};
  return execute("infer", cfg, json::object(), inputs, json::object(),
                 [&](RunManifest& man, const fs::path& dir) {
                   const auto model = translate::load_translation(ckpt_dir);
                   const Volume in = load_volume(volume_dir);
                   const Volume sct = translate::infer(model, in);
                   save_volume(sct, (dir / "sct").string());
                   man.outputs["sct"] = abs_str(dir / "sct");
                 });
}

RunManifest run_eval(const RunConfig& cfg, const std::string& prepared_dir,
                     const std::string& ckpt_dir) {
  cfg.validate();
  const auto prep = phantom::DatasetManifest::load(prepared_dir);
  const auto split = split_pairs(prep, cfg.train_frac, cfg.val_frac);
  const auto test = subset_manifest(prep, split.test);
  const json full = cfg.to_json();
  json inputs{{"dataset", input_record(prepared_dir)}};
  if (!ckpt_dir.empty()) inputs["checkpoint"] = input_record(ckpt_dir);
  const json scope{{"metrics", full.at("metrics")},
                   {"split", {cfg.train_frac, cfg.val_frac}}};
  return execute(
      "eval", cfg, scope, inputs, json::object(),
      [&](RunManifest& man, const fs::path& dir) {
        std::optional<translate::TranslationModel> model;
        metrics::ModelFn fn;
        if (!ckpt_dir.empty()) {
          model = translate::load_translation(ckpt_dir);
          fn = [&](const Volume& v) { return translate::infer(*model, v); };
        }
        const metrics::PairProvider provider = [&](int i) {
          const auto& rec = test.pairs.at(static_cast<std::size_t>(i));
          auto p = phantom::load_pair(test, rec);
          metrics::EvalPair ep;
          ep.id = rec.id;
          ep.ct = std::move(p.ct);
          ep.cbct = std::move(p.cbct);
          ep.mask = std::move(p.lung_mask);
          return ep;
        };
        const auto report = metrics::evaluate_pairs(
            provider, static_cast<int>(test.pairs.size()), fn, cfg.eval);
        report.write((dir / "report").string());
        man.outputs["report"] = abs_str(dir / "report");
        man.outputs["metrics_csv"] = abs_str(dir / "report" / "metrics.csv");
        man.outputs["aggregate_json"] =
            abs_str(dir / "report" / "aggregate.json");
      });
}

// ---- composite runners ----

namespace {

void say(std::ostream* progress, const std::string& msg) {
  if (progress) (*progress) << msg << std::endl;
}

}  // namespace

RunManifest run_experiment(const RunConfig& cfg, std::ostream* progress) {
  cfg.validate();
  const json scope = cfg.to_json();
  return execute(
      "experiment", cfg, scope, json::object(), json::object(),
      [&](RunManifest& man, const fs::path&) {
        say(progress, "experiment: dataset");
        const auto gen = run_phantom_gen(cfg);
        man.timings["phantom_gen"] = gen.timings.value("total", 0.0);
        const auto prep = run_prep(cfg, gen.output_path("dataset"));
        man.timings["prep"] = prep.timings.value("total", 0.0);
        const std::string prep_ds = prep.output_path("dataset");
        man.outputs["dataset_run"] = gen.root;
        man.outputs["prep_run"] = prep.root;

        std::string fae_dir;
        if (cfg.translate.loss_kind == translate::LossKind::Cfp) {
          say(progress, "experiment: loss-net training");
          const auto mt = run_mtfs_train(cfg, prep_ds);
          man.timings["mtfs_train"] = mt.timings.value("total", 0.0);
          man.outputs["mtfs_run"] = mt.root;
          fae_dir = mt.output_path("fae");
        }

        say(progress, "experiment: translation training");
        const auto tr = run_translate_train(cfg, prep_ds, fae_dir);
        man.timings["translate_train"] = tr.timings.value("total", 0.0);
        man.outputs["translate_run"] = tr.root;
        man.outputs["checkpoint"] = tr.output_path("checkpoint");

        say(progress, "experiment: evaluation");
        const auto ev = run_eval(cfg, prep_ds, tr.output_path("checkpoint"));
        man.timings["eval"] = ev.timings.value("total", 0.0);
        man.outputs["eval_run"] = ev.root;
        man.outputs["metrics_csv"] = ev.output_path("metrics_csv");
        man.outputs["aggregate_json"] = ev.output_path("aggregate_json");
      });
}

std::vector<MatrixCell> matrix_grid(const std::string& grid,
                                    const std::vector<int>& tasks) {
  using translate::LossKind;
  using translate::ModelKind;
  std::vector<MatrixCell> cells;
  auto add = [&](const std::string& name, ModelKind m, LossKind l,
                 const std::vector<int>& t) {
    MatrixCell c;
    c.name = name;
    c.model = m;
    c.loss = l;
    c.tasks = t;
    cells.push_back(c);
  };
  if (grid == "table1") {
    MatrixCell base;
    base.name = "base";
    base.baseline = true;
    cells.push_back(base);
    add("unet-mse", ModelKind::Unet, LossKind::Mse, {});
    add("unet-cfp", ModelKind::Unet, LossKind::Cfp, tasks);
    add("gan", ModelKind::Gan, LossKind::Mse, {});
    add("gan-cfp", ModelKind::Gan, LossKind::Cfp, tasks);
    add("cyclegan", ModelKind::CycleGan, LossKind::Mse, {});
    add("cyclegan-cfp", ModelKind::CycleGan, LossKind::Cfp, tasks);
  } else if (grid == "table2") {
    const std::vector<std::vector<int>> subsets{{1},    {2},    {3},   {1, 2},
                                                {1, 3}, {2, 3}, {1, 2, 3}};
    for (const auto& s : subsets) {
      std::string name = "unet-cfp-";
      for (int t : s) name += std::to_string(t);
      add(name, ModelKind::Unet, LossKind::Cfp, s);
    }
    add("unet-mse", ModelKind::Unet, LossKind::Mse, {});
  } else {
    throw ValidationError("matrix: unknown grid '" + grid + "'");
  }
  return cells;
}

RunManifest run_matrix(const RunConfig& cfg, const std::string& grid,
                       std::ostream* progress) {
  cfg.validate();
  const auto cells = matrix_grid(grid, cfg.tasks);
  const json scope{{"config", cfg.to_json()}, {"grid", grid}};
  const json extra{{"grid", grid}};
  return execute(
      "matrix", cfg, scope, json::object(), extra,
      [&](RunManifest& man, const fs::path& dir) {
        say(progress, "matrix " + grid + ": dataset");
        const auto gen = run_phantom_gen(cfg);
        const auto prep = run_prep(cfg, gen.output_path("dataset"));
        const std::string prep_ds = prep.output_path("dataset");
        man.outputs["dataset_run"] = gen.root;
        man.outputs["prep_run"] = prep.root;

        json cells_j = json::array();
        std::ostringstream csv;
        csv << "# desk-scale phantom study; orderings are meaningful, "
               "absolute values are not comparable to published results\n";
        csv << "row,status";
        for (const auto& name : cfg.eval.metric_names)
          csv << "," << name << "_mean," << name << "_std";
        csv << "\n";

        for (const auto& cell : cells) {
          say(progress, "matrix cell: " + cell.name);
          const auto t0 = std::chrono::steady_clock::now();
          json cj{{"name", cell.name}};
          std::string status = "ok";
          json stats;
          try {
            RunManifest ev;
            std::string prefix;
            if (cell.baseline) {
              ev = run_eval(cfg, prep_ds, "");
              prefix = "cbct";
            } else {
              RunConfig c2 = cfg;
              c2.translate.model_kind = cell.model;
              c2.translate.loss_kind = cell.loss;
              std::string fae_dir;
              if (cell.loss == translate::LossKind::Cfp) {
                c2.tasks = cell.tasks;
                const auto mt = run_mtfs_train(c2, prep_ds);
                cj["mtfs_run"] = mt.root;
                fae_dir = mt.output_path("fae");
              }
              const auto tr = run_translate_train(c2, prep_ds, fae_dir);
              cj["translate_run"] = tr.root;
              ev = run_eval(c2, prep_ds, tr.output_path("checkpoint"));
              prefix = "sct";
            }
            cj["eval_run"] = ev.root;
            std::ifstream af(ev.output_path("aggregate_json"));
            json agg;
            af >> agg;
            stats = agg.at("aggregate").at(prefix);
          } catch (const std::exception& e) {
            status = std::string("failed: ") + e.what();
          }
          cj["status"] = status;
          cells_j.push_back(cj);
          man.timings[cell.name] = secs_since(t0);

          csv << csv_quote(cell.name) << "," << csv_quote(status);
          for (const auto& name : cfg.eval.metric_names) {
            if (status == "ok" && stats.contains(name))
              csv << "," << fmt_double(stats.at(name).at("mean").get<double>())
                  << "," << fmt_double(stats.at(name).at("std").get<double>());
            else
              csv << ",,";
          }
          csv << "\n";
        }

        write_text(dir / "combined.csv", csv.str());
        write_text(dir / "cells.json", cells_j.dump(2) + "\n");
        man.outputs["combined_csv"] = abs_str(dir / "combined.csv");
        man.outputs["cells_json"] = abs_str(dir / "cells.json");
      });
}

RunManifest rerun(const std::string& run_dir, const std::string& out_dir) {
  const RunManifest man = RunManifest::load(run_dir);
  RunConfig cfg = RunConfig::from_json(man.config);
  cfg.out_dir = out_dir;

  const auto in_path = [&](const char* name) -> std::string {
    if (!man.inputs.contains(name)) return "";
    const auto& rec = man.inputs.at(name);
    const std::string p = rec.at("path").get<std::string>();
    require(fs::exists(p), "rerun: recorded input missing: " + p);
    require(hex64(path_hash(p)) == rec.at("hash").get<std::string>(),
            "rerun: input changed since the original run: " + p);
    return p;
  };

  if (man.op == "phantom-gen") return run_phantom_gen(cfg);
  if (man.op == "prep") return run_prep(cfg, in_path("dataset"));
  if (man.op == "mtfs-train") return run_mtfs_train(cfg, in_path("dataset"));
  if (man.op == "translate-train")
    return run_translate_train(cfg, in_path("dataset"), in_path("loss_net"));
  if (man.op == "infer")
    return run_infer(cfg, in_path("checkpoint"), in_path("volume"));
  if (man.op == "eval")
    return run_eval(cfg, in_path("dataset"), in_path("checkpoint"));
  if (man.op == "experiment") return run_experiment(cfg);
  if (man.op == "matrix")
    return run_matrix(cfg, man.extra.value("grid", "table1"));
  throw ValidationError("rerun: unknown op '" + man.op + "'");
}

}  // namespace cbct::harness
