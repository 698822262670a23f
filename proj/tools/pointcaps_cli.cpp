#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pointcaps/checkpoint.hpp"
#include "pointcaps/data.hpp"
#include "pointcaps/train.hpp"
#include "pointcaps/verify.hpp"
#include "pointcaps/version.hpp"

namespace fs = std::filesystem;
using namespace pointcaps;

namespace {

// Machine-readable summary goes to stdout as a single `cmd key=value ...`
// line; everything meant for humans goes to stderr.

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
}

void write_run_json(const std::string& dir, const std::string& cmd, uint64_t seed,
                    const ModelConfig* config, const std::vector<std::string>& argv) {
  ensure_dir(dir);
  nlohmann::ordered_json j;
  j["command"] = cmd;
  j["version"] = kVersion;
  j["build"] = build_id();
  j["seed"] = seed;
  j["argv"] = argv;
  if (config != nullptr) {
    nlohmann::ordered_json ck;
    for (const auto& [k, v] : config_kv(*config)) ck[k] = v;
    j["config"] = ck;
  }
  const std::string path = (fs::path(dir) / "run.json").string();
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

std::vector<ShapeKind> parse_shapes(const std::string& csv) {
  std::vector<ShapeKind> kinds;
  std::string tok;
  std::istringstream ss(csv);
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) kinds.push_back(shape_kind_from(tok));
  }
  if (kinds.empty()) throw InputError("no shape kinds given");
  return kinds;
}

std::vector<real> parse_reals(const std::string& csv) {
  std::vector<real> out;
  std::string tok;
  std::istringstream ss(csv);
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    size_t used = 0;
    out.push_back(std::stod(tok, &used));
    if (used != tok.size()) throw InputError("bad number '" + tok + "' in list");
  }
  return out;
}

RoutingPolicy parse_policy(const std::string& name) {
  if (name == "all_dr") return RoutingPolicy::AllDynamic;
  if (name == "all_er") return RoutingPolicy::AllEuclidean;
  return routing_policy_from(name);
}

struct ModelFlags {
  std::string config_path;
  std::string preset = "default";
  int64_t points = 256;
  int64_t classes = 5;
  bool use_normals = false;
  std::string routing = "pointcaps";
  bool no_skip = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "model config file (overrides the preset flags)");
    cmd->add_option("--preset", preset, "default|micro")
        ->check(CLI::IsMember({"default", "micro"}));
    cmd->add_option("--points", points, "points per cloud");
    cmd->add_option("--classes", classes, "number of classes");
    cmd->add_flag("--normals", use_normals, "feed xyz+normal inputs");
    cmd->add_option("--routing", routing, "pointcaps|all_dr|all_er");
    cmd->add_flag("--no-skip", no_skip, "disable the decoder skip connection");
  }

  ModelConfig resolve() const {
    ModelConfig c;
    if (!config_path.empty()) {
      c = load_config(config_path);
    } else {
      c = preset == "micro" ? ModelConfig::micro(points, classes)
                            : ModelConfig::defaults(points, classes);
      c.use_normals = use_normals;
    }
    c.routing_policy = parse_policy(routing);
    if (no_skip) c.skip_connection = false;
    c.validate();
    return c;
  }
};

ModelState load_model(const std::string& ckpt, const ModelConfig& config) {
  ModelState state = ModelState::init(config, 0);
  load_checkpoint(ckpt, state);
  return state;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"point-cloud capsule autoencoder"};
  app.require_subcommand(1);

  // --- gen -------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a synthetic labeled dataset");
  std::string gen_shapes = "sphere,cube,cylinder,torus,plane";
  std::string gen_split = "train";
  std::string gen_out;
  int64_t gen_per_class = 100, gen_points = 256;
  uint64_t gen_seed = 1;
  gen->add_option("--shapes", gen_shapes, "comma-separated shape kinds");
  gen->add_option("--per-class", gen_per_class, "clouds per class")->check(CLI::PositiveNumber);
  gen->add_option("--points", gen_points, "points per cloud")->check(CLI::PositiveNumber);
  gen->add_option("--split", gen_split, "split directory name");
  gen->add_option("--out", gen_out, "dataset root directory")->required();
  gen->add_option("--seed", gen_seed, "generation seed");

  // --- train -----------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  ModelFlags tr_model;
  tr_model.attach(tr);
  std::string tr_data, tr_split = "train", tr_out;
  TrainOptions tr_opts;
  tr->add_option("--data", tr_data, "dataset root")->required();
  tr->add_option("--split", tr_split, "split to train on");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--epochs", tr_opts.epochs)->check(CLI::PositiveNumber);
  tr->add_option("--batch", tr_opts.batch_size)->check(CLI::PositiveNumber);
  tr->add_option("--lr", tr_opts.lr);
  tr->add_option("--val-fraction", tr_opts.val_fraction);
  tr->add_option("--seed", tr_opts.seed);
  bool tr_no_rectify = false, tr_quiet = false;
  tr->add_flag("--no-rectify", tr_no_rectify, "plain adaptive-moment updates");
  tr->add_flag("--quiet", tr_quiet, "suppress the per-epoch log");

  // --- eval ------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "classification accuracy and reconstruction error");
  std::string ev_ckpt, ev_config, ev_data, ev_split = "test", ev_train_split = "train", ev_out;
  real ev_seg_fraction = 0;
  uint64_t ev_seed = 1;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--config", ev_config)->required();
  ev->add_option("--data", ev_data, "dataset root")->required();
  ev->add_option("--split", ev_split, "split to evaluate");
  ev->add_option("--train-split", ev_train_split, "split used to fit the part mapping");
  ev->add_option("--seg-fraction", ev_seg_fraction,
                 "also run part segmentation with this labeled fraction");
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_option("--seed", ev_seed);

  // --- sweep -----------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "noise-robustness sweep");
  std::string sw_ckpt, sw_config, sw_data, sw_split = "test", sw_mode = "perturb", sw_levels, sw_out;
  uint64_t sw_seed = 1;
  sw->add_option("--ckpt", sw_ckpt)->required();
  sw->add_option("--config", sw_config)->required();
  sw->add_option("--data", sw_data)->required();
  sw->add_option("--split", sw_split);
  sw->add_option("--mode", sw_mode, "perturb|outliers")
      ->check(CLI::IsMember({"perturb", "outliers"}));
  sw->add_option("--levels", sw_levels, "comma-separated noise levels");
  sw->add_option("--out", sw_out)->required();
  sw->add_option("--seed", sw_seed);

  // --- perturb ---------------------------------------------------------
  auto* pe = app.add_subcommand("perturb", "latent-dimension sweep reconstructions");
  std::string pe_ckpt, pe_config, pe_cloud, pe_values, pe_out;
  int64_t pe_dim = 0;
  int64_t pe_steps = 5;
  std::vector<real> pe_range{-5, 5};
  pe->add_option("--ckpt", pe_ckpt)->required();
  pe->add_option("--config", pe_config)->required();
  pe->add_option("--cloud", pe_cloud, "input cloud file")->required();
  pe->add_option("--dim", pe_dim, "latent dimension to vary")->required();
  pe->add_option("--range", pe_range, "low high")->expected(2);
  pe->add_option("--steps", pe_steps, "values across the range")->check(CLI::PositiveNumber);
  pe->add_option("--values", pe_values, "explicit comma-separated values (overrides range)");
  pe->add_option("--out", pe_out)->required();

  // --- parts -----------------------------------------------------------
  auto* pa = app.add_subcommand("parts", "per-point capsule assignment");
  std::string pa_ckpt, pa_config, pa_cloud, pa_out;
  pa->add_option("--ckpt", pa_ckpt)->required();
  pa->add_option("--config", pa_config)->required();
  pa->add_option("--cloud", pa_cloud, "input cloud file")->required();
  pa->add_option("--out", pa_out)->required();

  // --- verify ----------------------------------------------------------
  auto* vf = app.add_subcommand("verify", "gradient checks, routing oracles, invariants");
  uint64_t vf_seed = 7;
  std::string vf_out;
  vf->add_option("--seed", vf_seed);
  vf->add_option("--out", vf_out, "optional directory for the CSV report");

  CLI11_PARSE(app, argc, argv);

  if (app.got_subcommand(gen)) {
    const std::vector<ShapeKind> kinds = parse_shapes(gen_shapes);
    const DatasetManifest m =
        generate_dataset(gen_out, gen_split, kinds, gen_per_class, gen_points, gen_seed);
    write_run_json((fs::path(gen_out) / gen_split).string(), "gen", gen_seed, nullptr, args);
    std::printf("gen split=%s classes=%zu per_class=%lld points=%lld files=%zu out=%s\n",
                gen_split.c_str(), kinds.size(), static_cast<long long>(gen_per_class),
                static_cast<long long>(gen_points), m.entries.size(), gen_out.c_str());
    return 0;
  }

  if (app.got_subcommand(tr)) {
    ModelConfig config = tr_model.resolve();
    tr_opts.rectify = !tr_no_rectify;
    tr_opts.verbose = !tr_quiet;
    const Dataset data = load_dataset(tr_data, tr_split);
    TrainResult res = train(config, data, tr_opts);
    ensure_dir(tr_out);
    save_config((fs::path(tr_out) / "config.cfg").string(), config);
    save_checkpoint((fs::path(tr_out) / "model.ckpt").string(), res.best_state);
    save_checkpoint((fs::path(tr_out) / "final.ckpt").string(), res.final_state);
    write_metrics_csv((fs::path(tr_out) / "metrics.csv").string(), res.log);
    write_run_json(tr_out, "train", tr_opts.seed, &config, args);
    const EpochMetrics last = res.log.empty() ? EpochMetrics{} : res.log.back();
    std::printf(
        "train epochs=%zu best_epoch=%lld val_cd=%.17g val_acc=%.17g loss=%.17g aborted=%d "
        "out=%s\n",
        res.log.size(), static_cast<long long>(res.best_epoch), last.cd, last.accuracy,
        last.loss, res.aborted ? 1 : 0, tr_out.c_str());
    return res.aborted ? 1 : 0;
  }

  if (app.got_subcommand(ev)) {
    const ModelConfig config = load_config(ev_config);
    ModelState state = load_model(ev_ckpt, config);
    const Dataset data = load_dataset(ev_data, ev_split);
    Metrics m = evaluate(config, state, data);
    if (ev_seg_fraction > 0) {
      const Dataset fit_data = load_dataset(ev_data, ev_train_split);
      const Metrics seg = segment_eval(config, state, fit_data, data, ev_seg_fraction, ev_seed);
      m.seg_accuracy = seg.seg_accuracy;
      m.seg_iou = seg.seg_iou;
    }
    ensure_dir(ev_out);
    {
      const std::string path = (fs::path(ev_out) / "eval.csv").string();
      std::ofstream f(path);
      if (!f) throw IoError("cannot open '" + path + "' for writing");
      f << "accuracy,cd,seg_accuracy,seg_iou\n";
      char buf[200];
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", m.accuracy, m.cd_mean,
                    m.seg_accuracy, m.seg_iou);
      f << buf;
    }
    write_run_json(ev_out, "eval", ev_seed, &config, args);
    std::printf("eval accuracy=%.17g cd=%.17g cd_x1e3=%.17g seg_accuracy=%.17g seg_iou=%.17g "
                "samples=%zu\n",
                m.accuracy, m.cd_mean, m.cd_mean * 1000, m.seg_accuracy, m.seg_iou, data.size());
    return 0;
  }

  if (app.got_subcommand(sw)) {
    const ModelConfig config = load_config(sw_config);
    ModelState state = load_model(sw_ckpt, config);
    const Dataset data = load_dataset(sw_data, sw_split);
    const SweepMode::Kind mode = sw_mode == "perturb" ? SweepMode::Perturb : SweepMode::Outliers;
    std::vector<real> levels = sw_levels.empty()
                                   ? (mode == SweepMode::Perturb
                                          ? std::vector<real>{0, real(0.05), real(0.1),
                                                              real(0.15), real(0.2)}
                                          : std::vector<real>{0, 100, 200, 400})
                                   : parse_reals(sw_levels);
    const std::vector<SweepRow> rows = noise_sweep(config, state, data, mode, levels, sw_seed);
    ensure_dir(sw_out);
    write_sweep_csv((fs::path(sw_out) / "sweep.csv").string(), rows);
    write_run_json(sw_out, "sweep", sw_seed, &config, args);
    std::printf("sweep mode=%s rows=%zu samples=%zu out=%s\n", sw_mode.c_str(), rows.size(),
                data.size(), sw_out.c_str());
    return 0;
  }

  if (app.got_subcommand(pe)) {
    const ModelConfig config = load_config(pe_config);
    ModelState state = load_model(pe_ckpt, config);
    PointCloud cloud = load_cloud(pe_cloud);
    std::vector<real> values;
    if (!pe_values.empty()) {
      values = parse_reals(pe_values);
    } else {
      const real lo = pe_range[0], hi = pe_range[1];
      for (int64_t k = 0; k < pe_steps; ++k) {
        values.push_back(pe_steps == 1
                             ? lo
                             : lo + (hi - lo) * static_cast<real>(k) /
                                   static_cast<real>(pe_steps - 1));
      }
    }
    const LatentSweep sweep = latent_perturb(config, state, cloud, pe_dim, values);
    ensure_dir(pe_out);
    save_cloud((fs::path(pe_out) / "base.xyz").string(), sweep.base);
    {
      const std::string path = (fs::path(pe_out) / "perturb.csv").string();
      std::ofstream f(path);
      if (!f) throw IoError("cannot open '" + path + "' for writing");
      f << "value,cd_to_base\n";
      char buf[128];
      for (size_t k = 0; k < values.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", values[k], sweep.cd_to_base[k]);
        f << buf;
        save_cloud((fs::path(pe_out) / ("perturb_" + std::to_string(k) + ".xyz")).string(),
                   sweep.clouds[k]);
      }
    }
    write_run_json(pe_out, "perturb", 0, &config, args);
    std::printf("perturb dim=%lld clouds=%zu out=%s\n", static_cast<long long>(pe_dim),
                sweep.clouds.size(), pe_out.c_str());
    return 0;
  }

  if (app.got_subcommand(pa)) {
    const ModelConfig config = load_config(pa_config);
    ModelState state = load_model(pa_ckpt, config);
    PointCloud cloud = load_cloud(pa_cloud);
    const std::vector<int64_t> assign = part_assign(config, state, cloud);
    PointCloud out = cloud;
    out.part_labels = assign;
    ensure_dir(pa_out);
    save_cloud((fs::path(pa_out) / "parts.xyz").string(), out);
    write_run_json(pa_out, "parts", 0, &config, args);
    std::set<int64_t> used(assign.begin(), assign.end());
    std::printf("parts points=%lld capsules_used=%zu out=%s\n",
                static_cast<long long>(cloud.count), used.size(), pa_out.c_str());
    return 0;
  }

  if (app.got_subcommand(vf)) {
    const std::vector<CheckResult> checks = run_verification(vf_seed);
    int64_t failed = 0;
    for (const CheckResult& c : checks) {
      if (!c.passed) ++failed;
      std::fprintf(stderr, "[%s] %s (%.1f ms)%s%s\n", c.passed ? "ok" : "FAIL", c.name.c_str(),
                   c.millis, c.detail.empty() ? "" : ": ", c.detail.c_str());
    }
    if (!vf_out.empty()) {
      ensure_dir(vf_out);
      const std::string path = (fs::path(vf_out) / "verify.csv").string();
      std::ofstream f(path);
      if (!f) throw IoError("cannot open '" + path + "' for writing");
      f << "check,passed,millis\n";
      char buf[256];
      for (const CheckResult& c : checks) {
        std::snprintf(buf, sizeof buf, "%s,%d,%.3f\n", c.name.c_str(), c.passed ? 1 : 0,
                      c.millis);
        f << buf;
      }
      write_run_json(vf_out, "verify", vf_seed, nullptr, args);
    }
    std::printf("verify checks=%zu failed=%lld\n", checks.size(),
                static_cast<long long>(failed));
    return failed == 0 ? 0 : 1;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
