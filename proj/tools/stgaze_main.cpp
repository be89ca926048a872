// stgaze: synthesize datasets, train, evaluate, predict, and gradient-check
// the gaze estimation stack. Machine-readable output (JSON lines / CSV) goes
// to stdout, human-readable notes to stderr.
//
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure,
// 5 checkpoint/architecture mismatch.

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stgaze/checkpoint.hpp"
#include "stgaze/errors.hpp"
#include "stgaze/gradcheck_suite.hpp"
#include "stgaze/losses.hpp"
#include "stgaze/model.hpp"
#include "stgaze/runconfig.hpp"
#include "stgaze/sha256.hpp"
#include "stgaze/synth.hpp"
#include "stgaze/train.hpp"

namespace fs = std::filesystem;
using namespace stgaze;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitCheckpoint = 5;

RunConfig load_config(const std::string& path, int threads_override = 0) {
  RunConfig cfg = path.empty() ? RunConfig() : RunConfig::from_file(path);
  if (const char* seed_env = std::getenv("STGAZE_SEED")) {
    cfg.set("scene.seed", seed_env);
    cfg.set("train.seed", seed_env);
  }
  if (threads_override > 0) cfg.set("train.threads", std::to_string(threads_override));
  return cfg;
}

std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

void apply_ablation(ModelConfig& cfg, const std::string& name) {
  if (name == "none" || name.empty()) return;
  if (name == "no_eca") {
    cfg.use_eca = false;
  } else if (name == "no_sam") {
    cfg.use_sam = false;
  } else if (name == "no_gru") {
    cfg.use_gru = false;
  } else if (name == "pool_pre_gru") {
    cfg.pool_before_gru = true;
  } else {
    throw ConfigError("unknown ablation '" + name +
                      "' (expected none|no_eca|no_sam|no_gru|pool_pre_gru|all)");
  }
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, int sequences,
              const std::string& split) {
  if (sequences < 1) throw ConfigError("sequences must be >= 1");
  RunConfig cfg = load_config(config_path);
  SceneParams scene = cfg.scene();
  const int frames = scene.sequence_length;

  fs::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.split = split;
  manifest.params = scene;
  manifest.seed = scene.seed;
  manifest.frames_per_sequence = frames;

  std::uint64_t bytes = 0;
  for (int i = 0; i < sequences; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%06d.stgz", i);
    const SequenceSample sample =
        gen_sequence(frames, scene, derive_seed(scene.seed, static_cast<std::uint64_t>(i)),
                     static_cast<std::uint64_t>(i));
    const std::string path = (fs::path(out_dir) / name).string();
    write_sequence(sample, path);
    bytes += static_cast<std::uint64_t>(fs::file_size(path));
    manifest.files.emplace_back(name);
  }
  const std::string manifest_path =
      (fs::path(out_dir) / ("manifest_" + split + ".json")).string();
  write_manifest(manifest, manifest_path);
  bytes += static_cast<std::uint64_t>(fs::file_size(manifest_path));

  std::printf("{\"sequences\":%d,\"frames\":%d,\"bytes\":%" PRIu64
              ",\"sha256_of_manifest\":\"%s\"}\n",
              sequences, sequences * frames, bytes, sha256_file(manifest_path).c_str());
  return kExitOk;
}

DiskSource open_split(const std::string& data_dir, const std::string& split) {
  const std::string path = (fs::path(data_dir) / ("manifest_" + split + ".json")).string();
  if (!fs::exists(path)) throw IoError("dataset: missing manifest '" + path + "'");
  return DiskSource(read_manifest(path), data_dir);
}

int run_one_training(const RunConfig& cfg, const std::string& ablation,
                     const std::string& data_dir, const std::string& out_dir,
                     double* final_val_ang) {
  ModelConfig mcfg = cfg.model();
  apply_ablation(mcfg, ablation);
  ParameterStore<float> store(mcfg.init_seed);
  StGazeModel<float> model(mcfg, store);

  DiskSource train_set = open_split(data_dir, "train");
  DiskSource val_set = open_split(data_dir, "val");

  TrainConfig tcfg = cfg.train();
  tcfg.out_dir = out_dir;
  ScreenGeometry geom = cfg.screen();

  std::printf("{\"ablation\":\"%s\",\"parameters\":%lld,\"train_sequences\":%d,"
              "\"val_sequences\":%d,\"epochs\":%d,\"batch_size\":%d,\"base_lr\":%.17g}\n",
              ablation.empty() ? "none" : ablation.c_str(),
              static_cast<long long>(store.total_elements()), train_set.size(), val_set.size(),
              tcfg.epochs, tcfg.batch_size, tcfg.effective_base_lr());
  std::fflush(stdout);

  TrainResult result = train(model, store, train_set, val_set, geom, tcfg,
                             [](const EpochRecord& rec) {
                               std::printf("%s\n", rec.to_json().c_str());
                               std::fflush(stdout);
                             });
  if (result.halted_non_finite) {
    std::fprintf(stderr, "training halted on non-finite loss; last checkpoint retained in %s\n",
                 out_dir.c_str());
    return kExitNumeric;
  }
  if (final_val_ang != nullptr) *final_val_ang = result.best_val_angular_deg;
  std::fprintf(stderr, "best val angular error: %.4f deg (epoch %d)\n",
               result.best_val_angular_deg, result.best_epoch);
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& ablation, int threads) {
  RunConfig cfg = load_config(config_path, threads);
  if (ablation != "all") {
    return run_one_training(cfg, ablation, data_dir, out_dir, nullptr);
  }
  // Ablation matrix: the full model plus the four core-module variants.
  const std::vector<std::string> variants = {"none", "no_eca", "no_sam", "no_gru", "pool_pre_gru"};
  std::string table = "{\"ablation_matrix\":[";
  bool first = true;
  for (const auto& v : variants) {
    double val_ang = 0.0;
    const int rc = run_one_training(cfg, v, data_dir, (fs::path(out_dir) / v).string(), &val_ang);
    if (rc != kExitOk) return rc;
    if (!first) table += ",";
    first = false;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "{\"variant\":\"%s\",\"best_val_ang_deg\":%.17g}", v.c_str(),
                  val_ang);
    table += buf;
  }
  table += "]}";
  std::printf("%s\n", table.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& data_dir, const std::string& split, int threads) {
  RunConfig cfg = load_config(config_path, threads);
  ModelConfig mcfg = cfg.model();
  ParameterStore<float> store(mcfg.init_seed);
  StGazeModel<float> model(mcfg, store);
  load_checkpoint(store, checkpoint);

  DiskSource data = open_split(data_dir, split);
  TrainConfig tcfg = cfg.train();
  const BatchMetrics m = evaluate<float>(model, data, cfg.screen(), tcfg.threads);
  std::printf("{\"split\":\"%s\",\"count\":%lld,\"mean_ang_deg\":%.17g,\"std_ang_deg\":%.17g,"
              "\"mean_pog_cm\":%.17g,\"mean_pog_px\":%.17g,\"pog_misses\":%lld}\n",
              json_escape(split).c_str(), static_cast<long long>(m.count), m.mean_angular_deg,
              m.std_angular_deg, m.mean_pog_cm, m.mean_pog_px,
              static_cast<long long>(m.pog_misses));
  return kExitOk;
}

int cmd_predict(const std::string& config_path, const std::string& checkpoint,
                const std::string& sequence_file) {
  RunConfig cfg = load_config(config_path);
  ModelConfig mcfg = cfg.model();
  ParameterStore<float> store(mcfg.init_seed);
  StGazeModel<float> model(mcfg, store);
  load_checkpoint(store, checkpoint);
  const ScreenGeometry geom = cfg.screen();

  const SequenceSample sample = read_sequence(sequence_file);
  // Inference mode: the stream states carry across the whole file.
  StreamState<float> left = model.zero_state();
  StreamState<float> right = model.zero_state();
  std::printf("frame,pitch_deg,yaw_deg,pog_x_cm,pog_y_cm\n");
  for (int t = 0; t < sample.frames(); ++t) {
    Tape<float> tape;
    std::vector<FrameInput<float>> frame;
    frame.push_back(FrameInput<float>{sample.eye_left[static_cast<std::size_t>(t)],
                                      sample.eye_right[static_cast<std::size_t>(t)],
                                      sample.face[static_cast<std::size_t>(t)]});
    auto fwd = model.forward_model(tape, frame, left, right);
    left = fwd.state_left;
    right = fwd.state_right;
    const GazeAngles pred = fwd.frames[0].final_prediction.angles();
    PointCm pog;
    if (pog_cm(angles_to_vector(pred), sample.origin_cm, geom, &pog)) {
      std::printf("%d,%.6f,%.6f,%.6f,%.6f\n", t, rad_to_deg(pred.pitch), rad_to_deg(pred.yaw),
                  pog.x, pog.y);
    } else {
      std::printf("%d,%.6f,%.6f,nan,nan\n", t, rad_to_deg(pred.pitch), rad_to_deg(pred.yaw));
    }
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& scale_name) {
  GradcheckScale scale;
  if (scale_name == "tiny") {
    scale = GradcheckScale::kTiny;
  } else if (scale_name == "small") {
    scale = GradcheckScale::kSmall;
  } else {
    throw ConfigError("unknown gradcheck scale '" + scale_name + "' (expected tiny|small)");
  }
  const SuiteReport report = run_gradcheck_suite(scale);
  std::fprintf(stderr, "%-20s %-12s %-8s %s\n", "family", "worst_rel", "seeds", "worst parameter");
  for (const auto& f : report.families) {
    std::fprintf(stderr, "%-20s %-12.3e %-8d %s\n", f.family.c_str(), f.worst_rel_err, f.seeds,
                 f.worst_param.c_str());
  }
  std::fprintf(stderr, "total: %.1f s, %zu families\n", report.total_seconds,
               report.families.size());
  std::string json = "{\"families\":[";
  for (std::size_t i = 0; i < report.families.size(); ++i) {
    const auto& f = report.families[i];
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%s{\"family\":\"%s\",\"worst_rel_err\":%.17g,\"seeds\":%d,\"entries\":%lld}",
                  i ? "," : "", f.family.c_str(), f.worst_rel_err, f.seeds,
                  static_cast<long long>(f.entries));
    json += buf;
  }
  char tail[96];
  std::snprintf(tail, sizeof(tail), "],\"total_seconds\":%.3f,\"pass\":%s}",
                report.total_seconds, report.pass() ? "true" : "false");
  json += tail;
  std::printf("%s\n", json.c_str());
  return report.pass() ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video-based gaze estimation from scratch: dual-stream encoders, attention "
               "fusion, spatio-temporal recurrence, synthetic data, training and evaluation."};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, ablation = "none";
  std::string checkpoint, sequence_file, scale = "tiny";
  std::string synth_split = "train", eval_split = "val";
  int sequences = 16;
  int threads = 0;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic gaze-video dataset");
  synth->add_option("--config", config_path, "run configuration file");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--sequences", sequences, "number of sequences to generate (default 16)");
  synth->add_option("--split", synth_split, "split name for the manifest (default train)");

  auto* train_cmd = app.add_subcommand("train", "Train on a synthetic dataset");
  train_cmd->add_option("--config", config_path, "run configuration file");
  train_cmd->add_option("--data", data_dir, "dataset directory with train/val manifests")
      ->required();
  train_cmd->add_option("--out", out_dir, "output directory for checkpoints and metrics")
      ->required();
  train_cmd->add_option("--ablation", ablation,
                        "none|no_eca|no_sam|no_gru|pool_pre_gru|all (default none)");
  train_cmd->add_option("--threads", threads,
                        "worker threads per batch; reduction order stays fixed");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--config", config_path, "run configuration file");
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--split", eval_split, "split to evaluate (default val)");
  eval_cmd->add_option("--threads", threads, "evaluation worker threads");

  auto* predict = app.add_subcommand("predict", "Per-frame predictions for one sequence file");
  predict->add_option("--config", config_path, "run configuration file");
  predict->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  predict->add_option("--sequence-file", sequence_file, "sequence file to predict")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gradcheck->add_option("--scale", scale, "tiny|small (default tiny)");

  std::ostringstream key_help;
  RunConfig::print_key_help(key_help);
  app.footer(key_help.str());

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(config_path, out_dir, sequences, synth_split);
    if (train_cmd->parsed()) return cmd_train(config_path, data_dir, out_dir, ablation, threads);
    if (eval_cmd->parsed()) return cmd_eval(config_path, checkpoint, data_dir, eval_split, threads);
    if (predict->parsed()) return cmd_predict(config_path, checkpoint, sequence_file);
    if (gradcheck->parsed()) return cmd_gradcheck(scale);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const CheckpointMismatch& e) {
    std::fprintf(stderr, "checkpoint mismatch: %s\n", e.what());
    return kExitCheckpoint;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitIo;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
