// gvs: command-line driver for scene generation, training, evaluation,
// rendering, gradient verification and kernel benchmarks.
//
// Exit codes: 0 success, 1 usage error, 2 data/config error, 3 verification
// failure. GVS_THREADS overrides --threads.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "gvs/gradcheck_suite.hpp"
#include "gvs/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gvs;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Content hash over the named input files (path + bytes), or over the
// literal key when a command has no file inputs.
std::string input_hash(const std::vector<fs::path>& files, const std::string& extra = "") {
  std::string blob = extra;
  for (const fs::path& f : files) {
    blob += f.filename().string();
    blob += read_file(f);
  }
  return "sha256:" + sha256_hex(blob);
}

struct ManifestWriter {
  nlohmann::json j;
  fs::path path;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  ManifestWriter(const std::string& command, const fs::path& dir) {
    j["command"] = command;
    path = dir / "run_manifest.json";
  }
  void finish() {
    j["duration_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream os(path);
    os << j.dump(1) << "\n";
  }
};

std::vector<fs::path> list_scene_dirs(const std::string& data_dir) {
  std::vector<fs::path> dirs;
  if (!fs::is_directory(data_dir)) throw std::runtime_error("not a directory: " + data_dir);
  for (const auto& e : fs::directory_iterator(data_dir))
    if (e.is_directory() && fs::exists(e.path() / "scene.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw std::runtime_error("no scene containers under " + data_dir);
  return dirs;
}

int cmd_gen(std::uint64_t seed, std::size_t scenes, std::size_t objects, std::size_t views,
            const std::string& size, const std::string& out) {
  std::size_t w = 0, h = 0;
  if (std::sscanf(size.c_str(), "%zux%zu", &w, &h) != 2 || w == 0 || h == 0) {
    std::cerr << "gen: bad --size '" << size << "', expected WxH\n";
    return kExitUsage;
  }
  ManifestWriter manifest("gen", out);
  SceneGenConfig cfg;
  cfg.n_objects = objects;
  cfg.n_views = views;
  cfg.image_width = w;
  cfg.image_height = h;
  for (std::size_t s = 0; s < scenes; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04zu", s);
    try {
      SyntheticScene scene = generate_scene(seed + s, cfg);
      write_scene(scene, (fs::path(out) / name).string());
    } catch (const std::exception& e) {
      std::cerr << "gen: scene " << s << " (seed " << seed + s << "): " << e.what() << "\n";
      return kExitData;
    }
  }
  manifest.j["seed"] = seed;
  manifest.j["input_hash"] = input_hash({}, "gen:" + std::to_string(seed) + ":" +
                                                std::to_string(scenes) + ":" +
                                                std::to_string(objects) + ":" +
                                                std::to_string(views) + ":" + size);
  manifest.j["outputs"] = {out};
  manifest.finish();
  std::cout << "wrote " << scenes << " scene(s) to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, std::size_t holdout) {
  PipelineConfig cfg;
  try {
    nlohmann::json j;
    std::ifstream is(config_path);
    if (!is) throw std::runtime_error("cannot open config " + config_path);
    is >> j;
    cfg = config_from_json(j);
  } catch (const std::exception& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitData;
  }
  std::vector<SyntheticScene> train_scenes, val_scenes;
  std::vector<fs::path> scene_files;
  try {
    auto dirs = list_scene_dirs(data_dir);
    if (holdout >= dirs.size())
      throw std::runtime_error("holdout " + std::to_string(holdout) + " >= scene count " +
                               std::to_string(dirs.size()));
    for (std::size_t i = 0; i < dirs.size(); ++i) {
      scene_files.push_back(dirs[i] / "scene.json");
      (i + holdout < dirs.size() ? train_scenes : val_scenes)
          .push_back(read_scene(dirs[i].string()));
    }
  } catch (const std::exception& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitData;
  }

  ManifestWriter manifest("train", out_dir);
  manifest.j["config"] = config_to_json(cfg);
  manifest.j["seed"] = cfg.seed;
  manifest.j["input_hash"] = input_hash(scene_files, read_file(config_path));

  fs::create_directories(out_dir);
  TrainState state = make_train_state(cfg);
  TrainResult result;
  try {
    result = train(cfg, train_scenes, val_scenes, state,
                   (fs::path(out_dir) / "last_good").string());
  } catch (const TrainDiverged& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitVerify;
  } catch (const std::exception& e) {
    std::cerr << "train: " << e.what() << "\n";
    return kExitData;
  }
  std::ofstream csv(fs::path(out_dir) / "metrics.csv");
  csv << result.csv_header << "\n";
  for (const auto& row : result.csv_rows) csv << row << "\n";
  save_checkpoint((fs::path(out_dir) / "checkpoint").string(), cfg, state.model);
  manifest.j["outputs"] = {(fs::path(out_dir) / "metrics.csv").string(),
                           (fs::path(out_dir) / "checkpoint").string()};
  manifest.finish();
  std::cout << "trained " << cfg.epochs << " epoch(s); metrics at " << out_dir
            << "/metrics.csv\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& data_dir, double iou,
             const std::string& out_dir) {
  Checkpoint ck;
  std::vector<SyntheticScene> scenes;
  std::vector<fs::path> scene_files;
  try {
    ck = load_checkpoint(ckpt_dir);
    for (const auto& d : list_scene_dirs(data_dir)) {
      scene_files.push_back(d / "scene.json");
      scenes.push_back(read_scene(d.string()));
    }
  } catch (const std::exception& e) {
    std::cerr << "eval: " << e.what() << "\n";
    return kExitData;
  }
  ManifestWriter manifest("eval", out_dir);
  manifest.j["config"] = config_to_json(ck.config);
  manifest.j["seed"] = ck.config.seed;
  manifest.j["input_hash"] = input_hash(scene_files, std::to_string(iou));

  std::vector<std::vector<Box3D>> preds, gts;
  for (const auto& scene : scenes) {
    StepResult step = forward_step(ck.config, scene, ck.model, 0, /*with_grad=*/false);
    preds.push_back(predict_boxes(ck.config, step));
    gts.push_back(scene.gt_boxes());
  }
  EvalResult result = eval_map(preds, gts, iou);

  fs::create_directories(out_dir);
  std::ofstream pcsv(fs::path(out_dir) / "predictions.csv");
  pcsv << "scene_id,class_id,score,cx,cy,cz,l,w,h,yaw\n";
  for (std::size_t s = 0; s < preds.size(); ++s)
    for (const Box3D& b : preds[s])
      pcsv << s << "," << b.class_id << "," << csv_double(b.score) << ","
           << csv_double(b.center.x) << "," << csv_double(b.center.y) << ","
           << csv_double(b.center.z) << "," << csv_double(b.l) << "," << csv_double(b.w) << ","
           << csv_double(b.h) << "," << csv_double(b.yaw) << "\n";

  std::ofstream ecsv(fs::path(out_dir) / "eval.csv");
  ecsv << "class_id,AP\n";
  std::printf("%-10s %s\n", "class", "AP");
  for (auto [cls, ap] : result.per_class_ap) {
    ecsv << cls << "," << csv_double(ap) << "\n";
    std::printf("%-10d %.4f\n", cls, ap);
  }
  ecsv << "mAP," << csv_double(result.map) << "\n";
  std::printf("mAP@%.2f    %.4f\n", iou, result.map);
  manifest.j["outputs"] = {(fs::path(out_dir) / "eval.csv").string(),
                           (fs::path(out_dir) / "predictions.csv").string()};
  manifest.finish();
  return 0;
}

int cmd_render(const std::string& ckpt_dir, const std::string& scene_dir, std::size_t view,
               const std::string& out_file) {
  Checkpoint ck;
  SyntheticScene scene;
  try {
    ck = load_checkpoint(ckpt_dir);
    if (variant_rank(ck.config.variant) < 1)
      throw std::runtime_error("checkpoint variant '" +
                               std::string(variant_name(ck.config.variant)) +
                               "' has no Gaussian branch to render");
    scene = read_scene(scene_dir);
    if (view >= scene.cameras.size())
      throw std::runtime_error("view " + std::to_string(view) + " out of range (" +
                               std::to_string(scene.cameras.size()) + " views)");
  } catch (const std::exception& e) {
    std::cerr << "render: " << e.what() << "\n";
    return kExitData;
  }
  ManifestWriter manifest("render", fs::path(out_file).parent_path().empty()
                                        ? fs::path(".")
                                        : fs::path(out_file).parent_path());
  manifest.j["config"] = config_to_json(ck.config);
  manifest.j["seed"] = ck.config.seed;
  manifest.j["input_hash"] =
      input_hash({fs::path(scene_dir) / "scene.json"}, std::to_string(view));

  StepResult step = forward_step(ck.config, scene, ck.model, view, /*with_grad=*/false);
  Tensor img = clamp01(*step.rendered);
  write_ppm(out_file, img);
  double p = psnr(img, scene.images[view]);
  double s = ssim(img, scene.images[view]);
  std::printf("wrote %s  psnr=%.3f dB  ssim=%.4f\n", out_file.c_str(), p, s);
  manifest.j["outputs"] = {out_file};
  manifest.j["psnr"] = p;
  manifest.j["ssim"] = s;
  manifest.finish();
  return 0;
}

int cmd_gradcheck(const std::string& module) {
  ManifestWriter manifest("gradcheck", ".");
  manifest.j["seed"] = 0xc0ffee;
  manifest.j["input_hash"] = input_hash({}, "gradcheck:" + module);
  manifest.j["outputs"] = nlohmann::json::array();
  Rng rng(0xc0ffee);
  bool all = module == "all";
  bool any_failed = false;
  bool any_matched = false;
  for (const GradCheckCase& c : gradcheck_cases()) {
    if (!all && c.name != module) continue;
    any_matched = true;
    double worst = 0.0;
    for (int r = 0; r < c.repeats; ++r) worst = std::max(worst, c.run(rng));
    bool ok = worst < c.threshold;
    std::printf("%-28s max_rel_err=%.3e  threshold=%.0e  %s\n", c.name.c_str(), worst,
                c.threshold, ok ? "PASS" : "FAIL");
    if (!ok) {
      any_failed = true;
      std::cerr << "gradcheck: FAILED op '" << c.name << "'\n";
    }
  }
  if (all || module == "full_model") {
    any_matched = true;
    double err = gradcheck_full_model(0);
    bool ok = err < 1e-4;
    std::printf("%-28s max_rel_err=%.3e  threshold=%.0e  %s\n", "full_model", err, 1e-4,
                ok ? "PASS" : "FAIL");
    if (!ok) {
      any_failed = true;
      std::cerr << "gradcheck: FAILED op 'full_model'\n";
    }
  }
  if (!any_matched) {
    std::cerr << "gradcheck: unknown module '" << module << "'\n";
    return kExitUsage;
  }
  manifest.finish();
  return any_failed ? kExitVerify : 0;
}

struct BenchResult {
  double items_per_sec = 0.0;
  Tensor output;
};

BenchResult bench_once(const std::string& kernel) {
  Rng rng(42);
  BenchResult r;
  if (kernel == "lift") {
    SceneGenConfig sg;
    sg.n_objects = 0;
    sg.n_views = 8;
    SyntheticScene scene = generate_scene(1, sg);
    VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {16, 16, 8});
    std::vector<Tensor> maps;
    for (std::size_t v = 0; v < 8; ++v) {
      Tensor m({32, 16, 16});
      for (std::size_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform(-1, 1);
      maps.push_back(std::move(m));
    }
    auto t0 = std::chrono::steady_clock::now();
    r.output = lift_features(maps, scene.cameras, grid);
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.items_per_sec = static_cast<double>(grid.num_voxels()) / dt;
  } else if (kernel == "voxelize") {
    std::size_t n = 100000;
    std::vector<Vec3> pos(n);
    Tensor lat({n, kLatentDim});
    for (auto& p : pos)
      p = {rng.uniform(-2.2, 2.2), rng.uniform(-2.2, 2.2), rng.uniform(-0.2, 2.2)};
    for (std::size_t i = 0; i < lat.numel(); ++i) lat[i] = rng.uniform(-1, 1);
    VoxelGridSpec grid = make_grid({0, 0, 0}, 0.0, 0.25, {16, 16, 8});
    auto t0 = std::chrono::steady_clock::now();
    VoxelizeResult res = voxelize(pos, lat, grid);
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.items_per_sec = static_cast<double>(n) / dt;
    r.output = std::move(res.volume);
  } else if (kernel == "render") {
    Camera cam(make_intrinsics(57.6, 57.6, 32, 32), identity_extrinsics(), 0.25, 0.25, 64, 64);
    std::size_t n = 4096;
    std::vector<Vec3> pos(n);
    std::vector<std::array<double, 4>> rot(n, {1, 0, 0, 0});
    std::vector<std::array<double, 3>> scl(n, {0.08, 0.08, 0.08});
    Tensor alphas({n}), sh({n, kShDim});
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(1.0, 4.0)};
      alphas[i] = rng.uniform(0.05, 0.95);
      for (std::size_t j = 0; j < kShDim; ++j) sh[i * kShDim + j] = rng.uniform(-1, 1);
    }
    SplatScene scene = prepare_splats(pos, rot, scl, cam, 64, 64, {0, 0, 0});
    auto t0 = std::chrono::steady_clock::now();
    r.output = render_forward(scene, alphas, sh);
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.items_per_sec = 64.0 * 64.0 / dt;
  } else {
    throw std::runtime_error("unknown kernel '" + kernel + "'");
  }
  return r;
}

int cmd_bench(const std::string& kernel, const std::string& threads_list) {
  std::vector<int> thread_counts;
  std::stringstream ss(threads_list);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) thread_counts.push_back(std::atoi(tok.c_str()));
  if (thread_counts.empty()) {
    std::cerr << "bench: empty --threads list\n";
    return kExitUsage;
  }
  ManifestWriter manifest("bench", ".");
  manifest.j["seed"] = 42;
  manifest.j["input_hash"] = input_hash({}, "bench:" + kernel + ":" + threads_list);
  manifest.j["outputs"] = nlohmann::json::array();
  const char* unit = kernel == "lift" ? "voxels_per_sec"
                     : kernel == "voxelize" ? "gaussians_per_sec"
                                            : "pixels_per_sec";
  std::printf("kernel,threads,%s,bit_identical\n", unit);
  bool env_override = std::getenv("GVS_THREADS") != nullptr;
  Tensor reference;
  bool mismatch = false;
  for (std::size_t k = 0; k < thread_counts.size(); ++k) {
    if (!env_override) thread_count() = thread_counts[k];
    try {
      bench_once(kernel);  // warm-up
      std::vector<double> rates;
      Tensor out;
      for (int rep = 0; rep < 5; ++rep) {
        BenchResult r = bench_once(kernel);
        rates.push_back(r.items_per_sec);
        out = std::move(r.output);
      }
      std::sort(rates.begin(), rates.end());
      bool identical = true;
      if (k == 0) {
        reference = out;
      } else {
        identical = reference.same_shape(out) &&
                    std::memcmp(reference.data(), out.data(), out.numel() * 8) == 0;
        mismatch = mismatch || !identical;
      }
      std::printf("%s,%d,%.0f,%d\n", kernel.c_str(), thread_counts[k], rates[2],
                  identical ? 1 : 0);
    } catch (const std::exception& e) {
      std::cerr << "bench: " << e.what() << "\n";
      return kExitUsage;
    }
  }
  manifest.finish();
  if (mismatch) {
    std::cerr << "bench: outputs differ across thread counts\n";
    return kExitVerify;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GVSynergy-Det: dual Gaussian-voxel 3D detection on synthetic scenes"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "generate synthetic scene containers");
  std::uint64_t seed = 0;
  std::size_t scenes = 1, objects = 4, views = 8, view_k = 0, holdout = 1;
  std::string size = "64x64", out = "out", config_path, data_dir, ckpt_dir, scene_dir;
  std::string module = "all", kernel = "lift", threads = "1";
  double iou = 0.25;
  gen->add_option("--seed", seed, "base seed");
  gen->add_option("--scenes", scenes, "number of scenes");
  gen->add_option("--objects", objects, "objects per scene");
  gen->add_option("--views", views, "views per scene");
  gen->add_option("--size", size, "image size WxH");
  gen->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a pipeline variant");
  tr->add_option("--config", config_path, "pipeline config JSON")->required();
  tr->add_option("--data", data_dir, "directory of scene containers")->required();
  tr->add_option("--out", out, "output directory")->required();
  tr->add_option("--holdout", holdout, "trailing scenes held out for evaluation");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  ev->add_option("--data", data_dir, "directory of scene containers")->required();
  ev->add_option("--iou", iou, "IoU threshold (0.25 or 0.5)");
  ev->add_option("--out", out, "output directory");

  auto* rd = app.add_subcommand("render", "render one view from a checkpoint");
  rd->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
  rd->add_option("--scene", scene_dir, "scene container")->required();
  rd->add_option("--view", view_k, "view index");
  rd->add_option("--out", out, "output PPM path");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--module", module, "all or a case name");

  auto* bn = app.add_subcommand("bench", "kernel throughput benchmarks");
  bn->add_option("--kernel", kernel, "lift | voxelize | render");
  bn->add_option("--threads", threads, "comma-separated thread counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen(seed, scenes, objects, views, size, out);
    if (tr->parsed()) return cmd_train(config_path, data_dir, out, holdout);
    if (ev->parsed()) return cmd_eval(ckpt_dir, data_dir, iou, out);
    if (rd->parsed())
      return cmd_render(ckpt_dir, scene_dir, view_k, out == "out" ? "render.ppm" : out);
    if (gc->parsed()) return cmd_gradcheck(module);
    if (bn->parsed()) return cmd_bench(kernel, threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
