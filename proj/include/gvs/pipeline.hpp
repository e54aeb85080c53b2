#pragma once

// End-to-end wiring of the four pipeline variants:
//   baseline      lift -> FPN -> head, detection loss only
//   aux_loss      adds the Gaussian branch and lambda_render * L_render,
//                 but the detector still consumes V (V_e := V)
//   direct_fusion concatenation fusion with fixed 0.5/0.5 weights
//   full          adaptive softmax weights over the concatenated features
// plus SGD+momentum training, per-epoch metrics, and checkpoint I/O.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gvs/detection.hpp"
#include "gvs/gaussians.hpp"
#include "gvs/render.hpp"
#include "gvs/scenegen.hpp"
#include "gvs/voxelfusion.hpp"

namespace gvs {

enum class Variant { baseline, aux_loss, direct_fusion, full };

inline int variant_rank(Variant v) { return static_cast<int>(v); }

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::aux_loss: return "aux_loss";
    case Variant::direct_fusion: return "direct_fusion";
    case Variant::full: return "full";
  }
  return "full";
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::baseline, Variant::aux_loss, Variant::direct_fusion, Variant::full})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

struct PipelineConfig {
  Variant variant = Variant::full;
  std::array<std::size_t, 3> grid_dims{16, 16, 8};
  double voxel_size = 0.25;
  std::size_t channels = 32;  // C_f
  double lambda_render = 1.0;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  double tau_rel = 0.05;
  double d_min = 0.25;
  double d_max = 8.0;
  bool depth_supervision = false;
  std::size_t min_views = 3;
  std::size_t num_classes = kNumClasses;
  double score_threshold = 0.05;
  double nms_iou = 0.25;
};

inline VoxelGridSpec config_grid(const PipelineConfig& cfg) {
  return make_grid({0, 0, 0}, 0.0, cfg.voxel_size, cfg.grid_dims);
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  return {{"variant", variant_name(c.variant)},
          {"grid_dims", {c.grid_dims[0], c.grid_dims[1], c.grid_dims[2]}},
          {"voxel_size", c.voxel_size},
          {"channels", c.channels},
          {"lambda_render", c.lambda_render},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"tau_rel", c.tau_rel},
          {"d_min", c.d_min},
          {"d_max", c.d_max},
          {"depth_supervision", c.depth_supervision},
          {"min_views", c.min_views},
          {"num_classes", c.num_classes},
          {"score_threshold", c.score_threshold},
          {"nms_iou", c.nms_iou}};
}

// Unknown keys are rejected: configs are user-written and typos should fail.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"variant", "grid_dims", "voxel_size", "channels",
                                "lambda_render", "learning_rate", "momentum", "epochs",
                                "seed", "tau_rel", "d_min", "d_max", "depth_supervision",
                                "min_views", "num_classes", "score_threshold", "nms_iou"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw std::invalid_argument("config: unknown key '" + it.key() + "'");
  }
  PipelineConfig c;
  if (j.contains("variant")) c.variant = variant_from_name(j["variant"].get<std::string>());
  if (j.contains("grid_dims")) {
    auto d = j["grid_dims"];
    c.grid_dims = {d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()};
  }
  if (j.contains("voxel_size")) c.voxel_size = j["voxel_size"].get<double>();
  if (j.contains("channels")) c.channels = j["channels"].get<std::size_t>();
  if (j.contains("lambda_render")) c.lambda_render = j["lambda_render"].get<double>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("momentum")) c.momentum = j["momentum"].get<double>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("tau_rel")) c.tau_rel = j["tau_rel"].get<double>();
  if (j.contains("d_min")) c.d_min = j["d_min"].get<double>();
  if (j.contains("d_max")) c.d_max = j["d_max"].get<double>();
  if (j.contains("depth_supervision")) c.depth_supervision = j["depth_supervision"].get<bool>();
  if (j.contains("min_views")) c.min_views = j["min_views"].get<std::size_t>();
  if (j.contains("num_classes")) c.num_classes = j["num_classes"].get<std::size_t>();
  if (j.contains("score_threshold")) c.score_threshold = j["score_threshold"].get<double>();
  if (j.contains("nms_iou")) c.nms_iou = j["nms_iou"].get<double>();
  return c;
}

inline bool operator==(const PipelineConfig& a, const PipelineConfig& b) {
  return config_to_json(a) == config_to_json(b);
}

// ---------------------------------------------------------------------------
// Model parameters. Construction order is fixed so that every variant's
// parameter list is a prefix-extension of the previous one: the shared
// blocks receive identical RNG draws across variants.

struct ModelParams {
  ImageEncoderParams enc;
  FpnParams fpn;
  HeadParams head;

  struct GaussianBranch {
    DepthFeatureParams df;
    DepthHeadParams depth;
    RegressorParams reg;
    DecoderParams dec;
    GruParams gru;
  };
  std::optional<GaussianBranch> gauss;

  struct FusionBlocks {
    GaussianEncoderParams genc;
    FusionNetParams fuse;
  };
  std::optional<FusionBlocks> fusion;

  std::optional<WeightNetParams> wnet;
};

inline ModelParams init_model(const PipelineConfig& cfg) {
  Rng rng(cfg.seed);
  ModelParams m;
  m.enc = make_image_encoder(rng, cfg.channels);
  m.fpn = make_fpn(rng, cfg.channels);
  m.head = make_head(rng, cfg.channels, cfg.num_classes);
  int rank = variant_rank(cfg.variant);
  if (rank >= 1) {
    ModelParams::GaussianBranch gb;
    gb.df = make_depth_features(rng, cfg.channels);
    gb.depth = make_depth_head(rng, cfg.channels);
    gb.reg = make_regressor(rng, cfg.channels);
    gb.dec = make_decoder(rng);
    gb.gru = make_gru(rng);
    m.gauss = std::move(gb);
  }
  if (rank >= 2)
    m.fusion = ModelParams::FusionBlocks{make_gaussian_encoder(rng, kLatentDim, cfg.channels),
                                         make_fusion_net(rng, cfg.channels)};
  if (rank >= 3) m.wnet = make_weight_net(rng, cfg.channels);
  return m;
}

// Visits every parameter tensor with a stable name, in the same order the
// training graph inserts them.
template <class Model, class Fn>
void for_each_param(Model& m, Fn&& fn) {
  auto conv = [&](const char* name, auto& layer) {
    fn(std::string(name) + ".w", layer.w);
    fn(std::string(name) + ".b", layer.b);
  };
  conv("enc.c1", m.enc.c1);
  conv("enc.c2", m.enc.c2);
  conv("enc.c3", m.enc.c3);
  conv("enc.proj", m.enc.proj);
  conv("fpn.lateral", m.fpn.lateral);
  conv("fpn.down", m.fpn.down);
  conv("fpn.smooth0", m.fpn.smooth0);
  conv("fpn.smooth1", m.fpn.smooth1);
  conv("head.center", m.head.center);
  conv("head.reg", m.head.reg);
  conv("head.cls", m.head.cls);
  if (m.gauss) {
    conv("df.c1", m.gauss->df.c1);
    conv("df.c2", m.gauss->df.c2);
    conv("depth.c1", m.gauss->depth.c1);
    conv("depth.c2", m.gauss->depth.c2);
    conv("reg.c1", m.gauss->reg.c1);
    conv("reg.c2", m.gauss->reg.c2);
    conv("dec.proj", m.gauss->dec.proj);
    conv("gru.z", m.gauss->gru.z);
    conv("gru.r", m.gauss->gru.r);
    conv("gru.h", m.gauss->gru.h);
  }
  if (m.fusion) {
    conv("genc.c1", m.fusion->genc.c1);
    conv("genc.c2", m.fusion->genc.c2);
    conv("fuse.c1", m.fusion->fuse.c1);
    conv("fuse.c2", m.fusion->fuse.c2);
  }
  if (m.wnet) conv("wnet.c", m.wnet->c);
}

inline std::size_t param_count(const ModelParams& m) {
  std::size_t n = 0;
  for_each_param(m, [&](const std::string&, const Tensor&) { ++n; });
  return n;
}

// Graph-side parameter ids, inserted in for_each_param order.
struct ModelIds {
  ImageEncoderIds enc;
  FpnIds fpn;
  HeadIds head;
  DepthFeatureIds df;
  ConvIds depth_c1, depth_c2;
  ConvIds reg_c1, reg_c2;
  ConvIds dec;
  GruIds gru;
  ConvIds genc_c1, genc_c2;
  ConvIds fuse_c1, fuse_c2;
  ConvIds wnet;
};

inline ModelIds insert_model(ad::Graph& g, const ModelParams& m) {
  ModelIds ids;
  ids.enc = insert_image_encoder(g, m.enc);
  ids.fpn = insert_fpn(g, m.fpn);
  ids.head = insert_head(g, m.head);
  if (m.gauss) {
    ids.df = insert_depth_features(g, m.gauss->df);
    ids.depth_c1 = insert_conv(g, m.gauss->depth.c1);
    ids.depth_c2 = insert_conv(g, m.gauss->depth.c2);
    ids.reg_c1 = insert_conv(g, m.gauss->reg.c1);
    ids.reg_c2 = insert_conv(g, m.gauss->reg.c2);
    ids.dec = insert_linear(g, m.gauss->dec.proj);
    ids.gru = insert_gru(g, m.gauss->gru);
  }
  if (m.fusion) {
    ids.genc_c1 = insert_conv(g, m.fusion->genc.c1);
    ids.genc_c2 = insert_conv(g, m.fusion->genc.c2);
    ids.fuse_c1 = insert_conv(g, m.fusion->fuse.c1);
    ids.fuse_c2 = insert_conv(g, m.fusion->fuse.c2);
  }
  if (m.wnet) ids.wnet = insert_conv(g, m.wnet->c);
  return ids;
}

// ---------------------------------------------------------------------------
// One forward (and optionally backward) pass over a scene.

struct Diagnostics {
  double occupancy_fill = 0.0;
  std::size_t dropped_gaussians = 0;
  std::size_t gaussian_count = 0;
  std::size_t quaternion_fallbacks = 0;
  RenderStats render_stats;
};

struct StepResult {
  double loss_total = 0.0;
  double l_center = 0.0, l_bbox = 0.0, l_cls = 0.0;
  std::optional<double> l_render;
  std::optional<double> l_depth;
  Diagnostics diag;
  std::vector<Tensor> grads;  // with_grad only; aligned with for_each_param
  std::vector<Tensor> centerness, regression, class_logits;  // per level values
  std::optional<Tensor> rendered;  // target-view render, unclamped
  std::size_t target_view = 0;
};

inline StepResult forward_step(const PipelineConfig& cfg, const SyntheticScene& scene,
                               const ModelParams& model, std::size_t target_view,
                               bool with_grad, bool bbox_surrogate_forward = false) {
  const std::size_t n_views = scene.cameras.size();
  if (n_views < cfg.min_views)
    throw std::invalid_argument("forward_step: scene has " + std::to_string(n_views) +
                                " views, config requires >= " + std::to_string(cfg.min_views));
  if (target_view >= n_views) target_view %= n_views;
  const int rank = variant_rank(cfg.variant);
  const VoxelGridSpec grid = config_grid(cfg);

  ad::Graph g;
  ModelIds ids = insert_model(g, model);
  StepResult res;
  res.target_view = target_view;

  // per-view image features
  std::vector<ad::ValueId> feats;
  feats.reserve(n_views);
  std::vector<ad::ValueId> images;
  for (std::size_t v = 0; v < n_views; ++v) {
    images.push_back(g.constant(scene.images[v]));
    feats.push_back(encode_image(g, images[v], ids.enc));
  }

  // lifted voxel volume V
  ad::ValueId volume = lift_op(g, feats, scene.cameras, grid);

  // Gaussian branch
  ad::ValueId v_e = volume;
  std::optional<ad::ValueId> l_render_id;
  std::optional<ad::ValueId> l_depth_id;
  if (rank >= 1) {
    const std::size_t feat_w = static_cast<std::size_t>(scene.cameras[0].feature_width());
    const std::size_t feat_h = static_cast<std::size_t>(scene.cameras[0].feature_height());
    GaussianBatch global;
    std::vector<ad::ValueId> depth_l1_terms;
    for (std::size_t v = 0; v < n_views; ++v) {
      ad::ValueId f_dep = depth_features(g, feats[v], ids.df);
      ad::ValueId depth = predict_depth(g, f_dep, ids.depth_c1, ids.depth_c2, cfg.d_min, cfg.d_max);
      GaussianBatch batch = regress_gaussians(g, f_dep, depth, scene.cameras[v], ids.reg_c1,
                                              ids.reg_c2, static_cast<int>(v));
      if (cfg.depth_supervision) {
        // target: exact ray-cast depth at the full-resolution center of each
        // feature pixel
        const Tensor& full = scene.depths[v];
        std::size_t W_full = full.dim(1);
        double inv_sx = 1.0 / scene.cameras[v].scale_x();
        double inv_sy = 1.0 / scene.cameras[v].scale_y();
        Tensor target({1, feat_h, feat_w});
        for (std::size_t fy = 0; fy < feat_h; ++fy)
          for (std::size_t fx2 = 0; fx2 < feat_w; ++fx2) {
            std::size_t px = std::min(static_cast<std::size_t>((fx2 + 0.5) * inv_sx), full.dim(1) - 1);
            std::size_t py = std::min(static_cast<std::size_t>((fy + 0.5) * inv_sy), full.dim(0) - 1);
            target[fy * feat_w + fx2] = full[py * W_full + px];
          }
        ad::ValueId diff = g.sub(depth, g.constant(target));
        ad::ValueId absdiff = g.add(g.relu(diff), g.relu(g.scale_add(diff, -1.0)));
        depth_l1_terms.push_back(g.mean_all(absdiff));
      }
      global = v == 0 ? batch
                      : fuse_multiview(g, global, batch, scene.cameras[v], feat_w, feat_h,
                                       cfg.tau_rel, ids.gru);
    }
    res.diag.gaussian_count = global.size();

    DecodedLatents dec = decode_latents(g, global.latent, ids.dec);
    res.diag.quaternion_fallbacks = dec.quaternion_fallbacks;

    const Camera& tcam = scene.cameras[target_view];
    auto splat = std::make_shared<SplatScene>(prepare_splats(
        global.positions, dec.rotations, dec.scales, tcam,
        static_cast<std::size_t>(tcam.width()), static_cast<std::size_t>(tcam.height()),
        {0.0, 0.0, 0.0}));
    res.diag.render_stats = splat->stats;
    ad::ValueId rendered = render_op(g, global.alpha, dec.sh, splat);
    res.rendered = g.value(rendered);
    l_render_id = render_loss(g, rendered, g.constant(scene.images[target_view]));

    if (!depth_l1_terms.empty()) {
      ad::ValueId acc = depth_l1_terms[0];
      for (std::size_t i = 1; i < depth_l1_terms.size(); ++i) acc = g.add(acc, depth_l1_terms[i]);
      l_depth_id = g.scale_add(acc, 1.0 / static_cast<double>(depth_l1_terms.size()));
    }

    auto bin = std::make_shared<VoxelBinning>(bin_gaussians(global.positions, grid));
    res.diag.dropped_gaussians = bin->dropped;
    Tensor occ = occupancy_from_binning(*bin);
    double fill = 0.0;
    for (std::size_t i = 0; i < occ.numel(); ++i) fill += occ[i];
    res.diag.occupancy_fill = fill / static_cast<double>(occ.numel());

    if (rank >= 2) {
      ad::ValueId v_g = scatter_mean_op(g, global.latent, bin);
      ad::ValueId encoded = encode_gaussian_volume(g, v_g, ids.genc_c1, ids.genc_c2);
      ad::ValueId masked = apply_occupancy(g, encoded, g.constant(occ));
      ad::ValueId alpha_v, alpha_g;
      if (rank >= 3) {
        AdaptiveWeights w = adaptive_weights(g, volume, masked, ids.wnet);
        alpha_v = w.alpha_v;
        alpha_g = w.alpha_g;
      } else {
        Tensor half({1, grid.dims[0], grid.dims[1], grid.dims[2]});
        for (std::size_t i = 0; i < half.numel(); ++i) half[i] = 0.5;
        alpha_v = g.constant(half);
        alpha_g = g.constant(half);
      }
      v_e = cross_enhance(g, volume, masked, alpha_v, alpha_g, ids.fuse_c1, ids.fuse_c2);
    }
  }

  // neck + head
  std::vector<ad::ValueId> levels = fpn_forward(g, v_e, ids.fpn);
  std::vector<HeadOutput> heads;
  std::vector<LevelTargets> targets;
  std::size_t p_total = 0;
  for (std::size_t lvl = 0; lvl < levels.size(); ++lvl) {
    heads.push_back(head_forward(g, levels[lvl], ids.head));
    targets.push_back(assign_targets(scene.gt_boxes(), level_grid(grid, lvl)));
    p_total += targets.back().positive.size();
  }

  // losses pooled across levels (positives from both levels form one pool)
  ad::ValueId center_id = g.constant(Tensor::scalar(0.0));
  ad::ValueId bbox_id = g.constant(Tensor::scalar(0.0));
  ad::ValueId cls_sum = g.constant(Tensor::scalar(0.0));
  for (std::size_t lvl = 0; lvl < levels.size(); ++lvl) {
    const LevelTargets& t = targets[lvl];
    const VoxelGridSpec lg = level_grid(grid, lvl);
    std::size_t n = t.num_voxels;
    Tensor one_hot({cfg.num_classes, lg.dims[0], lg.dims[1], lg.dims[2]});
    for (std::size_t i = 0; i < t.positive.size(); ++i)
      one_hot[static_cast<std::size_t>(t.class_of[i]) * n + t.positive[i]] = 1.0;
    cls_sum = g.add(cls_sum, loss_cls(g, heads[lvl].class_logits, one_hot, 1));
    if (t.positive.empty()) continue;
    double share = static_cast<double>(t.positive.size()) / static_cast<double>(p_total);
    ad::ValueId cent_flat = g.reshape(heads[lvl].centerness, {n});
    center_id = g.add(center_id,
                      g.scale_add(loss_center(g, cent_flat, t.positive, t.centerness), share));
    // per-positive regression rows [P,7]
    ad::ValueId reg_rows =
        g.gather_rows(g.transpose(g.reshape(heads[lvl].regression, {7, n})), t.positive);
    std::vector<Vec3> centers;
    std::vector<Box3D> tboxes;
    for (std::size_t i = 0; i < t.positive.size(); ++i) {
      centers.push_back(lg.voxel_center(t.positive[i]));
      const Box3D& gt = scene.objects[static_cast<std::size_t>(t.gt_index[i])].box;
      tboxes.push_back(gt);
    }
    bbox_id = g.add(bbox_id, g.scale_add(loss_bbox(g, reg_rows, centers, tboxes,
                                                   bbox_surrogate_forward),
                                         share));
  }
  ad::ValueId cls_id = g.scale_add(cls_sum, 1.0 / static_cast<double>(std::max<std::size_t>(p_total, 1)));

  ad::ValueId total = total_loss(g, center_id, bbox_id, cls_id, l_render_id, cfg.lambda_render);
  if (l_depth_id) total = g.add(total, *l_depth_id);

  res.l_center = g.value(center_id)[0];
  res.l_bbox = g.value(bbox_id)[0];
  res.l_cls = g.value(cls_id)[0];
  if (l_render_id) res.l_render = g.value(*l_render_id)[0];
  if (l_depth_id) res.l_depth = g.value(*l_depth_id)[0];
  res.loss_total = g.value(total)[0];

  for (std::size_t lvl = 0; lvl < levels.size(); ++lvl) {
    res.centerness.push_back(g.value(heads[lvl].centerness));
    res.regression.push_back(g.value(heads[lvl].regression));
    res.class_logits.push_back(g.value(heads[lvl].class_logits));
  }

  if (with_grad) {
    auto grad_map = g.backward(total);
    const auto& order = g.parameters();
    res.grads.reserve(order.size());
    for (ad::ValueId p : order) res.grads.push_back(std::move(grad_map.at(p)));
  }
  return res;
}

inline std::vector<Box3D> predict_boxes(const PipelineConfig& cfg, const StepResult& step) {
  DecodeParams dp;
  dp.score_threshold = cfg.score_threshold;
  dp.nms_iou = cfg.nms_iou;
  return decode_boxes(step.centerness, step.regression, step.class_logits, config_grid(cfg), dp);
}

// ---------------------------------------------------------------------------
// Training: plain SGD with momentum over shuffled scenes.

struct TrainState {
  ModelParams model;
  std::vector<Tensor> velocity;  // aligned with for_each_param
  std::uint64_t step = 0;
};

inline TrainState make_train_state(const PipelineConfig& cfg) {
  TrainState s;
  s.model = init_model(cfg);
  for_each_param(s.model,
                 [&](const std::string&, const Tensor& t) { s.velocity.emplace_back(t.shape()); });
  return s;
}

inline void sgd_update(TrainState& state, const std::vector<Tensor>& grads, double lr,
                       double momentum) {
  std::size_t i = 0;
  for_each_param(state.model, [&](const std::string&, Tensor& p) {
    Tensor& v = state.velocity[i];
    const Tensor& gr = grads[i];
    for (std::size_t k = 0; k < p.numel(); ++k) {
      v[k] = momentum * v[k] + gr[k];
      p[k] -= lr * v[k];
    }
    ++i;
  });
  ++state.step;
}

inline std::string csv_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct TrainResult {
  std::string csv_header = "epoch,loss_center,loss_bbox,loss_cls,loss_render,map25,psnr";
  std::vector<std::string> csv_rows;
};

inline Tensor clamp01(const Tensor& img) {
  Tensor out = img;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
  return out;
}

// Held-out evaluation: mAP@0.25 over the validation scenes plus PSNR of the
// first validation scene's view 0 (Gaussian variants only).
struct EvalMetrics {
  double map25 = 0.0;
  std::optional<double> psnr_view;
};

inline EvalMetrics evaluate(const PipelineConfig& cfg, const ModelParams& model,
                            const std::vector<SyntheticScene>& scenes) {
  EvalMetrics m;
  if (scenes.empty()) return m;
  std::vector<std::vector<Box3D>> preds, gts;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    StepResult step = forward_step(cfg, scenes[s], model, 0, /*with_grad=*/false);
    preds.push_back(predict_boxes(cfg, step));
    gts.push_back(scenes[s].gt_boxes());
    if (s == 0 && step.rendered)
      m.psnr_view = psnr(clamp01(*step.rendered), scenes[s].images[step.target_view]);
  }
  m.map25 = eval_map(preds, gts, 0.25).map;
  return m;
}

// Training diverged: thrown when a step produces a non-finite loss. The
// last-good checkpoint (previous epoch end) is saved before throwing when a
// directory is provided.
struct TrainDiverged : std::runtime_error {
  explicit TrainDiverged(const std::string& msg) : std::runtime_error(msg) {}
};

inline void save_checkpoint(const std::string& dir, const PipelineConfig& cfg,
                            const ModelParams& m);

inline TrainResult train(const PipelineConfig& cfg, const std::vector<SyntheticScene>& train_scenes,
                         const std::vector<SyntheticScene>& val_scenes, TrainState& state,
                         const std::string& abort_checkpoint_dir = "") {
  if (train_scenes.empty()) throw std::invalid_argument("train: need at least one scene");
  TrainResult result;
  Rng shuffle_rng(cfg.seed ^ 0x7a155e57c0ffee11ull);
  ModelParams last_good = state.model;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_scenes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double sum_center = 0, sum_bbox = 0, sum_cls = 0, sum_render = 0;
    bool have_render = false;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const SyntheticScene& scene = train_scenes[order[k]];
      std::size_t target_view = (epoch + k) % scene.cameras.size();
      StepResult step = forward_step(cfg, scene, state.model, target_view, /*with_grad=*/true);
      if (!std::isfinite(step.loss_total)) {
        if (!abort_checkpoint_dir.empty()) save_checkpoint(abort_checkpoint_dir, cfg, last_good);
        throw TrainDiverged("train: non-finite loss at epoch " + std::to_string(epoch) +
                            (abort_checkpoint_dir.empty()
                                 ? std::string()
                                 : "; last good checkpoint: " + abort_checkpoint_dir));
      }
      sgd_update(state, step.grads, cfg.learning_rate, cfg.momentum);
      sum_center += step.l_center;
      sum_bbox += step.l_bbox;
      sum_cls += step.l_cls;
      if (step.l_render) {
        sum_render += *step.l_render;
        have_render = true;
      }
    }
    double inv = 1.0 / static_cast<double>(order.size());
    EvalMetrics em = evaluate(cfg, state.model, val_scenes);
    std::string row = std::to_string(epoch) + "," + csv_double(sum_center * inv) + "," +
                      csv_double(sum_bbox * inv) + "," + csv_double(sum_cls * inv) + "," +
                      (have_render ? csv_double(sum_render * inv) : std::string()) + "," +
                      csv_double(em.map25) + "," +
                      (em.psnr_view ? csv_double(*em.psnr_view) : std::string());
    result.csv_rows.push_back(row);
    last_good = state.model;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of named GVT1 tensors plus a manifest.

inline void save_checkpoint(const std::string& dir, const PipelineConfig& cfg,
                            const ModelParams& m) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = config_to_json(cfg);
  nlohmann::json tensors = nlohmann::json::object();
  for_each_param(const_cast<ModelParams&>(m), [&](const std::string& name, Tensor& t) {
    std::string file = name + ".gvt";
    tensors[name] = file;
    save_gvt((fs::path(dir) / file).string(), t);
  });
  manifest["tensors"] = tensors;
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir);
  os << manifest.dump(1) << "\n";
}

struct Checkpoint {
  PipelineConfig config;
  ModelParams model;
};

inline Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("load_checkpoint: missing manifest.json in " + dir);
  nlohmann::json manifest;
  is >> manifest;
  Checkpoint ck;
  ck.config = config_from_json(manifest.at("config"));
  ck.model = init_model(ck.config);
  const auto& tensors = manifest.at("tensors");
  for_each_param(ck.model, [&](const std::string& name, Tensor& t) {
    if (!tensors.contains(name))
      throw std::runtime_error("load_checkpoint: manifest missing tensor '" + name + "'");
    Tensor loaded = load_gvt((fs::path(dir) / tensors[name].get<std::string>()).string());
    if (!loaded.same_shape(t))
      throw std::runtime_error("load_checkpoint: tensor '" + name + "' has shape " +
                               loaded.shape_str() + ", expected " + t.shape_str());
    t = std::move(loaded);
  });
  return ck;
}

}  // namespace gvs
