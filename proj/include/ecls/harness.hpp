#pragma once

// Experiment runs: configuration, the online and offline training loops,
// evaluation cadence, artifact files and the comparison grid.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecls/baselines.hpp"
#include "ecls/detector.hpp"
#include "ecls/ecls_core.hpp"
#include "ecls/errors.hpp"
#include "ecls/kvconfig.hpp"
#include "ecls/metrics.hpp"
#include "ecls/replay.hpp"
#include "ecls/stream_sim.hpp"

namespace ecls {

enum class Method { incremental, offline, replay, efficient_cls };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::incremental: return "incremental";
    case Method::offline: return "offline";
    case Method::replay: return "replay";
    case Method::efficient_cls: return "efficient_cls";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "incremental") return Method::incremental;
  if (s == "offline") return Method::offline;
  if (s == "replay") return Method::replay;
  if (s == "efficient_cls") return Method::efficient_cls;
  throw ConfigError("unknown method '" + s + "' (expected incremental|offline|replay|efficient_cls)");
}

/// Shortest round-trip decimal form; keeps logs byte-stable.
inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct RunConfig {
  Method method = Method::efficient_cls;
  double annotation_cost = 1.0;
  StreamConfig stream;
  CLSConfig cls;
  double alpha = 0.99;
  double lr = 1e-4;
  double init_scale = 0.01;
  int pretrain_steps = 0;  // warm start on a disjoint palette; 0 trains from scratch
  double pretrain_lr = 5e-2;
  bool replay = true;
  ReplayPolicy replay_policy = ReplayPolicy::balanced;
  int per_class_capacity = 5;
  std::uint64_t mask_seed = 1;
  std::uint64_t train_seed = 1;
  int eval_every = 100;
  int offline_epochs = 10;
  int forget_bins = 10;
  ClassSet class_set = ClassSet::in_test_gt;
  bool seen_only = false;
  int cell = 8;
  std::string output_dir;

  GridGeometry geometry() const { return {stream.image_size, stream.image_size, stream.channels, cell, 2, 1}; }

  void validate() const {
    stream.validate();
    cls.validate();
    labeled_count(annotation_cost);
    geometry().validate();
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0,1]");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (pretrain_steps < 0) throw ConfigError("pretrain_steps must be >= 0");
    if (!(pretrain_lr > 0)) throw ConfigError("pretrain_lr must be positive");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (offline_epochs < 1) throw ConfigError("offline_epochs must be >= 1");
    if (forget_bins < 2) throw ConfigError("forget_bins must be >= 2");
    if (per_class_capacity < 1) throw ConfigError("per_class_capacity must be >= 1");
    if (method == Method::incremental && replay) throw ConfigError("method incremental does not use replay");
    if (method == Method::replay && !replay) throw ConfigError("method replay requires replay = on");
    if (method != Method::efficient_cls && (cls.ema_enabled || cls.pl_enabled))
      throw ConfigError(std::string("ema/pl toggles apply to efficient_cls only, not ") + to_string(method));
  }

  /// Sorted key = value listing of every setting except output_dir.
  std::string canonical() const {
    std::map<std::string, std::string> kv{
        {"method", to_string(method)},
        {"annotation_cost", fmt(annotation_cost)},
        {"classes", std::to_string(stream.classes)},
        {"batches", std::to_string(stream.batches)},
        {"image_size", std::to_string(stream.image_size)},
        {"channels", std::to_string(stream.channels)},
        {"long_tail", stream.long_tail ? "on" : "off"},
        {"max_speed", fmt(stream.max_speed)},
        {"cooccur_prob", fmt(stream.cooccur_prob)},
        {"seed", std::to_string(stream.seed)},
        {"min_object", std::to_string(stream.min_object)},
        {"max_object", std::to_string(stream.max_object)},
        {"min_scene", std::to_string(stream.min_scene)},
        {"max_scene", std::to_string(stream.max_scene)},
        {"distractor_prob", fmt(stream.distractor_prob)},
        {"clutter_prob", fmt(stream.clutter_prob)},
        {"noise", fmt(stream.noise)},
        {"illumination", fmt(stream.illumination)},
        {"appearance", fmt(stream.appearance)},
        {"palette_offset", fmt(stream.palette_offset)},
        {"min_track", std::to_string(stream.min_track)},
        {"max_track", std::to_string(stream.max_track)},
        {"instance_jitter", fmt(stream.instance_jitter)},
        {"background", fmt(stream.background)},
        {"tau", fmt(cls.tau)},
        {"lambda_pseudo", fmt(cls.lambda_pseudo)},
        {"nms_iou", fmt(cls.nms_iou)},
        {"augment", cls.augment_enabled ? "on" : "off"},
        {"ema", cls.ema_enabled ? "on" : "off"},
        {"pl", cls.pl_enabled ? "on" : "off"},
        {"eval_learner", cls.eval_learner == Learner::fast ? "fast" : "slow"},
        {"replay_size", std::to_string(cls.replay_size)},
        {"alpha", fmt(alpha)},
        {"lr", fmt(lr)},
        {"init_scale", fmt(init_scale)},
        {"pretrain_steps", std::to_string(pretrain_steps)},
        {"pretrain_lr", fmt(pretrain_lr)},
        {"replay", replay ? "on" : "off"},
        {"replay_policy", to_string(replay_policy)},
        {"per_class_capacity", std::to_string(per_class_capacity)},
        {"mask_seed", std::to_string(mask_seed)},
        {"train_seed", std::to_string(train_seed)},
        {"eval_every", std::to_string(eval_every)},
        {"offline_epochs", std::to_string(offline_epochs)},
        {"forget_bins", std::to_string(forget_bins)},
        {"class_set", class_set == ClassSet::all ? "all" : "test"},
        {"seen_only", seen_only ? "on" : "off"},
        {"cell", std::to_string(cell)},
    };
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
  }

  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical())));
    return buf;
  }

  /// Builds a config from key/value pairs. Unknown keys are an error.
  static RunConfig from_kv(const KeyValues& kv) {
    RunConfig c;
    c.method = parse_method(kv.str("method", "efficient_cls"));
    const bool cls_method = c.method == Method::efficient_cls;
    c.annotation_cost = kv.real("annotation_cost", 1.0);
    auto& s = c.stream;
    s.classes = static_cast<int>(kv.integer("classes", s.classes));
    s.batches = static_cast<int>(kv.integer("batches", s.batches));
    s.image_size = static_cast<int>(kv.integer("image_size", s.image_size));
    s.channels = static_cast<int>(kv.integer("channels", s.channels));
    s.long_tail = kv.flag("long_tail", s.long_tail);
    s.max_speed = kv.real("max_speed", s.max_speed);
    s.cooccur_prob = kv.real("cooccur_prob", s.cooccur_prob);
    const auto seed = static_cast<std::uint64_t>(kv.integer("seed", 1));
    s.seed = seed;
    s.min_object = static_cast<int>(kv.integer("min_object", s.min_object));
    s.max_object = static_cast<int>(kv.integer("max_object", s.max_object));
    s.min_scene = static_cast<int>(kv.integer("min_scene", s.min_scene));
    s.max_scene = static_cast<int>(kv.integer("max_scene", s.max_scene));
    s.distractor_prob = kv.real("distractor_prob", s.distractor_prob);
    s.clutter_prob = kv.real("clutter_prob", s.clutter_prob);
    s.noise = kv.real("noise", s.noise);
    s.illumination = kv.real("illumination", s.illumination);
    s.appearance = kv.real("appearance", s.appearance);
    s.palette_offset = kv.real("palette_offset", s.palette_offset);
    s.min_track = static_cast<int>(kv.integer("min_track", s.min_track));
    s.max_track = static_cast<int>(kv.integer("max_track", s.max_track));
    s.instance_jitter = kv.real("instance_jitter", s.instance_jitter);
    s.background = kv.real("background", s.background);
    c.mask_seed = static_cast<std::uint64_t>(kv.integer("mask_seed", static_cast<long long>(seed)));
    c.train_seed = static_cast<std::uint64_t>(kv.integer("train_seed", static_cast<long long>(seed)));

    c.cls.tau = kv.real("tau", c.cls.tau);
    c.cls.lambda_pseudo = kv.real("lambda_pseudo", c.cls.lambda_pseudo);
    c.cls.nms_iou = kv.real("nms_iou", c.cls.nms_iou);
    c.cls.augment_enabled = kv.flag("augment", true);
    c.cls.ema_enabled = kv.flag("ema", cls_method);
    c.cls.pl_enabled = kv.flag("pl", cls_method);
    const std::string learner = kv.str("eval_learner", cls_method ? "slow" : "fast");
    if (learner != "fast" && learner != "slow") throw ConfigError("eval_learner must be fast|slow");
    c.cls.eval_learner = learner == "fast" ? Learner::fast : Learner::slow;
    c.cls.replay_size = static_cast<std::size_t>(kv.integer("replay_size", 16));
    c.alpha = kv.real("alpha", c.alpha);
    c.lr = kv.real("lr", c.lr);
    c.init_scale = kv.real("init_scale", c.init_scale);
    c.pretrain_steps = static_cast<int>(kv.integer("pretrain_steps", c.pretrain_steps));
    c.pretrain_lr = kv.real("pretrain_lr", c.pretrain_lr);
    c.replay = kv.flag("replay", c.method == Method::replay || cls_method);
    c.replay_policy = parse_replay_policy(kv.str("replay_policy", "balanced"));
    c.per_class_capacity = static_cast<int>(kv.integer("per_class_capacity", c.per_class_capacity));
    c.eval_every = static_cast<int>(kv.integer("eval_every", c.eval_every));
    c.offline_epochs = static_cast<int>(kv.integer("offline_epochs", c.offline_epochs));
    c.forget_bins = static_cast<int>(kv.integer("forget_bins", c.forget_bins));
    const std::string cs = kv.str("class_set", "test");
    if (cs != "test" && cs != "all") throw ConfigError("class_set must be test|all");
    c.class_set = cs == "all" ? ClassSet::all : ClassSet::in_test_gt;
    c.seen_only = kv.flag("seen_only", false);
    c.cell = static_cast<int>(kv.integer("cell", c.cell));
    c.output_dir = kv.str("output_dir", "");
    if (auto extra = kv.unused(); !extra.empty()) throw ConfigError("unknown config key '" + extra.front() + "'");
    return c;
  }
};

/// Documentation of every configuration key, shown by `--help`.
inline const char* config_keys_help() {
  return R"(Run configuration keys (key = value, '#' comments):
  method              incremental | offline | replay | efficient_cls   [efficient_cls]
  annotation_cost     labeled fraction of each 16-frame batch, 1/16..1 [1.0]
  classes             number of object classes                        [8]
  batches             16-frame batches in the stream                  [300]
  image_size          square image side in pixels                     [64]
  channels            1 or 3                                          [3]
  long_tail           on/off, long-tailed class frequencies           [off]
  max_speed           max object speed, pixels per frame              [1.0]
  cooccur_prob        chance a co-occurrence partner joins a scene    [0.5]
  seed                scenario seed; default for mask_seed/train_seed [1]
  mask_seed           seed of the labeled-frame selection             [seed]
  train_seed          seed of init, replay draws and augmentation     [seed]
  min_object, max_object   object side range in pixels                [10, 16]
  min_scene, max_scene     scene length range in frames               [48, 160]
  distractor_prob     chance of an unrelated object per scene         [0.25]
  clutter_prob        chance of an unknown, unlabeled object per scene [0]
  noise               uniform pixel noise amplitude                   [0.05]
  illumination        per-frame brightness gain jitter amplitude      [0]
  appearance          per-frame, per-object colour jitter amplitude   [0]
  palette_offset      rotation of the class colour ring, class steps  [0]
  min_track, max_track     object instance lifetime in frames (0: whole scene) [0, 0]
  instance_jitter     per-instance hue shift (class steps) and gain   [0]
  background          background intensity                            [0.1]
  tau                 pseudo-label confidence threshold               [0.7]
  lambda_pseudo       pseudo-loss weight                              [1.0]
  nms_iou             class-wise NMS IoU threshold                    [0.5]
  augment             on/off, augment pseudo-labeled frames           [on]
  ema                 on/off, EMA slow learner (efficient_cls only)   [on]
  pl                  on/off, pseudo labels (efficient_cls only)      [on]
  eval_learner        fast | slow                                     [slow]
  alpha               EMA rate                                        [0.99]
  lr                  Adam learning rate                              [1e-4]
  init_scale          std of initial weights                          [0.01]
  replay              on/off                                          [on except incremental/offline]
  replay_policy       balanced | random                               [balanced]
  per_class_capacity  memory entries per class                        [5]
  replay_size         frames replayed per step                        [16]
  eval_every          training steps between evaluations              [100]
  offline_epochs      epochs of the offline upper bound               [10]
  forget_bins         K, interval bins of the forgetfulness metric    [10]
  class_set           test | all, classes entering the AP average     [test]
  seen_only           on/off, evaluate only test frames streamed so far [off]
  cell                detector cell size in pixels                    [8]
  output_dir          artifact directory (empty: no files)            []
)";
}

struct RunSummary {
  std::string method;
  double annotation_cost = 0;
  std::uint64_t seed = 0;
  double fap = 0, cap = 0, f = 0;
  std::map<int, double> per_class_f;
  std::vector<int> f_excluded;
  double wall_seconds = 0;
  std::int64_t steps = 0;
  std::string config_hash;
};

struct RunOutput {
  RunSummary summary;
  std::vector<EvalSnapshot> snapshots;
  TrainPresenceLog presence;
  std::vector<StepReport> steps;
  ModelParams eval_params;
  std::map<std::int64_t, int> gradient_uses;  // stream frame index -> steps it contributed to
};

// ---- serialization of run artifacts ---------------------------------------

inline nlohmann::ordered_json snapshot_json(const EvalSnapshot& s) {
  nlohmann::ordered_json ap = nlohmann::ordered_json::object();
  for (const auto& [c, v] : s.per_class_ap) ap[std::to_string(c)] = v;
  return {{"eval_index", s.eval_index}, {"t", s.t}, {"ap", ap}};
}

inline EvalSnapshot snapshot_from_json(const nlohmann::json& j) {
  EvalSnapshot s;
  s.eval_index = j.at("eval_index").get<int>();
  s.t = j.at("t").get<std::int64_t>();
  for (const auto& [k, v] : j.at("ap").items()) s.per_class_ap[std::stoi(k)] = v.get<double>();
  return s;
}

inline nlohmann::ordered_json step_json(const StepReport& r) {
  return {{"t", r.t},
          {"loss_sup", r.loss_sup},
          {"loss_pseudo", r.loss_pseudo},
          {"pseudo_count", r.pseudo_count},
          {"trained_classes", r.trained_classes}};
}

inline nlohmann::ordered_json presence_json(const TrainPresenceLog& p) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [c, steps] : p.steps()) j[std::to_string(c)] = steps;
  return j;
}

inline TrainPresenceLog presence_from_json(const nlohmann::json& j) {
  TrainPresenceLog p;
  for (const auto& [k, v] : j.items())
    for (const auto& t : v) p.record(std::stoi(k), t.get<std::int64_t>());
  return p;
}

inline nlohmann::ordered_json summary_json(const RunSummary& s) {
  nlohmann::ordered_json pcf = nlohmann::ordered_json::object();
  for (const auto& [c, v] : s.per_class_f) pcf[std::to_string(c)] = v;
  return {{"method", s.method}, {"annotation_cost", s.annotation_cost},
          {"seed", s.seed},     {"FAP", s.fap},
          {"CAP", s.cap},       {"F", s.f},
          {"F_per_class", pcf}, {"F_excluded", s.f_excluded},
          {"steps", s.steps},   {"config_hash", s.config_hash}};
}

inline RunSummary summary_from_json(const nlohmann::json& j) {
  RunSummary s;
  s.method = j.at("method").get<std::string>();
  s.annotation_cost = j.at("annotation_cost").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.fap = j.at("FAP").get<double>();
  s.cap = j.at("CAP").get<double>();
  s.f = j.at("F").get<double>();
  for (const auto& [k, v] : j.at("F_per_class").items()) s.per_class_f[std::stoi(k)] = v.get<double>();
  s.f_excluded = j.at("F_excluded").get<std::vector<int>>();
  s.steps = j.at("steps").get<std::int64_t>();
  s.config_hash = j.at("config_hash").get<std::string>();
  return s;
}

inline std::string summary_csv_header() { return "method,annotation_cost,seed,FAP,CAP,F"; }

inline std::string summary_csv_row(const RunSummary& s) {
  return s.method + "," + fmt(s.annotation_cost) + "," + std::to_string(s.seed) + "," + fmt(s.fap) + "," +
         fmt(s.cap) + "," + fmt(s.f);
}

/// Fills FAP, CAP and F of a summary from the logs they are defined on.
inline void summarize(RunSummary& s, const std::vector<EvalSnapshot>& snaps, const TrainPresenceLog& presence, int K) {
  s.fap = fap(snaps);
  s.cap = cap(snaps);
  const auto F = forgetfulness(snaps, presence, K);
  s.f = F.overall;
  s.per_class_f = F.per_class;
  s.f_excluded = F.excluded;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_artifacts(const RunConfig& cfg, const RunOutput& out) {
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "config.txt", cfg.canonical());
  std::string snaps, steps;
  for (const auto& s : out.snapshots) snaps += snapshot_json(s).dump() + "\n";
  for (const auto& r : out.steps) steps += step_json(r).dump() + "\n";
  write_text(dir / "snapshots.jsonl", snaps);
  write_text(dir / "steps.jsonl", steps);
  write_text(dir / "presence.json", presence_json(out.presence).dump() + "\n");
  write_text(dir / "summary.json", summary_json(out.summary).dump(2) + "\n");
  write_text(dir / "summary.csv", summary_csv_header() + "\n" + summary_csv_row(out.summary) + "\n");
  write_text(dir / "timing.json", nlohmann::json{{"wall_seconds", out.summary.wall_seconds}}.dump() + "\n");
  std::ofstream model(dir / "model.bin", std::ios::binary);
  if (!model) throw IoError("cannot write model.bin");
  save_params(out.eval_params, model);
}

// ---- training loops ----------------------------------------------------------

namespace detail {

/// Initial weights. With pretrain_steps > 0 the detector is first trained
/// fully supervised on a scenario drawn with a palette half a class step
/// away from the stream's, then the foreground class columns are reset.
/// What carries over is the background column and the box regressor, the
/// class-agnostic part of a detector pretrained on other categories.
inline ModelParams initial_params(const RunConfig& cfg) {
  const GridGeometry g = cfg.geometry();
  const ModelShape shape = model_shape(g, cfg.stream.classes);
  ModelParams init = init_params(shape, cfg.train_seed, cfg.init_scale);
  if (cfg.pretrain_steps == 0) return init;

  StreamConfig pc = cfg.stream;
  pc.seed = derive_seed(cfg.train_seed, 0x9e7a);
  pc.palette_offset = cfg.stream.palette_offset + 0.5;
  pc.clutter_prob = 0.0;  // shifted clutter would wear the stream's class colours
  const Scenario pretrain = generate_scenario(pc);
  ModelParams p = init;
  AdamState opt;
  const AdamConfig adam{cfg.pretrain_lr};
  Rng rng(derive_seed(cfg.train_seed, 0x9e7b));
  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    ModelParams grad(shape);
    for (int i = 0; i < kBatchFrames; ++i) {
      const FrameRecord f = render_frame(pretrain, static_cast<std::int64_t>(rng.below(
                                                       static_cast<std::uint64_t>(pretrain.total_frames()))));
      accumulate_loss(p, featurize(f, g), g, assign_targets(f, g, cfg.stream.classes), 1.0 / kBatchFrames, &grad);
    }
    adam_step(p, grad, opt, adam);
  }
  const std::size_t K = shape.outputs();
  auto w = p.w_cls(), w0 = init.w_cls();
  auto b = p.b_cls(), b0 = init.b_cls();
  for (std::size_t d = 0; d < static_cast<std::size_t>(shape.feature_dim); ++d)
    for (std::size_t k = 0; k + 1 < K; ++k) w[d * K + k] = w0[d * K + k];
  for (std::size_t k = 0; k + 1 < K; ++k) b[k] = b0[k];
  return p;
}

inline std::vector<FrameRecord> eval_frames(const std::vector<FrameRecord>& tests, const RunConfig& cfg,
                                            std::int64_t batches_seen) {
  if (!cfg.seen_only) return tests;
  std::vector<FrameRecord> out;
  for (const auto& f : tests)
    if (f.frame_index < batches_seen * kBatchFrames) out.push_back(f);
  return out;
}

inline RunOutput run_online(const RunConfig& cfg, const Scenario& scenario, const std::vector<FrameRecord>& tests) {
  RunOutput out;
  const GridDetector det{cfg.geometry(), cfg.stream.classes};
  StreamState stream(scenario, cfg.mask_seed);
  const ModelParams init = initial_params(cfg);
  LearnerPair pair = LearnerPair::from(init, cfg.alpha, AdamConfig{cfg.lr});
  baseline::Learner single{init, {}, AdamConfig{cfg.lr}};
  std::optional<EpisodicMemory> memory;
  if (cfg.replay) memory.emplace(cfg.replay_policy, cfg.per_class_capacity, cfg.stream.classes, cfg.train_seed);
  TrainRngs rngs(cfg.train_seed);
  const bool uses_pair = cfg.method == Method::efficient_cls;

  auto evaluate_now = [&](std::int64_t t) {
    const auto frames = eval_frames(tests, cfg, stream.batches_consumed());
    if (frames.empty()) return;
    Predictor p;
    if (uses_pair)
      p = [&](const FrameRecord& f) { return predict(pair, f, cfg.cls, det); };
    else
      p = [&](const FrameRecord& f) {
        return class_nms(decode(forward(single.params, f, det.geometry), cfg.cls.predict_thresh), cfg.cls.nms_iou);
      };
    out.snapshots.push_back(
        evaluate(p, frames, static_cast<int>(out.snapshots.size()), t, cfg.stream.classes, cfg.class_set));
  };

  std::int64_t t = 0;
  while (auto batch = stream.next_batch(cfg.annotation_cost)) {
    StepReport rep;
    switch (cfg.method) {
      case Method::incremental: rep = baseline::incremental_step(single, *batch, det); break;
      case Method::replay:
        rep = baseline::replay_step(single, *batch, *memory, rngs.replay, cfg.cls.replay_size, det);
        break;
      default: rep = train_step(pair, *batch, memory ? &*memory : nullptr, cfg.cls, rngs, det); break;
    }
    t = rep.t;
    for (int c : rep.trained_classes) out.presence.record(c, t);
    for (auto idx : rep.stream_frames_trained) ++out.gradient_uses[idx];
    out.steps.push_back(std::move(rep));
    if (t % cfg.eval_every == 0) evaluate_now(t);
  }
  if (out.snapshots.empty() || out.snapshots.back().t != t) evaluate_now(t);
  out.eval_params = uses_pair ? pair.learner(cfg.cls.eval_learner) : single.params;
  out.summary.steps = t;
  return out;
}

/// Offline upper bound: every labeled training frame of the stream, shuffled
/// mini-batches of 16, several epochs, one evaluation at the end.
inline RunOutput run_offline(const RunConfig& cfg, const Scenario& scenario, const std::vector<FrameRecord>& tests) {
  RunOutput out;
  const GridGeometry g = cfg.geometry();
  StreamState stream(scenario, cfg.mask_seed);
  std::vector<FeatureGrid> features;
  std::vector<GridAssignment> targets;
  std::vector<std::vector<int>> classes;
  while (auto batch = stream.next_batch(cfg.annotation_cost))
    for (std::size_t i = 0; i < batch->train_frames.size(); ++i) {
      if (!batch->labeled_mask[i]) continue;
      const FrameRecord& f = batch->train_frames[i];
      features.push_back(featurize(f, g));
      targets.push_back(assign_targets(f, g, cfg.stream.classes));
      classes.push_back(f.gt_classes);
      ++out.gradient_uses[f.frame_index];
    }
  ModelParams params = initial_params(cfg);
  AdamState opt;
  const AdamConfig adam{cfg.lr};
  Rng rng(derive_seed(cfg.train_seed, 0x0ff1));
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), 0);
  std::int64_t t = 0;
  for (int epoch = 0; epoch < cfg.offline_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t b = 0; b < order.size(); b += kBatchFrames) {
      const std::size_t e = std::min(order.size(), b + kBatchFrames);
      ModelParams grad(params.shape);
      StepReport rep;
      rep.t = ++t;
      std::set<int> trained;
      const double w = 1.0 / static_cast<double>(e - b);
      for (std::size_t k = b; k < e; ++k) {
        rep.loss_sup += w * accumulate_loss(params, features[order[k]], g, targets[order[k]], w, &grad).total();
        trained.insert(classes[order[k]].begin(), classes[order[k]].end());
      }
      adam_step(params, grad, opt, adam);
      rep.trained_classes.assign(trained.begin(), trained.end());
      for (int c : rep.trained_classes) out.presence.record(c, t);
      out.steps.push_back(std::move(rep));
    }
  }
  Predictor p = [&](const FrameRecord& f) {
    return class_nms(decode(forward(params, f, g), cfg.cls.predict_thresh), cfg.cls.nms_iou);
  };
  out.snapshots.push_back(evaluate(p, tests, 0, t, cfg.stream.classes, cfg.class_set));
  out.eval_params = params;
  out.summary.steps = t;
  return out;
}

}  // namespace detail

/// Runs one configuration end to end and, when output_dir is set, writes
/// config.txt, snapshots.jsonl, steps.jsonl, presence.json, summary.json,
/// summary.csv, timing.json and model.bin there.
inline RunOutput run_experiment(const RunConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const Scenario scenario = generate_scenario(cfg.stream);
  const auto tests = test_frames(scenario);
  RunOutput out = cfg.method == Method::offline ? detail::run_offline(cfg, scenario, tests)
                                                : detail::run_online(cfg, scenario, tests);
  out.summary.method = to_string(cfg.method);
  out.summary.annotation_cost = cfg.annotation_cost;
  out.summary.seed = cfg.stream.seed;
  out.summary.config_hash = cfg.hash();
  summarize(out.summary, out.snapshots, out.presence, cfg.forget_bins);
  out.summary.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!cfg.output_dir.empty()) write_artifacts(cfg, out);
  return out;
}

// ---- grid ---------------------------------------------------------------------

struct GridSpec {
  RunConfig base;
  std::vector<Method> methods;
  std::vector<double> costs;
  std::vector<bool> ema, pl, augment;
  std::vector<double> taus, lambdas;
  std::vector<ReplayPolicy> policies;
  std::vector<int> capacities;
  std::vector<int> replay_sizes;
  std::vector<std::uint64_t> seeds;
  int jobs = 1;

  /// Grid files hold base run keys plus axis keys prefixed "grid.":
  /// methods, costs, ema, pl, augment, taus, lambdas, policies, capacities,
  /// replay_sizes, seeds (comma separated), and grid.jobs.
  static GridSpec from_kv(const KeyValues& kv) {
    KeyValues base;
    GridSpec g;
    std::map<std::string, std::vector<std::string>> axes;
    for (const auto& [k, v] : kv.values()) {
      if (k.rfind("grid.", 0) == 0) {
        const std::string axis = k.substr(5);
        if (axis == "jobs") {
          g.jobs = std::max(1, std::stoi(v));
          continue;
        }
        auto items = split_list(v);
        if (items.empty()) throw ConfigError("grid axis '" + axis + "' is empty");
        axes[axis] = std::move(items);
      } else {
        base.set(k, v);
      }
    }
    const bool toggles = axes.count("ema") || axes.count("pl");
    if (toggles && !base.has("method")) base.set("method", "efficient_cls");
    g.base = RunConfig::from_kv(base);
    auto take = [&](const std::string& name) {
      auto it = axes.find(name);
      if (it == axes.end()) return std::vector<std::string>{};
      auto v = it->second;
      axes.erase(it);
      return v;
    };
    for (const auto& s : take("methods")) g.methods.push_back(parse_method(s));
    auto reals = [](const std::vector<std::string>& v, const std::string& axis) {
      std::vector<double> out;
      for (const auto& s : v) {
        try {
          out.push_back(std::stod(s));
        } catch (const std::exception&) {
          throw ConfigError("grid axis '" + axis + "': bad number '" + s + "'");
        }
      }
      return out;
    };
    g.costs = reals(take("costs"), "costs");
    g.taus = reals(take("taus"), "taus");
    g.lambdas = reals(take("lambdas"), "lambdas");
    for (const auto& s : take("ema")) g.ema.push_back(KeyValues::parse_flag("grid.ema", s));
    for (const auto& s : take("pl")) g.pl.push_back(KeyValues::parse_flag("grid.pl", s));
    for (const auto& s : take("augment")) g.augment.push_back(KeyValues::parse_flag("grid.augment", s));
    for (const auto& s : take("policies")) g.policies.push_back(parse_replay_policy(s));
    for (const auto& v : reals(take("capacities"), "capacities")) g.capacities.push_back(static_cast<int>(v));
    for (const auto& v : reals(take("replay_sizes"), "replay_sizes")) g.replay_sizes.push_back(static_cast<int>(v));
    for (const auto& v : reals(take("seeds"), "seeds")) g.seeds.push_back(static_cast<std::uint64_t>(v));
    if (!axes.empty()) throw ConfigError("unknown grid axis '" + axes.begin()->first + "'");
    return g;
  }
};

struct GridRun {
  RunConfig config;
  std::string cell;  // run description without the seed
  std::optional<RunSummary> summary;
  std::string error;
};

struct CellStats {
  std::string cell;
  int n = 0;
  double fap_mean = 0, fap_sd = 0, cap_mean = 0, cap_sd = 0, f_mean = 0, f_sd = 0;
  int failures = 0;
};

struct GridResult {
  std::vector<GridRun> runs;
  std::vector<CellStats> table;
};

/// Expands the Cartesian product of the axes. Toggle, tau and lambda axes
/// only expand efficient_cls runs. Every cell shares the same seed list, so
/// the scenario and mask seeds of a row are paired across cells.
inline std::vector<GridRun> expand_grid(const GridSpec& spec) {
  auto or_base = [](auto v, auto base) { return v.empty() ? decltype(v){base} : v; };
  const auto methods = or_base(spec.methods, spec.base.method);
  const auto costs = or_base(spec.costs, spec.base.annotation_cost);
  const auto policies = or_base(spec.policies, spec.base.replay_policy);
  const auto capacities = or_base(spec.capacities, spec.base.per_class_capacity);
  const auto replay_sizes = or_base(spec.replay_sizes, static_cast<int>(spec.base.cls.replay_size));
  const auto seeds = or_base(spec.seeds, spec.base.stream.seed);
  std::vector<GridRun> runs;
  for (Method m : methods) {
    const bool cls = m == Method::efficient_cls;
    const auto ema = cls ? or_base(spec.ema, spec.base.cls.ema_enabled) : std::vector<bool>{false};
    const auto pl = cls ? or_base(spec.pl, spec.base.cls.pl_enabled) : std::vector<bool>{false};
    const auto aug = cls ? or_base(spec.augment, spec.base.cls.augment_enabled) : std::vector<bool>{true};
    const auto taus = cls ? or_base(spec.taus, spec.base.cls.tau) : std::vector<double>{spec.base.cls.tau};
    const auto lambdas =
        cls ? or_base(spec.lambdas, spec.base.cls.lambda_pseudo) : std::vector<double>{spec.base.cls.lambda_pseudo};
    for (double cost : costs)
      for (bool e : ema)
        for (bool p : pl)
          for (bool a : aug)
            for (double tau : taus)
              for (double lam : lambdas)
                for (ReplayPolicy pol : policies)
                  for (int cap : capacities)
                    for (int rs : replay_sizes) {
                      std::string cell = std::string("method=") + to_string(m) + " cost=" + fmt(cost);
                      if (cls)
                        cell += std::string(" ema=") + (e ? "on" : "off") + " pl=" + (p ? "on" : "off") +
                                " augment=" + (a ? "on" : "off") + " tau=" + fmt(tau) + " lambda=" + fmt(lam);
                      if (m != Method::incremental && m != Method::offline)
                        cell += std::string(" policy=") + to_string(pol) + " capacity=" + std::to_string(cap) +
                                " replay_size=" + std::to_string(rs);
                      for (auto seed : seeds) {
                        RunConfig c = spec.base;
                        c.method = m;
                        c.annotation_cost = cost;
                        c.cls.ema_enabled = cls && e;
                        c.cls.pl_enabled = cls && p;
                        c.cls.augment_enabled = a;
                        c.cls.tau = tau;
                        c.cls.lambda_pseudo = lam;
                        c.cls.eval_learner = cls ? spec.base.cls.eval_learner : Learner::fast;
                        c.replay = m == Method::replay ||
                                   (cls && (spec.base.method != Method::efficient_cls || spec.base.replay));
                        c.replay_policy = pol;
                        c.per_class_capacity = cap;
                        c.cls.replay_size = static_cast<std::size_t>(rs);
                        c.stream.seed = seed;
                        c.mask_seed = seed;
                        c.train_seed = seed;
                        runs.push_back({c, cell, std::nullopt, {}});
                      }
                    }
  }
  return runs;
}

inline void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
  mean = v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

inline std::vector<CellStats> tabulate(const std::vector<GridRun>& runs) {
  std::vector<CellStats> table;
  std::map<std::string, std::size_t> where;
  std::map<std::string, std::vector<double>> faps, caps, fs;
  for (const auto& r : runs) {
    if (!where.count(r.cell)) {
      where[r.cell] = table.size();
      table.push_back({r.cell});
    }
    auto& row = table[where[r.cell]];
    if (!r.summary) {
      ++row.failures;
      continue;
    }
    ++row.n;
    faps[r.cell].push_back(r.summary->fap);
    caps[r.cell].push_back(r.summary->cap);
    fs[r.cell].push_back(r.summary->f);
  }
  for (auto& row : table) {
    mean_sd(faps[row.cell], row.fap_mean, row.fap_sd);
    mean_sd(caps[row.cell], row.cap_mean, row.cap_sd);
    mean_sd(fs[row.cell], row.f_mean, row.f_sd);
  }
  return table;
}

/// Runs every grid cell. A failing run is recorded and the grid continues.
/// With an output directory each run gets its own artifact subdirectory and
/// runs.csv / table.csv hold the merged results.
inline GridResult run_grid(const GridSpec& spec, const std::string& output_dir = {}) {
  GridResult res;
  res.runs = expand_grid(spec);
  if (res.runs.empty()) throw ConfigError("grid expands to no runs");
  for (std::size_t i = 0; i < res.runs.size(); ++i)
    if (!output_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "run%04zu", i);
      res.runs[i].config.output_dir = (std::filesystem::path(output_dir) / name).string();
    }
  auto execute = [](GridRun& r) {
    try {
      r.summary = run_experiment(r.config).summary;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
  };
  if (spec.jobs <= 1) {
    for (auto& r : res.runs) execute(r);
  } else {
    std::size_t next = 0;
    while (next < res.runs.size()) {
      std::vector<std::future<void>> batch;
      for (int j = 0; j < spec.jobs && next < res.runs.size(); ++j, ++next)
        batch.push_back(std::async(std::launch::async, execute, std::ref(res.runs[next])));
      for (auto& f : batch) f.get();
    }
  }
  res.table = tabulate(res.runs);
  if (!output_dir.empty()) {
    std::string runs_csv = "run,cell," + summary_csv_header() + ",status\n";
    for (std::size_t i = 0; i < res.runs.size(); ++i) {
      const auto& r = res.runs[i];
      runs_csv += std::to_string(i) + ",\"" + r.cell + "\",";
      if (r.summary)
        runs_csv += summary_csv_row(*r.summary) + ",ok\n";
      else
        runs_csv += std::string(to_string(r.config.method)) + "," + fmt(r.config.annotation_cost) + "," +
                    std::to_string(r.config.stream.seed) + ",,,,\"error: " + r.error + "\"\n";
    }
    std::string table_csv = "cell,n,failures,FAP_mean,FAP_sd,CAP_mean,CAP_sd,F_mean,F_sd\n";
    for (const auto& c : res.table)
      table_csv += "\"" + c.cell + "\"," + std::to_string(c.n) + "," + std::to_string(c.failures) + "," +
                   fmt(c.fap_mean) + "," + fmt(c.fap_sd) + "," + fmt(c.cap_mean) + "," + fmt(c.cap_sd) + "," +
                   fmt(c.f_mean) + "," + fmt(c.f_sd) + "\n";
    std::filesystem::create_directories(output_dir);
    write_text(std::filesystem::path(output_dir) / "runs.csv", runs_csv);
    write_text(std::filesystem::path(output_dir) / "table.csv", table_csv);
  }
  return res;
}

}  // namespace ecls
