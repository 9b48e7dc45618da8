#pragma once

// Fast/slow learner pair. The fast learner takes every gradient step; the
// slow learner is an exponential moving average of it, labels the
// unlabeled frames of each batch, and is the model evaluated by default.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ecls/detector.hpp"
#include "ecls/errors.hpp"
#include "ecls/frame.hpp"
#include "ecls/replay.hpp"
#include "ecls/rng.hpp"
#include "ecls/stream_sim.hpp"

namespace ecls {

enum class Learner { fast, slow };

struct CLSConfig {
  double tau = 0.7;            // pseudo-label confidence threshold
  double lambda_pseudo = 1.0;  // weight of the pseudo loss
  double nms_iou = 0.5;
  bool augment_enabled = true;
  bool ema_enabled = true;
  bool pl_enabled = true;
  Learner eval_learner = Learner::slow;
  std::size_t replay_size = 16;  // frames drawn from memory per step
  double predict_thresh = 0.05;

  void validate() const {
    if (!(tau > 0 && tau < 1)) throw ConfigError("tau must lie in (0,1)");
    if (!(lambda_pseudo >= 0) || !std::isfinite(lambda_pseudo)) throw ConfigError("lambda_pseudo must be >= 0");
    if (!(nms_iou > 0 && nms_iou < 1)) throw ConfigError("nms_iou must lie in (0,1)");
    if (!(predict_thresh >= 0 && predict_thresh <= 1)) throw ConfigError("predict_thresh must lie in [0,1]");
  }
};

struct LearnerPair {
  ModelParams fast;
  ModelParams slow;
  double alpha = 0.99;
  AdamState optimizer;  // state for `fast` only
  AdamConfig adam;

  static LearnerPair from(const ModelParams& init, double alpha, AdamConfig adam = {}) {
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0,1]");
    return {init, init, alpha, {}, adam};
  }

  const ModelParams& learner(Learner which) const { return which == Learner::fast ? fast : slow; }
};

/// theta_S <- alpha * theta_S + (1 - alpha) * theta_F, elementwise.
inline void ema_update(LearnerPair& pair) {
  if (pair.fast.shape != pair.slow.shape) throw ConfigError("ema_update: learner shapes differ");
  const double a = pair.alpha;
  for (std::size_t i = 0; i < pair.slow.values.size(); ++i)
    pair.slow.values[i] = a * pair.slow.values[i] + (1.0 - a) * pair.fast.values[i];
}

/// Descending score; ties broken by lower x1, then lower y1, then class and
/// the remaining corners so the order is total.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
  return a.box.y2 < b.box.y2;
}

/// Greedy class-wise non-maximum suppression. A detection is dropped when it
/// overlaps an already kept detection of the same class with IoU > iou_thresh.
inline std::vector<Detection> class_nms(std::vector<Detection> dets, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/// Pseudo labels for a set of unlabeled frames: slow-learner detections above
/// tau, then class-wise NMS. Only the parameters passed in are evaluated.
template <class Ops>
std::vector<std::vector<Detection>> pseudo_label(const ModelParams& slow, const std::vector<const FrameRecord*>& frames,
                                                 const CLSConfig& cfg, const Ops& ops) {
  std::vector<std::vector<Detection>> out;
  out.reserve(frames.size());
  for (const FrameRecord* f : frames) out.push_back(class_nms(ops.decode(ops.forward(slow, *f), cfg.tau), cfg.nms_iou));
  return out;
}

// ---- augmentation ---------------------------------------------------------

enum class AugmentKind { flip, rotate90, crop };

inline const char* to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::flip: return "flip";
    case AugmentKind::rotate90: return "rotate90";
    case AugmentKind::crop: return "crop";
  }
  return "?";
}

struct Augmented {
  Image image;
  std::vector<Detection> labels;
  AugmentKind kind = AugmentKind::flip;
};

/// Crop window in pixels: [x0, x0+w) x [y0, y0+h).
struct CropWindow {
  int x0 = 0, y0 = 0, w = 0, h = 0;
};

inline Augmented hflip(const Image& img, std::vector<Detection> labels) {
  Augmented out{Image(img.height, img.width, img.channels), std::move(labels), AugmentKind::flip};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.image.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  const double W = img.width;
  for (auto& d : out.labels) d.box = {W - d.box.x2, d.box.y1, W - d.box.x1, d.box.y2};
  return out;
}

/// Clockwise quarter turn: pixel (x, y) moves to (H - 1 - y, x).
inline Augmented rotate90(const Image& img, std::vector<Detection> labels) {
  Augmented out{Image(img.width, img.height, img.channels), std::move(labels), AugmentKind::rotate90};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.image.at(x, img.height - 1 - y, c) = img.at(y, x, c);
  const double H = img.height;
  for (auto& d : out.labels) d.box = {H - d.box.y2, d.box.x1, H - d.box.y1, d.box.x2};
  return out;
}

/// Crops the window and resizes it back to the full image by nearest
/// neighbour sampling. Boxes are clipped to the window and rescaled.
inline Augmented crop_resize(const Image& img, std::vector<Detection> labels, const CropWindow& win) {
  Augmented out{Image(img.height, img.width, img.channels), {}, AugmentKind::crop};
  const double sx = static_cast<double>(win.w) / img.width, sy = static_cast<double>(win.h) / img.height;
  for (int y = 0; y < img.height; ++y) {
    const int src_y = std::min(win.y0 + win.h - 1, win.y0 + static_cast<int>(std::floor((y + 0.5) * sy)));
    for (int x = 0; x < img.width; ++x) {
      const int src_x = std::min(win.x0 + win.w - 1, win.x0 + static_cast<int>(std::floor((x + 0.5) * sx)));
      for (int c = 0; c < img.channels; ++c) out.image.at(y, x, c) = img.at(src_y, src_x, c);
    }
  }
  const Box wb{static_cast<double>(win.x0), static_cast<double>(win.y0), static_cast<double>(win.x0 + win.w),
               static_cast<double>(win.y0 + win.h)};
  for (auto d : labels) {
    const Box c{std::max(d.box.x1, wb.x1), std::max(d.box.y1, wb.y1), std::min(d.box.x2, wb.x2),
                std::min(d.box.y2, wb.y2)};
    if (!c.valid()) continue;
    d.box = {(c.x1 - wb.x1) / sx, (c.y1 - wb.y1) / sy, (c.x2 - wb.x1) / sx, (c.y2 - wb.y1) / sy};
    out.labels.push_back(d);
  }
  return out;
}

/// Whether every box keeps at least a quarter of its area inside the window.
inline bool crop_keeps_boxes(const std::vector<Detection>& labels, const CropWindow& win) {
  const Box wb{static_cast<double>(win.x0), static_cast<double>(win.y0), static_cast<double>(win.x0 + win.w),
               static_cast<double>(win.y0 + win.h)};
  return std::all_of(labels.begin(), labels.end(),
                     [&](const Detection& d) { return intersection_area(d.box, wb) >= 0.25 * d.box.area(); });
}

/// One random transform among flip, quarter turn (square images only) and
/// crop-and-resize. A crop that would leave any box below 25% visible is
/// re-drawn up to 10 times before falling back to a flip.
inline Augmented augment(const Image& img, std::vector<Detection> labels, Rng& rng) {
  const auto choice = rng.below(3);
  if (choice == 0) return hflip(img, std::move(labels));
  if (choice == 1) {
    if (img.width == img.height) return rotate90(img, std::move(labels));
    return hflip(img, std::move(labels));
  }
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double scale = rng.uniform(0.6, 0.9);
    CropWindow win;
    win.w = std::max(1, static_cast<int>(std::lround(img.width * scale)));
    win.h = std::max(1, static_cast<int>(std::lround(img.height * scale)));
    win.x0 = static_cast<int>(rng.between(0, img.width - win.w));
    win.y0 = static_cast<int>(rng.between(0, img.height - win.h));
    if (crop_keeps_boxes(labels, win)) return crop_resize(img, std::move(labels), win);
  }
  return hflip(img, std::move(labels));
}

// ---- training step --------------------------------------------------------

/// Independent random streams used by a training run.
struct TrainRngs {
  Rng replay;
  Rng augment;
  explicit TrainRngs(std::uint64_t seed) : replay(derive_seed(seed, 0x7e91a)), augment(derive_seed(seed, 0xa0c)) {}
};

struct StepReport {
  std::int64_t t = 0;  // 1-based training step
  double loss_sup = 0;
  double loss_pseudo = 0;
  int pseudo_count = 0;
  int labeled_frames = 0;
  int replay_frames = 0;
  std::vector<int> trained_classes;               // classes with ground truth in this step's L_sup
  std::vector<std::int64_t> stream_frames_trained;  // stream frame indices that contributed gradient
};

inline std::vector<Detection> as_detections(const FrameRecord& f) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < f.gt_boxes.size(); ++i) out.push_back({f.gt_boxes[i], f.gt_classes[i], 1.0});
  return out;
}

/// One online step: supervised loss on the batch's labeled frames plus replay
/// frames, pseudo loss on its unlabeled frames, one Adam step on the fast
/// learner, consolidation of the slow learner, then the labeled frames go to
/// memory. `memory` may be null for runs without replay. With EMA disabled
/// the slow learner is kept equal to the fast one.
template <class Ops>
StepReport train_step(LearnerPair& pair, const StreamBatch& batch, EpisodicMemory* memory, const CLSConfig& cfg,
                      TrainRngs& rngs, const Ops& ops) {
  StepReport rep;
  rep.t = batch.step_index + 1;

  std::vector<const FrameRecord*> sup;
  std::vector<const FrameRecord*> unlabeled;
  for (std::size_t i = 0; i < batch.train_frames.size(); ++i) {
    if (batch.labeled_mask[i])
      sup.push_back(&batch.train_frames[i]);
    else
      unlabeled.push_back(&batch.train_frames[i]);
  }
  rep.labeled_frames = static_cast<int>(sup.size());
  if (memory)
    for (const MemoryEntry* e : memory->sample(cfg.replay_size, rngs.replay)) sup.push_back(&e->frame);
  rep.replay_frames = static_cast<int>(sup.size()) - rep.labeled_frames;

  ModelParams grad(pair.fast.shape);
  std::set<int> trained;
  for (const FrameRecord* f : sup) {
    const double w = 1.0 / static_cast<double>(sup.size());
    rep.loss_sup += w * ops.accumulate(pair.fast, *f, ops.assign(ground_truth(*f)), w, grad).total();
    trained.insert(f->gt_classes.begin(), f->gt_classes.end());
  }
  for (int i = 0; i < rep.labeled_frames; ++i) rep.stream_frames_trained.push_back(sup[i]->frame_index);

  if (cfg.pl_enabled && !unlabeled.empty()) {
    const auto labels = pseudo_label(pair.slow, unlabeled, cfg, ops);
    const double w = 1.0 / static_cast<double>(unlabeled.size());
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
      rep.pseudo_count += static_cast<int>(labels[i].size());
      FrameRecord view;
      view.frame_index = unlabeled[i]->frame_index;
      std::vector<Detection> targets = labels[i];
      if (cfg.augment_enabled) {
        Augmented aug = augment(unlabeled[i]->image, std::move(targets), rngs.augment);
        view.image = std::move(aug.image);
        targets = std::move(aug.labels);
      } else {
        view.image = unlabeled[i]->image;
      }
      for (const auto& d : targets) {
        view.gt_boxes.push_back(d.box);
        view.gt_classes.push_back(d.class_id);
      }
      const GridAssignment a = ops.assign(ground_truth(view));
      if (cfg.lambda_pseudo > 0) {
        rep.loss_pseudo += w * ops.accumulate(pair.fast, view, a, cfg.lambda_pseudo * w, grad).total();
        rep.stream_frames_trained.push_back(view.frame_index);
      }
    }
  }

  if (!sup.empty() || !rep.stream_frames_trained.empty()) adam_step(pair.fast, grad, pair.optimizer, pair.adam);
  if (cfg.ema_enabled)
    ema_update(pair);
  else
    pair.slow = pair.fast;

  if (memory)
    for (std::size_t i = 0; i < batch.train_frames.size(); ++i)
      if (batch.labeled_mask[i]) memory->store(batch.train_frames[i]);

  rep.trained_classes.assign(trained.begin(), trained.end());
  return rep;
}

inline StepReport train_step(LearnerPair& pair, const StreamBatch& batch, EpisodicMemory* memory, const CLSConfig& cfg,
                             TrainRngs& rngs, const GridGeometry& geometry) {
  return train_step(pair, batch, memory, cfg, rngs, GridDetector{geometry, pair.fast.shape.classes});
}

/// Detections of the configured evaluation learner after class-wise NMS.
template <class Ops>
std::vector<Detection> predict(const LearnerPair& pair, const FrameRecord& frame, const CLSConfig& cfg, const Ops& ops) {
  return class_nms(ops.decode(ops.forward(pair.learner(cfg.eval_learner), frame), cfg.predict_thresh), cfg.nms_iou);
}

}  // namespace ecls
