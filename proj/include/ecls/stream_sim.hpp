#pragma once

// Synthetic video streams of moving coloured rectangles, the sparse
// annotation mask, and the 15 train + 1 test split of every 16-frame window.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ecls/errors.hpp"
#include "ecls/frame.hpp"
#include "ecls/rng.hpp"

namespace ecls {

inline constexpr int kBatchFrames = 16;
inline constexpr int kTrainFramesPerBatch = kBatchFrames - 1;

struct StreamConfig {
  int classes = 8;
  int batches = 300;
  int image_size = 64;
  int channels = 3;
  bool long_tail = false;
  double max_speed = 1.0;     // pixels per frame
  double cooccur_prob = 0.5;  // chance a group mate joins a scene
  std::uint64_t seed = 1;
  int min_object = 10;  // side length range in pixels
  int max_object = 16;
  int min_scene = 48;  // scene length range in frames
  int max_scene = 160;
  double distractor_prob = 0.25;  // chance of an unrelated object per scene
  double clutter_prob = 0.0;      // chance of an unknown, never labeled object per scene
  double noise = 0.05;            // uniform pixel noise amplitude
  double illumination = 0.0;      // per-frame gain jitter amplitude
  double appearance = 0.0;        // per-frame, per-object colour jitter amplitude
  double palette_offset = 0.0;    // rotates every class colour by this many class steps
  int min_track = 0;              // instance lifetime range in frames; 0 = one instance per scene
  int max_track = 0;
  double instance_jitter = 0.0;   // per-instance hue shift (class steps) and gain spread
  double background = 0.1;        // background intensity

  void validate() const {
    if (classes < 2) throw ConfigError("stream: classes must be >= 2");
    if (batches < 1) throw ConfigError("stream: batches must be >= 1");
    if (channels != 1 && channels != 3) throw ConfigError("stream: channels must be 1 or 3");
    if (image_size < 16) throw ConfigError("stream: image_size must be >= 16");
    if (!(max_speed > 0)) throw ConfigError("stream: max_speed must be positive");
    if (!(cooccur_prob >= 0 && cooccur_prob <= 1))
      throw ConfigError("stream: cooccur_prob must be in [0,1]");
    if (!(distractor_prob >= 0 && distractor_prob <= 1))
      throw ConfigError("stream: distractor_prob must be in [0,1]");
    if (!(clutter_prob >= 0 && clutter_prob <= 1)) throw ConfigError("stream: clutter_prob must be in [0,1]");
    if (min_object < 2 || max_object < min_object || max_object + 2 > image_size / 2)
      throw ConfigError("stream: object size range must satisfy 2 <= min <= max <= image_size/2 - 2");
    if (min_scene < 2 || max_scene < min_scene) throw ConfigError("stream: bad scene length range");
    if (min_track < 0 || max_track < min_track || (min_track == 0) != (max_track == 0))
      throw ConfigError("stream: instance lifetime range must be 0,0 or satisfy 1 <= min <= max");
    if (!(instance_jitter >= 0 && instance_jitter < 0.5)) throw ConfigError("stream: instance_jitter must be in [0, 0.5)");
    if (!(noise >= 0 && noise < 0.5)) throw ConfigError("stream: noise must be in [0, 0.5)");
    if (!(background >= 0 && background <= 1)) throw ConfigError("stream: background must be in [0, 1]");
    if (!(illumination >= 0 && illumination < 1)) throw ConfigError("stream: illumination must be in [0, 1)");
    if (!(appearance >= 0 && appearance < 0.5)) throw ConfigError("stream: appearance must be in [0, 0.5)");
  }

  std::int64_t total_frames() const { return static_cast<std::int64_t>(batches) * kBatchFrames; }

  friend bool operator==(const StreamConfig&, const StreamConfig&) = default;
};

/// Position of a track at one frame; (cx, cy) is the continuous motion path.
struct TrackPose {
  double cx = 0, cy = 0;
  int w = 0, h = 0;
  friend bool operator==(const TrackPose&, const TrackPose&) = default;
};

struct Track {
  int class_id = 0;
  double hue = 0.0;   // instance colour shift in class steps
  double gain = 1.0;  // instance brightness factor
  std::int64_t spawn_step = 0;    // first frame (inclusive)
  std::int64_t despawn_step = 0;  // last frame (exclusive)
  std::vector<TrackPose> path;    // one pose per frame in [spawn, despawn)

  bool live(std::int64_t frame) const { return frame >= spawn_step && frame < despawn_step; }
  const TrackPose& pose(std::int64_t frame) const { return path[static_cast<std::size_t>(frame - spawn_step)]; }

  friend bool operator==(const Track&, const Track&) = default;
};

struct Scenario {
  StreamConfig config;
  std::vector<Track> tracks;
  std::vector<Track> clutter;  // unknown objects: drawn but absent from gt; class_id is the hue base
  std::vector<std::vector<int>> co_occurrence_groups;
  std::vector<double> class_weights;  // relative scene frequency

  std::int64_t total_frames() const { return config.total_frames(); }
  friend bool operator==(const Scenario&, const Scenario&) = default;
};

/// Integer pixel box covering a pose; always inside an image of side `size`.
inline Box pose_box(const TrackPose& p, int size) {
  const int x1 = std::clamp(static_cast<int>(std::lround(p.cx - 0.5 * p.w)), 0, size - p.w);
  const int y1 = std::clamp(static_cast<int>(std::lround(p.cy - 0.5 * p.h)), 0, size - p.h);
  return {static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x1 + p.w),
          static_cast<double>(y1 + p.h)};
}

/// Class colour. For 3 channels the colours sit on a ring of constant
/// channel sum, so overall brightness says nothing about the class. A
/// half-step offset yields a palette disjoint from the default one.
inline std::array<double, 3> class_color(int class_id, int classes, int channels, double offset = 0.0) {
  if (channels == 1) {
    const double v = std::min(1.0, 0.35 + 0.6 * (class_id + offset) / std::max(1, classes - 1));
    return {v, v, v};
  }
  constexpr double pi = 3.14159265358979323846;
  const double theta = 2.0 * pi * (class_id + offset) / classes;
  const double r = 0.38;
  const double u[3] = {1 / std::sqrt(2.0), -1 / std::sqrt(2.0), 0.0};
  const double v[3] = {1 / std::sqrt(6.0), 1 / std::sqrt(6.0), -2 / std::sqrt(6.0)};
  std::array<double, 3> out{};
  for (int k = 0; k < 3; ++k) out[k] = 0.5 + r * (std::cos(theta) * u[k] + std::sin(theta) * v[k]);
  return out;
}

namespace detail {

inline Track make_track(const StreamConfig& cfg, Rng& rng, int class_id, std::int64_t spawn,
                        std::int64_t despawn) {
  constexpr double pi = 3.14159265358979323846;
  Track t;
  t.class_id = class_id;
  t.spawn_step = spawn;
  t.despawn_step = despawn;
  const int base_w = static_cast<int>(rng.between(cfg.min_object, cfg.max_object));
  const int base_h = static_cast<int>(rng.between(cfg.min_object, cfg.max_object));
  // Size wobbles by at most one pixel, so the centre range uses base + 1.
  const double lo_x = 0.5 * (base_w + 1), hi_x = cfg.image_size - lo_x;
  const double lo_y = 0.5 * (base_h + 1), hi_y = cfg.image_size - lo_y;
  double x = rng.uniform(lo_x, hi_x);
  double y = rng.uniform(lo_y, hi_y);
  double heading = rng.uniform(0.0, 2 * pi);
  const double speed = cfg.max_speed * rng.uniform(0.4, 1.0);
  const double phase = rng.uniform(0.0, 2 * pi);
  const double omega = rng.uniform(0.02, 0.08);

  auto reflect = [](double& p, double& dir_component, double lo, double hi) {
    if (p < lo) {
      p = 2 * lo - p;
      dir_component = -dir_component;
    } else if (p > hi) {
      p = 2 * hi - p;
      dir_component = -dir_component;
    }
    p = std::clamp(p, lo, hi);
  };

  if (cfg.instance_jitter > 0) {
    t.hue = cfg.instance_jitter * rng.uniform(-1.0, 1.0);
    t.gain = 1.0 + 0.5 * cfg.instance_jitter * rng.uniform(-1.0, 1.0);
  }
  t.path.reserve(static_cast<std::size_t>(despawn - spawn));
  for (std::int64_t f = spawn; f < despawn; ++f) {
    const double k = static_cast<double>(f - spawn);
    const int wobble = static_cast<int>(std::lround(std::sin(phase + omega * k)));
    t.path.push_back({x, y, base_w + wobble, base_h + wobble});
    heading += 0.15 * rng.normal();
    double dx = std::cos(heading), dy = std::sin(heading);
    x += speed * dx;
    y += speed * dy;
    reflect(x, dx, lo_x, hi_x);
    reflect(y, dy, lo_y, hi_y);
    heading = std::atan2(dy, dx);
  }
  return t;
}

}  // namespace detail

/// Builds the full track list for a stream. Time is cut into scenes; each
/// scene is dominated by one class drawn by class weight, joined by members
/// of its co-occurrence group and occasionally an unrelated object.
inline Scenario generate_scenario(const StreamConfig& config) {
  config.validate();
  Scenario s;
  s.config = config;
  Rng rng(derive_seed(config.seed, 0x5ce7));
  const int C = config.classes;
  const std::int64_t total = config.total_frames();

  std::vector<int> order(static_cast<std::size_t>(C));
  std::iota(order.begin(), order.end(), 0);
  for (int i = C - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  for (int i = 0; i < C; i += 2) {
    std::vector<int> g(order.begin() + i, order.begin() + std::min(C, i + 2));
    if (g.size() == 1 && !s.co_occurrence_groups.empty()) {
      s.co_occurrence_groups.back().push_back(g[0]);
    } else {
      std::sort(g.begin(), g.end());
      s.co_occurrence_groups.push_back(std::move(g));
    }
  }
  std::vector<int> group_of(static_cast<std::size_t>(C));
  for (std::size_t g = 0; g < s.co_occurrence_groups.size(); ++g)
    for (int c : s.co_occurrence_groups[g]) group_of[c] = static_cast<int>(g);

  s.class_weights.resize(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) s.class_weights[c] = config.long_tail ? 1.0 / std::pow(c + 1.0, 1.2) : 1.0;
  const double weight_sum = std::accumulate(s.class_weights.begin(), s.class_weights.end(), 0.0);
  auto draw_class = [&] {
    double u = rng.uniform() * weight_sum;
    for (int c = 0; c < C; ++c) {
      if (u < s.class_weights[c]) return c;
      u -= s.class_weights[c];
    }
    return C - 1;
  };

  struct Scene {
    std::int64_t begin, end;
    int primary;
  };
  std::vector<Scene> scenes;
  for (std::int64_t t = 0; t < total;) {
    const std::int64_t len = rng.between(config.min_scene, config.max_scene);
    const std::int64_t end = std::min(total, t + len);
    scenes.push_back({t, end, draw_class()});
    t = end;
  }

  // Every class must lead at least one scene when there are enough scenes.
  std::vector<int> lead_count(static_cast<std::size_t>(C), 0);
  for (const auto& sc : scenes) ++lead_count[sc.primary];
  std::vector<int> orphans;
  for (int c = 0; c < C; ++c)
    if (lead_count[c] == 0) orphans.push_back(c);
  for (int c : orphans) {
    std::vector<std::size_t> donors;
    for (std::size_t i = 0; i < scenes.size(); ++i)
      if (lead_count[scenes[i].primary] > 1) donors.push_back(i);
    if (donors.empty()) break;
    const std::size_t pick = donors[rng.below(donors.size())];
    --lead_count[scenes[pick].primary];
    scenes[pick].primary = c;
    ++lead_count[c];
  }

  auto sub_span = [&](const Scene& sc) {
    const std::int64_t len = sc.end - sc.begin;
    std::int64_t a = sc.begin + rng.between(0, len / 8);
    std::int64_t b = sc.end - rng.between(0, len / 8);
    if (b <= a) b = std::min(sc.end, a + 1);
    return std::pair{a, b};
  };

  // One track over [a, b), or a chain of short-lived instances when an
  // instance lifetime range is configured.
  auto add_tracks = [&](int class_id, std::int64_t a, std::int64_t b) {
    if (config.max_track == 0) {
      s.tracks.push_back(detail::make_track(config, rng, class_id, a, b));
      return;
    }
    for (std::int64_t t = a; t < b;) {
      const std::int64_t end = std::min<std::int64_t>(b, t + rng.between(config.min_track, config.max_track));
      s.tracks.push_back(detail::make_track(config, rng, class_id, t, end));
      t = end;
    }
  };

  for (const auto& sc : scenes) {
    auto [a, b] = sub_span(sc);
    add_tracks(sc.primary, a, b);
    for (int mate : s.co_occurrence_groups[group_of[sc.primary]]) {
      if (mate == sc.primary || !rng.bernoulli(config.cooccur_prob)) continue;
      auto [ma, mb] = sub_span(sc);
      add_tracks(mate, ma, mb);
    }
    if (rng.bernoulli(config.distractor_prob)) {
      const int other = static_cast<int>(rng.below(static_cast<std::uint64_t>(C)));
      const std::int64_t len = sc.end - sc.begin;
      const std::int64_t a2 = sc.begin + rng.between(0, len / 2);
      const std::int64_t b2 = std::min(sc.end, a2 + std::max<std::int64_t>(2, len / 3));
      if (b2 > a2) add_tracks(other, a2, b2);
    }
  }

  // Too few scenes for every class: give the leftovers a short cameo.
  std::vector<bool> seen(static_cast<std::size_t>(C), false);
  for (const auto& t : s.tracks) seen[t.class_id] = true;
  for (int c = 0; c < C; ++c) {
    if (seen[c]) continue;
    const auto& sc = scenes[static_cast<std::size_t>(c) % scenes.size()];
    auto [a, b] = sub_span(sc);
    add_tracks(c, a, b);
  }

  // Unknown objects take a colour between two neighbouring classes and never
  // enter the ground truth. They use their own generator, so the class tracks
  // do not depend on clutter_prob.
  if (config.clutter_prob > 0) {
    Rng crng(derive_seed(config.seed, 0xc1a7));
    for (const auto& sc : scenes) {
      if (!crng.bernoulli(config.clutter_prob)) continue;
      const std::int64_t len = sc.end - sc.begin;
      const std::int64_t a = sc.begin + crng.between(0, len / 2);
      const std::int64_t b = std::min(sc.end, a + std::max<std::int64_t>(2, len / 2));
      if (b <= a) continue;
      const int base = static_cast<int>(crng.below(static_cast<std::uint64_t>(C)));
      Track t = detail::make_track(config, crng, base, a, b);
      t.hue = 0.5 + 0.1 * crng.uniform(-1.0, 1.0);
      s.clutter.push_back(std::move(t));
    }
  }
  return s;
}

inline Scenario generate_scenario(StreamConfig config, std::uint64_t seed) {
  config.seed = seed;
  return generate_scenario(config);
}

inline Split split_of(std::int64_t frame_index) {
  return frame_index % kBatchFrames == kBatchFrames - 1 ? Split::test : Split::train;
}

/// Renders one frame. Pure in (scenario, frame_index): the pixel noise is a
/// hash of the seed, frame and pixel rather than a sequential draw.
inline FrameRecord render_frame(const Scenario& scenario, std::int64_t frame_index) {
  if (frame_index < 0 || frame_index >= scenario.total_frames())
    throw std::out_of_range("render_frame: frame index " + std::to_string(frame_index) + " outside [0, " +
                            std::to_string(scenario.total_frames()) + ")");
  const StreamConfig& cfg = scenario.config;
  const int S = cfg.image_size;
  FrameRecord f;
  f.frame_index = frame_index;
  f.split = split_of(frame_index);
  f.image = Image(S, S, cfg.channels, cfg.background);

  const std::uint64_t frame_key = derive_seed(cfg.seed, 0x11u) ^ mix64(static_cast<std::uint64_t>(frame_index));
  auto unit = [](std::uint64_t h) { return 2.0 * (static_cast<double>(mix64(h) >> 11) * 0x1.0p-53) - 1.0; };
  const double gain = 1.0 + cfg.illumination * unit(frame_key);
  auto paint = [&](const Track& t, std::uint64_t key) {
    const Box b = pose_box(t.pose(frame_index), S);
    auto color = class_color(t.class_id, cfg.classes, cfg.channels, cfg.palette_offset + t.hue);
    for (int c = 0; c < cfg.channels; ++c)
      color[c] = gain * t.gain * (color[c] + cfg.appearance * unit(key + static_cast<std::uint64_t>(c)));
    for (int y = static_cast<int>(b.y1); y < static_cast<int>(b.y2); ++y)
      for (int x = static_cast<int>(b.x1); x < static_cast<int>(b.x2); ++x)
        for (int c = 0; c < cfg.channels; ++c) f.image.at(y, x, c) = color[c];
    return b;
  };
  // Clutter goes underneath, so labeled objects stay fully visible.
  for (std::size_t ti = 0; ti < scenario.clutter.size(); ++ti)
    if (scenario.clutter[ti].live(frame_index)) paint(scenario.clutter[ti], frame_key + 0x5bd1 * (ti + 1));
  for (std::size_t ti = 0; ti < scenario.tracks.size(); ++ti) {
    const Track& t = scenario.tracks[ti];
    if (!t.live(frame_index)) continue;
    f.gt_boxes.push_back(paint(t, frame_key + 0x9e37 * (ti + 1)));
    f.gt_classes.push_back(t.class_id);
  }

  if (cfg.noise > 0) {
    const std::uint64_t key = derive_seed(cfg.seed, 0x401e) ^ mix64(static_cast<std::uint64_t>(frame_index));
    for (std::size_t i = 0; i < f.image.data.size(); ++i) {
      const double u = static_cast<double>(mix64(key + i) >> 11) * 0x1.0p-53;
      f.image.data[i] += cfg.noise * (2.0 * u - 1.0);
    }
  }
  quantize(f.image);
  return f;
}

/// Every held-out frame of the stream, in order.
inline std::vector<FrameRecord> test_frames(const Scenario& scenario) {
  std::vector<FrameRecord> out;
  for (std::int64_t f = kBatchFrames - 1; f < scenario.total_frames(); f += kBatchFrames)
    out.push_back(render_frame(scenario, f));
  return out;
}

/// Labeled frames per 16-frame window: round(16 q), at least 1, at most the 15 train frames.
inline int labeled_count(double annotation_cost) {
  if (!(annotation_cost <= 1.0) || annotation_cost < 1.0 / kBatchFrames - 1e-12)
    throw ConfigError("annotation cost must lie in [1/16, 1], got " + std::to_string(annotation_cost));
  const int n = static_cast<int>(std::lround(annotation_cost * kBatchFrames));
  return std::clamp(n, 1, kTrainFramesPerBatch);
}

struct StreamBatch {
  std::vector<FrameRecord> train_frames;  // 15 frames, split = train
  FrameRecord test_frame;                 // final frame of the window
  std::int64_t step_index = 0;            // 0-based batch index
  std::vector<bool> labeled_mask;         // over train_frames
};

/// Single-consumer iterator over a scenario. The mask generator is seeded
/// once, so every method given the same mask seed sees the same labels.
class StreamState {
 public:
  StreamState(const Scenario& scenario, std::uint64_t mask_seed)
      : scenario_(&scenario), mask_rng_(derive_seed(mask_seed, 0x3a5c)) {}

  std::int64_t batches_consumed() const { return next_; }
  std::int64_t batch_count() const { return scenario_->config.batches; }
  bool exhausted() const { return next_ >= batch_count(); }
  const Scenario& scenario() const { return *scenario_; }

  /// Next 16-frame window, or nullopt at end of stream.
  std::optional<StreamBatch> next_batch(double annotation_cost) {
    const int n_labeled = labeled_count(annotation_cost);
    if (exhausted()) return std::nullopt;
    StreamBatch b;
    b.step_index = next_;
    const std::int64_t first = next_ * kBatchFrames;
    for (int i = 0; i < kTrainFramesPerBatch; ++i) b.train_frames.push_back(render_frame(*scenario_, first + i));
    b.test_frame = render_frame(*scenario_, first + kBatchFrames - 1);

    std::array<int, kTrainFramesPerBatch> idx{};
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < n_labeled; ++i) {
      const auto j = i + static_cast<int>(mask_rng_.below(static_cast<std::uint64_t>(kTrainFramesPerBatch - i)));
      std::swap(idx[i], idx[j]);
    }
    b.labeled_mask.assign(kTrainFramesPerBatch, false);
    for (int i = 0; i < n_labeled; ++i) {
      b.labeled_mask[idx[i]] = true;
      b.train_frames[idx[i]].is_labeled = true;
    }
    ++next_;
    return b;
  }

 private:
  const Scenario* scenario_;
  Rng mask_rng_;
  std::int64_t next_ = 0;
};

}  // namespace ecls
