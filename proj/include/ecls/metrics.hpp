#pragma once

// AP50 and the stream-level metrics built on it: CAP (mean over evaluation
// steps and classes), FAP (class mean at the final evaluation) and
// forgetfulness (weighted AP drop against time since a class was trained).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecls/box.hpp"
#include "ecls/detector.hpp"
#include "ecls/frame.hpp"

namespace ecls {

inline constexpr double kApIou = 0.5;

struct ScoredDetection {
  std::int64_t frame_id = 0;
  Detection det;
};

struct GroundTruth {
  std::int64_t frame_id = 0;
  Box box;
  int class_id = 0;
};

/// AP at IoU 0.5 for one class with all-point interpolation. Returns nullopt
/// when the class has no ground truth.
inline std::optional<double> ap50_per_class(std::span<const ScoredDetection> dets, std::span<const GroundTruth> gts,
                                            int class_id, double iou_thresh = kApIou) {
  std::vector<std::size_t> gt_idx;
  for (std::size_t i = 0; i < gts.size(); ++i)
    if (gts[i].class_id == class_id) gt_idx.push_back(i);
  if (gt_idx.empty()) return std::nullopt;

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].det.class_id == class_id) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].det.score != dets[b].det.score) return dets[a].det.score > dets[b].det.score;
    return dets[a].frame_id < dets[b].frame_id;
  });

  std::vector<bool> used(gt_idx.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  const double npos = static_cast<double>(gt_idx.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const ScoredDetection& d = dets[order[k]];
    double best = -1;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gt_idx.size(); ++j) {
      const GroundTruth& g = gts[gt_idx[j]];
      if (used[j] || g.frame_id != d.frame_id) continue;
      const double o = iou(d.det.box, g.box);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= iou_thresh) {
      used[best_j] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / npos);
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0, prev_recall = 0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

struct EvalSnapshot {
  int eval_index = 0;
  std::int64_t t = 0;                // training step of the evaluation
  std::map<int, double> per_class_ap;  // classes counted in the average

  double class_mean() const {
    if (per_class_ap.empty()) return 0.0;
    double s = 0;
    for (const auto& [c, ap] : per_class_ap) s += ap;
    return s / static_cast<double>(per_class_ap.size());
  }
  friend bool operator==(const EvalSnapshot&, const EvalSnapshot&) = default;
};

/// Which classes enter the class average.
enum class ClassSet {
  in_test_gt,  // classes with ground truth in the evaluated frames
  all,         // every class id in [0, C); classes without ground truth score 0
};

using Predictor = std::function<std::vector<Detection>(const FrameRecord&)>;

/// Runs the predictor over every frame and computes per-class AP50.
inline EvalSnapshot evaluate(const Predictor& predict, std::span<const FrameRecord> frames, int eval_index,
                             std::int64_t t, int classes, ClassSet class_set = ClassSet::in_test_gt) {
  if (frames.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<ScoredDetection> dets;
  std::vector<GroundTruth> gts;
  for (const FrameRecord& f : frames) {
    for (const Detection& d : predict(f)) dets.push_back({f.frame_index, d});
    for (std::size_t i = 0; i < f.gt_boxes.size(); ++i) gts.push_back({f.frame_index, f.gt_boxes[i], f.gt_classes[i]});
  }
  EvalSnapshot s{eval_index, t, {}};
  for (int c = 0; c < classes; ++c) {
    if (auto ap = ap50_per_class(dets, gts, c))
      s.per_class_ap[c] = *ap;
    else if (class_set == ClassSet::all)
      s.per_class_ap[c] = 0.0;
  }
  return s;
}

namespace detail {
inline std::vector<EvalSnapshot> by_eval_index(std::span<const EvalSnapshot> snaps) {
  std::vector<EvalSnapshot> v(snaps.begin(), snaps.end());
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.eval_index < b.eval_index; });
  return v;
}
}  // namespace detail

/// Mean over evaluations of the class-mean AP.
inline double cap(std::span<const EvalSnapshot> snaps) {
  if (snaps.empty()) throw std::invalid_argument("cap: no snapshots");
  double s = 0;
  for (const auto& e : snaps) s += e.class_mean();
  return s / static_cast<double>(snaps.size());
}

/// Class-mean AP of the last evaluation (highest eval_index).
inline double fap(std::span<const EvalSnapshot> snaps) {
  if (snaps.empty()) throw std::invalid_argument("fap: no snapshots");
  return std::max_element(snaps.begin(), snaps.end(), [](const auto& a, const auto& b) {
           return a.eval_index < b.eval_index;
         })->class_mean();
}

/// Training steps at which each class had ground truth in the supervised loss.
class TrainPresenceLog {
 public:
  void record(int class_id, std::int64_t step) {
    auto& v = steps_[class_id];
    if (v.empty() || v.back() < step) {
      v.push_back(step);
    } else if (!std::binary_search(v.begin(), v.end(), step)) {
      v.insert(std::upper_bound(v.begin(), v.end(), step), step);
    }
  }

  /// Most recent training step of the class at or before `t`.
  std::optional<std::int64_t> last_at_or_before(int class_id, std::int64_t t) const {
    const auto it = steps_.find(class_id);
    if (it == steps_.end()) return std::nullopt;
    const auto& v = it->second;
    auto pos = std::upper_bound(v.begin(), v.end(), t);
    if (pos == v.begin()) return std::nullopt;
    return *std::prev(pos);
  }

  const std::map<int, std::vector<std::int64_t>>& steps() const { return steps_; }
  friend bool operator==(const TrainPresenceLog&, const TrainPresenceLog&) = default;

 private:
  std::map<int, std::vector<std::int64_t>> steps_;
};

/// Per-class binning of AP against interval since last training. Bin j is
/// centred on k_j = kmin + j (kmax - kmin) / (K - 1), so the first bin stands
/// for kmin and the last for kmax; observations go to the nearest centre.
struct ForgettingBins {
  double kmin = 0, kmax = 0;
  std::vector<double> centers;
  std::vector<double> acap;  // NaN for empty bins
  std::vector<int> counts;
};

struct ForgettingResult {
  double overall = 0;               // class mean of F^c
  std::map<int, double> per_class;  // F^c
  std::map<int, ForgettingBins> bins;
  std::vector<int> excluded;  // classes never trained before an evaluation
};

inline ForgettingBins bin_intervals(const std::vector<std::pair<double, double>>& k_and_ap, int K) {
  ForgettingBins b;
  b.kmin = k_and_ap.front().first;
  b.kmax = b.kmin;
  for (const auto& [k, ap] : k_and_ap) {
    b.kmin = std::min(b.kmin, k);
    b.kmax = std::max(b.kmax, k);
  }
  const double step = (b.kmax - b.kmin) / (K - 1);
  b.centers.resize(static_cast<std::size_t>(K));
  for (int j = 0; j < K; ++j) b.centers[j] = b.kmin + j * step;
  std::vector<double> sum(static_cast<std::size_t>(K), 0.0);
  b.counts.assign(static_cast<std::size_t>(K), 0);
  for (const auto& [k, ap] : k_and_ap) {
    const int j = step > 0 ? std::clamp(static_cast<int>(std::lround((k - b.kmin) / step)), 0, K - 1) : 0;
    sum[j] += ap;
    ++b.counts[j];
  }
  b.acap.resize(static_cast<std::size_t>(K));
  for (int j = 0; j < K; ++j) b.acap[j] = b.counts[j] > 0 ? sum[j] / b.counts[j] : std::nan("");
  return b;
}

/// F^c = sum_k w_k (aCAP_kmin - aCAP_k), w_k = (k - kmin) / sum (k - kmin)
/// over populated bins. Zero when every observation shares one interval.
inline double forgetting_from_bins(const ForgettingBins& b) {
  double wsum = 0;
  for (std::size_t j = 0; j < b.centers.size(); ++j)
    if (b.counts[j] > 0) wsum += b.centers[j] - b.kmin;
  if (wsum <= 0) return 0.0;
  double f = 0;
  for (std::size_t j = 0; j < b.centers.size(); ++j)
    if (b.counts[j] > 0) f += (b.centers[j] - b.kmin) / wsum * (b.acap[0] - b.acap[j]);
  return f;
}

/// Forgetfulness over a run. Evaluations before a class's first training
/// step are discarded; classes never trained are excluded from the mean.
inline ForgettingResult forgetfulness(std::span<const EvalSnapshot> snaps, const TrainPresenceLog& presence, int K = 10) {
  if (K < 2) throw std::invalid_argument("forgetfulness: K must be >= 2");
  ForgettingResult out;
  const auto ordered = detail::by_eval_index(snaps);
  std::set<int> classes;
  for (const auto& s : ordered)
    for (const auto& [c, ap] : s.per_class_ap) classes.insert(c);
  for (int c : classes) {
    std::vector<std::pair<double, double>> obs;
    for (const auto& s : ordered) {
      const auto it = s.per_class_ap.find(c);
      if (it == s.per_class_ap.end()) continue;
      const auto last = presence.last_at_or_before(c, s.t);
      if (!last) continue;
      obs.emplace_back(static_cast<double>(s.t - *last), it->second);
    }
    if (obs.empty()) {
      out.excluded.push_back(c);
      continue;
    }
    auto bins = bin_intervals(obs, K);
    out.per_class[c] = forgetting_from_bins(bins);
    out.bins[c] = std::move(bins);
  }
  if (!out.per_class.empty()) {
    double s = 0;
    for (const auto& [c, f] : out.per_class) s += f;
    out.overall = s / static_cast<double>(out.per_class.size());
  }
  return out;
}

}  // namespace ecls
