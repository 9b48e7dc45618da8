#pragma once

// Self-check suite behind `ecls validate`: each check compares the library
// against an oracle from oracles.hpp or asserts a stated invariant.

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ecls/detector.hpp"
#include "ecls/ecls_core.hpp"
#include "ecls/harness.hpp"
#include "ecls/metrics.hpp"
#include "ecls/stream_sim.hpp"
#include "ecls/testing/oracles.hpp"

namespace ecls::testing {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline CheckResult check_gradients(int instances, std::uint64_t seed = 11) {
  Rng rng(seed);
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    auto in = random_gradient_instance(rng);
    const auto analytic = loss_sup(in.params, in.frame, in.geometry, in.assignment).gradient.values;
    const auto numeric = numeric_gradient(
        [&](const ModelParams& p) {
          return accumulate_loss(p, featurize(in.frame, in.geometry), in.geometry, in.assignment, 1.0, nullptr).total();
        },
        in.params);
    worst = std::max(worst, max_relative_error(analytic, numeric));
  }
  return {"gradient vs central differences", worst < 1e-4, "max relative error " + fmt(worst)};
}

inline CheckResult check_nms(int instances, std::uint64_t seed = 12) {
  Rng rng(seed);
  int mismatches = 0;
  for (int i = 0; i < instances; ++i) {
    const auto dets = random_detections(rng, rng.between(0, 50), 3);
    const double thr = rng.uniform(0.2, 0.8);
    if (class_nms(dets, thr) != brute_force_nms(dets, thr)) ++mismatches;
  }
  return {"class-wise NMS vs brute force", mismatches == 0, std::to_string(mismatches) + " mismatches"};
}

inline CheckResult check_ap(int instances, std::uint64_t seed = 13) {
  Rng rng(seed);
  double worst = 0;
  bool defined_agree = true;
  for (int i = 0; i < instances; ++i) {
    std::vector<ScoredDetection> dets;
    std::vector<GroundTruth> gts;
    const int frames = static_cast<int>(rng.between(1, 3));
    const auto n_gt = rng.between(0, 20), n_det = rng.between(0, 20);
    for (long long k = 0; k < n_gt; ++k)
      gts.push_back({static_cast<std::int64_t>(rng.below(frames)), random_box(rng, 60, 8, 30),
                     static_cast<int>(rng.below(2))});
    for (long long k = 0; k < n_det; ++k) {
      Box b = random_box(rng, 60, 8, 30);
      if (!gts.empty() && rng.bernoulli(0.6)) {
        const auto& g = gts[rng.below(gts.size())];
        b = {g.box.x1 + rng.uniform(-4, 4), g.box.y1 + rng.uniform(-4, 4), g.box.x2 + rng.uniform(-4, 4),
             g.box.y2 + rng.uniform(-4, 4)};
      }
      const double score = rng.bernoulli(0.3) ? std::round(rng.uniform() * 5) / 5 : rng.uniform();
      dets.push_back({static_cast<std::int64_t>(rng.below(frames)), {b, static_cast<int>(rng.below(2)), score}});
    }
    for (int c = 0; c < 2; ++c) {
      const auto a = ap50_per_class(dets, gts, c);
      const auto b = exhaustive_ap(dets, gts, c);
      if (a.has_value() != b.has_value()) defined_agree = false;
      if (a && b) worst = std::max(worst, std::abs(*a - *b));
    }
  }
  return {"AP50 vs exhaustive precision/recall", defined_agree && worst <= 1e-12, "max |diff| " + fmt(worst)};
}

inline CheckResult check_metric_formulas() {
  std::ostringstream why;
  bool ok = true;
  // EMA recursion against its closed form.
  {
    Rng rng(5);
    ModelParams p(ModelShape{1, 1, 1, 1});
    LearnerPair pair = LearnerPair::from(p, 0.9);
    for (double& v : pair.slow.values) v = rng.normal();
    const double s0 = pair.slow.values[0];
    std::vector<double> fast;
    for (int t = 0; t < 30; ++t) {
      for (double& v : pair.fast.values) v = rng.normal();
      fast.push_back(pair.fast.values[0]);
      ema_update(pair);
    }
    const double e = std::abs(pair.slow.values[0] - ema_closed_form(0.9, s0, fast));
    if (e > 1e-12) ok = false, why << "ema diff " << e << "; ";
  }
  // CAP: two evaluations, two classes.
  {
    std::vector<EvalSnapshot> s{{0, 100, {{0, 0.2}, {1, 0.4}}}, {1, 200, {{0, 0.6}, {1, 0.8}}}};
    if (std::abs(cap(s) - 0.5) > 1e-12) ok = false, why << "cap " << cap(s) << "; ";
  }
  // Forgetfulness: two bins with aCAP 0.8 at kmin and 0.6 at kmax.
  {
    TrainPresenceLog log;
    log.record(0, 100);
    std::vector<EvalSnapshot> s{{0, 100, {{0, 0.8}}}, {1, 300, {{0, 0.6}}}};
    const double f = forgetfulness(s, log, 2).per_class.at(0);
    if (std::abs(f - 0.2) > 1e-12) ok = false, why << "F " << f << "; ";
    std::vector<EvalSnapshot> flat{{0, 100, {{0, 0.5}}}, {1, 200, {{0, 0.5}}}, {2, 300, {{0, 0.5}}}};
    if (forgetfulness(flat, log, 3).overall != 0.0) ok = false, why << "constant aCAP gives nonzero F; ";
  }
  return {"EMA / CAP / forgetfulness formulas", ok, ok ? "exact" : why.str()};
}

inline CheckResult check_determinism() {
  StreamConfig sc;
  sc.classes = 3;
  sc.batches = 4;
  const auto a = generate_scenario(sc, 7), b = generate_scenario(sc, 7);
  bool ok = a == b && render_frame(a, 17) == render_frame(b, 17);
  return {"scenario and rendering determinism", ok, ok ? "bit-identical" : "differs"};
}

/// quick = fewer random instances.
inline std::vector<CheckResult> run_validation(bool quick) {
  const int scale = quick ? 1 : 5;
  return {check_gradients(4 * scale), check_nms(200 * scale), check_ap(100 * scale), check_metric_formulas(),
          check_determinism()};
}

}  // namespace ecls::testing
