#pragma once

// Reference learners without a slow learner or pseudo labels. These are
// written separately from train_step so the ablation runs can be checked
// against them step for step.

#include <set>
#include <vector>

#include "ecls/detector.hpp"
#include "ecls/ecls_core.hpp"
#include "ecls/replay.hpp"
#include "ecls/stream_sim.hpp"

namespace ecls::baseline {

struct Learner {
  ModelParams params;
  AdamState optimizer;
  AdamConfig adam;
};

namespace detail {
inline StepReport supervised_update(Learner& m, const std::vector<const FrameRecord*>& frames, int labeled,
                                    const GridDetector& det, std::int64_t t) {
  StepReport rep;
  rep.t = t;
  rep.labeled_frames = labeled;
  rep.replay_frames = static_cast<int>(frames.size()) - labeled;
  if (frames.empty()) return rep;
  ModelParams grad(m.params.shape);
  std::set<int> trained;
  const double w = 1.0 / static_cast<double>(frames.size());
  for (const FrameRecord* f : frames) {
    const auto a = assign_targets(*f, det.geometry, det.classes);
    rep.loss_sup += w * accumulate_loss(m.params, featurize(*f, det.geometry), det.geometry, a, w, &grad).total();
    trained.insert(f->gt_classes.begin(), f->gt_classes.end());
  }
  adam_step(m.params, grad, m.optimizer, m.adam);
  for (int i = 0; i < labeled; ++i) rep.stream_frames_trained.push_back(frames[i]->frame_index);
  rep.trained_classes.assign(trained.begin(), trained.end());
  return rep;
}
}  // namespace detail

/// Plain sequential fine-tuning on the batch's labeled frames.
inline StepReport incremental_step(Learner& m, const StreamBatch& batch, const GridDetector& det) {
  std::vector<const FrameRecord*> frames;
  for (std::size_t i = 0; i < batch.train_frames.size(); ++i)
    if (batch.labeled_mask[i]) frames.push_back(&batch.train_frames[i]);
  return detail::supervised_update(m, frames, static_cast<int>(frames.size()), det, batch.step_index + 1);
}

/// Joint training on the labeled frames and a replay draw, then the labeled
/// frames are offered to memory.
inline StepReport replay_step(Learner& m, const StreamBatch& batch, EpisodicMemory& memory, Rng& replay_rng,
                              std::size_t replay_size, const GridDetector& det) {
  std::vector<const FrameRecord*> frames;
  for (std::size_t i = 0; i < batch.train_frames.size(); ++i)
    if (batch.labeled_mask[i]) frames.push_back(&batch.train_frames[i]);
  const int labeled = static_cast<int>(frames.size());
  for (const MemoryEntry* e : memory.sample(replay_size, replay_rng)) frames.push_back(&e->frame);
  StepReport rep = detail::supervised_update(m, frames, labeled, det, batch.step_index + 1);
  for (std::size_t i = 0; i < batch.train_frames.size(); ++i)
    if (batch.labeled_mask[i]) memory.store(batch.train_frames[i]);
  return rep;
}

}  // namespace ecls::baseline
