#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include <unistd.h>

#include "ecls/replay.hpp"

using namespace ecls;

namespace {

FrameRecord labeled(std::int64_t index, std::vector<int> classes) {
  FrameRecord f;
  f.frame_index = index;
  f.image = Image(2, 2, 3, 0.2);
  f.is_labeled = true;
  for (std::size_t i = 0; i < classes.size(); ++i) f.gt_boxes.push_back({0, 0, 1, 1});
  f.gt_classes = std::move(classes);
  return f;
}

}  // namespace

TEST(Replay, BalancedFilesUnderRarestClassAndCapsEachClass) {
  EpisodicMemory m(ReplayPolicy::balanced, 2, 3, 1);
  EXPECT_TRUE(m.store(labeled(0, {0})));
  EXPECT_TRUE(m.store(labeled(1, {0, 1})));  // class 1 is emptier
  EXPECT_EQ(m.count(0), 1);
  EXPECT_EQ(m.count(1), 1);
  EXPECT_TRUE(m.store(labeled(2, {1, 0})));  // tie goes to the lower id
  EXPECT_EQ(m.count(0), 2);
  for (int i = 3; i < 50; ++i) m.store(labeled(i, {0}));
  EXPECT_EQ(m.count(0), 2);
  EXPECT_EQ(m.count(1), 1);
  EXPECT_EQ(m.size(), 3u);
}

TEST(Replay, BalancedKeepsRareClassesUnderSkewedStream) {
  EpisodicMemory bal(ReplayPolicy::balanced, 5, 4, 2);
  EpisodicMemory rnd(ReplayPolicy::random, 5, 4, 2);
  for (int i = 0; i < 400; ++i) {
    const int c = i % 100 == 0 ? 1 + (i / 100) % 3 : 0;
    bal.store(labeled(i, {c}));
    rnd.store(labeled(i, {c}));
  }
  for (int c = 1; c < 4; ++c) EXPECT_GE(bal.count(c), 1);
  EXPECT_EQ(bal.count(0), 5);
  EXPECT_EQ(rnd.size(), 20u);
  EXPECT_GT(rnd.count(0), 5);
}

TEST(Replay, EvictionReplacesWithinTheSameClass) {
  EpisodicMemory m(ReplayPolicy::balanced, 1, 2, 3);
  m.store(labeled(0, {0}));
  m.store(labeled(1, {1}));
  m.store(labeled(2, {0}));
  ASSERT_EQ(m.size(), 2u);
  std::set<std::int64_t> held;
  for (const auto& e : m.entries()) held.insert(e.frame.frame_index);
  EXPECT_EQ(held, (std::set<std::int64_t>{1, 2}));
}

TEST(Replay, RejectsUnlabeledAndOutOfRangeFramesAndSkipsEmpty) {
  EpisodicMemory m(ReplayPolicy::balanced, 2, 2, 1);
  FrameRecord u = labeled(0, {0});
  u.is_labeled = false;
  EXPECT_THROW(m.store(u), std::invalid_argument);
  EXPECT_THROW(m.store(labeled(1, {5})), std::invalid_argument);
  EXPECT_FALSE(m.store(labeled(2, {})));
  EXPECT_TRUE(m.empty());
  EXPECT_THROW(EpisodicMemory(ReplayPolicy::balanced, 0, 2, 1), ConfigError);
}

TEST(Replay, ReservoirInclusionIsUniform) {
  // Offer 200 frames to a 10-slot reservoir many times; early and late
  // frames should be held equally often (expected 5 per half per trial).
  double early = 0, late = 0;
  const int trials = 400;
  for (int t = 0; t < trials; ++t) {
    EpisodicMemory m(ReplayPolicy::random, 5, 2, static_cast<std::uint64_t>(t));
    for (int i = 0; i < 200; ++i) m.store(labeled(i, {i % 2}));
    EXPECT_EQ(m.size(), 10u);
    for (const auto& e : m.entries()) (e.frame.frame_index < 100 ? early : late) += 1;
  }
  EXPECT_NEAR(early / trials, 5.0, 0.4);
  EXPECT_NEAR(late / trials, 5.0, 0.4);
}

TEST(Replay, SampleDrawsDistinctEntries) {
  EpisodicMemory m(ReplayPolicy::balanced, 10, 3, 1);
  for (int i = 0; i < 30; ++i) m.store(labeled(i, {i % 3}));
  Rng rng(4);
  const auto s = m.sample(12, rng);
  ASSERT_EQ(s.size(), 12u);
  EXPECT_EQ(std::set<const MemoryEntry*>(s.begin(), s.end()).size(), 12u);
  EXPECT_EQ(m.sample(100, rng).size(), 30u);
}

TEST(Replay, SameSeedSameContents) {
  EpisodicMemory a(ReplayPolicy::balanced, 2, 2, 7), b(ReplayPolicy::balanced, 2, 2, 7);
  for (int i = 0; i < 40; ++i) {
    a.store(labeled(i, {i % 2}));
    b.store(labeled(i, {i % 2}));
  }
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.entries()[i].frame, b.entries()[i].frame);
}

TEST(Replay, CheckpointRoundTrips) {
  EpisodicMemory m(ReplayPolicy::balanced, 3, 3, 1);
  for (int i = 0; i < 20; ++i) m.store(labeled(i, {i % 3, (i + 1) % 3}));
  const auto path = std::filesystem::temp_directory_path() / ("ecls_mem_" + std::to_string(::getpid()) + ".jsonl");
  m.save(path);
  const auto back = EpisodicMemory::load(path, 1);
  EXPECT_EQ(back.policy(), m.policy());
  EXPECT_EQ(back.total_capacity(), m.total_capacity());
  ASSERT_EQ(back.size(), m.size());
  for (int c = 0; c < 3; ++c) EXPECT_EQ(back.count(c), m.count(c));
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(back.entries()[i].frame, m.entries()[i].frame);
    EXPECT_EQ(back.entries()[i].stored_class, m.entries()[i].stored_class);
  }
  std::filesystem::remove(path);
}

TEST(Replay, PolicyNames) {
  EXPECT_EQ(parse_replay_policy("balanced"), ReplayPolicy::balanced);
  EXPECT_EQ(parse_replay_policy("random"), ReplayPolicy::random);
  EXPECT_THROW(parse_replay_policy("fifo"), ConfigError);
}
