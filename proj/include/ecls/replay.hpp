#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecls/errors.hpp"
#include "ecls/frame.hpp"
#include "ecls/rng.hpp"
#include "ecls/stream_io.hpp"

namespace ecls {

enum class ReplayPolicy { balanced, random };

inline const char* to_string(ReplayPolicy p) { return p == ReplayPolicy::balanced ? "balanced" : "random"; }

inline ReplayPolicy parse_replay_policy(const std::string& s) {
  if (s == "balanced") return ReplayPolicy::balanced;
  if (s == "random") return ReplayPolicy::random;
  throw ConfigError("unknown replay policy '" + s + "' (expected balanced|random)");
}

struct MemoryEntry {
  FrameRecord frame;
  int stored_class = 0;
};

/// Episodic memory of ground-truth labeled frames.
///
/// balanced: each frame is filed under its rarest contained class (fewest
/// stored entries, ties to the lower id); a full class evicts one of its own
/// entries uniformly at random.
/// random: reservoir sampling over every offered frame, with the same total
/// size as the balanced buffer (per_class_capacity * classes).
class EpisodicMemory {
 public:
  EpisodicMemory(ReplayPolicy policy, int per_class_capacity, int classes, std::uint64_t seed)
      : policy_(policy),
        per_class_capacity_(per_class_capacity),
        classes_(classes),
        counts_(static_cast<std::size_t>(std::max(classes, 0)), 0),
        rng_(derive_seed(seed, 0x3e30)) {
    if (per_class_capacity < 1) throw ConfigError("replay: per_class_capacity must be >= 1");
    if (classes < 1) throw ConfigError("replay: classes must be >= 1");
  }

  ReplayPolicy policy() const { return policy_; }
  int per_class_capacity() const { return per_class_capacity_; }
  int classes() const { return classes_; }
  std::size_t total_capacity() const { return static_cast<std::size_t>(per_class_capacity_) * classes_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int count(int class_id) const { return counts_.at(static_cast<std::size_t>(class_id)); }
  const std::vector<MemoryEntry>& entries() const { return entries_; }

  /// Offers a labeled frame. Frames without objects are skipped; returns
  /// whether the frame is now held.
  bool store(const FrameRecord& frame) {
    if (!frame.is_labeled) throw std::invalid_argument("replay: only ground-truth labeled frames can be stored");
    if (frame.gt_classes.empty()) return false;
    for (int c : frame.gt_classes)
      if (c < 0 || c >= classes_) throw std::invalid_argument("replay: class id out of range");
    const int key = rarest_class(frame);
    if (policy_ == ReplayPolicy::balanced) {
      if (counts_[key] < per_class_capacity_) {
        entries_.push_back({frame, key});
        ++counts_[key];
        return true;
      }
      std::vector<std::size_t> same;
      for (std::size_t i = 0; i < entries_.size(); ++i)
        if (entries_[i].stored_class == key) same.push_back(i);
      entries_[same[rng_.below(same.size())]] = {frame, key};
      return true;
    }
    ++offered_;
    if (entries_.size() < total_capacity()) {
      entries_.push_back({frame, key});
      ++counts_[key];
      return true;
    }
    const std::uint64_t j = rng_.below(offered_);
    if (j >= total_capacity()) return false;
    --counts_[entries_[j].stored_class];
    entries_[j] = {frame, key};
    ++counts_[key];
    return true;
  }

  /// Class a frame would be filed under: the contained class with the fewest
  /// stored entries, lowest id on ties.
  int rarest_class(const FrameRecord& frame) const {
    int best = -1;
    for (int c : frame.gt_classes)
      if (best < 0 || counts_[c] < counts_[best] || (counts_[c] == counts_[best] && c < best)) best = c;
    return best;
  }

  /// n distinct entries drawn uniformly without replacement, or every entry
  /// when fewer than n are held.
  std::vector<const MemoryEntry*> sample(std::size_t n, Rng& rng) const {
    std::vector<const MemoryEntry*> out;
    if (n >= entries_.size()) {
      for (const auto& e : entries_) out.push_back(&e);
      return out;
    }
    std::vector<std::size_t> idx(entries_.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      out.push_back(&entries_[idx[i]]);
    }
    return out;
  }

  /// Checkpoint: a JSON header line, then one frame line per entry with an
  /// extra "stored_class" field. The eviction generator state is not saved.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    nlohmann::json header{{"policy", to_string(policy_)},
                          {"per_class_capacity", per_class_capacity_},
                          {"total_capacity", total_capacity()},
                          {"classes", classes_},
                          {"offered", offered_}};
    out << header.dump() << "\n";
    for (const auto& e : entries_) {
      auto j = frame_to_json(e.frame);
      j["stored_class"] = e.stored_class;
      out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + path.string());
  }

  static EpisodicMemory load(const std::filesystem::path& path, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw SchemaError(1, "missing memory header");
    nlohmann::json h;
    try {
      h = nlohmann::json::parse(line);
      EpisodicMemory m(parse_replay_policy(h.at("policy").get<std::string>()), h.at("per_class_capacity").get<int>(),
                       h.at("classes").get<int>(), seed);
      m.offered_ = h.value("offered", std::uint64_t{0});
      std::size_t line_no = 1;
      while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (!j.contains("stored_class")) throw SchemaError(line_no, "missing field 'stored_class'");
        MemoryEntry e{frame_from_json(line, line_no, path.parent_path()), j["stored_class"].get<int>()};
        if (e.stored_class < 0 || e.stored_class >= m.classes_) throw SchemaError(line_no, "stored_class out of range");
        ++m.counts_[e.stored_class];
        m.entries_.push_back(std::move(e));
      }
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ": " + e.what());
    }
  }

 private:
  ReplayPolicy policy_;
  int per_class_capacity_;
  int classes_;
  std::vector<int> counts_;
  std::vector<MemoryEntry> entries_;
  std::uint64_t offered_ = 0;
  Rng rng_;
};

}  // namespace ecls
