#pragma once

// JSONL frame format, one frame per line:
//   {"frame_index": int, "image": <base64 of raw H*W*C bytes | path to .ppm/.pgm>,
//    "boxes": [[x1,y1,x2,y2],...], "classes": [int,...],
//    optional "height", "width", "channels", "split": "train"|"test", "is_labeled": bool}
// Without explicit dimensions a base64 image is taken to be square with 3 channels.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecls/base64.hpp"
#include "ecls/errors.hpp"
#include "ecls/frame.hpp"

namespace ecls {

inline std::vector<std::uint8_t> image_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  return out;
}

inline Image image_from_bytes(const std::vector<std::uint8_t>& bytes, int h, int w, int c) {
  Image img(h, w, c);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

inline nlohmann::json frame_to_json(const FrameRecord& f) {
  nlohmann::json j;
  j["frame_index"] = f.frame_index;
  j["height"] = f.image.height;
  j["width"] = f.image.width;
  j["channels"] = f.image.channels;
  j["image"] = base64::encode(image_bytes(f.image));
  auto boxes = nlohmann::json::array();
  for (const Box& b : f.gt_boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  j["boxes"] = std::move(boxes);
  j["classes"] = f.gt_classes;
  j["split"] = f.split == Split::test ? "test" : "train";
  j["is_labeled"] = f.is_labeled;
  return j;
}

/// Binary PPM (P6) or PGM (P5) with maxval 255.
inline Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  const int channels = magic == "P6" ? 3 : magic == "P5" ? 1 : 0;
  if (channels == 0) throw IoError(path.string() + ": not a binary PPM/PGM");
  auto next_int = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    int v = -1;
    in >> v;
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError(path.string() + ": unsupported PNM header");
  in.get();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw IoError(path.string() + ": truncated pixel data");
  return image_from_bytes(bytes, h, w, channels);
}

inline void write_pnm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  const auto bytes = image_bytes(img);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Parses one line. `base_dir` resolves relative image paths.
inline FrameRecord frame_from_json(const std::string& line, std::size_t line_no,
                                   const std::filesystem::path& base_dir = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError(line_no, "expected a JSON object");
  for (const char* key : {"frame_index", "image", "boxes", "classes"})
    if (!j.contains(key)) throw SchemaError(line_no, std::string("missing field '") + key + "'");
  if (!j["frame_index"].is_number_integer()) throw SchemaError(line_no, "frame_index must be an integer");
  if (!j["image"].is_string()) throw SchemaError(line_no, "image must be a string");
  if (!j["boxes"].is_array() || !j["classes"].is_array())
    throw SchemaError(line_no, "boxes and classes must be arrays");

  FrameRecord f;
  f.frame_index = j["frame_index"].get<std::int64_t>();
  const std::string image = j["image"].get<std::string>();
  const bool looks_like_path = image.ends_with(".ppm") || image.ends_with(".pgm");
  if (looks_like_path) {
    std::filesystem::path p(image);
    if (p.is_relative()) p = base_dir / p;
    f.image = read_pnm(p);
  } else {
    auto bytes = base64::decode(image);
    if (!bytes) throw SchemaError(line_no, "image is neither base64 nor a .ppm/.pgm path");
    int c = j.value("channels", 3);
    int h = j.value("height", 0), w = j.value("width", 0);
    if (h == 0 || w == 0) {
      const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(bytes->size()) / c)));
      h = w = side;
    }
    if (c <= 0 || h <= 0 || w <= 0 || static_cast<std::size_t>(h) * w * c != bytes->size())
      throw SchemaError(line_no, "image byte count does not match height*width*channels");
    f.image = image_from_bytes(*bytes, h, w, c);
  }

  for (const auto& jb : j["boxes"]) {
    if (!jb.is_array() || jb.size() != 4) throw SchemaError(line_no, "each box must be [x1,y1,x2,y2]");
    for (const auto& v : jb)
      if (!v.is_number()) throw SchemaError(line_no, "box coordinates must be numbers");
    const Box b{jb[0].get<double>(), jb[1].get<double>(), jb[2].get<double>(), jb[3].get<double>()};
    if (!(b.x1 < b.x2 && b.y1 < b.y2)) throw SchemaError(line_no, "box must satisfy x1<x2 and y1<y2");
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > f.image.width || b.y2 > f.image.height)
      throw SchemaError(line_no, "box outside image bounds");
    f.gt_boxes.push_back(b);
  }
  for (const auto& jc : j["classes"]) {
    if (!jc.is_number_integer() || jc.get<int>() < 0) throw SchemaError(line_no, "classes must be non-negative integers");
    f.gt_classes.push_back(jc.get<int>());
  }
  if (f.gt_boxes.size() != f.gt_classes.size()) throw SchemaError(line_no, "boxes and classes differ in length");

  if (j.contains("split")) {
    const auto split = j["split"].get<std::string>();
    if (split != "train" && split != "test") throw SchemaError(line_no, "split must be 'train' or 'test'");
    f.split = split == "test" ? Split::test : Split::train;
  }
  f.is_labeled = j.value("is_labeled", false);
  if (f.is_labeled && f.split == Split::test) throw SchemaError(line_no, "test frames cannot be labeled");
  return f;
}

inline void write_stream(const std::vector<FrameRecord>& frames, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& f : frames) out << frame_to_json(f).dump() << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

/// Loads a JSONL stream. Frame indices must be strictly increasing.
inline std::vector<FrameRecord> load_stream(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open stream file " + path.string());
  std::vector<FrameRecord> frames;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    FrameRecord f = frame_from_json(line, line_no, path.parent_path());
    if (!frames.empty() && f.frame_index <= frames.back().frame_index)
      throw SchemaError(line_no, "frame_index not strictly increasing");
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace ecls
