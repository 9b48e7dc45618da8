#pragma once

// Single-stage grid detector. A fixed pooling featurizer feeds two linear
// heads shared by every grid cell: a softmax classifier over C classes plus
// background, and a 4-value box regressor. Forward pass, losses and their
// analytic gradients are closed form.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ecls/box.hpp"
#include "ecls/errors.hpp"
#include "ecls/frame.hpp"
#include "ecls/rng.hpp"

namespace ecls {

/// Grid layout shared by the featurizer, the heads and target assignment.
struct GridGeometry {
  int height = 64;
  int width = 64;
  int channels = 3;
  int cell = 8;     // cell side in pixels
  int sub = 2;      // sub-patches per cell side
  int context = 1;  // neighbour rings gathered into each cell's head input

  int rows() const { return height / cell; }
  int cols() const { return width / cell; }
  int cells() const { return rows() * cols(); }
  int cell_dim() const { return sub * sub * channels; }
  int feature_dim() const { return (2 * context + 1) * (2 * context + 1) * cell_dim(); }

  void validate() const {
    if (cell <= 0 || sub <= 0 || context < 0 || channels <= 0) throw ConfigError("grid: non-positive geometry");
    if (height % cell != 0 || width % cell != 0)
      throw ConfigError("grid: image dimensions must be divisible by the cell size");
    if (cell % sub != 0) throw ConfigError("grid: cell size must be divisible by the sub-patch count");
  }

  Box cell_box(int r, int c) const {
    return {static_cast<double>(c * cell), static_cast<double>(r * cell), static_cast<double>((c + 1) * cell),
            static_cast<double>((r + 1) * cell)};
  }

  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

/// Per-cell pooled features: mean intensity of each channel over each sub-patch.
struct FeatureGrid {
  int rows = 0, cols = 0, dim = 0;
  std::vector<double> values;

  std::span<const double> cell(int r, int c) const {
    return {values.data() + (static_cast<std::size_t>(r) * cols + c) * dim, static_cast<std::size_t>(dim)};
  }
};

inline FeatureGrid featurize(const Image& img, const GridGeometry& g) {
  g.validate();
  if (img.height != g.height || img.width != g.width || img.channels != g.channels)
    throw ConfigError("featurize: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                      std::to_string(img.channels) + ", grid expects " + std::to_string(g.height) + "x" +
                      std::to_string(g.width) + "x" + std::to_string(g.channels));
  FeatureGrid fg{g.rows(), g.cols(), g.cell_dim(), {}};
  fg.values.assign(static_cast<std::size_t>(fg.rows) * fg.cols * fg.dim, 0.0);
  const int patch = g.cell / g.sub;
  const double inv = 1.0 / (patch * patch);
  for (int r = 0; r < fg.rows; ++r)
    for (int c = 0; c < fg.cols; ++c) {
      double* out = fg.values.data() + (static_cast<std::size_t>(r) * fg.cols + c) * fg.dim;
      for (int sy = 0; sy < g.sub; ++sy)
        for (int sx = 0; sx < g.sub; ++sx)
          for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x)
              for (int ch = 0; ch < g.channels; ++ch)
                out[(sy * g.sub + sx) * g.channels + ch] +=
                    img.at(r * g.cell + sy * patch + y, c * g.cell + sx * patch + x, ch) * inv;
    }
  return fg;
}

inline FeatureGrid featurize(const FrameRecord& f, const GridGeometry& g) { return featurize(f.image, g); }

/// Head input of one cell: the features of its (2*context+1)^2 neighbourhood,
/// zero outside the grid.
inline void head_input(const FeatureGrid& fg, const GridGeometry& g, int r, int c, std::span<double> out) {
  std::size_t k = 0;
  for (int dr = -g.context; dr <= g.context; ++dr)
    for (int dc = -g.context; dc <= g.context; ++dc) {
      const int rr = r + dr, cc = c + dc;
      if (rr < 0 || cc < 0 || rr >= fg.rows || cc >= fg.cols) {
        std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(k), fg.dim, 0.0);
      } else {
        const auto src = fg.cell(rr, cc);
        std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(k));
      }
      k += static_cast<std::size_t>(fg.dim);
    }
}

struct ModelShape {
  int classes = 0;      // foreground classes; output index `classes` is background
  int feature_dim = 0;
  int rows = 0, cols = 0;

  std::size_t outputs() const { return static_cast<std::size_t>(classes) + 1; }
  std::size_t w_cls_size() const { return static_cast<std::size_t>(feature_dim) * outputs(); }
  std::size_t w_reg_size() const { return static_cast<std::size_t>(feature_dim) * 4; }
  std::size_t size() const { return w_cls_size() + outputs() + w_reg_size() + 4; }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

inline ModelShape model_shape(const GridGeometry& g, int classes) {
  return {classes, g.feature_dim(), g.rows(), g.cols()};
}

/// Flat parameter vector with typed views. Layout: w_cls (feature_dim x (C+1),
/// row-major), b_cls, w_reg (feature_dim x 4), b_reg. Gradients use the same type.
struct ModelParams {
  ModelShape shape;
  std::vector<double> values;

  ModelParams() = default;
  explicit ModelParams(const ModelShape& s) : shape(s), values(s.size(), 0.0) {}

  std::span<double> w_cls() { return {values.data(), shape.w_cls_size()}; }
  std::span<double> b_cls() { return {values.data() + shape.w_cls_size(), shape.outputs()}; }
  std::span<double> w_reg() { return {values.data() + shape.w_cls_size() + shape.outputs(), shape.w_reg_size()}; }
  std::span<double> b_reg() { return {values.data() + shape.size() - 4, 4}; }
  std::span<const double> w_cls() const { return {values.data(), shape.w_cls_size()}; }
  std::span<const double> b_cls() const { return {values.data() + shape.w_cls_size(), shape.outputs()}; }
  std::span<const double> w_reg() const {
    return {values.data() + shape.w_cls_size() + shape.outputs(), shape.w_reg_size()};
  }
  std::span<const double> b_reg() const { return {values.data() + shape.size() - 4, 4}; }

  bool finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Small Gaussian weights, zero biases.
inline ModelParams init_params(const ModelShape& shape, std::uint64_t seed, double scale = 0.01) {
  ModelParams p(shape);
  Rng rng(derive_seed(seed, 0x1417));
  for (double& w : p.w_cls()) w = scale * rng.normal();
  for (double& w : p.w_reg()) w = scale * rng.normal();
  return p;
}

struct DenseOutput {
  GridGeometry geometry;
  int classes = 0;
  std::vector<double> logits;  // cells x (C+1)
  std::vector<double> deltas;  // cells x 4, corner offsets from the cell bounds in cell units

  std::span<const double> cell_logits(int cell) const {
    return {logits.data() + static_cast<std::size_t>(cell) * (classes + 1), static_cast<std::size_t>(classes) + 1};
  }
  std::span<const double> cell_deltas(int cell) const {
    return {deltas.data() + static_cast<std::size_t>(cell) * 4, 4};
  }
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Per-cell training targets. Cells holding `background` carry no box target.
struct GridAssignment {
  int rows = 0, cols = 0;
  int background = 0;  // == number of foreground classes
  std::vector<int> target;
  std::vector<std::array<double, 4>> deltas;

  int foreground_cells() const {
    return static_cast<int>(std::count_if(target.begin(), target.end(), [&](int t) { return t != background; }));
  }
};

namespace detail {

inline void softmax(std::span<const double> logits, std::span<double> prob) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) sum += prob[k] = std::exp(logits[k] - mx);
  for (double& p : prob) p /= sum;
}

// Linear heads for one cell: logits = x^T W_cls + b_cls, deltas = x^T W_reg + b_reg.
inline void heads(const ModelParams& p, std::span<const double> x, std::span<double> logits, std::span<double> deltas) {
  const std::size_t K = p.shape.outputs();
  const auto wc = p.w_cls(), bc = p.b_cls(), wr = p.w_reg(), br = p.b_reg();
  std::copy(bc.begin(), bc.end(), logits.begin());
  std::copy(br.begin(), br.end(), deltas.begin());
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double xd = x[d];
    if (xd == 0.0) continue;
    const double* wrow = wc.data() + d * K;
    for (std::size_t k = 0; k < K; ++k) logits[k] += xd * wrow[k];
    const double* rrow = wr.data() + d * 4;
    for (std::size_t j = 0; j < 4; ++j) deltas[j] += xd * rrow[j];
  }
}

inline void check_shape(const ModelParams& p, const GridGeometry& g) {
  if (p.shape.feature_dim != g.feature_dim() || p.shape.rows != g.rows() || p.shape.cols != g.cols())
    throw ConfigError("model shape does not match grid geometry");
}

}  // namespace detail

inline DenseOutput forward(const ModelParams& p, const FeatureGrid& fg, const GridGeometry& g) {
  detail::check_shape(p, g);
  DenseOutput out{g, p.shape.classes, {}, {}};
  const int K = p.shape.classes + 1;
  out.logits.resize(static_cast<std::size_t>(g.cells()) * K);
  out.deltas.resize(static_cast<std::size_t>(g.cells()) * 4);
  std::vector<double> x(static_cast<std::size_t>(g.feature_dim()));
  for (int r = 0; r < g.rows(); ++r)
    for (int c = 0; c < g.cols(); ++c) {
      const int cell = r * g.cols() + c;
      head_input(fg, g, r, c, x);
      detail::heads(p, x, {out.logits.data() + static_cast<std::size_t>(cell) * K, static_cast<std::size_t>(K)},
                    {out.deltas.data() + static_cast<std::size_t>(cell) * 4, 4});
    }
  return out;
}

inline DenseOutput forward(const ModelParams& p, const FrameRecord& f, const GridGeometry& g) {
  return forward(p, featurize(f, g), g);
}

/// One detection per cell whose best foreground probability exceeds the threshold.
inline std::vector<Detection> decode(const DenseOutput& dense, double score_thresh) {
  const GridGeometry& g = dense.geometry;
  std::vector<Detection> out;
  std::vector<double> prob(static_cast<std::size_t>(dense.classes) + 1);
  for (int r = 0; r < g.rows(); ++r)
    for (int c = 0; c < g.cols(); ++c) {
      const int cell = r * g.cols() + c;
      detail::softmax(dense.cell_logits(cell), prob);
      const auto best = std::max_element(prob.begin(), prob.end() - 1);
      const double score = *best;
      if (!(score > score_thresh)) continue;
      const Box cb = g.cell_box(r, c);
      const auto d = dense.cell_deltas(cell);
      const Box b = clip({cb.x1 + d[0] * g.cell, cb.y1 + d[1] * g.cell, cb.x2 + d[2] * g.cell, cb.y2 + d[3] * g.cell},
                         g.width, g.height);
      if (!b.valid()) continue;
      out.push_back({b, static_cast<int>(best - prob.begin()), score});
    }
  return out;
}

/// Each box goes to the cell holding its centre. On collision the larger box
/// wins, then the lower class id, then the earlier box.
inline GridAssignment assign_targets(LabelView labels, const GridGeometry& g, int classes) {
  GridAssignment a{g.rows(), g.cols(), classes, {}, {}};
  a.target.assign(static_cast<std::size_t>(g.cells()), classes);
  a.deltas.assign(static_cast<std::size_t>(g.cells()), {0, 0, 0, 0});
  std::vector<int> owner(static_cast<std::size_t>(g.cells()), -1);
  for (std::size_t i = 0; i < labels.boxes.size(); ++i) {
    const Box& b = labels.boxes[i];
    const int c = std::clamp(static_cast<int>(std::floor(b.center_x() / g.cell)), 0, g.cols() - 1);
    const int r = std::clamp(static_cast<int>(std::floor(b.center_y() / g.cell)), 0, g.rows() - 1);
    const int cell = r * g.cols() + c;
    if (const int prev = owner[cell]; prev >= 0) {
      const double a_new = b.area(), a_old = labels.boxes[prev].area();
      const bool wins = a_new > a_old || (a_new == a_old && labels.classes[i] < labels.classes[prev]);
      if (!wins) continue;
    }
    owner[cell] = static_cast<int>(i);
    const Box cb = g.cell_box(r, c);
    a.target[cell] = labels.classes[i];
    a.deltas[cell] = {(b.x1 - cb.x1) / g.cell, (b.y1 - cb.y1) / g.cell, (b.x2 - cb.x2) / g.cell,
                      (b.y2 - cb.y2) / g.cell};
  }
  return a;
}

inline GridAssignment assign_targets(const FrameRecord& f, const GridGeometry& g, int classes) {
  return assign_targets(ground_truth(f), g, classes);
}

inline double smooth_l1(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }
inline double smooth_l1_grad(double x) { return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0); }

struct LossValue {
  double cls = 0;  // softmax cross-entropy averaged over cells
  double reg = 0;  // smooth-L1 averaged over foreground cells, 0 without any
  double total() const { return cls + reg; }
};

/// Adds `scale` times the loss gradient into `grad` and returns the
/// (unscaled) loss. Pass nullptr to skip the gradient.
inline LossValue accumulate_loss(const ModelParams& p, const FeatureGrid& fg, const GridGeometry& g,
                                 const GridAssignment& a, double scale, ModelParams* grad) {
  detail::check_shape(p, g);
  const std::size_t K = p.shape.outputs();
  const std::size_t D = static_cast<std::size_t>(g.feature_dim());
  const int n_cells = g.cells();
  const int n_fg = a.foreground_cells();
  std::vector<double> x(D), logits(K), prob(K), deltas(4), dlog(K), ddel(4);
  LossValue loss;
  for (int r = 0; r < g.rows(); ++r)
    for (int c = 0; c < g.cols(); ++c) {
      const int cell = r * g.cols() + c;
      head_input(fg, g, r, c, x);
      detail::heads(p, x, logits, deltas);
      detail::softmax(logits, prob);
      const int t = a.target[cell];
      const double mx = *std::max_element(logits.begin(), logits.end());
      double lse = 0;
      for (double l : logits) lse += std::exp(l - mx);
      loss.cls += (mx + std::log(lse) - logits[t]) / n_cells;
      bool fg_cell = t != a.background;
      if (fg_cell)
        for (int j = 0; j < 4; ++j) loss.reg += smooth_l1(deltas[j] - a.deltas[cell][j]) / n_fg;
      if (!grad) continue;

      for (std::size_t k = 0; k < K; ++k) dlog[k] = scale * (prob[k] - (static_cast<int>(k) == t ? 1.0 : 0.0)) / n_cells;
      for (int j = 0; j < 4; ++j) ddel[j] = fg_cell ? scale * smooth_l1_grad(deltas[j] - a.deltas[cell][j]) / n_fg : 0.0;
      auto gwc = grad->w_cls(), gbc = grad->b_cls(), gwr = grad->w_reg(), gbr = grad->b_reg();
      for (std::size_t k = 0; k < K; ++k) gbc[k] += dlog[k];
      for (int j = 0; j < 4; ++j) gbr[j] += ddel[j];
      for (std::size_t d = 0; d < D; ++d) {
        const double xd = x[d];
        if (xd == 0.0) continue;
        double* wrow = gwc.data() + d * K;
        for (std::size_t k = 0; k < K; ++k) wrow[k] += xd * dlog[k];
        if (fg_cell) {
          double* rrow = gwr.data() + d * 4;
          for (int j = 0; j < 4; ++j) rrow[j] += xd * ddel[j];
        }
      }
    }
  return loss;
}

struct LossResult {
  LossValue value;
  ModelParams gradient;
};

/// Supervised detection loss L_cls + L_reg on one frame and its gradient.
inline LossResult loss_sup(const ModelParams& p, const FrameRecord& f, const GridGeometry& g,
                           const GridAssignment& a) {
  LossResult out{{}, ModelParams(p.shape)};
  out.value = accumulate_loss(p, featurize(f, g), g, a, 1.0, &out.gradient);
  return out;
}

/// Pseudo-label loss. Same functional form as loss_sup; only the source of
/// the targets differs.
inline LossResult loss_pseudo(const ModelParams& p, const FrameRecord& f, const GridGeometry& g,
                              const GridAssignment& pseudo) {
  return loss_sup(p, f, g, pseudo);
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  std::int64_t step = 0;
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// Bias-corrected Adam. A non-finite gradient entry refuses the whole step
/// and leaves params and state untouched.
inline void adam_step(ModelParams& p, const ModelParams& grad, AdamState& s, const AdamConfig& cfg) {
  if (grad.values.size() != p.values.size()) throw ConfigError("adam_step: gradient shape mismatch");
  for (std::size_t i = 0; i < grad.values.size(); ++i)
    if (!std::isfinite(grad.values[i]))
      throw NumericalError("adam_step: non-finite gradient at entry " + std::to_string(i));
  if (s.m.empty()) {
    s.m.assign(p.values.size(), 0.0);
    s.v.assign(p.values.size(), 0.0);
  }
  if (s.m.size() != p.values.size()) throw ConfigError("adam_step: optimizer state shape mismatch");
  ++s.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double gi = grad.values[i];
    s.m[i] = cfg.beta1 * s.m[i] + (1 - cfg.beta1) * gi;
    s.v[i] = cfg.beta2 * s.v[i] + (1 - cfg.beta2) * gi * gi;
    p.values[i] -= cfg.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg.eps);
  }
}

// Parameter checkpoint: "ECLSPRM1", u32 version, u32 C, u32 feature_dim,
// u32 rows, u32 cols, u64 count, then count little-endian float64 values.
inline constexpr char kParamsMagic[8] = {'E', 'C', 'L', 'S', 'P', 'R', 'M', '1'};
inline constexpr std::uint32_t kParamsVersion = 1;

namespace detail {
inline void put_le(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw IoError("params: truncated file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
}  // namespace detail

inline void save_params(const ModelParams& p, std::ostream& out) {
  out.write(kParamsMagic, sizeof kParamsMagic);
  detail::put_le(out, kParamsVersion, 4);
  detail::put_le(out, static_cast<std::uint32_t>(p.shape.classes), 4);
  detail::put_le(out, static_cast<std::uint32_t>(p.shape.feature_dim), 4);
  detail::put_le(out, static_cast<std::uint32_t>(p.shape.rows), 4);
  detail::put_le(out, static_cast<std::uint32_t>(p.shape.cols), 4);
  detail::put_le(out, p.values.size(), 8);
  for (double v : p.values) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  if (!out) throw IoError("params: write failed");
}

inline ModelParams load_params(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kParamsMagic, sizeof magic) != 0)
    throw IoError("params: bad magic");
  if (detail::get_le(in, 4) != kParamsVersion) throw IoError("params: unsupported version");
  ModelShape s;
  s.classes = static_cast<int>(detail::get_le(in, 4));
  s.feature_dim = static_cast<int>(detail::get_le(in, 4));
  s.rows = static_cast<int>(detail::get_le(in, 4));
  s.cols = static_cast<int>(detail::get_le(in, 4));
  const std::uint64_t count = detail::get_le(in, 8);
  if (count != s.size()) throw IoError("params: value count does not match header");
  ModelParams p(s);
  for (double& v : p.values) v = std::bit_cast<double>(detail::get_le(in, 8));
  return p;
}

/// The detector operations the training loop is written against. Tests
/// substitute instrumented variants with the same members.
struct GridDetector {
  GridGeometry geometry;
  int classes = 0;

  ModelShape shape() const { return model_shape(geometry, classes); }
  FeatureGrid features(const FrameRecord& f) const { return featurize(f, geometry); }
  DenseOutput forward(const ModelParams& p, const FrameRecord& f) const { return ecls::forward(p, f, geometry); }
  std::vector<Detection> decode(const DenseOutput& d, double thresh) const { return ecls::decode(d, thresh); }
  GridAssignment assign(LabelView labels) const { return assign_targets(labels, geometry, classes); }
  LossValue accumulate(const ModelParams& p, const FrameRecord& f, const GridAssignment& a, double scale,
                       ModelParams& grad) const {
    return accumulate_loss(p, featurize(f, geometry), geometry, a, scale, &grad);
  }
};

}  // namespace ecls
