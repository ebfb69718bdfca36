#pragma once

#include "nxtv/core.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace nxtv {

// Compass motion classes; velocity direction in (dx, dy) image coordinates
// (x grows right, y grows down).
enum class MotionClass : int { N = 0, NE, E, SE, S, SW, W, NW };

constexpr int kNumMotionClasses = 8;

inline const char* motion_class_name(MotionClass c) {
  static const char* names[] = {"N", "NE", "E", "SE", "S", "SW", "W", "NW"};
  return names[static_cast<int>(c)];
}

inline std::optional<MotionClass> motion_class_from_name(const std::string& s) {
  for (int i = 0; i < kNumMotionClasses; ++i)
    if (s == motion_class_name(static_cast<MotionClass>(i)))
      return static_cast<MotionClass>(i);
  return std::nullopt;
}

// Unit direction (dx, dy) per class; diagonals move one unit per axis.
inline std::array<int, 2> motion_direction(MotionClass c) {
  switch (c) {
    case MotionClass::N:  return {0, -1};
    case MotionClass::NE: return {1, -1};
    case MotionClass::E:  return {1, 0};
    case MotionClass::SE: return {1, 1};
    case MotionClass::S:  return {0, 1};
    case MotionClass::SW: return {-1, 1};
    case MotionClass::W:  return {-1, 0};
    case MotionClass::NW: return {-1, -1};
  }
  return {0, 0};
}

struct ClipShape {
  int t_raw = 16;
  int h = 32;
  int w = 32;
  int c = 3;
  int patch_h = 4;
  int patch_w = 4;
  int tubelet = 2;

  int time_steps() const { return t_raw / tubelet; }
  int grid_rows() const { return h / patch_h; }
  int grid_cols() const { return w / patch_w; }
  int spatial_positions() const { return grid_rows() * grid_cols(); }
  int token_dim_raw() const { return patch_h * patch_w * tubelet * c; }
  Index total_tokens() const {
    return static_cast<Index>(time_steps()) * spatial_positions();
  }

  void validate() const {
    if (t_raw <= 0 || h <= 0 || w <= 0 || c <= 0 || patch_h <= 0 ||
        patch_w <= 0 || tubelet <= 0)
      throw ConfigError("clip shape: dimensions must be positive");
    if (t_raw % tubelet != 0)
      throw ConfigError("clip shape: tubelet must divide t_raw");
    if (h % patch_h != 0 || w % patch_w != 0)
      throw ConfigError("clip shape: patch must divide frame dims");
  }

  // Autoregression needs at least one next-frame target.
  void validate_for_training() const {
    validate();
    if (time_steps() < 2)
      throw ConfigError("clip shape: need at least 2 time steps");
  }
};

enum class ClipSource { synthetic_motion, static_image };

struct VideoClip {
  Eigen::ArrayXf frames;  // flat, index ((t*h + y)*w + x)*c + ch
  int t_raw = 0, h = 0, w = 0, c = 0;
  std::optional<int> label;
  std::string clip_id;
  ClipSource source = ClipSource::synthetic_motion;

  float& at(int t, int y, int x, int ch) {
    return frames[(((static_cast<Index>(t) * h + y) * w + x) * c + ch)];
  }
  float at(int t, int y, int x, int ch) const {
    return frames[(((static_cast<Index>(t) * h + y) * w + x) * c + ch)];
  }
  Index frame_size() const { return static_cast<Index>(h) * w * c; }

  bool conforms(const ClipShape& s) const {
    return t_raw == s.t_raw && h == s.h && w == s.w && c == s.c;
  }
};

struct Pos3 {
  int t = 0, y = 0, x = 0;
};

// Frame-major token layout: all time-step-0 tokens precede time-step-1 tokens.
struct TokenSequence {
  MatF tokens;  // rows = tokens, cols = feature dim
  std::vector<Pos3> pos;
  int time_steps = 0;
  int grid_rows = 0;
  int grid_cols = 0;

  Index count() const { return tokens.rows(); }
};

// One translating anti-aliased rectangle over a static noise-textured
// background. Pure function of (seed, class_id, shape, speed_hint).
inline VideoClip generate_synthetic_clip(std::uint64_t seed, MotionClass cls,
                                         const ClipShape& shape,
                                         double speed_hint = 0.0) {
  shape.validate();
  const int T = shape.t_raw, H = shape.h, W = shape.w, C = shape.c;
  Rng rng(substream(seed, {static_cast<std::uint64_t>(cls) + 1, 0x636c6970ull,
                           static_cast<std::uint64_t>(T),
                           static_cast<std::uint64_t>(H),
                           static_cast<std::uint64_t>(W),
                           static_cast<std::uint64_t>(C)}));

  std::vector<double> bg_base(C);
  for (int ch = 0; ch < C; ++ch) bg_base[ch] = rng.uniform(0.25, 0.75);

  const double noise_amp = 0.04;
  Eigen::ArrayXf bg(static_cast<Index>(H) * W * C);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int ch = 0; ch < C; ++ch)
        bg[(static_cast<Index>(y) * W + x) * C + ch] = static_cast<float>(
            bg_base[ch] + noise_amp * rng.uniform(-1.0, 1.0));

  const int rect_lo = std::max(2, std::min(H, W) / 6);
  const int rect_hi = std::max(rect_lo + 1, std::min(H, W) / 4);
  const int rect_w = static_cast<int>(rng.uniform_int(rect_lo, rect_hi));
  const int rect_h = static_cast<int>(rng.uniform_int(rect_lo, rect_hi));

  std::vector<double> rect_col(C);
  for (int ch = 0; ch < C; ++ch) {
    const double sgn = bg_base[ch] > 0.5 ? -1.0 : 1.0;
    rect_col[ch] = bg_base[ch] + sgn * rng.uniform(0.30, 0.45);
  }

  const auto dir = motion_direction(cls);
  // Speed is capped so the rectangle never leaves the frame; the trajectory
  // is strictly monotone along each moving axis.
  double speed = speed_hint > 0.0 ? speed_hint : 0.0375 * std::min(H, W);
  if (T > 1) {
    if (dir[0] != 0)
      speed = std::min(speed, static_cast<double>(W - rect_w - 2) / (T - 1));
    if (dir[1] != 0)
      speed = std::min(speed, static_cast<double>(H - rect_h - 2) / (T - 1));
  }
  speed = std::max(speed, 0.0);

  const double travel_x = dir[0] * speed * (T - 1);
  const double travel_y = dir[1] * speed * (T - 1);
  auto pick_start = [&](int extent, int rect_extent, double travel) {
    double lo = 1.0, hi = extent - rect_extent - 1.0;
    if (travel > 0) hi -= travel;
    if (travel < 0) lo -= travel;
    if (hi < lo) hi = lo;
    return rng.uniform(lo, hi);
  };
  const double x0 = pick_start(W, rect_w, travel_x);
  const double y0 = pick_start(H, rect_h, travel_y);

  VideoClip clip;
  clip.t_raw = T;
  clip.h = H;
  clip.w = W;
  clip.c = C;
  clip.label = static_cast<int>(cls);
  clip.source = ClipSource::synthetic_motion;
  clip.frames.resize(static_cast<Index>(T) * H * W * C);

  for (int t = 0; t < T; ++t) {
    const Index base = static_cast<Index>(t) * H * W * C;
    clip.frames.segment(base, bg.size()) = bg;
    const double rx = x0 + dir[0] * speed * t;
    const double ry = y0 + dir[1] * speed * t;
    const int px_lo = std::max(0, static_cast<int>(std::floor(rx)));
    const int px_hi = std::min(W - 1, static_cast<int>(std::ceil(rx + rect_w)));
    const int py_lo = std::max(0, static_cast<int>(std::floor(ry)));
    const int py_hi = std::min(H - 1, static_cast<int>(std::ceil(ry + rect_h)));
    for (int y = py_lo; y <= py_hi; ++y) {
      const double cov_y =
          std::max(0.0, std::min<double>(ry + rect_h, y + 1) -
                            std::max<double>(ry, y));
      for (int x = px_lo; x <= px_hi; ++x) {
        const double cov_x =
            std::max(0.0, std::min<double>(rx + rect_w, x + 1) -
                              std::max<double>(rx, x));
        const double cov = cov_x * cov_y;
        if (cov <= 0.0) continue;
        for (int ch = 0; ch < C; ++ch) {
          float& p = clip.frames[base + (static_cast<Index>(y) * W + x) * C + ch];
          p = static_cast<float>(p + cov * (rect_col[ch] - p));
        }
      }
    }
  }
  clip.frames = clip.frames.min(1.0f).max(0.0f);
  return clip;
}

// Expands a single image (flat H*W*C in [0,1]) into a frame-invariant clip.
inline VideoClip image_to_clip(const Eigen::ArrayXf& image, int t_raw,
                               const ClipShape& shape) {
  shape.validate();
  if (t_raw <= 0 || t_raw % shape.tubelet != 0)
    throw ConfigError("image_to_clip: t_raw must be a positive multiple of tubelet");
  const Index fsz = static_cast<Index>(shape.h) * shape.w * shape.c;
  if (image.size() != fsz)
    throw ConfigError("image_to_clip: image size does not match shape");
  VideoClip clip;
  clip.t_raw = t_raw;
  clip.h = shape.h;
  clip.w = shape.w;
  clip.c = shape.c;
  clip.source = ClipSource::static_image;
  clip.frames.resize(static_cast<Index>(t_raw) * fsz);
  for (int t = 0; t < t_raw; ++t) clip.frames.segment(t * fsz, fsz) = image;
  return clip;
}

// Non-overlapping 3D patches, frame-major; lossless (exact inverse below).
// Token feature order: ((dt*patch_h + py)*patch_w + px)*C + ch.
inline TokenSequence patchify(const VideoClip& clip, const ClipShape& shape) {
  shape.validate();
  if (!clip.conforms(shape)) throw ConfigError("patchify: clip does not conform to shape");
  const int T = shape.time_steps();
  const int gr = shape.grid_rows(), gc = shape.grid_cols();
  const int ph = shape.patch_h, pw = shape.patch_w, tb = shape.tubelet;
  const int C = shape.c;

  TokenSequence seq;
  seq.time_steps = T;
  seq.grid_rows = gr;
  seq.grid_cols = gc;
  seq.tokens.resize(shape.total_tokens(), shape.token_dim_raw());
  seq.pos.resize(static_cast<std::size_t>(shape.total_tokens()));

  Index row = 0;
  for (int t = 0; t < T; ++t) {
    for (int gy = 0; gy < gr; ++gy) {
      for (int gx = 0; gx < gc; ++gx, ++row) {
        seq.pos[static_cast<std::size_t>(row)] = {t, gy, gx};
        Index col = 0;
        for (int dt = 0; dt < tb; ++dt)
          for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px)
              for (int ch = 0; ch < C; ++ch, ++col)
                seq.tokens(row, col) = clip.at(t * tb + dt, gy * ph + py,
                                               gx * pw + px, ch);
      }
    }
  }
  return seq;
}

inline VideoClip unpatchify(const TokenSequence& seq, const ClipShape& shape) {
  shape.validate();
  if (seq.count() != shape.total_tokens())
    throw ConfigError("unpatchify: token count does not match shape");
  if (seq.tokens.cols() != shape.token_dim_raw())
    throw ConfigError("unpatchify: token dim does not match shape");
  VideoClip clip;
  clip.t_raw = shape.t_raw;
  clip.h = shape.h;
  clip.w = shape.w;
  clip.c = shape.c;
  clip.frames = Eigen::ArrayXf::Zero(static_cast<Index>(shape.t_raw) * shape.h *
                                     shape.w * shape.c);
  const int ph = shape.patch_h, pw = shape.patch_w, tb = shape.tubelet;
  const int C = shape.c;
  for (Index row = 0; row < seq.count(); ++row) {
    const Pos3 p = seq.pos[static_cast<std::size_t>(row)];
    Index col = 0;
    for (int dt = 0; dt < tb; ++dt)
      for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px)
          for (int ch = 0; ch < C; ++ch, ++col)
            clip.at(p.t * tb + dt, p.y * ph + py, p.x * pw + px, ch) =
                seq.tokens(row, col);
  }
  return clip;
}

// Pixel normalization used in front of the encoder: mean 0.5, std 0.5.
template <typename Scalar>
Mat<Scalar> normalize_pixels(const MatF& raw) {
  return ((raw.template cast<Scalar>()).array() - Scalar(0.5)) / Scalar(0.5);
}

inline MatF denormalize_pixels(const MatF& norm) {
  return (norm.array() * 0.5f + 0.5f).matrix();
}

}  // namespace nxtv
