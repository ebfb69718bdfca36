#pragma once

#include "nxtv/core.hpp"
#include "nxtv/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace nxtv {

struct MaskConfig {
  double scale_lo = 0.15;
  double scale_hi = 0.7;
  double aspect_lo = 0.75;
  double aspect_hi = 1.5;
  int num_blocks = 8;
  int samples_per_clip = 1;

  void validate() const {
    if (scale_lo < 0 || scale_hi > 1 || scale_lo > scale_hi)
      throw ConfigError("mask config: need 0 <= lo <= hi <= 1");
    if (aspect_lo <= 0 || aspect_hi < aspect_lo)
      throw ConfigError("mask config: aspect bounds must be positive");
    if (num_blocks < 0) throw ConfigError("mask config: num_blocks < 0");
    if (scale_lo > 0 && num_blocks == 0)
      throw ConfigError("mask config: coverage required but num_blocks == 0");
  }
};

// Temporally consistent spatial mask: the same hidden patch columns apply to
// every time step of the clip.
struct SpatialMask {
  std::vector<int> hidden;  // sorted spatial indices in [0, N_s)
  int grid_rows = 0;
  int grid_cols = 0;
  std::uint64_t seed = 0;

  int spatial_positions() const { return grid_rows * grid_cols; }
  double ratio() const {
    return spatial_positions() == 0
               ? 0.0
               : static_cast<double>(hidden.size()) / spatial_positions();
  }
  bool is_hidden(int spatial_index) const {
    return std::binary_search(hidden.begin(), hidden.end(), spatial_index);
  }
};

// Union of num_blocks rectangular blocks; resamples until the hidden ratio
// falls in [scale_lo, scale_hi], then trims/grows deterministically.
inline SpatialMask sample_spatial_mask(const MaskConfig& cfg, int grid_rows,
                                       int grid_cols, std::uint64_t seed) {
  cfg.validate();
  const int n = grid_rows * grid_cols;
  if (n <= 0) throw ConfigError("mask: empty grid");
  const int lo_count = static_cast<int>(std::ceil(cfg.scale_lo * n - 1e-9));
  const int hi_count = static_cast<int>(std::floor(cfg.scale_hi * n + 1e-9));
  if (lo_count > n - 1)
    throw ConfigError("mask: scale_lo leaves no visible tokens");

  SpatialMask mask;
  mask.grid_rows = grid_rows;
  mask.grid_cols = grid_cols;
  mask.seed = seed;
  if (hi_count == 0 || cfg.num_blocks == 0) return mask;

  Rng rng(substream(seed, {0x6d61736bull, static_cast<std::uint64_t>(grid_rows),
                           static_cast<std::uint64_t>(grid_cols)}));
  std::set<int> hidden;
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    hidden.clear();
    const double target = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const double block_area =
        std::max(1.0, target * n / std::max(1, cfg.num_blocks));
    for (int b = 0; b < cfg.num_blocks; ++b) {
      const double aspect = rng.uniform(cfg.aspect_lo, cfg.aspect_hi);
      int bh = static_cast<int>(std::lround(std::sqrt(block_area * aspect)));
      int bw = static_cast<int>(std::lround(std::sqrt(block_area / aspect)));
      bh = std::clamp(bh, 1, grid_rows);
      bw = std::clamp(bw, 1, grid_cols);
      const int y0 = static_cast<int>(rng.uniform_int(0, grid_rows - bh));
      const int x0 = static_cast<int>(rng.uniform_int(0, grid_cols - bw));
      for (int y = y0; y < y0 + bh; ++y)
        for (int x = x0; x < x0 + bw; ++x) hidden.insert(y * grid_cols + x);
    }
    const int count = static_cast<int>(hidden.size());
    if (count >= lo_count && count <= std::min(hi_count, n - 1)) break;
  }

  mask.hidden.assign(hidden.begin(), hidden.end());
  const int target_count =
      std::clamp(static_cast<int>(mask.hidden.size()), lo_count,
                 std::min(hi_count, n - 1));
  while (static_cast<int>(mask.hidden.size()) > target_count)
    mask.hidden.pop_back();
  if (static_cast<int>(mask.hidden.size()) < target_count) {
    for (int i = 0; i < n && static_cast<int>(mask.hidden.size()) < target_count;
         ++i)
      if (!std::binary_search(mask.hidden.begin(), mask.hidden.end(), i))
        mask.hidden.insert(
            std::lower_bound(mask.hidden.begin(), mask.hidden.end(), i), i);
  }
  return mask;
}

// The per-clip mask sample pair [8, 2]: strategy A hides with many small
// blocks near the low end of the scale window, strategy B with few large
// blocks near the high end.
inline std::vector<MaskConfig> two_strategy_configs(const MaskConfig& base) {
  base.validate();
  const double mid = 0.5 * (base.scale_lo + base.scale_hi);
  MaskConfig a = base;
  a.num_blocks = 8;
  a.scale_hi = mid;
  MaskConfig b = base;
  b.num_blocks = 2;
  b.scale_lo = mid;
  return {a, b};
}

// Drops every token whose spatial index is hidden, at every time step;
// survivors keep frame-major order and positions.
inline TokenSequence apply_mask(const TokenSequence& seq,
                                const SpatialMask& mask) {
  if (mask.grid_rows != seq.grid_rows || mask.grid_cols != seq.grid_cols)
    throw ConfigError("apply_mask: grid mismatch");
  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(seq.count()));
  for (Index r = 0; r < seq.count(); ++r) {
    const Pos3 p = seq.pos[static_cast<std::size_t>(r)];
    if (!mask.is_hidden(p.y * seq.grid_cols + p.x)) keep.push_back(r);
  }
  TokenSequence out;
  out.time_steps = seq.time_steps;
  out.grid_rows = seq.grid_rows;
  out.grid_cols = seq.grid_cols;
  out.tokens.resize(static_cast<Index>(keep.size()), seq.tokens.cols());
  out.pos.resize(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.tokens.row(static_cast<Index>(i)) = seq.tokens.row(keep[i]);
    out.pos[i] = seq.pos[static_cast<std::size_t>(keep[i])];
  }
  return out;
}

enum class AttnMode { frame_wise_causal, autoregressive, frame_isolated, full };

inline const char* attn_mode_name(AttnMode m) {
  switch (m) {
    case AttnMode::frame_wise_causal: return "frame_wise_causal";
    case AttnMode::autoregressive: return "autoregressive";
    case AttnMode::frame_isolated: return "frame_isolated";
    case AttnMode::full: return "full";
  }
  return "?";
}

struct AttentionMask {
  AttnMode mode = AttnMode::frame_wise_causal;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> allow;  // [Q x K]
  std::vector<int> q_time;
  std::vector<int> k_time;
};

// frame_wise_causal: k <= q; autoregressive: k < q (queries start at 1);
// frame_isolated: k == q. "full" is a test hook used as a negative control.
inline AttentionMask build_attention_mask(AttnMode mode,
                                          const std::vector<int>& q_times,
                                          const std::vector<int>& k_times) {
  AttentionMask m;
  m.mode = mode;
  m.q_time = q_times;
  m.k_time = k_times;
  const Index q = static_cast<Index>(q_times.size());
  const Index k = static_cast<Index>(k_times.size());
  m.allow.resize(q, k);
  for (Index i = 0; i < q; ++i) {
    const int qt = q_times[static_cast<std::size_t>(i)];
    if (qt < 0) throw ConfigError("attention mask: negative query time");
    if (mode == AttnMode::autoregressive && qt < 1)
      throw ConfigError(
          "attention mask: autoregressive query at time 0 has no context");
    bool any = false;
    for (Index j = 0; j < k; ++j) {
      const int kt = k_times[static_cast<std::size_t>(j)];
      if (kt < 0) throw ConfigError("attention mask: negative key time");
      bool a = false;
      switch (mode) {
        case AttnMode::frame_wise_causal: a = kt <= qt; break;
        case AttnMode::autoregressive: a = kt < qt; break;
        case AttnMode::frame_isolated: a = kt == qt; break;
        case AttnMode::full: a = true; break;
      }
      m.allow(i, j) = a;
      any = any || a;
    }
    if (!any)
      throw ConfigError("attention mask: query row with no allowed key");
  }
  return m;
}

// Additive pre-softmax bias. -1e30 underflows to weight exactly 0 after
// softmax, so disallowed keys cannot perturb outputs even bitwise; true
// infinities would risk NaN.
template <typename Scalar>
Mat<Scalar> attention_bias(const AttentionMask& m) {
  Mat<Scalar> bias(m.allow.rows(), m.allow.cols());
  for (Index i = 0; i < m.allow.rows(); ++i)
    for (Index j = 0; j < m.allow.cols(); ++j)
      bias(i, j) = m.allow(i, j) ? Scalar(0) : Scalar(-1e30);
  return bias;
}

// Text dump: grid dims + sorted hidden indices, for golden tests.
inline std::string mask_to_text(const SpatialMask& m) {
  std::ostringstream os;
  os << m.grid_rows << " " << m.grid_cols;
  for (int i : m.hidden) os << " " << i;
  os << "\n";
  return os.str();
}

inline SpatialMask mask_from_text(const std::string& text) {
  std::istringstream is(text);
  SpatialMask m;
  if (!(is >> m.grid_rows >> m.grid_cols))
    throw IoError("mask text: missing grid dims");
  int v;
  while (is >> v) m.hidden.push_back(v);
  if (!std::is_sorted(m.hidden.begin(), m.hidden.end()))
    throw IoError("mask text: indices not sorted");
  return m;
}

}  // namespace nxtv
