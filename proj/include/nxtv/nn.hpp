#pragma once

#include "nxtv/core.hpp"
#include "nxtv/dataio.hpp"
#include "nxtv/masking.hpp"
#include "nxtv/tape.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace nxtv {

// ---------------------------------------------------------------------------
// Parameter container

template <typename S>
struct ParamStore {
  struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;
    bool decay;  // decoupled weight decay applies (true matrices only)
  };

  std::vector<Param> params;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, Mat<S> value) {
    if (index.count(name)) throw ConfigError("duplicate param: " + name);
    const bool decay = value.rows() > 1 && value.cols() > 1;
    Param p{name, std::move(value), {}, decay};
    p.grad = Mat<S>::Zero(p.value.rows(), p.value.cols());
    params.push_back(std::move(p));
    index.emplace(name, static_cast<int>(params.size()) - 1);
    return static_cast<int>(params.size()) - 1;
  }

  bool has(const std::string& name) const { return index.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown param: " + name);
    return params[static_cast<std::size_t>(it->second)];
  }
  const Param& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown param: " + name);
    return params[static_cast<std::size_t>(it->second)];
  }

  Mat<S>& value(const std::string& name) { return at(name).value; }
  const Mat<S>& value(const std::string& name) const { return at(name).value; }

  void zero_grads() {
    for (auto& p : params) p.grad.setZero();
  }

  double grad_norm_sq() const {
    double s = 0;
    for (const auto& p : params) s += static_cast<double>(p.grad.squaredNorm());
    return s;
  }

  Index size() const {
    Index n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }
};

// sigma == 0 selects fan-in scaling (1/sqrt(in)); widths here are small
// enough that a fixed 0.02 would starve the residual stream.
template <typename S>
void register_linear(ParamStore<S>& ps, const std::string& name, Index in,
                     Index out, Rng& rng, double sigma = 0.0,
                     bool zero_init = false) {
  Mat<S> w;
  if (zero_init)
    w = Mat<S>::Zero(in, out);
  else
    w = rng.normal_mat<S>(in, out) *
        static_cast<S>(sigma > 0 ? sigma : 1.0 / std::sqrt(static_cast<double>(in)));
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Mat<S>::Zero(1, out));
}

template <typename S>
void register_layernorm(ParamStore<S>& ps, const std::string& name, Index d) {
  ps.add(name + ".g", Mat<S>::Ones(1, d));
  ps.add(name + ".b", Mat<S>::Zero(1, d));
}

// ---------------------------------------------------------------------------
// Binding parameters into a tape graph (one leaf per param per graph)

template <typename S>
struct Bind {
  Tape<S>& tape;
  ParamStore<S>& store;
  bool trainable = true;
  std::unordered_map<int, Var<S>> bound;

  Bind(Tape<S>& t, ParamStore<S>& s, bool trainable_ = true)
      : tape(t), store(s), trainable(trainable_) {}

  Var<S> operator()(const std::string& name) {
    auto it = store.index.find(name);
    if (it == store.index.end()) throw ConfigError("unknown param: " + name);
    auto b = bound.find(it->second);
    if (b != bound.end()) return b->second;
    Var<S> v = tape.leaf(store.params[static_cast<std::size_t>(it->second)].value,
                         trainable);
    bound.emplace(it->second, v);
    return v;
  }

  // Call after tape.backward(); adds each bound leaf's gradient to the store.
  void accumulate_grads() {
    for (const auto& [idx, var] : bound)
      store.params[static_cast<std::size_t>(idx)].grad += tape.grad(var);
  }
};

template <typename S>
Var<S> linear(Bind<S>& b, Var<S> x, const std::string& name) {
  return b.tape.add_row(b.tape.matmul(x, b(name + ".w")), b(name + ".b"));
}

template <typename S>
Var<S> layer_norm(Bind<S>& b, Var<S> x, const std::string& name,
                  S eps = S(1e-5)) {
  return b.tape.row_affine(b.tape.layernorm_rows(x, eps), b(name + ".g"),
                           b(name + ".b"));
}

template <typename S>
Var<S> mlp(Bind<S>& b, Var<S> x, const std::string& name) {
  return linear(b, b.tape.gelu(linear(b, x, name + ".fc1")), name + ".fc2");
}

template <typename S>
void register_mlp(ParamStore<S>& ps, const std::string& name, Index d,
                  Index hidden, Rng& rng, double sigma = 0.0) {
  register_linear(ps, name + ".fc1", d, hidden, rng, sigma);
  register_linear(ps, name + ".fc2", hidden, d, rng, sigma);
}

// ---------------------------------------------------------------------------
// 3D rotary position embedding

struct Rope3DSpec {
  int head_dim = 16;
  int d_t = 4, d_y = 6, d_x = 6;
  double base = 10000.0;

  void validate() const {
    if (head_dim <= 0 || d_t <= 0 || d_y <= 0 || d_x <= 0)
      throw ConfigError("rope: axis dims must be positive");
    if (d_t % 2 || d_y % 2 || d_x % 2)
      throw ConfigError("rope: axis dims must be even");
    if (d_t + d_y + d_x != head_dim)
      throw ConfigError("rope: axis dims must sum to head_dim");
  }

  // Proportional t:y:x ~ 2:3:3 allocation of rotation pairs.
  static Rope3DSpec proportional(int head_dim, double base = 10000.0) {
    if (head_dim < 6 || head_dim % 2)
      throw ConfigError("rope: head_dim must be even and >= 6");
    const int pairs = head_dim / 2;
    int pt = std::max(1, static_cast<int>(std::lround(pairs * 0.25)));
    int py = std::max(1, static_cast<int>(std::lround(pairs * 0.375)));
    if (pt + py > pairs - 1) py = pairs - 1 - pt;
    const int px = pairs - pt - py;
    Rope3DSpec spec{head_dim, 2 * pt, 2 * py, 2 * px, base};
    spec.validate();
    return spec;
  }
};

// Per-token rotation angles, one (cos, sin) pair per rotation pair; shared by
// every head.
template <typename S>
struct RopeTables {
  Mat<S> cos_t, sin_t;  // rows = tokens, cols = head_dim / 2
};

template <typename S>
RopeTables<S> rope_tables(const std::vector<Pos3>& pos, const Rope3DSpec& spec) {
  spec.validate();
  const Index n = static_cast<Index>(pos.size());
  const Index pairs = spec.head_dim / 2;
  RopeTables<S> t;
  t.cos_t.resize(n, pairs);
  t.sin_t.resize(n, pairs);
  const int axis_pairs[3] = {spec.d_t / 2, spec.d_y / 2, spec.d_x / 2};
  for (Index i = 0; i < n; ++i) {
    const double coord[3] = {static_cast<double>(pos[static_cast<std::size_t>(i)].t),
                             static_cast<double>(pos[static_cast<std::size_t>(i)].y),
                             static_cast<double>(pos[static_cast<std::size_t>(i)].x)};
    Index p = 0;
    for (int a = 0; a < 3; ++a) {
      for (int j = 0; j < axis_pairs[a]; ++j, ++p) {
        const double freq =
            std::pow(spec.base, -2.0 * j / static_cast<double>(2 * axis_pairs[a]));
        const double ang = coord[a] * freq;
        t.cos_t(i, p) = static_cast<S>(std::cos(ang));
        t.sin_t(i, p) = static_cast<S>(std::sin(ang));
      }
    }
  }
  return t;
}

// Applies the rotation to every head block of x (n x heads*head_dim).
// Norm-preserving; the adjoint rotates by the negated angles.
template <typename S>
Var<S> rope3d_apply(Tape<S>& tape, Var<S> x, const std::vector<Pos3>& pos,
                    const Rope3DSpec& spec, int heads) {
  if (x.value().cols() != static_cast<Index>(heads) * spec.head_dim)
    throw ConfigError("rope3d: cols != heads * head_dim");
  if (x.value().rows() != static_cast<Index>(pos.size()))
    throw ConfigError("rope3d: position count mismatch");
  auto tables = std::make_shared<RopeTables<S>>(rope_tables<S>(pos, spec));
  const int hd = spec.head_dim;
  auto rotate = [tables, heads, hd](const Mat<S>& in, bool inverse) {
    Mat<S> out(in.rows(), in.cols());
    const Index pairs = hd / 2;
    for (int h = 0; h < heads; ++h) {
      const Index off = static_cast<Index>(h) * hd;
      for (Index i = 0; i < in.rows(); ++i) {
        for (Index p = 0; p < pairs; ++p) {
          const S c = tables->cos_t(i, p);
          const S s = inverse ? -tables->sin_t(i, p) : tables->sin_t(i, p);
          const S u = in(i, off + 2 * p);
          const S v = in(i, off + 2 * p + 1);
          out(i, off + 2 * p) = u * c - v * s;
          out(i, off + 2 * p + 1) = u * s + v * c;
        }
      }
    }
    return out;
  };
  return tape.linear_map(
      x, [rotate](const Mat<S>& m) { return rotate(m, false); },
      [rotate](const Mat<S>& m) { return rotate(m, true); });
}

// ---------------------------------------------------------------------------
// Attention

template <typename S>
struct AttnInputs {
  Var<S> q_in;
  Var<S> kv_in;
  const Mat<S>* bias = nullptr;             // additive pre-softmax mask bias
  const std::vector<Pos3>* q_pos = nullptr;  // null disables RoPE
  const std::vector<Pos3>* k_pos = nullptr;
  const Rope3DSpec* rope = nullptr;
};

template <typename S>
void register_attention(ParamStore<S>& ps, const std::string& name, Index d_q,
                        Index d_kv, Index d, Rng& rng, double sigma = 0.0) {
  register_linear(ps, name + ".wq", d_q, d, rng, sigma);
  register_linear(ps, name + ".wk", d_kv, d, rng, sigma);
  register_linear(ps, name + ".wv", d_kv, d, rng, sigma);
  register_linear(ps, name + ".wo", d, d, rng, sigma);
}

// Scaled dot-product attention over `heads` column blocks with an additive
// mask bias. Disallowed logits sit at -1e30 and round to softmax weight 0.
template <typename S>
Var<S> masked_attention(Bind<S>& b, const AttnInputs<S>& in, int heads,
                        const std::string& name) {
  Tape<S>& tp = b.tape;
  Var<S> q = linear(b, in.q_in, name + ".wq");
  Var<S> k = linear(b, in.kv_in, name + ".wk");
  Var<S> v = linear(b, in.kv_in, name + ".wv");
  const Index d = q.value().cols();
  if (d % heads) throw ConfigError("attention: width not divisible by heads");
  const Index hd = d / heads;
  if (in.rope != nullptr) {
    if (in.rope->head_dim != hd)
      throw ConfigError("attention: rope head_dim mismatch");
    q = rope3d_apply(tp, q, *in.q_pos, *in.rope, heads);
    k = rope3d_apply(tp, k, *in.k_pos, *in.rope, heads);
  }
  if (in.bias != nullptr &&
      (in.bias->rows() != q.value().rows() || in.bias->cols() != k.value().rows()))
    throw ConfigError("attention: bias shape mismatch");
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
  Var<S> out{};
  for (int h = 0; h < heads; ++h) {
    Var<S> qh = tp.cols(q, h * hd, hd);
    Var<S> kh = tp.cols(k, h * hd, hd);
    Var<S> vh = tp.cols(v, h * hd, hd);
    Var<S> scores = tp.matmul_nt(qh, kh, inv_sqrt);
    if (in.bias != nullptr) scores = tp.add_const(scores, *in.bias);
    Var<S> oh = tp.matmul(tp.softmax_rows(scores), vh);
    out = (h == 0) ? oh : tp.hcat(out, oh);
  }
  return linear(b, out, name + ".wo");
}

// ---------------------------------------------------------------------------
// AdaLN modulation (timestep conditioning)

template <typename S>
void register_adaln(ParamStore<S>& ps, const std::string& name, Index d_cond,
                    Index d) {
  // Zero-init so modulation is a no-op at init (pure LayerNorm).
  Rng unused(0);
  register_linear(ps, name + ".scale", d_cond, d, unused, 0.0, true);
  register_linear(ps, name + ".shift", d_cond, d, unused, 0.0, true);
}

// LayerNorm(x) * (1 + scale(cond)) + shift(cond); cond is a 1 x d_cond row.
template <typename S>
Var<S> adaln_modulate(Bind<S>& b, Var<S> x, Var<S> cond,
                      const std::string& name, S eps = S(1e-5)) {
  Var<S> s = b.tape.affine_const(linear(b, cond, name + ".scale"), S(1), S(1));
  Var<S> sh = linear(b, cond, name + ".shift");
  return b.tape.row_affine(b.tape.layernorm_rows(x, eps), s, sh);
}

// ---------------------------------------------------------------------------
// Named-array checkpoint archive: magic, entries, JSON-ish manifest, checksum.

struct Archive {
  struct Entry {
    std::string name;
    int dtype = 4;  // bytes per element: 4 = f32, 8 = f64
    Index rows = 0, cols = 0;
    std::vector<unsigned char> data;
  };

  std::vector<Entry> entries;
  std::unordered_map<std::string, int> index;
  std::string manifest;

  template <typename S>
  void add(const std::string& name, const Mat<S>& m) {
    Entry e;
    e.name = name;
    e.dtype = static_cast<int>(sizeof(S));
    e.rows = m.rows();
    e.cols = m.cols();
    e.data.resize(static_cast<std::size_t>(m.size()) * sizeof(S));
    if (m.size() > 0) std::memcpy(e.data.data(), m.data(), e.data.size());
    index.emplace(e.name, static_cast<int>(entries.size()));
    entries.push_back(std::move(e));
  }

  bool has(const std::string& name) const { return index.count(name) != 0; }

  template <typename S>
  Mat<S> get(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw IoError("archive: missing entry " + name);
    const Entry& e = entries[static_cast<std::size_t>(it->second)];
    Mat<S> out(e.rows, e.cols);
    if (e.dtype == static_cast<int>(sizeof(S))) {
      std::memcpy(out.data(), e.data.data(), e.data.size());
    } else if (e.dtype == 4) {
      Mat<float> tmp(e.rows, e.cols);
      std::memcpy(tmp.data(), e.data.data(), e.data.size());
      out = tmp.template cast<S>();
    } else if (e.dtype == 8) {
      Mat<double> tmp(e.rows, e.cols);
      std::memcpy(tmp.data(), e.data.data(), e.data.size());
      out = tmp.template cast<S>();
    } else {
      throw IoError("archive: bad dtype for " + name);
    }
    return out;
  }

  void save(const std::string& path) const;
  static Archive load(const std::string& path);
};

namespace detail {
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t take_u32(const std::string& s, std::size_t& off) {
  if (off + 4 > s.size()) throw IoError("archive: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  off += 4;
  return v;
}
inline std::uint64_t take_u64(const std::string& s, std::size_t& off) {
  if (off + 8 > s.size()) throw IoError("archive: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  off += 8;
  return v;
}
}  // namespace detail

inline void Archive::save(const std::string& path) const {
  std::string buf;
  buf += "NXTA";
  detail::put_u32(buf, 1);
  detail::put_u64(buf, entries.size());
  for (const auto& e : entries) {
    detail::put_u32(buf, static_cast<std::uint32_t>(e.name.size()));
    buf += e.name;
    detail::put_u32(buf, static_cast<std::uint32_t>(e.dtype));
    detail::put_u64(buf, static_cast<std::uint64_t>(e.rows));
    detail::put_u64(buf, static_cast<std::uint64_t>(e.cols));
    buf.append(reinterpret_cast<const char*>(e.data.data()), e.data.size());
  }
  detail::put_u32(buf, static_cast<std::uint32_t>(manifest.size()));
  buf += manifest;
  detail::put_u64(buf, fnv1a64(buf.data(), buf.size()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("short write: " + path);
}

inline Archive Archive::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(is)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 24 || buf.compare(0, 4, "NXTA") != 0)
    throw IoError("bad archive magic: " + path);
  const std::uint64_t stored =
      [&] { std::size_t off = buf.size() - 8; return detail::take_u64(buf, off); }();
  if (fnv1a64(buf.data(), buf.size() - 8) != stored)
    throw IoError("archive checksum mismatch: " + path);
  std::size_t off = 4;
  const auto version = detail::take_u32(buf, off);
  if (version != 1) throw IoError("unsupported archive version: " + path);
  Archive a;
  const auto n = detail::take_u64(buf, off);
  for (std::uint64_t i = 0; i < n; ++i) {
    Entry e;
    const auto name_len = detail::take_u32(buf, off);
    if (off + name_len > buf.size()) throw IoError("archive: truncated");
    e.name = buf.substr(off, name_len);
    off += name_len;
    e.dtype = static_cast<int>(detail::take_u32(buf, off));
    e.rows = static_cast<Index>(detail::take_u64(buf, off));
    e.cols = static_cast<Index>(detail::take_u64(buf, off));
    const std::size_t bytes =
        static_cast<std::size_t>(e.rows) * static_cast<std::size_t>(e.cols) *
        static_cast<std::size_t>(e.dtype);
    if (off + bytes > buf.size()) throw IoError("archive: truncated");
    e.data.assign(buf.begin() + static_cast<std::ptrdiff_t>(off),
                  buf.begin() + static_cast<std::ptrdiff_t>(off + bytes));
    off += bytes;
    a.index.emplace(e.name, static_cast<int>(a.entries.size()));
    a.entries.push_back(std::move(e));
  }
  const auto mlen = detail::take_u32(buf, off);
  if (off + mlen > buf.size() - 8) throw IoError("archive: truncated manifest");
  a.manifest = buf.substr(off, mlen);
  return a;
}

template <typename S>
void store_to_archive(const ParamStore<S>& ps, Archive& a,
                      const std::string& prefix) {
  for (const auto& p : ps.params) a.add(prefix + p.name, p.value);
}

template <typename S>
void store_from_archive(ParamStore<S>& ps, const Archive& a,
                        const std::string& prefix) {
  for (auto& p : ps.params) {
    Mat<S> m = a.get<S>(prefix + p.name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw IoError("archive: shape mismatch for " + prefix + p.name);
    p.value = std::move(m);
  }
}

}  // namespace nxtv
