#include "nxtv/io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace nxtv {

namespace {

constexpr char kMagic[4] = {'N', 'X', 'T', 'V'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_clip(const VideoClip& clip, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(clip.t_raw));
  write_u32(os, static_cast<std::uint32_t>(clip.h));
  write_u32(os, static_cast<std::uint32_t>(clip.w));
  write_u32(os, static_cast<std::uint32_t>(clip.c));
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(clip.frames.data()),
           static_cast<std::streamsize>(clip.frames.size() * 4));
  if (!os) throw IoError("short write: " + path);
}

VideoClip load_clip(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad clip magic: " + path);
  const auto version = read_u32(is);
  if (version != kVersion) throw IoError("unsupported clip version: " + path);
  VideoClip clip;
  clip.t_raw = static_cast<int>(read_u32(is));
  clip.h = static_cast<int>(read_u32(is));
  clip.w = static_cast<int>(read_u32(is));
  clip.c = static_cast<int>(read_u32(is));
  if (clip.t_raw <= 0 || clip.h <= 0 || clip.w <= 0 || clip.c <= 0)
    throw IoError("bad clip dims: " + path);
  const Index n =
      static_cast<Index>(clip.t_raw) * clip.h * clip.w * clip.c;
  clip.frames.resize(n);
  is.read(reinterpret_cast<char*>(clip.frames.data()),
          static_cast<std::streamsize>(n * 4));
  if (!is) throw IoError("short read: " + path);
  return clip;
}

void save_ppm_image(const float* rgb, int h, int w, int c,
                    const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const float v = rgb[(static_cast<std::size_t>(y) * w + x) * c +
                            std::min(ch, c - 1)];
        const float clamped = std::min(1.0f, std::max(0.0f, v));
        row[static_cast<std::size_t>(x) * 3 + ch] =
            static_cast<unsigned char>(clamped * 255.0f + 0.5f);
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("short write: " + path);
}

void save_ppm(const VideoClip& clip, int frame, const std::string& path) {
  if (frame < 0 || frame >= clip.t_raw)
    throw IoError("frame index out of range");
  save_ppm_image(clip.frames.data() + frame * clip.frame_size(), clip.h,
                 clip.w, clip.c, path);
}

void save_ppm_grid(const std::vector<std::vector<Eigen::ArrayXf>>& rows, int h,
                   int w, int c, const std::string& path) {
  if (rows.empty() || rows[0].empty()) throw IoError("empty grid");
  const std::size_t ncols = rows[0].size();
  const int sep = 1;
  const int gh = static_cast<int>(rows.size()) * (h + sep) - sep;
  const int gw = static_cast<int>(ncols) * (w + sep) - sep;
  std::vector<float> canvas(static_cast<std::size_t>(gh) * gw * 3, 1.0f);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != ncols) throw IoError("ragged grid");
    for (std::size_t col = 0; col < ncols; ++col) {
      const auto& img = rows[r][col];
      if (img.size() != static_cast<Index>(h) * w * c)
        throw IoError("grid cell size mismatch");
      const int oy = static_cast<int>(r) * (h + sep);
      const int ox = static_cast<int>(col) * (w + sep);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int ch = 0; ch < 3; ++ch)
            canvas[((static_cast<std::size_t>(oy + y) * gw) + ox + x) * 3 + ch] =
                img[(static_cast<Index>(y) * w + x) * c + std::min(ch, c - 1)];
    }
  }
  save_ppm_image(canvas.data(), gh, gw, 3, path);
}

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[4096];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
  }
  return h;
}

}  // namespace nxtv
