#pragma once

#include "nxtv/dataio.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nxtv {

// Binary clip file: magic "NXTV", u32 version, u32 t_raw/h/w/c,
// f32 little-endian payload, frame-major.
void save_clip(const VideoClip& clip, const std::string& path);
VideoClip load_clip(const std::string& path);

// P6 PPM export of one frame (or of arbitrary flat RGB data).
void save_ppm(const VideoClip& clip, int frame, const std::string& path);
void save_ppm_image(const float* rgb, int h, int w, int c,
                    const std::string& path);

// Rows of frames composited into one image with a 1px separator.
// Every frame is flat h*w*c, c in {1,3}.
void save_ppm_grid(const std::vector<std::vector<Eigen::ArrayXf>>& rows, int h,
                   int w, int c, const std::string& path);

struct ClipRecord {
  std::string clip_id;
  std::uint64_t seed = 0;
  int class_id = 0;
  std::string split;  // "train" | "val"
};

struct CorpusManifest {
  ClipShape shape;
  double speed = 0.0;  // 0 = generator default velocity
  std::vector<ClipRecord> records;

  std::vector<ClipRecord> split(const std::string& name) const;
};

void save_manifest(const CorpusManifest& m, const std::string& path);
CorpusManifest load_manifest(const std::string& path);

std::uint64_t file_checksum(const std::string& path);

}  // namespace nxtv
