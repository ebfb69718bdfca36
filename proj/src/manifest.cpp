#include "nxtv/io.hpp"

#include <fstream>
#include <sstream>

namespace nxtv {

std::vector<ClipRecord> CorpusManifest::split(const std::string& name) const {
  std::vector<ClipRecord> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(r);
  return out;
}

void save_manifest(const CorpusManifest& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "# nxtv corpus v1\n";
  if (m.speed > 0) os << "speed " << m.speed << "\n";
  os << "shape " << m.shape.t_raw << " " << m.shape.h << " " << m.shape.w
     << " " << m.shape.c << " " << m.shape.patch_h << " " << m.shape.patch_w
     << " " << m.shape.tubelet << "\n";
  for (const auto& r : m.records)
    os << r.clip_id << " " << r.seed << " " << r.class_id << " " << r.split
       << "\n";
  if (!os) throw IoError("short write: " + path);
}

CorpusManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  CorpusManifest m;
  std::string line;
  bool have_shape = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string head;
    ss >> head;
    if (head == "speed") {
      ss >> m.speed;
      if (!ss) throw IoError("bad speed line in manifest: " + path);
    } else if (head == "shape") {
      ss >> m.shape.t_raw >> m.shape.h >> m.shape.w >> m.shape.c >>
          m.shape.patch_h >> m.shape.patch_w >> m.shape.tubelet;
      if (!ss) throw IoError("bad shape line in manifest: " + path);
      m.shape.validate();
      have_shape = true;
    } else {
      ClipRecord r;
      r.clip_id = head;
      ss >> r.seed >> r.class_id >> r.split;
      if (!ss) throw IoError("bad record line in manifest: " + path);
      if (r.class_id < 0 || r.class_id >= kNumMotionClasses)
        throw IoError("class id out of range in manifest: " + path);
      m.records.push_back(std::move(r));
    }
  }
  if (!have_shape) throw IoError("manifest missing shape line: " + path);
  return m;
}

}  // namespace nxtv
