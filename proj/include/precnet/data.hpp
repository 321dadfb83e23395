#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "precnet/common.hpp"
#include "precnet/layers.hpp"

namespace precnet {

// Frames are {3,H,W} float tensors in [0,1] (byte value / 255).
using Frame = HostTensor<float>;

struct Recording {
  std::string name;
  std::vector<Frame> frames;
};

struct SequenceDataset {
  int channels = 3;
  int height = 0;
  int width = 0;
  double fps = 10.0;
  std::vector<Recording> recordings;

  std::size_t total_frames() const {
    std::size_t n = 0;
    for (const auto& r : recordings) n += r.frames.size();
    return n;
  }
};

// A length-l window inside one recording.
struct Window {
  int recording = 0;
  int start = 0;
};

// Fixed-length windows that never cross recording boundaries. stride == l_s
// yields the non-overlapping evaluation split; recordings shorter than l_s
// are skipped and counted.
inline std::vector<Window> slice_sequences(const SequenceDataset& ds, int l_s, int stride,
                                           int* skipped_recordings = nullptr) {
  check(l_s >= 1, "slice_sequences: window length must be >= 1");
  check(stride >= 1, "slice_sequences: stride must be >= 1");
  std::vector<Window> out;
  int skipped = 0;
  for (std::size_t r = 0; r < ds.recordings.size(); ++r) {
    const int n = static_cast<int>(ds.recordings[r].frames.size());
    if (n < l_s) {
      ++skipped;
      continue;
    }
    for (int s = 0; s + l_s <= n; s += stride) out.push_back({static_cast<int>(r), s});
  }
  if (skipped_recordings) *skipped_recordings = skipped;
  return out;
}

// ---- P6 pixmap I/O ---------------------------------------------------------

namespace detail {
// Reads one whitespace/comment-separated ASCII integer from a P6 header.
inline int ppm_header_int(std::istream& in, const std::string& path) {
  int c;
  for (;;) {
    c = in.get();
    if (c == EOF) throw IoError(path + ": truncated header at byte offset " +
                                std::to_string(static_cast<long long>(in.tellg())));
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
      continue;
    }
    if (!std::isspace(c)) break;
  }
  if (!std::isdigit(c))
    throw IoError(path + ": malformed header at byte offset " +
                  std::to_string(static_cast<long long>(in.tellg()) - 1) +
                  " (expected digit, got '" + static_cast<char>(c) + "')");
  long v = 0;
  while (std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 30) throw IoError(path + ": header value out of range");
    c = in.get();
  }
  if (c != EOF) in.unget();
  return static_cast<int>(v);
}
}  // namespace detail

inline Frame load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6')
    throw IoError(path + ": not a P6 pixmap (magic mismatch at byte offset 0)");
  const int w = detail::ppm_header_int(in, path);
  const int h = detail::ppm_header_int(in, path);
  const int maxval = detail::ppm_header_int(in, path);
  if (maxval != 255)
    throw IoError(path + ": unsupported maxval " + std::to_string(maxval) + " (need 255)");
  const int sep = in.get();  // single whitespace byte before binary data
  if (sep == EOF || !std::isspace(sep))
    throw IoError(path + ": missing separator before pixel data at byte offset " +
                  std::to_string(static_cast<long long>(in.tellg()) - 1));
  check(w > 0 && h > 0, path + ": non-positive dimensions");
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw IoError(path + ": truncated pixel data (got " + std::to_string(in.gcount()) +
                  " of " + std::to_string(raw.size()) + " bytes)");
  Frame f(Shape{3, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i) {
    f.data[i] = raw[3 * i] / 255.0f;
    f.data[plane + i] = raw[3 * i + 1] / 255.0f;
    f.data[2 * plane + i] = raw[3 * i + 2] / 255.0f;
  }
  return f;
}

inline void save_ppm(const std::string& path, const Frame& f) {
  check(f.shape.size() == 3 && f.shape[0] == 3, "save_ppm: expected {3,H,W} frame");
  const int h = f.shape[1], w = f.shape[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const auto to_byte = [](float v) {
    const long s = std::lround(v * 255.0f);
    return static_cast<unsigned char>(s < 0 ? 0 : (s > 255 ? 255 : s));
  };
  for (std::int64_t i = 0; i < plane; ++i) {
    raw[3 * i] = to_byte(f.data[i]);
    raw[3 * i + 1] = to_byte(f.data[plane + i]);
    raw[3 * i + 2] = to_byte(f.data[2 * plane + i]);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed for " + path);
}

// ---- dataset directory layout ---------------------------------------------
//
//   root/recording_0000/frame_000000.ppm
//   root/manifest.json       (dims, fps, recording list)

inline std::string index_name(const char* prefix, int idx, int width) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%0*d", prefix, width, idx);
  return buf;
}

inline void save_dataset(const SequenceDataset& ds, const std::string& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create directory " + root + ": " + ec.message());
  nlohmann::json man;
  man["format"] = "precnet-dataset-v1";
  man["channels"] = ds.channels;
  man["height"] = ds.height;
  man["width"] = ds.width;
  man["fps"] = ds.fps;
  man["recordings"] = nlohmann::json::array();
  for (std::size_t r = 0; r < ds.recordings.size(); ++r) {
    const std::string name =
        ds.recordings[r].name.empty() ? index_name("recording_", static_cast<int>(r), 4)
                                      : ds.recordings[r].name;
    const fs::path dir = fs::path(root) / name;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    for (std::size_t t = 0; t < ds.recordings[r].frames.size(); ++t) {
      save_ppm((dir / (index_name("frame_", static_cast<int>(t), 6) + ".ppm")).string(),
               ds.recordings[r].frames[t]);
    }
    man["recordings"].push_back(
        {{"name", name}, {"frames", ds.recordings[r].frames.size()}});
  }
  std::ofstream mf(fs::path(root) / "manifest.json");
  if (!mf) throw IoError("cannot create manifest in " + root);
  mf << man.dump(2) << "\n";
}

// Loads every recording_* subdirectory (lexicographic order), frames in
// lexicographic order within each. frame_stride > 1 keeps every n-th frame.
inline SequenceDataset load_frames(const std::string& root, int frame_stride = 1) {
  namespace fs = std::filesystem;
  check(frame_stride >= 1, "load_frames: frame_stride must be >= 1");
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root);
  std::vector<std::string> rec_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) rec_dirs.push_back(e.path().filename().string());
  }
  std::sort(rec_dirs.begin(), rec_dirs.end());
  SequenceDataset ds;
  for (const std::string& name : rec_dirs) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / name)) {
      if (e.is_regular_file() && e.path().extension() == ".ppm")
        files.push_back(e.path().string());
    }
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    Recording rec;
    rec.name = name;
    for (std::size_t i = 0; i < files.size(); i += frame_stride) {
      Frame f = load_ppm(files[i]);
      if (ds.height == 0) {
        ds.height = f.shape[1];
        ds.width = f.shape[2];
      }
      if (f.shape[1] != ds.height || f.shape[2] != ds.width)
        throw IoError(files[i] + ": frame dims " + std::to_string(f.shape[2]) + "x" +
                      std::to_string(f.shape[1]) + " differ from dataset " +
                      std::to_string(ds.width) + "x" + std::to_string(ds.height));
      rec.frames.push_back(std::move(f));
    }
    ds.recordings.push_back(std::move(rec));
  }
  if (ds.recordings.empty()) throw IoError("no recordings found under " + root);
  // Pick up fps metadata if a manifest is present.
  const fs::path man = fs::path(root) / "manifest.json";
  if (fs::is_regular_file(man)) {
    std::ifstream mf(man);
    nlohmann::json j;
    try {
      mf >> j;
    } catch (const nlohmann::json::exception& e) {
      throw IoError(man.string() + ": malformed manifest: " + e.what());
    }
    if (j.contains("fps")) ds.fps = j["fps"].get<double>();
  }
  return ds;
}

// ---- synthetic bouncing shapes --------------------------------------------

struct ShapeSpec {
  enum class Kind { rectangle, disc };
  Kind kind = Kind::rectangle;
  double cx = 0, cy = 0;    // center, pixels
  double vx = 0, vy = 0;    // velocity, pixels per frame
  double half_w = 3, half_h = 3;  // rectangle half-extent; half_w is the disc radius
  std::array<float, 3> color{1.0f, 1.0f, 1.0f};
};

struct SyntheticSpec {
  int height = 32;
  int width = 32;
  int shape_count = 2;
  bool rectangles = true;
  bool discs = true;
  double speed_min = 1.0;  // pixels/frame
  double speed_max = 2.5;
  double size_min = 3.0;  // half-extent
  double size_max = 6.0;
  std::uint64_t seed = 0;
};

// Renders one frame; shapes painted in order over a black background, pixel
// centers at integer + 0.5 so that unit translations of a shape shift its
// raster exactly.
inline Frame render_shapes(int height, int width, const std::vector<ShapeSpec>& shapes) {
  Frame f(Shape{3, height, width});
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  for (const ShapeSpec& s : shapes) {
    for (int y = 0; y < height; ++y) {
      const double dy = y + 0.5 - s.cy;
      for (int x = 0; x < width; ++x) {
        const double dx = x + 0.5 - s.cx;
        bool inside;
        if (s.kind == ShapeSpec::Kind::rectangle) {
          inside = std::abs(dx) <= s.half_w && std::abs(dy) <= s.half_h;
        } else {
          inside = dx * dx + dy * dy <= s.half_w * s.half_w;
        }
        if (inside) {
          for (int c = 0; c < 3; ++c) f.data[c * plane + y * width + x] = s.color[c];
        }
      }
    }
  }
  return f;
}

// Advances a shape one frame, reflecting off canvas walls.
inline void advance_shape(ShapeSpec& s, int height, int width) {
  s.cx += s.vx;
  s.cy += s.vy;
  const auto bounce = [](double& p, double& v, double lo, double hi) {
    if (p < lo) {
      p = 2 * lo - p;
      v = -v;
    } else if (p > hi) {
      p = 2 * hi - p;
      v = -v;
    }
  };
  bounce(s.cx, s.vx, s.half_w, width - s.half_w);
  bounce(s.cy, s.vy, s.half_h, height - s.half_h);
}

inline Recording render_recording(int height, int width, int length,
                                  std::vector<ShapeSpec> shapes) {
  Recording rec;
  for (int t = 0; t < length; ++t) {
    rec.frames.push_back(render_shapes(height, width, shapes));
    for (ShapeSpec& s : shapes) advance_shape(s, height, width);
  }
  return rec;
}

inline SequenceDataset generate_synthetic(const SyntheticSpec& spec, int n_sequences,
                                          int length) {
  check(spec.height > 0 && spec.width > 0, "generate_synthetic: bad canvas size");
  check(n_sequences > 0 && length > 0, "generate_synthetic: need positive counts");
  check(spec.shape_count > 0, "generate_synthetic: need at least one shape");
  check(spec.rectangles || spec.discs, "generate_synthetic: no shape kind enabled");
  check(2 * spec.size_max < std::min(spec.height, spec.width),
        "generate_synthetic: shapes larger than canvas");
  check(spec.size_min > 0 && spec.size_min <= spec.size_max,
        "generate_synthetic: bad size range");
  check(spec.speed_min >= 0 && spec.speed_min <= spec.speed_max,
        "generate_synthetic: bad speed range");
  SequenceDataset ds;
  ds.height = spec.height;
  ds.width = spec.width;
  SplitMix64 root(spec.seed);
  for (int n = 0; n < n_sequences; ++n) {
    SplitMix64 rng(root.next_u64());
    std::vector<ShapeSpec> shapes;
    for (int k = 0; k < spec.shape_count; ++k) {
      ShapeSpec s;
      const bool rect = spec.rectangles && (!spec.discs || rng.next_index(2) == 0);
      s.kind = rect ? ShapeSpec::Kind::rectangle : ShapeSpec::Kind::disc;
      s.half_w = rng.next_real(spec.size_min, spec.size_max);
      s.half_h = rect ? rng.next_real(spec.size_min, spec.size_max) : s.half_w;
      s.cx = rng.next_real(s.half_w, spec.width - s.half_w);
      s.cy = rng.next_real(s.half_h, spec.height - s.half_h);
      const double speed = rng.next_real(spec.speed_min, spec.speed_max);
      const double angle = rng.next_real(0.0, 2.0 * 3.14159265358979323846);
      s.vx = speed * std::cos(angle);
      s.vy = speed * std::sin(angle);
      // Bright, byte-quantized colors so disk round trips are exact.
      for (int c = 0; c < 3; ++c)
        s.color[c] = static_cast<float>(96 + rng.next_index(160)) / 255.0f;
      shapes.push_back(s);
    }
    Recording rec = render_recording(spec.height, spec.width, length, std::move(shapes));
    rec.name = index_name("recording_", n, 4);
    ds.recordings.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace precnet
