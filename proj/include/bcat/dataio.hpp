#pragma once

// Trajectory container, the BTRJ binary format, channel padding, spatial
// resampling, per-trajectory normalization, and dataset manifests.
//
// BTRJ layout (all integers u32 little-endian, floats IEEE little-endian):
//   "BTRJ" | version=1 | T | H | W | C | C_valid | f64 dt | f64 dx |
//   name-table byte length | channel names separated by NUL |
//   T*H*W*C f32 values in [T][H][W][C] order.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "bcat/error.hpp"

namespace bcat {

namespace fs = std::filesystem;

struct Trajectory {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t valid_channels = 0;  // leading channels; the rest are zero padding
  double dt = 0.0;
  double dx = 0.0;
  std::vector<std::string> channel_names;
  std::string family;
  std::uint64_t seed = 0;
  nlohmann::json meta = nlohmann::json::object();  // generator record (not part of BTRJ)
  std::vector<float> data;                          // [T][H][W][C]

  static Trajectory zeros(std::size_t t, std::size_t h, std::size_t w, std::size_t c) {
    Trajectory traj;
    traj.frames = t;
    traj.height = h;
    traj.width = w;
    traj.channels = c;
    traj.valid_channels = c;
    traj.channel_names.assign(c, "");
    for (std::size_t i = 0; i < c; ++i) traj.channel_names[i] = "c" + std::to_string(i);
    traj.data.assign(t * h * w * c, 0.0f);
    return traj;
  }

  std::size_t frame_size() const { return height * width * channels; }
  std::size_t index(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return ((t * height + y) * width + x) * channels + c;
  }
  float& at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) { return data[index(t, y, x, c)]; }
  float at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const { return data[index(t, y, x, c)]; }

  std::span<const float> frame(std::size_t t) const { return {data.data() + t * frame_size(), frame_size()}; }
  std::span<float> frame(std::size_t t) { return {data.data() + t * frame_size(), frame_size()}; }

  /// Frames [begin, end) as a new trajectory with the same metadata.
  Trajectory slice_frames(std::size_t begin, std::size_t end) const {
    if (begin > end || end > frames) throw DataError("slice_frames: range out of bounds");
    Trajectory out = *this;
    out.frames = end - begin;
    out.data.assign(data.begin() + static_cast<std::ptrdiff_t>(begin * frame_size()),
                    data.begin() + static_cast<std::ptrdiff_t>(end * frame_size()));
    return out;
  }

  void validate() const {
    if (data.size() != frames * height * width * channels)
      throw DataError("trajectory: payload size does not match T*H*W*C");
    if (valid_channels > channels) throw DataError("trajectory: C_valid > C");
    if (channel_names.size() != channels) throw DataError("trajectory: channel name count != C");
  }
};

// ---------------------------------------------------------------------------
// BTRJ I/O

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& buf, double v) { put_u64(buf, std::bit_cast<std::uint64_t>(v)); }
inline void put_f32(std::string& buf, float v) { put_u32(buf, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError(what_ + ": truncated payload");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_trajectory(const Trajectory& traj) {
  traj.validate();
  std::string buf = "BTRJ";
  detail::put_u32(buf, 1);
  for (auto v : {traj.frames, traj.height, traj.width, traj.channels, traj.valid_channels})
    detail::put_u32(buf, static_cast<std::uint32_t>(v));
  detail::put_f64(buf, traj.dt);
  detail::put_f64(buf, traj.dx);
  std::string names;
  for (std::size_t i = 0; i < traj.channel_names.size(); ++i) {
    if (i) names.push_back('\0');
    names += traj.channel_names[i];
  }
  detail::put_u32(buf, static_cast<std::uint32_t>(names.size()));
  buf += names;
  buf.reserve(buf.size() + traj.data.size() * 4);
  for (float v : traj.data) detail::put_f32(buf, v);
  return buf;
}

inline Trajectory decode_trajectory(std::string bytes, const std::string& what = "BTRJ") {
  detail::Reader r(std::move(bytes), what);
  if (r.bytes(4) != "BTRJ") throw DataError(what + ": bad magic");
  const auto version = r.u32();
  if (version != 1) throw DataError(what + ": unsupported version " + std::to_string(version));
  Trajectory traj;
  traj.frames = r.u32();
  traj.height = r.u32();
  traj.width = r.u32();
  traj.channels = r.u32();
  traj.valid_channels = r.u32();
  if (traj.valid_channels > traj.channels) throw DataError(what + ": C_valid > C");
  traj.dt = r.f64();
  traj.dx = r.f64();
  const std::string names = r.bytes(r.u32());
  std::size_t start = 0;
  if (traj.channels > 0) {
    for (;;) {
      const auto end = names.find('\0', start);
      traj.channel_names.push_back(names.substr(start, end == std::string::npos ? std::string::npos : end - start));
      if (end == std::string::npos) break;
      start = end + 1;
    }
  }
  if (traj.channel_names.size() != traj.channels) throw DataError(what + ": channel name count != C");
  const std::size_t n = traj.frames * traj.height * traj.width * traj.channels;
  r.need(n * 4);
  traj.data.resize(n);
  for (auto& v : traj.data) v = r.f32();
  if (!r.at_end()) throw DataError(what + ": trailing bytes after payload");
  return traj;
}

inline void write_trajectory(const Trajectory& traj, const fs::path& path) {
  detail::write_file(path, encode_trajectory(traj));
}

inline Trajectory read_trajectory(const fs::path& path) {
  return decode_trajectory(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Channel padding

inline Trajectory pad_channels(const Trajectory& traj, std::size_t target) {
  if (traj.valid_channels > target)
    throw DataError("pad_channels: " + std::to_string(traj.valid_channels) + " valid channels exceed target " +
                    std::to_string(target));
  if (traj.channels == target) return traj;
  Trajectory out = traj;
  out.channels = target;
  out.channel_names.resize(target);
  for (std::size_t c = traj.valid_channels; c < target; ++c) out.channel_names[c] = "pad";
  out.data.assign(traj.frames * traj.height * traj.width * target, 0.0f);
  const std::size_t copy = std::min(traj.channels, target);
  for (std::size_t p = 0; p < traj.frames * traj.height * traj.width; ++p)
    for (std::size_t c = 0; c < std::min(copy, traj.valid_channels); ++c)
      out.data[p * target + c] = traj.data[p * traj.channels + c];
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

enum class ResampleDirection { kDown, kUp };

/// Resamples one [H][W][C] field to target x target.
/// kDown: mean over non-overlapping blocks (H divisible by target).
/// kUp: bilinear with cell-centred sampling (align_corners off), edges clamped.
inline std::vector<float> resample_field(std::span<const float> field, std::size_t h, std::size_t w, std::size_t c,
                                         std::size_t target, ResampleDirection direction) {
  std::vector<float> out(target * target * c);
  if (direction == ResampleDirection::kDown) {
    if (target == 0 || h % target != 0 || w % target != 0)
      throw DataError("resample: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                      std::to_string(target));
    const std::size_t fy = h / target, fx = w / target;
    for (std::size_t y = 0; y < target; ++y)
      for (std::size_t x = 0; x < target; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::size_t dy = 0; dy < fy; ++dy)
            for (std::size_t dx = 0; dx < fx; ++dx) acc += field[((y * fy + dy) * w + x * fx + dx) * c + ch];
          out[(y * target + x) * c + ch] = static_cast<float>(acc / static_cast<double>(fy * fx));
        }
    return out;
  }
  auto coord = [](std::size_t o, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& frac) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    frac = src - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < target; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, h, target, y0, y1, fy);
    for (std::size_t x = 0; x < target; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, w, target, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto v = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(field[(yy * w + xx) * c + ch]); };
        const double top = v(y0, x0) * (1 - fx) + v(y0, x1) * fx;
        const double bottom = v(y1, x0) * (1 - fx) + v(y1, x1) * fx;
        out[(y * target + x) * c + ch] = static_cast<float>(top * (1 - fy) + bottom * fy);
      }
    }
  }
  return out;
}

inline Trajectory resample(const Trajectory& traj, std::size_t target, ResampleDirection direction) {
  Trajectory out = traj;
  out.height = out.width = target;
  out.dx = traj.dx * static_cast<double>(traj.width) / static_cast<double>(target);
  out.data.clear();
  out.data.reserve(traj.frames * target * target * traj.channels);
  for (std::size_t t = 0; t < traj.frames; ++t) {
    const auto f = resample_field(traj.frame(t), traj.height, traj.width, traj.channels, target, direction);
    out.data.insert(out.data.end(), f.begin(), f.end());
  }
  return out;
}

/// Pads channels to `channels` and resamples to `resolution` (average pooling
/// when shrinking, bilinear when growing).
inline Trajectory conform_trajectory(const Trajectory& traj, std::size_t resolution, std::size_t channels) {
  if (traj.height != traj.width) throw DataError("trajectory: non-square grid " + std::to_string(traj.height) + "x" +
                                                 std::to_string(traj.width));
  Trajectory out = pad_channels(traj, channels);
  if (out.height > resolution) out = resample(out, resolution, ResampleDirection::kDown);
  else if (out.height < resolution) out = resample(out, resolution, ResampleDirection::kUp);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kStdFloor = 1e-6;

struct NormStats {
  std::vector<double> mean;  // per valid channel
  std::vector<double> std;
};

/// Per-channel mean / population std over the first `input_frames` frames.
inline NormStats compute_norm_stats(const Trajectory& traj, std::size_t input_frames) {
  if (input_frames == 0 || input_frames > traj.frames)
    throw DataError("compute_norm_stats: input window of " + std::to_string(input_frames) + " frames, trajectory has " +
                    std::to_string(traj.frames));
  const std::size_t cv = traj.valid_channels;
  NormStats stats{std::vector<double>(cv, 0.0), std::vector<double>(cv, 0.0)};
  const std::size_t points = input_frames * traj.height * traj.width;
  for (std::size_t p = 0; p < points; ++p)
    for (std::size_t c = 0; c < cv; ++c) stats.mean[c] += traj.data[p * traj.channels + c];
  for (auto& m : stats.mean) m /= static_cast<double>(points);
  for (std::size_t p = 0; p < points; ++p)
    for (std::size_t c = 0; c < cv; ++c) {
      const double d = traj.data[p * traj.channels + c] - stats.mean[c];
      stats.std[c] += d * d;
    }
  for (auto& s : stats.std) s = std::max(std::sqrt(s / static_cast<double>(points)), kStdFloor);
  return stats;
}

/// (x - mean) / std on valid channels; padded channels are forced to zero.
inline void normalize_in_place(std::span<float> data, std::size_t channels, const NormStats& stats) {
  const std::size_t cv = stats.mean.size();
  for (std::size_t p = 0; p < data.size() / channels; ++p)
    for (std::size_t c = 0; c < channels; ++c) {
      float& v = data[p * channels + c];
      v = c < cv ? static_cast<float>((v - stats.mean[c]) / stats.std[c]) : 0.0f;
    }
}

inline void denormalize_in_place(std::span<float> data, std::size_t channels, const NormStats& stats) {
  const std::size_t cv = stats.mean.size();
  for (std::size_t p = 0; p < data.size() / channels; ++p)
    for (std::size_t c = 0; c < channels; ++c) {
      float& v = data[p * channels + c];
      v = c < cv ? static_cast<float>(v * stats.std[c] + stats.mean[c]) : 0.0f;
    }
}

inline Trajectory normalize(const Trajectory& traj, const NormStats& stats) {
  Trajectory out = traj;
  normalize_in_place(out.data, out.channels, stats);
  return out;
}

inline Trajectory denormalize(const Trajectory& traj, const NormStats& stats) {
  Trajectory out = traj;
  denormalize_in_place(out.data, out.channels, stats);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::uint64_t seed = 0;
  std::size_t frames = 0;
  std::size_t resolution = 0;
  std::size_t channels = 0;
  nlohmann::json meta = nlohmann::json::object();
};

struct Manifest {
  int version = 1;
  std::string family;
  std::vector<ManifestEntry> files;
  nlohmann::json generator = nlohmann::json::object();
  fs::path directory;  // where the manifest lives; not serialized

  Trajectory load(std::size_t i) const {
    const auto& e = files.at(i);
    Trajectory traj = read_trajectory(directory / e.path);
    traj.family = family;
    traj.seed = e.seed;
    traj.meta = e.meta;
    return traj;
  }

  std::vector<Trajectory> load_all() const {
    std::vector<Trajectory> out;
    out.reserve(files.size());
    for (std::size_t i = 0; i < files.size(); ++i) out.push_back(load(i));
    return out;
  }
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& e : m.files) {
    nlohmann::json f = {{"path", e.path},       {"seed", e.seed},         {"frames", e.frames},
                        {"resolution", e.resolution}, {"channels", e.channels}};
    if (!e.meta.empty()) f["meta"] = e.meta;
    files.push_back(std::move(f));
  }
  return {{"version", m.version}, {"family", m.family}, {"files", files}, {"generator", m.generator}};
}

inline void write_manifest(const Manifest& m, const fs::path& path) {
  detail::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

inline Manifest read_manifest(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw DataError(path.string() + ": unsupported manifest version");
    m.family = j.at("family").get<std::string>();
    m.generator = j.value("generator", nlohmann::json::object());
    for (const auto& f : j.at("files")) {
      ManifestEntry e;
      e.path = f.at("path").get<std::string>();
      e.seed = f.at("seed").get<std::uint64_t>();
      e.frames = f.at("frames").get<std::size_t>();
      e.resolution = f.at("resolution").get<std::size_t>();
      e.channels = f.at("channels").get<std::size_t>();
      e.meta = f.value("meta", nlohmann::json::object());
      m.files.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  m.directory = path.parent_path();
  return m;
}

}  // namespace bcat
