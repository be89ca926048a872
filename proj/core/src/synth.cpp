#include "stgaze/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "stgaze/errors.hpp"

namespace stgaze {
namespace {

constexpr int kN = kImageSize;
constexpr double kScleraRx = 44.0;
constexpr double kScleraRy = 30.0;

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Grayscale canvas; painted shapes use ~1px anti-aliased edges so that the
// label -> image mapping is smooth at sub-pixel scale.
struct Canvas {
  std::vector<double> px;

  explicit Canvas(double level) : px(static_cast<std::size_t>(kN) * kN, level) {}

  double& at(int x, int y) { return px[static_cast<std::size_t>(y) * kN + x]; }

  void disc(double cx, double cy, double r, double level) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1.0)));
    const int x1 = std::min(kN - 1, static_cast<int>(std::ceil(cx + r + 1.0)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1.0)));
    const int y1 = std::min(kN - 1, static_cast<int>(std::ceil(cy + r + 1.0)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double d = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
        const double cov = clamp01(r + 0.5 - d);
        if (cov > 0.0) at(x, y) += (level - at(x, y)) * cov;
      }
    }
  }

  void ellipse(double cx, double cy, double rx, double ry, double level) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx - 1.0)));
    const int x1 = std::min(kN - 1, static_cast<int>(std::ceil(cx + rx + 1.0)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry - 1.0)));
    const int y1 = std::min(kN - 1, static_cast<int>(std::ceil(cy + ry + 1.0)));
    const double edge = std::min(rx, ry);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double nx = (x - cx) / rx;
        const double ny = (y - cy) / ry;
        const double cov = clamp01((1.0 - std::sqrt(nx * nx + ny * ny)) * edge + 0.5);
        if (cov > 0.0) at(x, y) += (level - at(x, y)) * cov;
      }
    }
  }

  void box(double cx, double cy, double hw, double hh, double level) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - hw - 1.0)));
    const int x1 = std::min(kN - 1, static_cast<int>(std::ceil(cx + hw + 1.0)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - hh - 1.0)));
    const int y1 = std::min(kN - 1, static_cast<int>(std::ceil(cy + hh + 1.0)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double covx = clamp01(std::min(x - (cx - hw), (cx + hw) - x) + 0.5);
        const double covy = clamp01(std::min(y - (cy - hh), (cy + hh) - y) + 0.5);
        const double cov = covx * covy;
        if (cov > 0.0) at(x, y) += (level - at(x, y)) * cov;
      }
    }
  }

  // Expands to 3 identical channels, adds clamped Gaussian noise.
  Tensor<float> finish(double noise_std, std::uint64_t noise_seed) const {
    std::vector<double> noisy(px);
    if (noise_std > 0.0) {
      Rng rng(noise_seed);
      for (auto& v : noisy) v = clamp01(v + noise_std * rng.normal());
    }
    Tensor<float> out({3, kN, kN});
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < noisy.size(); ++i) {
        out[static_cast<std::int64_t>(c) * kN * kN + static_cast<std::int64_t>(i)] =
            static_cast<float>(noisy[i]);
      }
    }
    return out;
  }
};

// Left-eye geometry; the right eye mirrors this whole canvas.
void paint_eye(Canvas& canvas, const GazeAngles& g, const SceneParams& p, double scale,
               double cx0, double cy0) {
  const double ix = cx0 + p.gain_px * scale * std::sin(g.yaw);
  const double iy = cy0 - p.gain_px * scale * std::sin(g.pitch);
  canvas.ellipse(cx0, cy0, kScleraRx * scale, kScleraRy * scale, p.sclera_level);
  canvas.disc(ix, iy, p.iris_radius_px * scale, p.iris_level);
  canvas.disc(ix, iy, p.pupil_radius_px * scale, p.pupil_level);
}

Tensor<float> hflip_image(const Tensor<float>& img) {
  Tensor<float> out(img.shape());
  const int h = img.dim(1), w = img.dim(2);
  for (int c = 0; c < img.dim(0); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y, w - 1 - x);
    }
  }
  return out;
}

void check_range(const GazeAngles& g, const SceneParams& p) {
  const double range = deg_to_rad(p.gaze_range_deg) + 1e-9;
  if (std::fabs(g.pitch) > range || std::fabs(g.yaw) > range) {
    throw std::invalid_argument("render: gaze label outside the configured range");
  }
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, std::size_t& offset, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(std::string("sequence file: truncated while reading ") + what,
                             offset);
  offset += sizeof(T);
  return v;
}

void write_image(std::ostream& os, const Tensor<float>& img) {
  os.write(reinterpret_cast<const char*>(img.data()),
           static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(img.numel())));
}

Tensor<float> read_image(std::istream& is, std::size_t& offset) {
  Tensor<float> img({3, kN, kN});
  const std::size_t bytes = sizeof(float) * static_cast<std::size_t>(img.numel());
  is.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw FormatError("sequence file: truncated image payload", offset);
  offset += bytes;
  return img;
}

}  // namespace

void SceneParams::validate() const {
  if (sequence_length < 1) throw std::invalid_argument("scene: sequence_length must be >= 1");
  if (gaze_range_deg <= 0.0 || gaze_range_deg >= 90.0) {
    throw std::invalid_argument("scene: gaze_range_deg must be in (0, 90)");
  }
  if (iris_radius_px <= 0.0 || pupil_radius_px <= 0.0 || pupil_radius_px > iris_radius_px) {
    throw std::invalid_argument("scene: need 0 < pupil_radius_px <= iris_radius_px");
  }
  const double max_travel = gain_px * std::sin(deg_to_rad(gaze_range_deg));
  if (64.0 + max_travel + iris_radius_px > kN - 1) {
    throw std::invalid_argument("scene: iris leaves the patch at extreme gaze");
  }
  if (mean_revert < 0.0 || mean_revert > 1.0) {
    throw std::invalid_argument("scene: mean_revert must be in [0, 1]");
  }
  if (noise_std < 0.0 || step_std_deg < 0.0) {
    throw std::invalid_argument("scene: noise_std and step_std_deg must be >= 0");
  }
}

Tensor<float> render_eye(const GazeAngles& g, EyeSide side, const SceneParams& params,
                         std::uint64_t noise_seed) {
  check_range(g, params);
  Canvas canvas(params.bg_level);
  if (side == EyeSide::kLeft) {
    paint_eye(canvas, g, params, 1.0, 64.0, 64.0);
    return canvas.finish(params.noise_std, noise_seed);
  }
  // Mirrored left eye with negated yaw; noise is applied after the flip so
  // each side keeps its own stream.
  paint_eye(canvas, GazeAngles{g.pitch, -g.yaw}, params, 1.0, 64.0, 64.0);
  Tensor<float> flipped = hflip_image(canvas.finish(0.0, 0));
  if (params.noise_std > 0.0) {
    Rng rng(noise_seed);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(kN) * kN; ++i) {
      const float v =
          static_cast<float>(clamp01(flipped[i] + params.noise_std * rng.normal()));
      flipped[i] = v;
      flipped[i + kN * kN] = v;
      flipped[i + 2 * kN * kN] = v;
    }
  }
  return flipped;
}

Tensor<float> render_face(const GazeAngles& g, const SceneParams& params,
                          std::uint64_t noise_seed) {
  check_range(g, params);
  Canvas canvas(params.bg_level);
  // Head outline and a pose bar; centred on x = 63.5 so the zero-gaze face is
  // bilaterally symmetric with noise disabled.
  canvas.ellipse(63.5, 64.0, 52.0, 58.0, 0.72);
  paint_eye(canvas, g, params, params.face_scale, 63.5 - 24.0, 48.0);
  paint_eye(canvas, g, params, params.face_scale, 63.5 + 24.0, 48.0);
  canvas.box(63.5, 100.0, 20.0, 3.0, 0.2);
  return canvas.finish(params.noise_std, noise_seed);
}

SequenceSample gen_sequence(int frames, const SceneParams& params, std::uint64_t seed,
                            std::uint64_t sequence_id) {
  if (frames < 1) throw std::invalid_argument("gen_sequence: frames must be >= 1");
  params.validate();

  SequenceSample sample;
  sample.sequence_id = sequence_id;
  sample.seed = seed;
  sample.origin_cm = params.origin_cm;
  sample.labels.reserve(static_cast<std::size_t>(frames));

  const double range = deg_to_rad(params.gaze_range_deg);
  const double step_std = deg_to_rad(params.step_std_deg);
  Rng traj(derive_seed(seed, 0));
  GazeAngles g{traj.uniform(-range, range), traj.uniform(-range, range)};
  for (int t = 0; t < frames; ++t) {
    sample.labels.push_back(g);
    sample.eye_left.push_back(
        render_eye(g, EyeSide::kLeft, params, derive_seed(seed, 1 + 3 * static_cast<std::uint64_t>(t))));
    sample.eye_right.push_back(
        render_eye(g, EyeSide::kRight, params, derive_seed(seed, 2 + 3 * static_cast<std::uint64_t>(t))));
    sample.face.push_back(
        render_face(g, params, derive_seed(seed, 3 + 3 * static_cast<std::uint64_t>(t))));
    g.pitch = std::clamp(params.mean_revert * g.pitch + traj.normal(0.0, step_std), -range, range);
    g.yaw = std::clamp(params.mean_revert * g.yaw + traj.normal(0.0, step_std), -range, range);
  }
  return sample;
}

void offset_augment(SequenceSample& sample, double std_deg, Rng& rng) {
  if (std_deg < 0.0) throw std::invalid_argument("offset_augment: std_deg must be >= 0");
  if (std_deg == 0.0) return;
  const double dp = rng.normal(0.0, deg_to_rad(std_deg));
  const double dy = rng.normal(0.0, deg_to_rad(std_deg));
  for (auto& label : sample.labels) {
    label.pitch += dp;
    label.yaw += dy;
  }
}

void write_sequence(const SequenceSample& sample, std::ostream& os) {
  os.write("STGZ", 4);
  write_pod(os, std::uint32_t{1});
  write_pod(os, static_cast<std::uint32_t>(sample.frames()));
  for (int t = 0; t < sample.frames(); ++t) {
    write_image(os, sample.eye_left[static_cast<std::size_t>(t)]);
    write_image(os, sample.eye_right[static_cast<std::size_t>(t)]);
    write_image(os, sample.face[static_cast<std::size_t>(t)]);
  }
  for (const auto& label : sample.labels) {
    write_pod(os, static_cast<float>(label.pitch));
    write_pod(os, static_cast<float>(label.yaw));
  }
  write_pod(os, static_cast<float>(sample.origin_cm.x));
  write_pod(os, static_cast<float>(sample.origin_cm.y));
  write_pod(os, static_cast<float>(sample.origin_cm.z));
  if (!os) throw IoError("sequence file: write failed");
}

void write_sequence(const SequenceSample& sample, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("sequence file: cannot open '" + path + "' for writing");
  write_sequence(sample, os);
}

SequenceSample read_sequence(std::istream& is) {
  std::size_t offset = 0;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "STGZ", 4) != 0) {
    throw FormatError("sequence file: bad magic", 0);
  }
  offset += 4;
  const auto version = read_pod<std::uint32_t>(is, offset, "version");
  if (version != 1) {
    throw FormatError("sequence file: unsupported version " + std::to_string(version), 4);
  }
  const auto frames = read_pod<std::uint32_t>(is, offset, "frame count");
  if (frames == 0 || frames > 100000) {
    throw FormatError("sequence file: implausible frame count " + std::to_string(frames), 8);
  }
  SequenceSample sample;
  for (std::uint32_t t = 0; t < frames; ++t) {
    sample.eye_left.push_back(read_image(is, offset));
    sample.eye_right.push_back(read_image(is, offset));
    sample.face.push_back(read_image(is, offset));
  }
  for (std::uint32_t t = 0; t < frames; ++t) {
    GazeAngles g;
    g.pitch = read_pod<float>(is, offset, "pitch");
    g.yaw = read_pod<float>(is, offset, "yaw");
    sample.labels.push_back(g);
  }
  sample.origin_cm.x = read_pod<float>(is, offset, "origin x");
  sample.origin_cm.y = read_pod<float>(is, offset, "origin y");
  sample.origin_cm.z = read_pod<float>(is, offset, "origin z");
  return sample;
}

SequenceSample read_sequence(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("sequence file: cannot open '" + path + "' for reading");
  return read_sequence(is);
}

namespace {

nlohmann::json params_to_json(const SceneParams& p) {
  return nlohmann::json{{"seed", p.seed},
                        {"sequence_length", p.sequence_length},
                        {"gaze_range_deg", p.gaze_range_deg},
                        {"gain_px", p.gain_px},
                        {"iris_radius_px", p.iris_radius_px},
                        {"pupil_radius_px", p.pupil_radius_px},
                        {"bg_level", p.bg_level},
                        {"sclera_level", p.sclera_level},
                        {"iris_level", p.iris_level},
                        {"pupil_level", p.pupil_level},
                        {"noise_std", p.noise_std},
                        {"step_std_deg", p.step_std_deg},
                        {"mean_revert", p.mean_revert},
                        {"origin_cm", {p.origin_cm.x, p.origin_cm.y, p.origin_cm.z}},
                        {"face_scale", p.face_scale}};
}

SceneParams params_from_json(const nlohmann::json& j) {
  SceneParams p;
  p.seed = j.at("seed").get<std::uint64_t>();
  p.sequence_length = j.at("sequence_length").get<int>();
  p.gaze_range_deg = j.at("gaze_range_deg").get<double>();
  p.gain_px = j.at("gain_px").get<double>();
  p.iris_radius_px = j.at("iris_radius_px").get<double>();
  p.pupil_radius_px = j.at("pupil_radius_px").get<double>();
  p.bg_level = j.at("bg_level").get<double>();
  p.sclera_level = j.at("sclera_level").get<double>();
  p.iris_level = j.at("iris_level").get<double>();
  p.pupil_level = j.at("pupil_level").get<double>();
  p.noise_std = j.at("noise_std").get<double>();
  p.step_std_deg = j.at("step_std_deg").get<double>();
  p.mean_revert = j.at("mean_revert").get<double>();
  const auto& o = j.at("origin_cm");
  p.origin_cm = Vec3Cm{o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>()};
  p.face_scale = j.at("face_scale").get<double>();
  return p;
}

}  // namespace

void write_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j{{"version", m.version}, {"split", m.split},
                   {"params", params_to_json(m.params)}, {"seed", m.seed},
                   {"files", m.files}, {"T", m.frames_per_sequence}};
  std::ofstream os(path);
  if (!os) throw IoError("manifest: cannot open '" + path + "' for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("manifest: write failed");
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("manifest: cannot open '" + path + "' for reading");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: invalid JSON: ") + e.what(), 0);
  }
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.split = j.at("split").get<std::string>();
    m.params = params_from_json(j.at("params"));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.files = j.at("files").get<std::vector<std::string>>();
    m.frames_per_sequence = j.at("T").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: missing or malformed key: ") + e.what(), 0);
  }
  if (m.version != 1) {
    throw FormatError("manifest: unsupported version " + std::to_string(m.version), 0);
  }
  return m;
}

void validate_manifest(const DatasetManifest& m, const std::string& dir) {
  for (const auto& f : m.files) {
    const auto p = std::filesystem::path(dir) / f;
    if (!std::filesystem::exists(p)) {
      throw IoError("manifest: listed file missing: " + f);
    }
  }
}

SequenceSample SyntheticSource::sequence(int index) const {
  return gen_sequence(frames_, params_, derive_seed(global_seed_, static_cast<std::uint64_t>(index)),
                      static_cast<std::uint64_t>(index));
}

DiskSource::DiskSource(DatasetManifest manifest, std::string dir)
    : manifest_(std::move(manifest)), dir_(std::move(dir)) {
  validate_manifest(manifest_, dir_);
}

SequenceSample DiskSource::sequence(int index) const {
  const auto path =
      (std::filesystem::path(dir_) / manifest_.files[static_cast<std::size_t>(index)]).string();
  SequenceSample s = read_sequence(path);
  s.sequence_id = static_cast<std::uint64_t>(index);
  return s;
}

}  // namespace stgaze
