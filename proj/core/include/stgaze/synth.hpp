#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "stgaze/geometry.hpp"
#include "stgaze/rng.hpp"
#include "stgaze/tensor.hpp"

namespace stgaze {

inline constexpr int kImageSize = 128;

// Scene description for the deterministic synthetic gaze-video generator.
// Eye patches are a gray background with a bright sclera ellipse centred on
// the patch and an iris/pupil disc whose centre moves with the gaze label:
//   x_px = 64 + gain * sin(yaw),  y_px = 64 - gain * sin(pitch)
// for the left eye; the right eye is the mirrored left eye with negated yaw,
// so the mirror identity hflip(render(right, (p, y))) == render(left, (p, -y))
// holds bit-exactly with noise disabled.
struct SceneParams {
  std::uint64_t seed = 1234;
  int sequence_length = 8;
  double gaze_range_deg = 25.0;
  double gain_px = 40.0;          // iris travel per unit sin(angle)
  double iris_radius_px = 14.0;
  double pupil_radius_px = 6.0;
  double bg_level = 0.5;
  double sclera_level = 0.9;
  double iris_level = 0.35;
  double pupil_level = 0.05;
  double noise_std = 0.01;        // additive Gaussian, clamped to [0, 1]
  double step_std_deg = 2.0;      // trajectory innovation per frame
  double mean_revert = 0.9;
  Vec3Cm origin_cm{0.0, 10.0, 55.0};
  double face_scale = 0.5;        // eye rendering scale inside the face patch

  // Throws std::invalid_argument when the gaze range or radii cannot fit.
  void validate() const;
};

enum class EyeSide { kLeft, kRight };

struct SequenceSample {
  std::vector<Tensor<float>> eye_left;   // T tensors, each 3 x 128 x 128 in [0,1]
  std::vector<Tensor<float>> eye_right;
  std::vector<Tensor<float>> face;
  std::vector<GazeAngles> labels;        // per-frame ground truth, radians
  Vec3Cm origin_cm;
  std::uint64_t sequence_id = 0;
  std::uint64_t seed = 0;

  int frames() const { return static_cast<int>(labels.size()); }
};

Tensor<float> render_eye(const GazeAngles& g, EyeSide side, const SceneParams& params,
                         std::uint64_t noise_seed);
Tensor<float> render_face(const GazeAngles& g, const SceneParams& params,
                          std::uint64_t noise_seed);

// Mean-reverting random-walk gaze trajectory rendered to frames; everything
// derives from `seed`, so the same call always reproduces the same bytes.
SequenceSample gen_sequence(int frames, const SceneParams& params, std::uint64_t seed,
                            std::uint64_t sequence_id);

// Adds one N(0, std_deg^2) offset pair to every frame label of the sequence,
// simulating a person-specific constant bias. Images are unchanged.
void offset_augment(SequenceSample& sample, double std_deg, Rng& rng);

// ---- on-disk format --------------------------------------------------------
//
// Sequence file ("STGZ"): magic, version u32 = 1, T u32, then per frame
// eye_L, eye_R, face as 3*128*128 little-endian f32 each, then T pairs of
// (pitch f32, yaw f32), then origin (x, y, z f32).

void write_sequence(const SequenceSample& sample, std::ostream& os);
void write_sequence(const SequenceSample& sample, const std::string& path);
SequenceSample read_sequence(std::istream& is);
SequenceSample read_sequence(const std::string& path);

// Manifest: UTF-8 JSON {version, split, params, seed, files[], T}.
struct DatasetManifest {
  int version = 1;
  std::string split;
  SceneParams params;
  std::uint64_t seed = 0;
  std::vector<std::string> files;
  int frames_per_sequence = 0;
};

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

// Checks that every listed file exists; throws with the missing filename.
void validate_manifest(const DatasetManifest& m, const std::string& dir);

// ---- sequence access --------------------------------------------------------

class SequenceSource {
 public:
  virtual ~SequenceSource() = default;
  virtual int size() const = 0;
  virtual int frames_per_sequence() const = 0;
  virtual SequenceSample sequence(int index) const = 0;
};

// Renders sequences on demand; sequence i uses derive_seed(global_seed, i),
// so contents match what dataset_write would put on disk for the same params.
class SyntheticSource final : public SequenceSource {
 public:
  SyntheticSource(SceneParams params, std::uint64_t global_seed, int count, int frames)
      : params_(std::move(params)), global_seed_(global_seed), count_(count), frames_(frames) {}

  int size() const override { return count_; }
  int frames_per_sequence() const override { return frames_; }
  SequenceSample sequence(int index) const override;

 private:
  SceneParams params_;
  std::uint64_t global_seed_;
  int count_;
  int frames_;
};

// Reads sequences from a manifest directory on demand.
class DiskSource final : public SequenceSource {
 public:
  DiskSource(DatasetManifest manifest, std::string dir);

  int size() const override { return static_cast<int>(manifest_.files.size()); }
  int frames_per_sequence() const override { return manifest_.frames_per_sequence; }
  SequenceSample sequence(int index) const override;

  const DatasetManifest& manifest() const { return manifest_; }

 private:
  DatasetManifest manifest_;
  std::string dir_;
};

}  // namespace stgaze
