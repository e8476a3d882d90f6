#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eventdistill/event_core.hpp"
#include "eventdistill/formats.hpp"

namespace eventdistill {

using Rgb = std::array<double, 3>;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

enum class Shape { rect, circle };

// Square-wave surface pattern carried along with the object. Brightness is
// scaled by (1 + amplitude) on one phase and (1 - amplitude) on the other.
// Coordinates are relative to the object's anchor; `angle` orients stripes.
struct Texture {
  enum class Kind { none, stripes, checker };

  Kind kind = Kind::none;
  double period = 8.0;  // px per full cycle
  double amplitude = 0.0;
  double angle = 0.0;  // radians

  double gain(double local_x, double local_y) const;
};

// A rect is anchored at its top-left corner with size = (width, height); a
// circle at its centre with size.x = radius.
struct SceneObject {
  Shape shape = Shape::rect;
  Rgb color{0.0, 0.0, 0.0};
  Vec2 position;
  Vec2 size;
  Vec2 velocity;  // px per second
  int object_id = 1;
  Texture texture;
  // Relative brightness change reached at the end of the scene; the colour
  // at time t is scaled by 1 + drift * t / duration.
  double drift = 0.0;
};

struct Scene {
  int width = 0;
  int height = 0;
  std::vector<SceneObject> objects;
  Rgb background{0.0, 0.0, 0.0};
  std::uint64_t duration_us = 0;
  std::uint64_t seed = 0;

  // Throws parameter errors for duplicate ids, non-finite positions or
  // colours outside [0, 1].
  void validate() const;
};

struct Frame {
  int width = 0;
  int height = 0;
  std::uint64_t timestamp_us = 0;
  std::vector<double> rgb;  // row-major, 3 channels interleaved

  const double* pixel(int y, int x) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  friend bool operator==(const Frame&, const Frame&) = default;
};

struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> ids;  // 0 = background

  int at(int y, int x) const { return ids[static_cast<std::size_t>(y) * width + x]; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline constexpr double kDefaultContrast = 0.2;
inline constexpr double kDefaultLogEps = 1e-3;
inline constexpr int kDeskResolution = 128;
inline constexpr int kSceneClasses = 4;  // background + three object classes

// Objects are drawn at position + velocity * t in ascending object_id order,
// so the highest id ends up on top.
Frame render_frame(const Scene& scene, std::uint64_t t_us);
LabelMap render_labels(const Scene& scene, std::uint64_t t_us);

// Ideal brightness-change sensor between two frames: per pixel,
// floor(|dL| / C) events of polarity sign(dL) at the linear crossing times,
// where L = ln(mean(R, G, B) + eps).
EventStream esim_events(const Frame& frame0, const Frame& frame1, double contrast,
                        double eps = kDefaultLogEps);

// Microsecond timestamp of crossing m (1-based) out of a log change of
// magnitude |dL| between t0 and t1: nearest microsecond, kept inside (t0, t1].
std::uint64_t crossing_time_us(std::uint64_t t0, std::uint64_t t1, int m, double contrast,
                               double abs_delta);

// Random scene with one object per class (ids 1..3): a bright rectangle, a
// dark disc and a mid-grey rectangle on a mid-grey background, all moving.
Scene random_scene(std::uint64_t seed, int width, int height);

struct SynthSample {
  Frame frame0;
  Frame frame1;
  EventStream events;
  LabelMap labels;  // rendered at frame0's timestamp
};

// Renders both frames (quantized to 8 bits so the files reproduce them
// exactly), the label map, and the events between the frames.
SynthSample simulate_scene(const Scene& scene, double contrast);

NetpbmImage frame_to_image(const Frame& frame);
Frame image_to_frame(const NetpbmImage& image, std::uint64_t timestamp_us);
NetpbmImage labels_to_image(const LabelMap& labels);
LabelMap image_to_labels(const NetpbmImage& image);

struct ManifestEntry {
  std::filesystem::path frame0;
  std::filesystem::path frame1;
  std::filesystem::path events;
  std::filesystem::path labels;
  std::optional<std::filesystem::path> teacher;  // optional fifth column (FTN1)
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
};

inline constexpr const char* kManifestName = "manifest.txt";

// Entry paths are stored relative to the manifest's directory.
Manifest read_manifest(const std::filesystem::path& dir);
void write_manifest(const Manifest& manifest);

struct DatasetOptions {
  std::size_t scenes = 0;
  std::uint64_t seed = 0;
  int width = kDeskResolution;
  int height = kDeskResolution;
  double contrast = kDefaultContrast;
};

Manifest generate_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir);

// Same scenes as generate_dataset, kept in memory.
std::vector<SynthSample> generate_samples(const DatasetOptions& options);

struct LoadedSample {
  Frame frame0;
  EventStream events;
  LabelMap labels;
  std::optional<Tensor> teacher;
};

LoadedSample load_sample(const Manifest& manifest, std::size_t index);

}  // namespace eventdistill
