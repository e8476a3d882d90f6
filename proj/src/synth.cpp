#include "eventdistill/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "eventdistill/error.hpp"
#include "eventdistill/parallel.hpp"
#include "eventdistill/rng.hpp"

namespace eventdistill {
namespace {

constexpr std::uint64_t kSceneDurationUs = 50'000;

Vec2 position_at(const SceneObject& object, std::uint64_t t_us) {
  const double seconds = static_cast<double>(t_us) * 1e-6;
  return {object.position.x + object.velocity.x * seconds,
          object.position.y + object.velocity.y * seconds};
}

bool covers(const SceneObject& object, const Vec2& at, double px, double py) {
  if (object.shape == Shape::rect) {
    return px >= at.x && px < at.x + object.size.x && py >= at.y && py < at.y + object.size.y;
  }
  const double dx = px - at.x;
  const double dy = py - at.y;
  return dx * dx + dy * dy <= object.size.x * object.size.x;
}

// Objects sorted by id; the last covering one is on top.
std::vector<const SceneObject*> paint_order(const Scene& scene) {
  std::vector<const SceneObject*> order;
  for (const auto& o : scene.objects) order.push_back(&o);
  std::sort(order.begin(), order.end(),
            [](const SceneObject* a, const SceneObject* b) { return a->object_id < b->object_id; });
  return order;
}

void check_time(const Scene& scene, std::uint64_t t_us) {
  if (t_us > scene.duration_us) {
    fail(ErrorKind::parameter, "render time " + std::to_string(t_us) + " us outside [0, " +
                                   std::to_string(scene.duration_us) + "]");
  }
}

template <typename Visit>
void rasterize(const Scene& scene, std::uint64_t t_us, Visit&& visit) {
  scene.validate();
  check_time(scene, t_us);
  const auto order = paint_order(scene);
  std::vector<Vec2> positions;
  for (const auto* o : order) positions.push_back(position_at(*o, t_us));
  for (int y = 0; y < scene.height; ++y) {
    for (int x = 0; x < scene.width; ++x) {
      std::size_t top = order.size();
      for (std::size_t k = 0; k < order.size(); ++k) {
        if (covers(*order[k], positions[k], x + 0.5, y + 0.5)) top = k;
      }
      if (top == order.size()) {
        visit(y, x, nullptr, Vec2{});
      } else {
        visit(y, x, order[top], Vec2{x + 0.5 - positions[top].x, y + 0.5 - positions[top].y});
      }
    }
  }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

double level(Rng& rng, int lo, int hi) {
  return static_cast<double>(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)))) /
         255.0;
}

Rgb tinted(Rng& rng, int lo, int hi) {
  const double base = level(rng, lo, hi);
  Rgb c;
  for (auto& ch : c) ch = quantize(base + (static_cast<double>(rng.below(41)) - 20.0) / 255.0);
  return c;
}

Vec2 random_velocity(Rng& rng, double min_px, double max_px) {
  const double angle = rng.uniform(0.0, 6.283185307179586);
  const double displacement = rng.uniform(min_px, max_px);
  const double speed = displacement / (static_cast<double>(kSceneDurationUs) * 1e-6);
  return {speed * std::cos(angle), speed * std::sin(angle)};
}

}  // namespace

double Texture::gain(double local_x, double local_y) const {
  if (kind == Kind::none || amplitude == 0.0) return 1.0;
  const double half = period / 2.0;
  long long phase = 0;
  if (kind == Kind::stripes) {
    const double u = local_x * std::cos(angle) + local_y * std::sin(angle);
    phase = static_cast<long long>(std::floor(u / half));
  } else {
    phase = static_cast<long long>(std::floor(local_x / half)) + static_cast<long long>(std::floor(local_y / half));
  }
  return (phase % 2 == 0) ? 1.0 + amplitude : 1.0 - amplitude;
}

void Scene::validate() const {
  if (width <= 0 || height <= 0) fail(ErrorKind::dimension, "scene geometry must be positive");
  std::set<int> ids;
  for (const auto& o : objects) {
    if (o.object_id < 1 || o.object_id > 255) {
      fail(ErrorKind::parameter, "object id must lie in [1, 255]");
    }
    if (!ids.insert(o.object_id).second) {
      fail(ErrorKind::parameter, "duplicate object id " + std::to_string(o.object_id));
    }
    if (!std::isfinite(o.position.x) || !std::isfinite(o.position.y) ||
        !std::isfinite(o.velocity.x) || !std::isfinite(o.velocity.y) ||
        !std::isfinite(o.size.x) || !std::isfinite(o.size.y)) {
      fail(ErrorKind::parameter, "object " + std::to_string(o.object_id) + " is not finite");
    }
    if (o.texture.kind != Texture::Kind::none &&
        !(o.texture.period > 0.0 && o.texture.amplitude >= 0.0 && o.texture.amplitude <= 1.0 &&
          std::isfinite(o.texture.angle))) {
      fail(ErrorKind::parameter, "object " + std::to_string(o.object_id) + " has an invalid texture");
    }
    if (!(o.drift >= -1.0 && std::isfinite(o.drift))) {
      fail(ErrorKind::parameter, "object " + std::to_string(o.object_id) + " drift must be finite and >= -1");
    }
    for (double ch : o.color) {
      if (!(ch >= 0.0 && ch <= 1.0)) fail(ErrorKind::parameter, "object colour outside [0, 1]");
    }
  }
  for (double ch : background) {
    if (!(ch >= 0.0 && ch <= 1.0)) fail(ErrorKind::parameter, "background colour outside [0, 1]");
  }
}

Frame render_frame(const Scene& scene, std::uint64_t t_us) {
  Frame frame;
  frame.width = scene.width;
  frame.height = scene.height;
  frame.timestamp_us = t_us;
  frame.rgb.resize(static_cast<std::size_t>(scene.width) * scene.height * 3);
  rasterize(scene, t_us, [&](int y, int x, const SceneObject* top, Vec2 local) {
    double* px = frame.rgb.data() + (static_cast<std::size_t>(y) * scene.width + x) * 3;
    if (top == nullptr) {
      std::copy(scene.background.begin(), scene.background.end(), px);
      return;
    }
    const double progress =
        scene.duration_us > 0 ? static_cast<double>(t_us) / static_cast<double>(scene.duration_us) : 0.0;
    const double gain = top->texture.gain(local.x, local.y) * (1.0 + top->drift * progress);
    for (int c = 0; c < 3; ++c) px[c] = std::clamp(top->color[c] * gain, 0.0, 1.0);
  });
  return frame;
}

LabelMap render_labels(const Scene& scene, std::uint64_t t_us) {
  LabelMap labels;
  labels.width = scene.width;
  labels.height = scene.height;
  labels.ids.resize(static_cast<std::size_t>(scene.width) * scene.height);
  rasterize(scene, t_us, [&](int y, int x, const SceneObject* top, Vec2) {
    labels.ids[static_cast<std::size_t>(y) * scene.width + x] =
        top != nullptr ? static_cast<std::uint8_t>(top->object_id) : 0;
  });
  return labels;
}

std::uint64_t crossing_time_us(std::uint64_t t0, std::uint64_t t1, int m, double contrast,
                               double abs_delta) {
  const double fraction = m * contrast / abs_delta;
  const double offset = std::round(fraction * static_cast<double>(t1 - t0));
  const auto clamped = std::clamp<double>(offset, 1.0, static_cast<double>(t1 - t0));
  return t0 + static_cast<std::uint64_t>(clamped);
}

EventStream esim_events(const Frame& frame0, const Frame& frame1, double contrast, double eps) {
  if (frame0.width != frame1.width || frame0.height != frame1.height ||
      frame0.rgb.size() != frame1.rgb.size()) {
    fail(ErrorKind::dimension, "frames differ in geometry");
  }
  if (frame0.timestamp_us >= frame1.timestamp_us) {
    fail(ErrorKind::parameter, "frame0 must precede frame1");
  }
  if (!(contrast > 0.0)) fail(ErrorKind::parameter, "contrast threshold must be > 0");
  if (!(eps > 0.0)) fail(ErrorKind::parameter, "log offset eps must be > 0");

  const std::uint64_t t0 = frame0.timestamp_us;
  const std::uint64_t t1 = frame1.timestamp_us;
  std::vector<EventRecord> events;
  for (int y = 0; y < frame0.height; ++y) {
    for (int x = 0; x < frame0.width; ++x) {
      const double* a = frame0.pixel(y, x);
      const double* b = frame1.pixel(y, x);
      const double l0 = std::log((a[0] + a[1] + a[2]) / 3.0 + eps);
      const double l1 = std::log((b[0] + b[1] + b[2]) / 3.0 + eps);
      const double delta = l1 - l0;
      const double magnitude = std::abs(delta);
      const auto count = static_cast<int>(std::floor(magnitude / contrast));
      const std::int8_t polarity = delta > 0.0 ? 1 : -1;
      for (int m = 1; m <= count; ++m) {
        events.push_back({static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), polarity,
                          crossing_time_us(t0, t1, m, contrast, magnitude)});
      }
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const EventRecord& l, const EventRecord& r) { return l.t < r.t; });
  return EventStream(frame0.width, frame0.height, std::move(events));
}

Scene random_scene(std::uint64_t seed, int width, int height) {
  Rng rng(seed);
  Scene scene;
  scene.width = width;
  scene.height = height;
  scene.duration_us = kSceneDurationUs;
  scene.seed = seed;
  scene.background = tinted(rng, 90, 120);

  const double scale = std::min(width, height) / 128.0;
  const auto place = [&](double extent_x, double extent_y) {
    return Vec2{rng.uniform(-0.25 * extent_x, width - 0.75 * extent_x),
                rng.uniform(-0.25 * extent_y, height - 0.75 * extent_y)};
  };

  SceneObject bright;
  bright.shape = Shape::rect;
  bright.color = tinted(rng, 200, 240);
  bright.size = {rng.uniform(39.0, 73.0) * scale, rng.uniform(39.0, 73.0) * scale};
  bright.velocity = random_velocity(rng, 4.0 * scale, 10.0 * scale);
  bright.object_id = 1;
  bright.drift = -0.35;
  bright.texture = {Texture::Kind::stripes, rng.uniform(6.0, 10.0) * scale, 0.25,
                    rng.uniform(0.0, 3.141592653589793)};

  SceneObject disc;
  disc.shape = Shape::circle;
  disc.color = tinted(rng, 10, 35);
  disc.size = {rng.uniform(20.0, 36.0) * scale, 0.0};
  disc.velocity = random_velocity(rng, 4.0 * scale, 10.0 * scale);
  disc.object_id = 2;
  disc.drift = 0.8;
  disc.texture = {Texture::Kind::checker, rng.uniform(8.0, 12.0) * scale, 0.5, 0.0};

  SceneObject mid;
  mid.shape = Shape::rect;
  mid.color = tinted(rng, 150, 175);
  mid.size = {rng.uniform(28.0, 56.0) * scale, rng.uniform(28.0, 56.0) * scale};
  mid.velocity = random_velocity(rng, 4.0 * scale, 10.0 * scale);
  mid.object_id = 3;
  mid.drift = 0.35;
  mid.texture = {Texture::Kind::stripes, rng.uniform(12.0, 18.0) * scale, 0.3,
                 rng.uniform(0.0, 3.141592653589793)};

  // Positions are redrawn until every object keeps at least half of its area
  // in the first frame, so each scene shows every class.
  const auto visible_enough = [&] {
    const LabelMap labels = render_labels(scene, 0);
    std::array<double, 4> seen{};
    for (const std::uint8_t id : labels.ids) seen[id] += 1.0;
    const double disc_area = 3.141592653589793 * disc.size.x * disc.size.x;
    return seen[1] >= 0.5 * bright.size.x * bright.size.y && seen[2] >= 0.5 * disc_area &&
           seen[3] >= 0.5 * mid.size.x * mid.size.y;
  };
  for (int attempt = 0; attempt < 256; ++attempt) {
    bright.position = place(bright.size.x, bright.size.y);
    const Vec2 corner = place(2.0 * disc.size.x, 2.0 * disc.size.x);
    disc.position = {corner.x + disc.size.x, corner.y + disc.size.x};
    mid.position = place(mid.size.x, mid.size.y);
    scene.objects = {bright, disc, mid};
    if (visible_enough()) break;
  }
  return scene;
}

SynthSample simulate_scene(const Scene& scene, double contrast) {
  SynthSample sample;
  sample.frame0 = render_frame(scene, 0);
  sample.frame1 = render_frame(scene, scene.duration_us);
  for (auto& v : sample.frame0.rgb) v = quantize(v);
  for (auto& v : sample.frame1.rgb) v = quantize(v);
  sample.labels = render_labels(scene, 0);
  sample.events = esim_events(sample.frame0, sample.frame1, contrast);
  return sample;
}

NetpbmImage frame_to_image(const Frame& frame) {
  NetpbmImage image;
  image.width = frame.width;
  image.height = frame.height;
  image.channels = 3;
  image.pixels.resize(frame.rgb.size());
  for (std::size_t i = 0; i < frame.rgb.size(); ++i) {
    image.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(frame.rgb[i], 0.0, 1.0) * 255.0));
  }
  return image;
}

Frame image_to_frame(const NetpbmImage& image, std::uint64_t timestamp_us) {
  if (image.channels != 3) fail(ErrorKind::format, "expected an RGB (P6) image");
  Frame frame;
  frame.width = image.width;
  frame.height = image.height;
  frame.timestamp_us = timestamp_us;
  frame.rgb.resize(image.pixels.size());
  for (std::size_t i = 0; i < image.pixels.size(); ++i) frame.rgb[i] = image.pixels[i] / 255.0;
  return frame;
}

NetpbmImage labels_to_image(const LabelMap& labels) {
  return NetpbmImage{labels.width, labels.height, 1, labels.ids};
}

LabelMap image_to_labels(const NetpbmImage& image) {
  if (image.channels != 1) fail(ErrorKind::format, "expected a gray (P5) label image");
  return LabelMap{image.width, image.height, image.pixels};
}

Manifest read_manifest(const std::filesystem::path& dir) {
  const Bytes bytes = read_file(dir / kManifestName);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  Manifest manifest;
  manifest.root = dir;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
      fields.push_back(line.substr(start, tab - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 4 && fields.size() != 5) {
      fail(ErrorKind::format, "manifest line " + std::to_string(line_no) +
                                  ": expected 4 or 5 tab-separated paths");
    }
    ManifestEntry entry{fields[0], fields[1], fields[2], fields[3], std::nullopt};
    if (fields.size() == 5) entry.teacher = fields[4];
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

void write_manifest(const Manifest& manifest) {
  std::ostringstream out;
  for (const auto& e : manifest.entries) {
    out << e.frame0.generic_string() << '\t' << e.frame1.generic_string() << '\t'
        << e.events.generic_string() << '\t' << e.labels.generic_string();
    if (e.teacher) out << '\t' << e.teacher->generic_string();
    out << '\n';
  }
  const std::string text = out.str();
  write_file(manifest.root / kManifestName,
             std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                           text.size()));
}

std::vector<SynthSample> generate_samples(const DatasetOptions& options) {
  std::vector<SynthSample> samples(options.scenes);
  parallel_for(options.scenes, [&](std::size_t i) {
    const Scene scene = random_scene(mix_seed(options.seed, i), options.width, options.height);
    samples[i] = simulate_scene(scene, options.contrast);
  });
  return samples;
}

Manifest generate_dataset(const DatasetOptions& options, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + out_dir.string() + ": " + ec.message());

  Manifest manifest;
  manifest.root = out_dir;
  manifest.entries.resize(options.scenes);
  parallel_for(options.scenes, [&](std::size_t i) {
    const Scene scene = random_scene(mix_seed(options.seed, i), options.width, options.height);
    const SynthSample sample = simulate_scene(scene, options.contrast);
    const std::string id = std::to_string(i);
    ManifestEntry entry{"frame0_" + id + ".ppm", "frame1_" + id + ".ppm",
                        "events_" + id + ".evt1", "labels_" + id + ".pgm", std::nullopt};
    write_file(out_dir / entry.frame0, encode_netpbm(frame_to_image(sample.frame0)));
    write_file(out_dir / entry.frame1, encode_netpbm(frame_to_image(sample.frame1)));
    write_file(out_dir / entry.events, encode_evt1(sample.events));
    write_file(out_dir / entry.labels, encode_netpbm(labels_to_image(sample.labels)));
    manifest.entries[i] = std::move(entry);
  });
  write_manifest(manifest);
  return manifest;
}

LoadedSample load_sample(const Manifest& manifest, std::size_t index) {
  const ManifestEntry& entry = manifest.entries.at(index);
  LoadedSample sample;
  sample.frame0 = image_to_frame(decode_netpbm(read_file(manifest.root / entry.frame0)), 0);
  sample.events = decode_evt1(read_file(manifest.root / entry.events));
  sample.labels = image_to_labels(decode_netpbm(read_file(manifest.root / entry.labels)));
  if (entry.teacher) sample.teacher = load_tensor(manifest.root / *entry.teacher);
  return sample;
}

}  // namespace eventdistill
