#include "eventdistill/event_core.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "eventdistill/error.hpp"

namespace eventdistill {

EventStream::EventStream(int width, int height, std::vector<EventRecord> events)
    : width_(width), height_(height), events_(std::move(events)) {
  if (width < 0 || height < 0 || width > 65536 || height > 65536) {
    fail(ErrorKind::dimension, "invalid sensor geometry " + std::to_string(width) + "x" +
                                   std::to_string(height));
  }
  for (std::size_t i = 0; i < events_.size(); ++i) {
    const EventRecord& e = events_[i];
    if (e.x >= width_ || e.y >= height_) {
      fail(ErrorKind::parameter, "event " + std::to_string(i) + " at (" + std::to_string(e.x) +
                                     "," + std::to_string(e.y) + ") outside " +
                                     std::to_string(width) + "x" + std::to_string(height));
    }
    if (e.p != 1 && e.p != -1) {
      fail(ErrorKind::parameter, "event " + std::to_string(i) + " has polarity " +
                                     std::to_string(e.p) + ", expected -1 or +1");
    }
    if (i > 0 && e.t < events_[i - 1].t) {
      fail(ErrorKind::parameter, "events not sorted by timestamp at index " + std::to_string(i));
    }
  }
}

WindowSpec WindowSpec::fixed_duration(std::int64_t duration_us) {
  if (duration_us <= 0) fail(ErrorKind::parameter, "window duration must be > 0 us");
  WindowSpec spec;
  spec.mode = Mode::fixed_duration;
  spec.duration_us = static_cast<std::uint64_t>(duration_us);
  return spec;
}

WindowSpec WindowSpec::fixed_count(std::int64_t count) {
  if (count <= 0) fail(ErrorKind::parameter, "window event count must be > 0");
  WindowSpec spec;
  spec.mode = Mode::fixed_count;
  spec.count = static_cast<std::size_t>(count);
  return spec;
}

EventStream sample_window(const EventStream& stream, const WindowSpec& window,
                          std::uint64_t anchor_us) {
  const auto events = stream.events();
  const auto by_time = [](const EventRecord& e, std::uint64_t t) { return e.t < t; };
  const auto time_before = [](std::uint64_t t, const EventRecord& e) { return t < e.t; };

  std::vector<EventRecord> selected;
  if (window.mode == WindowSpec::Mode::fixed_duration) {
    if (window.duration_us == 0) fail(ErrorKind::parameter, "window duration must be > 0 us");
    const auto first = std::lower_bound(events.begin(), events.end(), anchor_us, by_time);
    const std::uint64_t end_us = anchor_us + window.duration_us;
    const auto last = std::lower_bound(first, events.end(), end_us, by_time);
    selected.assign(first, last);
  } else {
    if (window.count == 0) fail(ErrorKind::parameter, "window event count must be > 0");
    const auto last = std::upper_bound(events.begin(), events.end(), anchor_us, time_before);
    const auto available = static_cast<std::size_t>(last - events.begin());
    const std::size_t take = std::min(available, window.count);
    selected.assign(last - static_cast<std::ptrdiff_t>(take), last);
  }
  return EventStream(stream.width(), stream.height(), std::move(selected));
}

EventVolume::EventVolume(int width, int height, int bins)
    : EventVolume(width, height, bins,
                  std::vector<double>(static_cast<std::size_t>(std::max(width, 0)) *
                                          std::max(height, 0) * std::max(bins, 0),
                                      0.0)) {}

EventVolume::EventVolume(int width, int height, int bins, std::vector<double> data)
    : width_(width), height_(height), bins_(bins), data_(std::move(data)) {
  if (width < 0 || height < 0 || bins < 1) {
    fail(ErrorKind::dimension, "invalid volume shape " + std::to_string(height) + "x" +
                                   std::to_string(width) + "x" + std::to_string(bins));
  }
  if (data_.size() != static_cast<std::size_t>(width) * height * bins) {
    fail(ErrorKind::dimension, "volume payload does not match its shape");
  }
}

double EventVolume::sum() const {
  double total = 0.0;
  for (double v : data_) total += v;
  return total;
}

EventVolume voxelize(const EventStream& stream, int bins) {
  if (bins < 1) fail(ErrorKind::parameter, "bins must be >= 1");
  EventVolume volume(stream.width(), stream.height(), bins);
  const auto events = stream.events();
  if (events.empty()) return volume;

  const std::uint64_t t_first = events.front().t;
  const std::uint64_t span_us = events.back().t - t_first;
  auto cells = volume.data();

  // Events sharing a timestamp share their bin weights. Summing their
  // polarities per pixel as integers first makes the result independent of
  // how ties are ordered.
  std::vector<std::pair<std::size_t, int>> run;
  std::size_t begin = 0;
  while (begin < events.size()) {
    std::size_t end = begin + 1;
    while (end < events.size() && events[end].t == events[begin].t) ++end;

    double t_star = 0.0;
    if (span_us > 0 && bins > 1) {
      t_star = static_cast<double>(bins - 1) * static_cast<double>(events[begin].t - t_first) /
               static_cast<double>(span_us);
    }
    const int lower = std::min(static_cast<int>(std::floor(t_star)), bins - 1);
    const int upper = std::min(lower + 1, bins - 1);
    const double w_upper = upper == lower ? 0.0 : t_star - lower;
    const double w_lower = 1.0 - w_upper;

    run.clear();
    for (std::size_t i = begin; i < end; ++i) {
      const EventRecord& e = events[i];
      run.emplace_back(static_cast<std::size_t>(e.y) * stream.width() + e.x, e.p);
    }
    std::sort(run.begin(), run.end());

    for (std::size_t i = 0; i < run.size();) {
      const std::size_t pixel = run[i].first;
      int polarity_sum = 0;
      for (; i < run.size() && run[i].first == pixel; ++i) polarity_sum += run[i].second;
      if (polarity_sum == 0) continue;
      const std::size_t base = pixel * bins;
      cells[base + lower] += polarity_sum * w_lower;
      if (w_upper > 0.0) cells[base + upper] += polarity_sum * w_upper;
    }
    begin = end;
  }
  return volume;
}

DensityMap::DensityMap(int rows, int cols, int patch, std::vector<double> data)
    : rows_(rows), cols_(cols), patch_(patch), data_(std::move(data)) {
  if (data_.size() != static_cast<std::size_t>(rows) * cols) {
    fail(ErrorKind::dimension, "density payload does not match its shape");
  }
}

DensityMap density_map(const EventVolume& volume, int patch) {
  if (patch < 1) fail(ErrorKind::parameter, "patch size must be >= 1");
  if (volume.height() % patch != 0 || volume.width() % patch != 0) {
    fail(ErrorKind::dimension, "volume " + std::to_string(volume.height()) + "x" +
                                   std::to_string(volume.width()) +
                                   " is not divisible by patch " + std::to_string(patch));
  }
  const int rows = volume.height() / patch;
  const int cols = volume.width() / patch;
  std::vector<double> density(static_cast<std::size_t>(rows) * cols, 0.0);
  for (int mu = 0; mu < rows; ++mu) {
    for (int nu = 0; nu < cols; ++nu) {
      double acc = 0.0;
      for (int i = mu * patch; i < (mu + 1) * patch; ++i) {
        for (int j = nu * patch; j < (nu + 1) * patch; ++j) {
          for (int b = 0; b < volume.bins(); ++b) acc += std::abs(volume.at(i, j, b));
        }
      }
      density[static_cast<std::size_t>(mu) * cols + nu] = acc;
    }
  }
  return DensityMap(rows, cols, patch, std::move(density));
}

ActivationMask::ActivationMask(int rows, int cols, double tau, std::vector<std::uint8_t> active)
    : rows_(rows), cols_(cols), tau_(tau), active_(std::move(active)) {
  if (active_.size() != static_cast<std::size_t>(rows) * cols) {
    fail(ErrorKind::dimension, "mask payload does not match its shape");
  }
  for (auto& a : active_) a = a != 0 ? 1 : 0;
}

ActivationMask ActivationMask::full(int rows, int cols) {
  return ActivationMask(rows, cols, 0.0,
                        std::vector<std::uint8_t>(static_cast<std::size_t>(rows) * cols, 1));
}

std::size_t ActivationMask::active_count() const {
  return static_cast<std::size_t>(std::count(active_.begin(), active_.end(), std::uint8_t{1}));
}

ActivationMask activation_mask(const DensityMap& density, double tau) {
  if (!(tau >= 0.0)) fail(ErrorKind::parameter, "tau must be >= 0");
  std::vector<std::uint8_t> active(density.data().size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = density.data()[i] >= tau ? 1 : 0;
  return ActivationMask(density.rows(), density.cols(), tau, std::move(active));
}

}  // namespace eventdistill
