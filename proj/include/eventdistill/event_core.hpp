#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace eventdistill {

struct EventRecord {
  std::uint16_t x = 0;  // column
  std::uint16_t y = 0;  // row
  std::int8_t p = 1;    // polarity, -1 or +1
  std::uint64_t t = 0;  // microseconds

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

// Time-ordered events with sensor geometry. Construction validates polarity,
// bounds and ordering; the stream is immutable afterwards.
class EventStream {
 public:
  EventStream() = default;
  EventStream(int width, int height, std::vector<EventRecord> events = {});

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return events_.size(); }
  bool empty() const noexcept { return events_.empty(); }
  std::span<const EventRecord> events() const noexcept { return events_; }

  friend bool operator==(const EventStream&, const EventStream&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<EventRecord> events_;
};

struct WindowSpec {
  enum class Mode { fixed_duration, fixed_count };

  Mode mode = Mode::fixed_duration;
  std::uint64_t duration_us = 0;
  std::size_t count = 0;

  static WindowSpec fixed_duration(std::int64_t duration_us);
  static WindowSpec fixed_count(std::int64_t count);
};

// Duration mode keeps [anchor, anchor + duration); count mode keeps the
// `count` most recent events with t <= anchor. Order is preserved.
EventStream sample_window(const EventStream& stream, const WindowSpec& window,
                          std::uint64_t anchor_us);

// H x W x B signed accumulation, stored row-major as (y, x, b).
class EventVolume {
 public:
  EventVolume() = default;
  EventVolume(int width, int height, int bins);
  EventVolume(int width, int height, int bins, std::vector<double> data);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int bins() const noexcept { return bins_; }

  std::size_t index(int y, int x, int b) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * bins_ + b;
  }
  double at(int y, int x, int b) const noexcept { return data_[index(y, x, b)]; }
  double& at(int y, int x, int b) noexcept { return data_[index(y, x, b)]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  double sum() const;

  friend bool operator==(const EventVolume&, const EventVolume&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int bins_ = 0;
  std::vector<double> data_;
};

// Linear temporal interpolation over the stream's own time span.
EventVolume voxelize(const EventStream& stream, int bins);

class DensityMap {
 public:
  DensityMap() = default;
  DensityMap(int rows, int cols, int patch, std::vector<double> data);

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int patch() const noexcept { return patch_; }
  double at(int row, int col) const noexcept {
    return data_[static_cast<std::size_t>(row) * cols_ + col];
  }
  std::span<const double> data() const noexcept { return data_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  int patch_ = 0;
  std::vector<double> data_;
};

// D(mu, nu) = sum over the patch and all bins of |volume|.
DensityMap density_map(const EventVolume& volume, int patch);

class ActivationMask {
 public:
  ActivationMask() = default;
  ActivationMask(int rows, int cols, double tau, std::vector<std::uint8_t> active);

  // Mask with every token active; used when no event density is available.
  static ActivationMask full(int rows, int cols);

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  double tau() const noexcept { return tau_; }
  std::size_t tokens() const noexcept { return active_.size(); }
  bool active(std::size_t token) const noexcept { return active_[token] != 0; }
  bool active(int row, int col) const noexcept {
    return active_[static_cast<std::size_t>(row) * cols_ + col] != 0;
  }
  std::size_t active_count() const;
  std::span<const std::uint8_t> values() const noexcept { return active_; }

  friend bool operator==(const ActivationMask&, const ActivationMask&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  double tau_ = 0.0;
  std::vector<std::uint8_t> active_;
};

// M = 1 iff D >= tau.
ActivationMask activation_mask(const DensityMap& density, double tau);

inline constexpr int kDefaultBins = 3;
inline constexpr int kDefaultPatch = 16;
inline constexpr double kDefaultTau = 64.0;

}  // namespace eventdistill
