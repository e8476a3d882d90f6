#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "eventdistill/event_core.hpp"
#include "eventdistill/formats.hpp"
#include "eventdistill/synth.hpp"

namespace eventdistill {

// H' x W' x D token grid. Tokens are flattened row-major: token index
// t = mu * cols + nu, so nu varies fastest within a row mu.
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(int rows, int cols, int dim);
  FeatureGrid(int rows, int cols, int dim, std::vector<double> data);

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int dim() const noexcept { return dim_; }
  std::size_t tokens() const noexcept { return static_cast<std::size_t>(rows_) * cols_; }

  std::span<const double> token(std::size_t t) const {
    return {data_.data() + t * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> token(std::size_t t) {
    return {data_.data() + t * dim_, static_cast<std::size_t>(dim_)};
  }
  double at(int mu, int nu, int d) const {
    return data_[(static_cast<std::size_t>(mu) * cols_ + nu) * dim_ + d];
  }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  bool same_shape(const FeatureGrid& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && dim_ == other.dim_;
  }

  friend bool operator==(const FeatureGrid&, const FeatureGrid&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  int dim_ = 0;
  std::vector<double> data_;
};

Tensor to_tensor(const FeatureGrid& grid, Dtype dtype = Dtype::f64);
FeatureGrid feature_grid_from(const Tensor& tensor);

void save_features(const FeatureGrid& grid, const std::filesystem::path& path,
                   Dtype dtype = Dtype::f64);
FeatureGrid load_teacher_features(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Student encoder: the same small MLP applied to every P x P x B patch of the
// event volume, producing one D-dimensional token per patch.
// ---------------------------------------------------------------------------
struct StudentShape {
  int patch = kDefaultPatch;
  int bins = kDefaultBins;
  int hidden = 32;  // 0 selects a single affine map
  int dim = 16;

  int input_size() const { return patch * patch * bins; }
  friend bool operator==(const StudentShape&, const StudentShape&) = default;
};

struct DenseLayer {
  int inputs = 0;
  int outputs = 0;
  std::vector<double> weight;  // outputs x inputs, row-major
  std::vector<double> bias;    // outputs

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// One layer when hidden == 0, else affine -> tanh -> affine. The same type
// carries parameter gradients.
struct StudentParams {
  StudentShape shape;
  std::vector<DenseLayer> layers;

  std::size_t parameter_count() const;
  void validate() const;
  friend bool operator==(const StudentParams&, const StudentParams&) = default;
};

// Xavier-uniform weights, zero biases.
StudentParams init_student(const StudentShape& shape, std::uint64_t seed);
StudentParams zeros_like(const StudentParams& params);

// Patch (mu, nu) flattened row-major over (y, x, b).
void extract_patch(const EventVolume& volume, int patch, int mu, int nu, std::span<double> out);

FeatureGrid student_forward(const StudentParams& params, const EventVolume& volume);

// Gradients of sum(upstream * forward(volume)) with respect to every weight
// and bias.
StudentParams student_backward(const StudentParams& params, const EventVolume& volume,
                               const FeatureGrid& upstream);

// ---------------------------------------------------------------------------
// Synthetic frozen teacher. Each patch is summarised by
// [mean R, mean G, mean B, mu / H', nu / W'], projected to D dimensions by a
// seeded orthonormal matrix and box-smoothed over the token grid.
// ---------------------------------------------------------------------------
inline constexpr int kDescriptorSize = 5;

struct TeacherSpec {
  int dim = 16;
  std::uint64_t seed = 0;
  int radius = 1;
  std::vector<double> projection;  // dim x 5, row-major

  // Columns are orthonormal when dim >= 5, rows when dim < 5.
  static TeacherSpec create(int dim, std::uint64_t seed, int radius = 1);
};

std::array<double, kDescriptorSize> teacher_descriptor(const Frame& frame, int patch, int mu,
                                                       int nu);

FeatureGrid teacher_forward(const TeacherSpec& spec, const Frame& frame, int patch);

// ---------------------------------------------------------------------------
// Cosine similarity of every token with an anchor token.
// ---------------------------------------------------------------------------
struct SimilarityMap {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  double at(int mu, int nu) const { return values[static_cast<std::size_t>(mu) * cols + nu]; }
};

SimilarityMap similarity_map(const FeatureGrid& grid, int anchor_mu, int anchor_nu);

// Linear rescale of [-1, 1] to [0, 255].
NetpbmImage similarity_image(const SimilarityMap& map);

}  // namespace eventdistill
