#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "eventdistill/error.hpp"
#include "eventdistill/features.hpp"
#include "eventdistill/synth.hpp"

namespace eventdistill {

// Per-token class ids, same grid as the feature tokens.
struct TokenLabels {
  int rows = 0;
  int cols = 0;
  std::vector<int> classes;

  friend bool operator==(const TokenLabels&, const TokenLabels&) = default;
};

// Majority class of each P x P block; ties go to the lowest id.
TokenLabels downsample_labels(const LabelMap& labels, int patch);

// Linear head on frozen tokens: scores = W^T feature + bias.
struct ProbeModel {
  int dim = 0;
  int classes = 0;
  double alpha = 0.0;
  std::vector<double> weight;  // dim x classes, row-major
  std::vector<double> bias;    // classes
};

inline constexpr double kDefaultRidgeAlpha = 1e-3;

// Ridge regression of one-hot targets on [feature, 1]:
//   (X^T X / n + alpha I) W = X^T Y / n
// The 1/n scaling makes the solution invariant to duplicating the data.
ProbeModel fit_probe(std::span<const FeatureGrid> features, std::span<const TokenLabels> labels,
                     int classes, double alpha = kDefaultRidgeAlpha);

// Argmax over class scores, ties to the lowest id.
TokenLabels predict(const ProbeModel& model, const FeatureGrid& features);

struct SegmentationScore {
  std::vector<double> per_class_iou;  // NaN for classes absent from both pred and gt
  double miou = 0.0;
  double acc = 0.0;  // mean recall over classes present in gt
};

// Scores accumulated over one confusion matrix spanning every sample.
SegmentationScore miou(std::span<const TokenLabels> pred, std::span<const TokenLabels> gt,
                       int classes);
SegmentationScore miou(const TokenLabels& pred, const TokenLabels& gt, int classes);

// k = round(1 / fraction).
std::size_t subsample_stride(double fraction);

// Keeps every k-th item starting at index 0.
template <typename T>
std::vector<T> stride_subsample(const std::vector<T>& items, double fraction) {
  const std::size_t stride = subsample_stride(fraction);
  std::vector<T> kept;
  for (std::size_t i = 0; i < items.size(); i += stride) kept.push_back(items[i]);
  return kept;
}

Manifest stride_subsample(const Manifest& manifest, double fraction);

// A volume plus its token labels, ready for frozen-feature probing.
struct ProbeSample {
  EventVolume volume;
  TokenLabels labels;
};

// Extracts frozen student features, fits the head on `train` and scores it
// on `test`.
SegmentationScore evaluate_probe(const StudentParams& student, std::span<const ProbeSample> train,
                                 std::span<const ProbeSample> test, int classes, double alpha);

}  // namespace eventdistill
