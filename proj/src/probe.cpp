#include "eventdistill/probe.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <string>

#include "eventdistill/parallel.hpp"

namespace eventdistill {

TokenLabels downsample_labels(const LabelMap& labels, int patch) {
  if (patch < 1) fail(ErrorKind::parameter, "patch size must be >= 1");
  if (labels.height % patch != 0 || labels.width % patch != 0) {
    fail(ErrorKind::dimension, "label map is not divisible by patch " + std::to_string(patch));
  }
  TokenLabels out;
  out.rows = labels.height / patch;
  out.cols = labels.width / patch;
  out.classes.resize(static_cast<std::size_t>(out.rows) * out.cols);
  std::vector<int> counts(256);
  for (int mu = 0; mu < out.rows; ++mu) {
    for (int nu = 0; nu < out.cols; ++nu) {
      std::fill(counts.begin(), counts.end(), 0);
      for (int y = mu * patch; y < (mu + 1) * patch; ++y) {
        for (int x = nu * patch; x < (nu + 1) * patch; ++x) ++counts[labels.at(y, x)];
      }
      // max_element returns the first maximum, i.e. the lowest id on ties.
      out.classes[static_cast<std::size_t>(mu) * out.cols + nu] =
          static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  return out;
}

ProbeModel fit_probe(std::span<const FeatureGrid> features, std::span<const TokenLabels> labels,
                     int classes, double alpha) {
  if (classes < 2) fail(ErrorKind::parameter, "probe needs at least two classes");
  if (!(alpha >= 0.0)) fail(ErrorKind::parameter, "ridge alpha must be >= 0");
  if (features.size() != labels.size() || features.empty()) {
    fail(ErrorKind::parameter, "probe needs matching, non-empty feature and label lists");
  }
  const int dim = features[0].dim();
  std::size_t n = 0;
  for (std::size_t s = 0; s < features.size(); ++s) {
    if (features[s].dim() != dim || features[s].rows() != labels[s].rows ||
        features[s].cols() != labels[s].cols) {
      fail(ErrorKind::dimension, "probe sample " + std::to_string(s) + " has mismatched grids");
    }
    n += features[s].tokens();
  }

  // Normal equations accumulated in sample order for determinism.
  const int width = dim + 1;
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(width, width);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(width, classes);
  std::vector<std::size_t> class_counts(classes, 0);
  Eigen::VectorXd x(width);
  for (std::size_t s = 0; s < features.size(); ++s) {
    for (std::size_t t = 0; t < features[s].tokens(); ++t) {
      const int c = labels[s].classes[t];
      if (c < 0 || c >= classes) {
        fail(ErrorKind::parameter, "label " + std::to_string(c) + " outside [0, " +
                                       std::to_string(classes) + ")");
      }
      ++class_counts[c];
      const auto token = features[s].token(t);
      for (int d = 0; d < dim; ++d) x[d] = token[d];
      x[dim] = 1.0;
      gram.selfadjointView<Eigen::Lower>().rankUpdate(x);
      rhs.col(c) += x;
    }
  }
  for (int c = 0; c < classes; ++c) {
    if (class_counts[c] == 0) {
      fail(ErrorKind::parameter, "class " + std::to_string(c) + " is absent from the probe training set");
    }
  }
  gram = gram.selfadjointView<Eigen::Lower>();
  const double inv_n = 1.0 / static_cast<double>(n);
  gram *= inv_n;
  rhs *= inv_n;
  gram.diagonal().array() += alpha;

  const Eigen::LDLT<Eigen::MatrixXd> solver(gram);
  const Eigen::VectorXd pivots = solver.vectorD().cwiseAbs();
  const double largest = pivots.maxCoeff();
  if (solver.info() != Eigen::Success || !(largest > 0.0) ||
      pivots.minCoeff() <= 1e-12 * largest) {
    fail(ErrorKind::parameter, "probe normal equations are singular; use alpha > 0");
  }
  const Eigen::MatrixXd solution = solver.solve(rhs);

  ProbeModel model;
  model.dim = dim;
  model.classes = classes;
  model.alpha = alpha;
  model.weight.resize(static_cast<std::size_t>(dim) * classes);
  model.bias.resize(classes);
  for (int d = 0; d < dim; ++d) {
    for (int c = 0; c < classes; ++c) model.weight[static_cast<std::size_t>(d) * classes + c] = solution(d, c);
  }
  for (int c = 0; c < classes; ++c) model.bias[c] = solution(dim, c);
  return model;
}

TokenLabels predict(const ProbeModel& model, const FeatureGrid& features) {
  if (features.dim() != model.dim) fail(ErrorKind::dimension, "feature dim does not match the probe");
  TokenLabels out{features.rows(), features.cols(), std::vector<int>(features.tokens())};
  std::vector<double> scores(model.classes);
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    const auto token = features.token(t);
    scores.assign(model.bias.begin(), model.bias.end());
    for (int d = 0; d < model.dim; ++d) {
      for (int c = 0; c < model.classes; ++c) {
        scores[c] += token[d] * model.weight[static_cast<std::size_t>(d) * model.classes + c];
      }
    }
    out.classes[t] = static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  }
  return out;
}

SegmentationScore miou(std::span<const TokenLabels> pred, std::span<const TokenLabels> gt,
                       int classes) {
  if (pred.size() != gt.size()) fail(ErrorKind::parameter, "prediction and ground-truth counts differ");
  if (classes < 1) fail(ErrorKind::parameter, "class count must be >= 1");
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0), support(classes, 0);
  for (std::size_t s = 0; s < pred.size(); ++s) {
    if (pred[s].classes.size() != gt[s].classes.size()) {
      fail(ErrorKind::dimension, "prediction and ground truth differ in size");
    }
    for (std::size_t t = 0; t < gt[s].classes.size(); ++t) {
      const int p = pred[s].classes[t];
      const int g = gt[s].classes[t];
      if (p < 0 || p >= classes || g < 0 || g >= classes) {
        fail(ErrorKind::parameter, "class id outside [0, " + std::to_string(classes) + ")");
      }
      ++support[g];
      if (p == g) {
        ++tp[g];
      } else {
        ++fp[p];
        ++fn[g];
      }
    }
  }
  SegmentationScore score;
  score.per_class_iou.assign(classes, std::numeric_limits<double>::quiet_NaN());
  double iou_sum = 0.0;
  double recall_sum = 0.0;
  int iou_classes = 0;
  int gt_classes = 0;
  for (int c = 0; c < classes; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom > 0) {
      score.per_class_iou[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
      iou_sum += score.per_class_iou[c];
      ++iou_classes;
    }
    if (support[c] > 0) {
      recall_sum += static_cast<double>(tp[c]) / static_cast<double>(support[c]);
      ++gt_classes;
    }
  }
  score.miou = iou_classes > 0 ? iou_sum / iou_classes : 0.0;
  score.acc = gt_classes > 0 ? recall_sum / gt_classes : 0.0;
  return score;
}

SegmentationScore miou(const TokenLabels& pred, const TokenLabels& gt, int classes) {
  return miou(std::span<const TokenLabels>(&pred, 1), std::span<const TokenLabels>(&gt, 1), classes);
}

std::size_t subsample_stride(double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) fail(ErrorKind::parameter, "fraction must lie in (0, 1]");
  return static_cast<std::size_t>(std::llround(1.0 / fraction));
}

Manifest stride_subsample(const Manifest& manifest, double fraction) {
  return Manifest{manifest.root, stride_subsample(manifest.entries, fraction)};
}

SegmentationScore evaluate_probe(const StudentParams& student, std::span<const ProbeSample> train,
                                 std::span<const ProbeSample> test, int classes, double alpha) {
  const auto encode = [&](std::span<const ProbeSample> samples) {
    std::vector<FeatureGrid> features(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) { features[i] = student_forward(student, samples[i].volume); });
    return features;
  };
  const auto labels_of = [](std::span<const ProbeSample> samples) {
    std::vector<TokenLabels> labels;
    for (const auto& s : samples) labels.push_back(s.labels);
    return labels;
  };
  const std::vector<FeatureGrid> train_features = encode(train);
  const ProbeModel model = fit_probe(train_features, labels_of(train), classes, alpha);
  const std::vector<FeatureGrid> test_features = encode(test);
  std::vector<TokenLabels> predictions;
  for (const auto& f : test_features) predictions.push_back(predict(model, f));
  return miou(predictions, labels_of(test), classes);
}

}  // namespace eventdistill
