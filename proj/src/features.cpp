#include "eventdistill/features.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "eventdistill/error.hpp"
#include "eventdistill/rng.hpp"

namespace eventdistill {
namespace {

std::string shape_string(int a, int b, int c) {
  return std::to_string(a) + "x" + std::to_string(b) + "x" + std::to_string(c);
}

void check_volume(const StudentParams& params, const EventVolume& volume) {
  const int p = params.shape.patch;
  if (volume.bins() != params.shape.bins) {
    fail(ErrorKind::dimension, "volume has " + std::to_string(volume.bins()) +
                                   " bins, student expects " + std::to_string(params.shape.bins));
  }
  if (volume.height() % p != 0 || volume.width() % p != 0) {
    fail(ErrorKind::dimension, "volume " + std::to_string(volume.height()) + "x" +
                                   std::to_string(volume.width()) +
                                   " is not divisible by patch " + std::to_string(p));
  }
}

// out = W x + b
void affine(const DenseLayer& layer, std::span<const double> x, std::span<double> out) {
  for (int o = 0; o < layer.outputs; ++o) {
    const double* row = layer.weight.data() + static_cast<std::size_t>(o) * layer.inputs;
    double acc = layer.bias[o];
    for (int i = 0; i < layer.inputs; ++i) acc += row[i] * x[i];
    out[o] = acc;
  }
}

// Modified Gram-Schmidt over `count` vectors of length `length`, where vector
// k, element e lives at data[k * k_stride + e * e_stride]. Two passes keep the
// result orthonormal to machine precision.
void orthonormalize(std::vector<double>& data, int count, int length, int k_stride, int e_stride) {
  const auto at = [&](int k, int e) -> double& { return data[k * k_stride + e * e_stride]; };
  for (int pass = 0; pass < 2; ++pass) {
    for (int k = 0; k < count; ++k) {
      for (int j = 0; j < k; ++j) {
        double dot = 0.0;
        for (int e = 0; e < length; ++e) dot += at(k, e) * at(j, e);
        for (int e = 0; e < length; ++e) at(k, e) -= dot * at(j, e);
      }
      double norm = 0.0;
      for (int e = 0; e < length; ++e) norm += at(k, e) * at(k, e);
      norm = std::sqrt(norm);
      if (norm < 1e-12) fail(ErrorKind::numeric, "degenerate teacher projection draw");
      for (int e = 0; e < length; ++e) at(k, e) /= norm;
    }
  }
}

}  // namespace

FeatureGrid::FeatureGrid(int rows, int cols, int dim)
    : FeatureGrid(rows, cols, dim,
                  std::vector<double>(static_cast<std::size_t>(std::max(rows, 0)) *
                                          std::max(cols, 0) * std::max(dim, 0),
                                      0.0)) {}

FeatureGrid::FeatureGrid(int rows, int cols, int dim, std::vector<double> data)
    : rows_(rows), cols_(cols), dim_(dim), data_(std::move(data)) {
  if (rows < 0 || cols < 0 || dim < 0) fail(ErrorKind::dimension, "negative feature grid shape");
  if (data_.size() != static_cast<std::size_t>(rows) * cols * dim) {
    fail(ErrorKind::dimension, "feature payload does not match " + shape_string(rows, cols, dim));
  }
}

Tensor to_tensor(const FeatureGrid& grid, Dtype dtype) {
  Tensor tensor;
  tensor.dims = {static_cast<std::uint32_t>(grid.rows()), static_cast<std::uint32_t>(grid.cols()),
                 static_cast<std::uint32_t>(grid.dim())};
  tensor.values.assign(grid.data().begin(), grid.data().end());
  tensor.dtype = dtype;
  if (dtype == Dtype::f32) {
    for (auto& v : tensor.values) v = static_cast<double>(static_cast<float>(v));
  }
  return tensor;
}

FeatureGrid feature_grid_from(const Tensor& tensor) {
  if (tensor.dims.size() != 3) {
    fail(ErrorKind::format, "feature tensor must have 3 dims, got " +
                                std::to_string(tensor.dims.size()));
  }
  FeatureGrid grid(static_cast<int>(tensor.dims[0]), static_cast<int>(tensor.dims[1]),
                   static_cast<int>(tensor.dims[2]), tensor.values);
  for (double v : grid.data()) {
    if (!std::isfinite(v)) fail(ErrorKind::format, "feature tensor holds non-finite values");
  }
  return grid;
}

void save_features(const FeatureGrid& grid, const std::filesystem::path& path, Dtype dtype) {
  save_tensor(to_tensor(grid, dtype), path);
}

FeatureGrid load_teacher_features(const std::filesystem::path& path) {
  return feature_grid_from(load_tensor(path));
}

std::size_t StudentParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void StudentParams::validate() const {
  if (shape.patch < 1 || shape.bins < 1 || shape.hidden < 0 || shape.dim < 1) {
    fail(ErrorKind::parameter, "invalid student shape");
  }
  const std::size_t expected_layers = shape.hidden == 0 ? 1 : 2;
  if (layers.size() != expected_layers) fail(ErrorKind::dimension, "student layer count mismatch");
  int inputs = shape.input_size();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const DenseLayer& l = layers[k];
    const int outputs = k + 1 == layers.size() ? shape.dim : shape.hidden;
    if (l.inputs != inputs || l.outputs != outputs ||
        l.weight.size() != static_cast<std::size_t>(inputs) * outputs ||
        l.bias.size() != static_cast<std::size_t>(outputs)) {
      fail(ErrorKind::dimension, "student layer " + std::to_string(k) + " has inconsistent shape");
    }
    inputs = outputs;
  }
}

StudentParams init_student(const StudentShape& shape, std::uint64_t seed) {
  StudentParams params;
  params.shape = shape;
  if (shape.patch < 1 || shape.bins < 1 || shape.hidden < 0 || shape.dim < 1) {
    fail(ErrorKind::parameter, "invalid student shape");
  }
  Rng rng(seed);
  std::vector<int> widths{shape.input_size()};
  if (shape.hidden > 0) widths.push_back(shape.hidden);
  widths.push_back(shape.dim);
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    DenseLayer layer;
    layer.inputs = widths[k];
    layer.outputs = widths[k + 1];
    const double limit = std::sqrt(6.0 / (layer.inputs + layer.outputs));
    layer.weight.resize(static_cast<std::size_t>(layer.inputs) * layer.outputs);
    for (auto& w : layer.weight) w = rng.uniform(-limit, limit);
    layer.bias.assign(layer.outputs, 0.0);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

StudentParams zeros_like(const StudentParams& params) {
  StudentParams zeros = params;
  for (auto& l : zeros.layers) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
  return zeros;
}

void extract_patch(const EventVolume& volume, int patch, int mu, int nu, std::span<double> out) {
  std::size_t k = 0;
  for (int dy = 0; dy < patch; ++dy) {
    for (int dx = 0; dx < patch; ++dx) {
      for (int b = 0; b < volume.bins(); ++b) out[k++] = volume.at(mu * patch + dy, nu * patch + dx, b);
    }
  }
}

FeatureGrid student_forward(const StudentParams& params, const EventVolume& volume) {
  params.validate();
  check_volume(params, volume);
  const int p = params.shape.patch;
  const int rows = volume.height() / p;
  const int cols = volume.width() / p;
  FeatureGrid out(rows, cols, params.shape.dim);
  std::vector<double> input(params.shape.input_size());
  std::vector<double> hidden(params.shape.hidden);
  for (int mu = 0; mu < rows; ++mu) {
    for (int nu = 0; nu < cols; ++nu) {
      extract_patch(volume, p, mu, nu, input);
      auto token = out.token(static_cast<std::size_t>(mu) * cols + nu);
      if (params.layers.size() == 1) {
        affine(params.layers[0], input, token);
      } else {
        affine(params.layers[0], input, hidden);
        for (auto& h : hidden) h = std::tanh(h);
        affine(params.layers[1], hidden, token);
      }
    }
  }
  return out;
}

StudentParams student_backward(const StudentParams& params, const EventVolume& volume,
                               const FeatureGrid& upstream) {
  params.validate();
  check_volume(params, volume);
  const int p = params.shape.patch;
  const int rows = volume.height() / p;
  const int cols = volume.width() / p;
  if (upstream.rows() != rows || upstream.cols() != cols || upstream.dim() != params.shape.dim) {
    fail(ErrorKind::dimension, "upstream gradient " +
                                   shape_string(upstream.rows(), upstream.cols(), upstream.dim()) +
                                   " does not match output " +
                                   shape_string(rows, cols, params.shape.dim));
  }

  StudentParams grads = zeros_like(params);
  std::vector<double> input(params.shape.input_size());
  std::vector<double> hidden(params.shape.hidden);
  std::vector<double> hidden_grad(params.shape.hidden);

  // out[o] += g * in^T, accumulated into a layer's weight and bias gradients.
  const auto accumulate = [](DenseLayer& grad, std::span<const double> g, std::span<const double> in) {
    for (int o = 0; o < grad.outputs; ++o) {
      if (g[o] == 0.0) continue;
      double* row = grad.weight.data() + static_cast<std::size_t>(o) * grad.inputs;
      for (int i = 0; i < grad.inputs; ++i) row[i] += g[o] * in[i];
      grad.bias[o] += g[o];
    }
  };

  for (int mu = 0; mu < rows; ++mu) {
    for (int nu = 0; nu < cols; ++nu) {
      const auto g = upstream.token(static_cast<std::size_t>(mu) * cols + nu);
      if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
      extract_patch(volume, p, mu, nu, input);
      if (params.layers.size() == 1) {
        accumulate(grads.layers[0], g, input);
        continue;
      }
      const DenseLayer& second = params.layers[1];
      affine(params.layers[0], input, hidden);
      for (auto& h : hidden) h = std::tanh(h);
      accumulate(grads.layers[1], g, hidden);
      for (int h = 0; h < second.inputs; ++h) {
        double acc = 0.0;
        for (int o = 0; o < second.outputs; ++o) {
          acc += second.weight[static_cast<std::size_t>(o) * second.inputs + h] * g[o];
        }
        hidden_grad[h] = acc * (1.0 - hidden[h] * hidden[h]);
      }
      accumulate(grads.layers[0], hidden_grad, input);
    }
  }
  return grads;
}

TeacherSpec TeacherSpec::create(int dim, std::uint64_t seed, int radius) {
  if (dim < 1) fail(ErrorKind::parameter, "teacher dim must be >= 1");
  if (radius < 0) fail(ErrorKind::parameter, "teacher smoothing radius must be >= 0");
  TeacherSpec spec;
  spec.dim = dim;
  spec.seed = seed;
  spec.radius = radius;
  Rng rng(seed);
  spec.projection.resize(static_cast<std::size_t>(dim) * kDescriptorSize);
  for (auto& v : spec.projection) v = rng.normal();
  if (dim >= kDescriptorSize) {
    orthonormalize(spec.projection, kDescriptorSize, dim, 1, kDescriptorSize);
  } else {
    orthonormalize(spec.projection, dim, kDescriptorSize, kDescriptorSize, 1);
  }
  return spec;
}

std::array<double, kDescriptorSize> teacher_descriptor(const Frame& frame, int patch, int mu,
                                                       int nu) {
  const int rows = frame.height / patch;
  const int cols = frame.width / patch;
  std::array<double, kDescriptorSize> d{};
  for (int y = mu * patch; y < (mu + 1) * patch; ++y) {
    for (int x = nu * patch; x < (nu + 1) * patch; ++x) {
      const double* px = frame.pixel(y, x);
      d[0] += px[0];
      d[1] += px[1];
      d[2] += px[2];
    }
  }
  const double area = static_cast<double>(patch) * patch;
  d[0] /= area;
  d[1] /= area;
  d[2] /= area;
  d[3] = static_cast<double>(mu) / rows;
  d[4] = static_cast<double>(nu) / cols;
  return d;
}

FeatureGrid teacher_forward(const TeacherSpec& spec, const Frame& frame, int patch) {
  if (patch < 1) fail(ErrorKind::parameter, "patch size must be >= 1");
  if (frame.height % patch != 0 || frame.width % patch != 0) {
    fail(ErrorKind::dimension, "frame " + std::to_string(frame.height) + "x" +
                                   std::to_string(frame.width) + " is not divisible by patch " +
                                   std::to_string(patch));
  }
  if (spec.projection.size() != static_cast<std::size_t>(spec.dim) * kDescriptorSize) {
    fail(ErrorKind::dimension, "teacher projection has wrong size");
  }
  const int rows = frame.height / patch;
  const int cols = frame.width / patch;
  FeatureGrid raw(rows, cols, spec.dim);
  for (int mu = 0; mu < rows; ++mu) {
    for (int nu = 0; nu < cols; ++nu) {
      const auto d = teacher_descriptor(frame, patch, mu, nu);
      auto token = raw.token(static_cast<std::size_t>(mu) * cols + nu);
      for (int k = 0; k < spec.dim; ++k) {
        double acc = 0.0;
        for (int e = 0; e < kDescriptorSize; ++e) {
          acc += spec.projection[static_cast<std::size_t>(k) * kDescriptorSize + e] * d[e];
        }
        token[k] = acc;
      }
    }
  }
  if (spec.radius == 0) return raw;

  // Box mean over the in-bounds neighbours of each token.
  FeatureGrid smooth(rows, cols, spec.dim);
  for (int mu = 0; mu < rows; ++mu) {
    for (int nu = 0; nu < cols; ++nu) {
      auto out = smooth.token(static_cast<std::size_t>(mu) * cols + nu);
      int count = 0;
      for (int i = std::max(0, mu - spec.radius); i <= std::min(rows - 1, mu + spec.radius); ++i) {
        for (int j = std::max(0, nu - spec.radius); j <= std::min(cols - 1, nu + spec.radius); ++j) {
          const auto in = raw.token(static_cast<std::size_t>(i) * cols + j);
          for (int k = 0; k < spec.dim; ++k) out[k] += in[k];
          ++count;
        }
      }
      for (auto& v : out) v /= count;
    }
  }
  return smooth;
}

SimilarityMap similarity_map(const FeatureGrid& grid, int anchor_mu, int anchor_nu) {
  if (anchor_mu < 0 || anchor_mu >= grid.rows() || anchor_nu < 0 || anchor_nu >= grid.cols()) {
    fail(ErrorKind::parameter, "anchor (" + std::to_string(anchor_mu) + "," +
                                   std::to_string(anchor_nu) + ") outside the token grid");
  }
  const std::size_t anchor_index = static_cast<std::size_t>(anchor_mu) * grid.cols() + anchor_nu;
  const auto anchor = grid.token(anchor_index);
  const auto norm = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  const double anchor_norm = norm(anchor);
  if (!(anchor_norm > 0.0)) fail(ErrorKind::degenerate_anchor, "anchor token has zero norm");

  SimilarityMap map{grid.rows(), grid.cols(), std::vector<double>(grid.tokens(), 0.0)};
  for (std::size_t t = 0; t < grid.tokens(); ++t) {
    const auto other = grid.token(t);
    const double other_norm = norm(other);
    if (t == anchor_index) {
      map.values[t] = 1.0;
      continue;
    }
    if (other_norm == 0.0) continue;
    double dot = 0.0;
    for (int d = 0; d < grid.dim(); ++d) dot += anchor[d] * other[d];
    map.values[t] = std::clamp(dot / (anchor_norm * other_norm), -1.0, 1.0);
  }
  return map;
}

NetpbmImage similarity_image(const SimilarityMap& map) {
  NetpbmImage image{map.cols, map.rows, 1, std::vector<std::uint8_t>(map.values.size())};
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const double scaled = (std::clamp(map.values[i], -1.0, 1.0) + 1.0) * 0.5 * 255.0;
    image.pixels[i] = static_cast<std::uint8_t>(std::lround(scaled));
  }
  return image;
}

}  // namespace eventdistill
