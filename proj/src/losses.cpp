#include "eventdistill/losses.hpp"

#include <algorithm>
#include <cmath>

#include "eventdistill/error.hpp"
#include "eventdistill/parallel.hpp"
#include "eventdistill/rng.hpp"

namespace eventdistill {
namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

FeatureGrid apply_mask(const FeatureGrid& grid, const ActivationMask& mask) {
  FeatureGrid out = grid;
  for (std::size_t t = 0; t < out.tokens(); ++t) {
    if (!mask.active(t)) {
      auto row = out.token(t);
      std::fill(row.begin(), row.end(), 0.0);
    }
  }
  return out;
}

void check_batch(std::span<const MaskedPair> batch) {
  if (batch.empty()) fail(ErrorKind::parameter, "loss evaluated on an empty batch");
}

// T x T matrix of row inner products a_i . b_j, row-major.
std::vector<double> row_products(const FeatureGrid& a, const FeatureGrid& b) {
  const std::size_t tokens = a.tokens();
  std::vector<double> out(tokens * tokens);
  for (std::size_t i = 0; i < tokens; ++i) {
    const auto ai = a.token(i);
    for (std::size_t j = 0; j < tokens; ++j) {
      const auto bj = b.token(j);
      double acc = 0.0;
      for (int d = 0; d < a.dim(); ++d) acc += ai[d] * bj[d];
      out[i * tokens + j] = acc;
    }
  }
  return out;
}

// Structure residual A for the intra (K*K*^T - Q*Q*^T) or cross
// (K*Q*^T - Q*Q*^T) loss.
std::vector<double> structure_residual(const MaskedPair& pair, bool cross) {
  const FeatureGrid& k = pair.student_masked();
  const FeatureGrid& q = pair.teacher_masked();
  std::vector<double> a = row_products(k, cross ? q : k);
  const std::vector<double> qq = row_products(q, q);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] -= qq[i];
  return a;
}

struct SampleResult {
  double value = 0.0;
  FeatureGrid grad;
};

template <typename PerSample>
LossTerm batch_average(std::span<const MaskedPair> batch, PerSample&& per_sample) {
  check_batch(batch);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<SampleResult> results(batch.size());
  parallel_for(batch.size(), [&](std::size_t n) { results[n] = per_sample(batch[n], inv_n); });
  LossTerm term;
  double sum = 0.0;
  for (auto& r : results) {
    sum += r.value;
    term.grad.push_back(std::move(r.grad));
  }
  term.value = sum * inv_n;
  return term;
}

SampleResult structure_sample(const MaskedPair& pair, double inv_n, bool cross) {
  const std::vector<double> a = structure_residual(pair, cross);
  double value = 0.0;
  for (double v : a) value += std::abs(v);

  // d/dK_t of sum |A|: intra gives (S + S^T) K* = 2 S K* since S is
  // symmetric; cross gives S Q*.
  const FeatureGrid& basis = cross ? pair.teacher_masked() : pair.student_masked();
  const double scale = (cross ? 1.0 : 2.0) * inv_n;
  const std::size_t tokens = basis.tokens();
  const int dim = basis.dim();
  FeatureGrid grad(basis.rows(), basis.cols(), dim);
  for (std::size_t t = 0; t < tokens; ++t) {
    if (!pair.mask().active(t)) continue;
    auto g = grad.token(t);
    for (std::size_t j = 0; j < tokens; ++j) {
      const double s = sign(a[t * tokens + j]);
      if (s == 0.0) continue;
      const auto b = basis.token(j);
      for (int d = 0; d < dim; ++d) g[d] += s * b[d];
    }
    for (auto& v : g) v *= scale;
  }
  return {value, std::move(grad)};
}

double tokens_times(const MaskedPair& pair, bool squared) {
  const double t = static_cast<double>(pair.student().tokens());
  return squared ? t * t : t * pair.student().dim();
}

}  // namespace

MaskedPair::MaskedPair(FeatureGrid student, FeatureGrid teacher, ActivationMask mask)
    : student_(std::move(student)), teacher_(std::move(teacher)), mask_(std::move(mask)) {
  if (!student_.same_shape(teacher_)) {
    fail(ErrorKind::dimension, "student and teacher feature grids differ in shape");
  }
  if (mask_.rows() != student_.rows() || mask_.cols() != student_.cols()) {
    fail(ErrorKind::dimension, "mask grid does not match feature grid");
  }
  student_masked_ = apply_mask(student_, mask_);
  teacher_masked_ = apply_mask(teacher_, mask_);
}

LossTerm masked_l1(std::span<const MaskedPair> batch) {
  return batch_average(batch, [](const MaskedPair& pair, double inv_n) {
    const auto k = pair.student_masked().data();
    const auto q = pair.teacher_masked().data();
    FeatureGrid grad(pair.student().rows(), pair.student().cols(), pair.student().dim());
    auto g = grad.data();
    double value = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
      const double diff = k[i] - q[i];
      value += std::abs(diff);
      g[i] = sign(diff) * inv_n;
    }
    // Masked-out entries have diff == 0, so their gradient is already zero.
    return SampleResult{value, std::move(grad)};
  });
}

LossTerm intra_structure(std::span<const MaskedPair> batch) {
  return batch_average(batch, [](const MaskedPair& pair, double inv_n) {
    return structure_sample(pair, inv_n, false);
  });
}

LossTerm cross_structure(std::span<const MaskedPair> batch) {
  return batch_average(batch, [](const MaskedPair& pair, double inv_n) {
    return structure_sample(pair, inv_n, true);
  });
}

LossReport combined_loss(std::span<const MaskedPair> batch, const LossWeights& weights) {
  const LossTerm l1 = masked_l1(batch);
  const LossTerm intra = intra_structure(batch);
  const LossTerm cross = cross_structure(batch);

  LossReport report;
  report.l1 = l1.value;
  report.intra = intra.value;
  report.cross = cross.value;
  report.weights = weights;
  report.total = l1.value + weights.intra * intra.value + weights.cross * cross.value;
  report.grad = l1.grad;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto g = report.grad[n].data();
    const auto gi = intra.grad[n].data();
    const auto gc = cross.grad[n].data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights.intra * gi[i] + weights.cross * gc[i];
  }

  double per_token_elements = 0.0;
  double per_gram_elements = 0.0;
  for (const auto& pair : batch) {
    per_token_elements += tokens_times(pair, false);
    per_gram_elements += tokens_times(pair, true);
  }
  const double n = static_cast<double>(batch.size());
  if (per_token_elements > 0.0) report.l1_per_element = report.l1 * n / per_token_elements;
  if (per_gram_elements > 0.0) {
    report.intra_per_element = report.intra * n / per_gram_elements;
    report.cross_per_element = report.cross * n / per_gram_elements;
  }
  return report;
}

const char* to_string(LossKind kind) {
  switch (kind) {
    case LossKind::l1: return "l1";
    case LossKind::intra: return "intra";
    case LossKind::cross: return "cross";
  }
  return "?";
}

LossTerm evaluate_loss(LossKind kind, std::span<const MaskedPair> batch) {
  switch (kind) {
    case LossKind::l1: return masked_l1(batch);
    case LossKind::intra: return intra_structure(batch);
    case LossKind::cross: return cross_structure(batch);
  }
  fail(ErrorKind::parameter, "unknown loss kind");
}

double gradient_rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / scale;
}

namespace {

// Loss arguments whose sign decides the gradient of entry (t, d).
std::vector<double> kink_arguments(LossKind kind, const MaskedPair& pair, std::size_t t, int d) {
  if (!pair.mask().active(t)) return {};
  if (kind == LossKind::l1) {
    return {pair.student_masked().token(t)[d] - pair.teacher_masked().token(t)[d]};
  }
  const std::vector<double> a = structure_residual(pair, kind == LossKind::cross);
  const std::size_t tokens = pair.student().tokens();
  std::vector<double> args;
  for (std::size_t j = 0; j < tokens; ++j) {
    if (pair.mask().active(j)) args.push_back(a[t * tokens + j]);
  }
  return args;
}

std::vector<MaskedPair> perturbed(std::span<const MaskedPair> batch, std::size_t n, std::size_t t,
                                  int d, double delta) {
  std::vector<MaskedPair> out(batch.begin(), batch.end());
  FeatureGrid student = batch[n].student();
  student.token(t)[d] += delta;
  out[n] = MaskedPair(std::move(student), batch[n].teacher(), batch[n].mask());
  return out;
}

}  // namespace

GradcheckReport gradcheck(LossKind kind, std::span<const MaskedPair> batch, double h) {
  GradcheckReport report;
  report.name = to_string(kind);
  const LossTerm analytic = evaluate_loss(kind, batch);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const FeatureGrid& k = batch[n].student();
    for (std::size_t t = 0; t < k.tokens(); ++t) {
      for (int d = 0; d < k.dim(); ++d) {
        ++report.total;
        const auto plus = perturbed(batch, n, t, d, h);
        const auto minus = perturbed(batch, n, t, d, -h);

        const auto base_args = kink_arguments(kind, batch[n], t, d);
        const auto plus_args = kink_arguments(kind, plus[n], t, d);
        const auto minus_args = kink_arguments(kind, minus[n], t, d);
        bool kink = false;
        for (std::size_t i = 0; i < base_args.size(); ++i) {
          if (std::abs(base_args[i]) < kKinkThreshold || sign(plus_args[i]) != sign(base_args[i]) ||
              sign(minus_args[i]) != sign(base_args[i])) {
            kink = true;
            break;
          }
        }
        if (kink) {
          ++report.kink_count;
          continue;
        }

        const double numeric =
            (evaluate_loss(kind, plus).value - evaluate_loss(kind, minus).value) / (2.0 * h);
        const double err = gradient_rel_error(analytic.grad[n].token(t)[d], numeric);
        report.max_rel_err = std::max(report.max_rel_err, err);
        ++report.checked;
      }
    }
  }
  return report;
}

namespace {

std::vector<MaskedPair> random_batch(const GradcheckOptions& options, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<MaskedPair> batch;
  for (int n = 0; n < options.batch; ++n) {
    FeatureGrid k(1, options.tokens, options.dim);
    FeatureGrid q(1, options.tokens, options.dim);
    for (auto& v : k.data()) v = rng.normal();
    for (auto& v : q.data()) v = rng.normal();
    std::vector<std::uint8_t> active(options.tokens);
    for (auto& a : active) a = rng.uniform() < options.mask_density ? 1 : 0;
    batch.emplace_back(std::move(k), std::move(q),
                       ActivationMask(1, options.tokens, 0.0, std::move(active)));
  }
  return batch;
}

void merge(GradcheckReport& into, const GradcheckReport& from) {
  into.max_rel_err = std::max(into.max_rel_err, from.max_rel_err);
  into.kink_count += from.kink_count;
  into.checked += from.checked;
  into.total += from.total;
}

}  // namespace

GradcheckReport gradcheck(LossKind kind, const GradcheckOptions& options) {
  if (options.tokens < 1 || options.dim < 1 || options.seeds < 1 || options.batch < 1) {
    fail(ErrorKind::parameter, "gradcheck needs positive tokens, dim, seeds and batch");
  }
  if (!(options.h > 0.0)) fail(ErrorKind::parameter, "finite-difference step must be > 0");
  GradcheckReport report;
  report.name = to_string(kind);
  for (int s = 0; s < options.seeds; ++s) {
    const auto batch = random_batch(options, mix_seed(options.base_seed, static_cast<std::uint64_t>(s)));
    merge(report, gradcheck(kind, batch, options.h));
  }
  return report;
}

GradcheckReport gradcheck_student(const GradcheckOptions& options) {
  if (options.seeds < 1) fail(ErrorKind::parameter, "gradcheck needs at least one seed");
  if (!(options.h > 0.0)) fail(ErrorKind::parameter, "finite-difference step must be > 0");
  GradcheckReport report;
  report.name = "student";
  for (int s = 0; s < options.seeds; ++s) {
    for (int hidden : {0, 5}) {
      Rng rng(mix_seed(options.base_seed + 1000, static_cast<std::uint64_t>(s * 2 + (hidden > 0))));
      const StudentShape shape{2, 2, hidden, 3};
      StudentParams params = init_student(shape, rng.next_u64());
      for (auto& layer : params.layers) {
        for (auto& b : layer.bias) b = 0.1 * rng.normal();
      }
      EventVolume volume(6, 4, shape.bins);
      for (auto& v : volume.data()) v = rng.normal();
      FeatureGrid upstream(2, 3, shape.dim);
      for (auto& v : upstream.data()) v = rng.normal();

      const auto objective = [&](const StudentParams& p) {
        const FeatureGrid out = student_forward(p, volume);
        double acc = 0.0;
        for (std::size_t i = 0; i < out.data().size(); ++i) acc += out.data()[i] * upstream.data()[i];
        return acc;
      };
      const StudentParams analytic = student_backward(params, volume, upstream);

      for (std::size_t l = 0; l < params.layers.size(); ++l) {
        for (int which = 0; which < 2; ++which) {
          const std::size_t count =
              which == 0 ? params.layers[l].weight.size() : params.layers[l].bias.size();
          for (std::size_t i = 0; i < count; ++i) {
            const auto slot = [&](StudentParams& p) -> double& {
              return which == 0 ? p.layers[l].weight[i] : p.layers[l].bias[i];
            };
            StudentParams plus = params;
            StudentParams minus = params;
            slot(plus) += options.h;
            slot(minus) -= options.h;
            const double numeric = (objective(plus) - objective(minus)) / (2.0 * options.h);
            StudentParams analytic_copy = analytic;
            const double err = gradient_rel_error(slot(analytic_copy), numeric);
            report.max_rel_err = std::max(report.max_rel_err, err);
            ++report.checked;
            ++report.total;
          }
        }
      }
    }
  }
  return report;
}

}  // namespace eventdistill
