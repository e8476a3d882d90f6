#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eventdistill/event_core.hpp"
#include "eventdistill/features.hpp"

namespace eventdistill {

// Student features K, teacher features Q and the activation mask M of one
// sample, plus the masked copies K* = K (.) M and Q* = Q (.) M (the mask is
// broadcast across the feature dimension).
class MaskedPair {
 public:
  MaskedPair(FeatureGrid student, FeatureGrid teacher, ActivationMask mask);

  const FeatureGrid& student() const noexcept { return student_; }
  const FeatureGrid& teacher() const noexcept { return teacher_; }
  const ActivationMask& mask() const noexcept { return mask_; }
  const FeatureGrid& student_masked() const noexcept { return student_masked_; }
  const FeatureGrid& teacher_masked() const noexcept { return teacher_masked_; }

 private:
  FeatureGrid student_;
  FeatureGrid teacher_;
  ActivationMask mask_;
  FeatureGrid student_masked_;
  FeatureGrid teacher_masked_;
};

// A loss value averaged over the batch and its gradient with respect to each
// sample's unmasked student features (zero at masked-out tokens).
struct LossTerm {
  double value = 0.0;
  std::vector<FeatureGrid> grad;
};

// (1/N) sum_n ||K*_n - Q*_n||_1
LossTerm masked_l1(std::span<const MaskedPair> batch);

// (1/N) sum_n ||K*_n K*_n^T - Q*_n Q*_n^T||_1
LossTerm intra_structure(std::span<const MaskedPair> batch);

// (1/N) sum_n ||K*_n Q*_n^T - Q*_n Q*_n^T||_1
LossTerm cross_structure(std::span<const MaskedPair> batch);

struct LossWeights {
  double intra = 10.0;
  double cross = 4.0;
};

struct LossReport {
  double l1 = 0.0;
  double intra = 0.0;
  double cross = 0.0;
  double total = 0.0;
  LossWeights weights;
  std::vector<FeatureGrid> grad;

  // Per-element means (l1 / (T * D), structure terms / T^2). Logged only.
  double l1_per_element = 0.0;
  double intra_per_element = 0.0;
  double cross_per_element = 0.0;
};

// total = l1 + weights.intra * intra + weights.cross * cross, same for grad.
LossReport combined_loss(std::span<const MaskedPair> batch, const LossWeights& weights = {});

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------
enum class LossKind { l1, intra, cross };

const char* to_string(LossKind kind);
LossTerm evaluate_loss(LossKind kind, std::span<const MaskedPair> batch);

inline constexpr double kKinkThreshold = 1e-8;

struct GradcheckOptions {
  int tokens = 12;
  int dim = 8;
  int seeds = 5;
  int batch = 2;
  double h = 1e-6;
  double mask_density = 0.75;
  std::uint64_t base_seed = 1;
};

struct GradcheckReport {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t kink_count = 0;  // entries excluded as sitting on or crossing a kink
  std::size_t checked = 0;
  std::size_t total = 0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, 1).
double gradient_rel_error(double analytic, double numeric);

// Central differences on every student-feature entry of the given batch.
GradcheckReport gradcheck(LossKind kind, std::span<const MaskedPair> batch, double h);

// Random batches (Gaussian K and Q, Bernoulli mask) over options.seeds seeds.
GradcheckReport gradcheck(LossKind kind, const GradcheckOptions& options);

// Central differences on every weight and bias of a small student; runs both
// the linear (hidden = 0) and MLP variants.
GradcheckReport gradcheck_student(const GradcheckOptions& options);

}  // namespace eventdistill
