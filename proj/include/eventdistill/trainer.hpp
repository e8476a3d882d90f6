#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "eventdistill/event_core.hpp"
#include "eventdistill/features.hpp"
#include "eventdistill/losses.hpp"
#include "eventdistill/synth.hpp"

namespace eventdistill {

struct TrainConfig {
  // optimizer
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  double weight_decay = 1e-4;
  // schedule
  int epochs = 25;
  int max_steps = 200;  // -1 = run all epochs
  int batch_size = 8;
  // data and objective
  int bins = kDefaultBins;
  int patch = kDefaultPatch;
  double tau = kDefaultTau;
  double lambda_is = 10.0;
  double lambda_cs = 4.0;
  int width = kDeskResolution;
  int height = kDeskResolution;
  // models
  int hidden = 32;
  int dim = 16;
  int teacher_radius = 1;
  std::uint64_t teacher_seed = 7;
  std::uint64_t seed = 0;
  std::string dtype = "f64";  // precision of exported feature files

  void validate() const;
  StudentShape student_shape() const { return {patch, bins, hidden, dim}; }
  LossWeights loss_weights() const { return {lambda_is, lambda_cs}; }
  TeacherSpec teacher_spec() const { return TeacherSpec::create(dim, teacher_seed, teacher_radius); }
  Dtype feature_dtype() const { return dtype == "f32" ? Dtype::f32 : Dtype::f64; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// "desk": small-scale settings for a freshly initialised toy student.
// "paper": B = 3, P = 16, tau = 64, lambda = (10, 4), lr 5e-6, wd 1e-4,
// 10 epochs, 640 x 480.
TrainConfig preset(const std::string& name);

// `key = value` lines with `#` comments, applied on top of `base`. Unknown
// keys and malformed values are parameter errors.
TrainConfig parse_config(const std::string& text, TrainConfig base = preset("desk"));
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = preset("desk"));

// Emits every key in parse_config's syntax, numbers with 9 significant digits.
std::string dump_config(const TrainConfig& config);

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.
// ---------------------------------------------------------------------------
struct OptimizerState {
  std::vector<std::vector<double>> m;  // one block per weight / bias vector
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static OptimizerState zeros_for(const StudentParams& params);
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  static AdamWConfig from(const TrainConfig& config) {
    return {config.lr, config.beta1, config.beta2, config.eps_adam, config.weight_decay};
  }
};

// Updates one parameter block in place; `step` is the post-increment count.
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t step, const AdamWConfig& config);

void adamw_step(StudentParams& params, const StudentParams& grads, OptimizerState& state,
                const AdamWConfig& config);

// ---------------------------------------------------------------------------
// Pretraining.
// ---------------------------------------------------------------------------
struct TrainingPair {
  EventVolume volume;
  FeatureGrid teacher;
  ActivationMask mask;
};

TrainingPair make_training_pair(const EventStream& events, const FeatureGrid& teacher,
                                const TrainConfig& config);
TrainingPair make_training_pair(const EventStream& events, const Frame& frame,
                                const TeacherSpec& teacher, const TrainConfig& config);

std::vector<TrainingPair> load_training_pairs(const Manifest& manifest, const TrainConfig& config);

struct LossRecord {
  std::uint64_t step = 0;
  double l1 = 0.0;
  double intra = 0.0;
  double cross = 0.0;
  double total = 0.0;

  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct Checkpoint {
  StudentParams params;
  TrainConfig config;
  OptimizerState state;
  std::vector<LossRecord> history;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<NamedTensor> checkpoint_entries(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_entries(const std::vector<NamedTensor>& entries);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Student outputs for each pair, masked-paired with the teacher features.
std::vector<MaskedPair> masked_pairs(const StudentParams& params,
                                     std::span<const TrainingPair> pairs,
                                     std::span<const std::size_t> indices);

// Objective over all pairs as one batch.
LossReport dataset_loss(const StudentParams& params, std::span<const TrainingPair> pairs,
                        const LossWeights& weights);

// Called after every epoch with the checkpoint so far.
using EpochCallback = std::function<void(const Checkpoint&)>;

Checkpoint pretrain(std::span<const TrainingPair> pairs, const TrainConfig& config,
                    const EpochCallback& on_epoch = {});

// Loads the manifest in data_dir, trains, and writes the checkpoint to
// out_ckpt after every epoch and at the end.
Checkpoint pretrain_from_directory(const std::filesystem::path& data_dir, const TrainConfig& config,
                                   const std::filesystem::path& out_ckpt);

struct StructureDiscrepancy {
  double gram_err = 0.0;  // mean of ||K*K*^T - Q*Q*^T||_1 / T^2
  double l1_err = 0.0;    // mean of ||K* - Q*||_1 / (T * D)
};

StructureDiscrepancy eval_structure_discrepancy(const StudentParams& params,
                                                std::span<const TrainingPair> held_out);

}  // namespace eventdistill
