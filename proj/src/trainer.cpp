#include "eventdistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "eventdistill/error.hpp"
#include "eventdistill/parallel.hpp"
#include "eventdistill/rng.hpp"

namespace eventdistill {
namespace {

constexpr double kMaxExactInteger = 9007199254740992.0;  // 2^53

std::string format_number(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double parse_real(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || !std::isfinite(value)) {
    fail(ErrorKind::parameter, "config key '" + key + "': '" + text + "' is not a number");
  }
  return value;
}

long long parse_integer(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  long long value = 0;
  try {
    value = std::stoll(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size()) {
    fail(ErrorKind::parameter, "config key '" + key + "': '" + text + "' is not an integer");
  }
  return value;
}

struct ConfigField {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <typename T>
ConfigField real_field(const char* key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return format_number(c.*member); },
          [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_real(key, v); }};
}

template <typename T>
ConfigField int_field(const char* key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.*member); },
          [key, member](TrainConfig& c, const std::string& v) {
            const long long parsed = parse_integer(key, v);
            if (parsed < 0 && std::is_unsigned_v<T>) {
              fail(ErrorKind::parameter, std::string("config key '") + key + "' must be >= 0");
            }
            c.*member = static_cast<T>(parsed);
          }};
}

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      real_field("lr", &TrainConfig::lr),
      real_field("beta1", &TrainConfig::beta1),
      real_field("beta2", &TrainConfig::beta2),
      real_field("eps_adam", &TrainConfig::eps_adam),
      real_field("weight_decay", &TrainConfig::weight_decay),
      int_field("epochs", &TrainConfig::epochs),
      int_field("max_steps", &TrainConfig::max_steps),
      int_field("batch_size", &TrainConfig::batch_size),
      int_field("bins", &TrainConfig::bins),
      int_field("patch", &TrainConfig::patch),
      real_field("tau", &TrainConfig::tau),
      real_field("lambda_is", &TrainConfig::lambda_is),
      real_field("lambda_cs", &TrainConfig::lambda_cs),
      int_field("width", &TrainConfig::width),
      int_field("height", &TrainConfig::height),
      int_field("hidden", &TrainConfig::hidden),
      int_field("dim", &TrainConfig::dim),
      int_field("teacher_radius", &TrainConfig::teacher_radius),
      int_field("teacher_seed", &TrainConfig::teacher_seed),
      int_field("seed", &TrainConfig::seed),
      {"dtype", [](const TrainConfig& c) { return c.dtype; },
       [](TrainConfig& c, const std::string& v) { c.dtype = v; }},
  };
  return fields;
}

}  // namespace

void TrainConfig::validate() const {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::parameter, what);
  };
  require(lr > 0.0, "lr must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0, 1)");
  require(eps_adam > 0.0, "eps_adam must be > 0");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(epochs >= 1, "epochs must be >= 1");
  require(max_steps >= -1, "max_steps must be >= -1 (-1 = no cap)");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(bins >= 1, "bins must be >= 1");
  require(patch >= 1, "patch must be >= 1");
  require(tau >= 0.0, "tau must be >= 0");
  require(lambda_is >= 0.0 && lambda_cs >= 0.0, "loss weights must be >= 0");
  require(width >= patch && height >= patch, "resolution must be at least one patch");
  require(width % patch == 0 && height % patch == 0, "resolution must be divisible by patch");
  require(hidden >= 0 && dim >= 1, "student needs hidden >= 0 and dim >= 1");
  require(teacher_radius >= 0, "teacher_radius must be >= 0");
  require(static_cast<double>(seed) <= kMaxExactInteger &&
              static_cast<double>(teacher_seed) <= kMaxExactInteger,
          "seeds must not exceed 2^53");
  require(dtype == "f64" || dtype == "f32", "dtype must be f64 or f32");
}

TrainConfig preset(const std::string& name) {
  TrainConfig config;
  if (name == "desk") return config;
  if (name == "paper") {
    config.lr = 5e-6;
    config.beta1 = 0.9;
    config.weight_decay = 1e-4;
    config.epochs = 10;
    config.max_steps = -1;
    config.bins = 3;
    config.patch = 16;
    config.tau = 64.0;
    config.lambda_is = 10.0;
    config.lambda_cs = 4.0;
    config.width = 640;
    config.height = 480;
    return config;
  }
  fail(ErrorKind::parameter, "unknown preset '" + name + "' (expected desk or paper)");
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::parameter, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& fields = config_fields();
    const auto field = std::find_if(fields.begin(), fields.end(),
                                    [&](const ConfigField& f) { return key == f.key; });
    if (field == fields.end()) {
      fail(ErrorKind::parameter, "config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    field->set(base, value);
  }
  base.validate();
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  const Bytes bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()), std::move(base));
}

std::string dump_config(const TrainConfig& config) {
  std::string out;
  for (const auto& field : config_fields()) out += std::string(field.key) + " = " + field.get(config) + "\n";
  return out;
}

OptimizerState OptimizerState::zeros_for(const StudentParams& params) {
  OptimizerState state;
  for (const auto& layer : params.layers) {
    state.m.emplace_back(layer.weight.size(), 0.0);
    state.m.emplace_back(layer.bias.size(), 0.0);
  }
  state.v = state.m;
  return state;
}

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t step, const AdamWConfig& config) {
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
    fail(ErrorKind::dimension, "AdamW block shapes are inconsistent");
  }
  if (step == 0) fail(ErrorKind::parameter, "AdamW step count starts at 1");
  const double k = static_cast<double>(step);
  const double m_correction = 1.0 - std::pow(config.beta1, k);
  const double v_correction = 1.0 - std::pow(config.beta2, k);
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / m_correction;
    const double v_hat = v[i] / v_correction;
    theta[i] = theta[i] * decay - config.lr * (m_hat / (std::sqrt(v_hat) + config.eps));
  }
}

void adamw_step(StudentParams& params, const StudentParams& grads, OptimizerState& state,
                const AdamWConfig& config) {
  if (grads.layers.size() != params.layers.size() ||
      state.m.size() != 2 * params.layers.size() || state.v.size() != state.m.size()) {
    fail(ErrorKind::dimension, "gradient or optimizer state does not match the parameters");
  }
  const std::uint64_t step = state.step + 1;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    adamw_update(params.layers[l].weight, grads.layers[l].weight, state.m[2 * l], state.v[2 * l],
                 step, config);
    adamw_update(params.layers[l].bias, grads.layers[l].bias, state.m[2 * l + 1],
                 state.v[2 * l + 1], step, config);
  }
  state.step = step;
}

TrainingPair make_training_pair(const EventStream& events, const FeatureGrid& teacher,
                                const TrainConfig& config) {
  EventVolume volume = voxelize(events, config.bins);
  ActivationMask mask = activation_mask(density_map(volume, config.patch), config.tau);
  if (teacher.rows() != mask.rows() || teacher.cols() != mask.cols() || teacher.dim() != config.dim) {
    fail(ErrorKind::dimension, "teacher features do not match the event token grid");
  }
  return {std::move(volume), teacher, std::move(mask)};
}

TrainingPair make_training_pair(const EventStream& events, const Frame& frame,
                                const TeacherSpec& teacher, const TrainConfig& config) {
  if (frame.width != events.width() || frame.height != events.height()) {
    fail(ErrorKind::dimension, "frame and event stream differ in geometry");
  }
  return make_training_pair(events, teacher_forward(teacher, frame, config.patch), config);
}

std::vector<TrainingPair> load_training_pairs(const Manifest& manifest, const TrainConfig& config) {
  config.validate();
  const TeacherSpec teacher = config.teacher_spec();
  std::vector<TrainingPair> pairs(manifest.entries.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const LoadedSample sample = load_sample(manifest, i);
    if (sample.events.width() != config.width || sample.events.height() != config.height) {
      fail(ErrorKind::dimension,
           "sample " + std::to_string(i) + " is " + std::to_string(sample.events.width()) + "x" +
               std::to_string(sample.events.height()) + ", config expects " +
               std::to_string(config.width) + "x" + std::to_string(config.height));
    }
    pairs[i] = sample.teacher
                   ? make_training_pair(sample.events, feature_grid_from(*sample.teacher), config)
                   : make_training_pair(sample.events, sample.frame0, teacher, config);
  });
  return pairs;
}

namespace {

Tensor vector_tensor(const std::vector<double>& values, std::vector<std::uint32_t> dims) {
  Tensor t;
  t.dims = std::move(dims);
  t.values = values;
  return t;
}

std::string layer_name(std::size_t l, bool weight) {
  return "student.layer" + std::to_string(l) + (weight ? ".weight" : ".bias");
}

}  // namespace

std::vector<NamedTensor> checkpoint_entries(const Checkpoint& ckpt) {
  std::vector<NamedTensor> entries;
  const auto scalar = [&](const std::string& name, double v) {
    entries.push_back({name, Tensor::scalar(v)});
  };
  const TrainConfig& c = ckpt.config;
  scalar("config.lr", c.lr);
  scalar("config.beta1", c.beta1);
  scalar("config.beta2", c.beta2);
  scalar("config.eps_adam", c.eps_adam);
  scalar("config.weight_decay", c.weight_decay);
  scalar("config.epochs", c.epochs);
  scalar("config.max_steps", c.max_steps);
  scalar("config.batch_size", c.batch_size);
  scalar("config.bins", c.bins);
  scalar("config.patch", c.patch);
  scalar("config.tau", c.tau);
  scalar("config.lambda_is", c.lambda_is);
  scalar("config.lambda_cs", c.lambda_cs);
  scalar("config.width", c.width);
  scalar("config.height", c.height);
  scalar("config.hidden", c.hidden);
  scalar("config.dim", c.dim);
  scalar("config.teacher_radius", c.teacher_radius);
  scalar("config.teacher_seed", static_cast<double>(c.teacher_seed));
  scalar("config.seed", static_cast<double>(c.seed));
  scalar("config.dtype", c.dtype == "f32" ? 32.0 : 64.0);

  const StudentShape& s = ckpt.params.shape;
  scalar("student.patch", s.patch);
  scalar("student.bins", s.bins);
  scalar("student.hidden", s.hidden);
  scalar("student.dim", s.dim);
  for (std::size_t l = 0; l < ckpt.params.layers.size(); ++l) {
    const DenseLayer& layer = ckpt.params.layers[l];
    entries.push_back({layer_name(l, true),
                       vector_tensor(layer.weight, {static_cast<std::uint32_t>(layer.outputs),
                                                    static_cast<std::uint32_t>(layer.inputs)})});
    entries.push_back({layer_name(l, false),
                       vector_tensor(layer.bias, {static_cast<std::uint32_t>(layer.outputs)})});
  }

  scalar("adam.step", static_cast<double>(ckpt.state.step));
  for (std::size_t b = 0; b < ckpt.state.m.size(); ++b) {
    const auto n = static_cast<std::uint32_t>(ckpt.state.m[b].size());
    entries.push_back({"adam.m." + std::to_string(b), vector_tensor(ckpt.state.m[b], {n})});
    entries.push_back({"adam.v." + std::to_string(b), vector_tensor(ckpt.state.v[b], {n})});
  }

  Tensor history;
  history.dims = {static_cast<std::uint32_t>(ckpt.history.size()), 5};
  for (const auto& r : ckpt.history) {
    history.values.insert(history.values.end(),
                          {static_cast<double>(r.step), r.l1, r.intra, r.cross, r.total});
  }
  entries.push_back({"history", std::move(history)});
  return entries;
}

Checkpoint checkpoint_from_entries(const std::vector<NamedTensor>& entries) {
  const auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& e : entries) {
      if (e.name == name) return e.tensor;
    }
    fail(ErrorKind::format, "checkpoint is missing entry '" + name + "'");
  };
  const auto scalar = [&](const std::string& name) {
    const Tensor& t = find(name);
    if (t.values.size() != 1) fail(ErrorKind::format, "checkpoint entry '" + name + "' is not a scalar");
    return t.values[0];
  };
  const auto integer = [&](const std::string& name) { return static_cast<int>(scalar(name)); };

  Checkpoint ckpt;
  TrainConfig& c = ckpt.config;
  c.lr = scalar("config.lr");
  c.beta1 = scalar("config.beta1");
  c.beta2 = scalar("config.beta2");
  c.eps_adam = scalar("config.eps_adam");
  c.weight_decay = scalar("config.weight_decay");
  c.epochs = integer("config.epochs");
  c.max_steps = integer("config.max_steps");
  c.batch_size = integer("config.batch_size");
  c.bins = integer("config.bins");
  c.patch = integer("config.patch");
  c.tau = scalar("config.tau");
  c.lambda_is = scalar("config.lambda_is");
  c.lambda_cs = scalar("config.lambda_cs");
  c.width = integer("config.width");
  c.height = integer("config.height");
  c.hidden = integer("config.hidden");
  c.dim = integer("config.dim");
  c.teacher_radius = integer("config.teacher_radius");
  c.teacher_seed = static_cast<std::uint64_t>(scalar("config.teacher_seed"));
  c.seed = static_cast<std::uint64_t>(scalar("config.seed"));
  c.dtype = scalar("config.dtype") == 32.0 ? "f32" : "f64";

  StudentShape& s = ckpt.params.shape;
  s.patch = integer("student.patch");
  s.bins = integer("student.bins");
  s.hidden = integer("student.hidden");
  s.dim = integer("student.dim");
  const std::size_t layer_count = s.hidden == 0 ? 1 : 2;
  for (std::size_t l = 0; l < layer_count; ++l) {
    const Tensor& w = find(layer_name(l, true));
    const Tensor& b = find(layer_name(l, false));
    if (w.dims.size() != 2 || b.dims.size() != 1) {
      fail(ErrorKind::format, "checkpoint layer " + std::to_string(l) + " has wrong rank");
    }
    DenseLayer layer;
    layer.outputs = static_cast<int>(w.dims[0]);
    layer.inputs = static_cast<int>(w.dims[1]);
    layer.weight = w.values;
    layer.bias = b.values;
    ckpt.params.layers.push_back(std::move(layer));
  }
  try {
    ckpt.params.validate();
  } catch (const Error& err) {
    fail(ErrorKind::format, std::string("checkpoint student: ") + err.what());
  }

  ckpt.state.step = static_cast<std::uint64_t>(scalar("adam.step"));
  for (std::size_t blk = 0; blk < 2 * layer_count; ++blk) {
    ckpt.state.m.push_back(find("adam.m." + std::to_string(blk)).values);
    ckpt.state.v.push_back(find("adam.v." + std::to_string(blk)).values);
  }

  const Tensor& history = find("history");
  if (history.dims.size() != 2 || history.dims[1] != 5) {
    fail(ErrorKind::format, "checkpoint history must be N x 5");
  }
  for (std::size_t r = 0; r < history.dims[0]; ++r) {
    const double* row = history.values.data() + r * 5;
    ckpt.history.push_back({static_cast<std::uint64_t>(row[0]), row[1], row[2], row[3], row[4]});
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, encode_ckp1(checkpoint_entries(checkpoint)));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_entries(decode_ckp1(read_file(path)));
}

std::vector<MaskedPair> masked_pairs(const StudentParams& params,
                                     std::span<const TrainingPair> pairs,
                                     std::span<const std::size_t> indices) {
  std::vector<FeatureGrid> outputs(indices.size());
  parallel_for(indices.size(), [&](std::size_t i) {
    outputs[i] = student_forward(params, pairs[indices[i]].volume);
  });
  std::vector<MaskedPair> batch;
  batch.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const TrainingPair& pair = pairs[indices[i]];
    batch.emplace_back(std::move(outputs[i]), pair.teacher, pair.mask);
  }
  return batch;
}

LossReport dataset_loss(const StudentParams& params, std::span<const TrainingPair> pairs,
                        const LossWeights& weights) {
  std::vector<std::size_t> all(pairs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return combined_loss(masked_pairs(params, pairs, all), weights);
}

Checkpoint pretrain(std::span<const TrainingPair> pairs, const TrainConfig& config,
                    const EpochCallback& on_epoch) {
  config.validate();
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.params = init_student(config.student_shape(), config.seed);
  ckpt.state = OptimizerState::zeros_for(ckpt.params);
  if (pairs.empty()) fail(ErrorKind::parameter, "pretraining needs at least one training pair");

  const AdamWConfig adamw = AdamWConfig::from(config);
  const LossWeights weights = config.loss_weights();
  const bool capped = config.max_steps >= 0;
  const auto step_limit = static_cast<std::uint64_t>(std::max(config.max_steps, 0));
  std::vector<std::size_t> order(pairs.size());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (capped && ckpt.state.step >= step_limit) break;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(mix_seed(config.seed, static_cast<std::uint64_t>(epoch) + 1));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      if (capped && ckpt.state.step >= step_limit) break;
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> indices(order.data() + start, end - start);

      const std::vector<MaskedPair> batch = masked_pairs(ckpt.params, pairs, indices);
      const LossReport report = combined_loss(batch, weights);
      if (!std::isfinite(report.total)) {
        fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(ckpt.state.step + 1) +
                                     " (l1=" + format_number(report.l1) + ", intra=" +
                                     format_number(report.intra) + ", cross=" +
                                     format_number(report.cross) + ")");
      }

      std::vector<StudentParams> sample_grads(indices.size());
      parallel_for(indices.size(), [&](std::size_t i) {
        sample_grads[i] = student_backward(ckpt.params, pairs[indices[i]].volume, report.grad[i]);
      });
      StudentParams grads = zeros_like(ckpt.params);
      for (const auto& g : sample_grads) {
        for (std::size_t l = 0; l < grads.layers.size(); ++l) {
          for (std::size_t k = 0; k < g.layers[l].weight.size(); ++k) grads.layers[l].weight[k] += g.layers[l].weight[k];
          for (std::size_t k = 0; k < g.layers[l].bias.size(); ++k) grads.layers[l].bias[k] += g.layers[l].bias[k];
        }
      }

      adamw_step(ckpt.params, grads, ckpt.state, adamw);
      ckpt.history.push_back({ckpt.state.step, report.l1, report.intra, report.cross, report.total});
    }
    if (on_epoch) on_epoch(ckpt);
  }
  return ckpt;
}

Checkpoint pretrain_from_directory(const std::filesystem::path& data_dir, const TrainConfig& config,
                                   const std::filesystem::path& out_ckpt) {
  const Manifest manifest = read_manifest(data_dir);
  const std::vector<TrainingPair> pairs = load_training_pairs(manifest, config);
  Checkpoint ckpt = pretrain(pairs, config, [&](const Checkpoint& c) { save_checkpoint(c, out_ckpt); });
  save_checkpoint(ckpt, out_ckpt);
  return ckpt;
}

StructureDiscrepancy eval_structure_discrepancy(const StudentParams& params,
                                                std::span<const TrainingPair> held_out) {
  if (held_out.empty()) fail(ErrorKind::parameter, "evaluation needs at least one held-out pair");
  std::vector<StructureDiscrepancy> per_pair(held_out.size());
  parallel_for(held_out.size(), [&](std::size_t i) {
    const std::size_t index[] = {i};
    const auto batch = masked_pairs(params, held_out, index);
    const double tokens = static_cast<double>(batch[0].student().tokens());
    const double dim = static_cast<double>(batch[0].student().dim());
    per_pair[i].gram_err = intra_structure(batch).value / (tokens * tokens);
    per_pair[i].l1_err = masked_l1(batch).value / (tokens * dim);
  });
  StructureDiscrepancy mean;
  for (const auto& d : per_pair) {
    mean.gram_err += d.gram_err;
    mean.l1_err += d.l1_err;
  }
  mean.gram_err /= static_cast<double>(held_out.size());
  mean.l1_err /= static_cast<double>(held_out.size());
  return mean;
}

}  // namespace eventdistill
