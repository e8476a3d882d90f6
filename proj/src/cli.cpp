#include "eventdistill/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>

#include "eventdistill/error.hpp"
#include "eventdistill/event_core.hpp"
#include "eventdistill/features.hpp"
#include "eventdistill/formats.hpp"
#include "eventdistill/losses.hpp"
#include "eventdistill/probe.hpp"
#include "eventdistill/synth.hpp"
#include "eventdistill/trainer.hpp"

namespace eventdistill {
namespace {

struct FlagSpec {
  const char* name;
  const char* help;
  const char* default_value = nullptr;  // nullptr: no default
  bool required = false;
  bool boolean = false;
  bool positional = false;
};

struct CommandSpec {
  const char* name;
  const char* help;
  std::vector<FlagSpec> flags;
  std::vector<std::pair<const char*, const char*>> exclusive;
};

const std::vector<CommandSpec>& command_specs() {
  static const std::vector<CommandSpec> specs = {
      {"synth",
       "Generate a synthetic (frame pair, events, labels) dataset",
       {{"scenes", "number of scenes", nullptr, true},
        {"seed", "dataset seed", "0"},
        {"width", "frame width in pixels", "128"},
        {"height", "frame height in pixels", "128"},
        {"contrast", "log-brightness contrast threshold C", "0.2"},
        {"out", "output directory", nullptr, true}},
       {}},
      {"voxelize",
       "Sample an event window and aggregate it into an H x W x B volume (FTN1)",
       {{"events", "input events (.evt1 or .csv)", nullptr, true},
        {"bins", "temporal bins B", "3"},
        {"window-us", "fixed-duration window length in microseconds"},
        {"count", "fixed-count window size"},
        {"anchor", "window anchor timestamp in microseconds"},
        {"width", "sensor width for CSV input", "0"},
        {"height", "sensor height for CSV input", "0"},
        {"out", "output volume (.ftn)", nullptr, true}},
       {{"window-us", "count"}}},
      {"mask",
       "Compute the patch density map of a volume and threshold it into an activation mask",
       {{"volume", "input volume (.ftn)", nullptr, true},
        {"patch", "patch size P", "16"},
        {"tau", "density threshold", "64"},
        {"out", "output mask (.ftn, H' x W')", nullptr, true}},
       {}},
      {"teacher",
       "Compute synthetic teacher features for a PPM image",
       {{"image", "input image (.ppm)", nullptr, true},
        {"dim", "feature dimension D", "16"},
        {"seed", "projection seed", "7"},
        {"patch", "patch size P", "16"},
        {"radius", "token smoothing radius", "1"},
        {"dtype", "output precision (f64 or f32)", "f64"},
        {"out", "output features (.ftn)", nullptr, true}},
       {}},
      {"encode",
       "Encode an event file with a trained student",
       {{"ckpt", "checkpoint (.ckp1)", nullptr, true},
        {"events", "input events (.evt1)", nullptr, true},
        {"out", "output features (.ftn)", nullptr, true}},
       {}},
      {"simmap",
       "Render a cosine-similarity map anchored at one token as PGM",
       {{"features", "feature grid (.ftn)", nullptr, true},
        {"anchor", "anchor token as mu,nu", nullptr, true},
        {"out", "output image (.pgm)", nullptr, true}},
       {}},
      {"gradcheck",
       "Compare analytic loss and student gradients against central differences",
       {{"loss", "l1, intra, cross or all", "all"},
        {"tokens", "tokens per sample", "12"},
        {"dim", "feature dimension", "8"},
        {"seeds", "number of random seeds", "5"},
        {"h", "finite-difference step", "1e-06"}},
       {}},
      {"pretrain",
       "Distill teacher features into the student over a dataset",
       {{"data", "dataset directory with manifest.txt", nullptr, true},
        {"config", "config file (key = value lines)"},
        {"preset", "named preset (desk or paper)"},
        {"out", "output checkpoint (.ckp1)", nullptr, true}},
       {{"config", "preset"}}},
      {"eval",
       "Measure held-out structure discrepancy of a checkpoint",
       {{"ckpt", "checkpoint (.ckp1)", nullptr, true},
        {"data", "held-out dataset directory", nullptr, true}},
       {}},
      {"probe",
       "Linear-probe token segmentation on frozen student features",
       {{"ckpt", "checkpoint (.ckp1)"},
        {"data", "dataset directory", nullptr, true},
        {"test", "held-out dataset directory (default: last quarter of --data)"},
        {"fraction", "training fraction kept by stride subsampling", "1"},
        {"alpha", "ridge coefficient", "0.001"},
        {"classes", "number of classes", "4"},
        {"seed", "student seed for --random-init without --ckpt", "0"},
        {"random-init", "probe a seeded untrained student instead", nullptr, false, true}},
       {}},
      {"formats-check",
       "Round-trip every EVT1/FTN1/CKP1/PPM/PGM file in a directory",
       {{"dir", "directory to check", nullptr, true, false, true}},
       {}},
      {"dump-config",
       "Print the effective training configuration",
       {{"config", "config file (key = value lines)"},
        {"preset", "named preset (desk or paper)", "desk"}},
       {}},
  };
  return specs;
}

std::string fmt(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", value);
  return buf;
}

double to_real(const Command& c, const std::string& name) {
  try {
    std::size_t used = 0;
    const double v = std::stod(c.flag(name), &used);
    if (used == c.flag(name).size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::parameter, "--" + name + " expects a number, got '" + c.flag(name) + "'");
}

long long to_int(const Command& c, const std::string& name) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(c.flag(name), &used);
    if (used == c.flag(name).size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::parameter, "--" + name + " expects an integer, got '" + c.flag(name) + "'");
}

Tensor volume_tensor(const EventVolume& volume) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(volume.height()), static_cast<std::uint32_t>(volume.width()),
            static_cast<std::uint32_t>(volume.bins())};
  t.values.assign(volume.data().begin(), volume.data().end());
  return t;
}

EventVolume tensor_volume(const Tensor& t) {
  if (t.dims.size() != 3) fail(ErrorKind::format, "volume tensor must be H x W x B");
  return EventVolume(static_cast<int>(t.dims[1]), static_cast<int>(t.dims[0]),
                     static_cast<int>(t.dims[2]), t.values);
}

TrainConfig config_from(const Command& c) {
  if (c.has("config")) return load_config(c.flag("config"));
  return preset(c.has("preset") ? c.flag("preset") : "desk");
}

int cmd_synth(const Command& c, std::ostream& out) {
  DatasetOptions options;
  const long long scenes = to_int(c, "scenes");
  if (scenes < 0) fail(ErrorKind::parameter, "--scenes must be >= 0");
  options.scenes = static_cast<std::size_t>(scenes);
  options.seed = static_cast<std::uint64_t>(to_int(c, "seed"));
  options.width = static_cast<int>(to_int(c, "width"));
  options.height = static_cast<int>(to_int(c, "height"));
  options.contrast = to_real(c, "contrast");
  if (options.width <= 0 || options.height <= 0) fail(ErrorKind::parameter, "resolution must be positive");
  if (!(options.contrast > 0.0)) fail(ErrorKind::parameter, "--contrast must be > 0");
  const Manifest manifest = generate_dataset(options, c.flag("out"));
  out << "scenes\t" << manifest.entries.size() << "\n";
  return 0;
}

int cmd_voxelize(const Command& c, std::ostream& out) {
  EventStream stream = load_events(c.flag("events"), static_cast<int>(to_int(c, "width")),
                                   static_cast<int>(to_int(c, "height")));
  const bool windowed = c.has("window-us") || c.has("count");
  if (windowed) {
    const WindowSpec window = c.has("window-us") ? WindowSpec::fixed_duration(to_int(c, "window-us"))
                                                 : WindowSpec::fixed_count(to_int(c, "count"));
    std::uint64_t anchor = 0;
    if (c.has("anchor")) {
      const long long a = to_int(c, "anchor");
      if (a < 0) fail(ErrorKind::parameter, "--anchor must be >= 0");
      anchor = static_cast<std::uint64_t>(a);
    } else if (!stream.empty()) {
      anchor = window.mode == WindowSpec::Mode::fixed_duration ? stream.events().front().t
                                                               : stream.events().back().t;
    }
    stream = sample_window(stream, window, anchor);
  } else if (c.has("anchor")) {
    fail(ErrorKind::parameter, "--anchor requires --window-us or --count");
  }
  const EventVolume volume = voxelize(stream, static_cast<int>(to_int(c, "bins")));
  save_tensor(volume_tensor(volume), c.flag("out"));
  out << "events\t" << stream.size() << "\n";
  out << "sum\t" << fmt(volume.sum()) << "\n";
  return 0;
}

int cmd_mask(const Command& c, std::ostream& out) {
  const EventVolume volume = tensor_volume(load_tensor(c.flag("volume")));
  const DensityMap density = density_map(volume, static_cast<int>(to_int(c, "patch")));
  const ActivationMask mask = activation_mask(density, to_real(c, "tau"));
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(mask.rows()), static_cast<std::uint32_t>(mask.cols())};
  for (auto v : mask.values()) t.values.push_back(v);
  save_tensor(t, c.flag("out"));
  out << "active\t" << mask.active_count() << "\t" << mask.tokens() << "\n";
  return 0;
}

int cmd_teacher(const Command& c, std::ostream& out) {
  const Frame frame = image_to_frame(decode_netpbm(read_file(c.flag("image"))), 0);
  const TeacherSpec spec = TeacherSpec::create(static_cast<int>(to_int(c, "dim")),
                                               static_cast<std::uint64_t>(to_int(c, "seed")),
                                               static_cast<int>(to_int(c, "radius")));
  const std::string& dtype = c.flag("dtype");
  if (dtype != "f64" && dtype != "f32") fail(ErrorKind::parameter, "--dtype must be f64 or f32");
  const FeatureGrid grid = teacher_forward(spec, frame, static_cast<int>(to_int(c, "patch")));
  save_features(grid, c.flag("out"), dtype == "f32" ? Dtype::f32 : Dtype::f64);
  out << "tokens\t" << grid.rows() << "\t" << grid.cols() << "\t" << grid.dim() << "\n";
  return 0;
}

int cmd_encode(const Command& c, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(c.flag("ckpt"));
  const EventStream events = load_events(c.flag("events"));
  const FeatureGrid grid = student_forward(ckpt.params, voxelize(events, ckpt.params.shape.bins));
  save_features(grid, c.flag("out"), ckpt.config.feature_dtype());
  out << "tokens\t" << grid.rows() << "\t" << grid.cols() << "\t" << grid.dim() << "\n";
  return 0;
}

int cmd_simmap(const Command& c, std::ostream& out) {
  const FeatureGrid grid = load_teacher_features(c.flag("features"));
  const std::string& anchor = c.flag("anchor");
  const auto comma = anchor.find(',');
  if (comma == std::string::npos) fail(ErrorKind::parameter, "--anchor expects mu,nu");
  int mu = 0, nu = 0;
  try {
    std::size_t used_mu = 0, used_nu = 0;
    mu = std::stoi(anchor.substr(0, comma), &used_mu);
    nu = std::stoi(anchor.substr(comma + 1), &used_nu);
    if (used_mu != comma || used_nu != anchor.size() - comma - 1) throw std::invalid_argument("anchor");
  } catch (const std::exception&) {
    fail(ErrorKind::parameter, "--anchor expects integers mu,nu, got '" + anchor + "'");
  }
  const SimilarityMap map = similarity_map(grid, mu, nu);
  write_file(c.flag("out"), encode_netpbm(similarity_image(map)));
  out << "anchor\t" << mu << "\t" << nu << "\n";
  return 0;
}

int cmd_gradcheck(const Command& c, std::ostream& out) {
  GradcheckOptions options;
  options.tokens = static_cast<int>(to_int(c, "tokens"));
  options.dim = static_cast<int>(to_int(c, "dim"));
  options.seeds = static_cast<int>(to_int(c, "seeds"));
  options.h = to_real(c, "h");
  const std::string& which = c.flag("loss");

  std::vector<GradcheckReport> reports;
  const std::pair<const char*, LossKind> kinds[] = {
      {"l1", LossKind::l1}, {"intra", LossKind::intra}, {"cross", LossKind::cross}};
  bool matched = false;
  for (const auto& [name, kind] : kinds) {
    if (which == "all" || which == name) {
      reports.push_back(gradcheck(kind, options));
      matched = true;
    }
  }
  if (!matched) fail(ErrorKind::parameter, "--loss must be l1, intra, cross or all");
  if (which == "all") reports.push_back(gradcheck_student(options));

  bool ok = true;
  out << "loss\tmax_rel_err\tkinks\tchecked\ttotal\n";
  for (const auto& r : reports) {
    out << r.name << '\t' << fmt(r.max_rel_err) << '\t' << r.kink_count << '\t' << r.checked
        << '\t' << r.total << '\n';
    ok = ok && r.max_rel_err < 1e-5;
  }
  return ok ? 0 : 1;
}

int cmd_pretrain(const Command& c, std::ostream& out) {
  const TrainConfig config = config_from(c);
  const Checkpoint ckpt = pretrain_from_directory(c.flag("data"), config, c.flag("out"));
  out << "step\tl1\tintra\tcross\ttotal\n";
  for (const auto& r : ckpt.history) {
    out << r.step << '\t' << fmt(r.l1) << '\t' << fmt(r.intra) << '\t' << fmt(r.cross) << '\t'
        << fmt(r.total) << '\n';
  }
  return 0;
}

int cmd_eval(const Command& c, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(c.flag("ckpt"));
  const auto pairs = load_training_pairs(read_manifest(c.flag("data")), ckpt.config);
  const StructureDiscrepancy d = eval_structure_discrepancy(ckpt.params, pairs);
  out << "gram_err\t" << fmt(d.gram_err) << "\n";
  out << "l1_err\t" << fmt(d.l1_err) << "\n";
  return 0;
}

std::vector<ProbeSample> probe_samples(const Manifest& manifest, int bins, int patch) {
  std::vector<ProbeSample> samples;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const LoadedSample s = load_sample(manifest, i);
    samples.push_back({voxelize(s.events, bins), downsample_labels(s.labels, patch)});
  }
  return samples;
}

int cmd_probe(const Command& c, std::ostream& out) {
  const bool random_init = c.has("random-init");
  StudentParams student;
  if (c.has("ckpt")) {
    const Checkpoint ckpt = load_checkpoint(c.flag("ckpt"));
    student = random_init ? init_student(ckpt.params.shape, ckpt.config.seed) : ckpt.params;
  } else if (random_init) {
    student = init_student(preset("desk").student_shape(), static_cast<std::uint64_t>(to_int(c, "seed")));
  } else {
    fail(ErrorKind::parameter, "probe needs --ckpt (or --random-init)");
  }
  const int bins = student.shape.bins;
  const int patch = student.shape.patch;

  Manifest train = read_manifest(c.flag("data"));
  Manifest test;
  if (c.has("test")) {
    test = read_manifest(c.flag("test"));
  } else {
    if (train.entries.size() < 2) fail(ErrorKind::parameter, "need at least two scenes to hold out a test split");
    const std::size_t held = std::max<std::size_t>(1, train.entries.size() / 4);
    test.root = train.root;
    test.entries.assign(train.entries.end() - static_cast<std::ptrdiff_t>(held), train.entries.end());
    train.entries.resize(train.entries.size() - held);
  }
  train = stride_subsample(train, to_real(c, "fraction"));

  const int classes = static_cast<int>(to_int(c, "classes"));
  const auto train_samples = probe_samples(train, bins, patch);
  const auto test_samples = probe_samples(test, bins, patch);
  const SegmentationScore score =
      evaluate_probe(student, train_samples, test_samples, classes, to_real(c, "alpha"));
  for (int k = 0; k < classes; ++k) {
    const double iou = score.per_class_iou[k];
    out << "iou\t" << k << '\t' << (std::isnan(iou) ? std::string("nan") : fmt(iou)) << '\n';
  }
  out << "miou\t" << fmt(score.miou) << '\n';
  out << "acc\t" << fmt(score.acc) << '\n';
  return 0;
}

int cmd_formats_check(const Command& c, std::ostream& out) {
  bool ok = true;
  for (const auto& entry : formats_check(c.flag("dir"))) {
    out << (entry.ok ? "ok" : "FAIL") << '\t' << entry.file.filename().string();
    if (!entry.detail.empty()) out << '\t' << entry.detail;
    out << '\n';
    ok = ok && entry.ok;
  }
  return ok ? 0 : 1;
}

int cmd_dump_config(const Command& c, std::ostream& out) {
  out << dump_config(config_from(c));
  return 0;
}

}  // namespace

Command parse_args(const std::vector<std::string>& args) {
  CLI::App app{"Structure-aware event/image feature distillation toolkit", "eventdistill"};
  // --help only, so gradcheck can take --h for the finite-difference step
  app.set_help_flag("--help", "Print this help message and exit");
  app.require_subcommand(1);
  app.fallthrough(false);

  struct Bound {
    CLI::App* app;
    const CommandSpec* spec;
  };
  std::vector<Bound> bound;
  for (const auto& spec : command_specs()) {
    CLI::App* sub = app.add_subcommand(spec.name, spec.help);
    for (const auto& f : spec.flags) {
      const std::string long_name = (f.positional ? "" : "--") + std::string(f.name);
      CLI::Option* opt = f.boolean ? sub->add_flag(long_name, f.help) : sub->add_option(long_name, f.help);
      if (f.default_value != nullptr) opt->default_str(f.default_value);
      if (f.required) opt->required();
    }
    for (const auto& [a, b] : spec.exclusive) {
      sub->get_option(std::string("--") + a)->excludes(sub->get_option(std::string("--") + b));
    }
    bound.push_back({sub, &spec});
  }

  Command command;
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  std::ostringstream out, err;
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    command.finished = true;
    command.exit_code = 0;
    command.message = app.help();
    return command;
  } catch (const CLI::ParseError& e) {
    command.finished = true;
    command.exit_code = 1;
    std::string help;
    for (const auto& b : bound) {
      if (b.app->parsed()) help = b.app->help();
    }
    if (help.empty()) help = app.help();
    command.message = std::string("error: ") + e.what() + "\n" + help;
    return command;
  }

  for (const auto& b : bound) {
    if (!b.app->parsed()) continue;
    command.name = b.spec->name;
    for (const auto& f : b.spec->flags) {
      const CLI::Option* opt = b.app->get_option((f.positional ? "" : "--") + std::string(f.name));
      if (f.boolean) {
        if (opt->count() > 0) command.flags[f.name] = "1";
      } else if (!opt->empty()) {
        command.flags[f.name] = opt->results().back();
      } else if (f.default_value != nullptr) {
        command.flags[f.name] = f.default_value;
      }
    }
  }
  return command;
}

int execute(const Command& command, std::ostream& out, std::ostream& err) {
  if (command.finished) {
    (command.exit_code == 0 ? out : err) << command.message;
    return command.exit_code;
  }
  try {
    const std::string& n = command.name;
    if (n == "synth") return cmd_synth(command, out);
    if (n == "voxelize") return cmd_voxelize(command, out);
    if (n == "mask") return cmd_mask(command, out);
    if (n == "teacher") return cmd_teacher(command, out);
    if (n == "encode") return cmd_encode(command, out);
    if (n == "simmap") return cmd_simmap(command, out);
    if (n == "gradcheck") return cmd_gradcheck(command, out);
    if (n == "pretrain") return cmd_pretrain(command, out);
    if (n == "eval") return cmd_eval(command, out);
    if (n == "probe") return cmd_probe(command, out);
    if (n == "formats-check") return cmd_formats_check(command, out);
    if (n == "dump-config") return cmd_dump_config(command, out);
    err << "error: unknown command '" << n << "'\n";
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return execute(parse_args(args), out, err);
}

std::vector<FormatCheckEntry> formats_check(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) fail(ErrorKind::io, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".evt1" || ext == ".ftn" || ext == ".ckp1" || ext == ".ppm" || ext == ".pgm") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  std::vector<FormatCheckEntry> report;
  for (const auto& file : files) {
    FormatCheckEntry entry{file, false, {}};
    try {
      const Bytes original = read_file(file);
      const std::string ext = file.extension().string();
      Bytes again;
      if (ext == ".evt1") {
        again = encode_evt1(decode_evt1(original));
      } else if (ext == ".ftn") {
        again = encode_ftn(decode_ftn(original));
      } else if (ext == ".ckp1") {
        again = encode_ckp1(decode_ckp1(original));
      } else {
        again = encode_netpbm(decode_netpbm(original));
      }
      entry.ok = again == original;
      if (!entry.ok) entry.detail = "re-encoded bytes differ";
    } catch (const Error& e) {
      entry.detail = e.what();
    }
    report.push_back(std::move(entry));
  }
  return report;
}

}  // namespace eventdistill
