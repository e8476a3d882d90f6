#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "eventdistill/error.hpp"
#include "eventdistill/features.hpp"
#include "eventdistill/formats.hpp"
#include "eventdistill/rng.hpp"

using namespace eventdistill;
namespace fs = std::filesystem;

namespace {

EventVolume random_volume(std::uint64_t seed, int w, int h, int bins) {
  Rng rng(seed);
  EventVolume v(w, h, bins);
  for (auto& x : v.data()) x = rng.uniform() < 0.3 ? rng.uniform(-3.0, 3.0) : 0.0;
  return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  return dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
}

// Forward pass for one token written directly from the layer definitions.
std::vector<double> reference_token(const StudentParams& p, const EventVolume& v, int mu, int nu) {
  const int P = p.shape.patch;
  std::vector<double> x;
  for (int y = 0; y < P; ++y)
    for (int xx = 0; xx < P; ++xx)
      for (int b = 0; b < p.shape.bins; ++b) x.push_back(v.at(mu * P + y, nu * P + xx, b));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const DenseLayer& L = p.layers[l];
    std::vector<double> out(L.outputs);
    for (int o = 0; o < L.outputs; ++o) {
      double s = L.bias[o];
      for (int i = 0; i < L.inputs; ++i) s += L.weight[o * L.inputs + i] * x[i];
      out[o] = (l + 1 < p.layers.size()) ? std::tanh(s) : s;
    }
    x = out;
  }
  return x;
}

Frame two_colour_frame() {
  // 4 x 2 patches of 4 px; left half red, right half blue.
  Frame f{16, 8, 0, std::vector<double>(16 * 8 * 3)};
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 16; ++x) {
      double* p = f.rgb.data() + (y * 16 + x) * 3;
      p[0] = x < 8 ? 0.9 : 0.05;
      p[1] = 0.1;
      p[2] = x < 8 ? 0.05 : 0.9;
    }
  }
  return f;
}

}  // namespace

TEST_CASE("FeatureGrid token order is row-major with nu fastest") {
  FeatureGrid g(2, 3, 2);
  for (std::size_t i = 0; i < g.data().size(); ++i) g.data()[i] = static_cast<double>(i);
  CHECK(g.tokens() == 6);
  CHECK(g.token(4)[0] == g.at(1, 1, 0));
  CHECK(g.at(0, 2, 1) == 5.0);
  CHECK_THROWS_AS(FeatureGrid(2, 2, 2, std::vector<double>(7)), Error);
}

TEST_CASE("student_forward") {
  SUBCASE("zero volume with zero biases gives zero features") {
    const StudentParams p = init_student({4, 3, 6, 5}, 1);
    const FeatureGrid g = student_forward(p, EventVolume(8, 12, 3));
    CHECK(g.rows() == 3);
    CHECK(g.cols() == 2);
    CHECK(g.dim() == 5);
    CHECK(std::all_of(g.data().begin(), g.data().end(), [](double x) { return x == 0.0; }));
  }
  SUBCASE("linear model on a unit impulse returns a weight column plus bias") {
    StudentParams p = init_student({2, 2, 0, 3}, 4);
    REQUIRE(p.layers.size() == 1);
    p.layers[0].bias = {0.5, -1.0, 2.0};
    EventVolume v(4, 2, 2);
    v.at(1, 3, 1) = 1.0;  // patch (0, 1), local y 1, x 1, b 1 -> input index (1*2+1)*2+1 = 7
    const FeatureGrid g = student_forward(p, v);
    for (int d = 0; d < 3; ++d) {
      CHECK(g.at(0, 1, d) == doctest::Approx(p.layers[0].weight[d * 8 + 7] + p.layers[0].bias[d]));
      CHECK(g.at(0, 0, d) == p.layers[0].bias[d]);
    }
  }
  SUBCASE("linear model without bias is linear in the patch") {
    const StudentParams p = init_student({4, 3, 0, 6}, 2);
    const EventVolume v = random_volume(3, 8, 8, 3);
    std::vector<double> doubled(v.data().begin(), v.data().end());
    for (auto& x : doubled) x *= 2.0;
    const FeatureGrid a = student_forward(p, v);
    const FeatureGrid b = student_forward(p, EventVolume(8, 8, 3, doubled));
    for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(b.data()[i] == doctest::Approx(2.0 * a.data()[i]));
  }
  SUBCASE("matches the per-token reference for the MLP") {
    StudentParams p = init_student({4, 2, 5, 3}, 9);
    Rng rng(1);
    for (auto& layer : p.layers)
      for (auto& b : layer.bias) b = rng.normal();
    const EventVolume v = random_volume(11, 12, 8, 2);
    const FeatureGrid g = student_forward(p, v);
    for (int mu = 0; mu < 2; ++mu) {
      for (int nu = 0; nu < 3; ++nu) {
        const auto ref = reference_token(p, v, mu, nu);
        for (int d = 0; d < 3; ++d) CHECK(g.at(mu, nu, d) == doctest::Approx(ref[d]).epsilon(1e-12));
      }
    }
  }
  SUBCASE("shape mismatches") {
    const StudentParams p = init_student({4, 3, 0, 2}, 1);
    CHECK_THROWS_AS(student_forward(p, EventVolume(8, 8, 2)), Error);
    CHECK_THROWS_AS(student_forward(p, EventVolume(6, 8, 3)), Error);
  }
}

TEST_CASE("init_student") {
  const StudentParams p = init_student({16, 3, 32, 16}, 0);
  REQUIRE(p.layers.size() == 2);
  CHECK(p.layers[0].inputs == 768);
  CHECK(p.layers[0].outputs == 32);
  CHECK(p.layers[1].inputs == 32);
  CHECK(p.layers[1].outputs == 16);
  CHECK(p.parameter_count() == 768 * 32 + 32 + 32 * 16 + 16);
  const double bound0 = std::sqrt(6.0 / (768 + 32));
  for (double w : p.layers[0].weight) CHECK(std::abs(w) <= bound0);
  for (double b : p.layers[1].bias) CHECK(b == 0.0);
  CHECK(init_student({16, 3, 32, 16}, 0) == p);
  CHECK_FALSE(init_student({16, 3, 32, 16}, 1) == p);
  CHECK(init_student({16, 3, 0, 16}, 0).layers.size() == 1);
}

TEST_CASE("student_backward") {
  SUBCASE("zero upstream gradient") {
    const StudentParams p = init_student({4, 3, 5, 4}, 3);
    const EventVolume v = random_volume(1, 8, 8, 3);
    const StudentParams g = student_backward(p, v, FeatureGrid(2, 2, 4));
    for (const auto& layer : g.layers) {
      CHECK(std::all_of(layer.weight.begin(), layer.weight.end(), [](double x) { return x == 0.0; }));
      CHECK(std::all_of(layer.bias.begin(), layer.bias.end(), [](double x) { return x == 0.0; }));
    }
  }
  SUBCASE("linear model with one token: weight gradient is outer(g, input)") {
    const StudentParams p = init_student({2, 2, 0, 3}, 5);
    const EventVolume v = random_volume(2, 2, 2, 2);
    const FeatureGrid up(1, 1, 3, {0.5, -2.0, 1.0});
    const StudentParams g = student_backward(p, v, up);
    std::vector<double> x(8);
    extract_patch(v, 2, 0, 0, x);
    for (int o = 0; o < 3; ++o) {
      for (int i = 0; i < 8; ++i) CHECK(g.layers[0].weight[o * 8 + i] == doctest::Approx(up.data()[o] * x[i]));
      CHECK(g.layers[0].bias[o] == up.data()[o]);
    }
  }
  SUBCASE("central differences agree for linear and MLP students") {
    for (int hidden : {0, 4}) {
      StudentParams p = init_student({2, 2, hidden, 3}, 7);
      Rng rng(40 + hidden);
      for (auto& layer : p.layers)
        for (auto& b : layer.bias) b = rng.normal();
      const EventVolume v = random_volume(8, 4, 6, 2);
      FeatureGrid up(3, 2, 3);
      for (auto& x : up.data()) x = rng.normal();
      const auto objective = [&](const StudentParams& q) {
        const FeatureGrid out = student_forward(q, v);
        return dot(out.data(), up.data());
      };
      const StudentParams g = student_backward(p, v, up);
      const double h = 1e-6;
      double worst = 0.0;
      for (std::size_t l = 0; l < p.layers.size(); ++l) {
        for (int which = 0; which < 2; ++which) {
          auto& values = which == 0 ? p.layers[l].weight : p.layers[l].bias;
          const auto& analytic = which == 0 ? g.layers[l].weight : g.layers[l].bias;
          for (std::size_t i = 0; i < values.size(); ++i) {
            const double keep = values[i];
            values[i] = keep + h;
            const double fp = objective(p);
            values[i] = keep - h;
            const double fm = objective(p);
            values[i] = keep;
            const double numeric = (fp - fm) / (2 * h);
            worst = std::max(worst, std::abs(numeric - analytic[i]) /
                                        std::max({std::abs(numeric), std::abs(analytic[i]), 1.0}));
          }
        }
      }
      CHECK(worst < 1e-6);
    }
  }
  SUBCASE("shape mismatch") {
    const StudentParams p = init_student({2, 2, 0, 3}, 5);
    CHECK_THROWS_AS(student_backward(p, EventVolume(4, 4, 2), FeatureGrid(2, 2, 4)), Error);
  }
}

TEST_CASE("teacher projection") {
  for (int dim : {2, 5, 16}) {
    const TeacherSpec spec = TeacherSpec::create(dim, 7);
    REQUIRE(spec.projection.size() == static_cast<std::size_t>(dim) * 5);
    const auto at = [&](int r, int c) { return spec.projection[r * 5 + c]; };
    if (dim >= 5) {
      for (int a = 0; a < 5; ++a) {
        for (int b = 0; b < 5; ++b) {
          double s = 0.0;
          for (int r = 0; r < dim; ++r) s += at(r, a) * at(r, b);
          CHECK(std::abs(s - (a == b ? 1.0 : 0.0)) < 1e-10);
        }
      }
    } else {
      for (int a = 0; a < dim; ++a) {
        for (int b = 0; b < dim; ++b) {
          double s = 0.0;
          for (int c = 0; c < 5; ++c) s += at(a, c) * at(b, c);
          CHECK(std::abs(s - (a == b ? 1.0 : 0.0)) < 1e-10);
        }
      }
    }
    CHECK(TeacherSpec::create(dim, 7).projection == spec.projection);
  }
  CHECK(TeacherSpec::create(16, 7).projection != TeacherSpec::create(16, 8).projection);
  CHECK_THROWS_AS(TeacherSpec::create(0, 1), Error);
  CHECK_THROWS_AS(TeacherSpec::create(4, 1, -1), Error);
}

TEST_CASE("teacher_forward") {
  SUBCASE("matches descriptor, projection and box smoothing computed by hand") {
    Rng rng(3);
    Frame f{12, 8, 0, std::vector<double>(12 * 8 * 3)};
    for (auto& v : f.rgb) v = rng.uniform();
    const TeacherSpec spec = TeacherSpec::create(6, 11, 1);
    const FeatureGrid g = teacher_forward(spec, f, 4);
    REQUIRE(g.rows() == 2);
    REQUIRE(g.cols() == 3);
    // Raw projected tokens.
    std::vector<std::vector<double>> raw(6, std::vector<double>(6, 0.0));
    for (int mu = 0; mu < 2; ++mu) {
      for (int nu = 0; nu < 3; ++nu) {
        double desc[5] = {0, 0, 0, mu / 2.0, nu / 3.0};
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) desc[c] += f.pixel(mu * 4 + y, nu * 4 + x)[c] / 16.0;
        for (int d = 0; d < 6; ++d)
          for (int k = 0; k < 5; ++k) raw[mu * 3 + nu][d] += spec.projection[d * 5 + k] * desc[k];
      }
    }
    for (int mu = 0; mu < 2; ++mu) {
      for (int nu = 0; nu < 3; ++nu) {
        for (int d = 0; d < 6; ++d) {
          double s = 0.0;
          int n = 0;
          for (int a = std::max(0, mu - 1); a <= std::min(1, mu + 1); ++a)
            for (int b = std::max(0, nu - 1); b <= std::min(2, nu + 1); ++b, ++n) s += raw[a * 3 + b][d];
          CHECK(g.at(mu, nu, d) == doctest::Approx(s / n).epsilon(1e-12));
        }
      }
    }
  }
  SUBCASE("uniform frame with r = 0: tokens differ only through position") {
    Frame f{16, 16, 0, std::vector<double>(16 * 16 * 3, 0.4)};
    const TeacherSpec spec = TeacherSpec::create(8, 7, 0);
    const FeatureGrid g = teacher_forward(spec, f, 4);
    for (int mu = 0; mu < 4; ++mu) {
      for (int nu = 0; nu < 4; ++nu) {
        for (int d = 0; d < 8; ++d) {
          const double expected = g.at(0, 0, d) + spec.projection[d * 5 + 3] * (mu / 4.0) +
                                  spec.projection[d * 5 + 4] * (nu / 4.0);
          CHECK(g.at(mu, nu, d) == doctest::Approx(expected).epsilon(1e-12));
        }
      }
    }
  }
  SUBCASE("same colour neighbours are more similar than different colours") {
    const FeatureGrid g = teacher_forward(TeacherSpec::create(16, 7, 0), two_colour_frame(), 4);
    const double same = cosine(g.token(0 * 4 + 0), g.token(0 * 4 + 1));
    const double different = cosine(g.token(0 * 4 + 1), g.token(0 * 4 + 2));
    CHECK(same > different);
  }
  SUBCASE("deterministic") {
    const TeacherSpec spec = TeacherSpec::create(16, 7);
    CHECK(teacher_forward(spec, two_colour_frame(), 4) == teacher_forward(spec, two_colour_frame(), 4));
  }
  SUBCASE("mirroring the frame mirrors tokens once position is mirrored too (r = 0)") {
    Rng rng(6);
    Frame f{16, 8, 0, std::vector<double>(16 * 8 * 3)};
    for (auto& v : f.rgb) v = rng.uniform();
    Frame m = f;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c) m.rgb[(y * 16 + x) * 3 + c] = f.rgb[(y * 16 + (15 - x)) * 3 + c];
    const TeacherSpec spec = TeacherSpec::create(7, 2, 0);
    const FeatureGrid a = teacher_forward(spec, f, 4), b = teacher_forward(spec, m, 4);
    const int cols = 4;
    for (int mu = 0; mu < 2; ++mu) {
      for (int nu = 0; nu < cols; ++nu) {
        const int mirrored = cols - 1 - nu;
        for (int d = 0; d < 7; ++d) {
          // Only the nu / W' coordinate changes between the two tokens.
          const double shift = spec.projection[d * 5 + 4] * (static_cast<double>(nu) - mirrored) / cols;
          CHECK(b.at(mu, nu, d) == doctest::Approx(a.at(mu, mirrored, d) + shift).epsilon(1e-12));
        }
      }
    }
  }
  CHECK_THROWS_AS(teacher_forward(TeacherSpec::create(4, 1), two_colour_frame(), 3), Error);
}

TEST_CASE("feature files") {
  const fs::path dir = fs::temp_directory_path() / "eventdistill_unit_features";
  fs::create_directories(dir);
  Rng rng(2);
  FeatureGrid g(2, 2, 4);
  for (auto& x : g.data()) x = rng.normal();

  save_features(g, dir / "g.ftn");
  CHECK(load_teacher_features(dir / "g.ftn") == g);
  CHECK(read_file(dir / "g.ftn").size() == ftn_header_size(3) + 2 * 2 * 4 * 8);

  const Bytes bytes = read_file(dir / "g.ftn");
  write_file(dir / "cut.ftn", Bytes(bytes.begin(), bytes.end() - 5));
  try {
    load_teacher_features(dir / "cut.ftn");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
  }

  save_features(g, dir / "g32.ftn", Dtype::f32);
  const FeatureGrid narrow = load_teacher_features(dir / "g32.ftn");
  for (std::size_t i = 0; i < g.data().size(); ++i) {
    CHECK(narrow.data()[i] == static_cast<double>(static_cast<float>(g.data()[i])));
  }

  Tensor flat;
  flat.dims = {4};
  flat.values = {1, 2, 3, 4};
  CHECK_THROWS_AS(feature_grid_from(flat), Error);
}

TEST_CASE("similarity_map") {
  SUBCASE("two-token example") {
    const FeatureGrid g(1, 2, 2, {1.0, 0.0, 1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0)});
    const SimilarityMap m = similarity_map(g, 0, 0);
    CHECK(m.at(0, 0) == 1.0);
    CHECK(m.at(0, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  }
  SUBCASE("orthogonal tokens give zero, zero tokens give zero") {
    const FeatureGrid g(1, 3, 2, {0.0, 3.0, 2.0, 0.0, 0.0, 0.0});
    const SimilarityMap m = similarity_map(g, 0, 0);
    CHECK(m.at(0, 1) == 0.0);
    CHECK(m.at(0, 2) == 0.0);
  }
  SUBCASE("bounded and exactly one at the anchor on random grids") {
    Rng rng(13);
    FeatureGrid g(5, 6, 9);
    for (auto& x : g.data()) x = rng.normal();
    const SimilarityMap m = similarity_map(g, 2, 3);
    CHECK(m.at(2, 3) == 1.0);
    for (double v : m.values) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    const FeatureGrid same(1, 2, 3, {1e-3, 2e-3, -5e-4, 1e-3, 2e-3, -5e-4});
    CHECK(similarity_map(same, 0, 1).at(0, 0) <= 1.0);
  }
  SUBCASE("errors") {
    const FeatureGrid g(1, 2, 2, {0.0, 0.0, 1.0, 1.0});
    try {
      similarity_map(g, 0, 0);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::degenerate_anchor);
    }
    CHECK_THROWS_AS(similarity_map(g, 1, 0), Error);
    CHECK_THROWS_AS(similarity_map(g, 0, 2), Error);
  }
  SUBCASE("image rescales [-1, 1] to [0, 255]") {
    SimilarityMap m{1, 3, {-1.0, 0.0, 1.0}};
    const NetpbmImage img = similarity_image(m);
    CHECK(img.channels == 1);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 128, 255});
  }
}
