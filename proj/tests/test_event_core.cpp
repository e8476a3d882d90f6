#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "eventdistill/error.hpp"
#include "eventdistill/event_core.hpp"
#include "eventdistill/parallel.hpp"
#include "eventdistill/rng.hpp"

using namespace eventdistill;

namespace {

EventRecord ev(int x, int y, int p, std::uint64_t t) {
  return {static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), static_cast<std::int8_t>(p), t};
}

std::vector<std::uint64_t> times(const EventStream& s) {
  std::vector<std::uint64_t> out;
  for (const auto& e : s.events()) out.push_back(e.t);
  return out;
}

EventStream random_stream(std::uint64_t seed, int w, int h, std::size_t n, std::uint64_t max_gap) {
  Rng rng(seed);
  std::vector<EventRecord> events(n);
  std::uint64_t t = rng.below(1000);
  for (auto& e : events) {
    t += rng.below(max_gap + 1);
    e = ev(static_cast<int>(rng.below(w)), static_cast<int>(rng.below(h)), rng.below(2) ? 1 : -1, t);
  }
  return EventStream(w, h, events);
}

// Straightforward per-event accumulation written from the definition.
std::vector<double> reference_voxels(const EventStream& s, int bins) {
  std::vector<double> out(static_cast<std::size_t>(s.width()) * s.height() * bins, 0.0);
  if (s.empty()) return out;
  const double t0 = static_cast<double>(s.events().front().t);
  const double t1 = static_cast<double>(s.events().back().t);
  for (const auto& e : s.events()) {
    const double ts = (t1 == t0 || bins == 1) ? 0.0 : (bins - 1) * (e.t - t0) / (t1 - t0);
    for (int b = 0; b < bins; ++b) {
      const double w = std::max(0.0, 1.0 - std::abs(b - ts));
      out[(static_cast<std::size_t>(e.y) * s.width() + e.x) * bins + b] += e.p * w;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("event stream validates its records") {
  CHECK_NOTHROW(EventStream(4, 3, {ev(0, 0, 1, 5), ev(3, 2, -1, 5), ev(1, 1, 1, 9)}));
  CHECK_THROWS_AS(EventStream(4, 3, {ev(4, 0, 1, 0)}), Error);
  CHECK_THROWS_AS(EventStream(4, 3, {ev(0, 3, 1, 0)}), Error);
  CHECK_THROWS_AS(EventStream(4, 3, {ev(0, 0, 0, 0)}), Error);
  CHECK_THROWS_AS(EventStream(4, 3, {ev(0, 0, 1, 10), ev(0, 0, 1, 9)}), Error);
  CHECK_THROWS_AS(EventStream(-1, 3, {}), Error);
}

TEST_CASE("sample_window") {
  const EventStream s(8, 8, {ev(0, 0, 1, 10), ev(1, 0, -1, 20), ev(2, 0, 1, 30)});

  SUBCASE("empty stream gives empty window") {
    const EventStream empty(8, 8, {});
    CHECK(sample_window(empty, WindowSpec::fixed_duration(100), 0).empty());
    CHECK(sample_window(empty, WindowSpec::fixed_count(3), 100).empty());
  }
  SUBCASE("fixed duration is half-open") {
    CHECK(times(sample_window(s, WindowSpec::fixed_duration(15), 10)) == std::vector<std::uint64_t>{10, 20});
    CHECK(times(sample_window(s, WindowSpec::fixed_duration(10), 10)) == std::vector<std::uint64_t>{10});
    CHECK(sample_window(s, WindowSpec::fixed_duration(5), 31).empty());
  }
  SUBCASE("fixed count takes the most recent events up to the anchor") {
    CHECK(times(sample_window(s, WindowSpec::fixed_count(2), 30)) == std::vector<std::uint64_t>{20, 30});
    CHECK(times(sample_window(s, WindowSpec::fixed_count(2), 25)) == std::vector<std::uint64_t>{10, 20});
    CHECK(times(sample_window(s, WindowSpec::fixed_count(10), 30)) == std::vector<std::uint64_t>{10, 20, 30});
    CHECK(sample_window(s, WindowSpec::fixed_count(1), 5).empty());
  }
  SUBCASE("geometry and order are preserved") {
    const EventStream w = sample_window(s, WindowSpec::fixed_duration(100), 0);
    CHECK(w == s);
  }
  SUBCASE("invalid parameters") {
    CHECK_THROWS_AS(WindowSpec::fixed_duration(0), Error);
    CHECK_THROWS_AS(WindowSpec::fixed_duration(-5), Error);
    CHECK_THROWS_AS(WindowSpec::fixed_count(0), Error);
    try {
      WindowSpec::fixed_count(0);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::parameter);
    }
  }
}

TEST_CASE("voxelize examples") {
  SUBCASE("empty stream") {
    const EventVolume v = voxelize(EventStream(5, 4, {}), 3);
    CHECK(v.width() == 5);
    CHECK(v.height() == 4);
    CHECK(v.bins() == 3);
    CHECK(std::all_of(v.data().begin(), v.data().end(), [](double x) { return x == 0.0; }));
  }
  SUBCASE("single event goes to bin 0") {
    const EventVolume v = voxelize(EventStream(5, 4, {ev(2, 3, 1, 777)}), 3);
    CHECK(v.at(3, 2, 0) == 1.0);
    CHECK(v.sum() == 1.0);
  }
  SUBCASE("two events at the ends of the window") {
    const EventVolume v = voxelize(EventStream(5, 4, {ev(0, 0, 1, 0), ev(1, 1, 1, 100)}), 3);
    CHECK(v.at(0, 0, 0) == 1.0);
    CHECK(v.at(1, 1, 2) == 1.0);
    CHECK(v.at(1, 1, 1) == 0.0);
    CHECK(v.sum() == 2.0);
  }
  SUBCASE("midpoint event splits between neighbouring bins") {
    // t* = 2 * 25 / 100 = 0.5
    const EventVolume v = voxelize(EventStream(2, 2, {ev(0, 0, 1, 0), ev(1, 0, -1, 25), ev(0, 1, 1, 100)}), 3);
    CHECK(v.at(0, 1, 0) == doctest::Approx(-0.5));
    CHECK(v.at(0, 1, 1) == doctest::Approx(-0.5));
    CHECK(v.at(0, 1, 2) == 0.0);
  }
  SUBCASE("B = 1 puts everything in the only bin") {
    const EventVolume v = voxelize(EventStream(2, 2, {ev(0, 0, 1, 0), ev(0, 0, 1, 50), ev(0, 0, -1, 100)}), 1);
    CHECK(v.at(0, 0, 0) == 1.0);
  }
  CHECK_THROWS_AS(voxelize(EventStream(2, 2, {}), 0), Error);
}

TEST_CASE("voxelize matches a per-event reference") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const EventStream s = random_stream(seed, 13, 7, 500, 40);
    for (int bins : {1, 2, 3, 5, 9}) {
      const EventVolume v = voxelize(s, bins);
      const auto ref = reference_voxels(s, bins);
      REQUIRE(v.data().size() == ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(v.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("voxel conservation holds for large random streams") {
  for (std::uint64_t seed : {3u, 17u, 99u}) {
    const EventStream s = random_stream(seed, 64, 48, 10000, 30);
    long long polarity = 0;
    for (const auto& e : s.events()) polarity += e.p;
    for (int bins : {1, 3, 5}) CHECK(std::abs(voxelize(s, bins).sum() - polarity) <= 1e-9);
  }
}

TEST_CASE("every event touches at most two adjacent bins with weights summing to one") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int bins = 1 + static_cast<int>(rng.below(7));
    const std::uint64_t t = rng.below(1000);
    const EventStream s(3, 1, {ev(0, 0, 1, 0), ev(1, 0, 1, t), ev(2, 0, 1, 1000)});
    const EventVolume v = voxelize(s, bins);
    double total = 0.0;
    int touched = 0, first = -1, last = -1;
    for (int b = 0; b < bins; ++b) {
      const double w = v.at(0, 1, b);
      CHECK(w >= 0.0);
      total += w;
      if (w != 0.0) {
        ++touched;
        if (first < 0) first = b;
        last = b;
      }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(touched <= 2);
    CHECK(last - first <= 1);
  }
}

TEST_CASE("voxelize is invariant to reordering events that share a timestamp") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    EventStream s = random_stream(100 + trial, 9, 9, 400, 2);
    std::vector<EventRecord> events(s.events().begin(), s.events().end());
    // Shuffle inside every run of equal timestamps.
    std::size_t start = 0;
    while (start < events.size()) {
      std::size_t end = start;
      while (end < events.size() && events[end].t == events[start].t) ++end;
      for (std::size_t i = end - 1; i > start; --i) {
        std::swap(events[i], events[start + rng.below(i - start + 1)]);
      }
      start = end;
    }
    const EventStream shuffled(9, 9, events);
    CHECK(voxelize(shuffled, 3) == voxelize(s, 3));
  }
}

TEST_CASE("voxelize is independent of the worker count") {
  const EventStream s = random_stream(42, 32, 32, 20000, 5);
  const unsigned saved = worker_count();
  set_worker_count(1);
  const EventVolume one = voxelize(s, 3);
  set_worker_count(4);
  const EventVolume four = voxelize(s, 3);
  set_worker_count(saved);
  CHECK(one == four);
}

TEST_CASE("density_map") {
  SUBCASE("zero volume") {
    const DensityMap d = density_map(EventVolume(32, 16, 3), 16);
    CHECK(d.rows() == 1);
    CHECK(d.cols() == 2);
    CHECK(d.at(0, 0) == 0.0);
    CHECK(d.at(0, 1) == 0.0);
  }
  SUBCASE("absolute values are summed per cell") {
    EventVolume v(4, 4, 2);
    v.at(0, 0, 0) = 4.0;
    v.at(0, 0, 1) = 2.0;
    v.at(0, 1, 0) = 2.0;
    v.at(0, 1, 1) = 2.0;
    v.at(1, 0, 0) = -3.0;
    v.at(1, 1, 1) = -2.0;  // 10 positive and 5 negative units in distinct cells
    const DensityMap d = density_map(v, 2);
    CHECK(d.at(0, 0) == 15.0);
    CHECK(d.at(1, 1) == 0.0);
  }
  SUBCASE("fractional negative cell contributes its magnitude") {
    EventVolume v(2, 2, 3);
    v.at(1, 0, 2) = -0.5;
    CHECK(density_map(v, 2).at(0, 0) == 0.5);
  }
  SUBCASE("negating the volume leaves density unchanged") {
    const EventVolume v = voxelize(random_stream(4, 32, 16, 3000, 7), 3);
    std::vector<double> neg(v.data().begin(), v.data().end());
    for (auto& x : neg) x = -x;
    const DensityMap a = density_map(v, 8);
    const DensityMap b = density_map(EventVolume(32, 16, 3, neg), 8);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end()));
    CHECK(std::all_of(a.data().begin(), a.data().end(), [](double x) { return x >= 0.0; }));
  }
  SUBCASE("non-divisible geometry is a dimension error") {
    try {
      density_map(EventVolume(20, 16, 3), 16);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::dimension);
    }
    CHECK_THROWS_AS(density_map(EventVolume(16, 16, 3), 0), Error);
  }
}

TEST_CASE("activation_mask") {
  CHECK(activation_mask(DensityMap(1, 1, 16, {64.0}), 64.0).active(0));
  CHECK_FALSE(activation_mask(DensityMap(1, 1, 16, {63.999}), 64.0).active(0));
  CHECK(activation_mask(DensityMap(1, 1, 16, {64.0}), 64.0).tau() == 64.0);

  const DensityMap zeros(2, 3, 16, std::vector<double>(6, 0.0));
  CHECK(activation_mask(zeros, 0.0).active_count() == 6);

  try {
    activation_mask(zeros, -1.0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parameter);
  }

  SUBCASE("monotone in tau") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> d(30);
      for (auto& x : d) x = rng.uniform(0.0, 200.0);
      const DensityMap density(5, 6, 16, d);
      double lo = rng.uniform(0.0, 150.0), hi = lo + rng.uniform(0.0, 50.0);
      const ActivationMask a = activation_mask(density, lo), b = activation_mask(density, hi);
      for (std::size_t i = 0; i < d.size(); ++i) {
        if (b.active(i)) CHECK(a.active(i));
        CHECK(a.active(i) == (d[i] >= lo));
      }
    }
  }
}

TEST_CASE("default constants") {
  CHECK(kDefaultBins == 3);
  CHECK(kDefaultPatch == 16);
  CHECK(kDefaultTau == 64.0);
}
