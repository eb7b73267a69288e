#include <cmath>

#include "doctest.h"
#include "echo/problem.hpp"
#include "test_util.hpp"

using namespace echo;

TEST_CASE("generation is deterministic under a seed") {
  const Instance a = test::random_instance(3, 60, 7);
  const Instance b = test::random_instance(3, 60, 7);
  const Instance c = test::random_instance(3, 60, 8);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.id == "u-m3-n60-s7");
  CHECK(a.n_customers() == 60);
  CHECK(a.n_vehicles() == 3);
}

TEST_CASE("generated values stay inside the configured ranges") {
  for (auto dist : {Distribution::uniform, Distribution::clustered}) {
    const Instance inst = test::random_instance(5, 100, 3, dist);
    CHECK(inst.distribution == dist);
    for (std::size_t j = 0; j < inst.n_nodes(); ++j) {
      const Point p = inst.node(j);
      CHECK(p.x >= 0.0);
      CHECK(p.x <= 1.0);
      CHECK(p.y >= 0.0);
      CHECK(p.y <= 1.0);
    }
    for (const auto& c : inst.customers) {
      CHECK(c.demand >= 1);
      CHECK(c.demand <= 9);
    }
    for (const auto& v : inst.vehicles) {
      CHECK(v.capacity >= 20);
      CHECK(v.capacity <= 40);
      CHECK(v.speed >= 0.5);
      CHECK(v.speed <= 1.0);
    }
  }
}

TEST_CASE("clustered instances are tagged and concentrated") {
  const Instance inst = test::random_instance(3, 200, 11, Distribution::clustered);
  CHECK(inst.id.rfind("c-", 0) == 0);
  // With three tight clusters most customer pairs are either very close or far apart.
  double near = 0;
  for (std::size_t a = 0; a < inst.customers.size(); ++a)
    for (std::size_t b = a + 1; b < inst.customers.size(); ++b)
      if (std::hypot(inst.customers[a].x - inst.customers[b].x,
                     inst.customers[a].y - inst.customers[b].y) < 0.2)
        ++near;
  const double pairs = 200.0 * 199.0 / 2.0;
  CHECK(near / pairs > 0.25);
}

TEST_CASE("generator rejects unsolvable capacity ranges unless allowed") {
  GenConfig g;
  g.capacity_range = {5, 10};
  CHECK_THROWS_AS(generate_instance(g), ValidationError);
  g.allow_unsolvable = true;
  g.capacity_range = {9, 10};
  CHECK_NOTHROW(generate_instance(g));
  GenConfig bad;
  bad.n_customers = 0;
  CHECK_THROWS_AS(validate(bad), ValidationError);
}

TEST_CASE("instance validation names the violated invariant") {
  Instance inst = test::make_instance({0.5, 0.5}, {{0.1, 0.1, 3}}, {{10, 1.0}});
  CHECK_NOTHROW(validate(inst));
  inst.customers[0].demand = 11;
  CHECK_THROWS_WITH_AS(validate(inst), doctest::Contains("exceeds every vehicle capacity"), ValidationError);
  inst.customers[0].demand = 0;
  CHECK_THROWS_AS(validate(inst), ValidationError);
  inst.customers[0].demand = 1;
  inst.vehicles[0].speed = 0.0;
  CHECK_THROWS_WITH_AS(validate(inst), doctest::Contains("speed"), ValidationError);
  inst.vehicles.clear();
  CHECK_THROWS_AS(validate(inst), ValidationError);
}

TEST_CASE("distance matrix matches the Euclidean formula and is symmetric") {
  const Instance inst = test::random_instance(2, 30, 5);
  const DistanceMatrix d(inst);
  REQUIRE(d.size() == 31);
  for (std::size_t a = 0; a < d.size(); ++a) {
    CHECK(d(a, a) == 0.0);
    for (std::size_t b = 0; b < d.size(); ++b) {
      const Point pa = inst.node(a), pb = inst.node(b);
      const double expect = std::sqrt((pa.x - pb.x) * (pa.x - pb.x) + (pa.y - pb.y) * (pa.y - pb.y));
      CHECK(d(a, b) == doctest::Approx(expect).epsilon(1e-14));
      CHECK(d(a, b) == d(b, a));
    }
  }
}

TEST_CASE("instance JSON round trip is exact") {
  test::TempDir dir("problem");
  for (auto dist : {Distribution::uniform, Distribution::clustered}) {
    const Instance inst = test::random_instance(4, 25, 99, dist);
    write_instance(inst, dir / "a.json");
    const Instance back = read_instance(dir / "a.json");
    CHECK(back == inst);
    write_instance(back, dir / "b.json");
    CHECK(test::read_bytes(dir / "a.json") == test::read_bytes(dir / "b.json"));
  }
}

TEST_CASE("malformed instance files are rejected") {
  test::TempDir dir("problem-bad");
  write_text_file(dir / "x.json", "{\"format_version\": 1, \"id\": \"x\"}");
  CHECK_THROWS_AS(read_instance(dir / "x.json"), ValidationError);
  write_text_file(dir / "y.json", "not json");
  CHECK_THROWS_AS(read_instance(dir / "y.json"), ValidationError);
  auto j = instance_to_json(test::random_instance(2, 3, 1));
  j["format_version"] = 99;
  CHECK_THROWS_WITH_AS(instance_from_json(j), doctest::Contains("version"), ValidationError);
  CHECK_THROWS_AS(read_instance(dir / "missing.json"), IoError);
}

TEST_CASE("derived seeds are distinct and order independent") {
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  CHECK(derive_seed(5, 3, 4) == derive_seed(derive_seed(5, 3), 4));
  static_assert(derive_seed(1, 2) == derive_seed(1, 2));
}
