#include <cmath>
#include <random>

#include "doctest.h"
#include "echo/mdp.hpp"
#include "test_util.hpp"

using namespace echo;

namespace {

// Independent statement of the feasibility rule.
bool oracle_feasible(const Instance& inst, const std::vector<int>& remaining,
                     const std::vector<int>& last, const std::vector<int>& used, int i, int j) {
  if (j != 0 && remaining[static_cast<std::size_t>(j)] == 0) return false;
  if (j == 0 && last[static_cast<std::size_t>(i)] == 0) return false;
  return inst.vehicles[static_cast<std::size_t>(i)].capacity - used[static_cast<std::size_t>(i)] >=
         (j == 0 ? 0 : remaining[static_cast<std::size_t>(j)]);
}

}  // namespace

TEST_CASE("initial state") {
  const Instance inst = test::random_instance(3, 10, 1);
  const DistanceMatrix d(inst);
  const FleetState s = init_state(inst, d);
  CHECK(s.remaining_total == inst.total_demand());
  CHECK(s.remaining_demand[0] == 0);
  CHECK_FALSE(is_terminal(s));
  const ActionMask mask = action_mask(s);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK_FALSE(mask(i, 0));
    for (std::size_t j = 1; j <= 10; ++j) CHECK(mask(i, j));
  }
}

TEST_CASE("mask agrees with the rule along random trajectories") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    GenConfig g;
    g.n_vehicles = 1 + trial % 4;
    g.n_customers = 5 + trial % 7;
    g.capacity_range = {9, 15};
    g.seed = static_cast<std::uint64_t>(trial);
    const Instance inst = generate_instance(g);
    const DistanceMatrix d(inst);
    FleetState s = init_state(inst, d);
    while (!is_terminal(s)) {
      const ActionMask mask = action_mask(s);
      std::vector<Action> feasible;
      for (int i = 0; i < g.n_vehicles; ++i)
        for (int j = 0; j <= g.n_customers; ++j) {
          const bool expect = oracle_feasible(inst, s.remaining_demand, s.last_node, s.used_capacity, i, j);
          REQUIRE(mask(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) == expect);
          if (expect) feasible.push_back({i, j});
          else CHECK_THROWS_AS(step(s, {i, j}), ValidationError);
        }
      REQUIRE_FALSE(feasible.empty());
      apply_action(s, feasible[rng() % feasible.size()]);
    }
    CHECK_THROWS_AS(action_mask(s), ValidationError);
    const Finalized f = finalize_reward(s);
    CHECK(std::abs(f.reward + evaluate_solution(inst, d, f.solution.routes)) <= 1e-12);
  }
}

TEST_CASE("transitions update capacity, clock and position") {
  const Instance inst = test::make_instance({0, 0}, {{3, 4, 5}, {3, 0, 4}}, {{10, 0.5}});
  const DistanceMatrix d(inst);
  FleetState s = init_state(inst, d);
  apply_action(s, {0, 1});
  CHECK(s.used_capacity[0] == 5);
  CHECK(s.clock[0] == doctest::Approx(10.0));
  CHECK(s.last_node[0] == 1);
  CHECK(s.remaining_total == 4);
  apply_action(s, {0, 0});
  CHECK(s.used_capacity[0] == 0);
  CHECK(s.clock[0] == doctest::Approx(20.0));
  CHECK_THROWS_AS(step(s, {0, 0}), ValidationError);
  CHECK_THROWS_AS(step(s, {0, 1}), ValidationError);
  CHECK_THROWS_AS(step(s, {1, 2}), ValidationError);
  apply_action(s, {0, 2});
  CHECK(is_terminal(s));
  const Finalized f = finalize_reward(s);
  // 5 + 5 + 3 + 3 at speed 0.5
  CHECK(f.solution.objective == doctest::Approx(32.0));
  CHECK(f.reward == -f.solution.objective);
  CHECK(f.solution.routes[0] == Route{1, 0, 2});
}

TEST_CASE("capacity forces a reload") {
  const Instance inst = test::make_instance({0, 0}, {{1, 0, 6}, {2, 0, 6}}, {{10, 1.0}});
  const DistanceMatrix d(inst);
  FleetState s = init_state(inst, d);
  apply_action(s, {0, 1});
  const ActionMask mask = action_mask(s);
  CHECK(mask(0, 0));
  CHECK_FALSE(mask(0, 2));
}

TEST_CASE("single vehicle, single customer: out and back") {
  const Instance inst = test::make_instance({0.1, 0.2}, {{0.4, 0.6, 2}}, {{5, 0.8}});
  const DistanceMatrix d(inst);
  FleetState s = init_state(inst, d);
  apply_action(s, {0, 1});
  const Finalized f = finalize_reward(s);
  CHECK(f.solution.objective == doctest::Approx(2.0 * 0.5 / 0.8).epsilon(1e-14));
}

TEST_CASE("evaluate_solution rejects each kind of invalid solution") {
  const Instance inst = test::make_instance({0, 0}, {{1, 0, 6}, {2, 0, 6}, {0, 1, 1}}, {{10, 1.0}, {8, 0.5}});
  const DistanceMatrix d(inst);
  auto reason = [&](std::vector<Route> r) {
    try {
      evaluate_solution(inst, d, r);
    } catch (const SolutionError& e) {
      return static_cast<int>(e.reason());
    }
    return -1;
  };
  CHECK(reason({{1, 0, 2}, {3}}) == -1);
  CHECK(reason({{1, 0, 2, 3}}) == static_cast<int>(SolutionError::Reason::vehicle_count));
  CHECK(reason({{1, 0, 2}, {4}}) == static_cast<int>(SolutionError::Reason::unknown_node));
  CHECK(reason({{1, 0, 2}, {}}) == static_cast<int>(SolutionError::Reason::missing_customer));
  CHECK(reason({{1, 0, 2}, {3, 1}}) == static_cast<int>(SolutionError::Reason::duplicate_customer));
  CHECK(reason({{1, 2}, {3}}) == static_cast<int>(SolutionError::Reason::capacity));
  try {
    evaluate_solution(inst, d, {{1, 2}, {3}});
  } catch (const SolutionError& e) {
    CHECK(e.vehicle() == 0);
    CHECK(e.node() == 2);
  }
  // 1 + 1 + 2 + 2 = 6 for vehicle 0; 2 / 0.5 = 4 for vehicle 1
  CHECK(evaluate_solution(inst, d, {{1, 0, 2}, {3}}) == doctest::Approx(6.0));
}

TEST_CASE("solution JSON round trip is exact") {
  test::TempDir dir("mdp");
  const Instance inst = test::random_instance(2, 8, 4);
  const DistanceMatrix d(inst);
  FleetState s = init_state(inst, d);
  std::mt19937_64 rng(1);
  while (!is_terminal(s)) {
    const ActionMask m = action_mask(s);
    std::vector<Action> f;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j <= 8; ++j)
        if (m(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) f.push_back({i, j});
    apply_action(s, f[rng() % f.size()]);
  }
  const Solution sol = make_solution(inst, d, finalize_reward(s).solution.routes);
  write_solution(sol, dir / "s.json", {{"command", "test"}});
  const Solution back = read_solution(dir / "s.json");
  CHECK(back.instance_id == sol.instance_id);
  CHECK(back.objective == sol.objective);
  CHECK(back.routes == sol.routes);
  CHECK(back.durations == sol.durations);
}
