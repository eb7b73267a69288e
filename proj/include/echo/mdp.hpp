#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "echo/common.hpp"
#include "echo/problem.hpp"

namespace echo {

struct Action {
  int vehicle = 0;  // 0-based
  int node = 0;     // 0 = depot
  friend bool operator==(const Action&, const Action&) = default;
};

using Route = std::vector<int>;

// Routes exclude the implicit start at the depot and the final return; a 0
// inside a route is a reload.
struct Solution {
  std::string instance_id;
  double objective = 0.0;
  std::vector<Route> routes;
  std::vector<double> durations;
};

// Rejections raised by evaluate_solution; each names the offending vehicle
// or node.
class SolutionError : public ValidationError {
 public:
  enum class Reason { vehicle_count, unknown_node, missing_customer, duplicate_customer, capacity };
  SolutionError(Reason reason, int vehicle, int node, const std::string& what)
      : ValidationError(what), reason_(reason), vehicle_(vehicle), node_(node) {}
  Reason reason() const { return reason_; }
  int vehicle() const { return vehicle_; }
  int node() const { return node_; }

 private:
  Reason reason_;
  int vehicle_;
  int node_;
};

// Mask over (vehicle, node) pairs, row-major M x (N + 1), true = feasible.
struct ActionMask {
  std::size_t n_vehicles = 0;
  std::size_t n_nodes = 0;
  std::vector<unsigned char> feasible;

  bool operator()(std::size_t i, std::size_t j) const { return feasible[i * n_nodes + j] != 0; }
  std::size_t count() const;
};

// Dynamic decision-process state. Holds non-owning pointers to the instance
// and its distance matrix, which must outlive the state.
struct FleetState {
  const Instance* instance = nullptr;
  const DistanceMatrix* dist = nullptr;
  std::vector<int> used_capacity;     // per vehicle
  std::vector<double> clock;          // per vehicle, time units
  std::vector<int> last_node;         // per vehicle
  std::vector<int> remaining_demand;  // per node, [0] always 0
  long remaining_total = 0;
  int step = 0;
  std::vector<Action> history;
};

FleetState init_state(const Instance& instance, const DistanceMatrix& dist);

bool is_feasible(const FleetState& state, int vehicle, int node);
ActionMask action_mask(const FleetState& state);
bool is_terminal(const FleetState& state);

// Applies an action in place; throws ValidationError if it is masked.
void apply_action(FleetState& state, Action action);
FleetState step(const FleetState& state, Action action);

struct Finalized {
  double reward = 0.0;
  Solution solution;
};

// Charges each vehicle's return leg and assembles the routes.
Finalized finalize_reward(const FleetState& state);

std::vector<Route> routes_from_history(const Instance& instance,
                                       const std::vector<Action>& history);

// Per-vehicle durations including the start and final return legs; validates
// coverage and per-segment capacity.
std::vector<double> route_durations(const Instance& instance, const DistanceMatrix& dist,
                                    const std::vector<Route>& routes);
double evaluate_solution(const Instance& instance, const std::vector<Route>& routes);
double evaluate_solution(const Instance& instance, const DistanceMatrix& dist,
                         const std::vector<Route>& routes);

// Builds a validated Solution (objective and durations recomputed).
Solution make_solution(const Instance& instance, const DistanceMatrix& dist,
                       std::vector<Route> routes);

nlohmann::json solution_to_json(const Solution& solution);
Solution solution_from_json(const nlohmann::json& j);
void write_solution(const Solution& solution, const std::filesystem::path& path,
                    const nlohmann::json& provenance = {});
Solution read_solution(const std::filesystem::path& path);

}  // namespace echo
