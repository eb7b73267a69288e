#include "echo/mdp.hpp"

#include <algorithm>
#include <string>

namespace echo {

std::size_t ActionMask::count() const {
  return static_cast<std::size_t>(std::count(feasible.begin(), feasible.end(), 1));
}

FleetState init_state(const Instance& instance, const DistanceMatrix& dist) {
  FleetState s;
  s.instance = &instance;
  s.dist = &dist;
  const std::size_t m = instance.n_vehicles();
  s.used_capacity.assign(m, 0);
  s.clock.assign(m, 0.0);
  s.last_node.assign(m, 0);
  s.remaining_demand.resize(instance.n_nodes());
  for (std::size_t j = 0; j < instance.n_nodes(); ++j) s.remaining_demand[j] = instance.demand(j);
  s.remaining_total = instance.total_demand();
  return s;
}

bool is_feasible(const FleetState& state, int vehicle, int node) {
  const int d = state.remaining_demand[static_cast<std::size_t>(node)];
  if (node != 0 && d == 0) return false;
  const auto v = static_cast<std::size_t>(vehicle);
  if (node == 0 && state.last_node[v] == 0) return false;
  return state.instance->vehicles[v].capacity - state.used_capacity[v] >= d;
}

ActionMask action_mask(const FleetState& state) {
  if (is_terminal(state)) throw ValidationError("action_mask called on a terminal state");
  ActionMask mask;
  mask.n_vehicles = state.instance->n_vehicles();
  mask.n_nodes = state.instance->n_nodes();
  mask.feasible.assign(mask.n_vehicles * mask.n_nodes, 0);
  for (std::size_t i = 0; i < mask.n_vehicles; ++i)
    for (std::size_t j = 0; j < mask.n_nodes; ++j)
      mask.feasible[i * mask.n_nodes + j] =
          is_feasible(state, static_cast<int>(i), static_cast<int>(j)) ? 1 : 0;
  return mask;
}

bool is_terminal(const FleetState& state) { return state.remaining_total == 0; }

void apply_action(FleetState& state, Action a) {
  const auto m = static_cast<int>(state.instance->n_vehicles());
  const auto n = static_cast<int>(state.instance->n_nodes());
  if (a.vehicle < 0 || a.vehicle >= m || a.node < 0 || a.node >= n)
    throw ValidationError("action (" + std::to_string(a.vehicle) + ", " +
                          std::to_string(a.node) + ") is out of range");
  if (is_terminal(state) || !is_feasible(state, a.vehicle, a.node))
    throw ValidationError("action (" + std::to_string(a.vehicle) + ", " +
                          std::to_string(a.node) + ") is masked");
  const auto i = static_cast<std::size_t>(a.vehicle);
  const auto j = static_cast<std::size_t>(a.node);
  if (j == 0) {
    state.used_capacity[i] = 0;
  } else {
    state.used_capacity[i] += state.remaining_demand[j];
  }
  state.clock[i] += (*state.dist)(static_cast<std::size_t>(state.last_node[i]), j) /
                    state.instance->vehicles[i].speed;
  state.last_node[i] = a.node;
  state.remaining_total -= state.remaining_demand[j];
  state.remaining_demand[j] = 0;
  ++state.step;
  state.history.push_back(a);
}

FleetState step(const FleetState& state, Action action) {
  FleetState next = state;
  apply_action(next, action);
  return next;
}

std::vector<Route> routes_from_history(const Instance& instance,
                                       const std::vector<Action>& history) {
  std::vector<Route> routes(instance.n_vehicles());
  for (const auto& a : history) routes[static_cast<std::size_t>(a.vehicle)].push_back(a.node);
  return routes;
}

Finalized finalize_reward(const FleetState& state) {
  if (!is_terminal(state)) throw ValidationError("finalize_reward called on a non-terminal state");
  Finalized out;
  const std::size_t m = state.instance->n_vehicles();
  out.solution.instance_id = state.instance->id;
  out.solution.routes = routes_from_history(*state.instance, state.history);
  out.solution.durations.resize(m);
  double worst = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double t = state.clock[i];
    if (state.last_node[i] != 0)
      t += (*state.dist)(static_cast<std::size_t>(state.last_node[i]), 0) /
           state.instance->vehicles[i].speed;
    out.solution.durations[i] = t;
    worst = std::max(worst, t);
  }
  out.solution.objective = worst;
  out.reward = -worst;
  return out;
}

std::vector<double> route_durations(const Instance& instance, const DistanceMatrix& dist,
                                    const std::vector<Route>& routes) {
  const std::size_t m = instance.n_vehicles();
  const auto n = static_cast<int>(instance.n_nodes());
  if (routes.size() != m)
    throw SolutionError(SolutionError::Reason::vehicle_count, static_cast<int>(routes.size()), -1,
                        "solution has " + std::to_string(routes.size()) + " routes for " +
                            std::to_string(m) + " vehicles");
  std::vector<int> seen(instance.n_nodes(), 0);
  std::vector<double> durations(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto vi = static_cast<int>(i);
    const int capacity = instance.vehicles[i].capacity;
    int load = 0;
    int prev = 0;
    double length = 0.0;
    for (int node : routes[i]) {
      if (node < 0 || node >= n)
        throw SolutionError(SolutionError::Reason::unknown_node, vi, node,
                            "vehicle " + std::to_string(i) + " visits unknown node " +
                                std::to_string(node));
      if (node == 0) {
        load = 0;
      } else {
        if (++seen[static_cast<std::size_t>(node)] > 1)
          throw SolutionError(SolutionError::Reason::duplicate_customer, vi, node,
                              "customer " + std::to_string(node) + " visited twice (vehicle " +
                                  std::to_string(i) + ")");
        load += instance.demand(static_cast<std::size_t>(node));
        if (load > capacity)
          throw SolutionError(SolutionError::Reason::capacity, vi, node,
                              "vehicle " + std::to_string(i) + " exceeds capacity at customer " +
                                  std::to_string(node));
      }
      length += dist(static_cast<std::size_t>(prev), static_cast<std::size_t>(node));
      prev = node;
    }
    length += dist(static_cast<std::size_t>(prev), 0);
    durations[i] = length / instance.vehicles[i].speed;
  }
  for (int j = 1; j < n; ++j)
    if (seen[static_cast<std::size_t>(j)] == 0)
      throw SolutionError(SolutionError::Reason::missing_customer, -1, j,
                          "customer " + std::to_string(j) + " is never visited");
  return durations;
}

double evaluate_solution(const Instance& instance, const DistanceMatrix& dist,
                         const std::vector<Route>& routes) {
  const auto d = route_durations(instance, dist, routes);
  return *std::max_element(d.begin(), d.end());
}

double evaluate_solution(const Instance& instance, const std::vector<Route>& routes) {
  return evaluate_solution(instance, DistanceMatrix(instance), routes);
}

Solution make_solution(const Instance& instance, const DistanceMatrix& dist,
                       std::vector<Route> routes) {
  Solution s;
  s.instance_id = instance.id;
  s.durations = route_durations(instance, dist, routes);
  s.objective = *std::max_element(s.durations.begin(), s.durations.end());
  s.routes = std::move(routes);
  return s;
}

nlohmann::json solution_to_json(const Solution& solution) {
  nlohmann::json j;
  j["instance_id"] = solution.instance_id;
  j["objective"] = solution.objective;
  j["routes"] = solution.routes;
  j["durations"] = solution.durations;
  return j;
}

Solution solution_from_json(const nlohmann::json& j) {
  Solution s;
  try {
    s.instance_id = j.at("instance_id").get<std::string>();
    s.objective = j.at("objective").get<double>();
    s.routes = j.at("routes").get<std::vector<Route>>();
    s.durations = j.at("durations").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed solution: ") + e.what());
  }
  return s;
}

void write_solution(const Solution& solution, const std::filesystem::path& path,
                    const nlohmann::json& provenance) {
  auto j = solution_to_json(solution);
  if (!provenance.is_null()) j["provenance"] = provenance;
  write_text_file(path, dump_json(j));
}

Solution read_solution(const std::filesystem::path& path) {
  return solution_from_json(load_json_file(path));
}

}  // namespace echo
