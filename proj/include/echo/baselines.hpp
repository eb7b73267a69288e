#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "echo/mdp.hpp"
#include "echo/problem.hpp"

namespace echo {

struct SearchBudget {
  long max_iterations = 50000;
  double max_seconds = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
};

void validate(const SearchBudget& budget);

inline constexpr std::size_t kExactMaxCustomers = 8;
inline constexpr std::size_t kExactMaxVehicles = 3;

struct ExactResult {
  double objective = 0.0;
  Solution solution;
  long nodes_explored = 0;
};

// Depth-first branch and bound over per-vehicle action sequences. Throws
// ValidationError beyond N = 8 customers or M = 3 vehicles.
ExactResult exact_small(const Instance& instance);

// Smallest-clock vehicle visits its nearest customer that still fits,
// reloading when none does.
std::vector<Route> greedy_construction(const Instance& instance, const DistanceMatrix& dist);

// Drops redundant depot visits, then inserts reloads wherever the vehicle's
// capacity would be exceeded. Returns false if some customer cannot fit the
// vehicle even when empty.
bool normalize_and_repair(const Instance& instance, std::vector<Route>& routes);

// Best-so-far objective after each iteration (index 0 = construction).
using SearchTrace = std::vector<double>;

Solution simulated_annealing(const Instance& instance, const SearchBudget& budget,
                             SearchTrace* trace = nullptr);

struct GeneticConfig {
  int population = 30;
  double mutation_rate = 0.2;
  int elite = 2;
  // Optional starting giant tours (customer permutations); filled up with
  // random tours when smaller than the population.
  std::vector<std::vector<int>> initial;
};

// Min-max split of a giant tour: vehicle 0 takes the first block, vehicle 1
// the next, and so on; each block is cut into capacity-feasible trips
// optimally. Returns +inf if no feasible split exists.
double split_giant_tour(const Instance& instance, const DistanceMatrix& dist,
                        const std::vector<int>& tour, std::vector<Route>* routes = nullptr);

// Iterations of the budget count generations.
Solution genetic(const Instance& instance, const SearchBudget& budget,
                 const GeneticConfig& config = {}, SearchTrace* trace = nullptr);

}  // namespace echo
