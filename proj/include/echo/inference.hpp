#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "echo/mdp.hpp"
#include "echo/model.hpp"
#include "echo/problem.hpp"

namespace echo {

Solution solve_greedy(const ParameterSet<float>& params, const ModelConfig& config,
                      const Instance& instance);

struct SamplingResult {
  Solution best;
  std::size_t best_index = 0;
  std::vector<double> sample_objectives;
};

// k independent sampled rollouts; sample i draws from derive_seed(seed, i),
// so any k' > k extends the same sample stream. Ties keep the earliest sample.
SamplingResult sample_solutions(const ParameterSet<float>& params, const ModelConfig& config,
                                const Instance& instance, int k, std::uint64_t seed);

inline constexpr int kDefaultSamples = 1280;

Solution solve_sampling(const ParameterSet<float>& params, const ModelConfig& config,
                        const Instance& instance, int k = kDefaultSamples, std::uint64_t seed = 0);

using Solver = std::function<Solution(const Instance&)>;

struct EvalRow {
  std::string instance_id;
  double objective = 0.0;
  double reference = 0.0;
  double gap = 0.0;
  double seconds = 0.0;
};

struct EvalReport {
  std::string solver;
  std::string reference;
  std::vector<EvalRow> rows;
  double mean_objective = 0.0;
  double mean_gap = 0.0;
  double total_seconds = 0.0;
  double mean_seconds = 0.0;
  std::vector<Solution> solutions;
};

// (obj - ref) / ref; throws for a non-positive reference.
double relative_gap(double objective, double reference);

// Runs `solver` on every instance (up to `workers` at a time), re-validates
// each Solution and computes gaps against the reference with the same id.
// With record_time = false all timings are reported as 0.
EvalReport evaluate_benchmark(const std::string& solver_name, const Solver& solver,
                              const std::vector<Instance>& instances,
                              const std::vector<Solution>& references,
                              const std::string& reference_name, int workers = 1,
                              bool record_time = true);

// Tab-separated rows {instance_id, obj, gap, seconds} followed by a
// '#'-prefixed aggregate footer.
std::string format_report(const EvalReport& report);

}  // namespace echo
