#include "echo/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>

#include "echo/training.hpp"

namespace echo {

namespace {

Solution validated(const Instance& instance, const DistanceMatrix& dist, const Solution& s) {
  Solution out = make_solution(instance, dist, s.routes);
  out.instance_id = instance.id;
  return out;
}

}  // namespace

Solution solve_greedy(const ParameterSet<float>& params, const ModelConfig& config,
                      const Instance& instance) {
  const DistanceMatrix dist(instance);
  const auto nodes = encode_instance(params, config, instance, dist);
  const Trajectory t = rollout_encoded(params, config, instance, dist, nodes, DecodeMode::greedy, 0);
  return validated(instance, dist, t.solution);
}

SamplingResult sample_solutions(const ParameterSet<float>& params, const ModelConfig& config,
                                const Instance& instance, int k, std::uint64_t seed) {
  if (k < 1) throw ValidationError("sampling needs k >= 1");
  const DistanceMatrix dist(instance);
  const auto nodes = encode_instance(params, config, instance, dist);
  const auto count = static_cast<std::size_t>(k);
  std::vector<Solution> sols(count);
  std::vector<std::exception_ptr> errors(count);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
    try {
      const auto u = static_cast<std::size_t>(i);
      sols[u] = validated(instance, dist,
                          rollout_encoded(params, config, instance, dist, nodes,
                                          DecodeMode::sample, derive_seed(seed, u))
                              .solution);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  SamplingResult r;
  for (std::size_t i = 0; i < count; ++i) {
    r.sample_objectives.push_back(sols[i].objective);
    if (sols[i].objective < sols[r.best_index].objective) r.best_index = i;
  }
  r.best = std::move(sols[r.best_index]);
  return r;
}

Solution solve_sampling(const ParameterSet<float>& params, const ModelConfig& config,
                        const Instance& instance, int k, std::uint64_t seed) {
  return sample_solutions(params, config, instance, k, seed).best;
}

double relative_gap(double objective, double reference) {
  if (!(reference > 0.0)) throw ValidationError("reference objective must be > 0 for a gap");
  return (objective - reference) / reference;
}

EvalReport evaluate_benchmark(const std::string& solver_name, const Solver& solver,
                              const std::vector<Instance>& instances,
                              const std::vector<Solution>& references,
                              const std::string& reference_name, int workers, bool record_time) {
  std::map<std::string, const Solution*> by_id;
  for (const auto& r : references) by_id[r.instance_id] = &r;
  for (const auto& inst : instances)
    if (!by_id.count(inst.id))
      throw ValidationError("no reference solution for instance '" + inst.id + "'");

  EvalReport rep;
  rep.solver = solver_name;
  rep.reference = reference_name;
  rep.rows.resize(instances.size());
  rep.solutions.resize(instances.size());
  std::vector<std::exception_ptr> errors(instances.size());
  const int threads = std::max(1, workers);
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(instances.size()); ++i) {
    const auto u = static_cast<std::size_t>(i);
    try {
      const Instance& inst = instances[u];
      const DistanceMatrix dist(inst);
      const auto t0 = std::chrono::steady_clock::now();
      Solution s = solver(inst);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      s = validated(inst, dist, s);
      const Solution& ref = *by_id.at(inst.id);
      const double ref_obj = evaluate_solution(inst, dist, ref.routes);
      rep.rows[u] = {inst.id, s.objective, ref_obj, relative_gap(s.objective, ref_obj),
                     record_time ? secs : 0.0};
      rep.solutions[u] = std::move(s);
    } catch (...) {
      errors[u] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& r : rep.rows) {
    rep.mean_objective += r.objective;
    rep.mean_gap += r.gap;
    rep.total_seconds += r.seconds;
  }
  if (!rep.rows.empty()) {
    const double n = static_cast<double>(rep.rows.size());
    rep.mean_objective /= n;
    rep.mean_gap /= n;
    rep.mean_seconds = rep.total_seconds / n;
  }
  return rep;
}

std::string format_report(const EvalReport& r) {
  std::string out = "# solver\t" + r.solver + "\n# reference\t" + r.reference + "\n";
  out += "instance_id\tobj\tgap\tseconds\n";
  char buf[256];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "\t%.17g\t%.17g\t%.6f\n", row.objective, row.gap, row.seconds);
    out += row.instance_id + buf;
  }
  std::snprintf(buf, sizeof buf,
                "# instances\t%zu\n# mean_obj\t%.17g\n# mean_gap\t%.17g\n# total_seconds\t%.6f\n"
                "# mean_seconds\t%.6f\n",
                r.rows.size(), r.mean_objective, r.mean_gap, r.total_seconds, r.mean_seconds);
  return out + buf;
}

}  // namespace echo
