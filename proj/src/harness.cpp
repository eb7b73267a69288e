#include "echo/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "echo/baselines.hpp"
#include "echo/inference.hpp"
#include "echo/mdp.hpp"
#include "echo/model.hpp"
#include "echo/training.hpp"

namespace echo {

namespace fs = std::filesystem;

namespace {

std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t item_seed(std::uint64_t seed, const std::string& id) {
  return derive_seed(seed, stable_hash(id));
}

void require_path(const fs::path& p, const char* flag) {
  if (p.empty()) throw ValidationError(std::string("missing required flag ") + flag);
}

ModelConfig model_from(const RunConfig& c) {
  ModelConfig m;
  m.embed_dim = c.embed_dim;
  m.encoder_layers = c.layers;
  m.knn_k = std::min(c.knn_k, c.n);
  m.dual_modality = !c.no_dual_modality;
  m.pfca = !c.no_pfca;
  validate(m);
  return m;
}

template <class F>
void parallel_items(std::size_t count, int workers, const F& body) {
  std::vector<std::exception_ptr> errors(count);
#pragma omp parallel for schedule(dynamic, 1) num_threads(std::max(1, workers))
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct LoadedModel {
  ParameterSet<float> params;
  ModelConfig config;
  bool present = false;
};

LoadedModel load_model(const RunConfig& c) {
  LoadedModel m;
  if (c.checkpoint.empty()) return m;
  if (!fs::exists(c.checkpoint))
    throw IoError("checkpoint '" + c.checkpoint.string() + "' does not exist");
  auto [params, config] = load_checkpoint(c.checkpoint);
  m.params = std::move(params);
  m.config = config;
  m.present = true;
  return m;
}

bool is_neural(const std::string& solver) { return solver == "greedy" || solver == "sample"; }

Solver make_solver(const std::string& name, const RunConfig& c, const LoadedModel* model) {
  if (is_neural(name) && (!model || !model->present))
    throw ValidationError("solver '" + name + "' needs --checkpoint");
  if (name == "exact") return [](const Instance& i) { return exact_small(i).solution; };
  if (name == "sa")
    return [&c](const Instance& i) {
      return simulated_annealing(i, {c.iterations, std::numeric_limits<double>::infinity(),
                                     item_seed(c.seed, i.id)});
    };
  if (name == "ga")
    return [&c](const Instance& i) {
      return genetic(i, {c.generations, std::numeric_limits<double>::infinity(), item_seed(c.seed, i.id)});
    };
  if (name == "greedy")
    return [model](const Instance& i) { return solve_greedy(model->params, model->config, i); };
  if (name == "sample")
    return [model, &c](const Instance& i) {
      return solve_sampling(model->params, model->config, i, c.k, item_seed(c.seed, i.id));
    };
  throw ValidationError("unknown solver '" + name + "' (exact, sa, ga, greedy, sample)");
}

nlohmann::json provenance(const RunConfig& c, const std::string& solver, const LoadedModel* model) {
  nlohmann::json p = {{"command", c.command}, {"solver", solver}, {"seed", c.seed}};
  if (solver == "sample") p["k"] = c.k;
  if (solver == "sa") p["iterations"] = c.iterations;
  if (solver == "ga") p["generations"] = c.generations;
  if (model && model->present) {
    p["checkpoint"] = c.checkpoint.filename().string();
    p["model"] = model_config_to_json(model->config);
  }
  return p;
}

std::vector<Solution> load_references(const fs::path& dir) {
  std::vector<Solution> out;
  if (fs::is_regular_file(dir)) {
    out.push_back(read_solution(dir));
    return out;
  }
  if (!fs::is_directory(dir)) throw IoError("reference path '" + dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out.push_back(read_solution(f));
  return out;
}

std::string solution_file(const std::string& id) { return id + ".solution.json"; }

}  // namespace

int exit_code(ErrorKind kind) { return static_cast<int>(kind); }

std::vector<std::pair<fs::path, Instance>> load_instances(const fs::path& path) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.path().extension() == ".json" && e.path().filename() != "manifest.json")
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    throw IoError("instance path '" + path.string() + "' does not exist");
  }
  std::vector<std::pair<fs::path, Instance>> out;
  for (const auto& f : files) out.emplace_back(f, read_instance(f));
  return out;
}

void cmd_generate(const RunConfig& c, std::ostream& log) {
  require_path(c.out, "--out");
  if (c.count < 0) throw ValidationError("--count must be >= 0");
  GenConfig g;
  g.n_vehicles = c.m;
  g.n_customers = c.n;
  g.distribution = c.dist;
  validate(g);
  fs::create_directories(c.out);
  nlohmann::json listed = nlohmann::json::array();
  for (int i = 0; i < c.count; ++i) {
    g.seed = derive_seed(c.seed, static_cast<std::uint64_t>(i));
    Instance inst = generate_instance(g);
    char id[96];
    std::snprintf(id, sizeof id, "%s-m%d-n%d-s%llu-%04d", c.dist == Distribution::uniform ? "u" : "c",
                  c.m, c.n, static_cast<unsigned long long>(c.seed), i);
    inst.id = id;
    auto j = instance_to_json(inst);
    j["provenance"] = {{"command", "generate"}, {"m", c.m},      {"n", c.n},
                       {"distribution", to_string(c.dist)}, {"seed", c.seed}, {"index", i},
                       {"instance_seed", g.seed}};
    const std::string file = inst.id + ".json";
    write_text_file(c.out / file, dump_json(j));
    listed.push_back({{"id", inst.id}, {"file", file}, {"instance_seed", g.seed}});
  }
  const nlohmann::json manifest = {{"format_version", kInstanceFormatVersion},
                                   {"command", "generate"},
                                   {"m", c.m},
                                   {"n", c.n},
                                   {"count", c.count},
                                   {"distribution", to_string(c.dist)},
                                   {"seed", c.seed},
                                   {"instances", listed}};
  write_text_file(c.out / "manifest.json", dump_json(manifest));
  log << "wrote " << c.count << " instances to " << c.out.string() << "\n";
}

void cmd_train(const RunConfig& c, std::ostream& log) {
  require_path(c.out, "--out");
  TrainConfig tc;
  tc.model = model_from(c);
  tc.instances.n_vehicles = c.m;
  tc.instances.n_customers = c.n;
  tc.instances.distribution = c.dist;
  tc.batch_size = c.batch;
  tc.augmentations = c.augmentations;
  tc.steps = c.steps;
  tc.adam.lr = c.lr;
  tc.grad_clip = c.clip;
  tc.seed = c.seed;
  tc.vehicle_augment = !c.no_vehicle_augment;
  tc.eval_every = c.eval_every;
  tc.eval_size = c.eval_size;
  tc.checkpoint_every = c.checkpoint_every;
  tc.out_dir = c.out;
  tc.record_time = c.timing;
  const auto init = init_parameters<float>(tc.model, derive_seed(tc.seed, 0));
  log << "parameters " << init.trainable_count() << " (d=" << tc.model.embed_dim
      << ", L=" << tc.model.encoder_layers << ", dual_modality=" << tc.model.dual_modality
      << ", pfca=" << tc.model.pfca << ", vehicle_augment=" << tc.vehicle_augment << ")\n";
  const auto result = train(tc, &init, [&](const MetricsRow& row) {
    if (row.step % 10 == 0 || row.step == tc.steps) log << format_metrics_row(row) << "\n" << std::flush;
  });
  for (const auto& e : result.evals)
    log << "heldout step " << e.step << " greedy mean obj " << e.greedy_mean_objective << "\n";
  log << "checkpoints:";
  for (const auto& p : result.checkpoints) log << " " << p.filename().string();
  log << "\n";
}

void cmd_solve(const RunConfig& c, std::ostream& log) {
  require_path(c.instances, "--instances");
  require_path(c.out, "--out");
  require_path(c.checkpoint, "--checkpoint");
  if (c.decode != "greedy" && c.decode != "sample")
    throw ValidationError("--decode must be greedy or sample");
  if (c.decode == "greedy" && c.k_given) throw ValidationError("--k only applies to --decode sample");
  if (c.k < 1) throw ValidationError("--k must be >= 1");
  const LoadedModel model = load_model(c);
  const auto items = load_instances(c.instances);
  const Solver solver = make_solver(c.decode, c, &model);
  fs::create_directories(c.out);
  std::vector<double> seconds(items.size(), 0.0);
  std::vector<double> objectives(items.size(), 0.0);
  const auto prov = provenance(c, c.decode, &model);
  parallel_items(items.size(), c.workers, [&](std::size_t i) {
    const Instance& inst = items[i].second;
    const auto t0 = std::chrono::steady_clock::now();
    const Solution s = solver(inst);
    if (c.timing) seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    objectives[i] = s.objective;
    write_solution(s, c.out / solution_file(inst.id), prov);
  });
  std::ostringstream timing;
  timing << "instance_id\tobj\tseconds\n";
  char buf[96];
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::snprintf(buf, sizeof buf, "\t%.17g\t%.6f\n", objectives[i], seconds[i]);
    timing << items[i].second.id << buf;
  }
  write_text_file(c.out / "timing.tsv", timing.str());
  log << "solved " << items.size() << " instances (" << c.decode << ") into " << c.out.string() << "\n";
}

void cmd_eval(const RunConfig& c, std::ostream& log) {
  require_path(c.instances, "--instances");
  require_path(c.references, "--references");
  require_path(c.out, "--out");
  const LoadedModel model = load_model(c);
  const auto items = load_instances(c.instances);
  std::vector<Instance> insts;
  for (const auto& it : items) insts.push_back(it.second);
  const auto refs = load_references(c.references);
  const std::string ref_name =
      c.reference_name.empty() ? c.references.filename().string() : c.reference_name;
  const EvalReport rep = evaluate_benchmark(c.solver, make_solver(c.solver, c, &model), insts, refs,
                                            ref_name, c.workers, c.timing);
  write_text_file(c.out, format_report(rep));
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s vs %s: mean obj %.6f, mean gap %.4f%%, time %.3fs\n",
                c.solver.c_str(), ref_name.c_str(), rep.mean_objective, 100.0 * rep.mean_gap,
                rep.total_seconds);
  log << buf;
}

void cmd_bench(const RunConfig& c, std::ostream& log) {
  require_path(c.instances, "--instances");
  require_path(c.out, "--out");
  if (c.solvers.empty()) throw ValidationError("--solvers is empty");
  const LoadedModel model = load_model(c);
  for (const auto& s : c.solvers) make_solver(s, c, &model);  // validates names early

  std::map<std::pair<std::size_t, std::size_t>, std::vector<Instance>> groups;
  for (auto& it : load_instances(c.instances))
    groups[{it.second.n_vehicles(), it.second.n_customers()}].push_back(std::move(it.second));
  fs::create_directories(c.out);

  for (const auto& [scale, insts] : groups) {
    const auto [m, n] = scale;
    const bool tiny = n <= kExactMaxCustomers && m <= kExactMaxVehicles;
    const std::string ref_name = tiny ? "exact" : "sa";
    const Solver ref_solver = make_solver(ref_name, c, &model);
    std::vector<Solution> refs(insts.size());
    parallel_items(insts.size(), c.workers, [&](std::size_t i) { refs[i] = ref_solver(insts[i]); });

    char head[320];
    std::snprintf(head, sizeof head,
                  "# m\t%zu\n# n\t%zu\n# instances\t%zu\n# reference\t%s\n# seed\t%llu\n# k\t%d\n"
                  "# iterations\t%ld\n# generations\t%ld\n# checkpoint\t%s\n",
                  m, n, insts.size(), ref_name.c_str(), static_cast<unsigned long long>(c.seed), c.k,
                  c.iterations, c.generations, c.checkpoint.filename().string().c_str());
    std::string table = head;
    table += "solver\tobj\tgap_pct\tseconds\n";
    const std::string stem = "bench_m" + std::to_string(m) + "_n" + std::to_string(n);
    for (const auto& name : c.solvers) {
      if (name == "exact" && !tiny) continue;
      const EvalReport rep =
          evaluate_benchmark(name, make_solver(name, c, &model), insts, refs, ref_name, c.workers, c.timing);
      write_text_file(c.out / (stem + "_" + name + ".tsv"), format_report(rep));
      char row[200];
      std::snprintf(row, sizeof row, "%s\t%.6f\t%.4f\t%.6f\n", name.c_str(), rep.mean_objective,
                    100.0 * rep.mean_gap, rep.total_seconds);
      table += row;
    }
    write_text_file(c.out / (stem + ".tsv"), table);
    log << table << "\n";
  }
}

namespace {

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

Check check_mask_soundness() {
  ModelConfig mc;
  mc.embed_dim = 16;
  mc.encoder_layers = 1;
  mc.knn_k = 5;
  const auto params = init_parameters<float>(mc, 11);
  int violations = 0, rollouts = 0;
  for (int m : {2, 3})
    for (int n : {5, 8})
      for (int s = 0; s < 25; ++s) {
        GenConfig g;
        g.n_vehicles = m;
        g.n_customers = n;
        g.seed = derive_seed(99, static_cast<std::uint64_t>(m * 1000 + n * 100 + s));
        const Instance inst = generate_instance(g);
        const Trajectory t = rollout(params, mc, inst, DecodeMode::sample, g.seed);
        ++rollouts;
        try {
          const double obj = evaluate_solution(inst, t.solution.routes);
          if (std::abs(t.reward + obj) > 1e-12) ++violations;
        } catch (const ValidationError&) {
          ++violations;
        }
      }
  return {"mask soundness", violations == 0,
          std::to_string(rollouts) + " sampled rollouts, " + std::to_string(violations) + " violations"};
}

Check check_pfca_identity() {
  nn::Tape<double> t;
  const auto nodes = t.constant(nn::Tensor<double>(nn::Shape{2, 1}, {1.0, 2.0}));
  const auto veh = t.constant(nn::Tensor<double>(nn::Shape{1, 1}, {3.0}));
  const auto same = pfca_update(t, nodes, std::nullopt, true);
  const auto upd = t.value(pfca_update(t, nodes, veh, true));
  const bool ok = same.id == nodes.id && upd[0] == 4.0 && upd[1] == 5.0;
  return {"pfca identity", ok, "first step returns N; [[1],[2]] with [[3]] -> [[4],[5]]"};
}

Check check_augmentation() {
  double worst = 0.0;
  for (int s = 0; s < 20; ++s) {
    GenConfig g;
    g.n_vehicles = 3;
    g.n_customers = 12;
    g.seed = derive_seed(5, static_cast<std::uint64_t>(s));
    const Instance inst = generate_instance(g);
    const DistanceMatrix d(inst);
    const auto routes = greedy_construction(inst, d);
    const double base = evaluate_solution(inst, d, routes);
    for (const auto& v : augment_instance(inst, 8, g.seed))
      worst = std::max(worst, std::abs(evaluate_solution(v.instance, permute_routes(routes, v.vehicle_order)) - base));
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "max objective drift %.3g over 20 x 8 variants", worst);
  return {"augmentation invariance", worst <= 1e-12, buf};
}

Check check_gradient() {
  SurrogateCheck sc;
  sc.model.embed_dim = 8;
  sc.model.encoder_layers = 2;
  sc.model.knn_k = 5;
  sc.probes = 40;
  const auto rep = surrogate_gradient_check(sc);
  char buf[96];
  std::snprintf(buf, sizeof buf, "max relative error %.3g over %zu coordinates", rep.max_rel_error, rep.probes);
  return {"gradient check (d=8)", rep.max_rel_error < 1e-4, buf};
}

Check check_round_trips() {
  const fs::path dir = fs::temp_directory_path() /
                       ("echo-selftest-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
  fs::create_directories(dir);
  GenConfig g;
  g.n_vehicles = 2;
  g.n_customers = 6;
  g.seed = 3;
  const Instance inst = generate_instance(g);
  write_instance(inst, dir / "i.json");
  bool ok = read_instance(dir / "i.json") == inst;
  const Solution sol = exact_small(inst).solution;
  write_solution(sol, dir / "s.json");
  const Solution back = read_solution(dir / "s.json");
  ok = ok && back.routes == sol.routes && back.objective == sol.objective;
  ModelConfig mc;
  mc.embed_dim = 16;
  mc.encoder_layers = 1;
  mc.knn_k = 6;
  const auto params = init_parameters<float>(mc, 4);
  save_checkpoint(params, mc, dir / "p.ckpt");
  const auto [loaded, lc] = load_checkpoint(dir / "p.ckpt", mc);
  ok = ok && loaded.flatten_trainable() == params.flatten_trainable();
  fs::remove_all(dir);
  return {"round trips", ok, "instance, solution and checkpoint files"};
}

}  // namespace

int cmd_selftest(const RunConfig& c, std::ostream& log) {
  using Fn = Check (*)();
  const std::vector<std::pair<std::string, Fn>> checks = {
      {"mask soundness", check_mask_soundness},   {"pfca identity", check_pfca_identity},
      {"augmentation invariance", check_augmentation}, {"gradient check (d=8)", check_gradient},
      {"round trips", check_round_trips}};
  std::vector<Check> results;
  for (const auto& [name, fn] : checks) {
    try {
      results.push_back(fn());
    } catch (const std::exception& e) {
      results.push_back({name, false, e.what()});
    }
  }
  if (!c.checkpoint.empty()) {
    try {
      const auto [p, mc] = load_checkpoint(c.checkpoint);
      results.push_back({"checkpoint", true, std::to_string(p.trainable_count()) + " parameters"});
    } catch (const std::exception& e) {
      results.push_back({"checkpoint", false, e.what()});
    }
  }
  int failed = 0;
  for (const auto& r : results) {
    log << (r.pass ? "PASS" : "FAIL") << "\t" << r.name << "\t" << r.detail << "\n";
    failed += r.pass ? 0 : 1;
  }
  log << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << "\n";
  return failed;
}

int run_command(const RunConfig& c, std::ostream& log, std::ostream& err) {
  try {
    if (c.command == "generate") cmd_generate(c, log);
    else if (c.command == "train") cmd_train(c, log);
    else if (c.command == "solve") cmd_solve(c, log);
    else if (c.command == "eval") cmd_eval(c, log);
    else if (c.command == "bench") cmd_bench(c, log);
    else if (c.command == "selftest") return cmd_selftest(c, log) == 0 ? 0 : kExitChecksFailed;
    else throw EchoError(ErrorKind::usage, "unknown command '" + c.command + "'");
    return 0;
  } catch (const EchoError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::io);
  }
}

}  // namespace echo
