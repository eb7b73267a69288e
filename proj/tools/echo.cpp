#include <iostream>

#include "CLI11.hpp"
#include "echo/harness.hpp"

int main(int argc, char** argv) {
  echo::RunConfig c;
  CLI::App app{"Neural and heuristic solvers for the min-max heterogeneous CVRP"};
  app.set_config("--config", "", "TOML/INI file with flag defaults (command-line flags win)");
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);

  std::string dist = "uniform";
  bool no_timing = false;
  auto common = [&](CLI::App* s) {
    s->add_option("--seed", c.seed, "Base seed");
    s->add_option("--workers", c.workers, "Instance-level worker threads")->check(CLI::PositiveNumber);
    s->add_flag("--no-timing", no_timing, "Write 0 for wall-clock columns (byte-reproducible output)");
  };
  auto scale = [&](CLI::App* s) {
    s->add_option("--m", c.m, "Vehicles");
    s->add_option("--n", c.n, "Customers");
    s->add_option("--dist", dist, "Customer distribution")->check(CLI::IsMember({"uniform", "clustered"}));
  };
  auto model_flags = [&](CLI::App* s) {
    s->add_option("--embed-dim", c.embed_dim, "Embedding width d");
    s->add_option("--layers", c.layers, "Encoder layers L");
    s->add_option("--knn-k", c.knn_k, "Sorted nearest-distance edge features (clamped to N)");
  };

  auto* gen = app.add_subcommand("generate", "Write random instances and a manifest");
  scale(gen);
  common(gen);
  gen->add_option("--count", c.count, "Number of instances");
  gen->add_option("--out", c.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a policy with REINFORCE");
  scale(tr);
  common(tr);
  model_flags(tr);
  tr->add_option("--steps", c.steps, "Optimizer steps");
  tr->add_option("--batch", c.batch, "Base instances per step");
  tr->add_option("--augment", c.augmentations, "Augmented variants per instance (1..8)");
  tr->add_option("--lr", c.lr, "Adam learning rate");
  tr->add_option("--clip", c.clip, "Gradient-norm clip");
  tr->add_option("--eval-every", c.eval_every, "Held-out greedy evaluation interval (0 = off)");
  tr->add_option("--eval-size", c.eval_size, "Held-out instances");
  tr->add_option("--checkpoint-every", c.checkpoint_every, "Checkpoint interval (0 = final only)");
  tr->add_flag("--no-dual-modality", c.no_dual_modality, "Node encoder without edge fusion");
  tr->add_flag("--no-pfca", c.no_pfca, "Decoder without the previous-vehicle node update");
  tr->add_flag("--no-vehicle-augment", c.no_vehicle_augment, "Augment coordinates only");
  tr->add_option("--out", c.out, "Run directory")->required();

  auto* solve = app.add_subcommand("solve", "Solve instances with a trained checkpoint");
  common(solve);
  solve->add_option("--instances", c.instances, "Instance file or directory")->required();
  solve->add_option("--checkpoint", c.checkpoint, "Checkpoint file")->required();
  solve->add_option("--decode", c.decode, "Decoding")->check(CLI::IsMember({"greedy", "sample"}));
  auto* k_opt = solve->add_option("--k", c.k, "Samples per instance");
  solve->add_option("--out", c.out, "Solution directory")->required();

  auto* ev = app.add_subcommand("eval", "Compare one solver against stored reference solutions");
  common(ev);
  ev->add_option("--instances", c.instances, "Instance file or directory")->required();
  ev->add_option("--references", c.references, "Reference solution file or directory")->required();
  ev->add_option("--reference-name", c.reference_name, "Reference label in the report");
  ev->add_option("--solver", c.solver, "exact | sa | ga | greedy | sample");
  ev->add_option("--checkpoint", c.checkpoint, "Checkpoint for neural solvers");
  auto* ev_k = ev->add_option("--k", c.k, "Samples per instance");
  ev->add_option("--iterations", c.iterations, "SA iterations");
  ev->add_option("--generations", c.generations, "GA generations");
  ev->add_option("--out", c.out, "Report file")->required();

  auto* bench = app.add_subcommand("bench", "Sweep solvers over every (M, N) group");
  common(bench);
  bench->add_option("--instances", c.instances, "Instance directory")->required();
  bench->add_option("--solvers", c.solvers, "Solvers in table order")->delimiter(',');
  bench->add_option("--checkpoint", c.checkpoint, "Checkpoint for neural solvers");
  auto* bench_k = bench->add_option("--k", c.k, "Samples per instance");
  bench->add_option("--iterations", c.iterations, "SA iterations");
  bench->add_option("--generations", c.generations, "GA generations");
  bench->add_option("--out", c.out, "Report directory")->required();

  auto* self = app.add_subcommand("selftest", "Run the fast invariant suite");
  self->add_option("--checkpoint", c.checkpoint, "Also verify this checkpoint file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : echo::exit_code(echo::ErrorKind::usage);
  }
  c.command = app.get_subcommands().front()->get_name();
  c.dist = echo::distribution_from_string(dist);
  c.timing = !no_timing;
  c.k_given = k_opt->count() > 0 || ev_k->count() > 0 || bench_k->count() > 0;
  return echo::run_command(c, std::cout, std::cerr);
}
