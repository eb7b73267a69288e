#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "echo/common.hpp"
#include "echo/problem.hpp"

namespace echo {

struct RunConfig {
  std::string command;

  std::filesystem::path instances;
  std::filesystem::path checkpoint;
  std::filesystem::path references;
  std::filesystem::path out;

  // generate / train scale
  int m = 3;
  int n = 60;
  int count = 10;
  Distribution dist = Distribution::uniform;
  std::uint64_t seed = 1;
  int workers = 1;

  // solve / eval / bench
  std::string decode = "greedy";
  int k = 1280;
  bool k_given = false;
  std::string solver = "greedy";
  std::string reference_name;
  std::vector<std::string> solvers{"exact", "sa", "ga", "greedy", "sample"};
  long iterations = 50000;
  long generations = 200;

  // train
  int steps = 500;
  int batch = 128;
  int augmentations = 8;
  int embed_dim = 128;
  int layers = 3;
  int knn_k = 16;
  double lr = 1e-4;
  double clip = 1.0;
  int eval_every = 50;
  int eval_size = 256;
  int checkpoint_every = 0;
  bool no_dual_modality = false;
  bool no_pfca = false;
  bool no_vehicle_augment = false;

  bool timing = true;
};

// Sorted by file name; a directory yields every *.json except manifest.json.
std::vector<std::pair<std::filesystem::path, Instance>> load_instances(const std::filesystem::path& path);

void cmd_generate(const RunConfig& config, std::ostream& log);
void cmd_train(const RunConfig& config, std::ostream& log);
void cmd_solve(const RunConfig& config, std::ostream& log);
void cmd_eval(const RunConfig& config, std::ostream& log);
void cmd_bench(const RunConfig& config, std::ostream& log);
// Returns the number of failed checks.
int cmd_selftest(const RunConfig& config, std::ostream& log);

inline constexpr int kExitChecksFailed = 1;
int exit_code(ErrorKind kind);

// Dispatches config.command and maps errors to exit codes.
int run_command(const RunConfig& config, std::ostream& log, std::ostream& err);

}  // namespace echo
