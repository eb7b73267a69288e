#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "echo/gradcheck.hpp"
#include "echo/mdp.hpp"
#include "echo/model.hpp"
#include "echo/problem.hpp"

namespace echo {

inline constexpr int kNodeTransformCount = 8;

// The eight reflections/rotations of the unit square, index 0 = identity.
Point node_transform(Point p, int index);

// One augmented copy of a base instance. vehicle_order[i] is the base
// vehicle placed at position i.
struct AugmentedVariant {
  Instance instance;
  int transform = 0;
  std::vector<int> vehicle_order;
  std::size_t base = 0;
};

struct AugmentedBatch {
  std::size_t base_count = 0;
  std::size_t variants_per_base = 0;
  // Grouped by base instance: entry b * K + k.
  std::vector<AugmentedVariant> variants;
  std::vector<DistanceMatrix> dists;
};

std::vector<AugmentedVariant> augment_instance(const Instance& instance, int k, std::uint64_t seed,
                                               bool vehicle_augment = true);
AugmentedBatch make_augmented_batch(const std::vector<Instance>& bases, int k, std::uint64_t seed,
                                    bool vehicle_augment = true);

// Routes of a base-instance solution re-indexed for a variant.
std::vector<Route> permute_routes(const std::vector<Route>& base_routes,
                                  const std::vector<int>& vehicle_order);

enum class DecodeMode { greedy, sample };

struct Trajectory {
  std::vector<Action> actions;
  std::vector<double> step_log_probs;
  double log_prob = 0.0;
  double reward = 0.0;
  Solution solution;
};

// Picks a flat (vehicle-major) index from action probabilities. Greedy ties
// go to the smallest index.
std::size_t select_action(const std::vector<double>& probs, DecodeMode mode, std::mt19937_64* rng);

struct DecodeOutput {
  Trajectory trajectory;
  nn::Var log_prob;  // sum of step log-probabilities (recording tapes only)
};

// Autoregressive decoding over a rank-2 node embedding on p's tape. With
// `forced` the given actions are replayed instead of selected.
template <class T>
DecodeOutput decode(BoundParameters<T>& p, const ModelConfig& config, const Instance& instance,
                    const DistanceMatrix& dist, nn::Var nodes, DecodeMode mode,
                    std::mt19937_64* rng, const std::vector<Action>* forced = nullptr);

// Fused node embedding (n x d) of one instance in inference mode (running
// batch-norm statistics).
template <class T>
nn::Tensor<T> encode_instance(const ParameterSet<T>& params, const ModelConfig& config,
                              const Instance& instance, const DistanceMatrix& dist);

// Decodes from a precomputed node embedding without recording gradients.
template <class T>
Trajectory rollout_encoded(const ParameterSet<T>& params, const ModelConfig& config,
                           const Instance& instance, const DistanceMatrix& dist,
                           const nn::Tensor<T>& nodes, DecodeMode mode, std::uint64_t seed);

template <class T>
Trajectory rollout(const ParameterSet<T>& params, const ModelConfig& config,
                   const Instance& instance, DecodeMode mode, std::uint64_t seed);

// A = R - mean_k R per group of k consecutive rewards.
std::vector<double> shared_baseline_advantages(const std::vector<double>& rewards, std::size_t k,
                                               std::vector<double>* baselines = nullptr);

template <class T>
struct BatchGradient {
  std::vector<Trajectory> trajectories;
  std::vector<double> advantages;
  std::vector<double> baselines;
  // Surrogate loss -(1 / (B K)) sum A log p; its gradient is the negated
  // policy gradient.
  double loss = 0.0;
  std::vector<std::vector<T>> grads;  // per ParameterSet entry, empty if untouched
  EncoderStats stats;
};

// Encodes every variant in one training-mode batch, decodes each (sampled,
// greedy or replayed), forms shared-baseline advantages and, if requested,
// backpropagates the surrogate loss.
template <class T>
BatchGradient<T> reinforce_gradient(const ParameterSet<T>& params, const ModelConfig& config,
                                    const AugmentedBatch& batch, DecodeMode mode,
                                    std::uint64_t seed, bool compute_grads,
                                    const std::vector<std::vector<Action>>* forced = nullptr);

struct SurrogateCheck {
  ModelConfig model;
  int n_vehicles = 2;
  int n_customers = 5;
  int batch = 2;
  int augmentations = 8;
  std::size_t probes = 200;
  std::uint64_t seed = 7;
};

// Finite-difference check of the 64-bit surrogate loss gradient on replayed
// sampled trajectories.
nn::GradCheckReport surrogate_gradient_check(const SurrogateCheck& check);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ParameterSet<float>& params, AdamConfig config);
  void step(ParameterSet<float>& params, const std::vector<std::vector<double>>& grads);
  long steps() const { return t_; }

 private:
  AdamConfig config_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  ModelConfig model;
  GenConfig instances;  // n_customers, n_vehicles, ranges and distribution
  int batch_size = 128;
  int augmentations = 8;
  int steps = 500;
  AdamConfig adam;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  bool vehicle_augment = true;
  int eval_every = 50;
  int eval_size = 256;
  int checkpoint_every = 0;  // 0 = only the final checkpoint
  std::filesystem::path out_dir;  // empty = no files
  bool record_time = true;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct MetricsRow {
  int step = 0;
  double mean_objective = 0.0;
  double baseline_mean = 0.0;
  double grad_norm = 0.0;
  double seconds = 0.0;
};

struct EvalPoint {
  int step = 0;
  double greedy_mean_objective = 0.0;
};

struct TrainResult {
  ParameterSet<float> params;
  std::vector<MetricsRow> log;
  std::vector<EvalPoint> evals;
  std::vector<std::filesystem::path> checkpoints;
};

std::string format_metrics_row(const MetricsRow& row);
inline constexpr const char* kMetricsHeader = "step\tmean_obj\tbaseline_mean\tgrad_norm\tseconds";

// Held-out instances used for periodic greedy evaluation.
std::vector<Instance> held_out_set(const TrainConfig& config);

// Greedy mean objective of a parameter set over instances.
double greedy_mean_objective(const ParameterSet<float>& params, const ModelConfig& config,
                             const std::vector<Instance>& instances);

using StepCallback = std::function<void(const MetricsRow&)>;

TrainResult train(const TrainConfig& config, const ParameterSet<float>* initial = nullptr,
                  const StepCallback& on_step = {});

}  // namespace echo
