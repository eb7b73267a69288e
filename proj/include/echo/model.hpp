#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "echo/mdp.hpp"
#include "echo/ops.hpp"
#include "echo/problem.hpp"
#include "echo/tensor.hpp"

namespace echo {

enum class EdgeMode { knn_sorted, full_row };

std::string to_string(EdgeMode m);
EdgeMode edge_mode_from_string(const std::string& s);

struct ModelConfig {
  int embed_dim = 128;
  int head_count = 8;
  int encoder_layers = 3;
  double logit_clip = 10.0;
  EdgeMode edge_mode = EdgeMode::knn_sorted;
  int knn_k = 16;
  // Node count (depot included) the full_row edge projection is built for.
  int full_row_nodes = 0;
  bool dual_modality = true;
  bool pfca = true;

  int edge_dim() const { return edge_mode == EdgeMode::knn_sorted ? knn_k : full_row_nodes; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void validate(const ModelConfig& config);
nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Named policy weights in a stable order. Trainable tensors and the
// batch-norm running buffers live side by side; buffers are excluded from
// gradients and parameter counts.
template <class T>
struct ParameterSet {
  struct Entry {
    std::string name;
    nn::Tensor<T> value;
    bool trainable = true;
  };
  std::vector<Entry> entries;
  std::string init_scheme;

  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const;
  nn::Tensor<T>& operator[](const std::string& name) { return entries[index_of(name)].value; }
  const nn::Tensor<T>& operator[](const std::string& name) const {
    return entries[index_of(name)].value;
  }
  void add(std::string name, nn::Tensor<T> value, bool trainable = true);

  // Scalar count over trainable tensors.
  std::size_t trainable_count() const;
  std::vector<T> flatten_trainable() const;
  void assign_trainable(std::span<const T> flat);

 private:
  std::map<std::string, std::size_t> index_;
};

template <class To, class From>
ParameterSet<To> cast_parameters(const ParameterSet<From>& p) {
  ParameterSet<To> out;
  out.init_scheme = p.init_scheme;
  for (const auto& e : p.entries) out.add(e.name, nn::cast<To>(e.value), e.trainable);
  return out;
}

// Name -> shape layout implied by a config.
std::vector<std::pair<std::string, nn::Shape>> parameter_layout(const ModelConfig& config,
                                                                std::vector<bool>* trainable = nullptr);

template <class T>
ParameterSet<T> init_parameters(const ModelConfig& config, std::uint64_t seed);

// Raw edge features, one row per node: the k smallest distances to other
// nodes in ascending order (knn_sorted), or the full distance row.
template <class T>
nn::Tensor<T> edge_features(const DistanceMatrix& dist, const ModelConfig& config);

// Encoder inputs for a batch of instances with equal node counts:
// attributes (B, n, 3) = (x, y, initial demand) and edges (B, n, E).
template <class T>
struct NodeInputs {
  std::size_t batch = 0;
  std::size_t nodes = 0;
  nn::Tensor<T> attributes;
  nn::Tensor<T> edges;
};

template <class T>
NodeInputs<T> node_inputs(const std::vector<const Instance*>& instances,
                          const std::vector<const DistanceMatrix*>& dists,
                          const ModelConfig& config);

// Lazily binds ParameterSet tensors as non-owning leaves on one tape.
template <class T>
class BoundParameters {
 public:
  BoundParameters(nn::Tape<T>& tape, const ParameterSet<T>& params, bool requires_grad)
      : tape_(tape), params_(params), vars_(params.entries.size()), grad_(requires_grad) {}

  nn::Var operator()(const std::string& name);
  const T* buffer(const std::string& name) const { return params_[name].data.data(); }
  nn::Tape<T>& tape() { return tape_; }

  // Adds this tape's parameter gradients into `grads` (same layout as the
  // bound ParameterSet, trainable entries only).
  void accumulate_gradients(std::vector<std::vector<T>>& grads) const;

 private:
  nn::Tape<T>& tape_;
  const ParameterSet<T>& params_;
  std::vector<nn::Var> vars_;
  bool grad_;
};

// Batch statistics observed by each encoder batch-norm layer in training mode.
struct EncoderStats {
  struct Layer {
    std::string prefix;
    std::vector<double> mean;
    std::vector<double> var;
  };
  std::vector<Layer> layers;
  std::size_t rows = 0;
};

struct NodeEncoding {
  nn::Var block_output;  // H^L
  nn::Var nodes;         // fused node embedding
};

template <class T>
NodeEncoding encode_nodes(BoundParameters<T>& p, const ModelConfig& config,
                          const NodeInputs<T>& inputs, bool training,
                          EncoderStats* stats = nullptr);

// Folds observed statistics into the running buffers (momentum update,
// unbiased variance).
template <class T>
void update_running_stats(ParameterSet<T>& params, const EncoderStats& stats,
                          double momentum = 0.1);

// Per-rollout decoder state over a rank-2 node embedding (n x d).
struct DecoderContext {
  nn::Var nodes;
  nn::Var node_keys;
  nn::Var node_values;
  std::size_t n_nodes = 0;
};

template <class T>
DecoderContext make_decoder_context(BoundParameters<T>& p, nn::Var nodes);

// Vehicle attributes (speed, capacity, used capacity, clock). Capacities are
// divided by the fleet's largest capacity, the clock by the fleet's current
// maximum clock (1 at t = 0).
template <class T>
nn::Tensor<T> vehicle_features(const FleetState& state);

template <class T>
nn::Var encode_vehicles(BoundParameters<T>& p, const ModelConfig& config,
                        const DecoderContext& ctx, const FleetState& state);

// Node embedding update from the previously selected vehicle row. Returns
// `nodes` unchanged when there is no previous selection or PFCA is off.
template <class T>
nn::Var pfca_update(nn::Tape<T>& tape, nn::Var nodes, std::optional<nn::Var> selected_vehicle,
                    bool enabled);

template <class T>
nn::Var pair_logits(nn::Tape<T>& tape, nn::Var vehicles, nn::Var nodes,
                    const ActionMask& mask, double clip);

// Softmax over the flattened vehicle x node grid; masked pairs get 0.
template <class T>
std::vector<double> action_probabilities(std::span<const T> logits);

class CheckpointError : public ValidationError {
 public:
  enum class Reason { integrity, version, shape };
  CheckpointError(Reason reason, const std::string& what) : ValidationError(what), reason_(reason) {}
  Reason reason() const { return reason_; }

 private:
  Reason reason_;
};

// Checkpoints store float32 payloads.
inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const ParameterSet<float>& params, const ModelConfig& config,
                     const std::filesystem::path& path);
std::pair<ParameterSet<float>, ModelConfig> load_checkpoint(const std::filesystem::path& path);
// Same, but rejects a checkpoint whose config differs from `expected`.
std::pair<ParameterSet<float>, ModelConfig> load_checkpoint(const std::filesystem::path& path,
                                                            const ModelConfig& expected);

}  // namespace echo
