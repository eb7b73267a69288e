#include "echo/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "echo/common.hpp"
#include "echo/kernels.hpp"

namespace echo {

using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

std::string to_string(EdgeMode m) { return m == EdgeMode::knn_sorted ? "knn_sorted" : "full_row"; }

EdgeMode edge_mode_from_string(const std::string& s) {
  if (s == "knn_sorted" || s == "knn") return EdgeMode::knn_sorted;
  if (s == "full_row") return EdgeMode::full_row;
  throw ValidationError("unknown edge feature mode '" + s + "'");
}

void validate(const ModelConfig& c) {
  if (c.embed_dim <= 0 || c.embed_dim % 8 != 0)
    throw ValidationError("embed_dim " + std::to_string(c.embed_dim) + " is not divisible by 8");
  if (c.head_count != 8) throw ValidationError("head_count is fixed at 8");
  if (c.encoder_layers < 0) throw ValidationError("encoder_layers must be >= 0");
  if (!(c.logit_clip > 0.0)) throw ValidationError("logit_clip must be > 0");
  if (c.edge_mode == EdgeMode::knn_sorted && c.knn_k < 1)
    throw ValidationError("knn_k must be >= 1");
  if (c.edge_mode == EdgeMode::full_row && c.full_row_nodes < 2)
    throw ValidationError("full_row mode needs full_row_nodes >= 2");
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},         {"head_count", c.head_count},
          {"encoder_layers", c.encoder_layers}, {"logit_clip", c.logit_clip},
          {"edge_mode", to_string(c.edge_mode)}, {"knn_k", c.knn_k},
          {"full_row_nodes", c.full_row_nodes}, {"dual_modality", c.dual_modality},
          {"pfca", c.pfca}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.head_count = j.value("head_count", c.head_count);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.logit_clip = j.value("logit_clip", c.logit_clip);
    c.edge_mode = edge_mode_from_string(j.value("edge_mode", to_string(c.edge_mode)));
    c.knn_k = j.value("knn_k", c.knn_k);
    c.full_row_nodes = j.value("full_row_nodes", c.full_row_nodes);
    c.dual_modality = j.value("dual_modality", c.dual_modality);
    c.pfca = j.value("pfca", c.pfca);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed model config: ") + e.what());
  }
  validate(c);
  return c;
}

template <class T>
std::size_t ParameterSet<T>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

template <class T>
bool ParameterSet<T>::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

template <class T>
void ParameterSet<T>::add(std::string name, Tensor<T> value, bool trainable) {
  if (index_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
  index_[name] = entries.size();
  entries.push_back({std::move(name), std::move(value), trainable});
}

template <class T>
std::size_t ParameterSet<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries)
    if (e.trainable) n += e.value.size();
  return n;
}

template <class T>
std::vector<T> ParameterSet<T>::flatten_trainable() const {
  std::vector<T> flat;
  flat.reserve(trainable_count());
  for (const auto& e : entries)
    if (e.trainable) flat.insert(flat.end(), e.value.data.begin(), e.value.data.end());
  return flat;
}

template <class T>
void ParameterSet<T>::assign_trainable(std::span<const T> flat) {
  if (flat.size() != trainable_count()) throw ValidationError("assign_trainable: size mismatch");
  std::size_t off = 0;
  for (auto& e : entries)
    if (e.trainable) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), e.value.size(), e.value.data.begin());
      off += e.value.size();
    }
}

namespace {

void add_attention_layout(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix,
                          std::size_t d) {
  for (const char* w : {"W_Q", "W_K", "W_V", "W_O"}) out.emplace_back(prefix + w, Shape{d, d});
}

bool is_buffer(const std::string& name) {
  return name.ends_with("running_mean") || name.ends_with("running_var");
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c,
                                                           std::vector<bool>* trainable) {
  validate(c);
  const auto d = static_cast<std::size_t>(c.embed_dim);
  const std::size_t f = 4 * d;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("node.W_no", Shape{3, d});
  out.emplace_back("node.depot_token", Shape{d});
  for (int l = 0; l < c.encoder_layers; ++l) {
    const std::string p = "enc" + std::to_string(l) + ".";
    add_attention_layout(out, p + "attn.", d);
    for (const char* bn : {"bn1.", "bn2."}) {
      if (std::string(bn) == "bn2.") {
        out.emplace_back(p + "ff.W_1", Shape{d, f});
        out.emplace_back(p + "ff.W_2", Shape{f, d});
      }
      for (const char* s : {"gamma", "beta", "running_mean", "running_var"})
        out.emplace_back(p + bn + s, Shape{d});
    }
  }
  if (c.dual_modality) {
    out.emplace_back("edge.W_ed", Shape{static_cast<std::size_t>(c.edge_dim()), d});
    add_attention_layout(out, "fusion.", d);
    out.emplace_back("fusion.W_g", Shape{2 * d, 1});
  }
  out.emplace_back("veh.W_3", Shape{4, f});
  out.emplace_back("veh.W_4", Shape{f, d});
  out.emplace_back("veh.W_pe", Shape{d, d});
  add_attention_layout(out, "veh.self.", d);
  add_attention_layout(out, "veh.cross.", d);
  if (trainable) {
    trainable->clear();
    for (const auto& [name, shape] : out) trainable->push_back(!is_buffer(name));
  }
  return out;
}

template <class T>
ParameterSet<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet<T> params;
  params.init_scheme = "uniform(+-1/sqrt(fan_in)); depot token 0; bn gamma 1 beta 0";
  for (const auto& [name, shape] : parameter_layout(config)) {
    Tensor<T> t(shape);
    if (name.ends_with("gamma") || name.ends_with("running_var")) {
      std::fill(t.data.begin(), t.data.end(), T(1));
    } else if (name.ends_with("beta") || name.ends_with("running_mean") ||
               name == "node.depot_token") {
      // zeros
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : t.data) v = static_cast<T>(u(rng));
    }
    params.add(name, std::move(t), !is_buffer(name));
  }
  return params;
}

template <class T>
Tensor<T> edge_features(const DistanceMatrix& dist, const ModelConfig& config) {
  const std::size_t n = dist.size();
  if (config.edge_mode == EdgeMode::full_row) {
    if (static_cast<std::size_t>(config.full_row_nodes) != n)
      throw ValidationError("full_row edge features built for " +
                            std::to_string(config.full_row_nodes) + " nodes, instance has " +
                            std::to_string(n));
    Tensor<T> out(Shape{n, n});
    for (std::size_t i = 0; i < n * n; ++i) out.data[i] = static_cast<T>(dist.data()[i]);
    return out;
  }
  const auto k = static_cast<std::size_t>(config.knn_k);
  if (k + 1 > n)
    throw ValidationError("knn_k = " + std::to_string(k) + " exceeds the customer count " +
                          std::to_string(n - 1));
  Tensor<T> out(Shape{n, k});
  std::vector<double> row;
  for (std::size_t j = 0; j < n; ++j) {
    row.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (i != j) row.push_back(dist(j, i));
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k), row.end());
    for (std::size_t c = 0; c < k; ++c) out.at(j, c) = static_cast<T>(row[c]);
  }
  return out;
}

template <class T>
NodeInputs<T> node_inputs(const std::vector<const Instance*>& instances,
                          const std::vector<const DistanceMatrix*>& dists,
                          const ModelConfig& config) {
  if (instances.empty() || instances.size() != dists.size())
    throw ValidationError("node_inputs: need one distance matrix per instance");
  NodeInputs<T> in;
  in.batch = instances.size();
  in.nodes = instances[0]->n_nodes();
  const std::size_t e = config.dual_modality ? static_cast<std::size_t>(config.edge_dim()) : 0;
  in.attributes = Tensor<T>(Shape{in.batch, in.nodes, 3});
  if (config.dual_modality) in.edges = Tensor<T>(Shape{in.batch, in.nodes, e});
  for (std::size_t b = 0; b < in.batch; ++b) {
    const Instance& inst = *instances[b];
    if (inst.n_nodes() != in.nodes) throw ValidationError("node_inputs: node counts differ");
    for (std::size_t j = 0; j < in.nodes; ++j) {
      const Point p = inst.node(j);
      T* a = in.attributes.data.data() + (b * in.nodes + j) * 3;
      a[0] = static_cast<T>(p.x);
      a[1] = static_cast<T>(p.y);
      a[2] = static_cast<T>(inst.demand(j));
    }
    if (config.dual_modality) {
      const auto ef = edge_features<T>(*dists[b], config);
      std::copy(ef.data.begin(), ef.data.end(),
                in.edges.data.begin() + static_cast<std::ptrdiff_t>(b * in.nodes * e));
    }
  }
  return in;
}

template <class T>
Var BoundParameters<T>::operator()(const std::string& name) {
  const std::size_t i = params_.index_of(name);
  if (!vars_[i].valid()) {
    const auto& e = params_.entries[i];
    vars_[i] = tape_.external(e.value.shape, e.value.data.data(), grad_ && e.trainable);
  }
  return vars_[i];
}

template <class T>
void BoundParameters<T>::accumulate_gradients(std::vector<std::vector<T>>& grads) const {
  if (grads.size() != params_.entries.size()) grads.resize(params_.entries.size());
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (!vars_[i].valid() || !params_.entries[i].trainable) continue;
    auto g = tape_.grad(vars_[i]);
    if (g.empty()) continue;
    auto& dst = grads[i];
    if (dst.empty()) dst.assign(g.size(), T(0));
    for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
  }
}

namespace {

template <class T>
Var multi_head(BoundParameters<T>& p, const std::string& prefix, Var query, Var key_value,
               const std::vector<unsigned char>* mask = nullptr) {
  auto& t = p.tape();
  const Var q = nn::linear(t, query, p(prefix + "W_Q"));
  const Var k = nn::linear(t, key_value, p(prefix + "W_K"));
  const Var v = nn::linear(t, key_value, p(prefix + "W_V"));
  const Var a = nn::attention(t, q, k, v, 8, mask);
  return nn::linear(t, a, p(prefix + "W_O"));
}

template <class T>
Var normalize(BoundParameters<T>& p, const std::string& prefix, Var x, bool training,
              EncoderStats* stats) {
  nn::BatchNormMode<T> mode;
  mode.training = training;
  EncoderStats::Layer layer{prefix, {}, {}};
  if (training) {
    mode.observed_mean = &layer.mean;
    mode.observed_var = &layer.var;
  } else {
    mode.running_mean = p.buffer(prefix + "running_mean");
    mode.running_var = p.buffer(prefix + "running_var");
  }
  Var y = nn::batch_norm(p.tape(), x, p(prefix + "gamma"), p(prefix + "beta"), mode);
  if (training && stats) stats->layers.push_back(std::move(layer));
  return y;
}

}  // namespace

template <class T>
NodeEncoding encode_nodes(BoundParameters<T>& p, const ModelConfig& config,
                          const NodeInputs<T>& inputs, bool training, EncoderStats* stats) {
  auto& t = p.tape();
  if (stats) {
    stats->layers.clear();
    stats->rows = inputs.batch * inputs.nodes;
  }
  const Var attrs = t.constant(inputs.attributes);
  Var h = nn::linear(t, attrs, p("node.W_no"));
  h = nn::add_row(t, h, p("node.depot_token"), inputs.nodes, 0);
  for (int l = 0; l < config.encoder_layers; ++l) {
    const std::string pre = "enc" + std::to_string(l) + ".";
    const Var mixed = nn::add(t, h, multi_head(p, pre + "attn.", h, h));
    const Var hbar = normalize(p, pre + "bn1.", mixed, training, stats);
    const Var ff = nn::linear(t, nn::relu(t, nn::linear(t, hbar, p(pre + "ff.W_1"))), p(pre + "ff.W_2"));
    h = normalize(p, pre + "bn2.", nn::add(t, hbar, ff), training, stats);
  }
  NodeEncoding out{h, h};
  if (!config.dual_modality) return out;
  const Var edges = t.constant(inputs.edges);
  const Var e = nn::linear(t, edges, p("edge.W_ed"));
  const Var cross = multi_head(p, "fusion.", h, e);
  const Var gate = nn::sigmoid(t, nn::linear(t, nn::concat(t, cross, h), p("fusion.W_g")));
  out.nodes = nn::add(t, h, nn::mul_rows(t, cross, gate));
  return out;
}

template <class T>
void update_running_stats(ParameterSet<T>& params, const EncoderStats& stats, double momentum) {
  const double unbias =
      stats.rows > 1 ? static_cast<double>(stats.rows) / static_cast<double>(stats.rows - 1) : 1.0;
  for (const auto& layer : stats.layers) {
    auto& rm = params[layer.prefix + "running_mean"];
    auto& rv = params[layer.prefix + "running_var"];
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm.data[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rm.data[c]) +
                                  momentum * layer.mean[c]);
      rv.data[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(rv.data[c]) +
                                  momentum * layer.var[c] * unbias);
    }
  }
}

template <class T>
DecoderContext make_decoder_context(BoundParameters<T>& p, Var nodes) {
  auto& t = p.tape();
  DecoderContext ctx;
  ctx.nodes = nodes;
  ctx.n_nodes = t.shape(nodes).rows();
  ctx.node_keys = nn::linear(t, nodes, p("veh.cross.W_K"));
  ctx.node_values = nn::linear(t, nodes, p("veh.cross.W_V"));
  return ctx;
}

template <class T>
Tensor<T> vehicle_features(const FleetState& state) {
  const std::size_t m = state.instance->n_vehicles();
  double scale = 0.0;
  for (double c : state.clock) scale = std::max(scale, c);
  if (!(scale > 0.0)) scale = 1.0;
  double cap = 0.0;
  for (const auto& v : state.instance->vehicles) cap = std::max(cap, static_cast<double>(v.capacity));
  Tensor<T> f(Shape{m, 4});
  for (std::size_t i = 0; i < m; ++i) {
    const auto& v = state.instance->vehicles[i];
    f.at(i, 0) = static_cast<T>(v.speed);
    f.at(i, 1) = static_cast<T>(v.capacity / cap);
    f.at(i, 2) = static_cast<T>(state.used_capacity[i] / cap);
    f.at(i, 3) = static_cast<T>(state.clock[i] / scale);
  }
  return f;
}

template <class T>
Var encode_vehicles(BoundParameters<T>& p, const ModelConfig&, const DecoderContext& ctx,
                    const FleetState& state) {
  auto& t = p.tape();
  const Var feats = t.constant(vehicle_features<T>(state));
  const Var attr = nn::linear(t, nn::relu(t, nn::linear(t, feats, p("veh.W_3"))), p("veh.W_4"));
  const Var pe = nn::gather_rows(t, ctx.nodes, state.last_node);
  const Var m1 = nn::add(t, attr, nn::linear(t, pe, p("veh.W_pe")));
  const Var m2 = nn::add(t, m1, multi_head(p, "veh.self.", m1, m1));

  std::vector<unsigned char> visible(ctx.n_nodes, 1);
  for (std::size_t j = 1; j < ctx.n_nodes; ++j) visible[j] = state.remaining_demand[j] > 0 ? 1 : 0;
  const Var q = nn::linear(t, m2, p("veh.cross.W_Q"));
  const Var a = nn::attention(t, q, ctx.node_keys, ctx.node_values, 8, &visible);
  return nn::add(t, m2, nn::linear(t, a, p("veh.cross.W_O")));
}

template <class T>
Var pfca_update(Tape<T>& t, Var nodes, std::optional<Var> selected, bool enabled) {
  if (!enabled || !selected) return nodes;
  const double d = static_cast<double>(t.shape(nodes).last());
  const Var scores = nn::scale(t, nn::matmul_nt(t, nodes, *selected), static_cast<T>(1.0 / std::sqrt(d)));
  const Var weights = nn::softmax(t, scores);
  return nn::add(t, nn::linear(t, weights, *selected), nodes);
}

template <class T>
Var pair_logits(Tape<T>& t, Var vehicles, Var nodes, const ActionMask& mask, double clip) {
  if (mask.count() == 0) throw NumericError("pair_logits: every vehicle-node pair is masked");
  const double d = static_cast<double>(t.shape(nodes).last());
  const Var raw = nn::matmul_nt(t, vehicles, nodes);
  if (t.shape(raw).size() != mask.feasible.size())
    throw ValidationError("pair_logits: mask shape mismatch");
  const Var bounded = nn::tanh(t, nn::scale(t, raw, static_cast<T>(1.0 / std::sqrt(d))));
  return nn::masked_fill(t, nn::scale(t, bounded, static_cast<T>(clip)), mask.feasible);
}

template <class T>
std::vector<double> action_probabilities(std::span<const T> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits)
    if (!kernels::is_masked(v)) mx = std::max(mx, static_cast<double>(v));
  if (!std::isfinite(mx)) throw NumericError("action_probabilities: every pair is masked");
  std::vector<double> p(logits.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!kernels::is_masked(logits[i])) {
      p[i] = std::exp(static_cast<double>(logits[i]) - mx);
      sum += p[i];
    }
  for (auto& v : p) v /= sum;
  return p;
}

#define ECHO_INSTANTIATE_MODEL(T)                                                               \
  template struct ParameterSet<T>;                                                             \
  template ParameterSet<T> init_parameters<T>(const ModelConfig&, std::uint64_t);              \
  template Tensor<T> edge_features<T>(const DistanceMatrix&, const ModelConfig&);              \
  template NodeInputs<T> node_inputs<T>(const std::vector<const Instance*>&,                   \
                                        const std::vector<const DistanceMatrix*>&,             \
                                        const ModelConfig&);                                   \
  template class BoundParameters<T>;                                                           \
  template NodeEncoding encode_nodes<T>(BoundParameters<T>&, const ModelConfig&,              \
                                        const NodeInputs<T>&, bool, EncoderStats*);            \
  template void update_running_stats<T>(ParameterSet<T>&, const EncoderStats&, double);        \
  template DecoderContext make_decoder_context<T>(BoundParameters<T>&, Var);                   \
  template Tensor<T> vehicle_features<T>(const FleetState&);                                   \
  template Var encode_vehicles<T>(BoundParameters<T>&, const ModelConfig&,                     \
                                  const DecoderContext&, const FleetState&);                   \
  template Var pfca_update<T>(Tape<T>&, Var, std::optional<Var>, bool);                        \
  template Var pair_logits<T>(Tape<T>&, Var, Var, const ActionMask&, double);                  \
  template std::vector<double> action_probabilities<T>(std::span<const T>);

ECHO_INSTANTIATE_MODEL(float)
ECHO_INSTANTIATE_MODEL(double)

#undef ECHO_INSTANTIATE_MODEL

}  // namespace echo
