#pragma once

// Model probes shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "echo/kernels.hpp"
#include "echo/mdp.hpp"
#include "echo/model.hpp"
#include "echo/training.hpp"

namespace echo::test {

template <class T>
struct DecoderProbe {
  nn::Tensor<T> nodes;     // n x d fused node embedding
  nn::Tensor<T> vehicles;  // M x d at the probed state
  nn::Tensor<T> updated;   // PFCA output at the probed state
  nn::Tensor<T> logits;    // M x n
};

// Replays `actions` and evaluates the decoder at the resulting state.
template <class T>
DecoderProbe<T> probe_decoder(const ParameterSet<T>& params, const ModelConfig& config,
                              const Instance& inst, const std::vector<Action>& actions) {
  const DistanceMatrix dist(inst);
  DecoderProbe<T> out;
  out.nodes = encode_instance(params, config, inst, dist);
  nn::Tape<T> t(false);
  BoundParameters<T> p(t, params, false);
  const DecoderContext ctx =
      make_decoder_context(p, t.external(out.nodes.shape, out.nodes.data.data(), false));
  FleetState state = init_state(inst, dist);
  std::optional<nn::Var> selected;
  for (const Action& a : actions) {
    const nn::Var veh = encode_vehicles(p, config, ctx, state);
    selected = nn::gather_rows(t, veh, {a.vehicle});
    apply_action(state, a);
  }
  const nn::Var veh = encode_vehicles(p, config, ctx, state);
  const nn::Var upd = pfca_update(t, ctx.nodes, selected, config.pfca);
  out.vehicles = t.tensor(veh);
  out.updated = t.tensor(upd);
  out.logits = t.tensor(pair_logits(t, veh, upd, action_mask(state), config.logit_clip));
  return out;
}

// Uniformly random feasible prefix of `steps` actions (stops early at the end).
inline std::vector<Action> random_prefix(const Instance& inst, int steps, std::mt19937_64& rng) {
  const DistanceMatrix dist(inst);
  FleetState s = init_state(inst, dist);
  std::vector<Action> out;
  while (static_cast<int>(out.size()) < steps && !is_terminal(s)) {
    const ActionMask m = action_mask(s);
    std::vector<std::size_t> ok;
    for (std::size_t i = 0; i < m.feasible.size(); ++i)
      if (m.feasible[i]) ok.push_back(i);
    const std::size_t idx = ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
    const Action a{static_cast<int>(idx / m.n_nodes), static_cast<int>(idx % m.n_nodes)};
    out.push_back(a);
    apply_action(s, a);
  }
  return out;
}

// Every index attaining the maximum (clipped logits can tie at the bound).
template <class T>
std::vector<std::size_t> argmax_set(const std::vector<T>& v) {
  const T best = *std::max_element(v.begin(), v.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == best) out.push_back(i);
  return out;
}

struct EquivarianceTrial {
  double vehicle_dev = 0.0;  // max |M'(i) - M(sigma(i))|
  double vehicle_logit_dev = 0.0;
  double node_dev = 0.0;     // max |N'(pi(j)) - N(j)|
  double node_logit_dev = 0.0;
  bool mask_consistent = true;
  bool argmax_maps = true;  // the set of maximizing pairs maps through both permutations
  std::size_t argmax_ties = 1;
};

// One randomized trial: random instance, random decoding prefix, random
// vehicle permutation and random customer relabeling, all in 32-bit.
inline EquivarianceTrial equivariance_trial(const ParameterSet<float>& params,
                                            const ModelConfig& config, int m, int n,
                                            std::uint64_t seed) {
  GenConfig g;
  g.n_vehicles = m;
  g.n_customers = n;
  g.seed = seed;
  const Instance base = generate_instance(g);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto prefix = random_prefix(base, std::uniform_int_distribution<int>(0, n)(rng), rng);

  std::vector<int> order(static_cast<std::size_t>(m));  // order[i] = base vehicle at position i
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> pos(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) pos[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
  Instance vperm = base;
  for (std::size_t i = 0; i < order.size(); ++i) vperm.vehicles[i] = base.vehicles[static_cast<std::size_t>(order[i])];

  std::vector<int> relabel(static_cast<std::size_t>(n) + 1);  // relabel[j] = new index of node j
  std::iota(relabel.begin(), relabel.end(), 0);
  std::shuffle(relabel.begin() + 1, relabel.end(), rng);
  Instance cperm = base;
  for (std::size_t j = 1; j <= static_cast<std::size_t>(n); ++j)
    cperm.customers[static_cast<std::size_t>(relabel[j]) - 1] = base.customers[j - 1];

  std::vector<Action> vp, cp;
  for (const Action& a : prefix) {
    vp.push_back({pos[static_cast<std::size_t>(a.vehicle)], a.node});
    cp.push_back({a.vehicle, relabel[static_cast<std::size_t>(a.node)]});
  }
  const auto b = probe_decoder(params, config, base, prefix);
  const auto v = probe_decoder(params, config, vperm, vp);
  const auto c = probe_decoder(params, config, cperm, cp);

  const std::size_t d = static_cast<std::size_t>(config.embed_dim);
  const std::size_t nn_ = static_cast<std::size_t>(n) + 1;
  EquivarianceTrial r;
  auto logit_dev = [&](float x, float y) {
    if (kernels::is_masked(x) || kernels::is_masked(y)) {
      if (kernels::is_masked(x) != kernels::is_masked(y)) r.mask_consistent = false;
      return 0.0;
    }
    return std::abs(static_cast<double>(x) - static_cast<double>(y));
  };
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t src = static_cast<std::size_t>(order[i]);
    for (std::size_t k = 0; k < d; ++k)
      r.vehicle_dev = std::max(r.vehicle_dev, std::abs(static_cast<double>(v.vehicles.data[i * d + k]) -
                                                       static_cast<double>(b.vehicles.data[src * d + k])));
    for (std::size_t j = 0; j < nn_; ++j)
      r.vehicle_logit_dev = std::max(r.vehicle_logit_dev, logit_dev(v.logits.data[i * nn_ + j], b.logits.data[src * nn_ + j]));
  }
  for (std::size_t j = 0; j < nn_; ++j) {
    const std::size_t dst = static_cast<std::size_t>(relabel[j]);
    for (std::size_t k = 0; k < d; ++k)
      r.node_dev = std::max(r.node_dev, std::abs(static_cast<double>(c.nodes.data[dst * d + k]) -
                                                 static_cast<double>(b.nodes.data[j * d + k])));
    for (std::size_t i = 0; i < order.size(); ++i)
      r.node_logit_dev = std::max(r.node_logit_dev, logit_dev(c.logits.data[i * nn_ + dst], b.logits.data[i * nn_ + j]));
  }
  const auto ab = argmax_set(b.logits.data);
  std::vector<std::size_t> want_v, want_c;
  for (std::size_t idx : ab) {
    const std::size_t bi = idx / nn_, bj = idx % nn_;
    want_v.push_back(static_cast<std::size_t>(pos[bi]) * nn_ + bj);
    want_c.push_back(bi * nn_ + static_cast<std::size_t>(relabel[bj]));
  }
  std::sort(want_v.begin(), want_v.end());
  std::sort(want_c.begin(), want_c.end());
  r.argmax_maps = argmax_set(v.logits.data) == want_v && argmax_set(c.logits.data) == want_c;
  r.argmax_ties = ab.size();
  return r;
}

}  // namespace echo::test
