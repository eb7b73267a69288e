#include "echo/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>

#include "echo/common.hpp"

namespace echo {

using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

Point node_transform(Point p, int index) {
  const double x = p.x, y = p.y;
  switch (index) {
    case 0: return {x, y};
    case 1: return {y, x};
    case 2: return {x, 1.0 - y};
    case 3: return {y, 1.0 - x};
    case 4: return {1.0 - x, y};
    case 5: return {1.0 - y, x};
    case 6: return {1.0 - x, 1.0 - y};
    case 7: return {1.0 - y, 1.0 - x};
    default: throw ValidationError("node transform index " + std::to_string(index) + " not in 0..7");
  }
}

std::vector<AugmentedVariant> augment_instance(const Instance& instance, int k, std::uint64_t seed,
                                               bool vehicle_augment) {
  if (k < 1 || k > kNodeTransformCount)
    throw ValidationError("augmentation count must be in 1..8, got " + std::to_string(k));
  std::vector<AugmentedVariant> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int t = 0; t < k; ++t) {
    AugmentedVariant v;
    v.transform = t;
    v.vehicle_order.resize(instance.n_vehicles());
    std::iota(v.vehicle_order.begin(), v.vehicle_order.end(), 0);
    if (vehicle_augment && t > 0) {
      std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
      std::shuffle(v.vehicle_order.begin(), v.vehicle_order.end(), rng);
    }
    Instance& a = v.instance;
    a.id = t == 0 ? instance.id : instance.id + "#a" + std::to_string(t);
    a.distribution = instance.distribution;
    a.depot = node_transform(instance.depot, t);
    a.customers = instance.customers;
    for (auto& c : a.customers) {
      const Point q = node_transform({c.x, c.y}, t);
      c.x = q.x;
      c.y = q.y;
    }
    for (int i : v.vehicle_order) a.vehicles.push_back(instance.vehicles[static_cast<std::size_t>(i)]);
    out.push_back(std::move(v));
  }
  return out;
}

AugmentedBatch make_augmented_batch(const std::vector<Instance>& bases, int k, std::uint64_t seed,
                                    bool vehicle_augment) {
  AugmentedBatch batch;
  batch.base_count = bases.size();
  batch.variants_per_base = static_cast<std::size_t>(k);
  for (std::size_t b = 0; b < bases.size(); ++b) {
    for (auto& v : augment_instance(bases[b], k, derive_seed(seed, b), vehicle_augment)) {
      v.base = b;
      batch.dists.emplace_back(v.instance);
      batch.variants.push_back(std::move(v));
    }
  }
  return batch;
}

std::vector<Route> permute_routes(const std::vector<Route>& base_routes,
                                  const std::vector<int>& vehicle_order) {
  if (base_routes.size() != vehicle_order.size())
    throw ValidationError("permute_routes: route count does not match the fleet");
  std::vector<Route> out;
  for (int i : vehicle_order) out.push_back(base_routes[static_cast<std::size_t>(i)]);
  return out;
}

std::size_t select_action(const std::vector<double>& probs, DecodeMode mode, std::mt19937_64* rng) {
  if (probs.empty()) throw NumericError("select_action: empty distribution");
  if (mode == DecodeMode::greedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[best]) best = i;
    return best;
  }
  if (!rng) throw ValidationError("select_action: sampling needs a random stream");
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(*rng);
  double acc = 0.0;
  std::size_t last = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = i;
    if (u < acc) return i;
  }
  if (last == probs.size()) throw NumericError("select_action: no positive probability");
  return last;
}

template <class T>
DecodeOutput decode(BoundParameters<T>& p, const ModelConfig& config, const Instance& instance,
                    const DistanceMatrix& dist, Var nodes, DecodeMode mode, std::mt19937_64* rng,
                    const std::vector<Action>* forced) {
  Tape<T>& t = p.tape();
  FleetState state = init_state(instance, dist);
  const DecoderContext ctx = make_decoder_context(p, nodes);
  const std::size_t n = instance.n_nodes();
  std::optional<Var> selected;
  std::vector<Var> step_vars;
  DecodeOutput out;
  Trajectory& tr = out.trajectory;

  while (!is_terminal(state)) {
    const ActionMask mask = action_mask(state);
    const Var vehicles = encode_vehicles(p, config, ctx, state);
    const Var updated = pfca_update(t, ctx.nodes, selected, config.pfca);
    const Var logits = pair_logits(t, vehicles, updated, mask, config.logit_clip);
    const auto probs = action_probabilities<T>(t.value(logits));

    std::size_t idx = 0;
    if (forced) {
      const auto s = static_cast<std::size_t>(state.step);
      if (s >= forced->size()) throw ValidationError("replayed trajectory ends before the episode");
      const Action a = (*forced)[s];
      if (a.vehicle < 0 || a.node < 0 || static_cast<std::size_t>(a.vehicle) >= mask.n_vehicles ||
          static_cast<std::size_t>(a.node) >= n || !mask(a.vehicle, a.node))
        throw ValidationError("replayed action " + std::to_string(s) + " is infeasible");
      idx = static_cast<std::size_t>(a.vehicle) * n + static_cast<std::size_t>(a.node);
    } else {
      idx = select_action(probs, mode, rng);
    }
    if (!mask.feasible[idx]) throw NumericError("decoder selected a masked pair");
    const Action action{static_cast<int>(idx / n), static_cast<int>(idx % n)};

    if (t.recording()) {
      const Var lp = nn::log_prob_at(t, logits, idx);
      step_vars.push_back(lp);
      tr.step_log_probs.push_back(static_cast<double>(t.value(lp)[0]));
    } else {
      tr.step_log_probs.push_back(std::log(probs[idx]));
    }
    tr.actions.push_back(action);
    selected = nn::gather_rows(t, vehicles, {action.vehicle});
    apply_action(state, action);
  }
  if (forced && forced->size() != tr.actions.size())
    throw ValidationError("replayed trajectory is longer than the episode");

  tr.log_prob = std::accumulate(tr.step_log_probs.begin(), tr.step_log_probs.end(), 0.0);
  if (!std::isfinite(tr.log_prob)) throw NumericError("trajectory log-probability is not finite");
  if (t.recording() && !step_vars.empty())
    out.log_prob = nn::weighted_sum(t, step_vars, std::vector<T>(step_vars.size(), T(1)));
  Finalized fin = finalize_reward(state);
  tr.reward = fin.reward;
  tr.solution = std::move(fin.solution);
  return out;
}

template <class T>
Tensor<T> encode_instance(const ParameterSet<T>& params, const ModelConfig& config,
                          const Instance& instance, const DistanceMatrix& dist) {
  Tape<T> tape(false);
  BoundParameters<T> p(tape, params, false);
  const auto inputs = node_inputs<T>({&instance}, {&dist}, config);
  const NodeEncoding enc = encode_nodes(p, config, inputs, false);
  Tensor<T> out = tape.tensor(enc.nodes);
  out.shape = Shape{inputs.nodes, static_cast<std::size_t>(config.embed_dim)};
  return out;
}

template <class T>
Trajectory rollout_encoded(const ParameterSet<T>& params, const ModelConfig& config,
                           const Instance& instance, const DistanceMatrix& dist,
                           const Tensor<T>& nodes, DecodeMode mode, std::uint64_t seed) {
  Tape<T> tape(false);
  BoundParameters<T> p(tape, params, false);
  const Var leaf = tape.external(nodes.shape, nodes.data.data(), false);
  std::mt19937_64 rng(seed);
  return decode(p, config, instance, dist, leaf, mode, &rng).trajectory;
}

template <class T>
Trajectory rollout(const ParameterSet<T>& params, const ModelConfig& config,
                   const Instance& instance, DecodeMode mode, std::uint64_t seed) {
  const DistanceMatrix dist(instance);
  const Tensor<T> nodes = encode_instance(params, config, instance, dist);
  return rollout_encoded(params, config, instance, dist, nodes, mode, seed);
}

std::vector<double> shared_baseline_advantages(const std::vector<double>& rewards, std::size_t k,
                                               std::vector<double>* baselines) {
  if (k == 0 || rewards.size() % k != 0)
    throw ValidationError("rewards do not split into groups of " + std::to_string(k));
  std::vector<double> adv(rewards.size());
  if (baselines) baselines->clear();
  for (std::size_t g = 0; g < rewards.size(); g += k) {
    double mean = 0.0;
    for (std::size_t j = 0; j < k; ++j) mean += rewards[g + j];
    mean /= static_cast<double>(k);
    for (std::size_t j = 0; j < k; ++j) adv[g + j] = rewards[g + j] - mean;
    if (baselines) baselines->push_back(mean);
  }
  return adv;
}

namespace {

// Fixed shard count so the reduction order never depends on thread count.
constexpr std::size_t kGradientShards = 16;

template <class T>
void add_into(std::vector<std::vector<T>>& dst, const std::vector<std::vector<T>>& src) {
  if (dst.size() < src.size()) dst.resize(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty()) continue;
    if (dst[i].empty()) dst[i].assign(src[i].size(), T(0));
    for (std::size_t k = 0; k < src[i].size(); ++k) dst[i][k] += src[i][k];
  }
}

}  // namespace

template <class T>
BatchGradient<T> reinforce_gradient(const ParameterSet<T>& params, const ModelConfig& config,
                                    const AugmentedBatch& batch, DecodeMode mode,
                                    std::uint64_t seed, bool compute_grads,
                                    const std::vector<std::vector<Action>>* forced) {
  const std::size_t B = batch.base_count, K = batch.variants_per_base, V = B * K;
  if (V == 0 || batch.variants.size() != V || batch.dists.size() != V)
    throw ValidationError("reinforce_gradient: batch is not grouped as B x K variants");
  if (forced && forced->size() != V)
    throw ValidationError("reinforce_gradient: one replayed trajectory per variant required");

  BatchGradient<T> out;
  Tape<T> enc(compute_grads);
  BoundParameters<T> ep(enc, params, compute_grads);
  std::vector<const Instance*> insts;
  std::vector<const DistanceMatrix*> dists;
  for (std::size_t v = 0; v < V; ++v) {
    insts.push_back(&batch.variants[v].instance);
    dists.push_back(&batch.dists[v]);
  }
  const auto inputs = node_inputs<T>(insts, dists, config);
  const NodeEncoding encoding = encode_nodes(ep, config, inputs, true, &out.stats);
  const std::size_t n = inputs.nodes, d = static_cast<std::size_t>(config.embed_dim);
  const T* node_data = enc.data(encoding.nodes);

  std::vector<T> upstream(compute_grads ? V * n * d : 0, T(0));
  out.trajectories.resize(V);
  out.advantages.assign(V, 0.0);
  out.baselines.assign(B, 0.0);
  std::vector<double> group_loss(B, 0.0);
  const std::size_t shards = std::min(B, kGradientShards);
  std::vector<std::vector<std::vector<T>>> shard_grads(shards);
  std::vector<std::exception_ptr> errors(shards);
  const double norm = 1.0 / static_cast<double>(V);

#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(shards); ++s) {
    try {
      for (std::size_t b = static_cast<std::size_t>(s); b < B; b += shards) {
        Tape<T> dec(compute_grads);
        BoundParameters<T> dp(dec, params, compute_grads);
        std::vector<Var> leaves(K), log_probs(K);
        std::vector<double> rewards(K);
        for (std::size_t k = 0; k < K; ++k) {
          const std::size_t v = b * K + k;
          leaves[k] = dec.external(Shape{n, d}, node_data + v * n * d, compute_grads);
          std::mt19937_64 rng(derive_seed(seed, v));
          DecodeOutput r = decode(dp, config, batch.variants[v].instance, batch.dists[v], leaves[k],
                                  mode, &rng, forced ? &(*forced)[v] : nullptr);
          rewards[k] = r.trajectory.reward;
          log_probs[k] = r.log_prob;
          out.trajectories[v] = std::move(r.trajectory);
        }
        std::vector<double> base;
        const auto adv = shared_baseline_advantages(rewards, K, &base);
        out.baselines[b] = base[0];
        std::vector<T> weights(K);
        double loss = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          out.advantages[b * K + k] = adv[k];
          weights[k] = static_cast<T>(-adv[k] * norm);
          loss += -adv[k] * norm * out.trajectories[b * K + k].log_prob;
        }
        group_loss[b] = loss;
        if (!compute_grads) continue;
        const Var total = nn::weighted_sum(dec, log_probs, weights);
        dec.backward(total);
        for (std::size_t k = 0; k < K; ++k) {
          const auto g = dec.grad(leaves[k]);
          if (g.empty()) continue;
          std::copy(g.begin(), g.end(), upstream.begin() + static_cast<std::ptrdiff_t>((b * K + k) * n * d));
        }
        dp.accumulate_gradients(shard_grads[static_cast<std::size_t>(s)]);
      }
    } catch (...) {
      errors[static_cast<std::size_t>(s)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (double l : group_loss) out.loss += l;
  if (!compute_grads) return out;

  out.grads.assign(params.entries.size(), {});
  for (const auto& g : shard_grads) add_into(out.grads, g);
  enc.backward(encoding.nodes, upstream);
  ep.accumulate_gradients(out.grads);
  return out;
}

nn::GradCheckReport surrogate_gradient_check(const SurrogateCheck& check) {
  GenConfig g;
  g.n_vehicles = check.n_vehicles;
  g.n_customers = check.n_customers;
  std::vector<Instance> bases;
  for (int b = 0; b < check.batch; ++b) {
    g.seed = derive_seed(check.seed, 1, static_cast<std::uint64_t>(b));
    bases.push_back(generate_instance(g));
  }
  const AugmentedBatch batch =
      make_augmented_batch(bases, check.augmentations, derive_seed(check.seed, 2));
  const auto base = init_parameters<double>(check.model, derive_seed(check.seed, 3));
  const std::uint64_t rollout_seed = derive_seed(check.seed, 4);
  std::vector<std::vector<Action>> replay;
  for (auto& t : reinforce_gradient<double>(base, check.model, batch, DecodeMode::sample,
                                            rollout_seed, false)
                     .trajectories)
    replay.push_back(std::move(t.actions));

  const nn::Objective f = [&](std::span<const double> x, std::vector<double>* grad) {
    ParameterSet<double> p = base;
    p.assign_trainable(x);
    auto r = reinforce_gradient<double>(p, check.model, batch, DecodeMode::sample, rollout_seed,
                                        grad != nullptr, &replay);
    if (grad) {
      grad->clear();
      for (std::size_t i = 0; i < p.entries.size(); ++i) {
        if (!p.entries[i].trainable) continue;
        const auto& gi = r.grads[i];
        if (gi.empty())
          grad->insert(grad->end(), p.entries[i].value.size(), 0.0);
        else
          grad->insert(grad->end(), gi.begin(), gi.end());
      }
    }
    return r.loss;
  };
  return nn::gradient_check(f, base.flatten_trainable(), check.probes, derive_seed(check.seed, 5));
}

Adam::Adam(const ParameterSet<float>& params, AdamConfig config) : config_(config) {
  for (const auto& e : params.entries) {
    m_.emplace_back(e.trainable ? e.value.size() : 0, 0.0);
    v_.emplace_back(e.trainable ? e.value.size() : 0, 0.0);
  }
}

void Adam::step(ParameterSet<float>& params, const std::vector<std::vector<double>>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.entries.size(); ++i) {
    auto& e = params.entries[i];
    if (!e.trainable) continue;
    const bool has = i < grads.size() && !grads[i].empty();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      const double g = has ? grads[i][k] : 0.0;
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g * g;
      const double update = config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
      e.value.data[k] = static_cast<float>(static_cast<double>(e.value.data[k]) - update);
    }
  }
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  const GenConfig& g = c.instances;
  return {{"model", model_config_to_json(c.model)},
          {"instances",
           {{"n_customers", g.n_customers},
            {"n_vehicles", g.n_vehicles},
            {"distribution", to_string(g.distribution)},
            {"demand_range", {g.demand_range.lo, g.demand_range.hi}},
            {"capacity_range", {g.capacity_range.lo, g.capacity_range.hi}},
            {"speed_range", {g.speed_lo, g.speed_hi}},
            {"cluster_count", g.cluster_count},
            {"cluster_noise_sigma", g.cluster_noise_sigma}}},
          {"batch_size", c.batch_size},
          {"augmentations", c.augmentations},
          {"steps", c.steps},
          {"lr", c.adam.lr},
          {"betas", {c.adam.beta1, c.adam.beta2}},
          {"adam_eps", c.adam.eps},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"vehicle_augment", c.vehicle_augment},
          {"eval_every", c.eval_every},
          {"eval_size", c.eval_size},
          {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("instances")) {
      const auto& g = j.at("instances");
      GenConfig& o = c.instances;
      o.n_customers = g.value("n_customers", o.n_customers);
      o.n_vehicles = g.value("n_vehicles", o.n_vehicles);
      if (g.contains("distribution"))
        o.distribution = distribution_from_string(g.at("distribution").get<std::string>());
      if (g.contains("demand_range"))
        o.demand_range = {g.at("demand_range").at(0).get<int>(), g.at("demand_range").at(1).get<int>()};
      if (g.contains("capacity_range"))
        o.capacity_range = {g.at("capacity_range").at(0).get<int>(),
                            g.at("capacity_range").at(1).get<int>()};
      if (g.contains("speed_range")) {
        o.speed_lo = g.at("speed_range").at(0).get<double>();
        o.speed_hi = g.at("speed_range").at(1).get<double>();
      }
      o.cluster_count = g.value("cluster_count", o.cluster_count);
      o.cluster_noise_sigma = g.value("cluster_noise_sigma", o.cluster_noise_sigma);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.augmentations = j.value("augmentations", c.augmentations);
    c.steps = j.value("steps", c.steps);
    c.adam.lr = j.value("lr", c.adam.lr);
    if (j.contains("betas")) {
      c.adam.beta1 = j.at("betas").at(0).get<double>();
      c.adam.beta2 = j.at("betas").at(1).get<double>();
    }
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.vehicle_augment = j.value("vehicle_augment", c.vehicle_augment);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_size = j.value("eval_size", c.eval_size);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed training config: ") + e.what());
  }
  return c;
}

namespace {

void validate(const TrainConfig& c) {
  validate(c.model);
  validate(c.instances);
  if (c.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (c.augmentations < 1 || c.augmentations > kNodeTransformCount)
    throw ValidationError("augmentations must be in 1..8");
  if (c.steps < 0) throw ValidationError("steps must be >= 0");
  if (!(c.adam.lr > 0.0)) throw ValidationError("learning rate must be > 0");
  if (!(c.grad_clip > 0.0)) throw ValidationError("grad_clip must be > 0");
  if (c.eval_every < 0 || c.eval_size < 0 || c.checkpoint_every < 0)
    throw ValidationError("eval/checkpoint intervals must be >= 0");
}

std::string format_eval_row(const EvalPoint& e) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%d\t%.17g", e.step, e.greedy_mean_objective);
  return buf;
}

}  // namespace

std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d\t%.17g\t%.17g\t%.17g\t%.6f", r.step, r.mean_objective,
                r.baseline_mean, r.grad_norm, r.seconds);
  return buf;
}

std::vector<Instance> held_out_set(const TrainConfig& config) {
  std::vector<Instance> out;
  for (int i = 0; i < config.eval_size; ++i) {
    GenConfig g = config.instances;
    g.seed = derive_seed(config.seed, 4, static_cast<std::uint64_t>(i));
    out.push_back(generate_instance(g));
  }
  return out;
}

double greedy_mean_objective(const ParameterSet<float>& params, const ModelConfig& config,
                             const std::vector<Instance>& instances) {
  if (instances.empty()) return 0.0;
  std::vector<double> obj(instances.size());
  std::vector<std::exception_ptr> errors(instances.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(instances.size()); ++i) {
    try {
      const auto u = static_cast<std::size_t>(i);
      obj[u] = rollout(params, config, instances[u], DecodeMode::greedy, 0).solution.objective;
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  double s = 0.0;
  for (double v : obj) s += v;
  return s / static_cast<double>(obj.size());
}

TrainResult train(const TrainConfig& config, const ParameterSet<float>* initial,
                  const StepCallback& on_step) {
  validate(config);
  using clock = std::chrono::steady_clock;
  TrainResult result;
  result.params = initial ? *initial : init_parameters<float>(config.model, derive_seed(config.seed, 0));
  ParameterSet<float>& params = result.params;
  Adam adam(params, config.adam);
  const auto held = config.eval_every > 0 ? held_out_set(config) : std::vector<Instance>{};

  std::ofstream metrics, evals;
  const bool files = !config.out_dir.empty();
  if (files) {
    std::filesystem::create_directories(config.out_dir);
    write_text_file(config.out_dir / "train_config.json", dump_json(train_config_to_json(config)));
    metrics.open(config.out_dir / "metrics.tsv", std::ios::binary);
    evals.open(config.out_dir / "heldout.tsv", std::ios::binary);
    if (!metrics || !evals) throw IoError("cannot write logs under '" + config.out_dir.string() + "'");
    metrics << kMetricsHeader << '\n';
    evals << "step\tgreedy_mean_obj\n";
  }
  auto record_eval = [&](int step) {
    if (held.empty()) return;
    EvalPoint e{step, greedy_mean_objective(params, config.model, held)};
    result.evals.push_back(e);
    if (files) evals << format_eval_row(e) << '\n' << std::flush;
  };
  auto save = [&](const std::string& name) {
    const auto path = config.out_dir / name;
    save_checkpoint(params, config.model, path);
    result.checkpoints.push_back(path);
  };

  record_eval(0);
  const auto B = static_cast<std::size_t>(config.batch_size);
  for (int step = 1; step <= config.steps; ++step) {
    const auto t0 = clock::now();
    std::vector<Instance> bases;
    for (std::size_t b = 0; b < B; ++b) {
      GenConfig g = config.instances;
      g.seed = derive_seed(config.seed, 1, static_cast<std::uint64_t>(step - 1) * B + b);
      bases.push_back(generate_instance(g));
    }
    const auto s = static_cast<std::uint64_t>(step);
    const AugmentedBatch batch = make_augmented_batch(bases, config.augmentations,
                                                      derive_seed(config.seed, 2, s), config.vehicle_augment);
    auto r = reinforce_gradient<float>(params, config.model, batch, DecodeMode::sample,
                                       derive_seed(config.seed, 3, s), true);

    MetricsRow row;
    row.step = step;
    for (const auto& t : r.trajectories) row.mean_objective += t.solution.objective;
    row.mean_objective /= static_cast<double>(r.trajectories.size());
    for (double b : r.baselines) row.baseline_mean += b;
    row.baseline_mean /= static_cast<double>(r.baselines.size());

    std::vector<std::vector<double>> grads(r.grads.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < r.grads.size(); ++i) {
      grads[i].assign(r.grads[i].begin(), r.grads[i].end());
      for (double g : grads[i]) sq += g * g;
    }
    row.grad_norm = std::sqrt(sq);
    if (!std::isfinite(r.loss) || !std::isfinite(row.grad_norm)) {
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "non-finite training signal at step %d: loss=%g grad_norm=%g mean_obj=%g", step,
                    r.loss, row.grad_norm, row.mean_objective);
      throw NumericError(buf);
    }
    if (row.grad_norm > config.grad_clip) {
      const double c = config.grad_clip / row.grad_norm;
      for (auto& g : grads)
        for (auto& v : g) v *= c;
    }
    adam.step(params, grads);
    update_running_stats(params, r.stats);

    if (config.record_time)
      row.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    result.log.push_back(row);
    if (files) metrics << format_metrics_row(row) << '\n' << std::flush;
    if (on_step) on_step(row);
    if (config.eval_every > 0 && step % config.eval_every == 0) record_eval(step);
    if (files && config.checkpoint_every > 0 && step % config.checkpoint_every == 0)
      save("step" + std::to_string(step) + ".ckpt");
  }
  if (files) save("final.ckpt");
  return result;
}

#define ECHO_INSTANTIATE_TRAINING(T)                                                             \
  template DecodeOutput decode<T>(BoundParameters<T>&, const ModelConfig&, const Instance&,     \
                                  const DistanceMatrix&, Var, DecodeMode, std::mt19937_64*,    \
                                  const std::vector<Action>*);                                 \
  template Tensor<T> encode_instance<T>(const ParameterSet<T>&, const ModelConfig&,             \
                                        const Instance&, const DistanceMatrix&);               \
  template Trajectory rollout_encoded<T>(const ParameterSet<T>&, const ModelConfig&,            \
                                         const Instance&, const DistanceMatrix&,               \
                                         const Tensor<T>&, DecodeMode, std::uint64_t);         \
  template Trajectory rollout<T>(const ParameterSet<T>&, const ModelConfig&, const Instance&,   \
                                 DecodeMode, std::uint64_t);                                   \
  template BatchGradient<T> reinforce_gradient<T>(const ParameterSet<T>&, const ModelConfig&,   \
                                                  const AugmentedBatch&, DecodeMode,           \
                                                  std::uint64_t, bool,                         \
                                                  const std::vector<std::vector<Action>>*);

ECHO_INSTANTIATE_TRAINING(float)
ECHO_INSTANTIATE_TRAINING(double)

#undef ECHO_INSTANTIATE_TRAINING

}  // namespace echo
