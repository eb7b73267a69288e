#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "echo/gradcheck.hpp"
#include "echo/kernels.hpp"
#include "echo/model.hpp"
#include "echo/training.hpp"
#include "probes.hpp"
#include "test_util.hpp"

using namespace echo;
using nn::Shape;
using nn::Tape;
using nn::Tensor;

namespace {

ModelConfig small_config(int d = 16, int n = 10) {
  ModelConfig c;
  c.embed_dim = d;
  c.encoder_layers = 2;
  c.knn_k = std::min(16, n);
  return c;
}

Tensor<double> random_tensor(Shape s, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> t(s);
  for (auto& v : t.data) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("parameter layout and counts") {
  const ModelConfig c = small_config();
  std::vector<bool> trainable;
  const auto layout = parameter_layout(c, &trainable);
  const auto p = init_parameters<float>(c, 3);
  REQUIRE(p.entries.size() == layout.size());
  std::size_t expected = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    CHECK(p.entries[i].name == layout[i].first);
    CHECK(p.entries[i].value.shape == layout[i].second);
    CHECK(p.entries[i].trainable == trainable[i]);
    if (trainable[i]) expected += layout[i].second.size();
  }
  CHECK(p.trainable_count() == expected);
  CHECK(p["fusion.W_g"].shape == Shape{32, 1});
  CHECK(p["veh.W_3"].shape == Shape{4, 64});

  ModelConfig off = c;
  off.pfca = false;
  CHECK(init_parameters<float>(off, 3).trainable_count() == p.trainable_count());
  ModelConfig nodual = c;
  nodual.dual_modality = false;
  CHECK(init_parameters<float>(nodual, 3).trainable_count() < p.trainable_count());

  const auto q = init_parameters<float>(c, 3);
  CHECK(q.flatten_trainable() == p.flatten_trainable());
  CHECK(init_parameters<float>(c, 4).flatten_trainable() != p.flatten_trainable());
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.head_count = 3;  // only 8 is supported
  CHECK_THROWS_AS(validate(c), ValidationError);
  c = small_config();
  c.logit_clip = 0;
  CHECK_THROWS_AS(validate(c), ValidationError);
  c = small_config();
  CHECK(model_config_from_json(model_config_to_json(c)) == c);
}

TEST_CASE("PFCA closed form, identity at t = 0 and bypass") {
  Tape<double> t(false);
  const auto nodes = t.constant(Tensor<double>(Shape{2, 1}, {1.0, 2.0}));
  const auto ms = t.constant(Tensor<double>(Shape{1, 1}, {3.0}));
  const auto upd = pfca_update(t, nodes, ms, true);
  CHECK(t.value(upd)[0] == 4.0);
  CHECK(t.value(upd)[1] == 5.0);
  CHECK(pfca_update(t, nodes, std::nullopt, true).id == nodes.id);
  CHECK(pfca_update(t, nodes, ms, false).id == nodes.id);

  const auto n4 = random_tensor(Shape{3, 4}, 1), m4 = random_tensor(Shape{1, 4}, 2);
  const auto u4 = t.value(pfca_update(t, t.constant(n4), t.constant(m4), true));
  for (std::size_t r = 0; r < 3; ++r) {
    // single key: softmax weight is exactly 1
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(u4[r * 4 + k] == doctest::Approx(m4.data[k] + n4.data[r * 4 + k]).epsilon(1e-12));
  }
}

TEST_CASE("pair logits and action probabilities") {
  const std::size_t m = 3, n = 5, d = 8;
  const auto veh = random_tensor(Shape{m, d}, 3), nodes = random_tensor(Shape{n, d}, 4);
  ActionMask mask{m, n, std::vector<unsigned char>(m * n, 1)};
  mask.feasible[2] = mask.feasible[7] = 0;
  Tape<double> t(false);
  const auto lg = t.value(pair_logits(t, t.constant(Tensor<double>(veh)), t.constant(Tensor<double>(nodes)), mask, 10.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double v = lg[i * n + j];
      if (!mask(i, j)) {
        CHECK(kernels::is_masked(v));
        continue;
      }
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += veh.data[i * d + k] * nodes.data[j * d + k];
      CHECK(v == doctest::Approx(10.0 * std::tanh(dot / std::sqrt(8.0))).epsilon(1e-12));
      CHECK(std::abs(v) <= 10.0);
    }
  const auto probs = action_probabilities<double>(lg);
  double z = 0, total = 0;
  for (double v : lg)
    if (!kernels::is_masked(v)) z += std::exp(v);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    total += probs[i];
    CHECK(probs[i] == doctest::Approx(kernels::is_masked(lg[i]) ? 0.0 : std::exp(lg[i]) / z).epsilon(1e-12));
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

  // zero dot product gives a zero logit
  const auto zl = t.value(pair_logits(t, t.constant(Tensor<double>(Shape{1, 2}, {1.0, 0.0})),
                                      t.constant(Tensor<double>(Shape{1, 2}, {0.0, 1.0})),
                                      ActionMask{1, 1, {1}}, 10.0));
  CHECK(zl[0] == 0.0);

  const double mv = kernels::masked_value<double>();
  CHECK(action_probabilities<double>(std::vector<double>{mv, 0.3, mv}) == std::vector<double>{0, 1, 0});
  const auto half = action_probabilities<double>(std::vector<double>{1.5, mv, 1.5});
  CHECK(half[0] == 0.5);
  CHECK(half[2] == 0.5);
  CHECK_THROWS_AS(action_probabilities<double>(std::vector<double>{mv, mv}), NumericError);
  CHECK_THROWS(pair_logits(t, t.constant(Tensor<double>(veh)), t.constant(Tensor<double>(nodes)),
                           ActionMask{m, n, std::vector<unsigned char>(m * n, 0)}, 10.0));
}

TEST_CASE("knn edge features match a sort of each distance row") {
  const Instance inst = test::random_instance(2, 7, 5);
  const DistanceMatrix dist(inst);
  ModelConfig c = small_config(8, 7);
  c.knn_k = 4;
  const auto e = edge_features<double>(dist, c);
  REQUIRE(e.shape == Shape{8, 4});
  for (std::size_t j = 0; j < 8; ++j) {
    std::vector<double> row;
    for (std::size_t i = 0; i < 8; ++i)
      if (i != j) row.push_back(dist(j, i));
    std::sort(row.begin(), row.end());
    for (std::size_t k = 0; k < 4; ++k) CHECK(e.at(j, k) == row[k]);
  }
  c.knn_k = 8;
  CHECK_THROWS_AS(edge_features<double>(dist, c), ValidationError);
  c.edge_mode = EdgeMode::full_row;
  c.full_row_nodes = 8;
  CHECK(edge_features<double>(dist, c).shape == Shape{8, 8});
  c.full_row_nodes = 9;
  CHECK_THROWS_AS(edge_features<double>(dist, c), ValidationError);
}

TEST_CASE("dual modality off and zero fusion leave the block output untouched") {
  const Instance inst = test::random_instance(3, 10, 9);
  const DistanceMatrix dist(inst);
  for (bool dual : {false, true}) {
    ModelConfig c = small_config();
    c.dual_modality = dual;
    auto p = init_parameters<double>(c, 1);
    if (dual) std::fill(p["fusion.W_O"].data.begin(), p["fusion.W_O"].data.end(), 0.0);
    Tape<double> t(false);
    BoundParameters<double> bp(t, p, false);
    const auto enc = encode_nodes(bp, c, node_inputs<double>({&inst}, {&dist}, c), false);
    const auto h = t.value(enc.block_output), nodes = t.value(enc.nodes);
    CHECK(std::equal(h.begin(), h.end(), nodes.begin(), nodes.end()));
  }
}

TEST_CASE("identical vehicles at t = 0 get identical embeddings") {
  const Instance inst = test::make_instance({0.5, 0.5}, {{0.1, 0.2, 3}, {0.8, 0.4, 2}, {0.3, 0.9, 1}},
                                            {{5, 1.0}, {5, 1.0}, {7, 0.5}});
  const ModelConfig c = small_config(8, 3);
  const auto p = init_parameters<float>(c, 2);
  const auto probe = test::probe_decoder(p, c, inst, {});
  for (std::size_t k = 0; k < 8; ++k) CHECK(probe.vehicles.data[k] == probe.vehicles.data[8 + k]);
  CHECK(probe.updated.data == probe.nodes.data);
}

TEST_CASE("vehicle and customer permutation equivariance in 32-bit") {
  for (int trial = 0; trial < 12; ++trial) {
    const int m = (trial % 3 == 0) ? 2 : (trial % 3 == 1 ? 3 : 5);
    const int n = trial % 2 ? 10 : 20;
    const ModelConfig c = small_config(16, n);
    const auto p = init_parameters<float>(c, static_cast<std::uint64_t>(trial));
    const auto r = test::equivariance_trial(p, c, m, n, static_cast<std::uint64_t>(100 + trial));
    CHECK(r.vehicle_dev < 1e-6);
    CHECK(r.vehicle_logit_dev < 1e-6);
    CHECK(r.node_dev < 1e-6);
    CHECK(r.node_logit_dev < 1e-6);
    CHECK(r.mask_consistent);
    CHECK(r.argmax_maps);
  }
}

TEST_CASE("running statistics use momentum and unbiased variance") {
  const ModelConfig c = small_config(8, 3);
  auto p = init_parameters<double>(c, 1);
  EncoderStats s;
  s.rows = 5;
  s.layers.push_back({"enc0.bn1.", {1, 2, 3, 4, 5, 6, 7, 8}, std::vector<double>(8, 2.0)});
  update_running_stats(p, s, 0.1);
  CHECK(p["enc0.bn1.running_mean"].data[1] == doctest::Approx(0.2));
  CHECK(p["enc0.bn1.running_var"].data[0] == doctest::Approx(0.9 + 0.1 * 2.0 * 5.0 / 4.0));
}

TEST_CASE("checkpoint round trip and fault injection") {
  test::TempDir dir("ckpt");
  const Instance inst = test::random_instance(3, 10, 4);
  const ModelConfig c = small_config();
  const auto p = init_parameters<float>(c, 11);
  save_checkpoint(p, c, dir / "a.ckpt");
  const auto [q, qc] = load_checkpoint(dir / "a.ckpt");
  CHECK(qc == c);
  CHECK(q.entries.size() == p.entries.size());
  for (std::size_t i = 0; i < p.entries.size(); ++i) {
    CHECK(q.entries[i].name == p.entries[i].name);
    CHECK(q.entries[i].value.data == p.entries[i].value.data);
  }
  const auto a = test::probe_decoder(p, c, inst, {{0, 3}});
  const auto b = test::probe_decoder(q, qc, inst, {{0, 3}});
  CHECK(a.logits.data == b.logits.data);
  save_checkpoint(q, qc, dir / "b.ckpt");
  CHECK(test::read_bytes(dir / "a.ckpt") == test::read_bytes(dir / "b.ckpt"));

  ModelConfig other = c;
  other.embed_dim = 8;
  try {
    load_checkpoint(dir / "a.ckpt", other);
    FAIL("expected a shape error");
  } catch (const CheckpointError& e) {
    CHECK(e.reason() == CheckpointError::Reason::shape);
  }

  const std::string bytes = test::read_bytes(dir / "a.ckpt");
  write_text_file(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 7));
  try {
    load_checkpoint(dir / "trunc.ckpt");
    FAIL("expected an integrity error");
  } catch (const CheckpointError& e) {
    CHECK(e.reason() == CheckpointError::Reason::integrity);
  }
  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  write_text_file(dir / "flip.ckpt", flipped);
  CHECK_THROWS_AS(load_checkpoint(dir / "flip.ckpt"), CheckpointError);

  std::string ver = bytes;
  const auto at = ver.find("\"format_version\":1");
  REQUIRE(at != std::string::npos);
  ver[at + 17] = '9';
  write_text_file(dir / "ver.ckpt", ver);
  try {
    load_checkpoint(dir / "ver.ckpt");
    FAIL("expected a version error");
  } catch (const CheckpointError& e) {
    CHECK(e.reason() == CheckpointError::Reason::version);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("summed log-probability of a fixed trajectory is differentiable") {
  ModelConfig c = small_config(8, 5);
  const Instance inst = test::random_instance(2, 5, 21);
  const DistanceMatrix dist(inst);
  auto params = init_parameters<double>(c, 5);
  const auto actions = rollout(params, c, inst, DecodeMode::sample, 9).actions;

  const nn::Objective f = [&](std::span<const double> x, std::vector<double>* grad) {
    auto p = params;
    p.assign_trainable(x);
    Tape<double> te, td;
    BoundParameters<double> be(te, p, true), bd(td, p, true);
    const auto enc = encode_nodes(be, c, node_inputs<double>({&inst}, {&dist}, c), false);
    const Tensor<double> nodes = te.tensor(enc.nodes);
    const auto leaf = td.external(Shape{inst.n_nodes(), 8}, nodes.data.data(), true);
    const auto out = decode(bd, c, inst, dist, leaf, DecodeMode::greedy, nullptr, &actions);
    if (grad) {
      td.backward(out.log_prob);
      const auto up = td.grad(leaf);
      te.backward(enc.nodes, up);
      std::vector<std::vector<double>> g(p.entries.size());
      bd.accumulate_gradients(g);
      be.accumulate_gradients(g);
      grad->clear();
      for (std::size_t i = 0; i < p.entries.size(); ++i) {
        if (!p.entries[i].trainable) continue;
        if (g[i].empty()) grad->insert(grad->end(), p.entries[i].value.size(), 0.0);
        else grad->insert(grad->end(), g[i].begin(), g[i].end());
      }
    }
    return td.value(out.log_prob)[0];
  };
  const auto report = nn::gradient_check(f, params.flatten_trainable(), 60, 17);
  CHECK(report.max_rel_error < 1e-4);
}
