// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "moelab/specialization.hpp"
#include "testutil.hpp"

using namespace moelab;

namespace {

ModelConfig small_config(int d = 4, int experts = 4, int k = 2, bool attention = false) {
  ModelConfig c;
  c.vocab_size = 12;
  c.model_dim = d;
  c.num_layers = 1;
  c.experts_per_layer = experts;
  c.top_k = k;
  c.expert_hidden_dim = 2 * d;
  c.attention = attention;
  return c;
}

template <class S>
void randomize(MoEModel<S>& m, uint64_t seed) {
  Rng rng(seed);
  for (const auto& [name, t] : m.named_parameters()) {
    Tensor<S> h = t;
    for (auto& v : h.values()) v = S(rng.normal() * 0.3);
  }
}

PackedBatch batch_of(const std::vector<std::vector<int>>& inputs,
                     const std::vector<std::vector<int>>& targets,
                     const std::vector<int>& domains, int sep) {
  DomainBatch b;
  for (size_t i = 0; i < inputs.size(); ++i)
    b.seqs.push_back({inputs[i], targets[i], domains[i]});
  return pack(b, sep);
}

}  // namespace

TEST_CASE("accumulate_affinity counts single observations exactly") {
  AffinityState st(1, 4);
  st.accumulate({{0, 2}}, {0});
  auto a = st.raw_affinity();
  CHECK(a[0] == std::vector<double>{1, 0, 1, 0});
  CHECK_THROWS_AS(st.accumulate({{0}}, {5}), ArgumentError);
}

TEST_CASE("affinity rows sum to K and match a brute-force recount") {
  const int K = 2, E = 5, D = 3;
  AffinityState st(D, E);
  Rng rng(7);
  std::vector<std::vector<int>> sel;
  std::vector<int> dom;
  long long recount[3][5] = {};
  long long tokens[3] = {};
  for (int t = 0; t < 100; ++t) {
    const int d = rng.uniform_int(0, D - 1);
    std::vector<int> s;
    while (static_cast<int>(s.size()) < K) {
      const int e = rng.uniform_int(0, E - 1);
      if (std::find(s.begin(), s.end(), e) == s.end()) s.push_back(e);
    }
    for (int e : s) recount[d][e]++;
    tokens[d]++;
    sel.push_back(s);
    dom.push_back(d);
  }
  st.accumulate(sel, dom);
  auto a = st.raw_affinity();
  for (int d = 0; d < D; ++d) {
    double sum = 0;
    for (int e = 0; e < E; ++e) {
      CHECK(a[size_t(d)][size_t(e)] == double(recount[d][e]) / double(tokens[d]));
      sum += a[size_t(d)][size_t(e)];
    }
    CHECK(sum == doctest::Approx(double(K)).epsilon(1e-12));
  }
}

TEST_CASE("derive_mask applies the inclusive relative threshold") {
  CHECK(kDefaultMaskThreshold == 0.6);
  auto m = AffinityState::derive_mask_for({{0.5, 0.5, 0.5}}, 0.6);
  CHECK(m[0] == std::vector<uint8_t>{1, 1, 1});

  // boundary: 0.54 == 0.6 * 0.9 passes the inclusive comparison
  m = AffinityState::derive_mask_for({{0.9, 0.6, 0.3, 0.54}}, 0.6);
  CHECK(m[0] == std::vector<uint8_t>{1, 1, 0, 1});

  // all-zero row: mask all ones so the domain is not starved
  m = AffinityState::derive_mask_for({{0, 0, 0}}, 0.6);
  CHECK(m[0] == std::vector<uint8_t>{1, 1, 1});
}

TEST_CASE("derive_mask is scale-invariant and every row keeps its argmax") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> row(6);
    for (auto& v : row) v = rng.uniform();
    auto m1 = AffinityState::derive_mask_for({row}, 0.6);
    const double c = 0.1 + 5.0 * rng.uniform();
    auto scaled = row;
    for (auto& v : scaled) v *= c;
    auto m2 = AffinityState::derive_mask_for({scaled}, 0.6);
    CHECK(m1 == m2);
    const int argmax =
        int(std::max_element(row.begin(), row.end()) - row.begin());
    CHECK(m1[0][size_t(argmax)] == 1);
  }
}

TEST_CASE("ema_refresh: adoption, literal weighting, geometric convergence") {
  AffinityState st(1, 2);
  st.accumulate({{0}, {0}, {1}, {0}}, {0, 0, 0, 0});  // fresh = [0.75, 0.25]
  st.ema_refresh();
  CHECK(st.smoothed()[0] == std::vector<double>{0.75, 0.25});  // first refresh adopts fresh

  // smoothed 0.5, fresh 1.0 -> 0.95 with the literal 0.9 weighting on fresh
  AffinityState st2(1, 1);
  st2.accumulate({{0}}, {0});
  st2.ema_refresh();  // smoothed = 1.0 ... seed with 0.5 instead:
  st2.smoothed_mutable()[0][0] = 0.5;
  st2.accumulate({{0}}, {0});  // fresh = 1.0
  st2.ema_refresh();
  CHECK(st2.smoothed()[0][0] == doctest::Approx(0.95).epsilon(1e-12));

  // repeated refresh with a constant fresh value converges geometrically
  AffinityState st3(1, 2);
  st3.accumulate({{0}}, {0});
  st3.ema_refresh();
  st3.smoothed_mutable()[0] = {0.0, 1.0};
  double err_prev = 1.0;
  for (int r = 0; r < 6; ++r) {
    st3.accumulate({{0}, {0}}, {0, 0});  // fresh = [1, 0]
    st3.ema_refresh();
    const double err = std::abs(1.0 - st3.smoothed()[0][0]);
    CHECK(err == doctest::Approx(err_prev * 0.1).epsilon(1e-9));
    err_prev = err;
  }
}

TEST_CASE("overlap metric is the Jaccard index of mask rows") {
  AffinityState st(2, 4);
  st.mask_mutable() = {{1, 1, 0, 0}, {1, 1, 0, 0}};
  CHECK(st.overlap(0, 1) == 1.0);
  st.mask_mutable() = {{1, 1, 0, 0}, {0, 0, 1, 1}};
  CHECK(st.overlap(0, 1) == 0.0);
  st.mask_mutable() = {{1, 1, 0, 0}, {0, 1, 1, 0}};
  CHECK(st.overlap(0, 1) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("resolve_shared_experts duplicates multi-domain experts exactly once") {
  auto model = MoEModel<double>::build(small_config(), 3);
  SpecializationState spec(1, 2, 4);
  auto& st = spec.layer(0);

  // no multi-domain experts: nothing happens
  st.smoothed_mutable() = {{0.9, 0.1, 0.05, 0.0}, {0.1, 0.9, 0.05, 0.0}};
  st.derive_mask();
  CHECK(spec.resolve_shared_experts(model, 1).empty());
  CHECK(model.num_experts(0) == 4);

  // expert 0 claimed by both domains; domain 1 has the lower affinity
  st.smoothed_mutable() = {{0.9, 0.1, 0.05, 0.0}, {0.8, 0.9, 0.05, 0.0}};
  st.derive_mask();
  REQUIRE(st.mask()[0][0] == 1);
  REQUIRE(st.mask()[1][0] == 1);
  auto made = spec.resolve_shared_experts(model, 2);
  REQUIRE(made.size() == 1);
  CHECK(made[0].source == 0);
  CHECK(made[0].copy == 4);
  CHECK(made[0].domain == 1);
  CHECK(model.num_experts(0) == 5);

  // mask rows for the pair are now disjoint, and no expert serves 2 domains
  for (int e = 0; e < st.num_experts(); ++e)
    CHECK(st.mask()[0][size_t(e)] + st.mask()[1][size_t(e)] <= 1 + (e == 1 ? 1 : 0));
  CHECK((st.mask()[0][0] == 1 && st.mask()[1][0] == 0));
  CHECK(st.mask()[1][4] == 1);

  // availability gating: the copy serves only domain 1, the source lost it
  const auto& excl = model.blocks()[0].moe.excluded_domains;
  CHECK(excl[4] == std::vector<int>{0});
  CHECK(excl[0] == std::vector<int>{1});
}

TEST_CASE("duplication honors the budget and logs a warning") {
  auto model = MoEModel<double>::build(small_config(), 5);
  SpecializationState spec(1, 3, 4, 0.6, 0.9, /*duplication_cap=*/1);
  auto& st = spec.layer(0);
  st.smoothed_mutable() = {{0.9, 0.0, 0.0, 0.0}, {0.8, 0.9, 0.0, 0.0}, {0.7, 0.0, 0.9, 0.0}};
  st.derive_mask();
  auto made = spec.resolve_shared_experts(model, 1);
  CHECK(made.size() == 1);
  CHECK_FALSE(spec.warnings().empty());
}

TEST_CASE("forward on retained-domain tokens is bit-identical after duplication") {
  auto cfg = small_config(4, 4, 2, /*attention=*/true);
  auto model = MoEModel<double>::build(cfg, 7);
  randomize(model, 11);
  SpecializationState spec(1, 2, 4);
  auto& st = spec.layer(0);
  st.smoothed_mutable() = {{0.9, 0.5, 0.1, 0.1}, {0.7, 0.1, 0.9, 0.1}};
  st.derive_mask();
  REQUIRE((st.mask()[0][0] == 1 && st.mask()[1][0] == 1));

  auto batch = batch_of({{1, 2, 3}, {2, 3, 4}}, {{1}, {2}}, {0, 0}, 11);
  ForwardOptions opts;
  opts.training = true;
  opts.token_domains = &batch.token_domain;

  Tape<double> t1;
  auto before = model.forward(t1, batch, opts);
  auto made = spec.resolve_shared_experts(model, 1);
  REQUIRE(made.size() == 1);
  REQUIRE(made[0].domain == 1);  // domain 0 retained the source
  Tape<double> t2;
  auto after = model.forward(t2, batch, opts);
  CHECK(before.logits.values() == after.logits.values());  // bitwise
}

TEST_CASE("grouped-mode gradient filter zeroes exactly the masked experts") {
  auto model = MoEModel<double>::build(small_config(4, 4, 4), 13);
  randomize(model, 17);
  auto batch = batch_of({{1, 2, 3}}, {{2}}, {0}, 11);
  Tape<double> tape;
  auto res = model.forward(tape, batch, {});
  tape.backward(tape.cross_entropy(res.logits, batch.targets));

  // identity when the row is all ones
  std::vector<DomainExpertMask> ones{{{1, 1, 1, 1}}};
  auto grads_before = model.blocks()[0].moe.experts[0].w1.grad_view();
  expert_gradient_filter(model, ones, 0);
  CHECK(model.blocks()[0].moe.experts[0].w1.grad_view() == grads_before);

  std::vector<DomainExpertMask> masks{{{1, 0, 1, 0}}};
  expert_gradient_filter(model, masks, 0);
  for (int e = 0; e < 4; ++e) {
    const auto& f = model.blocks()[0].moe.experts[size_t(e)];
    const bool zero = f.w1.grad_is_exactly_zero() && f.w2.grad_is_exactly_zero();
    CHECK(zero == (e == 1 || e == 3));
  }
}

TEST_CASE("mixed-batch filtering equals the sum of grouped runs, exactly in f64") {
  auto cfg = small_config(4, 3, 2, /*attention=*/true);
  auto model = MoEModel<double>::build(cfg, 19);
  randomize(model, 23);

  // masks with zeros in both domains so the filter actually bites
  std::vector<DomainExpertMask> masks{{{1, 0, 1}, {0, 1, 1}}};

  auto d0 = batch_of({{1, 2, 3, 4}, {2, 2, 1, 3}}, {{1, 2}, {3, 1}}, {0, 0}, 11);
  auto d1 = batch_of({{5, 6, 7, 5}, {6, 7, 5, 6}}, {{4, 5}, {2, 2}}, {1, 1}, 11);
  auto mixed = batch_of({{1, 2, 3, 4}, {2, 2, 1, 3}, {5, 6, 7, 5}, {6, 7, 5, 6}},
                        {{1, 2}, {3, 1}, {4, 5}, {2, 2}}, {0, 0, 1, 1}, 11);

  auto run = [&](const PackedBatch& b) {
    model.zero_grads();
    Tape<double> tape;
    ForwardOptions opts;
    opts.training = true;
    opts.token_domains = &b.token_domain;
    opts.update_gate = &masks;
    auto res = model.forward(tape, b, opts);
    tape.backward(tape.cross_entropy(res.logits, b.targets));
    std::vector<std::vector<double>> grads;
    for (const auto& e : model.blocks()[0].moe.experts)
      for (const auto* t : {&e.w1, &e.b1, &e.w2, &e.b2})
        grads.push_back(t->has_grad() ? t->grad_view()
                                      : std::vector<double>(size_t(t->size()), 0.0));
    return grads;
  };

  auto g0 = run(d0);
  auto g1 = run(d1);
  auto gm = run(mixed);
  // equal active position counts: mixed mean-CE gradients are exactly half
  REQUIRE(g0.size() == gm.size());
  for (size_t i = 0; i < gm.size(); ++i)
    for (size_t j = 0; j < gm[i].size(); ++j)
      CHECK(2.0 * gm[i][j] == g0[i][j] + g1[i][j]);  // bitwise in f64

  // and in f32 within 1e-6 relative
  auto model32 = MoEModel<float>::build(cfg, 19);
  randomize(model32, 23);
  auto run32 = [&](const PackedBatch& b) {
    model32.zero_grads();
    Tape<float> tape;
    ForwardOptions opts;
    opts.training = true;
    opts.token_domains = &b.token_domain;
    opts.update_gate = &masks;
    auto res = model32.forward(tape, b, opts);
    tape.backward(tape.cross_entropy(res.logits, b.targets));
    std::vector<float> flat;
    for (const auto& e : model32.blocks()[0].moe.experts)
      for (const auto* t : {&e.w1, &e.b1, &e.w2, &e.b2}) {
        if (t->has_grad())
          flat.insert(flat.end(), t->grad_view().begin(), t->grad_view().end());
        else
          flat.insert(flat.end(), size_t(t->size()), 0.0f);
      }
    return flat;
  };
  auto f0 = run32(d0);
  auto f1 = run32(d1);
  auto fm = run32(mixed);
  for (size_t i = 0; i < fm.size(); ++i) {
    const double want = double(f0[i]) + double(f1[i]);
    CHECK(std::abs(2.0 * double(fm[i]) - want) <= 1e-6 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("specialization state extends consistently across duplications") {
  auto model = MoEModel<double>::build(small_config(), 29);
  SpecializationState spec(1, 3, 4);
  auto& st = spec.layer(0);
  // expert 1 claimed by all three domains
  st.smoothed_mutable() = {{0.1, 0.9, 0.0, 0.0}, {0.0, 0.8, 0.1, 0.0}, {0.0, 0.7, 0.0, 0.1}};
  st.derive_mask();
  auto made = spec.resolve_shared_experts(model, 10);
  CHECK(made.size() == 2);  // two extra copies; keeper stays with domain 0
  CHECK(st.num_experts() == 6);
  CHECK(model.num_experts(0) == 6);
  // afterwards no expert carries two domains
  for (int e = 0; e < st.num_experts(); ++e) {
    int owners = 0;
    for (int d = 0; d < 3; ++d) owners += st.mask()[size_t(d)][size_t(e)];
    CHECK(owners <= 1);
  }
}
