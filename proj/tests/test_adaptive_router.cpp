// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "moelab/adaptive_router.hpp"
#include "moelab/model.hpp"
#include "moelab/optimizer.hpp"
#include "testutil.hpp"

using namespace moelab;
using D = Tensor<double>;

namespace {

AdaptiveRouter<double> make_router(int d, int experts, uint64_t seed, double tau = 0.7) {
  Rng rng(seed);
  auto w = D::zeros({d, experts}, true);
  for (auto& v : w.values()) v = rng.normal() * 0.1;
  auto b = D::zeros({experts}, true);
  return init_adaptive_router<double>(w, b, seed, tau);
}

}  // namespace

TEST_CASE("init: zero biases, copied W2 rows, reproducible W1") {
  Rng rng(3);
  auto w = D::zeros({4, 3}, true);
  for (auto& v : w.values()) v = rng.normal();
  auto b = D::zeros({3}, true);

  auto r1 = init_adaptive_router<double>(w, b, 42);
  auto r2 = init_adaptive_router<double>(w, b, 42);
  CHECK(r1.b1.grad_is_exactly_zero());
  for (double v : r1.b1.values()) CHECK(v == 0.0);
  for (double v : r1.b2.values()) CHECK(v == 0.0);
  CHECK(r1.w1.values() == r2.w1.values());  // deterministic given seed
  CHECK(r1.w2.values() == r2.w2.values());

  // first d rows of W2 copy the original router; the rest are zero
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) CHECK(r1.w2.at(i, j) == w.at(i, j) * kRouterCopyScale);
  for (int i = 4; i < 16; ++i)
    for (int j = 0; j < 3; ++j) CHECK(r1.w2.at(i, j) == 0.0);

  CHECK_THROWS_AS(init_adaptive_router<double>(w, D::zeros({5}, true), 1), ArgumentError);
}

TEST_CASE("init statistics: W1 std matches sqrt(2/d) within 10%") {
  const int d = 64;
  auto r = make_router(d, 8, 9);
  double sum = 0, sq = 0;
  const auto& vals = r.w1.values();
  for (double v : vals) {
    sum += v;
    sq += v * v;
  }
  const double n = double(vals.size());
  const double std_hat = std::sqrt(sq / n - (sum / n) * (sum / n));
  const double want = std::sqrt(2.0 / d);
  CHECK(std::abs(std_hat - want) / want < 0.10);
}

TEST_CASE("adapt_route: zero hidden layer yields constant logits b2") {
  auto r = make_router(4, 3, 5);
  for (auto& v : r.w1.values()) v = 0.0;
  r.b2.values() = {0.3, -0.2, 0.6};
  Tape<double> tape;
  auto h = D::from({2, 4}, {1, 2, 3, 4, -1, -2, -3, -4});
  auto logits = adapt_route(tape, r, h);
  CHECK(logits.shape() == Shape{2, 3});
  for (int t = 0; t < 2; ++t)
    for (int e = 0; e < 3; ++e) CHECK(logits.at(t, e) == doctest::Approx(r.b2.at(e)));
}

TEST_CASE("adapt_route gradient w.r.t. W1 matches finite differences") {
  auto r = make_router(3, 4, 7);
  Rng rng(11);
  auto h = D::zeros({5, 3});
  for (auto& v : h.values()) v = rng.normal();
  auto eval = [&]() {
    Tape<double> t;
    return t.mean_all(adapt_route(t, r, h)).item();
  };
  Tape<double> tape;
  tape.backward(tape.mean_all(adapt_route(tape, r, h)));
  auto fd = testutil::central_diff(r.w1, eval);
  CHECK(testutil::max_rel_err(r.w1.grad(), fd, 1e-6) < 1e-4);
}

TEST_CASE("kd_loss is zero when the adaptive router reproduces the teacher") {
  auto r = make_router(4, 3, 13);
  CHECK(r.tau == doctest::Approx(0.7));  // default temperature
  // teacher logits constant (zero weights); adaptive reproduces them via b2
  for (auto& v : r.teacher_w.values()) v = 0.0;
  r.teacher_b.values() = {0.4, -0.1, 0.2};
  for (auto& v : r.w1.values()) v = 0.0;
  r.b2.values() = {0.4, -0.1, 0.2};
  Tape<double> tape;
  auto h = D::from({3, 4}, {1, 0, -1, 2, 0.5, 1, -2, 0, 3, -1, 0.5, 2});
  CHECK(std::abs(kd_loss(tape, r, h).item()) < 1e-9);
}

TEST_CASE("kd_loss matches a closed-form two-expert KL at tau=1") {
  auto r = make_router(2, 2, 17, /*tau=*/1.0);
  for (auto& v : r.teacher_w.values()) v = 0.0;
  r.teacher_b.values() = {0.0, 0.0};  // teacher: (0.5, 0.5)
  for (auto& v : r.w1.values()) v = 0.0;
  r.b2.values() = {std::log(3.0), 0.0};  // student: (0.75, 0.25)
  Tape<double> tape;
  auto h = D::from({1, 2}, {0.3, -0.7});
  const double want = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
  CHECK(kd_loss(tape, r, h).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("kd gradients reach only the adaptive-router parameters") {
  auto r = make_router(4, 3, 19);
  auto h = D::zeros({4, 4}, /*requires_grad=*/true);
  Rng rng(23);
  for (auto& v : h.values()) v = rng.normal();
  Tape<double> tape;
  tape.backward(kd_loss(tape, r, h));
  CHECK(h.grad_is_exactly_zero());
  CHECK(r.teacher_w.grad_is_exactly_zero());
  CHECK_FALSE(r.w1.grad_is_exactly_zero());
  CHECK_FALSE(r.w2.grad_is_exactly_zero());
}

TEST_CASE("router_loss blends kd and task by the completed fraction") {
  Tape<double> tape;
  auto kd = D::scalar(0.8);
  auto task = D::scalar(0.2);
  BlendSchedule s{100, 0};
  CHECK(s.lambda() == 1.0);
  CHECK(router_loss(tape, kd, task, s).item() == doctest::Approx(0.8));
  s.completed = 100;
  CHECK(s.lambda() == 0.0);
  CHECK(router_loss(tape, kd, task, s).item() == doctest::Approx(0.2));
  s.completed = 50;
  CHECK(s.lambda() == 0.5);
  CHECK(router_loss(tape, kd, task, s).item() == doctest::Approx(0.5 * 0.8 + 0.5 * 0.2));

  // exactly linear in (kd, task) at fixed alpha
  Rng rng(29);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = rng.normal(), b = rng.normal(), c = rng.normal(), d = rng.normal();
    const double f_sum =
        router_loss(tape, D::scalar(a + c), D::scalar(b + d), s).item();
    const double f_parts = router_loss(tape, D::scalar(a), D::scalar(b), s).item() +
                           router_loss(tape, D::scalar(c), D::scalar(d), s).item();
    CHECK(f_sum == doctest::Approx(f_parts).epsilon(1e-14));
  }

  // lambda is monotone non-increasing
  double prev = 1.0;
  for (long long t = 0; t <= 100; ++t) {
    BlendSchedule bs{100, t};
    CHECK(bs.lambda() <= prev + 1e-15);
    prev = bs.lambda();
  }
}

TEST_CASE("KD-only training drives KL down almost monotonically") {
  auto r = make_router(4, 3, 31);
  Rng rng(37);
  auto h = D::zeros({16, 4});
  for (auto& v : h.values()) v = rng.normal();

  Optimizer<double> opt;
  opt.learning_rate = 1e-3;
  double prev = 1e30;
  int violations = 0;
  for (int step = 0; step < 200; ++step) {
    for (auto* p : {&r.w1, &r.b1, &r.w2, &r.b2}) p->zero_grad();
    Tape<double> tape;
    auto loss = kd_loss(tape, r, h);
    tape.backward(loss);
    if (loss.item() > prev + 1e-12) ++violations;
    prev = loss.item();
    for (auto* p : {&r.w1, &r.b1, &r.w2, &r.b2}) opt.update(*p);
  }
  CHECK(violations <= 5);
  CHECK(prev < 1e-3);
}

TEST_CASE("adaptive width tracks the expert count after duplication") {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.model_dim = 4;
  cfg.num_layers = 1;
  cfg.experts_per_layer = 3;
  cfg.top_k = 2;
  cfg.expert_hidden_dim = 4;
  cfg.attention = false;
  auto model = MoEModel<double>::build(cfg, 41);
  model.install_adaptive_routers(43);
  auto& ar = *model.blocks()[0].moe.adaptive;
  CHECK(ar.num_experts() == 3);
  model.add_expert_copy(0, 1);
  auto& ar2 = *model.blocks()[0].moe.adaptive;
  CHECK(ar2.num_experts() == 4);
  CHECK(ar2.teacher_w.shape()[1] == 4);
  // duplicated gate column copies the source column
  for (int i = 0; i < ar2.w2.shape()[0]; ++i) CHECK(ar2.w2.at(i, 3) == ar2.w2.at(i, 1));
}
