#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "felrec/heads.hpp"
#include "support.hpp"

using namespace felrec;
using testsupport::max_grad_error;
using testsupport::rand_tensor;

namespace {

bool grads_absent_or_zero(const Tensor& t) {
  if (!t.has_grad()) return true;
  for (auto g : t.grad())
    if (g != 0.0) return false;
  return true;
}

bool mlp_grad_free(const MlpParams& m) {
  return grads_absent_or_zero(m.l1.w) && grads_absent_or_zero(m.l1.b) &&
         grads_absent_or_zero(m.gamma) && grads_absent_or_zero(m.beta) &&
         grads_absent_or_zero(m.l2.w) && grads_absent_or_zero(m.l2.b);
}

bool mlp_has_grads(const MlpParams& m) { return m.l1.w.has_grad() && m.l2.w.has_grad(); }

}  // namespace

TEST_CASE("infonce closed-form values") {
  Tensor anchor = Tensor::from({1, 2}, {1, 0});
  Tensor positive = Tensor::from({1, 2}, {1, 0});  // a·p = 1

  SUBCASE("one orthogonal negative at unit temperature") {
    Tensor negatives = Tensor::from({1, 2}, {0, 1});  // a·n = 0
    const double loss = infonce_loss(anchor, positive, negatives, 1.0).value();
    CHECK(std::abs(loss - std::log(1.0 + std::exp(-1.0))) < 1e-12);
    CHECK(std::abs(loss - 0.3132616875) < 1e-6);
  }
  SUBCASE("positive tied with three negatives is a uniform softmax") {
    Tensor negatives = Tensor::from({3, 2}, {1, 0, 1, 0, 1, 0});
    const double loss = infonce_loss(anchor, positive, negatives, 1.0).value();
    CHECK(std::abs(loss - std::log(4.0)) < 1e-6);
  }
  SUBCASE("sharp temperature makes the loss vanish") {
    Tensor negatives = Tensor::from({1, 2}, {0, 1});
    const double loss = infonce_loss(anchor, positive, negatives, 0.07).value();
    CHECK(std::abs(loss - std::log(1.0 + std::exp(-1.0 / 0.07))) < 1e-12);
    CHECK(std::abs(loss - 6.2e-7) < 1e-7);
  }
}

TEST_CASE("infonce rejects a non-positive temperature") {
  Tensor a = Tensor::from({1, 2}, {1, 0});
  CHECK_THROWS_AS(infonce_loss(a, a, Tensor(), 0.0), NumericError);
  CHECK_THROWS_AS(infonce_loss(a, a, Tensor(), -1.0), NumericError);
}

TEST_CASE("infonce is invariant under permutation of negatives") {
  Rng rng(41);
  Tensor anchor = rand_tensor({3, 6}, rng);
  Tensor positive = rand_tensor({3, 6}, rng);
  Tensor negatives = rand_tensor({5, 6}, rng);
  std::vector<real> shuffled(negatives.values());
  // Rotate rows by two.
  std::rotate(shuffled.begin(), shuffled.begin() + 2 * 6, shuffled.end());
  const double a = infonce_loss(anchor, positive, negatives, 0.3).value();
  const double b = infonce_loss(anchor, positive, Tensor::from({5, 6}, shuffled), 0.3).value();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("infonce strictly decreases as the positive logit grows") {
  Rng rng(42);
  Tensor negatives = rand_tensor({8, 4}, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (double boost : {-1.0, 0.0, 0.5, 1.0, 2.0}) {
    Tensor anchor = Tensor::from({1, 4}, {1, 0, 0, 0});
    Tensor positive = Tensor::from({1, 4}, {boost, 0, 0, 0});
    const double loss = infonce_loss(anchor, positive, negatives, 0.5).value();
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("byol endpoint values") {
  Tensor a = Tensor::from({1, 3}, {1, 2, 3});
  CHECK(std::abs(byol_loss(a, Tensor::from({1, 3}, {2, 4, 6})).value() - 0.0) < 1e-6);
  CHECK(std::abs(byol_loss(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 1})).value() -
                 2.0) < 1e-6);
  CHECK(std::abs(byol_loss(a, Tensor::from({1, 3}, {-1, -2, -3})).value() - 4.0) < 1e-6);
}

TEST_CASE("byol is scale-invariant in each argument") {
  Rng rng(43);
  Tensor v = rand_tensor({4, 8}, rng);
  Tensor w = rand_tensor({4, 8}, rng);
  const double base = byol_loss(v, w).value();
  for (double c : {0.001, 0.5, 3.0, 1000.0}) {
    std::vector<real> scaled(v.values());
    for (auto& x : scaled) x *= c;
    CHECK(std::abs(byol_loss(Tensor::from({4, 8}, scaled), w).value() - base) <= 1e-7);
  }
}

TEST_CASE("queue is FIFO with a capacity bound") {
  NegativeQueue q(2, 3);
  q.enqueue(Tensor::from({1, 3}, {1, 1, 1}));  // a
  CHECK(q.fill() == 1);
  q.enqueue(Tensor::from({1, 3}, {2, 2, 2}));  // b
  q.enqueue(Tensor::from({1, 3}, {3, 3, 3}));  // c evicts a
  CHECK(q.fill() == 2);
  const auto c = q.contents();
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.values() == std::vector<real>{2, 2, 2, 3, 3, 3});

  for (int i = 0; i < 50; ++i) q.enqueue(Tensor::from({1, 3}, {0, 0, 0}));
  CHECK(q.fill() == 2);  // never exceeds capacity
  q.clear();
  CHECK(q.fill() == 0);
  CHECK(q.contents().size() == 0);
}

TEST_CASE("before the first fill, negatives used equal the fill count") {
  Rng rng(44);
  HeadsQ heads = init_heads_q(8, HeadNorm::batch, false, false, rng);
  NegativeQueue uq(16, 8), xq(16, 8);
  Tensor u = rand_tensor({3, 8}, rng);
  Tensor x = rand_tensor({3, 8}, rng);
  CHECK(xq.fill() == 0);
  loss_q(u, x, heads, uq, xq, 0.07, RunMode::train);
  CHECK(xq.fill() == 3);  // the batch was enqueued after the loss
  CHECK(uq.fill() == 3);
  loss_q(u, x, heads, uq, xq, 0.07, RunMode::train);
  CHECK(xq.fill() == 6);
}

TEST_CASE("loss_q: stopped branches receive exactly zero gradient") {
  Rng rng(45);
  HeadsQ heads = init_heads_q(8, HeadNorm::batch, false, false, rng);
  NegativeQueue queue_with_entries(16, 8);
  queue_with_entries.enqueue(rand_tensor({5, 8}, rng));

  Tensor u_repr = rand_tensor({4, 8}, rng, true);
  Tensor x_repr = rand_tensor({4, 8}, rng, true);

  SUBCASE("user direction ignores the item projection") {
    Tensor u_proj = project_q(heads, EntityKind::user, u_repr, RunMode::train);
    Tensor x_proj = project_q(heads, EntityKind::item, x_repr, RunMode::train);
    Tensor loss_user =
        infonce_loss(u_proj, stop_gradient(x_proj), queue_with_entries.contents(), 0.07);
    backward(loss_user);
    CHECK(mlp_has_grads(heads.g_user));
    CHECK(mlp_grad_free(heads.g_item));
    CHECK(grads_absent_or_zero(x_repr));
    CHECK(u_repr.has_grad());
  }
  SUBCASE("item direction ignores the user projection") {
    Tensor u_proj = project_q(heads, EntityKind::user, u_repr, RunMode::train);
    Tensor x_proj = project_q(heads, EntityKind::item, x_repr, RunMode::train);
    Tensor loss_item =
        infonce_loss(x_proj, stop_gradient(u_proj), queue_with_entries.contents(), 0.07);
    backward(loss_item);
    CHECK(mlp_has_grads(heads.g_item));
    CHECK(mlp_grad_free(heads.g_user));
    CHECK(grads_absent_or_zero(u_repr));
  }
  SUBCASE("the combined loss feeds a shared upstream from both terms") {
    // Both representations flow from one shared tensor, like the shared
    // encoder; each direction alone must already reach it.
    Tensor shared = rand_tensor({4, 8}, rng, true);
    Tensor u2 = matmul(shared, rand_tensor({8, 8}, rng));
    Tensor x2 = matmul(shared, rand_tensor({8, 8}, rng));
    NegativeQueue uq(16, 8), xq(16, 8);
    uq.enqueue(rand_tensor({5, 8}, rng));
    xq.enqueue(rand_tensor({5, 8}, rng));
    Tensor loss = loss_q(u2, x2, heads, uq, xq, 0.07, RunMode::train);
    backward(loss);
    REQUIRE(shared.has_grad());
    double norm = 0;
    for (auto g : shared.grad()) norm += g * g;
    CHECK(norm > 0.0);
    CHECK(mlp_has_grads(heads.g_user));
    CHECK(mlp_has_grads(heads.g_item));
  }
}

TEST_CASE("loss_q leaves queue contents untouched by backward") {
  Rng rng(46);
  HeadsQ heads = init_heads_q(8, HeadNorm::batch, false, false, rng);
  NegativeQueue uq(16, 8), xq(16, 8);
  uq.enqueue(rand_tensor({4, 8}, rng));
  xq.enqueue(rand_tensor({4, 8}, rng));
  const auto uq_before = uq.contents().values();
  const auto xq_before = xq.contents().values();

  Tensor u = rand_tensor({4, 8}, rng, true);
  Tensor x = rand_tensor({4, 8}, rng, true);
  Tensor loss = loss_q(u, x, heads, uq, xq, 0.07, RunMode::train);
  backward(loss);

  const auto uq_after = uq.contents().values();
  const auto xq_after = xq.contents().values();
  // The first four rows are the original entries, bit-identical.
  for (std::size_t i = 0; i < uq_before.size(); ++i) {
    CHECK(uq_after[i] == uq_before[i]);
    CHECK(xq_after[i] == xq_before[i]);
  }
}

TEST_CASE("loss_p: stopped branch projections and predictors receive zero") {
  Rng rng(47);
  HeadsP heads = init_heads_p(8, HeadNorm::batch, false, false, rng);
  Tensor u_repr = rand_tensor({4, 8}, rng, true);
  Tensor x_repr = rand_tensor({4, 8}, rng, true);

  SUBCASE("user direction") {
    Tensor u_proj = mlp_forward(heads.g_user, u_repr, RunMode::train);
    Tensor x_proj = mlp_forward(heads.g_item, x_repr, RunMode::train);
    Tensor loss_user = byol_loss(mlp_forward(heads.h_user, u_proj, RunMode::train),
                                 stop_gradient(x_proj));
    backward(loss_user);
    CHECK(mlp_has_grads(heads.g_user));
    CHECK(mlp_has_grads(heads.h_user));
    CHECK(mlp_grad_free(heads.g_item));
    CHECK(mlp_grad_free(heads.h_item));
  }
  SUBCASE("item direction") {
    Tensor u_proj = mlp_forward(heads.g_user, u_repr, RunMode::train);
    Tensor x_proj = mlp_forward(heads.g_item, x_repr, RunMode::train);
    Tensor loss_item = byol_loss(mlp_forward(heads.h_item, x_proj, RunMode::train),
                                 stop_gradient(u_proj));
    backward(loss_item);
    CHECK(mlp_has_grads(heads.g_item));
    CHECK(mlp_has_grads(heads.h_item));
    CHECK(mlp_grad_free(heads.g_user));
    CHECK(mlp_grad_free(heads.h_user));
  }
}

TEST_CASE("loss_p with fresh random parameters sits near two per term") {
  Rng rng(48);
  HeadsP heads = init_heads_p(32, HeadNorm::batch, false, false, rng);
  double total = 0;
  const int batches = 100;
  for (int i = 0; i < batches; ++i) {
    Tensor u = rand_tensor({16, 32}, rng);
    Tensor x = rand_tensor({16, 32}, rng);
    total += loss_p(u, x, heads, RunMode::train).value();
  }
  const double per_term = total / batches / 2.0;
  CHECK(per_term == doctest::Approx(2.0).epsilon(0.1));  // 2 +/- 0.2
}

// The symmetrized losses stop the gradient through the opposite branch, so a
// finite-difference probe of the raw sum would differentiate through paths
// the loss deliberately blocks. Per direction the detached target is a
// constant; freezing it makes FD the exact oracle for the gradients the full
// loss produces, which the first subcases pin to the real implementation.
TEST_CASE("full loss gradients match finite differences") {
  Rng rng(49);

  SUBCASE("queue-contrastive") {
    HeadsQ heads = init_heads_q(6, HeadNorm::batch, false, false, rng);
    Tensor negatives_items = rand_tensor({4, 6}, rng);
    Tensor negatives_users = rand_tensor({4, 6}, rng);
    Tensor u = rand_tensor({3, 6}, rng, true);
    Tensor x = rand_tensor({3, 6}, rng, true);

    // Frozen targets: the values the stop-gradient pins during this step.
    const Tensor x_frozen = mlp_forward(heads.g_item, x, RunMode::train, false).detach();
    const Tensor u_frozen = mlp_forward(heads.g_user, u, RunMode::train, false).detach();

    // The per-direction gradients equal the full-loss gradients.
    {
      NegativeQueue uq(8, 6), xq(8, 6);
      uq.enqueue(negatives_users);
      xq.enqueue(negatives_items);
      Tensor total = loss_q(u, x, heads, uq, xq, 0.07, RunMode::train);
      backward(total);
      const auto u_total = u.grad();
      const auto gu_total = heads.g_user.l1.w.grad();
      for (auto t : {&u, &x, &heads.g_user.l1.w, &heads.g_item.l1.w}) t->zero_grad();

      Tensor dir_u = infonce_loss(mlp_forward(heads.g_user, u, RunMode::train, false), x_frozen,
                                  negatives_items, 0.07);
      backward(dir_u);
      for (std::size_t i = 0; i < u_total.size(); ++i)
        CHECK(u.grad()[i] == doctest::Approx(u_total[i]).epsilon(1e-12));
      for (std::size_t i = 0; i < gu_total.size(); ++i)
        CHECK(heads.g_user.l1.w.grad()[i] == doctest::Approx(gu_total[i]).epsilon(1e-12));
      for (auto t : {&u, &x, &heads.g_user.l1.w, &heads.g_item.l1.w}) t->zero_grad();
    }

    auto fn_user = [&] {
      return infonce_loss(mlp_forward(heads.g_user, u, RunMode::train, false), x_frozen,
                          negatives_items, 0.07);
    };
    CHECK(max_grad_error(fn_user, {u, heads.g_user.l1.w, heads.g_user.l1.b, heads.g_user.gamma,
                                   heads.g_user.beta, heads.g_user.l2.w, heads.g_user.l2.b}) <
          1e-4);
    auto fn_item = [&] {
      return infonce_loss(mlp_forward(heads.g_item, x, RunMode::train, false), u_frozen,
                          negatives_users, 0.07);
    };
    CHECK(max_grad_error(fn_item, {x, heads.g_item.l1.w, heads.g_item.gamma, heads.g_item.l2.w}) <
          1e-4);
  }
  SUBCASE("predictor-similarity") {
    HeadsP heads = init_heads_p(6, HeadNorm::batch, false, false, rng);
    Tensor u = rand_tensor({3, 6}, rng, true);
    Tensor x = rand_tensor({3, 6}, rng, true);
    const Tensor x_frozen = mlp_forward(heads.g_item, x, RunMode::train, false).detach();
    const Tensor u_frozen = mlp_forward(heads.g_user, u, RunMode::train, false).detach();

    auto fn_user = [&] {
      Tensor pred = mlp_forward(heads.h_user,
                                mlp_forward(heads.g_user, u, RunMode::train, false),
                                RunMode::train, false);
      return byol_loss(pred, x_frozen);
    };
    CHECK(max_grad_error(fn_user, {u, heads.g_user.l1.w, heads.g_user.gamma, heads.g_user.l2.w,
                                   heads.h_user.l1.w, heads.h_user.l2.b}) < 1e-4);
    auto fn_item = [&] {
      Tensor pred = mlp_forward(heads.h_item,
                                mlp_forward(heads.g_item, x, RunMode::train, false),
                                RunMode::train, false);
      return byol_loss(pred, u_frozen);
    };
    CHECK(max_grad_error(fn_item, {x, heads.g_item.l1.w, heads.h_item.l1.w, heads.h_item.gamma}) <
          1e-4);
  }
}

TEST_CASE("no-mlp heads consume raw representations") {
  Rng rng(50);
  HeadsQ heads = init_heads_q(8, HeadNorm::batch, true, false, rng);
  Tensor u = rand_tensor({2, 8}, rng, true);
  Tensor proj = project_q(heads, EntityKind::user, u, RunMode::train);
  CHECK(proj.values() == u.values());
}
