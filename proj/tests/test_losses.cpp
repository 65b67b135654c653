#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "fedsdaf/errors.hpp"
#include "fedsdaf/grad_check.hpp"
#include "fedsdaf/losses.hpp"
#include "fedsdaf/rng.hpp"
#include "fedsdaf/tensor.hpp"

using namespace fedsdaf;
using namespace fedsdaf::losses;

TEST_CASE("cross entropy on uniform logits is ln C") {
  Tensor logits = Tensor::zeros({3, 4});
  std::vector<int> y = {0, 1, 3};
  CHECK(cross_entropy(logits, y).value() ==
        doctest::Approx(1.3862943611198906).epsilon(1e-14));
}

TEST_CASE("cross entropy on confident logits approaches zero") {
  Tensor logits = Tensor::from_data({2, 3}, {1000, 0, 0, 0, 0, 1000});
  std::vector<int> y = {0, 2};
  CHECK(cross_entropy(logits, y).value() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("cross entropy two-logit oracle") {
  Tensor logits = Tensor::from_data({1, 2}, {1, 2});
  std::vector<int> y = {0};
  CHECK(cross_entropy(logits, y).value() ==
        doctest::Approx(1.3132616875182228).epsilon(1e-14));
}

TEST_CASE("cross entropy validates labels and shapes") {
  Tensor logits = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(cross_entropy(logits, {0, 3}), ContractError);
  CHECK_THROWS_AS(cross_entropy(logits, {0, -1}), ContractError);
  CHECK_THROWS_AS(cross_entropy(logits, {0}), ShapeError);
}

TEST_CASE("kl divergence: zero on identical logits, hand oracle otherwise") {
  Rng rng(3);
  Tensor z = random_normal({4, 6}, rng, 2.0);
  CHECK(kl_divergence(z, z).value() == doctest::Approx(0.0).epsilon(1e-14));

  // logits chosen so softmax gives p = (1/2, 1/2), q = (1/4, 3/4)
  Tensor p = Tensor::from_data({1, 2}, {0.0, 0.0});
  Tensor q = Tensor::from_data({1, 2}, {0.0, std::log(3.0)});
  CHECK(kl_divergence(p, q).value() ==
        doctest::Approx(0.14384103622589042).epsilon(1e-13));

  CHECK_THROWS_AS(kl_divergence(p, Tensor::zeros({1, 3})), ShapeError);
  CHECK_THROWS_AS(kl_divergence(p, q, 0.0), ConfigError);
}

TEST_CASE("kl divergence is nonnegative over random pairs") {
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    Tensor p = random_normal({3, 5}, rng, 3.0);
    Tensor q = random_normal({3, 5}, rng, 3.0);
    CHECK(kl_divergence(p, q).value() >= -1e-12);
  }
}

TEST_CASE("temperature softens both distributions consistently") {
  Tensor p = Tensor::from_data({1, 2}, {0.0, 4.0});
  Tensor q = Tensor::from_data({1, 2}, {4.0, 0.0});
  double sharp = kl_divergence(p, q, 1.0).value();
  double soft = kl_divergence(p, q, 4.0).value();
  CHECK(soft < sharp);  // softer distributions are closer
  CHECK(soft > 0.0);
  // at temperature T the logit gap acts like (gap / T)
  CHECK(soft == doctest::Approx(kl_divergence(
                    Tensor::from_data({1, 2}, {0.0, 1.0}),
                    Tensor::from_data({1, 2}, {1.0, 0.0}), 1.0)
                    .value())
                    .epsilon(1e-12));
}

TEST_CASE("kl gradients flow into both arguments unless detached") {
  Rng rng(23);
  Tensor p = random_normal({2, 4}, rng, 1.0, true);
  Tensor q = random_normal({2, 4}, rng, 1.0, true);

  backward(kl_divergence(p, q));
  double gp = 0.0, gq = 0.0;
  for (double v : p.grad()) gp += std::abs(v);
  for (double v : q.grad()) gq += std::abs(v);
  CHECK(gp > 0.0);
  CHECK(gq > 0.0);

  p.zero_grad();
  q.zero_grad();
  backward(kl_divergence(p, detach(q)));
  gq = 0.0;
  for (double v : q.grad()) gq += std::abs(v);
  CHECK(gq == 0.0);  // detached side must stay untouched
}

TEST_CASE("alpha schedule boundary values and monotonicity") {
  CHECK(alpha_schedule(0.0, 2.0, 100.0) == 0.0);
  CHECK(alpha_schedule(100.0, 2.0, 100.0) ==
        doctest::Approx(2.0 * 0.63212055882855767).epsilon(1e-13));
  double prev = -1.0;
  for (double t = 0.0; t <= 1000.0; t += 7.0) {
    double a = alpha_schedule(t, 2.0, 100.0);
    CHECK(a >= prev);
    CHECK(a <= 2.0);
    prev = a;
  }
  CHECK_THROWS_AS(alpha_schedule(1.0, 2.0, 0.0), ConfigError);
  CHECK_THROWS_AS(alpha_schedule(1.0, -1.0, 10.0), ConfigError);
  CHECK_THROWS_AS(alpha_schedule(-1.0, 2.0, 10.0), ContractError);
}

TEST_CASE("alpha_at dispatches on the mode") {
  LossConfig cfg;
  cfg.alpha = 0.7;
  CHECK(alpha_at(cfg, 55.0) == 0.7);
  cfg.alpha_mode = AlphaMode::dynamic;
  cfg.alpha_max = 2.0;
  cfg.tau = 100.0;
  CHECK(alpha_at(cfg, 100.0) ==
        doctest::Approx(1.2642411176571153).epsilon(1e-12));

  LossConfig off = without_distillation(cfg);
  CHECK(off.alpha_mode == AlphaMode::fixed);
  CHECK(alpha_at(off, 100.0) == 0.0);
  CHECK(off.tau == cfg.tau);  // everything else is preserved
}

TEST_CASE("config validation rejects out-of-range values") {
  LossConfig cfg;
  cfg.alpha = -0.1;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = LossConfig{};
  cfg.tau = 0.0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = LossConfig{};
  cfg.temperature = -1.0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg = LossConfig{};
  cfg.alpha_max = -2.0;
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("bkd_loss composes the oracles at alpha 1") {
  // two samples, two classes; branch logits chosen to make every component
  // checkable against the standalone operations
  Tensor z_di = Tensor::from_data({2, 2}, {1, 2, 0, 0}, true);
  Tensor z_dw = Tensor::from_data({2, 2}, {2, 1, 0, 0}, true);
  std::vector<int> y = {0, 1};

  LossConfig cfg;  // fixed alpha = 1
  BkdLoss L = bkd_loss(z_di, z_dw, Tensor(), y, cfg, 0.0);

  double want_ce = 0.5 * (cross_entropy(z_di, y).value() +
                          cross_entropy(z_dw, y).value());
  double want_di = kl_divergence(z_di, z_dw).value();
  double want_dw = kl_divergence(z_dw, z_di).value();

  CHECK(L.alpha_t == 1.0);
  CHECK(L.ce == doctest::Approx(want_ce).epsilon(1e-14));
  CHECK(L.di_kl == doctest::Approx(want_di).epsilon(1e-14));
  CHECK(L.dw_kl == doctest::Approx(want_dw).epsilon(1e-14));
  CHECK(L.total.value() ==
        doctest::Approx(want_ce + want_di + want_dw).epsilon(1e-13));
}

TEST_CASE("identical branches reduce the objective to pure supervision") {
  Tensor z = Tensor::from_data({2, 3}, {1, 2, 3, 0, 1, 0}, true);
  std::vector<int> y = {2, 1};
  LossConfig cfg;
  BkdLoss L = bkd_loss(z, z, Tensor(), y, cfg, 0.0);
  CHECK(L.di_kl == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(L.dw_kl == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(L.total.value() == doctest::Approx(L.ce).epsilon(1e-13));
}

TEST_CASE("alpha 0 keeps the distillation terms out of the graph entirely") {
  Rng rng(31);
  Tensor z_di = random_normal({3, 4}, rng, 1.0, true);
  Tensor z_dw = random_normal({3, 4}, rng, 1.0, true);
  std::vector<int> y = {0, 1, 2};

  LossConfig off;
  off.alpha = 0.0;
  BkdLoss L = bkd_loss(z_di, z_dw, Tensor(), y, off, 0.0);

  // KLs are still reported for the logs
  CHECK(L.di_kl > 0.0);
  CHECK(L.dw_kl > 0.0);

  // but the returned graph must be exactly the supervision graph: compare
  // node-for-node against a freshly built CE-only expression
  Tensor ce_only = scalar_mul(
      add(cross_entropy(z_di, y), cross_entropy(z_dw, y)), 0.5);
  auto got = trace_graph(L.total);
  auto want = trace_graph(ce_only);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].op == want[i].op);
    CHECK(got[i].arity == want[i].arity);
    CHECK(got[i].shape == want[i].shape);
  }

  // and its gradients equal the CE-only gradients bitwise
  z_di.zero_grad();
  z_dw.zero_grad();
  backward(L.total);
  std::vector<double> g_di = z_di.grad(), g_dw = z_dw.grad();
  z_di.zero_grad();
  z_dw.zero_grad();
  backward(ce_only);
  CHECK(std::memcmp(g_di.data(), z_di.grad().data(),
                    g_di.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(g_dw.data(), z_dw.grad().data(),
                    g_dw.size() * sizeof(double)) == 0);
}

TEST_CASE("each distillation term trains only its named branch") {
  Rng rng(37);
  Tensor z_di = random_normal({4, 5}, rng, 1.0, true);
  Tensor z_dw = random_normal({4, 5}, rng, 1.0, true);
  std::vector<int> y = {0, 1, 2, 3};

  // isolate the di-side distillation term: gradient w.r.t. z_dw must vanish
  backward(kl_divergence(z_di, detach(z_dw)));
  for (double g : z_dw.grad()) CHECK(g == 0.0);
  double nonzero = 0.0;
  for (double g : z_di.grad()) nonzero += std::abs(g);
  CHECK(nonzero > 0.0);

  // the full objective routes each term into exactly one branch: compare
  // gradients at alpha 1 vs alpha 0, where the difference is the KL part
  z_di.zero_grad();
  z_dw.zero_grad();
  LossConfig cfg;
  backward(bkd_loss(z_di, z_dw, Tensor(), y, cfg, 0.0).total);
  std::vector<double> g1_di = z_di.grad(), g1_dw = z_dw.grad();

  z_di.zero_grad();
  z_dw.zero_grad();
  LossConfig off;
  off.alpha = 0.0;
  backward(bkd_loss(z_di, z_dw, Tensor(), y, off, 0.0).total);

  double diff_di = 0.0, diff_dw = 0.0;
  for (std::size_t i = 0; i < g1_di.size(); ++i) {
    diff_di += std::abs(g1_di[i] - z_di.grad()[i]);
    diff_dw += std::abs(g1_dw[i] - z_dw.grad()[i]);
  }
  CHECK(diff_di > 0.0);
  CHECK(diff_dw > 0.0);
}

TEST_CASE("bkd_loss with dynamic alpha follows the schedule") {
  Rng rng(41);
  Tensor z_di = random_normal({2, 3}, rng, 1.0, true);
  Tensor z_dw = random_normal({2, 3}, rng, 1.0, true);
  std::vector<int> y = {0, 1};

  LossConfig cfg;
  cfg.alpha_mode = AlphaMode::dynamic;
  cfg.alpha_max = 2.0;
  cfg.tau = 100.0;

  BkdLoss at0 = bkd_loss(z_di, z_dw, Tensor(), y, cfg, 0.0);
  CHECK(at0.alpha_t == 0.0);
  CHECK(at0.total.value() == doctest::Approx(at0.ce).epsilon(1e-13));

  BkdLoss at_tau = bkd_loss(z_di, z_dw, Tensor(), y, cfg, 100.0);
  CHECK(at_tau.alpha_t == doctest::Approx(1.2642411176571153).epsilon(1e-12));
  CHECK(at_tau.total.value() ==
        doctest::Approx(at_tau.ce + at_tau.alpha_t * (at_tau.di_kl +
                                                      at_tau.dw_kl))
            .epsilon(1e-12));
}

TEST_CASE("single-branch and fused supervision fallbacks") {
  Rng rng(47);
  Tensor z_di = random_normal({2, 3}, rng, 1.0, true);
  Tensor z_fused = random_normal({2, 3}, rng, 1.0, true);
  std::vector<int> y = {0, 2};

  LossConfig cfg;
  BkdLoss di_only = bkd_loss(z_di, Tensor(), z_fused, y, cfg, 0.0);
  CHECK(di_only.ce == doctest::Approx(cross_entropy(z_di, y).value()));
  CHECK(di_only.di_kl == 0.0);  // nothing to distill against

  cfg.ce_target = CeTarget::fused_only;
  BkdLoss fused = bkd_loss(z_di, Tensor(), z_fused, y, cfg, 0.0);
  CHECK(fused.ce == doctest::Approx(cross_entropy(z_fused, y).value()));
  CHECK_THROWS_AS(bkd_loss(z_di, Tensor(), Tensor(), y, cfg, 0.0),
                  ContractError);

  LossConfig plain;
  BkdLoss none = bkd_loss(Tensor(), Tensor(), z_fused, y, plain, 0.0);
  CHECK(none.ce == doctest::Approx(cross_entropy(z_fused, y).value()));
  CHECK_THROWS_AS(bkd_loss(Tensor(), Tensor(), Tensor(), y, plain, 0.0),
                  ContractError);
}

TEST_CASE("loss gradients pass the finite-difference check") {
  Rng rng(53);
  const double tol = 1e-4;

  Tensor logits = random_normal({3, 4}, rng, 1.5, true);
  std::vector<int> y = {0, 3, 2};
  auto ce = [&] { return cross_entropy(logits, y); };
  CHECK(grad_check(ce, {{"logits", logits}}).ok(tol));

  Tensor p = random_normal({3, 4}, rng, 1.0, true);
  Tensor q = random_normal({3, 4}, rng, 1.0, true);
  auto kl = [&] { return kl_divergence(p, q, 2.0); };
  CHECK(grad_check(kl, {{"p", p}, {"q", q}}).ok(tol));

  // full objective with the opposite branches pinned, mirroring its detach
  // semantics (the FD reference must differentiate the same function)
  Tensor z_di = random_normal({3, 4}, rng, 1.0, true);
  Tensor z_dw = random_normal({3, 4}, rng, 1.0, true);
  Tensor c_di = detach(z_di), c_dw = detach(z_dw);
  auto full = [&] {
    Tensor ce_part = scalar_mul(
        add(cross_entropy(z_di, y), cross_entropy(z_dw, y)), 0.5);
    return add(ce_part, add(kl_divergence(z_di, c_dw),
                            kl_divergence(z_dw, c_di)));
  };
  CHECK(grad_check(full, {{"z_di", z_di}, {"z_dw", z_dw}}).ok(tol));

  // and bkd_loss's own backward equals the pinned expression's
  z_di.zero_grad();
  z_dw.zero_grad();
  backward(full());
  std::vector<double> want_di = z_di.grad(), want_dw = z_dw.grad();
  z_di.zero_grad();
  z_dw.zero_grad();
  LossConfig cfg;
  backward(bkd_loss(z_di, z_dw, Tensor(), y, cfg, 0.0).total);
  for (std::size_t i = 0; i < want_di.size(); ++i) {
    CHECK(z_di.grad()[i] == doctest::Approx(want_di[i]).epsilon(1e-12));
    CHECK(z_dw.grad()[i] == doctest::Approx(want_dw[i]).epsilon(1e-12));
  }
}
