#include "serforge/nn.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "serforge/gradcheck.hpp"
#include "serforge/rng.hpp"

using namespace serforge;
using Catch::Approx;

TEST_CASE("conv2d cross-correlation basics", "[nn][conv2d]") {
  Rng rng(1);

  SECTION("all-ones 2x2 kernel sums the input") {
    nn::Conv2d<double> conv(1, 1, 2, 2, rng);
    conv.kernels.value.fill(1.0);
    conv.bias.value.fill(0.0);
    Tensor<double> in({1, 1, 2, 2});
    in(0, 0, 0, 0) = 1.0;
    in(0, 0, 0, 1) = 2.0;
    in(0, 0, 1, 0) = 3.0;
    in(0, 0, 1, 1) = 4.0;
    const Tensor<double> out = conv.forward(in, nn::LayerMode::kEval);
    REQUIRE(out.dims() == std::vector<std::size_t>{1, 1, 1, 1});
    REQUIRE(out[0] == Approx(10.0).margin(1e-12));
  }

  SECTION("1x1 identity kernel reproduces the input") {
    nn::Conv2d<double> conv(1, 1, 1, 1, rng);
    conv.kernels.value.fill(1.0);
    conv.bias.value.fill(0.0);
    Rng data(2);
    Tensor<double> in({2, 1, 3, 4});
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = data.uniform(-1.0, 1.0);
    const Tensor<double> out = conv.forward(in, nn::LayerMode::kEval);
    REQUIRE(out.dims() == in.dims());
    for (std::size_t i = 0; i < in.size(); ++i) REQUIRE(out[i] == in[i]);
  }

  SECTION("oversized kernel rejected") {
    nn::Conv2d<double> conv(1, 1, 5, 5, rng);
    Tensor<double> in({1, 1, 3, 3});
    REQUIRE_THROWS_AS(conv.forward(in, nn::LayerMode::kEval), std::invalid_argument);
  }

  SECTION("finite differences confirm all three gradients") {
    // random 1x1x5x5 input through 2 kernels of 1x3x3
    Rng check(3);
    nn::Conv2d<double> conv(2, 1, 3, 3, check);
    conv.needs_input_grad = true;
    Tensor<double> in({1, 1, 5, 5});
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = check.uniform(-1.0, 1.0);
    Tensor<double> weights({1, 2, 3, 3});
    for (std::size_t i = 0; i < weights.size(); ++i) {
      weights[i] = check.uniform(-1.0, 1.0);
    }

    conv.forward(in, nn::LayerMode::kTrain);
    const Tensor<double> grad_in = conv.backward(weights);

    auto loss = [&] {
      double acc = 0.0;
      const Tensor<double> out = conv.forward(in, nn::LayerMode::kEval);
      for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * weights[i];
      return acc;
    };
    const double eps = 1e-5;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double saved = in[i];
      in[i] = saved + eps;
      const double up = loss();
      in[i] = saved - eps;
      const double down = loss();
      in[i] = saved;
      REQUIRE(gradcheck::relative_error(grad_in[i], (up - down) / (2 * eps)) <= 1e-6);
    }
    for (std::size_t i = 0; i < conv.kernels.value.size(); ++i) {
      const double saved = conv.kernels.value[i];
      conv.kernels.value[i] = saved + eps;
      const double up = loss();
      conv.kernels.value[i] = saved - eps;
      const double down = loss();
      conv.kernels.value[i] = saved;
      REQUIRE(gradcheck::relative_error(conv.kernels.grad[i],
                                        (up - down) / (2 * eps)) <= 1e-6);
    }
  }
}

TEST_CASE("maxpool2d windows and gradient routing", "[nn][maxpool]") {
  SECTION("4x4 input with 2x2 pool yields block maxima") {
    nn::MaxPool2d<double> pool(2, 2);
    Tensor<double> in({1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) in[i] = static_cast<double>(i);
    const Tensor<double> out = pool.forward(in, nn::LayerMode::kTrain);
    REQUIRE(out.dims() == std::vector<std::size_t>{1, 1, 2, 2});
    REQUIRE(out(0, 0, 0, 0) == 5.0);
    REQUIRE(out(0, 0, 0, 1) == 7.0);
    REQUIRE(out(0, 0, 1, 0) == 13.0);
    REQUIRE(out(0, 0, 1, 1) == 15.0);
  }

  SECTION("117 x 241 plane with half-size pool gives 2x2 per channel") {
    nn::MaxPool2d<double> pool(58, 120);
    Tensor<double> in({1, 3, 117, 241});
    const Tensor<double> out = pool.forward(in, nn::LayerMode::kTrain);
    REQUIRE(out.dims() == std::vector<std::size_t>{1, 3, 2, 2});
  }

  SECTION("sum-loss gradient puts exactly one 1 in each window") {
    nn::MaxPool2d<double> pool(2, 3);
    Rng rng(9);
    Tensor<double> in({2, 2, 4, 6});
    std::vector<std::size_t> perm(in.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    for (std::size_t i = 0; i < in.size(); ++i) {
      in[i] = static_cast<double>(perm[i]);  // all distinct
    }
    const Tensor<double> out = pool.forward(in, nn::LayerMode::kTrain);
    const Tensor<double> grad_in = pool.backward(Tensor<double>::full(out.dims(), 1.0));
    double total = 0.0;
    for (std::size_t i = 0; i < grad_in.size(); ++i) {
      REQUIRE((grad_in[i] == 0.0 || grad_in[i] == 1.0));
      total += grad_in[i];
    }
    REQUIRE(total == static_cast<double>(out.size()));
  }

  SECTION("zero pool size rejected") {
    REQUIRE_THROWS_AS(nn::MaxPool2d<double>(0, 2), std::invalid_argument);
  }
}

TEST_CASE("global max pool", "[nn][pool]") {
  nn::GlobalMaxPool<double> pool;

  SECTION("picks the channel maximum") {
    Tensor<double> in({1, 1, 3, 1});
    in[0] = -1.0;
    in[1] = 3.0;
    in[2] = 2.0;
    REQUIRE(pool.forward(in, nn::LayerMode::kTrain)(0, 0) == 3.0);
  }

  SECTION("constant channel returns the constant") {
    const Tensor<double> out =
        pool.forward(Tensor<double>::full({2, 3, 5, 1}, 0.7), nn::LayerMode::kTrain);
    for (std::size_t i = 0; i < out.size(); ++i) REQUIRE(out[i] == 0.7);
  }

  SECTION("finite-difference gradient check") {
    Rng rng(5);
    REQUIRE(gradcheck::check_global_maxpool_once(rng) <= 1e-6);
  }
}

TEST_CASE("dense affine map", "[nn][dense]") {
  Rng rng(2);

  SECTION("identity weight with zero bias is the identity") {
    nn::Dense<double> dense(3, 3, rng);
    dense.weight.value.fill(0.0);
    for (std::size_t i = 0; i < 3; ++i) dense.weight.value(i, i) = 1.0;
    Tensor<double> in({2, 3});
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<double>(i);
    const Tensor<double> out = dense.forward(in, nn::LayerMode::kEval);
    for (std::size_t i = 0; i < in.size(); ++i) REQUIRE(out[i] == in[i]);
  }

  SECTION("weight [[1,1]] with bias [1] maps [2,3] to [6]") {
    nn::Dense<double> dense(1, 2, rng);
    dense.weight.value.fill(1.0);
    dense.bias.value.fill(1.0);
    Tensor<double> in({1, 2});
    in[0] = 2.0;
    in[1] = 3.0;
    REQUIRE(dense.forward(in, nn::LayerMode::kEval)(0, 0) == Approx(6.0));
  }

  SECTION("dimension mismatch rejected") {
    nn::Dense<double> dense(4, 7, rng);
    REQUIRE_THROWS_AS(dense.forward(Tensor<double>({2, 6}), nn::LayerMode::kEval),
                      std::invalid_argument);
  }

  SECTION("finite-difference gradients at 3x7 -> 5") {
    Rng check(11);
    nn::Dense<double> dense(5, 7, check);
    Tensor<double> in({3, 7});
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = check.uniform(-1.0, 1.0);
    Tensor<double> weights({3, 5});
    for (std::size_t i = 0; i < weights.size(); ++i) {
      weights[i] = check.uniform(-1.0, 1.0);
    }
    dense.forward(in, nn::LayerMode::kTrain);
    const Tensor<double> grad_in = dense.backward(weights);
    auto loss = [&] {
      double acc = 0.0;
      const Tensor<double> out = dense.forward(in, nn::LayerMode::kEval);
      for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * weights[i];
      return acc;
    };
    const double eps = 1e-5;
    for (std::size_t i = 0; i < dense.weight.value.size(); ++i) {
      const double saved = dense.weight.value[i];
      dense.weight.value[i] = saved + eps;
      const double up = loss();
      dense.weight.value[i] = saved - eps;
      const double down = loss();
      dense.weight.value[i] = saved;
      REQUIRE(gradcheck::relative_error(dense.weight.grad[i],
                                        (up - down) / (2 * eps)) <= 1e-6);
    }
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double saved = in[i];
      in[i] = saved + eps;
      const double up = loss();
      in[i] = saved - eps;
      const double down = loss();
      in[i] = saved;
      REQUIRE(gradcheck::relative_error(grad_in[i], (up - down) / (2 * eps)) <= 1e-6);
    }
  }
}

TEST_CASE("relu clamps negatives and gates the gradient", "[nn][relu]") {
  nn::Relu<double> relu;
  Tensor<double> in({1, 3});
  in[0] = -1.0;
  in[1] = 0.0;
  in[2] = 2.0;
  const Tensor<double> out = relu.forward(in, nn::LayerMode::kTrain);
  REQUIRE(out[0] == 0.0);
  REQUIRE(out[1] == 0.0);
  REQUIRE(out[2] == 2.0);

  const Tensor<double> grad = relu.backward(Tensor<double>::full({1, 3}, 1.0));
  REQUIRE(grad[0] == 0.0);
  REQUIRE(grad[1] == 0.0);  // subgradient 0 at 0
  REQUIRE(grad[2] == 1.0);

  const Tensor<double> all_neg =
      relu.forward(Tensor<double>::full({2, 4}, -3.0), nn::LayerMode::kEval);
  for (std::size_t i = 0; i < all_neg.size(); ++i) REQUIRE(all_neg[i] == 0.0);
}

TEST_CASE("batch norm statistics and gradient", "[nn][batchnorm]") {
  SECTION("train mode normalizes each column to mean 0, variance 1") {
    nn::BatchNorm<double> bn(5);
    Rng rng(13);
    Tensor<double> in({8, 5});
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = rng.uniform(-3.0, 3.0);
    const Tensor<double> out = bn.forward(in, nn::LayerMode::kTrain);
    for (std::size_t j = 0; j < 5; ++j) {
      double mean = 0.0;
      for (std::size_t b = 0; b < 8; ++b) mean += out(b, j);
      mean /= 8.0;
      double var = 0.0;
      for (std::size_t b = 0; b < 8; ++b) var += (out(b, j) - mean) * (out(b, j) - mean);
      var /= 8.0;
      REQUIRE(mean == Approx(0.0).margin(1e-10));
      REQUIRE(var == Approx(1.0).margin(1e-4));
    }
  }

  SECTION("eval mode with fresh running stats is nearly the identity") {
    nn::BatchNorm<double> bn(3);
    Tensor<double> in({2, 3});
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<double>(i) - 2.0;
    const Tensor<double> out = bn.forward(in, nn::LayerMode::kEval);
    for (std::size_t i = 0; i < in.size(); ++i) {
      REQUIRE(out[i] == Approx(in[i]).margin(1e-4));
    }
  }

  SECTION("batch of one rejected in train mode") {
    nn::BatchNorm<double> bn(3);
    REQUIRE_THROWS_AS(bn.forward(Tensor<double>({1, 3}), nn::LayerMode::kTrain),
                      std::invalid_argument);
  }

  SECTION("finite-difference gradient at 8x5") {
    Rng rng(17);
    REQUIRE(gradcheck::check_batch_norm_once(rng) <= 1e-5);
  }
}

TEST_CASE("inverted dropout", "[nn][dropout]") {
  Rng rng(19);

  SECTION("rate zero is the identity in both modes") {
    nn::Dropout<double> drop(0.0);
    Tensor<double> in = Tensor<double>::full({4, 4}, 1.5);
    for (nn::LayerMode mode : {nn::LayerMode::kTrain, nn::LayerMode::kEval}) {
      const Tensor<double> out = drop.forward(in, mode, rng);
      for (std::size_t i = 0; i < in.size(); ++i) REQUIRE(out[i] == 1.5);
    }
  }

  SECTION("eval mode is the identity at any rate") {
    nn::Dropout<double> drop(0.7);
    Tensor<double> in = Tensor<double>::full({3, 3}, -2.0);
    const Tensor<double> out = drop.forward(in, nn::LayerMode::kEval, rng);
    for (std::size_t i = 0; i < in.size(); ++i) REQUIRE(out[i] == -2.0);
  }

  SECTION("survivor fraction and scale at rate 0.5 over 1e6 entries") {
    nn::Dropout<double> drop(0.5);
    Tensor<double> in = Tensor<double>::full({1000, 1000}, 1.0);
    const Tensor<double> out = drop.forward(in, nn::LayerMode::kTrain, rng);
    std::size_t survivors = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] != 0.0) {
        REQUIRE(out[i] == 2.0);  // 1 / (1 - rate)
        ++survivors;
      }
    }
    const double fraction = static_cast<double>(survivors) / 1e6;
    REQUIRE(fraction == Approx(0.5).margin(0.002));
  }

  SECTION("backward reuses the forward mask") {
    nn::Dropout<double> drop(0.4);
    Tensor<double> in = Tensor<double>::full({8, 8}, 1.0);
    const Tensor<double> out = drop.forward(in, nn::LayerMode::kTrain, rng);
    const Tensor<double> grad = drop.backward(Tensor<double>::full({8, 8}, 1.0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      REQUIRE(grad[i] == drop.mask()[i]);
      REQUIRE(grad[i] == out[i]);  // input was all ones
    }
  }

  SECTION("rate of 1 or more rejected") {
    REQUIRE_THROWS_AS(nn::Dropout<double>(1.0), std::invalid_argument);
  }
}

TEST_CASE("softmax cross-entropy", "[nn][softmax]") {
  SECTION("uniform logits give uniform probabilities and ln(4) loss") {
    Tensor<double> logits({1, 4});
    const auto result = nn::softmax_cross_entropy(logits, {2});
    for (std::size_t c = 0; c < 4; ++c) {
      REQUIRE(result.probs(0, c) == Approx(0.25).margin(1e-12));
    }
    REQUIRE(result.loss == Approx(std::log(4.0)).margin(1e-12));
  }

  SECTION("extreme logits stay finite") {
    Tensor<double> logits({1, 4});
    logits(0, 0) = 1000.0;
    const auto result = nn::softmax_cross_entropy(logits, {0});
    REQUIRE(std::isfinite(result.loss));
    REQUIRE(result.loss == Approx(0.0).margin(1e-9));
    for (std::size_t c = 0; c < 4; ++c) REQUIRE(std::isfinite(result.probs(0, c)));
  }

  SECTION("rows sum to one and the gradient matches finite differences") {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
      REQUIRE(gradcheck::check_softmax_once(rng) <= 1e-6);
    }
    Tensor<double> logits({3, 4});
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform(-4.0, 4.0);
    const auto result = nn::softmax_cross_entropy(logits, {0, 1, 2});
    for (std::size_t b = 0; b < 3; ++b) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 4; ++c) sum += result.probs(b, c);
      REQUIRE(sum == Approx(1.0).margin(1e-6));
    }
  }

  SECTION("label out of range rejected") {
    Tensor<double> logits({1, 4});
    REQUIRE_THROWS_AS(nn::softmax_cross_entropy(logits, {4}), std::invalid_argument);
  }
}

TEST_CASE("adadelta follows the coupled accumulator recurrences", "[nn][adadelta]") {
  SECTION("zero gradient leaves the value unchanged") {
    nn::Parameter<double> p({3});
    p.value.fill(1.25);
    std::vector<nn::Parameter<double>*> params = {&p};
    nn::adadelta_step(params);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(p.value[i] == 1.25);
  }

  SECTION("two-step scalar trace matches the hand-evaluated recurrence") {
    // frozen from the update equations with rho 0.95, eps 1e-6, g = 1
    const double expected_delta1 = -0.004472091234310839;
    const double expected_delta2 = -0.0045290622655332078;
    const double expected_eg2 = 0.097500000000000003;
    const double expected_ed2 = 1.9756012506338325e-06;

    nn::Parameter<double> p({1});
    std::vector<nn::Parameter<double>*> params = {&p};

    p.grad[0] = 1.0;
    nn::adadelta_step(params);
    REQUIRE(p.value[0] == Approx(expected_delta1).margin(1e-10));
    REQUIRE(std::abs(p.value[0] - (-4.4721e-3)) < 1e-7);
    REQUIRE(p.grad[0] == 0.0);  // cleared

    p.grad[0] = 1.0;
    nn::adadelta_step(params);
    REQUIRE(p.value[0] == Approx(expected_delta1 + expected_delta2).margin(1e-10));
    REQUIRE(p.accum_grad_sq[0] == Approx(expected_eg2).margin(1e-10));
    REQUIRE(p.accum_delta_sq[0] == Approx(expected_ed2).margin(1e-10));
  }

  SECTION("trace oracle holds for other rho and eps") {
    Rng rng(29);
    for (auto [rho, eps] : std::vector<std::pair<double, double>>{
             {0.9, 1e-6}, {0.95, 1e-8}, {0.5, 1e-3}}) {
      nn::Parameter<double> p({1});
      double eg = 0.0, ed = 0.0, v = 0.0;
      for (int step = 0; step < 5; ++step) {
        const double g = rng.uniform(-2.0, 2.0);
        p.grad[0] = g;
        std::vector<nn::Parameter<double>*> params = {&p};
        nn::adadelta_step(params, rho, eps);

        eg = rho * eg + (1.0 - rho) * g * g;
        const double delta = -std::sqrt(ed + eps) / std::sqrt(eg + eps) * g;
        ed = rho * ed + (1.0 - rho) * delta * delta;
        v += delta;
        REQUIRE(p.value[0] == Approx(v).margin(1e-10));
        REQUIRE(p.accum_grad_sq[0] == Approx(eg).margin(1e-10));
        REQUIRE(p.accum_delta_sq[0] == Approx(ed).margin(1e-10));
      }
    }
  }

  SECTION("non-finite gradient fails fast") {
    nn::Parameter<double> p({1});
    p.grad[0] = std::nan("");
    std::vector<nn::Parameter<double>*> params = {&p};
    REQUIRE_THROWS_AS(nn::adadelta_step(params), NumericalError);
  }
}

TEST_CASE("seeded rng is reproducible", "[nn][rng]") {
  SECTION("identical seeds give identical streams and weight draws") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());

    Rng ra(7), rb(7);
    nn::Dense<float> da(6, 9, ra), db(6, 9, rb);
    for (std::size_t i = 0; i < da.weight.value.size(); ++i) {
      REQUIRE(da.weight.value[i] == db.weight.value[i]);
    }
  }

  SECTION("different seeds give different weights") {
    Rng ra(1), rb(2);
    nn::Dense<float> da(6, 9, ra), db(6, 9, rb);
    bool any_diff = false;
    for (std::size_t i = 0; i < da.weight.value.size(); ++i) {
      any_diff = any_diff || da.weight.value[i] != db.weight.value[i];
    }
    REQUIRE(any_diff);
  }

  SECTION("golden seed-0 values, generated once and frozen") {
    Rng r(0);
    REQUIRE(r.uniform() == Approx(0.15979336337046079).margin(1e-17));
    REQUIRE(r.uniform() == Approx(0.99214520962982877).margin(1e-17));

    Rng init(0);
    nn::Dense<double> dense(8, 16, init);
    double sum = 0.0, sum_abs = 0.0;
    for (std::size_t i = 0; i < dense.weight.value.size(); ++i) {
      sum += dense.weight.value[i];
      sum_abs += std::abs(dense.weight.value[i]);
    }
    REQUIRE(sum == Approx(1.4747924487813882).margin(1e-12));
    REQUIRE(sum_abs == Approx(31.393692239113406).margin(1e-12));
  }
}

TEST_CASE("every layer passes the finite-difference sweep", "[nn][gradcheck]") {
  for (const gradcheck::CheckResult& r : gradcheck::check_layers(0, 10)) {
    INFO(r.name << " max rel err " << r.max_rel_err);
    REQUIRE(r.max_rel_err <= gradcheck::kLayerTolerance);
    REQUIRE(r.checked == 10);
  }
}

TEST_CASE("finite inputs yield finite outputs everywhere", "[nn][property]") {
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    nn::Conv2d<float> conv(3, 1, 3, 3, rng);
    Tensor<float> in({2, 1, 8, 8});
    for (std::size_t i = 0; i < in.size(); ++i) {
      in[i] = static_cast<float>(rng.uniform(-10.0, 10.0));
    }
    Tensor<float> out = conv.forward(in, nn::LayerMode::kTrain);
    nn::Relu<float> relu;
    out = relu.forward(out, nn::LayerMode::kTrain);
    nn::MaxPool2d<float> pool(3, 3);
    out = pool.forward(out, nn::LayerMode::kTrain);
    for (std::size_t i = 0; i < out.size(); ++i) REQUIRE(std::isfinite(out[i]));
  }
}
