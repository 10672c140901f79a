#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "surfseg/nn_ops.hpp"

using namespace surfseg;

namespace {

// Direct sliding-window convolution, written independently of the library.
std::vector<double> conv_oracle(const std::vector<double>& x, int B, int Cin, int H, int W,
                                const std::vector<double>& w, const std::vector<double>& bias,
                                int Cout, bool same) {
  const int Ho = same ? H : H - 2;
  const int Wo = same ? W : W - 2;
  std::vector<double> out(static_cast<std::size_t>(B) * Cout * Ho * Wo, 0.0);
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < Cout; ++oc)
      for (int yo = 0; yo < Ho; ++yo)
        for (int xo = 0; xo < Wo; ++xo) {
          double acc = bias[oc];
          for (int ic = 0; ic < Cin; ++ic)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int yi = yo + ky + (same ? -1 : 0);
                const int xi = xo + kx + (same ? -1 : 0);
                if (yi < 0 || yi >= H || xi < 0 || xi >= W) continue;
                acc += w[((oc * Cin + ic) * 3 + ky) * 3 + kx] *
                       x[((b * Cin + ic) * H + yi) * W + xi];
              }
          out[((b * Cout + oc) * Ho + yo) * Wo + xo] = acc;
        }
  return out;
}

// Align-corners interpolation applied per output pixel.
double bilinear_oracle_at(const std::vector<double>& in, int H, int W, int yo, int xo) {
  const double sy = static_cast<double>(yo) * (H - 1) / (2 * H - 1);
  const double sx = static_cast<double>(xo) * (W - 1) / (2 * W - 1);
  const int y0 = std::min(static_cast<int>(std::floor(sy)), H - 2);
  const int x0 = std::min(static_cast<int>(std::floor(sx)), W - 2);
  const double ty = sy - y0, tx = sx - x0;
  return (1 - ty) * ((1 - tx) * in[y0 * W + x0] + tx * in[y0 * W + x0 + 1]) +
         ty * ((1 - tx) * in[(y0 + 1) * W + x0] + tx * in[(y0 + 1) * W + x0 + 1]);
}

Conv2dParams<double> conv_params_from(std::vector<double> w, std::vector<double> b, int out,
                                      int in) {
  Conv2dParams<double> p;
  p.weight = Tensor<double>::from_values({out, in, 3, 3}, std::move(w));
  p.bias = Tensor<double>::from_values({out}, std::move(b));
  p.weight.set_requires_grad();
  p.bias.set_requires_grad();
  return p;
}

using Fn = std::function<Tensor<double>(const Tensor<double>&)>;

}  // namespace

TEST_CASE("conv3x3 zero input gives zero output") {
  SplitMix64 rng(1);
  auto x = Tensor<double>::zeros({1, 1, 3, 3});
  auto p = make_conv3x3<double>(1, 2, rng);
  auto y = conv3x3(x, p);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("conv3x3 center-weight kernel scales the input") {
  std::vector<double> w(9, 0.0);
  w[4] = 2.5;  // center tap
  auto p = conv_params_from(w, {0.0}, 1, 1);
  SplitMix64 rng(2);
  auto x = Tensor<double>::random_uniform({1, 1, 4, 4}, rng);
  auto y = conv3x3(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y.values()[i] == doctest::Approx(2.5 * x.values()[i]).epsilon(1e-15));
  }
}

TEST_CASE("conv3x3 matches the sliding-window oracle") {
  SplitMix64 rng(3);
  auto x = Tensor<double>::random_uniform({1, 2, 5, 5}, rng, -1.0, 1.0);
  auto p = make_conv3x3<double>(2, 3, rng);
  for (bool same : {true, false}) {
    auto y = conv3x3(x, p, same ? Padding::same_zero : Padding::valid);
    auto expect = conv_oracle(x.values(), 1, 2, 5, 5, p.weight.values(), p.bias.values(), 3, same);
    REQUIRE(y.values().size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv3x3 shape contract and errors") {
  SplitMix64 rng(4);
  auto x = Tensor<double>::zeros({1, 2, 6, 5});
  auto p = make_conv3x3<double>(2, 2, rng);
  CHECK(conv3x3(x, p, Padding::same_zero).shape() == Shape{1, 2, 6, 5});
  CHECK(conv3x3(x, p, Padding::valid).shape() == Shape{1, 2, 4, 3});

  auto bad_ch = Tensor<double>::zeros({1, 3, 6, 5});
  CHECK_THROWS_AS(conv3x3(bad_ch, p), std::invalid_argument);
  auto tiny = Tensor<double>::zeros({1, 2, 2, 2});
  CHECK_THROWS_AS(conv3x3(tiny, p, Padding::valid), std::invalid_argument);
}

TEST_CASE("conv3x3 gradients match finite differences") {
  SplitMix64 rng(5);
  auto x = Tensor<double>::random_uniform({2, 2, 4, 4}, rng, -1.0, 1.0);
  auto p = make_conv3x3<double>(2, 2, rng);
  for (auto pad : {Padding::same_zero, Padding::valid}) {
    Fn wrt_input = [&](const Tensor<double>& t) { return sum(square(conv3x3(t, p, pad))); };
    CHECK(finite_diff_check(wrt_input, x, 1e-5) < 1e-5);

    Fn wrt_weight = [&](const Tensor<double>& t) {
      Conv2dParams<double> q{t, p.bias};
      return sum(square(conv3x3(x, q, pad)));
    };
    CHECK(finite_diff_check(wrt_weight, p.weight, 1e-5) < 1e-5);

    Fn wrt_bias = [&](const Tensor<double>& t) {
      Conv2dParams<double> q{p.weight, t};
      return sum(square(conv3x3(x, q, pad)));
    };
    CHECK(finite_diff_check(wrt_bias, p.bias, 1e-5) < 1e-5);
  }
}

TEST_CASE("batch_norm constant input normalizes to zero") {
  auto bn = make_batch_norm<double>(2);
  std::vector<double> v;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) v.push_back(c == 0 ? 3.0 : -1.0);
  std::vector<double> interleaved;
  // layout [1,2,2,2]: channel planes are contiguous
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) interleaved.push_back(c == 0 ? 3.0 : -1.0);
  auto x = Tensor<double>::from_values({1, 2, 2, 2}, interleaved);
  auto y = batch_norm(x, bn, Mode::train);
  for (double o : y.values()) CHECK(std::abs(o) < 1e-9);
}

TEST_CASE("batch_norm affine collapse") {
  auto bn = make_batch_norm<double>(1);
  bn.gamma.values()[0] = 0.0;
  bn.beta.values()[0] = 5.0;
  SplitMix64 rng(6);
  auto x = Tensor<double>::random_uniform({2, 1, 3, 3}, rng);
  auto y = batch_norm(x, bn, Mode::train);
  for (double o : y.values()) CHECK(o == doctest::Approx(5.0));
}

TEST_CASE("batch_norm train statistics oracle") {
  auto bn = make_batch_norm<double>(3);
  SplitMix64 rng(7);
  // Large-variance input so eps is negligible against the batch variance.
  auto x = Tensor<double>::random_uniform({2, 3, 4, 4}, rng, -20.0, 20.0);
  auto y = batch_norm(x, bn, Mode::train);
  const int B = 2, C = 3, HW = 16;
  for (int c = 0; c < C; ++c) {
    double m = 0.0, v = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) m += y.values()[(b * C + c) * HW + i];
    m /= B * HW;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) {
        const double d = y.values()[(b * C + c) * HW + i] - m;
        v += d * d;
      }
    v /= B * HW;
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("batch_norm eval mode uses running statistics") {
  auto bn = make_batch_norm<double>(1);
  bn.running_mean.values()[0] = 2.0;
  bn.running_var.values()[0] = 4.0;
  auto x = Tensor<double>::from_values({1, 1, 1, 2}, {2.0, 4.0});
  auto y = batch_norm(x, bn, Mode::eval);
  CHECK(y.values()[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(y.values()[1] == doctest::Approx(2.0 / std::sqrt(4.0 + 1e-5)).epsilon(1e-9));
}

TEST_CASE("batch_norm running statistics update with momentum") {
  auto bn = make_batch_norm<double>(1);
  auto x = Tensor<double>::full({1, 1, 2, 2}, 10.0);
  batch_norm(x, bn, Mode::train);
  CHECK(bn.running_mean.values()[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 10.0));
  CHECK(bn.running_var.values()[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 0.0));

  auto frozen = make_batch_norm<double>(1);
  batch_norm(x, frozen, Mode::train, /*update_running=*/false);
  CHECK(frozen.running_mean.values()[0] == 0.0);
  CHECK(frozen.running_var.values()[0] == 1.0);
}

TEST_CASE("batch_norm rejects single-element train mode") {
  auto bn = make_batch_norm<double>(2);
  auto x = Tensor<double>::zeros({1, 2, 1, 1});
  CHECK_THROWS_AS(batch_norm(x, bn, Mode::train), std::invalid_argument);
  CHECK_NOTHROW(batch_norm(x, bn, Mode::eval));
}

TEST_CASE("batch_norm gradients match finite differences") {
  SplitMix64 rng(8);
  auto x = Tensor<double>::random_uniform({2, 2, 3, 3}, rng, -1.0, 1.0);
  auto bn = make_batch_norm<double>(2);
  bn.gamma.values() = {1.3, 0.7};
  bn.beta.values() = {0.2, -0.4};
  // Additive probe: sum(square(bn(x))) alone is constant in x for train mode
  // (the normalized activations have fixed first and second moments).
  auto probe = Tensor<double>::random_uniform({2, 2, 3, 3}, rng, -1.0, 1.0);
  for (auto mode : {Mode::train, Mode::eval}) {
    Fn wrt_input = [&](const Tensor<double>& t) {
      auto p = bn;
      return sum(square(add(batch_norm(t, p, mode, false), probe)));
    };
    CHECK(finite_diff_check(wrt_input, x, 1e-5) < 1e-5);

    Fn wrt_gamma = [&](const Tensor<double>& t) {
      BatchNormParams<double> p{t, bn.beta, bn.running_mean, bn.running_var};
      return sum(square(add(batch_norm(x, p, mode, false), probe)));
    };
    CHECK(finite_diff_check(wrt_gamma, bn.gamma, 1e-5) < 1e-5);

    Fn wrt_beta = [&](const Tensor<double>& t) {
      BatchNormParams<double> p{bn.gamma, t, bn.running_mean, bn.running_var};
      return sum(square(add(batch_norm(x, p, mode, false), probe)));
    };
    CHECK(finite_diff_check(wrt_beta, bn.beta, 1e-5) < 1e-5);
  }
}

TEST_CASE("relu forward") {
  auto x = Tensor<double>::from_values({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
  CHECK(relu(x).values() == std::vector<double>{0.0, 0.0, 2.0});
  auto pos = Tensor<double>::from_values({1, 1, 1, 3}, {0.5, 1.0, 2.0});
  CHECK(relu(pos).values() == pos.values());
}

TEST_CASE("relu gradient is an indicator") {
  // Entries bounded away from the kink so central differences are valid.
  auto x = Tensor<double>::from_values({1, 1, 2, 2}, {-1.0, 0.5, 2.0, -0.25});
  Fn f = [](const Tensor<double>& t) { return sum(relu(t)); };
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-10);
  Tensor<double> xt = x.clone();
  xt.set_requires_grad();
  {
    Tape<double> tape;
    auto loss = sum(relu(xt));
    backward(loss);
  }
  CHECK(xt.grad() == std::vector<double>{0.0, 1.0, 1.0, 0.0});
}

TEST_CASE("maxpool2x2 forward and oracle") {
  auto x = Tensor<double>::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(maxpool2x2(x).values() == std::vector<double>{4});

  SplitMix64 rng(9);
  auto r = Tensor<double>::random_uniform({1, 1, 4, 4}, rng);
  auto y = maxpool2x2(r);
  for (int yo = 0; yo < 2; ++yo)
    for (int xo = 0; xo < 2; ++xo) {
      double m = -1e300;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          m = std::max(m, r.values()[(2 * yo + dy) * 4 + 2 * xo + dx]);
        }
      CHECK(y.values()[yo * 2 + xo] == m);
    }

  auto odd = Tensor<double>::zeros({1, 1, 3, 4});
  CHECK_THROWS_AS(maxpool2x2(odd), std::invalid_argument);
}

TEST_CASE("maxpool2x2 ties route gradient to first row-major entry") {
  auto x = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  x.set_requires_grad();
  Tape<double> tape;
  auto loss = sum(maxpool2x2(x));
  backward(loss);
  CHECK(x.grad() == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("maxpool2x2 gradients match finite differences") {
  SplitMix64 rng(10);
  auto x = Tensor<double>::random_uniform({1, 2, 4, 4}, rng, -1.0, 1.0);
  Fn f = [](const Tensor<double>& t) { return sum(square(maxpool2x2(t))); };
  CHECK(finite_diff_check(f, x, 1e-6) < 1e-5);
}

TEST_CASE("bilinear upsample of a two-pixel row") {
  auto x = Tensor<double>::from_values({1, 1, 2, 2}, {0.0, 1.0, 0.0, 1.0});
  auto y = bilinear_upsample_x2(x);
  // every output row equals [0, 1/3, 2/3, 1]
  for (int row = 0; row < 4; ++row) {
    CHECK(y.values()[row * 4 + 0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(y.values()[row * 4 + 1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(y.values()[row * 4 + 2] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(y.values()[row * 4 + 3] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("bilinear upsample preserves constants and corners") {
  auto c = Tensor<double>::full({1, 1, 3, 5}, 0.7);
  auto y = bilinear_upsample_x2(c);
  for (double v : y.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

  SplitMix64 rng(11);
  auto r = Tensor<double>::random_uniform({1, 1, 3, 3}, rng);
  auto u = bilinear_upsample_x2(r);
  CHECK(u.values()[0] == r.values()[0]);
  CHECK(u.values()[5] == r.values()[2]);
  CHECK(u.values()[30] == r.values()[6]);
  CHECK(u.values()[35] == r.values()[8]);
  for (int yo = 0; yo < 6; ++yo)
    for (int xo = 0; xo < 6; ++xo) {
      CHECK(u.values()[yo * 6 + xo] ==
            doctest::Approx(bilinear_oracle_at(r.values(), 3, 3, yo, xo)).epsilon(1e-12));
    }

  auto tiny = Tensor<double>::zeros({1, 1, 1, 4});
  CHECK_THROWS_AS(bilinear_upsample_x2(tiny), std::invalid_argument);
}

TEST_CASE("bilinear upsample gradients match finite differences") {
  SplitMix64 rng(12);
  auto x = Tensor<double>::random_uniform({1, 2, 3, 3}, rng, -1.0, 1.0);
  Fn f = [](const Tensor<double>& t) { return sum(square(bilinear_upsample_x2(t))); };
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-5);
}

TEST_CASE("pool then upsample restores spatial shape") {
  SplitMix64 rng(13);
  for (int d = 1; d <= 3; ++d) {
    auto x = Tensor<double>::random_uniform({1, 2, 16, 24}, rng);
    auto h = x;
    for (int i = 0; i < d; ++i) h = maxpool2x2(h);
    for (int i = 0; i < d; ++i) h = bilinear_upsample_x2(h);
    CHECK(h.shape() == x.shape());
  }
}

TEST_CASE("global_avg_pool") {
  auto c = Tensor<double>::full({2, 3, 4, 4}, 7.0);
  auto y = global_avg_pool(c);
  CHECK(y.shape() == Shape{2, 3});
  for (double v : y.values()) CHECK(v == doctest::Approx(7.0));

  auto x = Tensor<double>::from_values({1, 1, 2, 2}, {0, 1, 1, 0});
  CHECK(global_avg_pool(x).values()[0] == doctest::Approx(0.5));

  SplitMix64 rng(14);
  auto r = Tensor<double>::random_uniform({1, 2, 3, 3}, rng);
  auto g = global_avg_pool(r);
  for (int ch = 0; ch < 2; ++ch) {
    double s = 0.0;
    for (int i = 0; i < 9; ++i) s += r.values()[ch * 9 + i];
    CHECK(g.values()[ch] == doctest::Approx(s / 9.0).epsilon(1e-12));
  }

  Fn f = [](const Tensor<double>& t) { return sum(square(global_avg_pool(t))); };
  CHECK(finite_diff_check(f, r, 1e-5) < 1e-5);
}

TEST_CASE("linear_softmax probabilities") {
  SplitMix64 rng(15);
  LinearParams<double> p;
  p.weight = Tensor<double>::from_values({2, 2}, {1, 0, 0, 1});
  p.bias = Tensor<double>::zeros({2});

  auto zeros = Tensor<double>::zeros({1, 2});
  auto y = linear_softmax(zeros, p);
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto big = Tensor<double>::from_values({1, 2}, {1000.0, 0.0});
  auto yb = linear_softmax(big, p);
  CHECK(yb.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isfinite(yb.values()[1]));

  auto logits = Tensor<double>::random_uniform({3, 4}, rng, -3.0, 3.0);
  auto probs = softmax(logits);
  for (int b = 0; b < 3; ++b) {
    double s = 0.0, expect_den = 0.0;
    for (int k = 0; k < 4; ++k) expect_den += std::exp(logits.values()[b * 4 + k]);
    for (int k = 0; k < 4; ++k) {
      s += probs.values()[b * 4 + k];
      CHECK(probs.values()[b * 4 + k] ==
            doctest::Approx(std::exp(logits.values()[b * 4 + k]) / expect_den).epsilon(1e-12));
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }

  auto bad = Tensor<double>::zeros({1, 3});
  CHECK_THROWS_AS(linear(bad, p), std::invalid_argument);
}

TEST_CASE("linear and softmax gradients match finite differences") {
  SplitMix64 rng(16);
  auto x = Tensor<double>::random_uniform({2, 3}, rng, -2.0, 2.0);
  auto p = make_linear<double>(3, 4, rng);
  Fn wrt_input = [&](const Tensor<double>& t) { return sum(square(linear_softmax(t, p))); };
  CHECK(finite_diff_check(wrt_input, x, 1e-5) < 1e-5);
  Fn wrt_weight = [&](const Tensor<double>& t) {
    LinearParams<double> q{t, p.bias};
    return sum(square(linear_softmax(x, q)));
  };
  CHECK(finite_diff_check(wrt_weight, p.weight, 1e-5) < 1e-5);
  Fn wrt_bias = [&](const Tensor<double>& t) {
    LinearParams<double> q{p.weight, t};
    return sum(square(linear_softmax(x, q)));
  };
  CHECK(finite_diff_check(wrt_bias, p.bias, 1e-5) < 1e-5);
}

TEST_CASE("sigmoid values and identities") {
  auto x = Tensor<double>::from_values({1, 1, 1, 3}, {0.0, -1000.0, 1000.0});
  auto y = sigmoid(x);
  CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.values()[1] > 0.0);
  CHECK(y.values()[1] <= 1e-300);
  CHECK(y.values()[2] < 1.0);
  CHECK(std::isfinite(y.values()[1]));

  SplitMix64 rng(17);
  auto r = Tensor<double>::random_uniform({1, 1, 4, 4}, rng, -10.0, 10.0);
  auto a = sigmoid(r);
  auto b = sigmoid(mul(r, -1.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.values()[i] + b.values()[i] == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Gradient check on a range where the logistic is not saturated.
  auto mid = Tensor<double>::random_uniform({1, 1, 4, 4}, rng, -4.0, 4.0);
  Fn f = [](const Tensor<double>& t) { return sum(square(sigmoid(t))); };
  CHECK(finite_diff_check(f, mid, 1e-5) < 1e-5);
}

TEST_CASE("residual block with zero branch is the identity") {
  SplitMix64 rng(18);
  std::vector<ConvBnUnit<double>> stages;
  for (int s = 0; s < 2; ++s) {
    ConvBnUnit<double> u{make_conv3x3<double>(2, 2, rng), make_batch_norm<double>(2)};
    std::fill(u.conv.weight.values().begin(), u.conv.weight.values().end(), 0.0);
    stages.push_back(std::move(u));
  }
  auto x = Tensor<double>::random_uniform({1, 2, 4, 4}, rng);
  auto y = residual_block(x, stages, Mode::eval);
  CHECK(y.values() == x.values());

  // gradient of sum(output) w.r.t. input is all ones through the skip path
  auto xt = x.clone();
  xt.set_requires_grad();
  {
    Tape<double> tape;
    auto loss = sum(residual_block(xt, stages, Mode::eval, false));
    backward(loss);
  }
  for (double g : xt.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("residual block equals manual composition for n=1") {
  SplitMix64 rng(19);
  std::vector<ConvBnUnit<double>> stages;
  stages.push_back({make_conv3x3<double>(2, 2, rng), make_batch_norm<double>(2)});
  auto x = Tensor<double>::random_uniform({1, 2, 4, 4}, rng);
  auto got = residual_block(x, stages, Mode::train, false);
  auto manual =
      add(x, relu(batch_norm(conv3x3(x, stages[0].conv), stages[0].bn, Mode::train, false)));
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got.values()[i] == doctest::Approx(manual.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("residual block rejects channel mismatch") {
  SplitMix64 rng(20);
  std::vector<ConvBnUnit<double>> stages;
  stages.push_back({make_conv3x3<double>(2, 3, rng), make_batch_norm<double>(3)});
  auto x = Tensor<double>::zeros({1, 2, 4, 4});
  CHECK_THROWS_AS(residual_block(x, stages, Mode::eval), std::invalid_argument);
}

TEST_CASE("all layer ops pass finite differences on random small inputs") {
  SplitMix64 rng(21);
  auto p = make_conv3x3<double>(2, 2, rng);
  auto bn = make_batch_norm<double>(2);
  auto lp = make_linear<double>(4, 3, rng);
  std::vector<ConvBnUnit<double>> block;
  block.push_back({make_conv3x3<double>(2, 2, rng), make_batch_norm<double>(2)});

  for (std::uint64_t seed = 100; seed < 103; ++seed) {
    SplitMix64 gen(seed);
    auto x = Tensor<double>::random_uniform({2, 2, 6, 6}, gen, -1.0, 1.0);
    auto flat = Tensor<double>::random_uniform({2, 4}, gen, -1.0, 1.0);
    auto probe = Tensor<double>::random_uniform({2, 2, 6, 6}, gen, -1.0, 1.0);
    const std::pair<const char*, Fn> cases[] = {
        {"conv3x3", Fn([&](const Tensor<double>& t) { return mean(square(conv3x3(t, p))); })},
        {"batch_norm", Fn([&](const Tensor<double>& t) {
           auto q = bn;
           return mean(square(add(batch_norm(t, q, Mode::train, false), probe)));
         })},
        {"relu", Fn([&](const Tensor<double>& t) { return mean(square(relu(t))); })},
        {"maxpool", Fn([&](const Tensor<double>& t) { return mean(square(maxpool2x2(t))); })},
        {"bilinear",
         Fn([&](const Tensor<double>& t) { return mean(square(bilinear_upsample_x2(t))); })},
        {"gap", Fn([&](const Tensor<double>& t) { return mean(square(global_avg_pool(t))); })},
        {"sigmoid", Fn([&](const Tensor<double>& t) { return mean(square(sigmoid(t))); })},
        {"residual", Fn([&](const Tensor<double>& t) {
           return mean(square(residual_block(t, block, Mode::train, false)));
         })},
    };
    for (const auto& [name, f] : cases) {
      INFO(std::string(name) << " seed " << seed);
      CHECK(finite_diff_check(f, x, 1e-5) < 1e-5);
    }
    Fn fsm = [&](const Tensor<double>& t) { return mean(square(linear_softmax(t, lp))); };
    CHECK(finite_diff_check(fsm, flat, 1e-5) < 1e-5);
  }
}
