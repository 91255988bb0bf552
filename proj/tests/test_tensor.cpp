#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "stark/gradcheck.hpp"
#include "stark/optim.hpp"
#include "stark/registry.hpp"
#include "stark/rng.hpp"
#include "stark/tensor.hpp"

using namespace stark;

TEST_CASE("matmul identity and projector") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto r = mm(eye, m);
  CHECK(r.values() == std::vector<float>{1, 2, 3, 4});

  auto proj = Tensor::from({2, 2}, {1, 0, 0, 0});
  auto m2 = Tensor::from({2, 2}, {5, 6, 7, 8});
  auto r2 = mm(proj, m2);
  CHECK(r2.values() == std::vector<float>{5, 6, 0, 0});
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  auto a = Tensor::uniform({3, 4}, rng, -1, 1);
  auto b = Tensor::uniform({4, 2}, rng, -1, 1);
  auto r = mm(a, b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += double(a.data()[i * 4 + k]) * double(b.data()[k * 2 + j]);
      const double got = r.data()[i * 2 + j];
      CHECK(std::abs(got - acc) <= 1e-6 * std::max(1.0, std::abs(acc)));
    }
  }
}

TEST_CASE("matmul rejects shape mismatch naming both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 2});
  try {
    mm(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("softmax symmetry, shift invariance, oracle") {
  auto z = softmax(Tensor::from({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) CHECK(z.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-6));

  auto big = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(big.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(big.data()[1] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(std::isfinite(big.data()[0]));

  auto s = softmax(Tensor::from({3}, {1, 2, 3}), 0);
  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s.data()[i] - std::exp(1.0 + i) / denom) <= 1e-7);
}

TEST_CASE("softmax rows sum to one on large-magnitude input") {
  Rng rng(3);
  auto x = Tensor::uniform({8, 17}, rng, -1000, 1000);
  auto p = softmax(x, 1);
  for (int r = 0; r < 8; ++r) {
    double sum = 0;
    for (int i = 0; i < 17; ++i) {
      sum += p.data()[r * 17 + i];
      CHECK(p.data()[r * 17 + i] >= 0.f);
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("conv2d identity kernel and constant field") {
  Rng rng(11);
  auto x = Tensor::uniform({1, 1, 3, 3}, rng, 0, 1);
  auto k1 = Tensor::from({1, 1, 1, 1}, {1});
  auto y = conv2d(x, k1, Tensor(), 1, 0);
  CHECK(y.dims() == std::vector<int>{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == x.data()[i]);

  auto ones = Tensor::full({1, 1, 4, 4}, 1.f);
  auto k3 = Tensor::full({1, 1, 3, 3}, 1.f);
  auto y2 = conv2d(ones, k3, Tensor(), 1, 0);
  CHECK(y2.dims() == std::vector<int>{1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(y2.data()[i] == doctest::Approx(9.f));
}

TEST_CASE("conv2d matches six-loop oracle") {
  Rng rng(5);
  const int B = 2, Ci = 3, H = 6, W = 5, Co = 4, kh = 3, kw = 3, stride = 2, pad = 1;
  auto x = Tensor::uniform({B, Ci, H, W}, rng, -1, 1);
  auto w = Tensor::uniform({Co, Ci, kh, kw}, rng, -1, 1);
  auto bias = Tensor::uniform({Co}, rng, -1, 1);
  auto y = conv2d(x, w, bias, stride, pad);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  REQUIRE(y.dims() == std::vector<int>{B, Co, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int co = 0; co < Co; ++co)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo) {
          double acc = bias.data()[co];
          for (int ci = 0; ci < Ci; ++ci)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int hi = ho * stride - pad + i;
                const int wi = wo * stride - pad + j;
                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                acc += double(x.data()[((b * Ci + ci) * H + hi) * W + wi]) *
                       double(w.data()[((co * Ci + ci) * kh + i) * kw + j]);
              }
          const double got = y.data()[((b * Co + co) * Ho + ho) * Wo + wo];
          CHECK(std::abs(got - acc) <= 1e-5 * std::max(1.0, std::abs(acc)));
        }
}

TEST_CASE("conv2d rejects invalid geometry") {
  auto x = Tensor::zeros({1, 1, 2, 2});
  auto w = Tensor::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(x, w, Tensor(), 1, 0), std::invalid_argument);
}

TEST_CASE("layer_norm constant slice and statistics") {
  auto g = Tensor::full({3}, 1.f);
  auto b = Tensor::zeros({3});
  auto y = layer_norm(Tensor::from({1, 3}, {1, 1, 1}), g, b);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(0.f));

  Rng rng(17);
  auto x = Tensor::uniform({4, 16}, rng, -3, 3);
  auto g16 = Tensor::full({16}, 1.f);
  auto b16 = Tensor::zeros({16});
  auto z = layer_norm(x, g16, b16);
  for (int r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (int i = 0; i < 16; ++i) mu += z.data()[r * 16 + i];
    mu /= 16;
    for (int i = 0; i < 16; ++i) {
      double c = z.data()[r * 16 + i] - mu;
      var += c * c;
    }
    var /= 16;
    CHECK(std::abs(mu) <= 1e-5);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
}

TEST_CASE("sigmoid at zero") { CHECK(sigmoid(Tensor::scalar(0.f)).item() == doctest::Approx(0.5f)); }

TEST_CASE("batch_norm frozen with identity statistics is identity") {
  BnState st;
  st.gamma = Tensor::full({2}, 1.f);
  st.beta = Tensor::zeros({2});
  st.running_mean = Tensor::zeros({2});
  st.running_var = Tensor::full({2}, 1.f);
  Rng rng(2);
  auto x = Tensor::uniform({2, 2, 3, 3}, rng, -0.1, 0.1);
  auto before_mean = st.running_mean.clone();
  auto y = batch_norm(x, st, false);
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(std::abs(y.data()[i] - x.data()[i]) <= 1e-6);
  // frozen mode updates nothing
  for (int c = 0; c < 2; ++c) CHECK(st.running_mean.data()[c] == before_mean.data()[c]);
}

TEST_CASE("backward: sum gives ones, quadratic gives x") {
  Tape tape;
  Rng rng(9);
  auto x = Tensor::uniform({3, 4}, rng, -2, 2, true);
  {
    Tape::Scope scope(tape);
    auto loss = sum_all(x);
    tape.backward(loss);
  }
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(1.f));
  tape.clear();
  x.zero_grad();
  {
    Tape::Scope scope(tape);
    auto loss = mul_scalar(sum_all(mul(x, x)), 0.5f);
    tape.backward(loss);
  }
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  auto x = Tensor::zeros({2, 2}, true);
  Tape::Scope scope(tape);
  auto y = add_scalar(x, 1.f);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("disconnected parameter reads exact zero gradient") {
  Tape tape;
  auto x = Tensor::full({2}, 1.f);
  x.set_requires_grad(true);
  auto unused = Tensor::full({3}, 2.f);
  unused.set_requires_grad(true);
  {
    Tape::Scope scope(tape);
    tape.backward(sum_all(x));
  }
  for (int i = 0; i < 3; ++i) CHECK(unused.grad()[i] == 0.f);
}

TEST_CASE("adamw single-step oracle") {
  // g=1, lr=0.1, default betas, wd=0: bias-corrected moments give ~ -lr
  auto p = Tensor::scalar(5.f);
  p.set_requires_grad(true);
  p.grad()[0] = 1.f;
  AdamW::Settings s;
  s.weight_decay = 0.0;
  AdamW opt(s);
  opt.add_group({p}, {"p"}, 0.1);
  opt.step();
  const double expected = 5.0 - 0.1 * 1.0 / (1.0 + 1e-8);
  CHECK(p.item() == doctest::Approx(expected).epsilon(1e-6));
  CHECK(p.grad()[0] == 1.f);  // gradients untouched
}

TEST_CASE("adamw zero gradient leaves parameter unchanged (no decay)") {
  auto p = Tensor::scalar(3.f);
  p.set_requires_grad(true);
  p.grad();  // allocated, zero
  AdamW::Settings s;
  s.weight_decay = 0.0;
  AdamW opt(s);
  opt.add_group({p}, {"p"}, 0.5);
  opt.step();
  CHECK(p.item() == 3.f);
}

TEST_CASE("adamw decoupled decay scales by (1 - lr*wd)") {
  auto p = Tensor::scalar(2.f);
  p.set_requires_grad(true);
  p.grad();
  AdamW::Settings s;
  s.weight_decay = 0.01;
  AdamW opt(s);
  opt.add_group({p}, {"p"}, 0.5);
  opt.step();
  CHECK(p.item() == doctest::Approx(2.f * (1.f - 0.5f * 0.01f)).epsilon(1e-6));
}

TEST_CASE("adamw rejects missing gradient naming the parameter") {
  auto p = Tensor::scalar(1.f);
  p.set_requires_grad(true);
  AdamW opt;
  opt.add_group({p}, {"encoder.w"}, 0.1);
  try {
    opt.step();
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("encoder.w") != std::string::npos);
  }
}

TEST_CASE("rng determinism and split independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.u64() == b.u64());
  Rng base(7);
  Rng c1 = base.split(1), c2 = base.split(2);
  CHECK(c1.u64() != c2.u64());
  // splitting twice with the same id reproduces the stream
  Rng c1b = base.split(1);
  c1 = base.split(1);
  CHECK(c1.u64() == c1b.u64());
}

TEST_CASE("registry rejects duplicate names") {
  ParamRegistry reg(0);
  reg.param_zeros("a", {2});
  CHECK_THROWS_AS(reg.param_zeros("a", {2}), std::invalid_argument);
}
