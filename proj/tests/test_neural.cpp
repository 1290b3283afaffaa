#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "nesy/neural.hpp"

using namespace nesy;
using namespace nesy::nn;

namespace {

// 2-2-1 tanh net with hand-set weights.
Mlp hand_net() {
  Mlp net({2, 2, 1}, {Activation::Tanh, Activation::Identity});
  net.layers()[0].weight << 0.5, -1.0, 0.25, 2.0;
  net.layers()[0].bias << 0.1, -0.2;
  net.layers()[1].weight << 1.5, -0.5;
  net.layers()[1].bias << 0.3;
  return net;
}

}  // namespace

TEST_SUITE("neural") {
  TEST_CASE("zero net gives zero output") {
    Mlp net({3, 4, 2}, {Activation::Identity, Activation::Identity});
    CHECK(forward(net, Vec::Constant(3, 1.7)).isZero());
  }

  TEST_CASE("identity layer passes input through") {
    Mlp net({3, 3}, {Activation::Identity});
    net.layers()[0].weight.setIdentity();
    const Vec x = (Vec(3) << 1.0, -2.0, 0.5).finished();
    CHECK((forward(net, x) - x).norm() == 0.0);
  }

  TEST_CASE("hand-evaluated forward pass") {
    const Vec x = (Vec(2) << 0.8, -0.3).finished();
    const double h0 = std::tanh(0.5 * 0.8 - 1.0 * -0.3 + 0.1);
    const double h1 = std::tanh(0.25 * 0.8 + 2.0 * -0.3 - 0.2);
    const double y = 1.5 * h0 - 0.5 * h1 + 0.3;
    CHECK(std::abs(forward(hand_net(), x)(0) - y) <= 1e-12);
  }

  TEST_CASE("hand-evaluated backward pass") {
    const Vec x = (Vec(2) << 0.8, -0.3).finished();
    const Mlp net = hand_net();
    const double a0 = 0.5 * 0.8 - 1.0 * -0.3 + 0.1;
    const double h0 = std::tanh(a0);
    const auto g = backward(net, x, Vec::Ones(1));
    CHECK(g.params.weight[1](0, 0) == doctest::Approx(h0));
    CHECK(g.params.bias[1](0) == doctest::Approx(1.0));
    CHECK(g.params.bias[0](0) == doctest::Approx(1.5 * (1 - h0 * h0)));
    CHECK(g.params.weight[0](0, 1) == doctest::Approx(1.5 * (1 - h0 * h0) * -0.3));
  }

  TEST_CASE("zero upstream gives zero gradients") {
    Rng rng(1);
    const Mlp net = Mlp::glorot({4, 5, 3}, {Activation::Tanh, Activation::Sigmoid}, rng);
    const auto g = backward(net, Vec::Random(4), Vec::Zero(3));
    CHECK(flatten(g.params).isZero());
    CHECK(g.input.isZero());
  }

  TEST_CASE("adam leaves parameters alone on zero gradients") {
    Rng rng(2);
    Mlp net = Mlp::glorot({3, 4, 2}, {Activation::Tanh, Activation::Identity}, rng);
    const Vec before = net.parameters();
    Adam opt(net, {0.1});
    for (int i = 0; i < 5; ++i) opt.step(net, net.zero_gradients());
    CHECK((net.parameters() - before).norm() == 0.0);
  }

  TEST_CASE("adam minimizes a scalar quadratic") {
    // Single bias parameter x; loss (x - 3)^2.
    Mlp net({1, 1}, {Activation::Identity});
    Adam opt(net, {0.05});
    int steps = 0;
    for (; steps < 500; ++steps) {
      const double x = net.layers()[0].bias(0);
      auto g = net.zero_gradients();
      g.bias[0](0) = 2.0 * (x - 3.0);
      opt.step(net, g);
    }
    CHECK(std::abs(net.layers()[0].bias(0) - 3.0) <= 1e-3);
  }

  TEST_CASE("adam rejects non-finite gradients and keeps its state") {
    Rng rng(3);
    Mlp net = Mlp::glorot({2, 2}, {Activation::Tanh}, rng);
    Adam opt(net, {0.1});
    auto g = net.zero_gradients();
    g.weight[0](0, 0) = 1.0;
    opt.step(net, g);
    const Vec before = net.parameters();
    auto bad = g;
    bad.bias[0](1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(opt.step(net, bad), std::domain_error);
    CHECK((net.parameters() - before).norm() == 0.0);
    CHECK(opt.steps() == 1);
  }

  TEST_CASE("gradient check is exact for linear nets") {
    Rng rng(4);
    const Mlp net = Mlp::glorot({3, 4, 2}, {Activation::Identity, Activation::Identity}, rng);
    const auto r = gradient_check(net, linear_loss(Vec::Ones(2)), Vec::Random(3));
    CHECK(r.comparable);
    CHECK(r.max_relative_error <= 1e-10);
  }

  TEST_CASE("gradient check on random smooth nets") {
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
      const Mlp net = Mlp::glorot({4, 6, 5, 2}, {Activation::Tanh, Activation::Sigmoid, Activation::Identity}, rng);
      const auto r = gradient_check(net, squared_error_loss(Vec::Random(2)), Vec::Random(4));
      CHECK(r.max_relative_error <= 1e-4);
    }
  }

  TEST_CASE("relu kink is flagged as not comparable") {
    Mlp net({1, 1, 1}, {Activation::Relu, Activation::Identity});
    net.layers()[0].weight(0, 0) = 1.0;
    net.layers()[1].weight(0, 0) = 1.0;
    const auto r = gradient_check(net, linear_loss(Vec::Ones(1)), Vec::Zero(1));
    CHECK_FALSE(r.comparable);
  }

  TEST_CASE("layer size and activation mismatches are rejected") {
    CHECK_THROWS(Mlp({2, 3}, {Activation::Tanh, Activation::Tanh}));
    CHECK_THROWS(forward(hand_net(), Vec::Zero(3)));
  }

  TEST_CASE("checkpoint round trip") {
    Rng rng(6);
    const Mlp a = Mlp::glorot({3, 4, 2}, {Activation::Tanh, Activation::Identity}, rng);
    const Mlp b = Mlp::glorot({2, 1}, {Activation::Sigmoid}, rng);
    const auto path = std::filesystem::temp_directory_path() / "nesy_ckpt_roundtrip.bin";
    save_checkpoint({{"a", a}, {"b", b}}, path);
    const auto back = load_checkpoint(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].first == "a");
    CHECK(back[0].second == a);
    CHECK(back[1].second == b);
    CHECK(std::filesystem::file_size(path) == 8 * (a.parameter_count() + b.parameter_count()));
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".json");
  }
}
