#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nesy/comm.hpp"

using namespace nesy;
using namespace nesy::comm;

namespace {

Message msg(std::initializer_list<double> v) {
  Message m;
  m.values = nn::Vec(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m.values(i++) = x;
  return m;
}

nn::Mlp identity_net(int k) {
  nn::Mlp net({k, k}, {nn::Activation::Identity});
  net.layers()[0].weight.setIdentity();
  return net;
}

// Single-node listener reading the first message component directly.
ListenerPolicy direct_listener() {
  ListenerPolicy l;
  l.readout = nn::Mlp({1, 1}, {nn::Activation::Identity});
  l.readout.layers()[0].weight(0, 0) = 1.0;
  return l;
}

double naive_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

}  // namespace

TEST_SUITE("comm") {
  TEST_CASE("power normalization") {
    const Message z = msg({1.0, -1.0});
    CHECK((encode(z.values, identity_net(2)).values - z.values).norm() <= 1e-15);
    Rng rng(1);
    for (int i = 0; i < 100; ++i) {
      const nn::Vec y = nn::Vec::Random(3) * 5.0;
      CHECK(std::abs(normalize_power(y).mean_square() - 1.0) <= 1e-9);
    }
    CHECK_THROWS_AS(normalize_power(nn::Vec::Zero(2)), std::domain_error);
  }

  TEST_CASE("hand-evaluated encoder") {
    nn::Mlp net({2, 2}, {nn::Activation::Tanh});
    net.layers()[0].weight << 1.0, 2.0, -1.0, 0.5;
    net.layers()[0].bias << 0.0, 0.1;
    const nn::Vec z = (nn::Vec(2) << 0.3, -0.2).finished();
    const double y0 = std::tanh(0.3 - 0.4), y1 = std::tanh(-0.3 - 0.1 + 0.1);
    const double scale = std::sqrt(2.0 / (y0 * y0 + y1 * y1));
    const Message m = encode(z, net);
    CHECK(m.values(0) == doctest::Approx(y0 * scale));
    CHECK(m.values(1) == doctest::Approx(y1 * scale));
  }

  TEST_CASE("normalization backward matches finite differences") {
    const nn::Vec y = (nn::Vec(3) << 0.4, -1.3, 0.7).finished();
    const nn::Vec g = (nn::Vec(3) << 1.0, 0.5, -2.0).finished();
    const nn::Vec analytic = normalize_power_backward(y, g);
    for (int i = 0; i < 3; ++i) {
      nn::Vec a = y, b = y;
      a(i) += 1e-6;
      b(i) -= 1e-6;
      const double fd = (g.dot(normalize_power(a).values) - g.dot(normalize_power(b).values)) / 2e-6;
      CHECK(analytic(i) == doctest::Approx(fd).epsilon(1e-6));
    }
  }

  TEST_CASE("gray code") {
    CHECK(gray_encode(0) == 0b00);
    CHECK(gray_encode(1) == 0b01);
    CHECK(gray_encode(2) == 0b11);
    CHECK(gray_encode(3) == 0b10);
    for (unsigned v = 0; v < 256; ++v) {
      CHECK(gray_decode(gray_encode(v)) == v);
      CHECK(__builtin_popcount(gray_encode(v) ^ gray_encode(v + 1)) == 1);
    }
  }

  TEST_CASE("quantizer frames and round trip") {
    const BitFrame f = quantize(msg({-1.5, -0.5, 0.5, 1.5}));
    CHECK(f.to_string() == "00011110");
    CHECK(f.size() == 8);
    CHECK((dequantize(f).values - msg({-1.5, -0.5, 0.5, 1.5}).values).norm() == 0.0);

    Rng rng(2);
    for (int i = 0; i < 1000; ++i) {
      const double v = 4.0 * uniform01(rng) - 2.0;
      const Message q = quantize_dequantize(msg({v}));
      CHECK(std::abs(q.values(0) - v) <= 0.5);
    }
    const BitFrame clamped = quantize(msg({3.0, -7.0}));
    CHECK(clamped.clamped == 2);
    CHECK(dequantize(clamped).values(0) == 1.5);
    CHECK(Quantizer{2}.worst_case_error() == doctest::Approx(0.25));
  }

  TEST_CASE("channel extremes and flip rate") {
    Rng rng(3);
    const BitFrame f = quantize(msg({-1.5, 0.5, 1.5}));
    CHECK(transmit(f, Channel(0.0), rng) == f);
    const BitFrame all = transmit(f, Channel(1.0), rng);
    CHECK(flipped_bits(f, all) == f.size());

    BitFrame big;
    big.dims = 50000;
    big.bits_per_dim = 2;
    big.bits.assign(100000, 0);
    const BitFrame out = transmit(big, Channel(0.1), rng);
    CHECK(std::abs(flipped_bits(big, out) / 100000.0 - 0.1) <= 0.003);
    CHECK_THROWS(Channel(1.5));
    CHECK_THROWS(Channel(-0.1));
  }

  TEST_CASE("shared uniforms couple channels") {
    const BitFrame f = quantize(msg({-1.5, 0.5, 1.5, -0.5}));
    const std::vector<double> u{0.01, 0.3, 0.07, 0.5, 0.15, 0.9, 0.04, 0.2};
    const BitFrame lo = transmit(f, Channel(0.05), u), hi = transmit(f, Channel(0.2), u);
    CHECK(flipped_bits(f, lo) == 2);
    CHECK(flipped_bits(f, hi) == 4);
    for (int i = 0; i < f.size(); ++i)
      if (lo.bits[i] != f.bits[i]) CHECK(hi.bits[i] != f.bits[i]);
  }

  TEST_CASE("identity-like decoder recovers the dequantized message") {
    const Message m = msg({-1.0, 1.0, 1.0});
    const BitFrame f = quantize(m, 1);
    CHECK((decode(f, identity_net(3)).values - dequantize(f).values).norm() == 0.0);
    CHECK_THROWS_AS(decode(f, identity_net(2)), std::invalid_argument);
    // A fully flipped frame decodes without error.
    Rng rng(4);
    CHECK_NOTHROW(decode(transmit(f, Channel(1.0), rng), identity_net(3)));
  }

  TEST_CASE("distortion") {
    CHECK(semantic_distortion(msg({0.3, 0.4}), msg({0.3, 0.4})) == 0.0);
    CHECK(semantic_distortion(msg({1.0, 0.0}), msg({0.0, 1.0})) == doctest::Approx(2.0));
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
      const Message a{nn::Vec::Random(4)}, b{nn::Vec::Random(4)};
      double s = 0;
      for (int j = 0; j < 4; ++j) s += (a.values(j) - b.values(j)) * (a.values(j) - b.values(j));
      CHECK(std::abs(semantic_distortion(a, b) - s) <= 1e-12);
    }
    CHECK_THROWS(semantic_distortion(msg({1.0}), msg({1.0, 2.0})));
  }

  TEST_CASE("kb information error") {
    CHECK(kb_information_error(2.5, 2.5) == 0.0);
    CHECK(kb_information_error(3.0, 1.0) == doctest::Approx(4.0));
    CHECK_THROWS_AS(kb_information_error(INFINITY, 1.0), kb::InfiniteContentError);
  }

  TEST_CASE("semantic similarity") {
    const Message m = msg({1.0, -1.0});
    CHECK(is_semantically_similar(m, m, 0.1, 2.0, 2.0));
    const double delta = 0.5;
    CHECK_FALSE(is_semantically_similar(m, msg({1.5, -1.0}), 2 * delta, 2.0, 1.0));
    // Distortion exactly delta counts as similar.
    CHECK(is_semantically_similar(m, msg({1.5, -1.5}), delta, 2.0, 2.0));
    CHECK_FALSE(is_semantically_similar(m, msg({1.5, -1.6}), delta, 2.0, 2.0));
  }

  TEST_CASE("semantic reliability") {
    const Message m = msg({1.0, -1.0});
    std::vector<Trial> perfect(4, Trial{m, m});
    CHECK(semantic_reliability(perfect, 0.1) == 1.0);
    std::vector<Trial> half = perfect;
    half[0].m_hat = half[1].m_hat = msg({-1.0, 1.0});
    CHECK(semantic_reliability(half, 0.1) == 0.5);
    CHECK_THROWS(semantic_reliability({}, 0.1));
    CHECK(default_delta(2) == doctest::Approx(1.25 * 2 * 0.25));
  }

  TEST_CASE("listener classification and ties") {
    const ListenerPolicy l = direct_listener();
    CHECK(listener_action(msg({0.5}), l) == std::vector<int>{2});
    CHECK(listener_action(msg({0.0}), l) == std::vector<int>{1});
    CHECK(listener_action(msg({-2.0}), l) == std::vector<int>{0});
    CHECK(listener_action(msg({9.0}), l) == std::vector<int>{3});
    for (int lv = 0; lv < 4; ++lv) CHECK(classify_level(level_midpoint(lv, 4), 4) == lv);
    CHECK(classify_level(-1.0, 4) == 0);
    CHECK(classify_level(1.0, 4) == 2);
  }

  TEST_CASE("listener distributions are normalized and peak at the action") {
    ListenerPolicy l = direct_listener();
    const auto d = l.distributions(msg({0.6}));
    REQUIRE(d.size() == 1);
    double s = 0;
    for (double x : d[0]) s += x;
    CHECK(s == doctest::Approx(1.0));
    CHECK(std::max_element(d[0].begin(), d[0].end()) - d[0].begin() == 2);
    l.node_gain = {2.0};
    CHECK(listener_action(msg({0.6}), l) == std::vector<int>{3});
  }

  TEST_CASE("joint distribution indexing") {
    const auto j = joint_distribution({{0.25, 0.75}, {0.5, 0.5}});
    REQUIRE(j.size() == 4);
    CHECK(j[1] == doctest::Approx(0.375));  // a0 = 1, a1 = 0
    CHECK(j[2] == doctest::Approx(0.125));  // a0 = 0, a1 = 1
  }

  TEST_CASE("kl divergence") {
    CHECK(kl_divergence({0.9, 0.1}, {0.5, 0.5}) == doctest::Approx(0.3681).epsilon(1e-4 / 0.3681));
    CHECK(std::abs(kl_divergence({0.9, 0.1}, {0.5, 0.5}) - 0.368064) < 1e-6);
    CHECK(kl_divergence({0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}) == 0.0);
    CHECK_THROWS_AS(kl_divergence({0.5, 0.5}, {1.0, 0.0}), InfiniteDivergenceError);
    CHECK(std::isfinite(kl_divergence({0.5, 0.5}, {1.0, 0.0}, 1e-9)));
    CHECK(kl_divergence({1.0, 0.0}, {0.5, 0.5}) == doctest::Approx(std::log(2.0)));
    Rng rng(6);
    for (int i = 0; i < 500; ++i) {
      std::vector<double> p(5), q(5);
      double sp = 0, sq = 0;
      for (int j = 0; j < 5; ++j) {
        sp += p[j] = uniform01(rng) + 1e-3;
        sq += q[j] = uniform01(rng) + 1e-3;
      }
      for (int j = 0; j < 5; ++j) p[j] /= sp, q[j] /= sq;
      const double kl = kl_divergence(p, q);
      CHECK(kl >= 0.0);
      CHECK(kl == doctest::Approx(naive_kl(p, q)).epsilon(1e-12));
    }
  }

  TEST_CASE("causal influence is zero on a clean channel with matched policies") {
    Rng rng(7);
    const ListenerPolicy l = direct_listener();
    const Message m = normalize_power((nn::Vec(1) << 0.3).finished());
    CHECK(causal_influence(m, Channel(0.0), l, l, identity_net(1), rng, 1) == doctest::Approx(0.0));
    CHECK(causal_influence(m, Channel(0.3), l, l, identity_net(1), rng, 1) > 0.0);
  }

  TEST_CASE("causal influence: exact marginal over corruptions") {
    // One bit; listener says (0.8, 0.2) on 0 and (0.1, 0.9) on 1. At p the
    // marginal for a sent 0 is (0.8(1-p) + 0.1p, 0.2(1-p) + 0.9p).
    const ListenerModel lm = [](const BitFrame& f) {
      return f.bits[0] ? std::vector<double>{0.1, 0.9} : std::vector<double>{0.8, 0.2};
    };
    BitFrame f;
    f.dims = 1;
    f.bits_per_dim = 1;
    f.bits = {0};
    Rng rng(8);
    const double p = 0.25;
    const std::vector<double> marg{0.8 * (1 - p) + 0.1 * p, 0.2 * (1 - p) + 0.9 * p};
    const std::vector<double> speaker{0.9, 0.1};
    CHECK(causal_influence(speaker, f, Channel(p), lm, rng) == doctest::Approx(naive_kl(speaker, marg)));

    InfluenceOptions mc;
    mc.exact_max_bits = 0;
    mc.monte_carlo_draws = 200000;
    CHECK(causal_influence(speaker, f, Channel(p), lm, rng, mc) ==
          doctest::Approx(naive_kl(speaker, marg)).epsilon(0.02));
  }

  TEST_CASE("kb perturbation scales entity groundings") {
    kb::KnowledgeBase base;
    kb::Grounding g;
    g.domain_dims["node"] = 2;
    base.add_symbol({"on", kb::SymbolKind::Predicate, {"node"}});
    g.truths["on"] = kb::ComponentTruth{0};
    for (const char* id : {"a", "b"}) {
      base.add_symbol({id, kb::SymbolKind::Entity, {"node"}});
      g.entities[id] = {1.0, 0.0};
      base.add_formula(kb::Formula::atom("on", {{id, {}}}));
    }
    const kb::Theory t(base, g);
    Rng rng(9);
    CHECK(perturb_theory(t, {0.0, 0.5}, rng) == t);
    const kb::Theory one = perturb_theory(t, {0.5, 0.5}, rng);
    CHECK(kb::semantic_content(one) == doctest::Approx(kb::semantic_content(t) + 1.0));
    const auto gains = formula_gains(t, one);
    CHECK(gains[0] * gains[1] == doctest::Approx(0.5));
    CHECK_THROWS(perturb_theory(t, {1.5, 0.5}, rng));
  }

  TEST_CASE("trace csv") {
    const auto path = std::filesystem::temp_directory_path() / "nesy_trace.csv";
    write_trace_csv({{3, "0110", 1, 0.25, {1, 2}, {1, 3}, false}}, path);
    std::ifstream is(path);
    std::stringstream ss;
    ss << is.rdbuf();
    const std::string text = ss.str();
    CHECK(text.rfind("event,bits,flipped,distortion,speaker_action,listener_action,similar\n", 0) == 0);
    CHECK(text.find("0110") != std::string::npos);
    CHECK(text.find("1 3") != std::string::npos);
    std::filesystem::remove(path);
  }
}
