#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "sdtc/error.hpp"
#include "sdtc/network.hpp"
#include "tiny_model.hpp"

using namespace sdtc;

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

ModelConfig fd001_like() {
  ModelConfig c;
  c.window_length = 28;
  c.channels = 16;
  c.filters = 64;
  c.conv_kernel = {1, 2};
  c.conv_stride = {1, 2};
  c.capsule_dim = 8;
  c.capsule_kernel = {1, 8};
  c.num_advanced = 2;
  c.advanced_dim = 16;
  c.lstm_units = 16;
  c.sequence_length = 5;
  return c;
}

// Walks the layer shapes with plain arithmetic, independent of ModelConfig's helpers.
std::size_t capsule_count_by_hand(std::size_t l, std::size_t ch, std::size_t m, std::size_t kh, std::size_t kw,
                                  std::size_t sh, std::size_t sw, std::size_t d, std::size_t bkh, std::size_t bkw,
                                  std::size_t bsh, std::size_t bsw) {
  const std::size_t h1 = (l - kh) / sh + 1, w1 = (ch - kw) / sw + 1;
  const std::size_t h2 = (h1 - bkh) / bsh + 1, w2 = (w1 - bkw) / bsw + 1;
  return h2 * w2 * (m / d);
}

Tensor predictions_tensor(const std::vector<std::vector<std::vector<double>>>& u) {
  const std::size_t in = u.size(), out = u[0].size(), d = u[0][0].size();
  Tensor t({in, out, d});
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t k = 0; k < d; ++k) t.at({i, j, k}) = u[i][j][k];
  return t;
}

}  // namespace

// ---- configuration and shapes ----------------------------------------------------------

TEST(ModelShapes, Fd001ConvolutionExtents) {
  const auto c = fd001_like();
  EXPECT_EQ(c.conv_output(), (Extent2{28, 8}));
  Tape tape;
  std::mt19937_64 rng(1);
  const auto p = init_parameters(c, rng);
  BoundParameters b(tape, p);
  auto maps = conv_features(c, b, tape.constant(Tensor({1, 28, 16, 1})));
  EXPECT_EQ(maps.shape(), (Shape{1, 28, 8, 64}));
}

TEST(ModelShapes, MillingConvolutionExtents) {
  ModelConfig c;
  c.window_length = 20;
  c.channels = 11;
  c.filters = 24;
  c.conv_kernel = {1, 3};
  c.conv_stride = {1, 3};
  c.capsule_dim = 3;
  c.capsule_channels = 8;
  c.capsule_kernel = {1, 3};
  c.capsule_stride = {1, 3};
  c.num_advanced = 5;
  c.advanced_dim = 6;
  EXPECT_EQ(c.conv_output(), (Extent2{20, 3}));
  EXPECT_EQ(c.num_basic_capsules(), 20u * 1u * 8u);
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelShapes, CapsuleCountMatchesShapeWalk) {
  const auto c = fd001_like();
  EXPECT_EQ(c.num_basic_capsules(), capsule_count_by_hand(28, 16, 64, 1, 2, 1, 2, 8, 1, 8, 1, 1));
  std::mt19937_64 rng(2);
  const auto p = init_parameters(c, rng);
  Tape tape;
  BoundParameters b(tape, p);
  auto basic = build_basic_capsules(c, b, conv_features(c, b, tape.constant(Tensor({2, 28, 16, 1}))));
  EXPECT_EQ(basic.shape(), (Shape{2, c.num_basic_capsules(), 8}));
}

TEST(ModelShapes, WorkedCapsuleCountFollowsArithmetic) {
  ModelConfig c;
  c.window_length = 28;
  c.channels = 28;
  c.filters = 64;
  c.capsule_dim = 4;
  c.capsule_kernel = {1, 1};
  c.num_advanced = 2;
  c.advanced_dim = 8;
  EXPECT_EQ(c.conv_output(), (Extent2{28, 14}));
  EXPECT_EQ(c.num_basic_capsules(), 6272u);
}

TEST(ModelShapes, SingleSpatialPositionGivesOneCapsule) {
  ModelConfig c;
  c.window_length = 1;
  c.channels = 2;
  c.filters = 8;
  c.capsule_dim = 8;
  c.num_advanced = 1;
  c.advanced_dim = 2;
  EXPECT_EQ(c.num_basic_capsules(), 1u);
}

TEST(ModelShapes, ValidationListsEveryProblem) {
  ModelConfig c = tiny::config();
  c.filters = 7;
  c.routing_iterations = 0;
  c.fnn[0].dropout = 1.5;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.problems().size(), 3u);
  }
  c = tiny::config();
  c.use_lstm = false;
  EXPECT_THROW(c.validate(), ConfigError);  // S must be 1 without the LSTM
  c.sequence_length = 1;
  EXPECT_NO_THROW(c.validate());
}

TEST(ModelShapes, JsonRoundTrip) {
  auto c = fd001_like();
  c.fnn = {{32, 0.1}};
  c.output_scale = 125.0;
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
}

// ---- squash ------------------------------------------------------------------------------

TEST(Squash, Examples) {
  EXPECT_EQ(squash(std::vector<double>{0.0, 0.0}), (std::vector<double>{0.0, 0.0}));
  const auto unit = squash(std::vector<double>{0.6, 0.8});
  EXPECT_NEAR(norm(unit), 0.5, 1e-11);
  EXPECT_NEAR(unit[0] / unit[1], 0.75, 1e-12);
  const auto v = squash(std::vector<double>{3.0, 4.0});
  EXPECT_NEAR(v[0], 15.0 / 26.0, 1e-12);
  EXPECT_NEAR(v[1], 20.0 / 26.0, 1e-12);
  EXPECT_NEAR(norm(v), 25.0 / 26.0, 1e-12);
}

TEST(Squash, NormBelowOneMonotoneAndParallel) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> scale(0.0, 10.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(1 + trial % 7);
    for (auto& x : s) x = g(rng) * scale(rng);
    const auto v = squash(s);
    const double ns = norm(s), nv = norm(v);
    EXPECT_LT(nv, 1.0);
    if (ns > 1e-6) {
      double dot = 0.0;
      for (std::size_t k = 0; k < s.size(); ++k) dot += s[k] * v[k];
      EXPECT_NEAR(dot / (ns * nv), 1.0, 1e-12);
    }
    std::vector<double> bigger = s;
    for (auto& x : bigger) x *= 1.1;
    if (ns > 1e-3 && ns < 1e3) {
      EXPECT_GT(norm(squash(bigger)), nv);
    }
  }
}

TEST(Squash, RecordedMatchesPlain) {
  std::mt19937_64 rng(13);
  const Tensor s = gradcheck::random_tensor({3, 5}, rng, -3, 3);
  Tape tape;
  const Tensor v = ad::squash(tape.constant(s)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    const auto ref = squash(std::span<const double>(s.data() + r * 5, 5));
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(v.at({r, k}), ref[k], 1e-15);
  }
}

// ---- routing -----------------------------------------------------------------------------

TEST(Routing, HandExampleOneBasicTwoAdvanced) {
  const Tensor u = predictions_tensor({{{2.0, 0.0}, {0.0, 1.0}}});
  const auto one = dynamic_routing(u, 1);
  EXPECT_NEAR(one.state.coupling[0], 0.5, 1e-15);
  EXPECT_NEAR(one.state.logits[0], 1.0, 1e-10);
  EXPECT_NEAR(one.state.logits[1], 0.2, 1e-10);
  const auto two = dynamic_routing(u, 2);
  EXPECT_NEAR(two.state.coupling[0], 0.6900, 1e-4);
  EXPECT_NEAR(two.state.coupling[1], 0.3100, 1e-4);
}

TEST(Routing, SingleAdvancedCapsuleCouplesFully) {
  std::mt19937_64 rng(14);
  const Tensor u = gradcheck::random_tensor({5, 1, 3}, rng);
  for (std::size_t r = 1; r <= 4; ++r) {
    const auto res = dynamic_routing(u, r);
    for (double c : res.state.coupling.values()) EXPECT_EQ(c, 1.0);
  }
}

TEST(Routing, FirstIterationIsUniformAndMatchesWeightedSquash) {
  std::mt19937_64 rng(15);
  const Tensor u = gradcheck::random_tensor({4, 3, 2}, rng);
  const auto res = dynamic_routing(u, 1);
  for (double c : res.state.coupling.values()) EXPECT_NEAR(c, 1.0 / 3.0, 1e-15);
  for (std::size_t j = 0; j < 3; ++j) {
    std::vector<double> s(2, 0.0);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < 2; ++k) s[k] += u.at({i, j, k}) / 3.0;
    const auto v = squash(s);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(res.outputs.at({j, k}), v[k], 1e-15);
  }
}

TEST(Routing, MatchesReferenceAndRowsSumToOne) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t in = 1 + trial % 6, out = 1 + trial % 4, d = 1 + trial % 3;
    std::vector<std::vector<std::vector<double>>> u(in, std::vector<std::vector<double>>(out, std::vector<double>(d)));
    std::normal_distribution<double> g;
    for (auto& a : u)
      for (auto& b : a)
        for (auto& x : b) x = g(rng);
    const auto ref = oracle::reference_routing(u, 3);
    const auto res = dynamic_routing(predictions_tensor(u), 3);
    for (std::size_t i = 0; i < in; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < out; ++j) {
        row += res.state.coupling.at({i, j});
        EXPECT_GT(res.state.coupling.at({i, j}), 0.0);
        EXPECT_NEAR(res.state.coupling.at({i, j}), ref.coupling[i][j], 1e-12);
        EXPECT_NEAR(res.state.logits.at({i, j}), ref.logits[i][j], 1e-12);
      }
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(res.outputs.at({j, k}), ref.outputs[j][k], 1e-12);
  }
}

TEST(Routing, DeterministicAndScaleProbe) {
  std::mt19937_64 rng(17);
  const Tensor u = gradcheck::random_tensor({6, 3, 4}, rng);
  EXPECT_EQ(dynamic_routing(u, 3).outputs, dynamic_routing(u, 3).outputs);
  auto argmax_norm = [](const Tensor& v) {
    std::size_t best = 0;
    double best_norm = -1.0;
    for (std::size_t j = 0; j < v.extent(0); ++j) {
      const double n = norm(std::span<const double>(v.data() + j * v.extent(1), v.extent(1)));
      if (n > best_norm) best_norm = n, best = j;
    }
    return best;
  };
  Tensor scaled = u;
  for (auto& x : scaled.values()) x *= 7.5;
  EXPECT_EQ(argmax_norm(dynamic_routing(u, 1).outputs), argmax_norm(dynamic_routing(scaled, 1).outputs));
}

TEST(Routing, Errors) {
  EXPECT_THROW(dynamic_routing(Tensor({2, 2}), 1), ShapeError);
  EXPECT_THROW(dynamic_routing(Tensor({1, 2, 2}), 0), ShapeError);
}

// ---- LSTM and head ---------------------------------------------------------------------

TEST(Lstm, ZeroParametersGiveZeroState) {
  ParameterSet p{{"lstm.input_weight", Tensor({3, 8})}, {"lstm.recurrent_weight", Tensor({2, 8})}, {"lstm.bias", Tensor({8})}};
  Tape tape;
  BoundParameters b(tape, p);
  std::mt19937_64 rng(18);
  auto h = lstm_forward(b, tape.constant(gradcheck::random_tensor({2, 4, 3}, rng)), 2);
  EXPECT_EQ(h.value(), Tensor({2, 2}));
}

TEST(Lstm, SingleCellSingleStepByHand) {
  ParameterSet p{{"lstm.input_weight", Tensor({1, 4}, {0.1, 0.2, 0.3, 0.4})},
                 {"lstm.recurrent_weight", Tensor({1, 4}, {0.5, 0.6, 0.7, 0.8})},
                 {"lstm.bias", Tensor({4}, {0.01, 0.02, 0.03, 0.04})}};
  Tape tape;
  BoundParameters b(tape, p);
  auto h = lstm_forward(b, tape.constant(Tensor({1, 1, 1}, {0.5})), 1);
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  const double i = sig(0.06), g = std::tanh(0.18), o = sig(0.24);
  EXPECT_NEAR(h.value().item(), o * std::tanh(i * g), 1e-12);
}

TEST(Lstm, TwoStepsByHand) {
  ParameterSet p{{"lstm.input_weight", Tensor({1, 4}, {0.1, 0.2, 0.3, 0.4})},
                 {"lstm.recurrent_weight", Tensor({1, 4}, {0.5, 0.6, 0.7, 0.8})},
                 {"lstm.bias", Tensor({4}, {0.01, 0.02, 0.03, 0.04})}};
  Tape tape;
  BoundParameters b(tape, p);
  auto h = lstm_forward(b, tape.constant(Tensor({1, 2, 1}, {0.5, -1.0})), 1);
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  double hv = 0.0, cv = 0.0;
  for (double x : {0.5, -1.0}) {
    const double i = sig(0.1 * x + 0.5 * hv + 0.01), f = sig(0.2 * x + 0.6 * hv + 0.02);
    const double g = std::tanh(0.3 * x + 0.7 * hv + 0.03), o = sig(0.4 * x + 0.8 * hv + 0.04);
    cv = f * cv + i * g;
    hv = o * std::tanh(cv);
  }
  EXPECT_NEAR(h.value().item(), hv, 1e-12);
}

TEST(Lstm, Fd001HiddenLength) {
  auto c = fd001_like();
  std::mt19937_64 rng(19);
  const auto p = init_parameters(c, rng);
  EXPECT_EQ(p.at("lstm.input_weight").shape(), (Shape{32, 64}));
  Tape tape;
  BoundParameters b(tape, p);
  auto h = lstm_forward(b, tape.constant(gradcheck::random_tensor({3, 5, 32}, rng)), 16);
  EXPECT_EQ(h.shape(), (Shape{3, 16}));
  EXPECT_THROW(lstm_forward(b, tape.constant(Tensor({3, 32})), 16), ShapeError);
}

TEST(Head, DefaultWidthsAndZeroWeights) {
  auto c = tiny::config();
  EXPECT_EQ(c.fnn, (std::vector<FnnLayer>{{200, 0.2}, {100, 0.2}}));
  std::mt19937_64 rng(20);
  auto p = init_parameters(c, rng);
  EXPECT_EQ(p.at("fnn.0.weight").shape(), (Shape{4, 200}));
  EXPECT_EQ(p.at("fnn.1.weight").shape(), (Shape{200, 100}));
  EXPECT_EQ(p.at("output.weight").shape(), (Shape{100, 1}));
  for (auto& [name, t] : p)
    if (name.starts_with("fnn.") || name == "output.weight") t = Tensor::zeros(t.shape());
  p["output.bias"] = Tensor::scalar(3.25);
  const auto y = predict(c, p, tiny::frames(3, c, rng));
  for (double v : y) EXPECT_EQ(v, 3.25);
}

TEST(Head, OutputScaleMultipliesTheFinalUnit) {
  auto c = tiny::config();
  std::mt19937_64 rng(21);
  const auto p = init_parameters(c, rng);
  const Tensor x = tiny::frames(2, c, rng);
  const auto base = predict(c, p, x);
  c.output_scale = 125.0;
  const auto scaled = predict(c, p, x);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(scaled[i], 125.0 * base[i], 1e-12 * std::abs(scaled[i]) + 1e-15);
}

TEST(Head, DropoutOnlyInTraining) {
  auto c = tiny::config();
  std::mt19937_64 rng(22);
  const auto p = init_parameters(c, rng);
  const Tensor x = tiny::frames(2, c, rng);
  EXPECT_EQ(predict(c, p, x), predict(c, p, x));
  Tape tape;
  BoundParameters b(tape, p);
  ForwardOptions train;
  train.mode = Mode::training;
  EXPECT_THROW(model_forward(tape, c, b, x, train), ShapeError);  // needs a random stream
  std::mt19937_64 drop(1);
  train.rng = &drop;
  const auto y = model_forward(tape, c, b, x, train).value();
  EXPECT_NE(std::vector<double>(y.values().begin(), y.values().end()), predict(c, p, x));
}

// ---- end to end -------------------------------------------------------------------------

TEST(ModelForward, TinySmoke) {
  const auto c = tiny::config();
  std::mt19937_64 rng(23);
  const auto p = init_parameters(c, rng);
  const Tensor x = tiny::frames(2, c, rng);
  const auto e = tiny::loss(c, p, x, {0.3, -0.2}, nullptr, true);
  EXPECT_TRUE(std::isfinite(e.loss));
  EXPECT_EQ(e.grads.size(), p.size());
  for (const auto& [name, g] : e.grads) {
    EXPECT_TRUE(g.all_finite()) << name;
    EXPECT_EQ(g.shape(), p.at(name).shape()) << name;
  }
  EXPECT_EQ(e.coupling.shape(), (Shape{6, c.num_basic_capsules(), 2}));
}

TEST(ModelForward, ShapeMismatchIsRejected) {
  const auto c = tiny::config();
  std::mt19937_64 rng(24);
  const auto p = init_parameters(c, rng);
  EXPECT_THROW(predict(c, p, Tensor({1, 3, 6, 5})), ShapeError);
  auto wrong = p;
  wrong["conv.kernel"] = Tensor({1, 3, 1, 8});
  EXPECT_THROW(check_parameters(c, wrong), ShapeError);
  wrong = p;
  wrong.erase("lstm.bias");
  EXPECT_THROW(check_parameters(c, wrong), ShapeError);
  EXPECT_NO_THROW(check_parameters(c, p));
}

TEST(ModelForward, NoCrossSampleState) {
  const auto c = tiny::config();
  std::mt19937_64 rng(25);
  const auto p = init_parameters(c, rng);
  const Tensor x = tiny::frames(3, c, rng);
  const auto y = predict(c, p, x);
  // Swap samples 0 and 2.
  Tensor swapped = x;
  const std::size_t per = x.size() / 3;
  std::copy(x.data(), x.data() + per, swapped.data() + 2 * per);
  std::copy(x.data() + 2 * per, x.data() + 3 * per, swapped.data());
  const auto ys = predict(c, p, swapped);
  EXPECT_EQ(ys[0], y[2]);
  EXPECT_EQ(ys[2], y[0]);
  EXPECT_EQ(ys[1], y[1]);
  // Duplicated batch.
  Tensor doubled({6, c.sequence_length, c.window_length, c.channels});
  std::copy(x.data(), x.data() + x.size(), doubled.data());
  std::copy(x.data(), x.data() + x.size(), doubled.data() + x.size());
  const auto yd = predict(c, p, doubled);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(yd[i], y[i]);
    EXPECT_EQ(yd[i + 3], y[i]);
  }
}

TEST(ModelForward, InitializationIsSeeded) {
  const auto c = tiny::config();
  std::mt19937_64 a(5), b(5), d(6);
  EXPECT_EQ(init_parameters(c, a), init_parameters(c, b));
  EXPECT_NE(init_parameters(c, a), init_parameters(c, d));
  std::mt19937_64 e(5);
  const auto p = init_parameters(c, e);
  for (std::size_t h = 0; h < 4; ++h) {
    EXPECT_EQ(p.at("lstm.bias")[h], 0.0);
    EXPECT_EQ(p.at("lstm.bias")[4 + h], 1.0);
  }
}

TEST(ModelForward, GradientMatchesFiniteDifferencesOnSampledCoordinates) {
  const auto c = tiny::config();
  std::mt19937_64 rng(26);
  const auto p = tiny::random_parameters(c, rng);
  const Tensor x = tiny::frames(2, c, rng);
  const std::vector<double> t{0.4, -0.1};
  const auto base = tiny::loss(c, p, x, t, nullptr, true);
  const auto frozen = base.coupling;
  const auto analytic = tiny::loss(c, p, x, t, &frozen, true);
  EXPECT_EQ(analytic.loss, base.loss);
  std::uniform_int_distribution<std::size_t> pick(0, 1u << 30);
  for (const auto& [name, value] : p) {
    for (int sample = 0; sample < 12; ++sample) {
      const std::size_t i = pick(rng) % value.size();
      auto plus = p, minus = p;
      plus[name][i] += 1e-5;
      minus[name][i] -= 1e-5;
      const double numeric =
          (tiny::loss(c, plus, x, t, &frozen, false).loss - tiny::loss(c, minus, x, t, &frozen, false).loss) / 2e-5;
      EXPECT_LT(gradcheck::relative_error(analytic.grads.at(name)[i], numeric), 1e-4) << name << "[" << i << "] " << analytic.grads.at(name)[i] << " vs " << numeric;
    }
  }
}

TEST(ModelForward, SingleRoutingIterationGradientNeedsNoFreezing) {
  // With one iteration the coefficients are uniform constants, so the live graph is the
  // exact function being differentiated.
  auto c = tiny::config();
  c.routing_iterations = 1;
  c.fnn = {{6, 0.0}};
  std::mt19937_64 rng(27);
  const auto p = tiny::random_parameters(c, rng);
  const Tensor x = tiny::frames(2, c, rng);
  const std::vector<double> t{0.4, -0.1};
  const auto analytic = tiny::loss(c, p, x, t, nullptr, true);
  for (const auto& [name, value] : p) {
    for (std::size_t i = 0; i < value.size(); i += 1 + value.size() / 10) {
      auto plus = p, minus = p;
      plus[name][i] += 1e-5;
      minus[name][i] -= 1e-5;
      const double numeric =
          (tiny::loss(c, plus, x, t, nullptr, false).loss - tiny::loss(c, minus, x, t, nullptr, false).loss) / 2e-5;
      EXPECT_LT(gradcheck::relative_error(analytic.grads.at(name)[i], numeric), 1e-4) << name << "[" << i << "] " << analytic.grads.at(name)[i] << " vs " << numeric;
    }
  }
}
