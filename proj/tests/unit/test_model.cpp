#include <doctest.h>

#include <cmath>
#include <map>

#include "freqcoda/model.hpp"
#include "freqcoda/quant.hpp"
#include "unit/helpers.hpp"

using namespace freqcoda;

namespace {

ResNetConfig small(std::uint64_t seed = 1) {
  ResNetConfig c;
  c.depth_blocks = {1, 1};
  c.base_width = 4;
  c.num_classes = 3;
  c.seed = seed;
  return c;
}

double weighted_sum(const Tensor& t, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += static_cast<double>(t[i]) * w[i];
  return s;
}

class MeanVarSource final : public NormStatsSource {
 public:
  nn::ChannelStats<float> stats_for(std::size_t, const Tensor& input) override {
    ++calls;
    return nn::channel_stats(input);
  }
  int calls = 0;
};

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("layer inventory of the default depth") {
    ModelGraph m(ResNetConfig{});
    CHECK(m.bn_layers().size() == 7);
    CHECK(m.conv_layers().size() == 9);
    CHECK(m.stem().name == "stem");
    CHECK(m.head().weight.dims() == Dims{10, 64});
    const Tensor out = m.forward(Tensor({2, 3, 32, 32}));
    CHECK(out.dims() == Dims{2, 10});
  }

  TEST_CASE("seeded initialisation is reproducible") {
    ModelGraph a(small(5)), b(small(5)), c(small(6));
    CHECK(testutil::max_abs_diff(a.stem().weight, b.stem().weight) == 0.0);
    CHECK(testutil::max_abs_diff(a.stem().weight, c.stem().weight) > 0.0);
  }

  TEST_CASE("construction errors") {
    ResNetConfig c = small();
    c.depth_blocks = {};
    CHECK_THROWS_AS(ModelGraph{c}, InvalidArgument);
    c = small();
    c.num_classes = 1;
    CHECK_THROWS_AS(ModelGraph{c}, InvalidArgument);
    ModelGraph m(small());
    CHECK_THROWS_AS(m.forward(Tensor({1, 1, 8, 8})), InvalidShape);
    CHECK_THROWS_AS(m.backward(Tensor({1, 3})), InvalidState);
  }

  TEST_CASE("BN modes and running statistics") {
    ModelGraph m(small());
    const Tensor x = testutil::random_tensor({4, 3, 8, 8}, 2, 0.0, 2.0);
    const Tensor before = m.bn_layers()[0]->running_mean;
    m.forward(x, {BnMode::eval});
    CHECK(testutil::max_abs_diff(before, m.bn_layers()[0]->running_mean) == 0.0);
    m.forward(x, {BnMode::batch_stats});
    CHECK(testutil::max_abs_diff(before, m.bn_layers()[0]->running_mean) == 0.0);
    const Tensor bs = m.forward(x, {BnMode::batch_stats});
    MeanVarSource src;
    ForwardOptions ext{BnMode::external, &src};
    const Tensor ex = m.forward(x, ext);
    CHECK(src.calls == 5);
    CHECK(testutil::max_abs_diff(bs, ex) <= 1e-6);
    m.forward(x, {BnMode::train});
    CHECK(testutil::max_abs_diff(before, m.bn_layers()[0]->running_mean) > 0.0);
    CHECK_THROWS_AS(m.forward(x, {BnMode::external}), InvalidArgument);
  }

  TEST_CASE("input gradient matches a directional finite difference") {
    for (BnMode mode : {BnMode::eval, BnMode::batch_stats}) {
      ModelGraph m(small(3));
      const Tensor x = testutil::random_tensor({3, 3, 8, 8}, 11);
      const Tensor r = testutil::random_tensor({3, 3}, 12);
      const Tensor dir = testutil::random_tensor({3, 3, 8, 8}, 13);
      m.forward(x, {mode, nullptr, true});
      const Tensor gx = m.backward(r, false);
      const double analytic = weighted_sum(gx, dir);
      const double h = 1e-4;  // ReLU kinks are dense; larger steps cross them
      Tensor xp = x, xm = x;
      for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] += static_cast<float>(h * dir[i]);
        xm[i] -= static_cast<float>(h * dir[i]);
      }
      const double numeric = (weighted_sum(m.forward(xp, {mode}), r) - weighted_sum(m.forward(xm, {mode}), r)) / (2 * h);
      CHECK(testutil::rel_err(analytic, numeric) <= 2e-2);
    }
  }

  TEST_CASE("parameter gradients match directional finite differences") {
    ModelGraph m(small(4));
    const Tensor x = testutil::random_tensor({4, 3, 8, 8}, 21);
    const Tensor r = testutil::random_tensor({4, 3}, 22);
    m.zero_grad();
    m.forward(x, {BnMode::batch_stats, nullptr, true});
    m.backward(r);
    for (const ParamRef& p : m.parameters()) {
      if (p.value.size() < 2) continue;
      std::vector<float> dir(p.value.size());
      std::mt19937_64 rng(p.value.size());
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      double analytic = 0.0;
      for (std::size_t i = 0; i < dir.size(); ++i) {
        dir[i] = static_cast<float>(u(rng));
        analytic += static_cast<double>(dir[i]) * p.grad[i];
      }
      const std::vector<float> saved(p.value.begin(), p.value.end());
      const double h = 1e-4;  // ReLU kinks are dense; larger steps cross them
      auto eval_at = [&](double sign) {
        for (std::size_t i = 0; i < dir.size(); ++i) p.value[i] = saved[i] + static_cast<float>(sign * h * dir[i]);
        return weighted_sum(m.forward(x, {BnMode::batch_stats}), r);
      };
      const double numeric = (eval_at(1.0) - eval_at(-1.0)) / (2 * h);
      std::copy(saved.begin(), saved.end(), p.value.begin());
      INFO(p.name);
      CHECK(std::abs(analytic - numeric) <= 2e-2 * std::max(1.0, std::abs(numeric)));
    }
  }

  TEST_CASE("state export and import round-trip") {
    ModelGraph a(small(7));
    quant::wrap_quantized(a, 4);
    a.forward(testutil::random_tensor({2, 3, 8, 8}, 1), {BnMode::train});
    ModelGraph b(small(8));
    quant::wrap_quantized(b, 4);
    b.import_state(a.export_state());
    const Tensor x = testutil::random_tensor({2, 3, 8, 8}, 2);
    CHECK(testutil::max_abs_diff(a.forward(x), b.forward(x)) == 0.0);

    auto state = a.export_state();
    state.pop_back();
    CHECK_THROWS_AS(b.import_state(state), FormatError);
    state = a.export_state();
    state[0].value = Tensor({1});
    CHECK_THROWS_AS(b.import_state(state), FormatError);
  }

  TEST_CASE("first non-finite layer is reported") {
    ModelGraph m(small());
    const Tensor x = testutil::random_tensor({2, 3, 8, 8}, 3);
    m.forward(x, {BnMode::eval, nullptr, false, true});
    CHECK(m.first_nonfinite_layer().empty());
    m.bn_layers()[1]->gamma[0] = std::numeric_limits<float>::infinity();
    m.forward(x, {BnMode::eval, nullptr, false, true});
    CHECK(m.first_nonfinite_layer() == m.bn_layers()[1]->name);
  }

  TEST_CASE("one backward leaves every gradient finite and every layer touched") {
    ModelGraph m(ResNetConfig{});
    quant::wrap_quantized(m, 2);
    const Tensor x = testutil::random_tensor({4, 3, 32, 32}, 5, 0.0, 1.0);
    m.zero_grad();
    const Tensor logits = m.forward(x, {BnMode::train, nullptr, true});
    m.backward(testutil::random_tensor(logits.dims(), 6));
    std::map<std::string, bool> touched;
    for (const ParamRef& p : m.parameters()) {
      const std::string layer = p.name.substr(0, p.name.rfind('.'));
      for (float g : p.grad) {
        CHECK(std::isfinite(g));
        if (g != 0.0f) touched[layer] = true;
      }
      touched.try_emplace(layer, false);
    }
    for (const auto& [layer, any] : touched) {
      INFO(layer);
      CHECK(any);
    }
  }

  TEST_CASE("forward is deterministic") {
    ModelGraph m(small());
    const Tensor x = testutil::random_tensor({3, 3, 8, 8}, 8);
    CHECK(testutil::max_abs_diff(m.forward(x), m.forward(x)) == 0.0);
    CHECK(testutil::max_abs_diff(m.forward(x, {BnMode::batch_stats}), m.forward(x, {BnMode::batch_stats})) == 0.0);
  }

  TEST_CASE("zero_grad clears accumulated gradients") {
    ModelGraph m(small());
    const Tensor x = testutil::random_tensor({2, 3, 8, 8}, 3);
    m.forward(x, {BnMode::train, nullptr, true});
    m.backward(testutil::random_tensor({2, 3}, 4));
    m.zero_grad();
    for (const ParamRef& p : m.parameters())
      for (float g : p.grad) CHECK(g == 0.0f);
  }
}
