#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "bat/checkpoint.hpp"
#include "bat/tensor.hpp"
#include "test_util.hpp"

using namespace bat;
using bat_test::rand_leaf;
using bat_test::rand_leaf_off_kink;
using bat_test::rand_vec;

namespace {

DiffTensor sum_of(const DiffTensor& t) { return sum_all(t); }

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto eye = constant({2, 2}, {1, 0, 0, 1});
  auto m = constant({2, 2}, {2, 3, 4, 5});
  auto r = matmul(eye, m);
  CHECK(r.values()[0] == 2.0);
  CHECK(r.values()[1] == 3.0);
  CHECK(r.values()[2] == 4.0);
  CHECK(r.values()[3] == 5.0);

  auto a = constant({1, 2}, {1, 2});
  auto b = constant({2, 1}, {3, 4});
  CHECK(matmul(a, b).values()[0] == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul gradient matches finite differences within 1e-6") {
  std::mt19937_64 rng(7);
  auto a = rand_leaf({3, 4}, rng);
  auto b = rand_leaf({4, 2}, rng);
  auto report = grad_check(
      [](const std::vector<DiffTensor>& in) { return sum_of(matmul(in[0], in[1])); },
      {a, b}, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = constant({2, 3}, rand_vec(6, *new std::mt19937_64(1)));
  auto b = constant({4, 2}, rand_vec(8, *new std::mt19937_64(2)));
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("batched matmul and matmul_nt gradients") {
  std::mt19937_64 rng(11);
  auto a = rand_leaf({2, 3, 4}, rng);
  auto b = rand_leaf({2, 4, 5}, rng);
  CHECK(grad_check([](const std::vector<DiffTensor>& in) { return sum_of(matmul(in[0], in[1])); },
                   {a, b}, 1e-5, 1e-6)
            .pass);
  auto c = rand_leaf({2, 5, 4}, rng);
  CHECK(grad_check(
            [](const std::vector<DiffTensor>& in) { return sum_of(matmul_nt(in[0], in[1])); },
            {a, c}, 1e-5, 1e-6)
            .pass);
}

TEST_CASE("softmax examples") {
  auto sym = softmax(constant({2}, {0, 0}), 0);
  CHECK(sym.values()[0] == doctest::Approx(0.5).epsilon(1e-14));

  auto big = softmax(constant({3}, {1000, 1000, 1000}), 0);
  for (double v : big.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

  // direct evaluation oracle for [1, 2, 3]
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double z = e1 + e2 + e3;
  auto s = softmax(constant({3}, {1, 2, 3}), 0);
  CHECK(s.values()[0] == doctest::Approx(e1 / z).epsilon(1e-14));
  CHECK(s.values()[1] == doctest::Approx(e2 / z).epsilon(1e-14));
  CHECK(s.values()[2] == doctest::Approx(e3 / z).epsilon(1e-14));
  CHECK(s.values()[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(s.values()[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(s.values()[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax slices sum to one within 1e-12 for any finite input") {
  std::mt19937_64 rng(3);
  for (int it = 0; it < 20; ++it) {
    Shape shape{2 + static_cast<int>(rng() % 3), 3, 2 + static_cast<int>(rng() % 4)};
    auto x = rand_leaf(shape, rng, -50, 50);
    for (int axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      const int len = shape[static_cast<std::size_t>(axis)];
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
      for (int i = axis + 1; i < 3; ++i) inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          double sum = 0;
          for (int l = 0; l < len; ++l)
            sum += y.values()[o * static_cast<std::size_t>(len) * inner +
                              static_cast<std::size_t>(l) * inner + in];
          CHECK(std::abs(sum - 1.0) < 1e-12);
        }
      }
    }
  }
  CHECK_THROWS_AS(softmax(constant({2}, {0, 1}), 3), DimensionError);
}

TEST_CASE("layer_norm examples") {
  auto g = constant({4}, {1, 1, 1, 1});
  auto b = constant({4}, {0, 0, 0, 0});
  auto flat = layer_norm(constant({4}, {5, 5, 5, 5}), g, b);
  for (double v : flat.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  auto g2 = constant({2}, {1, 1});
  auto b2 = constant({2}, {0, 0});
  auto two = layer_norm(constant({2}, {1, 3}), g2, b2);
  CHECK(two.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(two.values()[1] == doctest::Approx(1.0).epsilon(1e-4));

  CHECK_THROWS_AS(layer_norm(constant({3}, {1, 2, 3}), g2, b2), DimensionError);
}

TEST_CASE("layer_norm gradient vs finite differences on random 2x8") {
  std::mt19937_64 rng(23);
  auto x = rand_leaf({2, 8}, rng);
  auto g = rand_leaf({8}, rng, 0.5, 1.5);
  auto b = rand_leaf({8}, rng);
  auto report = grad_check(
      [](const std::vector<DiffTensor>& in) {
        // weight the outputs so the gradient is not row-uniform
        auto y = layer_norm(in[0], in[1], in[2]);
        return sum_of(mul(y, in[3]));
      },
      {x, g, b, rand_leaf({2, 8}, rng)}, 1e-5, 1e-4);
  CHECK(report.pass);
}

TEST_CASE("layer_norm normalized slices have mean within 1e-10 of zero") {
  std::mt19937_64 rng(29);
  auto ones = constant({6}, std::vector<double>(6, 1.0));
  auto zero = zeros({6});
  for (int it = 0; it < 10; ++it) {
    auto x = rand_leaf({5, 6}, rng, -10, 10);
    auto y = layer_norm(x, ones, zero);
    for (int r = 0; r < 5; ++r) {
      double mean = 0;
      for (int j = 0; j < 6; ++j) mean += y.at({r, j});
      CHECK(std::abs(mean / 6.0) < 1e-10);
    }
  }
}

TEST_CASE("masked_pool examples") {
  auto x = constant({3}, {1, 2, 3});
  auto all = constant({3}, {1, 1, 1});
  CHECK(masked_pool(x, all, {0}, PoolMode::kMean).scalar() == doctest::Approx(2.0));

  auto x2 = constant({3}, {1, 9, 3});
  auto m2 = constant({3}, {1, 0, 1});
  CHECK(masked_pool(x2, m2, {0}, PoolMode::kMax).scalar() == doctest::Approx(3.0));

  auto x3 = constant({3}, {2, 4, 100});
  auto m3 = constant({3}, {1, 1, 0});
  CHECK(masked_pool(x3, m3, {0}, PoolMode::kMean).scalar() == doctest::Approx(3.0));

  auto none = constant({3}, {0, 0, 0});
  CHECK_THROWS_AS(masked_pool(x, none, {0}, PoolMode::kMean), DegenerateError);
}

TEST_CASE("masked_pool ignores values stored at masked positions") {
  std::mt19937_64 rng(31);
  for (int it = 0; it < 25; ++it) {
    Shape shape{3, 4, 5};
    auto base_vals = rand_vec(60, rng);
    std::vector<double> mask_vals(12);
    for (auto& m : mask_vals) m = (rng() % 3) ? 1.0 : 0.0;
    // keep at least one unmasked element per pooled slice (pool over axes 1)
    for (int b = 0; b < 3; ++b) {
      bool any = false;
      for (int t = 0; t < 4; ++t) any = any || mask_vals[static_cast<std::size_t>(b * 4 + t)] > 0;
      if (!any) mask_vals[static_cast<std::size_t>(b * 4)] = 1.0;
    }
    auto mask = constant({3, 4, 1}, mask_vals);

    auto fuzzed_vals = base_vals;
    for (int b = 0; b < 3; ++b)
      for (int t = 0; t < 4; ++t)
        if (mask_vals[static_cast<std::size_t>(b * 4 + t)] == 0.0)
          for (int e = 0; e < 5; ++e)
            fuzzed_vals[static_cast<std::size_t>((b * 4 + t) * 5 + e)] = 1e6 * (1 + it);

    for (auto mode : {PoolMode::kMean, PoolMode::kMax}) {
      auto y0 = masked_pool(constant({3, 4, 5}, base_vals), mask, {1}, mode);
      auto y1 = masked_pool(constant({3, 4, 5}, fuzzed_vals), mask, {1}, mode);
      for (std::size_t i = 0; i < y0.size(); ++i) {
        if (mode == PoolMode::kMax) {
          CHECK(y0.values()[i] == y1.values()[i]);  // bit-identical
        } else {
          CHECK(std::abs(y0.values()[i] - y1.values()[i]) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("grad_check on sum of squares is exact") {
  auto x = leaf({2}, {1, 2});
  auto report = grad_check(
      [](const std::vector<DiffTensor>& in) { return sum_of(mul(in[0], in[0])); }, {x}, 1e-5,
      1e-8);
  CHECK(report.pass);
  // analytic gradient is [2, 4]
  auto y = sum_of(mul(x, x));
  x.zero_grad();
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("every differentiable op passes grad_check across seeds") {
  const double eps = 1e-5, tol = 1e-4;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    auto a = rand_leaf({3, 4}, rng);
    auto b = rand_leaf({3, 4}, rng);
    auto w = rand_leaf({4, 5}, rng);
    auto bias = rand_leaf({5}, rng);
    auto weights = constant({3, 5}, rand_vec(15, rng));

    auto check = [&](const std::string& name, auto&& f, std::vector<DiffTensor> inputs) {
      auto report = grad_check(f, inputs, eps, tol);
      INFO(name << " seed " << seed << " worst " << report.worst);
      CHECK(report.pass);
    };

    check("add", [](const std::vector<DiffTensor>& in) { return sum_of(add(in[0], in[1])); },
          {a, b});
    check("sub", [](const std::vector<DiffTensor>& in) { return sum_of(sub(in[0], in[1])); },
          {a, b});
    check("mul", [](const std::vector<DiffTensor>& in) { return sum_of(mul(in[0], in[1])); },
          {a, b});
    check("scale", [](const std::vector<DiffTensor>& in) { return sum_of(scale(in[0], -2.5)); },
          {a});
    check("linear",
          [&](const std::vector<DiffTensor>& in) {
            return sum_of(mul(linear(in[0], in[1], in[2]), weights));
          },
          {a, w, bias});
    check("relu",
          [](const std::vector<DiffTensor>& in) { return sum_of(relu(in[0])); },
          {rand_leaf_off_kink({3, 4}, rng)});
    check("clamp_min",
          [](const std::vector<DiffTensor>& in) { return sum_of(clamp_min(in[0], 0.0)); },
          {rand_leaf_off_kink({3, 4}, rng)});
    auto w34 = constant({3, 4}, rand_vec(12, rng));
    check("softmax",
          [&](const std::vector<DiffTensor>& in) {
            return sum_of(mul(softmax(in[0], 1), w34));
          },
          {a});
    check("log_softmax",
          [&](const std::vector<DiffTensor>& in) {
            return sum_of(mul(log_softmax(in[0], 0), w34));
          },
          {a});
    {
      auto g = rand_leaf({4}, rng, 0.5, 1.5);
      auto lb = rand_leaf({4}, rng);
      check("layer_norm",
            [&](const std::vector<DiffTensor>& in) {
              return sum_of(mul(layer_norm(in[0], in[1], in[2]), w34));
            },
            {a, g, lb});
    }
    check("concat",
          [](const std::vector<DiffTensor>& in) {
            std::vector<DiffTensor> parts{in[0], in[1]};
            return sum_of(concat(parts, 1));
          },
          {a, b});
    auto w43 = constant({4, 3}, rand_vec(12, rng));
    auto w26 = constant({2, 6}, rand_vec(12, rng));
    auto w345 = constant({3, 4, 5}, rand_vec(60, rng));
    auto w45 = constant({4, 5}, rand_vec(20, rng));
    check("permute",
          [&](const std::vector<DiffTensor>& in) {
            return sum_of(mul(permute(in[0], {1, 0}), w43));
          },
          {a});
    check("reshape",
          [&](const std::vector<DiffTensor>& in) {
            return sum_of(mul(reshape(in[0], {2, 6}), w26));
          },
          {a});
    check("expand",
          [&](const std::vector<DiffTensor>& in) {
            return sum_of(mul(expand(in[0], {3, 4, 5}), w345));
          },
          {rand_leaf({3, 1, 5}, rng)});
    check("gather_rows",
          [&](const std::vector<DiffTensor>& in) {
            return sum_of(mul(gather_rows(in[0], {0, 2, 2, 1}), w45));
          },
          {rand_leaf({3, 5}, rng)});
    check("select_index",
          [](const std::vector<DiffTensor>& in) {
            return sum_of(select_index(in[0], {1, 3, 0}));
          },
          {a});
    {
      std::vector<double> mvals{1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0};
      auto mask = constant({3, 4}, mvals);
      check("masked_pool mean",
            [&](const std::vector<DiffTensor>& in) {
              return sum_of(masked_pool(in[0], mask, {1}, PoolMode::kMean));
            },
            {a});
      check("masked_pool max",
            [&](const std::vector<DiffTensor>& in) {
              return sum_of(masked_pool(in[0], mask, {1}, PoolMode::kMax));
            },
            {rand_leaf({3, 4}, rng)});
    }
    check("dropout",
          [&seed](const std::vector<DiffTensor>& in) {
            std::mt19937_64 drop_rng(seed * 977);
            return sum_of(dropout(in[0], 0.3, drop_rng, true));
          },
          {a});
  }
}

TEST_CASE("dropout determinism, scaling and eval identity") {
  std::mt19937_64 rng(5);
  auto x = rand_leaf({50}, rng, 0.5, 1.5);
  std::mt19937_64 r1(42), r2(42);
  auto y1 = dropout(x, 0.4, r1, true);
  auto y2 = dropout(x, 0.4, r2, true);
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y1.values()[i] == y2.values()[i]);
  // kept entries are scaled by 1/(1-p)
  int kept = 0;
  for (std::size_t i = 0; i < y1.size(); ++i) {
    if (y1.values()[i] != 0.0) {
      ++kept;
      CHECK(y1.values()[i] == doctest::Approx(x.values()[i] / 0.6).epsilon(1e-12));
    }
  }
  CHECK(kept > 0);
  std::mt19937_64 r3(42);
  auto eval = dropout(x, 0.4, r3, false);
  for (std::size_t i = 0; i < eval.size(); ++i) CHECK(eval.values()[i] == x.values()[i]);
  CHECK_THROWS_AS(dropout(x, 1.0, r3, true), ArgumentError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::mt19937_64 rng(13);
  ParamBlobs params;
  params.push_back({"layer0.weight", {{3, 4}, rand_vec(12, rng)}});
  params.push_back({"layer0.bias", {{4}, rand_vec(4, rng)}});
  nlohmann::json meta{{"kind", "test"}, {"version", 1}};
  const std::string path = "test_ckpt.bin";
  save_checkpoint(path, meta, params);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.meta["kind"] == "test");
  REQUIRE(loaded.params.size() == 2);
  for (std::size_t p = 0; p < 2; ++p) {
    CHECK(loaded.params[p].first == params[p].first);
    CHECK(loaded.params[p].second.shape == params[p].second.shape);
    for (std::size_t i = 0; i < params[p].second.values.size(); ++i) {
      CHECK(loaded.params[p].second.values[i] == params[p].second.values[i]);
    }
  }
  std::remove(path.c_str());

  // magic check
  {
    std::FILE* f = std::fopen("bogus.bin", "wb");
    std::fputs("NOTACKPT", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint("bogus.bin"), DataError);
  std::remove("bogus.bin");
}

TEST_CASE("non-leaf tensors are immutable") {
  auto x = leaf({2}, {1, 2});
  auto y = add(x, x);
  CHECK_THROWS_AS(y.values_mut(), StateError);
}
