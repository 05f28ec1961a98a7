#include <doctest.h>

#include <cmath>

#include "core/tensor.hpp"

using namespace xcb;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo, double hi) {
    auto n = static_cast<size_t>(detail::numel_of(shape));
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6.0);
    CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::scalar(1.0).at({0}), ContractError);
    CHECK(Tensor::scalar(4.25).item() == 4.25);
    CHECK_THROWS_AS(t.item(), ContractError);
}

TEST_CASE("matmul against identity") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor id = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor out = matmul(a, id);
    for (int64_t i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("sigmoid at zero") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
}

TEST_CASE("conv2d all-ones window sums") {
    // 3x3 all-ones image, 2x2 all-ones kernel, stride 1, no pad: every window
    // covers four ones, so the 2x2 output is all 4s.
    Tensor x = Tensor::ones({1, 1, 3, 3});
    Tensor w = Tensor::ones({1, 1, 2, 2});
    Tensor out = conv2d(x, w, Tensor(), 1, 0);
    CHECK(out.shape() == Shape{1, 1, 2, 2});
    for (double v : out.data()) CHECK(v == 4.0);
}

TEST_CASE("backward on linear and quadratic losses") {
    Tensor w = Tensor::from_data({3}, {1, 2, 3}, true);
    backward(sum(w));
    CHECK(w.grad() == std::vector<double>{1, 1, 1});

    Tensor v = Tensor::from_data({2}, {1, 2}, true);
    backward(sum(mul(v, v)));
    CHECK(v.grad() == std::vector<double>{2, 4});
}

TEST_CASE("backward through sigmoid at zero") {
    Tensor x = Tensor::scalar(0.0, true);
    backward(sigmoid(x));
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss and accumulates across calls") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(scale(w, 2.0)), ContractError);

    backward(sum(w));
    backward(sum(w));
    CHECK(w.grad() == std::vector<double>{2, 2});
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
}

TEST_CASE("backward is deterministic across repeated runs") {
    Rng rng(123);
    Tensor x = rand_tensor({4, 5}, rng, -1, 1);
    Tensor w = rand_tensor({5, 3}, rng, -1, 1);
    x.set_requires_grad(true);
    w.set_requires_grad(true);

    auto run = [&] {
        x.zero_grad();
        w.zero_grad();
        backward(sum(sigmoid(matmul(x, w))));
        return std::make_pair(x.grad(), w.grad());
    };
    auto first = run();
    auto second = run();
    CHECK(first.first == second.first);    // bitwise equal
    CHECK(first.second == second.second);
}

TEST_CASE("broadcasting rules and gradient reduction") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor b = Tensor::from_data({3}, {10, 20, 30}, true);
    Tensor out = add(a, b);
    CHECK(out.shape() == Shape{2, 3});
    CHECK(out.at({1, 0}) == 14.0);

    backward(sum(out));
    CHECK(a.grad() == std::vector<double>(6, 1.0));
    CHECK(b.grad() == std::vector<double>(3, 2.0));  // summed over the stretched axis

    Tensor col = Tensor::from_data({2, 1}, {1, 2});
    Tensor row = Tensor::from_data({1, 3}, {3, 4, 5});
    Tensor outer = mul(col, row);
    CHECK(outer.shape() == Shape{2, 3});
    CHECK(outer.at({1, 2}) == 10.0);

    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), DimensionError);
}

TEST_CASE("movement ops round-trip values and gradients") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);

    Tensor t = transpose(a);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at({2, 1}) == 6.0);

    Tensor r = reshape(a, {3, 2});
    CHECK(r.at({2, 1}) == 6.0);
    CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);

    Tensor s = slice(a, 1, 1, 3);
    CHECK(s.shape() == Shape{2, 2});
    CHECK(s.at({0, 0}) == 2.0);
    CHECK_THROWS_AS(slice(a, 1, 2, 2), DimensionError);

    Tensor c = concat({a, a}, 0);
    CHECK(c.shape() == Shape{4, 3});
    CHECK(c.at({3, 2}) == 6.0);
    CHECK_THROWS_AS(concat({a, Tensor::zeros({2, 4})}, 0), DimensionError);

    backward(sum(slice(a, 0, 0, 1)));
    CHECK(a.grad() == std::vector<double>{1, 1, 1, 0, 0, 0});
}

TEST_CASE("gather_rows selects and scatter-adds") {
    Tensor table = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Tensor g = gather_rows(table, {2, 0, 2});
    CHECK(g.shape() == Shape{3, 2});
    CHECK(g.at({0, 1}) == 6.0);
    backward(sum(g));
    CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});
    CHECK_THROWS_AS(gather_rows(table, {3}), ContractError);
}

TEST_CASE("reductions over axes") {
    Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(sum(a).item() == 21.0);
    CHECK(mean(a).item() == 3.5);

    Tensor s0 = sum(a, 0, false);
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.data() == std::vector<double>{5, 7, 9});

    Tensor m1 = mean(a, 1, true);
    CHECK(m1.shape() == Shape{2, 1});
    CHECK(m1.data() == std::vector<double>{2, 5});
}

TEST_CASE("straight_through thresholding and identity backward") {
    Tensor soft = Tensor::from_data({5}, {0.73, 0.5, 0.2, 1.4, -0.3}, true);
    Tensor hard = straight_through(soft);
    CHECK(hard.data() == std::vector<double>{1, 0, 0, 1, 0});  // tie at 0.5 maps to 0
    for (double v : hard.data()) CHECK((v == 0.0 || v == 1.0));

    backward(sum(hard));
    CHECK(soft.grad() == std::vector<double>{1, 1, 1, 1, 1});
}

TEST_CASE("maxpool and avgpool") {
    Tensor x = Tensor::from_data({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
    Tensor mp = maxpool2d(x, 2, 2);
    CHECK(mp.shape() == Shape{1, 1, 1, 2});
    CHECK(mp.data() == std::vector<double>{6, 8});
    backward(sum(mp));
    CHECK(x.grad() == std::vector<double>{0, 0, 0, 0, 0, 1, 0, 1});

    Tensor ap = avgpool2d(x.detach(), 2, 2);
    CHECK(ap.data() == std::vector<double>{3.5, 5.5});
    CHECK_THROWS_AS(maxpool2d(x, 5, 1), DimensionError);
}

TEST_CASE("grad_check on exactly linear fn is near machine precision") {
    Rng rng(7);
    double err = grad_check([](const std::vector<Tensor>& in) { return sum(in[0]); },
                            {rand_tensor({3, 4}, rng, -1, 1)});
    CHECK(err < 1e-10);
}

TEST_CASE("grad_check across the op catalog") {
    Rng rng(2024);
    auto check = [&](const char* name, std::function<Tensor(const std::vector<Tensor>&)> fn,
                     std::vector<Tensor> inputs, double tol) {
        INFO(name);
        CHECK(grad_check(std::move(fn), std::move(inputs)) < tol);
    };

    check("add+sub broadcast",
          [](const std::vector<Tensor>& in) { return sum(sub(add(in[0], in[1]), in[2])); },
          {rand_tensor({3, 4}, rng, -1, 1), rand_tensor({4}, rng, -1, 1),
           rand_tensor({3, 1}, rng, -1, 1)},
          1e-5);
    check("mul+div",
          [](const std::vector<Tensor>& in) { return sum(div(mul(in[0], in[1]), in[2])); },
          {rand_tensor({3, 4}, rng, -1, 1), rand_tensor({3, 4}, rng, -1, 1),
           rand_tensor({3, 4}, rng, 1.0, 2.0)},
          1e-5);
    check("sigmoid", [](const std::vector<Tensor>& in) { return sum(sigmoid(in[0])); },
          {rand_tensor({5, 5}, rng, -3, 3)}, 1e-6);
    check("relu away from kink", [](const std::vector<Tensor>& in) { return sum(relu(in[0])); },
          {rand_tensor({5, 5}, rng, 0.5, 2.0)}, 1e-5);
    check("exp+log+sqrt",
          [](const std::vector<Tensor>& in) { return sum(log(add_scalar(exp(sqrt(in[0])), 1.0))); },
          {rand_tensor({4, 4}, rng, 0.5, 2.0)}, 1e-5);
    check("clamp interior", [](const std::vector<Tensor>& in) { return sum(clamp(in[0], -10, 10)); },
          {rand_tensor({4}, rng, -1, 1)}, 1e-5);
    check("matmul chain",
          [](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); },
          {rand_tensor({3, 4}, rng, -1, 1), rand_tensor({4, 2}, rng, -1, 1)}, 1e-5);
    check("transpose+reshape",
          [](const std::vector<Tensor>& in) {
              return sum(mul(reshape(transpose(in[0]), {2, 6}), Tensor::full({2, 6}, 0.5)));
          },
          {rand_tensor({3, 4}, rng, -1, 1)}, 1e-5);
    check("concat+slice",
          [](const std::vector<Tensor>& in) {
              Tensor c = concat({in[0], in[1]}, 1);
              return sum(mul(slice(c, 1, 1, 5), slice(c, 1, 0, 4)));
          },
          {rand_tensor({2, 3}, rng, -1, 1), rand_tensor({2, 3}, rng, -1, 1)}, 1e-5);
    check("gather_rows",
          [](const std::vector<Tensor>& in) {
              return sum(mul(gather_rows(in[0], {0, 2, 2, 1}), gather_rows(in[0], {1, 1, 0, 2})));
          },
          {rand_tensor({3, 4}, rng, -1, 1)}, 1e-5);
    check("axis reductions",
          [](const std::vector<Tensor>& in) {
              return sum(mul(mean(in[0], 0, false), sum(in[0], 0, false)));
          },
          {rand_tensor({3, 4}, rng, -1, 1)}, 1e-5);
    check("conv2d stride+pad+bias",
          [](const std::vector<Tensor>& in) {
              return sum(mul(conv2d(in[0], in[1], in[2], 2, 1),
                             conv2d(in[0], in[1], in[2], 2, 1)));
          },
          {rand_tensor({2, 3, 5, 5}, rng, -1, 1), rand_tensor({4, 3, 3, 3}, rng, -1, 1),
           rand_tensor({4}, rng, -1, 1)},
          1e-5);
    check("maxpool", [](const std::vector<Tensor>& in) { return sum(maxpool2d(in[0], 2, 2)); },
          {rand_tensor({1, 2, 4, 4}, rng, -1, 1)}, 1e-5);
    check("avgpool",
          [](const std::vector<Tensor>& in) { return sum(mul(avgpool2d(in[0], 2, 1), avgpool2d(in[0], 2, 1))); },
          {rand_tensor({1, 2, 4, 4}, rng, -1, 1)}, 1e-5);
}

TEST_CASE("conv2d matches direct correlation on a random case") {
    Rng rng(99);
    Tensor x = rand_tensor({2, 2, 5, 6}, rng, -1, 1);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng, -1, 1);
    Tensor b = rand_tensor({3}, rng, -1, 1);
    const int stride = 2, pad = 1;
    Tensor out = conv2d(x, w, b, stride, pad);

    // Direct nested-loop correlation as an independent oracle.
    const int64_t N = 2, C = 2, H = 5, W = 6, Cout = 3, K = 3;
    const int64_t OH = (H + 2 * pad - K) / stride + 1;
    const int64_t OW = (W + 2 * pad - K) / stride + 1;
    REQUIRE(out.shape() == Shape{N, Cout, OH, OW});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double acc = b.data()[co];
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t ki = 0; ki < K; ++ki)
                            for (int64_t kj = 0; kj < K; ++kj) {
                                const int64_t ih = oh * stride - pad + ki;
                                const int64_t iw = ow * stride - pad + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at({n, c, ih, iw}) * w.at({co, c, ki, kj});
                            }
                    CHECK(out.at({n, co, oh, ow}) == doctest::Approx(acc).epsilon(1e-12));
                }
}

TEST_CASE("no-grad guard suppresses graph recording") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor y;
    {
        NoGradGuard guard;
        y = sum(mul(x, x));
    }
    CHECK_FALSE(y.requires_grad());
    CHECK(y.item() == 5.0);
}
