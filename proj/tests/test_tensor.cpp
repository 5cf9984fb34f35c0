#include <gtest/gtest.h>

#include <functional>

#include "helpers.hpp"
#include "ivae/tensor.hpp"

using namespace ivae;
using ivae::testing::random_away_from_zero;
using ivae::testing::random_tensor;

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;
using Maker = std::function<std::vector<Tensor>(std::uint64_t)>;

// Max FD relative error of sum(W * fn(inputs)) over 100 random input draws.
double worst_over_points(const Maker& make, const Fn& fn, int points = 100) {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
        auto inputs = make(static_cast<std::uint64_t>(p) * 7919 + 1);
        Tensor probe;
        {
            NoGradGuard ng;
            probe = fn(inputs);
        }
        const Tensor w = random_tensor(probe.shape(), 0xABCD + static_cast<std::uint64_t>(p), 0.5, 1.5);
        worst = std::max(worst, gradient_check([&] { return sum(mul(fn(inputs), w)); }, inputs, 1e-5));
    }
    return worst;
}

Maker one(Shape s, double lo = -2.0, double hi = 2.0) {
    return [=](std::uint64_t seed) { return std::vector<Tensor>{random_tensor(s, seed, lo, hi)}; };
}

Maker two(Shape a, Shape b, double lo = -2.0, double hi = 2.0) {
    return [=](std::uint64_t seed) {
        return std::vector<Tensor>{random_tensor(a, seed, lo, hi), random_tensor(b, seed + 1, lo, hi)};
    };
}

}  // namespace

TEST(Tensor, ShapeInvariantEnforced) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    Tensor t({2, 3}, std::vector<double>(6, 1.0));
    EXPECT_EQ(t.size(), 6u);
    t.set_requires_grad();
    EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Tensor, MatmulIdentity) {
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor i = Tensor::matrix({{1, 0}, {0, 1}});
    Tensor c = matmul(a, i);
    EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Tensor, LeakyReluDefinition) {
    Tensor y = leaky_relu(Tensor::vector({-1, 0, 2}), 0.01);
    EXPECT_DOUBLE_EQ(y[0], -0.01);
    EXPECT_DOUBLE_EQ(y[1], 0.0);
    EXPECT_DOUBLE_EQ(y[2], 2.0);
}

TEST(Tensor, SquareBackward) {
    Tensor x = Tensor::vector({3}).set_requires_grad();
    Tape tape;
    TapeScope s(tape);
    tape.backward(sum(square(x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Tensor, BilinearBackward) {
    Tensor a = Tensor::vector({1, 2}).set_requires_grad();
    Tensor b = Tensor::vector({3, 4}).set_requires_grad();
    Tape tape;
    TapeScope s(tape);
    tape.backward(sum(mul(a, b)));
    EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
    EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);
    EXPECT_DOUBLE_EQ(b.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(b.grad()[1], 2.0);
}

TEST(Tensor, MeanBackward) {
    Tensor x = Tensor::vector({1, 2, 3, 4}).set_requires_grad();
    Tape tape;
    TapeScope s(tape);
    tape.backward(mean(x));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Tensor, FanOutAccumulates) {
    Tensor x = Tensor::vector({2}).set_requires_grad();
    Tape tape;
    TapeScope s(tape);
    tape.backward(sum(add(mul(x, x), x)));  // 2x + 1
    EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(Tensor, BroadcastLeadingBatchDim) {
    Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    Tensor b = Tensor::vector({10, 20, 30});
    Tensor c = add(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 3}));
    EXPECT_DOUBLE_EQ(c.at(1, 2), 36.0);
    Tensor d = broadcast(b, {4, 3});
    EXPECT_EQ(d.shape(), (Shape{4, 3}));
    EXPECT_DOUBLE_EQ(d.at(3, 1), 20.0);
}

TEST(Tensor, ShapeErrorsNamePrimitiveAndShapes) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        (void)add(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
    }
    try {
        (void)matmul(a, a);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    }
    EXPECT_THROW((void)concat({Tensor::zeros({2, 2}), Tensor::zeros({3, 3})}, 1), ShapeError);
    EXPECT_THROW((void)slice(Tensor::zeros({2, 2}), 1, 1, 3), ShapeError);
}

TEST(Tensor, DomainErrors) {
    EXPECT_THROW((void)log(Tensor::vector({1.0, 0.0})), DomainError);
    EXPECT_THROW((void)log(Tensor::vector({-1.0})), DomainError);
    EXPECT_THROW((void)sqrt(Tensor::vector({-1.0})), DomainError);
    EXPECT_THROW((void)sqrt(Tensor::vector({0.0})), DomainError);
    EXPECT_THROW((void)exp(Tensor::vector({1000.0})), NumericError);
}

TEST(Tensor, BackwardPreconditions) {
    Tensor x = Tensor::vector({1, 2}).set_requires_grad();
    {
        Tape tape;
        TapeScope s(tape);
        EXPECT_THROW(tape.backward(mul(x, x)), ShapeError);
    }
    {
        Tape tape;
        TapeScope s(tape);
        Tensor loss = sum(mul(x, x));
        tape.backward(loss);
        EXPECT_THROW(tape.backward(loss), std::logic_error);
        tape.reset();
        x.zero_grad();
        Tensor again = sum(mul(x, x));
        tape.backward(again);
        EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
    }
}

TEST(Tensor, NoRecordingOutsideTapeOrUnderNoGrad) {
    Tensor x = Tensor::vector({1, 2}).set_requires_grad();
    Tensor y = square(x);
    EXPECT_TRUE(y.is_leaf());
    Tape tape;
    TapeScope s(tape);
    {
        NoGradGuard ng;
        Tensor z = square(x);
        EXPECT_TRUE(z.is_leaf());
    }
    Tensor w = square(x);
    EXPECT_FALSE(w.is_leaf());
    EXPECT_EQ(tape.size(), 1u);
}

TEST(Tensor, TapeIsTopologicallyOrdered) {
    Tensor a = random_tensor({3, 2}, 1).set_requires_grad();
    Tensor b = random_tensor({2, 2}, 2).set_requires_grad();
    Tape tape;
    TapeScope s(tape);
    Tensor h = tanh(matmul(a, b));
    Tensor loss = mean(add(h, exp(h)));
    for (const auto& node : tape.nodes())
        for (const auto& in : node.inputs) {
            if (in) EXPECT_LT(*in, node.output);
        }
    EXPECT_EQ(*loss.tape_id() + 1, tape.size());
}

TEST(Tensor, BackwardIsLinear) {
    Tensor x = random_tensor({4, 3}, 11).set_requires_grad();
    auto l1 = [&] { return sum(tanh(x)); };
    auto l2 = [&] { return mean(square(exp(mul(x, Tensor::scalar(0.3))))); };
    auto grad_of = [&](const std::function<Tensor()>& f) {
        x.zero_grad();
        Tape tape;
        TapeScope s(tape);
        tape.backward(f());
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    const double a = 1.7, b = -0.6;
    const auto g1 = grad_of(l1), g2 = grad_of(l2);
    const auto g = grad_of([&] { return add(mul(l1(), Tensor::scalar(a)), mul(l2(), Tensor::scalar(b))); });
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], a * g1[i] + b * g2[i], 1e-10);
}

TEST(Tensor, ReplayIsBitIdentical) {
    auto run = [] {
        Tensor x = random_tensor({5, 4}, 3).set_requires_grad();
        Tensor w = random_tensor({4, 2}, 4).set_requires_grad();
        Tape tape;
        TapeScope s(tape);
        Tensor loss = mean(softplus(matmul(x, w)));
        tape.backward(loss);
        std::vector<double> out{loss.item()};
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    EXPECT_EQ(run(), run());
}

// ---- finite-difference validation of every primitive ----------------------------------------

TEST(TensorGrad, Matmul) { EXPECT_LT(worst_over_points(two({3, 4}, {4, 2}), [](auto& v) { return matmul(v[0], v[1]); }), 1e-4); }
TEST(TensorGrad, Add) { EXPECT_LT(worst_over_points(two({3, 4}, {4}), [](auto& v) { return add(v[0], v[1]); }), 1e-4); }
TEST(TensorGrad, AddColumnBroadcast) {
    EXPECT_LT(worst_over_points(two({3, 4}, {3, 1}), [](auto& v) { return add(v[0], v[1]); }), 1e-4);
}
TEST(TensorGrad, Sub) { EXPECT_LT(worst_over_points(two({3, 4}, {1, 4}), [](auto& v) { return sub(v[0], v[1]); }), 1e-4); }
TEST(TensorGrad, Mul) { EXPECT_LT(worst_over_points(two({3, 4}, {3, 4}), [](auto& v) { return mul(v[0], v[1]); }), 1e-4); }
TEST(TensorGrad, Div) {
    Maker m = [](std::uint64_t s) {
        return std::vector<Tensor>{random_tensor({3, 4}, s), random_away_from_zero({4}, s + 1, 0.5)};
    };
    EXPECT_LT(worst_over_points(m, [](auto& v) { return div(v[0], v[1]); }), 1e-4);
}
TEST(TensorGrad, Neg) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return neg(v[0]); }), 1e-4); }
TEST(TensorGrad, Exp) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return exp(v[0]); }), 1e-4); }
TEST(TensorGrad, Log) { EXPECT_LT(worst_over_points(one({3, 4}, 0.1, 3.0), [](auto& v) { return log(v[0]); }), 1e-4); }
TEST(TensorGrad, Square) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return square(v[0]); }), 1e-4); }
TEST(TensorGrad, AbsAwayFromKink) {
    Maker m = [](std::uint64_t s) { return std::vector<Tensor>{random_away_from_zero({3, 4}, s, 1e-3)}; };
    EXPECT_LT(worst_over_points(m, [](auto& v) { return abs(v[0]); }), 1e-4);
}
TEST(TensorGrad, Sqrt) { EXPECT_LT(worst_over_points(one({3, 4}, 0.1, 3.0), [](auto& v) { return sqrt(v[0]); }), 1e-4); }
TEST(TensorGrad, Sum) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return sum(v[0]); }), 1e-4); }
TEST(TensorGrad, SumAxis) {
    EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return sum(v[0], 0); }), 1e-4);
    EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return sum(v[0], 1); }), 1e-4);
}
TEST(TensorGrad, Mean) {
    EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return mean(v[0]); }), 1e-4);
    EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return mean(v[0], 1); }), 1e-4);
}
TEST(TensorGrad, Broadcast) { EXPECT_LT(worst_over_points(one({4}), [](auto& v) { return broadcast(v[0], {3, 4}); }), 1e-4); }
TEST(TensorGrad, Concat) {
    EXPECT_LT(worst_over_points(two({3, 2}, {3, 4}), [](auto& v) { return concat({v[0], v[1]}, 1); }), 1e-4);
    EXPECT_LT(worst_over_points(two({2, 4}, {3, 4}), [](auto& v) { return concat({v[0], v[1]}, 0); }), 1e-4);
}
TEST(TensorGrad, Slice) {
    EXPECT_LT(worst_over_points(one({4, 5}), [](auto& v) { return slice(v[0], 1, 1, 4); }), 1e-4);
    EXPECT_LT(worst_over_points(one({4, 5}), [](auto& v) { return slice(v[0], 0, 2, 4); }), 1e-4);
}
TEST(TensorGrad, LeakyReluAwayFromKink) {
    Maker m = [](std::uint64_t s) { return std::vector<Tensor>{random_away_from_zero({3, 4}, s, 1e-3)}; };
    EXPECT_LT(worst_over_points(m, [](auto& v) { return leaky_relu(v[0], 0.2); }), 1e-4);
}
TEST(TensorGrad, Sigmoid) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return sigmoid(v[0]); }), 1e-4); }
TEST(TensorGrad, Softplus) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return softplus(v[0]); }), 1e-4); }
TEST(TensorGrad, Tanh) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return tanh(v[0]); }), 1e-4); }
TEST(TensorGrad, Transpose) { EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return transpose(v[0]); }), 1e-4); }
TEST(TensorGrad, Logsumexp) {
    EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return logsumexp(v[0], 1); }), 1e-4);
    EXPECT_LT(worst_over_points(one({3, 4}), [](auto& v) { return logsumexp(v[0], 0); }), 1e-4);
}
TEST(TensorGrad, GatherRows) {
    const std::vector<std::size_t> idx{2, 0, 2, 1};
    EXPECT_LT(worst_over_points(one({3, 4}), [&](auto& v) { return gather_rows(v[0], idx); }), 1e-4);
}

TEST(TensorGrad, ThreeLayerMlpComposite) {
    Tensor x = random_tensor({6, 3}, 5);
    Tensor w1 = random_tensor({3, 8}, 6), b1 = random_tensor({8}, 7);
    Tensor w2 = random_tensor({8, 8}, 8), b2 = random_tensor({8}, 9);
    Tensor w3 = random_tensor({8, 1}, 10), b3 = random_tensor({1}, 11);
    auto f = [&] {
        Tensor h = tanh(add(matmul(x, w1), b1));
        h = softplus(add(matmul(h, w2), b2));
        return mean(add(matmul(h, w3), b3));
    };
    EXPECT_LT(gradient_check(f, {w1, b1, w2, b2, w3, b3}, 1e-5), 1e-4);
}

TEST(FiniteDifference, QuadraticIsExact) {
    EXPECT_LT(finite_difference_check([](const Tensor& x) { return sum(square(x)); }, Tensor::vector({3.0}), 1e-5), 1e-6);
}

TEST(FiniteDifference, ExpOfSum) {
    const Tensor p = random_tensor({5}, 21, -0.5, 0.5);
    auto f = [](const Tensor& x) { return exp(sum(x)); };
    EXPECT_LT(finite_difference_check(f, p, 1e-5), 1e-4);
    EXPECT_LT(finite_difference_check(f, p, 1e-4), 1e-4);
}

TEST(FiniteDifference, KinkIsReportedNotMasked) {
    // right-hand subgradient 1 against a central difference of 0
    const double err = finite_difference_check([](const Tensor& x) { return sum(abs(x)); }, Tensor::vector({0.0}), 1e-5);
    EXPECT_GT(err, 0.5);
}

TEST(FiniteDifference, NonDeterministicFunctionRejected) {
    int calls = 0;
    auto f = [&](const Tensor& x) { return sum(mul(x, Tensor::scalar(1.0 + 1e-3 * ++calls))); };
    EXPECT_THROW(finite_difference_check(f, Tensor::vector({1.0}), 1e-5), std::logic_error);
    EXPECT_THROW(finite_difference_check([](const Tensor& x) { return sum(x); }, Tensor::vector({1.0}), 0.0),
                 std::invalid_argument);
}
