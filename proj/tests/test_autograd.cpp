#include <convo/nn/layers.hpp>

#include <catch2/catch.hpp>

using namespace convo;
using namespace convo::nn;

namespace {

// central finite differences against the tape gradient
void check_grad(const std::function<Node*(Tape&, Node*)>& build, Mat x0, float tol = 2e-2f,
                float eps = 1e-3f) {
    Tape tape;
    Node* x = tape.leaf(x0);
    Node* loss = build(tape, x);
    tape.backward(loss);
    Mat analytic = x->grad;
    REQUIRE(analytic.rows() == x0.rows());

    for (int r = 0; r < x0.rows(); ++r)
        for (int c = 0; c < x0.cols(); ++c) {
            Mat xp = x0, xm = x0;
            xp(r, c) += eps;
            xm(r, c) -= eps;
            Tape tp, tm;
            float fp = build(tp, tp.leaf(xp))->value(0, 0);
            float fm = build(tm, tm.leaf(xm))->value(0, 0);
            float numeric = (fp - fm) / (2.f * eps);
            float scale_ref = std::max({1.f, std::fabs(numeric), std::fabs(analytic(r, c))});
            REQUIRE(std::fabs(numeric - analytic(r, c)) / scale_ref < tol);
        }
}

Mat rand_mat(Rng& rng, int r, int c) { return rng.normal_mat(r, c); }

}  // namespace

TEST_CASE("gradients of primitive ops match finite differences", "[nn]") {
    Rng rng(42);
    Mat w = rand_mat(rng, 4, 3);

    SECTION("matmul") {
        check_grad([&](Tape& t, Node* x) { return mean_all(t, matmul(t, x, t.constant(w))); },
                   rand_mat(rng, 5, 4));
    }
    SECTION("matmul transposed operands") {
        check_grad(
            [&](Tape& t, Node* x) { return mean_all(t, matmul(t, x, t.constant(w), true, false)); },
            rand_mat(rng, 4, 5));
        Mat w2 = rand_mat(rng, 6, 3);
        check_grad(
            [&](Tape& t, Node* x) { return mean_all(t, matmul(t, x, t.constant(w2), false, true)); },
            rand_mat(rng, 5, 3));
    }
    SECTION("add and scale and add_const") {
        Mat b = rand_mat(rng, 5, 3);
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, add_const(t, scale(t, add(t, x, t.constant(b)), 1.7f), 0.4f));
            },
            rand_mat(rng, 5, 3));
    }
    SECTION("row broadcasts") {
        Mat row = rand_mat(rng, 1, 3);
        check_grad(
            [&](Tape& t, Node* x) {
                Node* a = add_rowvec(t, x, t.constant(row));
                return mean_all(t, mul_rowvec(t, a, t.constant(row)));
            },
            rand_mat(rng, 5, 3));
        // gradient wrt the row vector itself
        Mat base = rand_mat(rng, 5, 3);
        check_grad(
            [&](Tape& t, Node* x) { return mean_all(t, mul_rowvec(t, t.constant(base), x)); },
            rand_mat(rng, 1, 3));
    }
    SECTION("elementwise mul") {
        Mat b = rand_mat(rng, 4, 4);
        check_grad([&](Tape& t, Node* x) { return mean_all(t, cmul(t, x, t.constant(b))); },
                   rand_mat(rng, 4, 4));
    }
    SECTION("gelu and relu") {
        check_grad([&](Tape& t, Node* x) { return mean_all(t, gelu(t, x)); }, rand_mat(rng, 4, 4));
        Mat shifted = rand_mat(rng, 4, 4);
        shifted.array() += 0.5f;  // keep clear of the relu kink
        check_grad([&](Tape& t, Node* x) { return mean_all(t, relu(t, x)); }, shifted);
    }
    SECTION("softmax rows") {
        Mat probe = rand_mat(rng, 3, 5);
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, cmul(t, softmax_rows(t, x), t.constant(probe)));
            },
            rand_mat(rng, 3, 5));
    }
    SECTION("layer norm") {
        Mat g = Mat::Ones(1, 6), b = Mat::Zero(1, 6);
        Mat probe = rand_mat(rng, 4, 6);
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(
                    t, cmul(t, layer_norm(t, x, t.constant(g), t.constant(b)), t.constant(probe)));
            },
            rand_mat(rng, 4, 6), 5e-2f);
    }
    SECTION("slice and concat") {
        Mat probe = rand_mat(rng, 4, 6);
        check_grad(
            [&](Tape& t, Node* x) {
                Node* a = slice_cols(t, x, 0, 3);
                Node* b = slice_cols(t, x, 3, 3);
                return mean_all(t, cmul(t, concat_cols(t, {b, a}), t.constant(probe)));
            },
            rand_mat(rng, 4, 6));
    }
    SECTION("shift rows with edge replication") {
        Mat probe = rand_mat(rng, 6, 2);
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, cmul(t, shift_rows(t, x, 2), t.constant(probe)));
            },
            rand_mat(rng, 6, 2));
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, cmul(t, shift_rows(t, x, -2), t.constant(probe)));
            },
            rand_mat(rng, 6, 2));
    }
    SECTION("gather rows") {
        Mat probe = rand_mat(rng, 4, 3);
        std::vector<int> ids = {2, 0, 2, 1};
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, cmul(t, gather_rows(t, x, ids), t.constant(probe)));
            },
            rand_mat(rng, 3, 3));
    }
    SECTION("mean rows") {
        Mat probe = rand_mat(rng, 1, 4);
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, cmul(t, mean_rows(t, x), t.constant(probe)));
            },
            rand_mat(rng, 5, 4));
    }
    SECTION("mse") {
        Mat target = rand_mat(rng, 4, 3);
        check_grad([&](Tape& t, Node* x) { return mse(t, x, target); }, rand_mat(rng, 4, 3));
        check_grad([&](Tape& t, Node* x) { return mse(t, x, target, 2); }, rand_mat(rng, 4, 3));
    }
    SECTION("cross entropy") {
        std::vector<int> targets = {1, 0, 3};
        check_grad([&](Tape& t, Node* x) { return cross_entropy(t, x, targets); },
                   rand_mat(rng, 3, 4));
    }
}

TEST_CASE("gradients flow through composite blocks", "[nn]") {
    Rng rng(7);
    SECTION("attention block") {
        MultiheadAttention attn(rng, 8, 2);
        Mat mem = rng.normal_mat(5, 8);
        Mat probe = rng.normal_mat(3, 8);
        check_grad(
            [&](Tape& t, Node* x) {
                Node* out = attn.fwd(t, x, t.constant(mem), nullptr);
                return mean_all(t, cmul(t, out, t.constant(probe)));
            },
            rng.normal_mat(3, 8), 5e-2f);
    }
    SECTION("causal self-attention with mask") {
        MultiheadAttention attn(rng, 8, 2);
        Mat mask = causal_mask(4);
        Mat probe = rng.normal_mat(4, 8);
        check_grad(
            [&](Tape& t, Node* x) {
                Node* out = attn.fwd(t, x, x, &mask);
                return mean_all(t, cmul(t, out, t.constant(probe)));
            },
            rng.normal_mat(4, 8), 5e-2f);
    }
    SECTION("film conditioning") {
        Film film(rng, 6, 4);
        // non-zero modulation weights so the gradient path is live
        film.to_scale.W.value = rng.normal_mat(6, 4, 0.3f);
        film.to_shift.W.value = rng.normal_mat(6, 4, 0.3f);
        Mat cond = rng.normal_mat(1, 6);
        Mat probe = rng.normal_mat(3, 4);
        check_grad(
            [&](Tape& t, Node* x) {
                Node* out = film.fwd(t, x, t.constant(cond));
                return mean_all(t, cmul(t, out, t.constant(probe)));
            },
            rng.normal_mat(3, 4));
        // and wrt the conditioning vector
        Mat base = rng.normal_mat(3, 4);
        check_grad(
            [&](Tape& t, Node* x) {
                Node* out = film.fwd(t, t.constant(base), x);
                return mean_all(t, cmul(t, out, t.constant(probe)));
            },
            rng.normal_mat(1, 6));
    }
    SECTION("dilated causal conv") {
        Conv1dK2 conv(rng, 3, 5, 2);
        Mat probe = rng.normal_mat(7, 5);
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, cmul(t, conv.fwd(t, x), t.constant(probe)));
            },
            rng.normal_mat(7, 3));
    }
    SECTION("centered conv") {
        Conv1dCentered conv(rng, 3, 4, 5);
        Mat probe = rng.normal_mat(8, 4);
        check_grad(
            [&](Tape& t, Node* x) {
                return mean_all(t, cmul(t, conv.fwd(t, x), t.constant(probe)));
            },
            rng.normal_mat(8, 3));
    }
}

TEST_CASE("param reuse accumulates gradients once per binding", "[nn]") {
    Rng rng(3);
    Param w = make_param(rng, 3, 3, 0.5f);
    Tape t;
    Node* wn1 = t.param(w);
    Node* wn2 = t.param(w);
    REQUIRE(wn1 == wn2);  // memoized

    Node* x = t.constant(rng.normal_mat(2, 3));
    Node* y = add(t, matmul(t, x, wn1), matmul(t, x, wn2));
    Node* loss = mean_all(t, y);
    t.backward(loss);
    REQUIRE(t.bindings().size() == 1);

    // gradient equals twice the single-use gradient
    Tape t2;
    Node* w2 = t2.leaf(w.value);
    Node* loss2 = mean_all(t2, matmul(t2, t2.constant(x->value), w2));
    t2.backward(loss2);
    REQUIRE((wn1->grad - 2.f * w2->grad).norm() < 1e-6f);
}

TEST_CASE("adam converges on a quadratic", "[nn]") {
    Rng rng(11);
    Param w = make_param(rng, 1, 4, 1.f);
    Mat target(1, 4);
    target << 1.f, -2.f, 0.5f, 3.f;
    Tape tape;
    Adam opt(0.05f);
    for (int i = 0; i < 400; ++i) {
        tape.clear();
        Node* loss = mse(tape, tape.param(w), target);
        tape.backward(loss);
        opt.step(tape);
    }
    REQUIRE((w.value - target).norm() < 1e-2f);
}

TEST_CASE("sinusoidal rows are bounded and distinct", "[nn]") {
    Mat e = sinusoidal_rows({0.f, 1.f, 2.f, 50.f}, 16);
    REQUIRE(e.rows() == 4);
    REQUIRE((e.array().abs() <= 1.f).all());
    REQUIRE((e.row(0) - e.row(3)).norm() > 0.1f);
}
