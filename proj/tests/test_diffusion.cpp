#include <convo/diffusion.hpp>

#include <catch2/catch.hpp>

using namespace convo;

namespace {

DenoiserConfig tiny_denoiser(int width = 32, int blocks = 1) {
    DenoiserConfig cfg;
    cfg.blocks = blocks;
    cfg.width = width;
    cfg.heads = 2;
    cfg.ff_hidden = width * 2;
    return cfg;
}

}  // namespace

TEST_CASE("cosine schedule satisfies the schedule invariants", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(1000);
    REQUIRE(s.alpha_bar[0] == 1.f);
    for (int tau = 1; tau <= 1000; ++tau) {
        REQUIRE(s.alpha_bar[(size_t)tau] < s.alpha_bar[(size_t)tau - 1]);
        if (tau >= 2) REQUIRE(s.alpha[(size_t)tau] <= s.alpha[(size_t)tau - 1] + 1e-7f);
    }
    REQUIRE(s.alpha_bar[1000] < 1e-3f);

    // cumulative product consistency
    double prod = 1.0;
    for (int tau = 1; tau <= 1000; ++tau) {
        prod *= (double)s.alpha[(size_t)tau];
        REQUIRE(s.alpha_bar[(size_t)tau] == Approx(prod).epsilon(1e-4));
    }
}

TEST_CASE("strided schedules descend and end at one", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(1000);
    for (int n : {1, 10, 250, 1000}) {
        auto taus = s.strided(n);
        REQUIRE(taus.front() == 1000);
        REQUIRE(taus.back() == 1);
        for (size_t i = 1; i < taus.size(); ++i) REQUIRE(taus[i] < taus[i - 1]);
    }
}

TEST_CASE("q_sample implements the closed-form forward process", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(8);
    Mat x0 = rng.normal_mat(4, 6);

    SECTION("tau = 0 boundary returns x0 untouched") {
        Mat eps = rng.normal_mat(4, 6);
        REQUIRE(q_sample(x0, 0, eps, s) == x0);
    }
    SECTION("out-of-range tau is rejected") {
        Mat eps = rng.normal_mat(4, 6);
        REQUIRE_THROWS_WITH(q_sample(x0, 1001, eps, s), Catch::Contains("out of range"));
    }
    SECTION("terminal marginal is standard normal (moment oracle)") {
        Mat fixed = rng.normal_mat(1, 8);
        const int draws = 10000;
        Mat sum = Mat::Zero(1, 8), sumsq = Mat::Zero(1, 8);
        for (int i = 0; i < draws; ++i) {
            Mat eps = rng.normal_mat(1, 8);
            Mat xt = q_sample(fixed, 1000, eps, s);
            sum += xt;
            sumsq += xt.cwiseProduct(xt);
        }
        Mat mean = sum / (float)draws;
        Mat var = sumsq / (float)draws - mean.cwiseProduct(mean);
        for (int c = 0; c < 8; ++c) {
            REQUIRE(std::fabs(mean(0, c)) < 0.05f);
            REQUIRE(var(0, c) > 0.95f);
            REQUIRE(var(0, c) < 1.05f);
        }
    }
    SECTION("noise variance matches 1 - alpha_bar within 2 percent") {
        int tau = 400;
        Mat fixed = rng.normal_mat(1, 4);
        const int draws = 10000;
        double acc = 0;
        for (int i = 0; i < draws; ++i) {
            Mat eps = rng.normal_mat(1, 4);
            Mat delta = q_sample(fixed, tau, eps, s) - std::sqrt(s.alpha_bar[(size_t)tau]) * fixed;
            acc += (double)delta.array().square().mean();
        }
        double expect = 1.0 - (double)s.alpha_bar[(size_t)tau];
        REQUIRE(acc / draws == Approx(expect).epsilon(0.02));
    }
}

TEST_CASE("training loss orchestration", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(100);
    Rng rng(5);

    SECTION("a fresh zero-head model predicts zero, so unit data gives loss near 1") {
        Rng mrng(1);
        DenoiserNet model(tiny_denoiser(), 6, 4, 4, s.steps, mrng);
        double acc = 0;
        const int reps = 200;
        for (int i = 0; i < reps; ++i) {
            Mat x0 = rng.normal_mat(10, 6);
            acc += (double)training_loss(model, x0, ConditioningBundle{}, s, rng, 0.f);
        }
        REQUIRE(acc / reps == Approx(1.0).margin(0.1));  // E||x0||^2 per element
    }
    SECTION("p_drop = 0 never nulls conditioning") {
        ConditioningBundle cond;
        cond.stream_a = Mat::Ones(3, 4);
        cond.stream_b = Mat::Ones(2, 4);
        for (int i = 0; i < 10000; ++i) {
            ConditioningBundle out = drop_conditioning(cond, 0.f, rng);
            REQUIRE(out.stream_a.has_value());
            REQUIRE(out.stream_b.has_value());
        }
    }
    SECTION("p_drop = 1 always nulls conditioning") {
        ConditioningBundle cond;
        cond.stream_a = Mat::Ones(3, 4);
        for (int i = 0; i < 100; ++i)
            REQUIRE_FALSE(drop_conditioning(cond, 1.f, rng).stream_a.has_value());
    }
}

TEST_CASE("classifier-free guidance identities", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(50);
    Rng mrng(2);
    DenoiserNet model(tiny_denoiser(), 5, 6, 3, s.steps, mrng);
    // give the zero-init head real weights so cond/uncond paths differ
    Rng wrng(3);
    model.head.W.value = wrng.normal_mat(model.cfg.width, 5, 0.2f);
    Rng rng(4);

    ConditioningBundle cond;
    cond.stream_a = rng.normal_mat(7, 6);
    cond.stream_b = rng.normal_mat(2, 3);

    SECTION("s = 1 is bitwise the conditional pass") {
        for (int i = 0; i < 10; ++i) {
            Mat x = rng.normal_mat(7, 5);
            int tau = rng.uniform_int(1, s.steps);
            REQUIRE(cfg_predict(model, x, tau, cond, 1.f) == model.predict_x0(x, tau, cond));
        }
    }
    SECTION("s = 0 is bitwise the unconditional pass") {
        Mat x = rng.normal_mat(7, 5);
        REQUIRE(cfg_predict(model, x, 10, cond, 0.f) ==
                model.predict_x0(x, 10, ConditioningBundle{}));
    }
    SECTION("the conditional and unconditional passes actually differ") {
        Mat x = rng.normal_mat(7, 5);
        REQUIRE(model.predict_x0(x, 10, cond) != model.predict_x0(x, 10, ConditioningBundle{}));
    }
    SECTION("linear extrapolation at s = 2 matches the hand-computed rule") {
        Mat uncond = rng.normal_mat(3, 4), with_cond = rng.normal_mat(3, 4);
        Mat combined = cfg_combine(uncond, with_cond, 2.f);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c)
                REQUIRE(combined(r, c) ==
                        Approx(2.f * with_cond(r, c) - uncond(r, c)).margin(1e-6));
    }
}

TEST_CASE("reverse sampling", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(100);

    SECTION("a model that outputs a constant makes the sampler return it") {
        Rng mrng(6);
        DenoiserNet model(tiny_denoiser(16), 3, 2, 2, s.steps, mrng);
        model.head.b.value << 0.5f, -1.f, 2.f;  // zero weights + bias = constant output
        Rng rng(7);
        Mat out = reverse_sample(model, ConditioningBundle{}, s, 1.f, rng, 4, 3, 10);
        for (int r = 0; r < 4; ++r) {
            REQUIRE(out(r, 0) == 0.5f);
            REQUIRE(out(r, 1) == -1.f);
            REQUIRE(out(r, 2) == 2.f);
        }
    }
    SECTION("sampling is deterministic given the rng seed") {
        Rng mrng(8);
        DenoiserNet model(tiny_denoiser(16), 3, 2, 2, s.steps, mrng);
        Rng r1(9), r2(9);
        Mat a = reverse_sample(model, ConditioningBundle{}, s, 1.f, r1, 5, 3, 8);
        Mat b = reverse_sample(model, ConditioningBundle{}, s, 1.f, r2, 5, 3, 8);
        REQUIRE(a == b);
    }
    SECTION("an overfit model reproduces its single training sequence") {
        // motion-like smooth target over time
        Mat x0(8, 4);
        for (int t = 0; t < 8; ++t)
            for (int c = 0; c < 4; ++c) x0(t, c) = std::sin(0.5f * t + c);
        Rng mrng(11);
        DenoiserNet model(tiny_denoiser(32), 4, 2, 2, s.steps, mrng);
        nn::Tape tape;
        nn::Adam opt(1e-3f);
        Rng train_rng(12);
        for (int step = 0; step < 2000; ++step) {
            tape.clear();
            nn::Node* loss_node = nullptr;
            float v = training_loss(model, x0, ConditioningBundle{}, s, train_rng, 0.f, &tape,
                                    &loss_node);
            REQUIRE(std::isfinite(v));
            tape.backward(loss_node);
            opt.step(tape);
        }
        Rng srng(13);
        Mat sample = reverse_sample(model, ConditioningBundle{}, s, 1.f, srng, 8, 4, 25);
        double mse = (double)(sample - x0).array().square().mean();
        REQUIRE(mse < 0.05);
    }
}

TEST_CASE("q_sample then a perfect tau=1 posterior step recovers x0", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(200);
    Rng rng(14);
    Mat x0 = rng.normal_mat(3, 5);
    // with a perfect x0 prediction and eps' = 0, re-noising to tau=1 and
    // predicting again returns x0 exactly
    Mat eps = rng.normal_mat(3, 5);
    Mat x1 = q_sample(x0, 1, Mat::Zero(3, 5), s);
    REQUIRE((x1 - std::sqrt(s.alpha_bar[1]) * x0).norm() < 1e-6f);
}

TEST_CASE("padding masks keep valid rows identical to the unpadded pass", "[diffusion]") {
    NoiseSchedule s = NoiseSchedule::cosine(50);
    Rng mrng(15);
    DenoiserNet model(tiny_denoiser(16, 2), 4, 3, 3, s.steps, mrng);
    Rng rng(16);
    ConditioningBundle cond;
    cond.stream_a = rng.normal_mat(6, 3);
    cond.stream_b = rng.normal_mat(2, 3);

    int valid = 5;
    Mat x_valid = rng.normal_mat(valid, 4);
    Mat x_padded(valid + 3, 4);
    x_padded.topRows(valid) = x_valid;
    x_padded.bottomRows(3) = rng.normal_mat(3, 4) * 100.f;  // garbage rows

    nn::Tape t1, t2;
    Mat unpadded = model.forward_graph(t1, x_valid, 7, cond)->value;
    Mat padded = model.forward_graph(t2, x_padded, 7, cond, valid)->value;
    REQUIRE(padded.topRows(valid) == unpadded);
}
