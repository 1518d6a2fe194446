#include <convo/baselines.hpp>
#include <convo/body.hpp>

#include <catch2/catch.hpp>

using namespace convo;

namespace {

// shared small corpus and trained lip regressor, built once per process
struct LipFixture {
    std::vector<Take> takes;
    std::vector<const Take*> train, test;
    LipRegressor model;
    double test_mse = 0, test_var = 0;
};

const LipFixture& lip_fixture() {
    static LipFixture* fx = [] {
        auto* f = new LipFixture;
        for (int i = 0; i < 5; ++i) f->takes.push_back(generate_dyad(900 + (uint64_t)i, 12.f));
        for (size_t i = 0; i + 1 < f->takes.size(); ++i) f->train.push_back(&f->takes[i]);
        f->test.push_back(&f->takes.back());

        LipRegressorConfig cfg;
        cfg.hidden = 96;
        cfg.lr = 2e-3f;
        Rng rng(7);
        f->model = LipRegressor(cfg, f->takes[0].audio.dim(),
                                f->takes[0].lips.frames.cols(), rng);
        train_lip_regressor(f->model, f->train, 2500, 7);

        const Take& held = *f->test[0];
        LipSequence pred = predict_lips(f->model, held.audio);
        f->test_mse = (double)(pred.frames - held.lips.frames).array().square().mean();
        for (int c = 0; c < held.lips.frames.cols(); ++c) {
            double mean = held.lips.frames.col(c).cast<double>().mean();
            f->test_var += (held.lips.frames.col(c).cast<double>().array() - mean).square().mean();
        }
        f->test_var /= held.lips.frames.cols();
        return f;
    }();
    return *fx;
}

DenoiserConfig small_denoiser(int width = 32, int blocks = 1) {
    DenoiserConfig cfg;
    cfg.blocks = blocks;
    cfg.width = width;
    cfg.heads = 2;
    cfg.ff_hidden = width * 2;
    return cfg;
}

}  // namespace

TEST_CASE("lip regressor recovers the planted signal", "[face_body]") {
    const LipFixture& fx = lip_fixture();

    SECTION("held-out MSE is at least 5x below the lip variance") {
        REQUIRE(fx.test_mse * 5.0 < fx.test_var);
    }
    SECTION("prediction shape and determinism") {
        const Take& t = *fx.test[0];
        LipSequence a = predict_lips(const_cast<LipRegressor&>(fx.model), t.audio);
        LipSequence b = predict_lips(const_cast<LipRegressor&>(fx.model), t.audio);
        REQUIRE(a.frames.rows() == t.length());
        REQUIRE(a.frames.cols() == t.lips.frames.cols());
        REQUIRE(a.frames == b.frames);
    }
    SECTION("silent input stretches map near the rest opening") {
        const Take& t = *fx.test[0];
        LipSequence pred = predict_lips(const_cast<LipRegressor&>(fx.model), t.audio);
        double open_silent = 0, open_speaking = 0;
        int n_silent = 0, n_speaking = 0;
        for (int i = 0; i < pred.length(); ++i) {
            double open = (double)pred.frames(i, 1) - (double)pred.frames(i, 4);
            if (t.roles[(size_t)i] == 'S') {
                open_speaking += open;
                ++n_speaking;
            } else {
                open_silent += open;
                ++n_silent;
            }
        }
        REQUIRE(n_silent > 30);
        REQUIRE(n_speaking > 30);
        open_silent /= n_silent;
        open_speaking /= n_speaking;
        // rest separation is 8 mm plus the 2 mm rest opening
        REQUIRE(open_silent == Approx(10.0).margin(1.5));
        REQUIRE(open_speaking > open_silent + 1.0);
    }
    SECTION("an energy ramp produces a monotone opening trend") {
        const int sr = 16000;
        Waveform ramp, quiet;
        ramp.rate = quiet.rate = sr;
        ramp.samples.resize(sr * 10);
        quiet.samples.assign(sr * 10, 0.f);
        Rng wrng(77);
        for (size_t i = 0; i < ramp.samples.size(); ++i) {
            float tt = (float)i / sr;
            float amp = 0.3f * tt / 10.f;  // grows linearly
            float syll = 0.55f + 0.45f * std::sin(2.f * (float)M_PI * 3.f * tt);
            ramp.samples[i] = amp * syll * std::sin(2.f * (float)M_PI * 130.f * tt) +
                              0.0015f * wrng.normal();
        }
        AudioFeatures feats = extract_features(ramp, quiet, fx.takes[0].audio.dim());
        LipSequence pred = predict_lips(const_cast<LipRegressor&>(fx.model), feats);
        auto third_mean = [&](int which) {
            int len = pred.length() / 3;
            double acc = 0;
            for (int i = which * len; i < (which + 1) * len; ++i)
                acc += (double)pred.frames(i, 1) - (double)pred.frames(i, 4);
            return acc / len;
        };
        REQUIRE(third_mean(0) < third_mean(1));
        REQUIRE(third_mean(1) < third_mean(2));
    }
    SECTION("checkpoint round trip") {
        auto tmp = std::filesystem::temp_directory_path() / "convo_lip_test.ckpt";
        LipTrainLog dummy;
        save_lip_regressor(fx.model, tmp, 7, 700, dummy);
        LipRegressor loaded = load_lip_regressor(tmp);
        const Take& t = *fx.test[0];
        REQUIRE(predict_lips(loaded, t.audio).frames ==
                predict_lips(const_cast<LipRegressor&>(fx.model), t.audio).frames);
        std::filesystem::remove(tmp);
    }
}

TEST_CASE("the dataset lip readout inverts the planted face layout", "[face_body]") {
    Take t = generate_dyad(1234, 9.f);
    LipSequence decoded = face_codes_to_lips(t.face.frames);
    REQUIRE(decoded.frames.rows() == t.lips.frames.rows());
    REQUIRE((decoded.frames - t.lips.frames).cwiseAbs().maxCoeff() < 1e-3f);
}

TEST_CASE("face diffusion pipeline", "[face_body]") {
    const LipFixture& fx = lip_fixture();
    Rng rng(21);
    int d_a = fx.takes[0].audio.dim();
    int d_lip = (int)fx.takes[0].lips.frames.cols();
    FaceModel model = make_face_model(small_denoiser(), 200, d_a, d_lip, true, true, rng);
    DiffusionTrainLog log =
        train_face_model(model, const_cast<LipRegressor*>(&fx.model), fx.train, 120, 21);

    SECTION("training loss is finite and the stats were fitted") {
        REQUIRE(std::isfinite(log.final_loss));
        REQUIRE(model.data_std.value.minCoeff() > 0.f);
    }
    SECTION("generation has the right shape and responds to the seed") {
        const Take& t = *fx.test[0];
        AudioFeatures audio = t.audio.slice(0, 90);
        Rng s1(5), s2(5), s3(6);
        FaceSequence a = generate_face(model, const_cast<LipRegressor*>(&fx.model), audio, 1.f, s1, 8);
        FaceSequence b = generate_face(model, const_cast<LipRegressor*>(&fx.model), audio, 1.f, s2, 8);
        FaceSequence c = generate_face(model, const_cast<LipRegressor*>(&fx.model), audio, 1.f, s3, 8);
        REQUIRE(a.frames.rows() == 90);
        REQUIRE(a.frames.cols() == kFaceDim);
        REQUIRE(a.frames.allFinite());
        REQUIRE(a.frames == b.frames);  // same seed
        REQUIRE(a.frames != c.frames);  // different seed
    }
    SECTION("face checkpoints round trip") {
        auto tmp = std::filesystem::temp_directory_path() / "convo_face_test.ckpt";
        save_face_model(model, tmp, 21, 120, log);
        FaceModel loaded = load_face_model(tmp);
        const Take& t = *fx.test[0];
        AudioFeatures audio = t.audio.slice(0, 60);
        Rng s1(9), s2(9);
        REQUIRE(generate_face(loaded, const_cast<LipRegressor*>(&fx.model), audio, 1.f, s1, 5)
                    .frames ==
                generate_face(model, const_cast<LipRegressor*>(&fx.model), audio, 1.f, s2, 5)
                    .frames);
        std::filesystem::remove(tmp);
    }
}

TEST_CASE("body diffusion pipeline", "[face_body]") {
    const LipFixture& fx = lip_fixture();
    Rng rng(31);
    int d_a = fx.takes[0].audio.dim();
    int d_pose = fx.takes[0].motion.dim();
    BodyModel model = make_body_model(small_denoiser(), 200, d_a, d_pose, true, true, rng);
    DiffusionTrainLog log = train_body_model(model, fx.train, 120, 31);
    REQUIRE(std::isfinite(log.final_loss));

    const Take& t = *fx.test[0];
    AudioFeatures audio = t.audio.slice(0, 120);
    GuidePoseSequence guides = subsample_guide_poses(
        MotionSequence{t.motion.frames.topRows(120), (float)kMotionFps});

    SECTION("30 fps infill around 1 fps guides") {
        Rng s1(3), s2(3), s3(4);
        MotionSequence a = generate_body(model, audio, guides, 1.f, s1, 8);
        MotionSequence b = generate_body(model, audio, guides, 1.f, s2, 8);
        MotionSequence c = generate_body(model, audio, guides, 1.f, s3, 8);
        REQUIRE(a.length() == 120);  // 30 * K
        REQUIRE(a.dim() == d_pose);
        REQUIRE(a.frames.allFinite());
        REQUIRE(a.frames == b.frames);
        REQUIRE(a.frames != c.frames);
    }
    SECTION("guide/audio length mismatch is rejected") {
        AudioFeatures longer = t.audio.slice(0, 200);
        Rng s(1);
        REQUIRE_THROWS_WITH(generate_body(model, longer, guides, 1.f, s, 4),
                            Catch::Contains("length mismatch"));
    }
    SECTION("disabling the guide slot is bitwise identical to passing no guides") {
        Rng r2(31);
        BodyModel wo_p = make_body_model(small_denoiser(), 200, d_a, d_pose, true, false, r2);
        detail::fit_data_stats(fx.train, false, wo_p.data_mean, wo_p.data_std);
        ConditioningBundle with_guides = body_conditioning(wo_p, &audio, &guides);
        ConditioningBundle without = body_conditioning(wo_p, &audio, nullptr);
        REQUIRE_FALSE(with_guides.stream_b.has_value());
        Mat x = Rng(77).normal_mat(120, d_pose);
        REQUIRE(wo_p.net.predict_x0(x, 10, with_guides) == wo_p.net.predict_x0(x, 10, without));
    }
    SECTION("unconditional flags leave nothing to drop during training") {
        Rng r3(32);
        BodyModel uncond = make_body_model(small_denoiser(), 200, d_a, d_pose, false, false, r3);
        ConditioningBundle cond = body_conditioning(uncond, &audio, &guides);
        REQUIRE_FALSE(cond.stream_a.has_value());
        REQUIRE_FALSE(cond.stream_b.has_value());
        Rng drop_rng(1);
        ConditioningBundle dropped = drop_conditioning(cond, 0.5f, drop_rng);
        REQUIRE_FALSE(dropped.stream_a.has_value());
        REQUIRE_FALSE(dropped.stream_b.has_value());
    }
    SECTION("body checkpoints round trip") {
        auto tmp = std::filesystem::temp_directory_path() / "convo_body_test.ckpt";
        save_body_model(model, tmp, 31, 120, log);
        BodyModel loaded = load_body_model(tmp);
        Rng s1(11), s2(11);
        REQUIRE(generate_body(loaded, audio, guides, 1.f, s1, 4).frames ==
                generate_body(model, audio, guides, 1.f, s2, 4).frames);
        std::filesystem::remove(tmp);
    }
}

TEST_CASE("full conversation generation wires the five models together", "[face_body]") {
    const LipFixture& fx = lip_fixture();
    int d_a = fx.takes[0].audio.dim();
    int d_pose = fx.takes[0].motion.dim();
    int d_lip = (int)fx.takes[0].lips.frames.cols();

    Rng rng(51);
    RvqConfig rcfg;
    rcfg.codebook_size = 32;
    rcfg.hidden = 24;
    rcfg.embedding_dim = 16;
    RvqModel rvq(rcfg, d_pose, rng);
    GuideTransformerConfig gcfg;
    gcfg.self_layers = 1;
    gcfg.cross_layers = 1;
    gcfg.heads = 2;
    gcfg.width = 32;
    gcfg.ff_hidden = 64;
    GuideTransformer guide(gcfg, rcfg.codebook_size, rcfg.residual_depth, 2 * d_a, rng);
    FaceModel face = make_face_model(small_denoiser(16), 100, d_a, d_lip, true, true, rng);
    face.data_std.value.setOnes();
    face.net.head.W.value = rng.normal_mat(16, kFaceDim, 0.1f);  // live, untrained output
    BodyModel body = make_body_model(small_denoiser(16), 100, d_a, d_pose, true, true, rng);
    body.data_std.value.setOnes();
    body.net.head.W.value = rng.normal_mat(16, d_pose, 0.1f);
    LipRegressor lip = fx.model;

    ConversationModels models{&lip, &face, &rvq, &guide, &body};

    // 20 s of audio: both modalities come back with exactly 600 frames
    Take t20 = generate_dyad(7777, 20.f);
    REQUIRE(t20.length() == 600);
    SampleParams params;
    params.sample_steps = 4;
    auto [face_seq, motion_seq] = generate_conversation_motion(models, t20.audio, params);
    REQUIRE(motion_seq.length() == 600);
    REQUIRE(face_seq.length() == 600);
    REQUIRE(motion_seq.frames.allFinite());
    REQUIRE(face_seq.frames.allFinite());

    // deterministic given the three stage seeds
    auto [face2, motion2] = generate_conversation_motion(models, t20.audio, params);
    REQUIRE(face2.frames == face_seq.frames);
    REQUIRE(motion2.frames == motion_seq.frames);

    SampleParams other = params;
    other.seed_body = 99;
    auto [face3, motion3] = generate_conversation_motion(models, t20.audio, other);
    REQUIRE(motion3.frames != motion_seq.frames);

    AudioFeatures tiny = t20.audio.slice(0, 20);
    REQUIRE_THROWS_WITH(generate_conversation_motion(models, tiny, params),
                        Catch::Contains("shorter than 1 s"));
}
