#include <convo/guide_transformer.hpp>

#include <catch2/catch.hpp>

#include <filesystem>

using namespace convo;

namespace {

AudioFeatures random_audio(Rng& rng, int t, int d_a) {
    AudioFeatures a;
    a.self = rng.normal_mat(t, d_a);
    a.other = rng.normal_mat(t, d_a);
    return a;
}

GuideTransformerConfig tiny_cfg(int width = 32) {
    GuideTransformerConfig cfg;
    cfg.self_layers = 2;
    cfg.cross_layers = 2;
    cfg.heads = 2;
    cfg.width = width;
    cfg.ff_hidden = width * 2;
    return cfg;
}

}  // namespace

TEST_CASE("nucleus sampling", "[guide]") {
    SECTION("mass 0.7 alone covers p=0.5, so token 0 always wins") {
        Vec logits(3);
        logits << std::log(0.7f), std::log(0.2f), std::log(0.1f);
        Rng rng(1);
        for (int i = 0; i < 2000; ++i) REQUIRE(nucleus_sample(logits, 0.5f, rng) == 0);
        REQUIRE(nucleus_set(logits, 0.5f) == std::vector<int>{0});
    }
    SECTION("uniform over 4 tokens with p=0.5 keeps exactly two") {
        Vec logits = Vec::Zero(4);
        REQUIRE(nucleus_set(logits, 0.5f) == std::vector<int>{0, 1});  // ties sort by index
        Rng rng(2);
        for (int i = 0; i < 500; ++i) {
            int tok = nucleus_sample(logits, 0.5f, rng);
            REQUIRE((tok == 0 || tok == 1));
        }
    }
    SECTION("p=1 reproduces the softmax distribution (chi-square alpha 0.01)") {
        Vec logits(5);
        logits << 0.3f, -0.7f, 1.1f, 0.f, -1.5f;
        double mx = logits.maxCoeff();
        std::vector<double> probs(5);
        double z = 0;
        for (int i = 0; i < 5; ++i) {
            probs[(size_t)i] = std::exp((double)logits(i) - mx);
            z += probs[(size_t)i];
        }
        for (auto& p : probs) p /= z;
        Rng rng(3);
        std::vector<long> counts(5, 0);
        const int n = 100000;
        for (int i = 0; i < n; ++i) ++counts[(size_t)nucleus_sample(logits, 1.f, rng)];
        REQUIRE(chi2_statistic(counts, probs) < chi2_critical(4, 0.01));
    }
    SECTION("nucleus is monotone in p") {
        Rng rng(4);
        for (int trial = 0; trial < 30; ++trial) {
            Vec logits = rng.normal_mat(8, 1).col(0);
            float p1 = rng.uniform(0.05f, 0.95f);
            float p2 = rng.uniform(p1, 1.f);
            auto small = nucleus_set(logits, p1);
            auto large = nucleus_set(logits, p2);
            for (int tok : small) REQUIRE(std::find(large.begin(), large.end(), tok) != large.end());
        }
    }
    SECTION("p near zero collapses to a deterministic argmax") {
        Vec logits(4);
        logits << 0.2f, 0.9f, 0.9f, -1.f;
        Rng a(5), b(77);
        // ties in the argmax break toward the lower index
        REQUIRE(nucleus_sample(logits, 1e-6f, a) == 1);
        REQUIRE(nucleus_sample(logits, 1e-6f, b) == 1);
    }
    SECTION("non-finite logits are rejected") {
        Vec logits(3);
        logits << 0.f, std::numeric_limits<float>::quiet_NaN(), 1.f;
        Rng rng(6);
        REQUIRE_THROWS_WITH(nucleus_sample(logits, 0.9f, rng), Catch::Contains("non-finite"));
    }
}

TEST_CASE("transformer causality and boundaries", "[guide]") {
    Rng rng(10);
    GuideTransformer model(tiny_cfg(), 16, 2, 12, rng);
    model.head.W.value = rng.normal_mat(model.cfg.width, 16, 0.3f);  // live logits
    AudioFeatures audio = random_audio(rng, 90, 6);

    SECTION("empty prefix with BOS yields well-defined logits") {
        Mat logits = model.logits_all({}, audio);
        REQUIRE(logits.rows() == 1);
        REQUIRE(logits.cols() == 16);
        REQUIRE(logits.allFinite());
    }
    SECTION("perturbing token j leaves logits before j bitwise unchanged") {
        std::vector<int> tokens = {3, 7, 1, 15, 0, 9, 4, 2};
        Mat base = model.logits_all(tokens, audio);
        for (int j = 2; j < (int)tokens.size(); j += 2) {
            std::vector<int> perturbed = tokens;
            perturbed[(size_t)j] = (perturbed[(size_t)j] + 5) % 16;
            Mat changed = model.logits_all(perturbed, audio);
            for (int r = 0; r <= j; ++r) REQUIRE(changed.row(r) == base.row(r));
            REQUIRE(changed.row(j + 1) != base.row(j + 1));
        }
    }
    SECTION("invalid prefix index is rejected") {
        REQUIRE_THROWS_WITH(model.logits_all({3, 99}, audio), Catch::Contains("invalid token"));
    }
}

TEST_CASE("fresh transformer starts at uniform cross entropy", "[guide]") {
    Rng rng(20);
    const int c_size = 1024;
    GuideTransformer model(tiny_cfg(32), c_size, 4, 12, rng);
    AudioFeatures audio = random_audio(rng, 60, 6);
    std::vector<int> targets = {5, 100, 700, 3, 42, 999, 0, 512};
    std::vector<int> prefix(targets.begin(), targets.end() - 1);
    nn::Tape t;
    nn::Node* logits = model.logits_graph(t, prefix, audio);
    nn::Node* loss = nn::cross_entropy(t, logits, targets);
    float expect = std::log((float)c_size);  // ln 1024 = 6.93
    REQUIRE(loss->value(0, 0) == Approx(expect).epsilon(0.05));
}

TEST_CASE("token budget: 20 s of audio yields 80 tokens and 20 guide poses", "[guide]") {
    Rng rng(30);
    RvqConfig rcfg;
    rcfg.codebook_size = 32;
    rcfg.hidden = 24;
    rcfg.embedding_dim = 16;
    rcfg.residual_depth = 4;  // 4 VQ tokens represent a single pose
    RvqModel rvq(rcfg, 8, rng);
    GuideTransformer model(tiny_cfg(32), rcfg.codebook_size, rcfg.residual_depth, 8, rng);
    AudioFeatures audio = random_audio(rng, 600, 4);

    TokenSequence tokens;
    Rng sample_rng(31);
    GuidePoseSequence guides = generate_guide_poses(model, rvq, audio, 0.9f, sample_rng, &tokens);
    REQUIRE((int)tokens.tokens.size() == 80);
    REQUIRE(guides.length() == 20);
    for (int id : tokens.tokens) REQUIRE((id >= 0 && id < rcfg.codebook_size));
}

TEST_CASE("guide rollouts reject too-short audio", "[guide]") {
    Rng rng(33);
    RvqConfig rcfg;
    rcfg.codebook_size = 16;
    rcfg.hidden = 16;
    rcfg.embedding_dim = 8;
    rcfg.residual_depth = 2;
    RvqModel rvq(rcfg, 6, rng);
    GuideTransformer model(tiny_cfg(16), 16, 2, 8, rng);
    AudioFeatures audio = random_audio(rng, 20, 4);  // two thirds of a second
    Rng s(1);
    REQUIRE_THROWS_WITH(generate_guide_poses(model, rvq, audio, 0.9f, s),
                        Catch::Contains("shorter than 1 s"));
}

TEST_CASE("guide transformer trains to high teacher-forced accuracy", "[guide]") {
    // five-take overfit oracle: 8 s takes sit exactly at the minimum
    // window, so every step trains the same five token sequences
    std::vector<Take> takes;
    for (int i = 0; i < 5; ++i) takes.push_back(generate_dyad(600 + (uint64_t)i, 8.f));
    std::vector<const Take*> ptrs;
    for (const auto& t : takes) ptrs.push_back(&t);

    Rng rng(40);
    RvqConfig rcfg;
    rcfg.codebook_size = 48;
    rcfg.hidden = 32;
    rcfg.embedding_dim = 16;
    rcfg.residual_depth = 2;
    RvqModel rvq(rcfg, takes[0].motion.dim(), rng);
    std::vector<GuidePoseSequence> guides;
    for (const auto& t : takes) guides.push_back(subsample_guide_poses(t.motion));
    train_rvq(rvq, guides, 1200, 40);

    GuideTransformerConfig gcfg = tiny_cfg(64);
    gcfg.lr = 2e-3f;
    Rng mrng(41);
    GuideTransformer model(gcfg, rcfg.codebook_size, rcfg.residual_depth,
                           2 * takes[0].audio.dim(), mrng);
    GuideTrainLog log = train_guide_transformer(model, rvq, ptrs, 1200, 41);

    SECTION("loss fell and accuracy exceeds 95 percent on the corpus") {
        REQUIRE(log.final_loss < log.loss.front());
        long hits = 0, total = 0;
        for (const auto& t : takes) {
            TokenSequence ts = encode_tokens(rvq, subsample_guide_poses(t.motion));
            std::vector<int> prefix(ts.tokens.begin(), ts.tokens.end() - 1);
            Mat logits = model.logits_all(prefix, t.audio);
            for (int i = 0; i < (int)ts.tokens.size(); ++i) {
                int pred;
                logits.row(i).maxCoeff(&pred);
                ++total;
                if (pred == ts.tokens[(size_t)i]) ++hits;
            }
        }
        REQUIRE((double)hits / (double)total > 0.95);
    }
    SECTION("training is reproducible for a fixed seed") {
        Rng mrng2(41);
        GuideTransformer model2(gcfg, rcfg.codebook_size, rcfg.residual_depth,
                                2 * takes[0].audio.dim(), mrng2);
        GuideTrainLog log2 = train_guide_transformer(model2, rvq, ptrs, 1200, 41);
        REQUIRE(log.final_loss == log2.final_loss);
    }
    SECTION("audio conditioning is live after training") {
        const Take& t = takes[0];
        TokenSequence ts = encode_tokens(rvq, subsample_guide_poses(t.motion));
        std::vector<int> prefix(ts.tokens.begin(), ts.tokens.begin() + 8);
        Mat with_audio = model.logits_all(prefix, t.audio);
        AudioFeatures muted;
        muted.self = Mat::Zero(t.audio.length(), t.audio.dim());
        muted.other = Mat::Zero(t.audio.length(), t.audio.dim());
        Mat without_audio = model.logits_all(prefix, muted);
        REQUIRE((with_audio - without_audio).cwiseAbs().maxCoeff() > 1e-3f);
    }
    SECTION("two sampling seeds produce different rollouts while the model is soft") {
        // a briefly trained model keeps genuine probability mass outside
        // the argmax, so nucleus rollouts vary across seeds
        Rng soft_rng(43);
        GuideTransformer soft(gcfg, rcfg.codebook_size, rcfg.residual_depth,
                              2 * takes[0].audio.dim(), soft_rng);
        train_guide_transformer(soft, rvq, ptrs, 60, 43);
        Rng s1(7), s2(8);
        TokenSequence a, b;
        generate_guide_poses(soft, rvq, takes[0].audio, 1.f, s1, &a);
        generate_guide_poses(soft, rvq, takes[0].audio, 1.f, s2, &b);
        REQUIRE(a.tokens != b.tokens);
    }
    SECTION("checkpoint round trip preserves logits") {
        auto tmp = std::filesystem::temp_directory_path() / "convo_guide_test.ckpt";
        save_guide(model, tmp, 41, 900, log);
        GuideTransformer loaded = load_guide(tmp);
        std::vector<int> prefix = {1, 2, 3};
        REQUIRE(loaded.logits_all(prefix, takes[0].audio) ==
                model.logits_all(prefix, takes[0].audio));
        std::filesystem::remove(tmp);
    }
}
