// Command-line surface for the conversational motion toolkit:
// generate-data, train, sample, eval, visualize.

#include <convo/baselines.hpp>
#include <convo/body.hpp>
#include <convo/viz.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace convo;

namespace {

// rollout cost of the VQ-only ablation grows quadratically with length,
// so its sampling window is clipped
constexpr int kVqOnlyMaxFrames = 120;

struct ToolkitConfig {
    int d_a = kDefaultAudioDim;
    int lip_verts = kDefaultLipVerts;
    float duration_s = 24.f;
    int schedule_steps = 1000;
    int sample_steps = 250;
    RvqConfig rvq;
    GuideTransformerConfig guide;
    DenoiserConfig denoiser;
    LipRegressorConfig lip;
    std::map<std::string, int> train_steps = {
        {"lip", 3000}, {"face", 4000}, {"rvq", 20000}, {"guide", 8000}, {"body", 4000}};
};

ToolkitConfig load_config(const std::string& path) {
    ToolkitConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream f(path);
    require(f.good(), "cannot open config file: " + path);
    Json j = Json::parse(f);
    cfg.d_a = j.value("d_a", cfg.d_a);
    cfg.lip_verts = j.value("lip_verts", cfg.lip_verts);
    cfg.duration_s = j.value("duration_s", cfg.duration_s);
    cfg.schedule_steps = j.value("schedule_steps", cfg.schedule_steps);
    cfg.sample_steps = j.value("sample_steps", cfg.sample_steps);
    if (j.contains("rvq")) cfg.rvq = RvqConfig::from_json(j["rvq"]);
    if (j.contains("guide")) cfg.guide = GuideTransformerConfig::from_json(j["guide"]);
    if (j.contains("denoiser")) cfg.denoiser = DenoiserConfig::from_json(j["denoiser"]);
    if (j.contains("lip")) cfg.lip = LipRegressorConfig::from_json(j["lip"]);
    if (j.contains("train_steps"))
        for (const auto& [k, v] : j["train_steps"].items()) cfg.train_steps[k] = v.get<int>();
    return cfg;
}

Skeleton load_skeleton_or_default(const std::string& path) {
    if (!path.empty() && std::filesystem::exists(path)) return Skeleton::load(path);
    return make_desk_skeleton();
}

std::vector<const Take*> split_ptrs(const Corpus& corpus, Split split) {
    auto v = corpus.split(split);
    require(!v.empty(), std::string("split has no takes: ") + split_name(split));
    return v;
}

// generated output: a take directory minus the audio ground truth
void save_generated(const std::filesystem::path& dir, const FaceSequence& face,
                    const MotionSequence& motion) {
    std::filesystem::create_directories(dir);
    save_matrix(dir / "motion.f32", motion.frames, motion.fps);
    if (face.length() > 0) save_matrix(dir / "face.f32", face.frames, (float)kMotionFps);
    Json meta = {{"version", kTakeVersion},
                 {"id", dir.filename().string()},
                 {"T", motion.length()},
                 {"fps", kMotionFps},
                 {"generated", true}};
    std::ofstream f(dir / "meta.json");
    f << meta.dump(2) << "\n";
}

AudioFeatures load_audio_arg(const std::string& take_dir, const std::string& features_arg) {
    if (features_arg != "builtin") return load_external_features(features_arg);
    require(!take_dir.empty(), "need --audio <take dir> or --audio-features <file>");
    return load_external_features(std::filesystem::path(take_dir) / "audio.f32");
}

int cmd_generate_data(const ToolkitConfig& cfg, const std::string& out_dir, int takes,
                      float duration, uint64_t seed) {
    DyadStyle style;
    style.d_a = cfg.d_a;
    style.lip_verts = cfg.lip_verts;
    Corpus corpus = generate_corpus(seed, takes, duration, style);
    save_corpus(corpus, out_dir, seed);
    int split_counts[3] = {0, 0, 0};
    for (Split s : corpus.splits) ++split_counts[(int)s];
    std::cout << "wrote " << takes << " takes to " << out_dir << " (train " << split_counts[0]
              << ", val " << split_counts[1] << ", test " << split_counts[2] << ")\n";
    return 0;
}

int cmd_train(const ToolkitConfig& cfg, const std::string& model_name, const std::string& data_dir,
              const std::string& out_path, const std::string& rvq_path,
              const std::string& lip_path, const std::string& ablation, bool vq_only, int steps,
              uint64_t seed) {
    Corpus corpus = load_corpus(data_dir);
    auto train = split_ptrs(corpus, Split::train);
    int n_steps = steps > 0 ? steps : cfg.train_steps.at(model_name);
    int d_pose = train[0]->motion.dim();
    int d_a = train[0]->audio.dim();
    Rng rng(seed);

    if (model_name == "lip") {
        LipRegressor model(cfg.lip, d_a, (int)train[0]->lips.frames.cols(), rng);
        LipTrainLog log = train_lip_regressor(model, train, n_steps, seed);
        save_lip_regressor(model, out_path, seed, n_steps, log);
        std::cout << "lip regressor trained: final mse " << log.final_loss << "\n";
    } else if (model_name == "rvq") {
        std::vector<GuidePoseSequence> guides;
        for (const Take* t : train) {
            if (vq_only) {
                GuidePoseSequence g;
                g.poses = t->motion.frames;  // 30 fps tokens for the VQ-only ablation
                guides.push_back(std::move(g));
            } else {
                guides.push_back(subsample_guide_poses(t->motion));
            }
        }
        RvqModel model(cfg.rvq, d_pose, rng);
        RvqTrainLog log = train_rvq(model, guides, n_steps, seed);
        save_rvq(model, out_path, seed, n_steps, log);
        std::cout << "rvq trained: final recon " << log.final_recon << "\n";
    } else if (model_name == "guide") {
        require(!rvq_path.empty(), "train --model guide needs --rvq <checkpoint>");
        RvqModel rvq = load_rvq(rvq_path);
        GuideTransformerConfig gcfg = cfg.guide;
        if (vq_only) {
            gcfg.pose_stride = 1;
            gcfg.max_poses = kMaxWindowFrames;
        }
        GuideTransformer model(gcfg, rvq.cfg.codebook_size, rvq.cfg.residual_depth, 2 * d_a, rng);
        GuideTrainLog log = train_guide_transformer(model, rvq, train, n_steps, seed);
        save_guide(model, out_path, seed, n_steps, log);
        std::cout << "guide transformer trained: final loss " << log.final_loss
                  << ", level accuracy";
        for (float a : log.level_accuracy) std::cout << " " << a;
        std::cout << "\n";
    } else if (model_name == "face") {
        bool use_lips = ablation != "wo_l";
        require(!lip_path.empty() || !use_lips,
                "train --model face needs --lip <checkpoint> (or --ablation wo_l)");
        LipRegressor lip;
        if (use_lips) lip = load_lip_regressor(lip_path);
        FaceModel model = make_face_model(cfg.denoiser, cfg.schedule_steps, d_a,
                                          (int)train[0]->lips.frames.cols(), true, use_lips, rng);
        DiffusionTrainLog log =
            train_face_model(model, use_lips ? &lip : nullptr, train, n_steps, seed);
        save_face_model(model, out_path, seed, n_steps, log);
        std::cout << "face model trained: final loss " << log.final_loss << "\n";
    } else if (model_name == "body") {
        auto [use_audio, use_guides] =
            ablation_flags(ablation.empty() ? SystemKind::full : system_from_name(ablation));
        BodyModel model = make_body_model(cfg.denoiser, cfg.schedule_steps, d_a, d_pose, use_audio,
                                          use_guides, rng);
        DiffusionTrainLog log = train_body_model(model, train, n_steps, seed);
        save_body_model(model, out_path, seed, n_steps, log);
        std::cout << "body model trained: final loss " << log.final_loss << "\n";
    } else {
        throw ConvoError("unknown model: " + model_name);
    }
    return 0;
}

struct LoadedModels {
    LipRegressor lip;
    FaceModel face;
    RvqModel rvq;
    GuideTransformer guide;
    BodyModel body;
    ConversationModels ptrs() { return ConversationModels{&lip, &face, &rvq, &guide, &body}; }
};

LoadedModels load_models(const std::filesystem::path& dir) {
    LoadedModels m;
    m.lip = load_lip_regressor(dir / "lip.ckpt");
    m.face = load_face_model(dir / "face.ckpt");
    m.rvq = load_rvq(dir / "rvq.ckpt");
    m.guide = load_guide(dir / "guide.ckpt");
    m.body = load_body_model(dir / "body.ckpt");
    return m;
}

int cmd_sample(const ToolkitConfig& cfg, const std::string& mode, const std::string& audio_dir,
               const std::string& features_arg, const std::string& models_dir,
               const std::string& out_dir, float top_p, float guidance, int sample_steps,
               uint64_t seed) {
    AudioFeatures audio = load_audio_arg(audio_dir, features_arg);
    int steps = sample_steps > 0 ? sample_steps : cfg.sample_steps;
    auto dir = std::filesystem::path(models_dir);

    if (mode == "guide-only") {
        RvqModel rvq = load_rvq(dir / "rvq.ckpt");
        GuideTransformer guide = load_guide(dir / "guide.ckpt");
        int max_frames = guide.cfg.max_poses * guide.cfg.pose_stride;
        if (audio.length() > max_frames) audio = audio.slice(0, max_frames);
        Rng rng(seed);
        TokenSequence tokens;
        GuidePoseSequence poses = generate_guide_poses(guide, rvq, audio, top_p, rng, &tokens);
        std::filesystem::create_directories(out_dir);
        save_matrix(std::filesystem::path(out_dir) / "guides.f32", poses.poses, 1.f);
        std::cout << "sampled " << tokens.tokens.size() << " tokens -> " << poses.length()
                  << " guide poses\n";
        return 0;
    }
    if (mode == "vq-only") {
        RvqModel rvq = load_rvq(dir / "rvq30.ckpt");
        GuideTransformer guide = load_guide(dir / "guide30.ckpt");
        Rng rng(seed);
        MotionSequence motion = vq_only_generate(guide, rvq, audio, top_p, rng, kVqOnlyMaxFrames);
        save_generated(out_dir, FaceSequence{}, motion);
        std::cout << "vq-only motion: " << motion.length() << " frames\n";
        return 0;
    }
    if (mode == "face") {
        LipRegressor lip = load_lip_regressor(dir / "lip.ckpt");
        FaceModel face = load_face_model(dir / "face.ckpt");
        if (audio.length() > kMaxWindowFrames) audio = audio.slice(0, kMaxWindowFrames);
        Rng rng(seed);
        FaceSequence seq = generate_face(face, &lip, audio, guidance, rng, steps);
        std::filesystem::create_directories(out_dir);
        save_matrix(std::filesystem::path(out_dir) / "face.f32", seq.frames, (float)kMotionFps);
        std::cout << "sampled " << seq.length() << " face frames\n";
        return 0;
    }
    // full pipeline
    LoadedModels models = load_models(dir);
    int max_frames = models.guide.cfg.max_poses * kGuideStride;
    if (audio.length() > max_frames) audio = audio.slice(0, max_frames);
    SampleParams params;
    params.top_p = top_p;
    params.guidance = guidance;
    params.sample_steps = steps;
    params.seed_guides = seed;
    params.seed_body = seed + 1;
    params.seed_face = seed + 2;
    ConversationModels ptrs = models.ptrs();
    auto [face_seq, motion] = generate_conversation_motion(ptrs, audio, params);
    save_generated(out_dir, face_seq, motion);
    std::cout << "sampled " << motion.length() << " frames of face and body motion -> " << out_dir
              << "\n";
    return 0;
}

int cmd_eval(const ToolkitConfig& cfg, const std::string& data_dir, const std::string& models_dir,
             const std::string& systems_arg, const std::string& split_name_arg,
             const std::string& seeds_arg, const std::string& out_path, int group_size,
             int sample_steps, float top_p, float guidance) {
    Corpus corpus = load_corpus(data_dir);
    auto test = split_ptrs(corpus, split_from_name(split_name_arg));
    auto train = split_ptrs(corpus, Split::train);
    std::vector<uint64_t> seeds;
    {
        std::stringstream ss(seeds_arg);
        std::string tok;
        while (std::getline(ss, tok, ',')) seeds.push_back((uint64_t)std::stoull(tok));
    }
    int steps = sample_steps > 0 ? sample_steps : cfg.sample_steps;
    auto dir = std::filesystem::path(models_dir);

    std::vector<EvalReport> parts;
    std::stringstream systems(systems_arg);
    std::string sys_name;
    while (std::getline(systems, sys_name, ',')) {
        SystemKind kind = system_from_name(sys_name);
        std::cout << "evaluating " << sys_name << "...\n";
        if (kind == SystemKind::gt) {
            parts.push_back(evaluate_ground_truth(test, seeds[0]));
            continue;
        }
        SystemSampler sampler;
        if (kind == SystemKind::random_window) {
            sampler = [train](const Take& t, uint64_t seed) {
                Rng rng(seed);
                int len = std::min(t.length(), kMaxWindowFrames);
                auto [face, motion] = random_baseline(train, len, rng);
                return SystemOutput{std::move(face), std::move(motion), true};
            };
        } else if (kind == SystemKind::knn) {
            sampler = [train](const Take& t, uint64_t seed) {
                (void)seed;  // deterministic retrieval
                int len = std::min(t.length(), kMaxWindowFrames);
                auto [face, motion] = knn_baseline(t.audio.slice(0, len), train);
                return SystemOutput{std::move(face), std::move(motion), true};
            };
        } else if (kind == SystemKind::vq_only) {
            auto rvq = std::make_shared<RvqModel>(load_rvq(dir / "rvq30.ckpt"));
            auto guide = std::make_shared<GuideTransformer>(load_guide(dir / "guide30.ckpt"));
            sampler = [rvq, guide, top_p](const Take& t, uint64_t seed) {
                Rng rng(seed);
                MotionSequence motion =
                    vq_only_generate(*guide, *rvq, t.audio, top_p, rng, kVqOnlyMaxFrames);
                return SystemOutput{FaceSequence{}, std::move(motion), false};
            };
        } else {
            auto models = std::make_shared<LoadedModels>(load_models(dir));
            if (kind != SystemKind::full) {
                std::string ckpt = std::string("body_") + system_name(kind) + ".ckpt";
                models->body = load_body_model(dir / ckpt);
            }
            sampler = [models, top_p, guidance, steps](const Take& t, uint64_t seed) {
                int max_frames = models->guide.cfg.max_poses * kGuideStride;
                AudioFeatures audio =
                    t.audio.length() > max_frames ? t.audio.slice(0, max_frames) : t.audio;
                SampleParams params;
                params.top_p = top_p;
                params.guidance = guidance;
                params.sample_steps = steps;
                params.seed_guides = seed;
                params.seed_body = seed + 1;
                params.seed_face = seed + 2;
                ConversationModels ptrs = models->ptrs();
                auto [face, motion] = generate_conversation_motion(ptrs, audio, params);
                return SystemOutput{std::move(face), std::move(motion), true};
            };
        }
        parts.push_back(evaluate_system(sys_name, sampler, test, seeds, group_size));
    }
    EvalReport report = merge_reports(std::move(parts));
    report.seeds = seeds;
    report.group_size = group_size;
    std::ofstream f(out_path);
    require(f.good(), "cannot write report: " + out_path);
    f << report.to_json().dump(2) << "\n";
    std::cout << "report -> " << out_path << "\n";
    return 0;
}

int cmd_visualize(const std::string& take_dir, const std::string& skeleton_path,
                  const std::string& out_dir, const std::string& side_by_side, bool face_strip) {
    Skeleton skel = load_skeleton_or_default(skeleton_path);
    MotionSequence motion;
    motion.frames = load_matrix(std::filesystem::path(take_dir) / "motion.f32");
    FaceSequence face;
    auto face_path = std::filesystem::path(take_dir) / "face.f32";
    if (std::filesystem::exists(face_path)) face.frames = load_matrix(face_path);

    MotionSequence other;
    bool has_other = !side_by_side.empty();
    if (has_other) {
        other.frames = load_matrix(std::filesystem::path(side_by_side) / "motion.f32");
        int common = std::min(other.length(), motion.length());
        other.frames = other.frames.topRows(common).eval();
        motion.frames = motion.frames.topRows(common).eval();
    }
    VizOptions opt;
    opt.face_strip = face_strip;
    int frames = visualize(motion, skel, out_dir, opt, has_other ? &other : nullptr,
                           face.length() > 0 ? &face : nullptr);
    std::cout << "wrote " << frames << " frames to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale conversational motion synthesis toolkit"};
    app.require_subcommand(1);
    app.fallthrough();  // global --config/--seed may follow the subcommand

    std::string config_path;
    uint64_t seed = 1;
    app.add_option("--config", config_path, "JSON configuration file");
    app.add_option("--seed", seed, "global seed");

    auto* gen = app.add_subcommand("generate-data", "generate a synthetic dyadic corpus");
    std::string gen_out = "corpus";
    int gen_takes = 20;
    float gen_duration = -1.f;
    gen->add_option("--out", gen_out, "output corpus directory");
    gen->add_option("--takes", gen_takes, "number of takes");
    gen->add_option("--duration", gen_duration, "take duration in seconds");

    auto* train = app.add_subcommand("train", "train one model");
    std::string train_model, train_data = "corpus", train_out, train_rvq, train_lip, train_abl;
    bool train_vq_only = false;
    int train_steps = -1;
    train->add_option("--model", train_model, "lip|face|rvq|guide|body")->required();
    train->add_option("--data", train_data, "corpus directory");
    train->add_option("--out", train_out, "output checkpoint path")->required();
    train->add_option("--rvq", train_rvq, "rvq checkpoint (guide training)");
    train->add_option("--lip", train_lip, "lip checkpoint (face training)");
    train->add_option("--ablation", train_abl, "wo_a|wo_p|uncond (body) or wo_l (face)");
    train->add_flag("--vq-only", train_vq_only, "30 fps tokenization (rvq/guide)");
    train->add_option("--steps", train_steps, "training steps");

    auto* sample = app.add_subcommand("sample", "generate motion for audio");
    std::string sample_audio, sample_features = "builtin", sample_models = "models",
                sample_out = "sampled";
    float top_p = 0.9f, guidance = 1.f;
    int sample_steps = -1;
    bool mode_full = false, mode_face = false, mode_guide = false, mode_vq = false;
    sample->add_flag("--full", mode_full, "full face+body pipeline (default)");
    sample->add_flag("--face", mode_face, "face pipeline only");
    sample->add_flag("--guide-only", mode_guide, "guide poses only");
    sample->add_flag("--vq-only", mode_vq, "vq-only ablation pipeline");
    sample->add_option("--audio", sample_audio, "take directory providing audio features");
    sample->add_option("--audio-features", sample_features,
                       "'builtin' (take features) or an external feature file");
    sample->add_option("--models", sample_models, "models directory");
    sample->add_option("--out", sample_out, "output directory");
    sample->add_option("--top-p", top_p, "nucleus sampling cumulative probability");
    sample->add_option("--guidance-scale", guidance, "classifier-free guidance scale");
    sample->add_option("--steps", sample_steps, "reverse diffusion steps");

    auto* eval = app.add_subcommand("eval", "evaluate systems into a JSON report");
    std::string eval_data = "corpus", eval_models = "models", eval_systems = "gt,full",
                eval_split = "test", eval_seeds = "1,2,3", eval_out = "report.json";
    int group_size = kDefaultGroupSize, eval_steps = -1;
    float eval_top_p = 0.9f, eval_guidance = 1.f;
    eval->add_option("--data", eval_data, "corpus directory");
    eval->add_option("--models", eval_models, "models directory");
    eval->add_option("--system", eval_systems,
                     "comma list: gt,random,knn,full,wo_a,wo_p,uncond,vq_only");
    eval->add_option("--split", eval_split, "train|val|test");
    eval->add_option("--seeds", eval_seeds, "comma list of seeds");
    eval->add_option("--out", eval_out, "report path");
    eval->add_option("--group-size", group_size, "samples per audio for Div_sample");
    eval->add_option("--sample-steps", eval_steps, "reverse diffusion steps");
    eval->add_option("--top-p", eval_top_p, "nucleus p");
    eval->add_option("--guidance-scale", eval_guidance, "guidance scale");

    auto* viz = app.add_subcommand("visualize", "render stick-figure frames");
    std::string viz_take, viz_skel = "data/skeleton_desk104.json", viz_out = "frames", viz_side;
    bool viz_face_strip = false;
    viz->add_option("--take", viz_take, "take or generated output directory")->required();
    viz->add_option("--skeleton", viz_skel, "skeleton definition file");
    viz->add_option("--out", viz_out, "output frame directory");
    viz->add_option("--side-by-side", viz_side, "second directory for A/B layout");
    viz->add_flag("--face-strip", viz_face_strip, "append face-code strip chart");

    CLI11_PARSE(app, argc, argv);

    try {
        ToolkitConfig cfg = load_config(config_path);
        if (gen->parsed())
            return cmd_generate_data(cfg, gen_out, gen_takes,
                                     gen_duration > 0 ? gen_duration : cfg.duration_s, seed);
        if (train->parsed())
            return cmd_train(cfg, train_model, train_data, train_out, train_rvq, train_lip,
                             train_abl, train_vq_only, train_steps, seed);
        if (sample->parsed()) {
            std::string mode =
                mode_face ? "face" : mode_guide ? "guide-only" : mode_vq ? "vq-only" : "full";
            (void)mode_full;
            return cmd_sample(cfg, mode, sample_audio, sample_features, sample_models, sample_out,
                              top_p, guidance, sample_steps, seed);
        }
        if (eval->parsed())
            return cmd_eval(cfg, eval_data, eval_models, eval_systems, eval_split, eval_seeds,
                            eval_out, group_size, eval_steps, eval_top_p, eval_guidance);
        if (viz->parsed())
            return cmd_visualize(viz_take, viz_skel, viz_out, viz_side, viz_face_strip);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
