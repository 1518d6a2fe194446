#pragma once

#include <convo/face.hpp>
#include <convo/guide_transformer.hpp>

namespace convo {

// Body diffusion: denoises 30 fps joint-angle sequences conditioned on
// dyad audio (stream A) and 1 fps guide poses (stream B). Guide rows carry
// their anchor-frame timestamps so the network knows where each 1 fps
// anchor sits inside the 30 fps window.
struct BodyModel {
    DenoiserConfig cfg;
    NoiseSchedule schedule;
    DenoiserNet net;
    nn::Param data_mean, data_std;
    bool use_audio = true, use_guides = true;
    int d_a = 0, d_pose = 0;

    nn::ParamList params() {
        nn::ParamList pl = net.params();
        pl.add("data_mean", &data_mean);
        pl.add("data_std", &data_std);
        return pl;
    }
};

inline BodyModel make_body_model(const DenoiserConfig& cfg, int schedule_steps, int d_a, int d_pose,
                                 bool use_audio, bool use_guides, Rng& rng) {
    BodyModel m{cfg,
                NoiseSchedule::cosine(schedule_steps),
                DenoiserNet(cfg, d_pose, 2 * d_a, d_pose, schedule_steps, rng),
                nn::make_zero_param(1, d_pose),
                nn::make_zero_param(1, d_pose),
                use_audio,
                use_guides,
                d_a,
                d_pose};
    m.data_std.value.setOnes();
    return m;
}

inline std::vector<float> guide_anchor_frames(int k_poses, int stride = kGuideStride) {
    std::vector<float> anchors((size_t)k_poses);
    for (int k = 0; k < k_poses; ++k) anchors[(size_t)k] = (float)((k + 1) * stride - 1);
    return anchors;
}

inline ConditioningBundle body_conditioning(const BodyModel& model, const AudioFeatures* audio,
                                            const GuidePoseSequence* guides) {
    ConditioningBundle cond;
    if (model.use_audio && audio) cond.stream_a = audio->stacked();
    if (model.use_guides && guides) {
        cond.stream_b = detail::normalize_rows(guides->poses, model.data_mean, model.data_std);
        cond.stream_b_positions = guide_anchor_frames(guides->length());
    }
    return cond;
}

// Trains with ground-truth guides subsampled from each window; the
// conditioning dropout applies independently to the audio and guide slots.
inline DiffusionTrainLog train_body_model(BodyModel& model, const std::vector<const Take*>& takes,
                                          int steps, uint64_t seed) {
    require(!takes.empty(), "body model corpus is empty");
    detail::fit_data_stats(takes, /*face_space=*/false, model.data_mean, model.data_std);
    Rng rng(seed);
    nn::Tape tape;
    nn::Adam opt(model.cfg.lr);
    DiffusionTrainLog log;
    for (int step = 0; step < steps; ++step) {
        const Take& take = *takes[(size_t)rng.uniform_int(0, (int)takes.size() - 1)];
        Take window = take.length() > kMinWindowFrames ? sample_training_window(take, rng) : take;
        Mat x0 = detail::normalize_rows(window.motion.frames, model.data_mean, model.data_std);
        GuidePoseSequence guides;
        if (model.use_guides) guides = subsample_guide_poses(window.motion);
        ConditioningBundle cond =
            body_conditioning(model, &window.audio, model.use_guides ? &guides : nullptr);
        tape.clear();
        nn::Node* loss_node = nullptr;
        float v = training_loss(model.net, x0, cond, model.schedule, rng, model.cfg.cond_drop_prob,
                                &tape, &loss_node);
        if (!std::isfinite(v))
            throw ConvoError("NaN loss in body model training at step " + std::to_string(step));
        tape.backward(loss_node);
        opt.step(tape);
        if (step % 50 == 0) log.loss.push_back(v);
        log.final_loss = v;
    }
    return log;
}

// 30 fps infill around the given 1 fps guide poses. The output covers
// exactly 30*K frames; the guides condition softly through cross
// attention, they are not interpolation constraints.
inline MotionSequence generate_body(BodyModel& model, const AudioFeatures& audio,
                                    const GuidePoseSequence& guides, float guidance, Rng& rng,
                                    int sample_steps = 250) {
    require(guides.length() >= 1, "need at least one guide pose");
    require(guides.dim() == model.d_pose, "guide pose dim mismatch");
    int k = guides.length();
    require(audio.length() / kGuideStride == k, "guide/audio length mismatch");
    int t_frames = k * kGuideStride;
    AudioFeatures trimmed = audio.length() == t_frames ? audio : audio.slice(0, t_frames);
    ConditioningBundle cond = body_conditioning(model, &trimmed, &guides);
    Mat norm = reverse_sample(model.net, cond, model.schedule, guidance, rng, t_frames,
                              model.d_pose, sample_steps);
    MotionSequence out;
    out.frames = detail::denormalize_rows(norm, model.data_mean, model.data_std);
    return out;
}

inline void save_body_model(const BodyModel& model, const std::filesystem::path& path,
                            uint64_t seed, int step, const DiffusionTrainLog& log) {
    Json manifest = {{"model", "body"},
                     {"config", model.cfg.to_json()},
                     {"schedule", model.schedule.to_json()},
                     {"d_a", model.d_a},
                     {"d_pose", model.d_pose},
                     {"use_audio", model.use_audio},
                     {"use_guides", model.use_guides},
                     {"seed", seed},
                     {"step", step},
                     {"losses", {{"mse", log.final_loss}}}};
    nn::ParamList pl = const_cast<BodyModel&>(model).params();
    save_checkpoint(path, manifest, pl);
}

inline BodyModel load_body_model(const std::filesystem::path& path) {
    Json manifest = read_checkpoint_manifest(path);
    require(manifest.value("model", "") == "body", "checkpoint is not a body model");
    Rng rng(0);
    BodyModel model = make_body_model(DenoiserConfig::from_json(manifest.at("config")),
                                      manifest.at("schedule").at("steps").get<int>(),
                                      manifest.at("d_a").get<int>(),
                                      manifest.at("d_pose").get<int>(),
                                      manifest.value("use_audio", true),
                                      manifest.value("use_guides", true), rng);
    nn::ParamList pl = model.params();
    load_checkpoint_params(path, pl);
    return model;
}

// ---- full system -----------------------------------------------------------

struct ConversationModels {
    LipRegressor* lip = nullptr;
    FaceModel* face = nullptr;
    RvqModel* rvq = nullptr;
    GuideTransformer* guide = nullptr;
    BodyModel* body = nullptr;
};

struct SampleParams {
    float top_p = 0.9f;
    float guidance = 1.f;
    int sample_steps = 250;
    uint64_t seed_guides = 1, seed_body = 2, seed_face = 3;
};

// Full audio -> (face, motion) generation: the guide transformer samples
// 1 fps poses, body diffusion infills 30 fps motion, the face pipeline
// runs in parallel on the same audio. Outputs are trimmed to the common
// 30*K frame span.
inline std::pair<FaceSequence, MotionSequence> generate_conversation_motion(
    const ConversationModels& models, const AudioFeatures& audio, const SampleParams& params) {
    require(models.lip && models.face && models.rvq && models.guide && models.body,
            "all five trained models are required");
    require(audio.length() >= kMotionFps, "audio shorter than 1 s");
    Rng rng_guides(params.seed_guides), rng_body(params.seed_body), rng_face(params.seed_face);
    GuidePoseSequence guides =
        generate_guide_poses(*models.guide, *models.rvq, audio, params.top_p, rng_guides);
    int t_frames = guides.length() * kGuideStride;
    AudioFeatures trimmed = audio.length() == t_frames ? audio : audio.slice(0, t_frames);
    MotionSequence motion = generate_body(*models.body, trimmed, guides, params.guidance, rng_body,
                                          params.sample_steps);
    FaceSequence face = generate_face(*models.face, models.lip, trimmed, params.guidance, rng_face,
                                      params.sample_steps);
    return {std::move(face), std::move(motion)};
}

}  // namespace convo
