#pragma once

#include <convo/data.hpp>
#include <convo/diffusion.hpp>

namespace convo {

// ---- audio-to-lip regressor --------------------------------------------------
// Temporal convolution stack over the self stream only, receptive field
// about half a second at 30 fps. Targets are z-scored per dim.

struct LipRegressorConfig {
    int hidden = 64;
    int kernel = 5;
    float lr = 1e-3f;

    Json to_json() const { return {{"hidden", hidden}, {"kernel", kernel}, {"lr", lr}}; }
    static LipRegressorConfig from_json(const Json& j) {
        LipRegressorConfig c;
        c.hidden = j.value("hidden", c.hidden);
        c.kernel = j.value("kernel", c.kernel);
        c.lr = j.value("lr", c.lr);
        return c;
    }
};

class LipRegressor {
public:
    LipRegressorConfig cfg;
    int d_audio = 0;  // self-stream feature width
    int d_out = 0;    // d_l * 3

    nn::Conv1dCentered conv1, conv2, conv3;
    nn::Param target_mean, target_std;

    LipRegressor() = default;
    LipRegressor(const LipRegressorConfig& config, int audio_dim, int out_dim, Rng& rng)
        : cfg(config), d_audio(audio_dim), d_out(out_dim) {
        conv1 = nn::Conv1dCentered(rng, d_audio, cfg.hidden, cfg.kernel);
        conv2 = nn::Conv1dCentered(rng, cfg.hidden, cfg.hidden, cfg.kernel);
        conv3 = nn::Conv1dCentered(rng, cfg.hidden, d_out, cfg.kernel);
        target_mean = nn::make_zero_param(1, d_out);
        target_std.value = Mat::Ones(1, d_out);
    }

    nn::Node* forward_graph(nn::Tape& t, const Mat& audio_self) {
        require((int)audio_self.cols() == d_audio, "lip regressor audio width mismatch");
        nn::Node* h = nn::gelu(t, conv1.fwd(t, t.constant(audio_self)));
        h = nn::gelu(t, conv2.fwd(t, h));
        return conv3.fwd(t, h);
    }

    nn::ParamList params() {
        nn::ParamList pl;
        pl.merge("conv1", conv1.params());
        pl.merge("conv2", conv2.params());
        pl.merge("conv3", conv3.params());
        pl.add("target_mean", &target_mean);
        pl.add("target_std", &target_std);
        return pl;
    }
};

inline LipSequence predict_lips(LipRegressor& model, const AudioFeatures& audio) {
    nn::Tape t;
    Mat norm = model.forward_graph(t, audio.self)->value;
    LipSequence out;
    out.frames = (norm.array().rowwise() * model.target_std.value.row(0).array()).rowwise() +
                 model.target_mean.value.row(0).array();
    return out;
}

struct LipTrainLog {
    std::vector<float> loss;
    float final_loss = 0.f;
};

inline LipTrainLog train_lip_regressor(LipRegressor& model, const std::vector<const Take*>& takes,
                                       int steps, uint64_t seed) {
    require(!takes.empty(), "lip regressor corpus is empty");
    // corpus statistics for the target normalization
    double count = 0;
    DVec mean = DVec::Zero(model.d_out), sq = DVec::Zero(model.d_out);
    for (const Take* t : takes) {
        for (int r = 0; r < t->lips.frames.rows(); ++r) {
            mean += t->lips.frames.row(r).transpose().cast<double>();
            sq += t->lips.frames.row(r).transpose().cast<double>().cwiseAbs2();
            ++count;
        }
    }
    mean /= count;
    DVec var = (sq / count - mean.cwiseAbs2()).cwiseMax(1e-8);
    model.target_mean.value = mean.transpose().cast<float>();
    model.target_std.value = var.cwiseSqrt().transpose().cast<float>();

    Rng rng(seed);
    nn::Tape tape;
    nn::Adam opt(model.cfg.lr);
    LipTrainLog log;
    for (int step = 0; step < steps; ++step) {
        const Take& take = *takes[(size_t)rng.uniform_int(0, (int)takes.size() - 1)];
        Take window = take.length() > kMinWindowFrames ? sample_training_window(take, rng) : take;
        Mat target = ((window.lips.frames.rowwise() - model.target_mean.value.row(0)).array()
                          .rowwise() /
                      model.target_std.value.row(0).array())
                         .matrix();
        tape.clear();
        nn::Node* pred = model.forward_graph(tape, window.audio.self);
        nn::Node* loss = nn::mse(tape, pred, target);
        float v = loss->value(0, 0);
        if (!std::isfinite(v))
            throw ConvoError("NaN loss in lip regressor training at step " + std::to_string(step));
        tape.backward(loss);
        opt.step(tape);
        if (step % 50 == 0) log.loss.push_back(v);
        log.final_loss = v;
    }
    return log;
}

inline void save_lip_regressor(const LipRegressor& model, const std::filesystem::path& path,
                               uint64_t seed, int step, const LipTrainLog& log) {
    Json manifest = {{"model", "lip"},
                     {"config", model.cfg.to_json()},
                     {"d_audio", model.d_audio},
                     {"d_out", model.d_out},
                     {"seed", seed},
                     {"step", step},
                     {"losses", {{"mse", log.final_loss}}}};
    nn::ParamList pl = const_cast<LipRegressor&>(model).params();
    save_checkpoint(path, manifest, pl);
}

inline LipRegressor load_lip_regressor(const std::filesystem::path& path) {
    Json manifest = read_checkpoint_manifest(path);
    require(manifest.value("model", "") == "lip", "checkpoint is not a lip regressor");
    Rng rng(0);
    LipRegressor model(LipRegressorConfig::from_json(manifest.at("config")),
                       manifest.at("d_audio").get<int>(), manifest.at("d_out").get<int>(), rng);
    nn::ParamList pl = model.params();
    load_checkpoint_params(path, pl);
    return model;
}

// ---- face diffusion model ------------------------------------------------------
// Denoises 256-dim expression codes conditioned on dyad audio (stream A)
// and predicted lip vertices (stream B) via cross attention.

struct FaceModel {
    DenoiserConfig cfg;
    NoiseSchedule schedule;
    DenoiserNet net;
    nn::Param data_mean, data_std;
    nn::Param lip_mean, lip_std;  // conditioning stream is z-scored too
    bool use_audio = true, use_lips = true;
    int d_a = 0, d_lip = 0;

    nn::ParamList params() {
        nn::ParamList pl = net.params();
        pl.add("data_mean", &data_mean);
        pl.add("data_std", &data_std);
        pl.add("lip_mean", &lip_mean);
        pl.add("lip_std", &lip_std);
        return pl;
    }
};

inline FaceModel make_face_model(const DenoiserConfig& cfg, int schedule_steps, int d_a, int d_lip,
                                 bool use_audio, bool use_lips, Rng& rng) {
    FaceModel m{cfg,
                NoiseSchedule::cosine(schedule_steps),
                DenoiserNet(cfg, kFaceDim, 2 * d_a, d_lip, schedule_steps, rng),
                nn::make_zero_param(1, kFaceDim),
                nn::make_zero_param(1, kFaceDim),
                nn::make_zero_param(1, d_lip),
                nn::make_zero_param(1, d_lip),
                use_audio,
                use_lips,
                d_a,
                d_lip};
    m.data_std.value.setOnes();
    m.lip_std.value.setOnes();
    return m;
}

namespace detail {

inline void fit_data_stats(const std::vector<const Take*>& takes, bool face_space,
                           nn::Param& mean_out, nn::Param& std_out) {
    int d = face_space ? (int)takes[0]->face.frames.cols() : (int)takes[0]->motion.frames.cols();
    double count = 0;
    DVec mean = DVec::Zero(d), sq = DVec::Zero(d);
    for (const Take* t : takes) {
        const Mat& f = face_space ? t->face.frames : t->motion.frames;
        for (int r = 0; r < f.rows(); ++r) {
            mean += f.row(r).transpose().cast<double>();
            sq += f.row(r).transpose().cast<double>().cwiseAbs2();
            ++count;
        }
    }
    mean /= count;
    DVec var = (sq / count - mean.cwiseAbs2()).cwiseMax(1e-8);
    mean_out.value = mean.transpose().cast<float>();
    std_out.value = var.cwiseSqrt().transpose().cast<float>();
}

inline Mat normalize_rows(const Mat& x, const nn::Param& mean, const nn::Param& stddev) {
    return ((x.rowwise() - mean.value.row(0)).array().rowwise() / stddev.value.row(0).array())
        .matrix();
}

inline Mat denormalize_rows(const Mat& x, const nn::Param& mean, const nn::Param& stddev) {
    return ((x.array().rowwise() * stddev.value.row(0).array()).rowwise() +
            mean.value.row(0).array())
        .matrix();
}

}  // namespace detail

inline ConditioningBundle face_conditioning(const FaceModel& model, const AudioFeatures& audio,
                                            const LipSequence* lips) {
    ConditioningBundle cond;
    if (model.use_audio) cond.stream_a = audio.stacked();
    if (model.use_lips && lips)
        cond.stream_b = detail::normalize_rows(lips->frames, model.lip_mean, model.lip_std);
    return cond;
}

struct DiffusionTrainLog {
    std::vector<float> loss;
    float final_loss = 0.f;
};

// Trains the face denoiser on expression codes conditioned on audio and
// the frozen lip regressor's predictions.
inline DiffusionTrainLog train_face_model(FaceModel& model, LipRegressor* regressor,
                                          const std::vector<const Take*>& takes, int steps,
                                          uint64_t seed) {
    require(!takes.empty(), "face model corpus is empty");
    require(!model.use_lips || regressor, "face model configured for lips needs a regressor");
    detail::fit_data_stats(takes, /*face_space=*/true, model.data_mean, model.data_std);
    if (model.use_lips) {
        // scale stats for the lip conditioning stream, from the corpus lips
        double count = 0;
        DVec mean = DVec::Zero(model.d_lip), sq = DVec::Zero(model.d_lip);
        for (const Take* t : takes)
            for (int r = 0; r < t->lips.frames.rows(); ++r) {
                mean += t->lips.frames.row(r).transpose().cast<double>();
                sq += t->lips.frames.row(r).transpose().cast<double>().cwiseAbs2();
                ++count;
            }
        mean /= count;
        DVec var = (sq / count - mean.cwiseAbs2()).cwiseMax(1e-8);
        model.lip_mean.value = mean.transpose().cast<float>();
        model.lip_std.value = var.cwiseSqrt().transpose().cast<float>();
    }
    Rng rng(seed);
    nn::Tape tape;
    nn::Adam opt(model.cfg.lr);
    DiffusionTrainLog log;
    for (int step = 0; step < steps; ++step) {
        const Take& take = *takes[(size_t)rng.uniform_int(0, (int)takes.size() - 1)];
        Take window = take.length() > kMinWindowFrames ? sample_training_window(take, rng) : take;
        Mat x0 = detail::normalize_rows(window.face.frames, model.data_mean, model.data_std);
        LipSequence lips;
        if (model.use_lips) lips = predict_lips(*regressor, window.audio);
        ConditioningBundle cond =
            face_conditioning(model, window.audio, model.use_lips ? &lips : nullptr);
        tape.clear();
        nn::Node* loss_node = nullptr;
        float v = training_loss(model.net, x0, cond, model.schedule, rng, model.cfg.cond_drop_prob,
                                &tape, &loss_node);
        if (!std::isfinite(v))
            throw ConvoError("NaN loss in face model training at step " + std::to_string(step));
        tape.backward(loss_node);
        opt.step(tape);
        if (step % 50 == 0) log.loss.push_back(v);
        log.final_loss = v;
    }
    return log;
}

// Full face generation: predict lips from audio, then run the reverse
// diffusion conditioned on (A, L).
inline FaceSequence generate_face(FaceModel& model, LipRegressor* regressor,
                                  const AudioFeatures& audio, float guidance, Rng& rng,
                                  int sample_steps = 250) {
    require(audio.length() >= kMotionFps, "audio shorter than 1 s");
    LipSequence lips;
    if (model.use_lips) {
        require(regressor, "face model configured for lips needs a regressor");
        lips = predict_lips(*regressor, audio);
    }
    ConditioningBundle cond = face_conditioning(model, audio, model.use_lips ? &lips : nullptr);
    Mat norm = reverse_sample(model.net, cond, model.schedule, guidance, rng, audio.length(),
                              kFaceDim, sample_steps);
    FaceSequence out;
    out.frames = detail::denormalize_rows(norm, model.data_mean, model.data_std);
    return out;
}

inline void save_face_model(const FaceModel& model, const std::filesystem::path& path,
                            uint64_t seed, int step, const DiffusionTrainLog& log) {
    Json manifest = {{"model", "face"},
                     {"config", model.cfg.to_json()},
                     {"schedule", model.schedule.to_json()},
                     {"d_a", model.d_a},
                     {"d_lip", model.d_lip},
                     {"use_audio", model.use_audio},
                     {"use_lips", model.use_lips},
                     {"seed", seed},
                     {"step", step},
                     {"losses", {{"mse", log.final_loss}}}};
    nn::ParamList pl = const_cast<FaceModel&>(model).params();
    save_checkpoint(path, manifest, pl);
}

inline FaceModel load_face_model(const std::filesystem::path& path) {
    Json manifest = read_checkpoint_manifest(path);
    require(manifest.value("model", "") == "face", "checkpoint is not a face model");
    Rng rng(0);
    FaceModel model = make_face_model(DenoiserConfig::from_json(manifest.at("config")),
                                      manifest.at("schedule").at("steps").get<int>(),
                                      manifest.at("d_a").get<int>(),
                                      manifest.at("d_lip").get<int>(),
                                      manifest.value("use_audio", true),
                                      manifest.value("use_lips", true), rng);
    nn::ParamList pl = model.params();
    load_checkpoint_params(path, pl);
    return model;
}

}  // namespace convo
