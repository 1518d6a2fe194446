#pragma once

#include <convo/audio.hpp>
#include <convo/core.hpp>

#include <filesystem>
#include <fstream>
#include <map>

namespace convo {

constexpr int kDefaultLipVerts = 20;
constexpr int kMinWindowFrames = 240;
constexpr int kMaxWindowFrames = 600;
constexpr float kFaceLipScale = 4.f;  // lip mm per face-code unit in the planted layout

// One recorded (or generated) conversation segment for the rendered agent.
// All modalities share T at 30 fps. Roles are diagnostics only: 'S' frames
// where the agent speaks, 'L' where it listens.
struct Take {
    std::string id;
    AudioFeatures audio;
    FaceSequence face;
    MotionSequence motion;
    LipSequence lips;
    std::string roles;

    int length() const { return motion.length(); }

    void validate() const {
        audio.validate();
        int t = motion.length();
        require(face.length() == t && lips.length() == t && audio.length() == t &&
                    (int)roles.size() == t,
                "take modalities must share T");
        require(all_finite(motion.frames) && all_finite(face.frames) && all_finite(lips.frames),
                "take contains non-finite values");
    }

    Take slice(int start, int len) const {
        Take s;
        s.id = id;
        s.audio = audio.slice(start, len);
        s.face.frames = face.frames.middleRows(start, len);
        s.motion.frames = motion.frames.middleRows(start, len);
        s.motion.fps = motion.fps;
        s.lips.frames = lips.frames.middleRows(start, len);
        s.roles = roles.substr((size_t)start, (size_t)len);
        return s;
    }
};

// Style knobs for the synthetic dyad generator.
struct DyadStyle {
    float speech_fraction = 1.f;   // 0 silences every segment (both streams)
    float self_speech_fraction = 1.f;   // per-stream voicing odds, multiplied
    float other_speech_fraction = 1.f;  // with speech_fraction
    float turn_min_s = 2.f, turn_max_s = 5.f;
    float gesture_amp = 0.6f;      // radians, peak arm excursion
    float idle_noise = 0.012f;     // radians, OU noise while listening
    float base_pose_spread = 0.35f;  // radians, per-take arm posture offset
    int d_a = kDefaultAudioDim;
    int lip_verts = kDefaultLipVerts;
};

namespace detail {

// one-pole smoothing, forward then backward so the envelope has no lag
inline std::vector<float> smooth_envelope(const std::vector<float>& x, float alpha) {
    std::vector<float> y(x.size());
    float acc = x.empty() ? 0.f : x[0];
    for (size_t i = 0; i < x.size(); ++i) {
        acc = alpha * acc + (1.f - alpha) * x[i];
        y[i] = acc;
    }
    acc = y.empty() ? 0.f : y.back();
    for (size_t i = y.size(); i-- > 0;) {
        acc = alpha * acc + (1.f - alpha) * y[i];
        y[i] = acc;
    }
    return y;
}

// rest-shape lip ring: vertex 0 top mid, 1 bottom mid, 2 left corner,
// 3 right corner, remainder on an ellipse arc; coordinates in mm
inline Mat lip_rest_shape(int verts) {
    Mat shape(verts, 3);
    const float half_w = 25.f, half_h = 4.f;
    shape.row(0) << 0.f, half_h, 0.f;
    shape.row(1) << 0.f, -half_h, 0.f;
    shape.row(2) << -half_w, 0.f, 0.f;
    shape.row(3) << half_w, 0.f, 0.f;
    for (int i = 4; i < verts; ++i) {
        float ang = 2.f * (float)M_PI * (float)(i - 4) / (float)(verts - 4);
        shape.row(i) << half_w * std::cos(ang), half_h * std::sin(ang), 1.5f;
    }
    return shape;
}

}  // namespace detail

// optional generator diagnostics (raw audio before feature extraction)
struct DyadDebug {
    Waveform wave_self, wave_other;
};

// Deterministic synthetic dyad with recoverable structure: self-speech
// energy drives lip opening and a block of face codes, speech onsets
// trigger smooth arm gesture bursts, listening stretches stay near-still,
// and each take carries its own base posture.
inline Take generate_dyad(uint64_t seed, float duration_s, const DyadStyle& style = {},
                          const Skeleton* skeleton = nullptr, DyadDebug* debug = nullptr) {
    require(duration_s >= 8.f, "dyad duration must be at least 8 s");
    static const Skeleton default_skel = make_desk_skeleton();
    const Skeleton& skel = skeleton ? *skeleton : default_skel;
    const int d_pose = skel.dof();
    const int sr = 16000;
    const int t_frames = (int)(duration_s * kMotionFps);
    const size_t n_samples = (size_t)(duration_s * sr);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

    // --- turn taking ---------------------------------------------------
    // segments alternate speakers; later streams are silenced entirely if
    // style.speech_fraction says so
    struct Segment {
        int start_frame, end_frame;
        int speaker;  // 0 self, 1 other
    };
    std::vector<Segment> segments;
    {
        int speaker = rng.uniform_int(0, 1);
        int at = 0;
        while (at < t_frames) {
            int len = (int)(rng.uniform(style.turn_min_s, style.turn_max_s) * kMotionFps);
            segments.push_back({at, std::min(at + len, t_frames), speaker});
            at += len;
            speaker = 1 - speaker;
        }
    }

    // --- audio ----------------------------------------------------------
    std::vector<float> wave[2];
    wave[0].assign(n_samples, 0.f);
    wave[1].assign(n_samples, 0.f);
    float f0[2] = {rng.uniform(110.f, 135.f), rng.uniform(175.f, 210.f)};
    float syllable_hz[2] = {rng.uniform(2.5f, 4.f), rng.uniform(2.5f, 4.f)};
    std::vector<float> frame_env[2];
    frame_env[0].assign((size_t)t_frames, 0.f);
    frame_env[1].assign((size_t)t_frames, 0.f);

    for (const Segment& seg : segments) {
        float odds = style.speech_fraction * (seg.speaker == 0 ? style.self_speech_fraction
                                                               : style.other_speech_fraction);
        bool voiced = rng.uniform() < odds;
        if (!voiced) continue;
        int s = seg.speaker;
        float phase = rng.uniform(0.f, 2.f * (float)M_PI);
        size_t s0 = (size_t)seg.start_frame * sr / kMotionFps;
        size_t s1 = std::min((size_t)seg.end_frame * sr / kMotionFps, n_samples);
        for (size_t i = s0; i < s1; ++i) {
            float tt = (float)i / sr;
            float am = 0.55f + 0.45f * std::sin(2.f * (float)M_PI * syllable_hz[s] * tt + phase);
            // short fade at segment edges
            float edge = std::min(1.f, std::min((float)(i - s0), (float)(s1 - i)) / (0.08f * sr));
            float v = 0.f;
            for (int h = 1; h <= 4; ++h)
                v += std::sin(2.f * (float)M_PI * f0[s] * h * tt) / (float)h;
            wave[s][i] = 0.25f * am * edge * v;
        }
        for (int fr = seg.start_frame; fr < seg.end_frame; ++fr) {
            float tt = (fr + 0.5f) / (float)kMotionFps;
            float am = 0.55f + 0.45f * std::sin(2.f * (float)M_PI * syllable_hz[s] * tt + phase);
            frame_env[s][(size_t)fr] = am;
        }
    }
    for (int s = 0; s < 2; ++s)
        for (size_t i = 0; i < n_samples; ++i) wave[s][i] += 0.0015f * rng.normal();

    std::vector<float> env_self = detail::smooth_envelope(frame_env[0], 0.6f);
    std::vector<float> env_other = detail::smooth_envelope(frame_env[1], 0.6f);

    // --- lips -----------------------------------------------------------
    Mat rest = detail::lip_rest_shape(style.lip_verts);
    Mat lips(t_frames, style.lip_verts * 3);
    float smile_state = 0.f;
    for (int t = 0; t < t_frames; ++t) {
        float opening = 2.f + 11.f * env_self[(size_t)t] + 0.05f * rng.normal();  // mm
        // mouth width widens with speech plus a small personality drift
        smile_state = 0.995f * smile_state + 0.025f * rng.normal();
        float widen = 1.2f * env_self[(size_t)t] + 0.45f * smile_state;
        for (int v = 0; v < style.lip_verts; ++v) {
            float x = rest(v, 0), y = rest(v, 1), z = rest(v, 2);
            float arc = rest(v, 1) / 4.f;  // -1..1 weight, top verts positive
            y += 0.5f * opening * arc;
            x += widen * (x >= 0.f ? 1.f : -1.f) * std::fabs(x) / 25.f;
            lips(t, v * 3 + 0) = x;
            lips(t, v * 3 + 1) = y;
            lips(t, v * 3 + 2) = z;
        }
    }

    // --- face codes -------------------------------------------------------
    // The expression space is opaque to the models but the dataset defines
    // it: the first d_l*3 dims hold the lip geometry under the fixed
    // readout face_codes_to_lips (the stand-in for the avatar decoder's
    // lip region), a block of speech-envelope loadings follows, then slow
    // drift, then low-motion filler.
    const int lip_dims = style.lip_verts * 3;
    require(lip_dims + 32 <= kFaceDim, "face space too small for the planted layout");
    Mat face(t_frames, kFaceDim);
    Vec loadings(16);
    for (int i = 0; i < 16; ++i) loadings(i) = rng.uniform(0.6f, 1.4f) * (rng.uniform() < 0.5f ? -1.f : 1.f);
    Vec drift = Vec::Zero(16);
    Mat rest_flat = rest.reshaped<Eigen::RowMajor>(1, lip_dims);
    for (int t = 0; t < t_frames; ++t) {
        for (int c = 0; c < lip_dims; ++c)
            face(t, c) = (lips(t, c) - rest_flat(0, c)) / kFaceLipScale;
        for (int i = 0; i < 16; ++i)
            face(t, lip_dims + i) = loadings(i) * env_self[(size_t)t] + 0.02f * rng.normal();
        for (int i = 0; i < 16; ++i) {
            drift(i) = 0.995f * drift(i) + 0.02f * rng.normal();
            face(t, lip_dims + 16 + i) = drift(i);
        }
        for (int i = lip_dims + 32; i < kFaceDim; ++i) face(t, i) = 0.01f * rng.normal();
    }

    // --- body motion ------------------------------------------------------
    // Pose variation is coordinated, not per-joint independent: every take
    // draws its posture, sway, and gestures from fixed corpus-wide bases
    // (16 posture directions, 12 sway directions, 12 gesture directions),
    // so corpus poses live on a low-dimensional manifold like real capture
    // data. The bases are rebuilt deterministically from a fixed seed.
    Mat motion = Mat::Zero(t_frames, d_pose);
    std::vector<int> arm_dofs;
    for (size_t j = 0; j < skel.joints.size(); ++j) {
        const std::string& n = skel.joints[j].name;
        if (n.find("shoulder") != std::string::npos || n.find("elbow") != std::string::npos ||
            n.find("wrist") != std::string::npos || n.find("clavicle") != std::string::npos) {
            int off = skel.dof_offset((int)j);
            for (int k = 0; k < skel.joints[j].dof(); ++k) arm_dofs.push_back(off + k);
        }
    }
    std::vector<char> is_arm((size_t)d_pose, 0);
    for (int d : arm_dofs) is_arm[(size_t)d] = 1;

    const int base_rank = 16, sway_rank = 12, gesture_rank = 12;
    Mat base_dirs(d_pose, base_rank), sway_dirs(d_pose, sway_rank);
    Mat gesture_dirs = Mat::Zero(d_pose, gesture_rank);
    {
        Rng basis_rng(0x5EEDBA5EULL);  // shared by every take
        for (int d = 0; d < d_pose; ++d) {
            float base_scale = (is_arm[(size_t)d] ? style.base_pose_spread : 0.04f) / 4.f;
            for (int i = 0; i < base_rank; ++i) base_dirs(d, i) = base_scale * basis_rng.normal();
            for (int i = 0; i < sway_rank; ++i)
                sway_dirs(d, i) = 5.9f * style.idle_noise * basis_rng.normal();
        }
        for (int i = 0; i < gesture_rank; ++i) {
            for (int d : arm_dofs) gesture_dirs(d, i) = basis_rng.normal();
            gesture_dirs.col(i).normalize();
        }
    }

    Vec base_coeff(base_rank), sway_gain(sway_rank);
    for (int i = 0; i < base_rank; ++i) base_coeff(i) = rng.normal();
    for (int i = 0; i < sway_rank; ++i) sway_gain(i) = rng.uniform(0.7f, 1.3f);
    Vec base = base_dirs * base_coeff;

    // gesture bursts at self-speech onsets and every ~1.5 s while speaking
    struct Burst {
        int start, len;
        Vec direction;  // d_pose displacement at peak
    };
    std::vector<Burst> bursts;
    for (const Segment& seg : segments) {
        if (seg.speaker != 0) continue;
        if (env_self[(size_t)std::min(seg.start_frame + 5, t_frames - 1)] < 0.05f) continue;
        int at = seg.start_frame;
        while (at < seg.end_frame - 10) {
            Burst b;
            b.start = at + rng.uniform_int(0, 6);
            b.len = rng.uniform_int(24, 45);
            int g1 = rng.uniform_int(0, gesture_rank - 1);
            int g2 = rng.uniform_int(0, gesture_rank - 1);
            float amp = style.gesture_amp * rng.uniform(0.5f, 1.5f) *
                        (rng.uniform() < 0.5f ? -1.f : 1.f);
            b.direction = amp * (gesture_dirs.col(g1) + 0.4f * gesture_dirs.col(g2));
            bursts.push_back(std::move(b));
            at += rng.uniform_int(35, 55);
        }
    }

    Vec sway = Vec::Zero(sway_rank);
    int spine_pitch = -1;
    {
        int j = skel.joint_index("spine_mid");
        if (j >= 0 && skel.joints[j].pitch) spine_pitch = skel.dof_offset(j) + (skel.joints[j].roll ? 1 : 0);
    }
    for (int t = 0; t < t_frames; ++t) {
        for (int r = 0; r < sway_rank; ++r) sway(r) = 0.97f * sway(r) + 0.05f * rng.normal();
        Vec pose = base + sway_dirs * sway.cwiseProduct(sway_gain);
        for (int d = 0; d < d_pose; ++d) motion(t, d) = pose(d) + 0.002f * rng.normal();
        if (spine_pitch >= 0)
            motion(t, spine_pitch) += 0.02f * std::sin(2.f * (float)M_PI * 0.25f * t / kMotionFps);
    }
    for (const Burst& b : bursts)
        for (int i = 0; i < b.len; ++i) {
            int t = b.start + i;
            if (t >= t_frames) break;
            float w = 0.5f - 0.5f * std::cos(2.f * (float)M_PI * i / (float)b.len);  // raised cosine
            motion.row(t) += (w * b.direction).transpose();
        }

    // --- assemble ---------------------------------------------------------
    Take take;
    take.id = "take";
    Waveform w_self{std::move(wave[0]), sr}, w_other{std::move(wave[1]), sr};
    take.audio = extract_features(w_self, w_other, style.d_a);
    if (debug) {
        debug->wave_self = w_self;
        debug->wave_other = w_other;
    }
    // feature frame count floor can trim up to one frame
    int t_final = std::min(t_frames, take.audio.length());
    take.audio = take.audio.slice(0, t_final);
    take.motion.frames = motion.topRows(t_final);
    take.face.frames = face.topRows(t_final);
    take.lips.frames = lips.topRows(t_final);
    take.roles.resize((size_t)t_final, 'L');
    for (const Segment& seg : segments)
        if (seg.speaker == 0)
            for (int t = seg.start_frame; t < std::min(seg.end_frame, t_final); ++t)
                take.roles[(size_t)t] = 'S';
    take.validate();
    return take;
}

// Fixed readout from expression codes to lip vertices, defined by the
// synthetic dataset layout above. It plays the role of the lip region of
// an avatar decoder when scoring generated faces against ground truth.
inline LipSequence face_codes_to_lips(const Mat& face_frames, int lip_verts = kDefaultLipVerts) {
    int lip_dims = lip_verts * 3;
    require((int)face_frames.cols() >= lip_dims, "face codes narrower than the lip readout");
    Mat rest = detail::lip_rest_shape(lip_verts);
    Mat rest_flat = rest.reshaped<Eigen::RowMajor>(1, lip_dims);
    LipSequence out;
    out.frames = (face_frames.leftCols(lip_dims) * kFaceLipScale).rowwise() + rest_flat.row(0);
    return out;
}

// Contiguous training window: length uniform on [240, 600] clipped to the
// take, position uniform over valid starts.
inline Take sample_training_window(const Take& take, Rng& rng) {
    require(take.length() >= kMinWindowFrames, "take too short for a training window");
    int max_len = std::min(take.length(), kMaxWindowFrames);
    int len = rng.uniform_int(kMinWindowFrames, max_len);
    int start = rng.uniform_int(0, take.length() - len);
    return take.slice(start, len);
}

// ---- take directory I/O ----------------------------------------------------

constexpr int kTakeVersion = 1;

inline void save_take(const Take& take, const std::filesystem::path& dir) {
    take.validate();
    std::filesystem::create_directories(dir);
    save_matrix(dir / "motion.f32", take.motion.frames, take.motion.fps);
    save_matrix(dir / "face.f32", take.face.frames, (float)kMotionFps);
    save_matrix(dir / "lips.f32", take.lips.frames, (float)kMotionFps);
    save_external_features(dir / "audio.f32", take.audio);
    Json meta = {
        {"version", kTakeVersion},
        {"id", take.id},
        {"T", take.length()},
        {"fps", kMotionFps},
        {"roles", take.roles},
        {"checksums",
         {{"motion.f32", matrix_checksum(take.motion.frames)},
          {"face.f32", matrix_checksum(take.face.frames)},
          {"lips.f32", matrix_checksum(take.lips.frames)},
          {"audio.f32", matrix_checksum(take.audio.stacked())}}},
    };
    std::ofstream f(dir / "meta.json");
    require(f.good(), "cannot write take meta: " + dir.string());
    f << meta.dump(2) << "\n";
}

inline Take load_take(const std::filesystem::path& dir) {
    std::ifstream f(dir / "meta.json");
    require(f.good(), "missing take meta: " + dir.string());
    Json meta = Json::parse(f);
    int version = meta.value("version", -1);
    require(version == kTakeVersion,
            "unsupported take version: " + std::to_string(version) + " in " + dir.string());
    for (const char* name : {"motion.f32", "face.f32", "lips.f32", "audio.f32"})
        require(std::filesystem::exists(dir / name), std::string("corrupt take: missing ") + name);

    Take take;
    take.id = meta.at("id").get<std::string>();
    take.motion.frames = load_matrix(dir / "motion.f32");
    take.face.frames = load_matrix(dir / "face.f32");
    take.lips.frames = load_matrix(dir / "lips.f32");
    take.audio = load_external_features(dir / "audio.f32");
    take.roles = meta.value("roles", std::string());
    if ((int)take.roles.size() != take.length()) take.roles.assign((size_t)take.length(), 'L');

    const Json& sums = meta.at("checksums");
    require(sums.at("motion.f32").get<uint64_t>() == matrix_checksum(take.motion.frames) &&
                sums.at("face.f32").get<uint64_t>() == matrix_checksum(take.face.frames) &&
                sums.at("lips.f32").get<uint64_t>() == matrix_checksum(take.lips.frames) &&
                sums.at("audio.f32").get<uint64_t>() == matrix_checksum(take.audio.stacked()),
            "corrupt take: checksum mismatch in " + dir.string());
    take.validate();
    return take;
}

// ---- corpus -----------------------------------------------------------------

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConvoError("unknown split: " + s);
}

// 80/10/10 by id hash, stable across runs
inline Split split_of(const std::string& take_id) {
    uint64_t h = fnv1a_str("fold:" + take_id) % 10;
    if (h < 8) return Split::train;
    if (h == 8) return Split::val;
    return Split::test;
}

struct Corpus {
    std::vector<Take> takes;
    std::vector<Split> splits;

    std::vector<const Take*> split(Split s) const {
        std::vector<const Take*> out;
        for (size_t i = 0; i < takes.size(); ++i)
            if (splits[i] == s) out.push_back(&takes[i]);
        return out;
    }
};

inline std::string take_id_for(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "take_%04d", index);
    return buf;
}

// Regenerable from (master_seed, count): take i uses seed master_seed*1e6+i.
inline Corpus generate_corpus(uint64_t master_seed, int count, float duration_s,
                              const DyadStyle& style = {}) {
    require(count >= 1, "corpus needs at least one take");
    Corpus c;
    for (int i = 0; i < count; ++i) {
        Take t = generate_dyad(master_seed * 1000000ULL + (uint64_t)i, duration_s, style);
        t.id = take_id_for(i);
        c.takes.push_back(std::move(t));
        c.splits.push_back(split_of(c.takes.back().id));
    }
    return c;
}

inline void save_corpus(const Corpus& c, const std::filesystem::path& dir, uint64_t master_seed) {
    std::filesystem::create_directories(dir);
    Json manifest = {{"version", 1}, {"master_seed", master_seed}, {"takes", Json::array()}};
    for (size_t i = 0; i < c.takes.size(); ++i) {
        save_take(c.takes[i], dir / c.takes[i].id);
        manifest["takes"].push_back(
            {{"id", c.takes[i].id}, {"split", split_name(c.splits[i])}});
    }
    std::ofstream f(dir / "manifest.json");
    require(f.good(), "cannot write corpus manifest");
    f << manifest.dump(2) << "\n";
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json");
    require(f.good(), "missing corpus manifest in " + dir.string());
    Json manifest = Json::parse(f);
    require(manifest.value("version", -1) == 1, "unsupported corpus manifest version");
    Corpus c;
    for (const auto& e : manifest.at("takes")) {
        c.takes.push_back(load_take(dir / e.at("id").get<std::string>()));
        c.splits.push_back(split_from_name(e.at("split").get<std::string>()));
    }
    return c;
}

}  // namespace convo
