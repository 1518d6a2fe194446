#pragma once

#include <convo/body.hpp>
#include <convo/metrics.hpp>

#include <functional>

namespace convo {

// ---- non-learned baselines --------------------------------------------------

// uniformly chosen training take, uniformly placed window, returned verbatim
inline std::pair<FaceSequence, MotionSequence> random_baseline(
    const std::vector<const Take*>& train, int t_frames, Rng& rng, int* take_index_out = nullptr) {
    require(!train.empty(), "random baseline needs training takes");
    int idx = rng.uniform_int(0, (int)train.size() - 1);
    const Take& take = *train[(size_t)idx];
    require(take.length() >= t_frames, "training take shorter than requested window");
    int start = rng.uniform_int(0, take.length() - t_frames);
    if (take_index_out) *take_index_out = idx;
    Take w = take.slice(start, t_frames);
    return {std::move(w.face), std::move(w.motion)};
}

// Slides a query-length window over every training take's audio features
// and returns the motion/face segment aligned with the best match (mean
// squared feature distance; ties keep the earliest window).
inline std::pair<FaceSequence, MotionSequence> knn_baseline(const AudioFeatures& query,
                                                            const std::vector<const Take*>& train,
                                                            int stride = 5) {
    require(!train.empty(), "knn baseline needs training takes");
    int len = query.length();
    Mat q = query.stacked();
    double best = std::numeric_limits<double>::infinity();
    const Take* best_take = nullptr;
    int best_start = 0;
    for (const Take* t : train) {
        if (t->length() < len) continue;
        Mat feats = t->audio.stacked();
        for (int start = 0; start + len <= t->length(); start += stride) {
            double d = (double)(feats.middleRows(start, len) - q).squaredNorm() /
                       ((double)len * q.cols());
            if (d < best) {
                best = d;
                best_take = t;
                best_start = start;
            }
        }
    }
    require(best_take != nullptr, "no training take long enough for the query");
    Take w = best_take->slice(best_start, len);
    return {std::move(w.face), std::move(w.motion)};
}

// ---- system configurations ---------------------------------------------------

// Table-style system identifiers: the full model, its conditioning
// ablations, the VQ-only pipeline, and the non-learned baselines.
enum class SystemKind { gt, random_window, knn, full, wo_audio, wo_guides, uncond, vq_only };

inline const char* system_name(SystemKind k) {
    switch (k) {
        case SystemKind::gt: return "gt";
        case SystemKind::random_window: return "random";
        case SystemKind::knn: return "knn";
        case SystemKind::full: return "full";
        case SystemKind::wo_audio: return "wo_a";
        case SystemKind::wo_guides: return "wo_p";
        case SystemKind::uncond: return "uncond";
        default: return "vq_only";
    }
}

inline SystemKind system_from_name(const std::string& s) {
    for (SystemKind k : {SystemKind::gt, SystemKind::random_window, SystemKind::knn,
                         SystemKind::full, SystemKind::wo_audio, SystemKind::wo_guides,
                         SystemKind::uncond, SystemKind::vq_only})
        if (s == system_name(k)) return k;
    throw ConvoError("unknown system: " + s);
}

// body-model conditioning flags per ablation
inline std::pair<bool, bool> ablation_flags(SystemKind k) {
    switch (k) {
        case SystemKind::wo_audio: return {false, true};
        case SystemKind::wo_guides: return {true, false};
        case SystemKind::uncond: return {false, false};
        default: return {true, true};  // full
    }
}

// The VQ-only ablation drives the guide transformer over 30 fps tokens and
// decodes them directly; no diffusion stage runs. Rollout cost grows
// quadratically with length, so evaluation clips the audio.
inline MotionSequence vq_only_generate(GuideTransformer& transformer, RvqModel& rvq,
                                       const AudioFeatures& audio, float top_p, Rng& rng,
                                       int max_frames = 120) {
    require(transformer.cfg.pose_stride == 1, "vq-only transformer must use stride 1");
    AudioFeatures clipped = audio.length() > max_frames ? audio.slice(0, max_frames) : audio;
    GuidePoseSequence poses = generate_guide_poses(transformer, rvq, clipped, top_p, rng);
    MotionSequence out;
    out.frames = poses.poses;
    out.fps = (float)kMotionFps;
    return out;
}

// ---- evaluation harness --------------------------------------------------------

struct SystemOutput {
    FaceSequence face;
    MotionSequence motion;
    bool has_face = true;
};

// sampler(take, sample_seed) -> one generated sequence pair for the take's audio
using SystemSampler = std::function<SystemOutput(const Take&, uint64_t)>;

// Protocol: per seed, draw group_size samples per test take; FD pools all
// generated frames against all reference frames (mean/std across seeds);
// diversity metrics aggregate across (seed, take, sample).
inline EvalReport evaluate_system(const std::string& name, const SystemSampler& sampler,
                                  const std::vector<const Take*>& test,
                                  const std::vector<uint64_t>& seeds,
                                  int group_size = kDefaultGroupSize, bool face_metrics = true) {
    require(!test.empty(), "evaluation split is empty");
    require(!seeds.empty(), "evaluation needs at least one seed");
    EvalReport report;
    report.split = "test";
    report.seeds = seeds;
    report.group_size = group_size;

    std::map<std::string, std::vector<double>> agg;
    for (uint64_t seed : seeds) {
        std::vector<Take> generated;
        std::vector<std::vector<Mat>> pose_groups, face_groups;
        bool any_face = face_metrics;
        uint64_t counter = 0;
        for (const Take* t : test) {
            std::vector<Mat> pose_group, face_group;
            for (int s = 0; s < group_size; ++s) {
                SystemOutput out = sampler(*t, seed * 100003ULL + counter++);
                Take g;
                g.id = t->id + "#gen";
                g.motion = out.motion;
                if (out.has_face)
                    g.face = out.face;
                else
                    g.face.frames = Mat::Zero(out.motion.length(), 1);
                any_face = any_face && out.has_face;
                pose_group.push_back(g.motion.frames);
                if (out.has_face) face_group.push_back(g.face.frames);
                agg["div_k_pose"].push_back(div_kinetic(g.motion.frames));
                if (out.has_face) agg["div_k_face"].push_back(div_kinetic(g.face.frames));
                Rng div_rng(seed ^ fnv1a_str(g.id) ^ (uint64_t)s);
                agg["div_g_pose"].push_back(div_geometric(g.motion.frames, div_rng));
                if (out.has_face) agg["div_g_face"].push_back(div_geometric(g.face.frames, div_rng));
                generated.push_back(std::move(g));
            }
            if ((int)pose_group.size() >= 2) agg["div_sample_pose"].push_back(div_sample(pose_group));
            if (any_face && (int)face_group.size() >= 2)
                agg["div_sample_face"].push_back(div_sample(face_group));
        }
        std::vector<const Take*> gen_ptrs;
        for (const Take& g : generated) gen_ptrs.push_back(&g);
        Mat gen_pose = detail::pool_frames(gen_ptrs, false);
        Mat ref_pose = detail::pool_frames(test, false);
        agg["fd_g_pose"].push_back(frechet_distance(gen_pose, ref_pose));
        agg["fd_k_pose"].push_back(frechet_distance(detail::pool_velocity_windows(gen_ptrs, false),
                                                    detail::pool_velocity_windows(test, false)));
        if (any_face) {
            agg["fd_g_face"].push_back(
                frechet_distance(detail::pool_frames(gen_ptrs, true), detail::pool_frames(test, true)));
            agg["fd_k_face"].push_back(
                frechet_distance(detail::pool_velocity_windows(gen_ptrs, true),
                                 detail::pool_velocity_windows(test, true)));
        }
    }

    SystemReport row;
    for (const auto& [metric, values] : agg) row[metric] = stat_of(values);
    auto headline = [&](const char* out, const char* pose, const char* face) {
        if (!row.count(pose)) return;
        if (row.count(face)) {
            MetricStat s;
            s.mean = 0.5 * (row[pose].mean + row[face].mean);
            s.stddev = 0.5 * (row[pose].stddev + row[face].stddev);
            row[out] = s;
        } else {
            row[out] = row[pose];
        }
    };
    headline("fd_g", "fd_g_pose", "fd_g_face");
    headline("fd_k", "fd_k_pose", "fd_k_face");
    headline("div_g", "div_g_pose", "div_g_face");
    headline("div_k", "div_k_pose", "div_k_face");
    headline("div_sample", "div_sample_pose", "div_sample_face");
    report.systems[name] = std::move(row);
    return report;
}

// GT row: diversity of the reference takes themselves (Table-style report
// carries no FD or sample diversity for ground truth)
inline EvalReport evaluate_ground_truth(const std::vector<const Take*>& test, uint64_t seed) {
    require(!test.empty(), "evaluation split is empty");
    EvalReport report;
    report.split = "test";
    report.seeds = {seed};
    std::map<std::string, std::vector<double>> agg;
    for (const Take* t : test) {
        Rng rng(seed ^ fnv1a_str(t->id));
        agg["div_g_pose"].push_back(div_geometric(t->motion.frames, rng));
        agg["div_g_face"].push_back(div_geometric(t->face.frames, rng));
        agg["div_k_pose"].push_back(div_kinetic(t->motion.frames));
        agg["div_k_face"].push_back(div_kinetic(t->face.frames));
    }
    SystemReport row;
    for (const auto& [metric, values] : agg) row[metric] = stat_of(values);
    MetricStat g{0.5 * (row["div_g_pose"].mean + row["div_g_face"].mean),
                 0.5 * (row["div_g_pose"].stddev + row["div_g_face"].stddev)};
    MetricStat k{0.5 * (row["div_k_pose"].mean + row["div_k_face"].mean),
                 0.5 * (row["div_k_pose"].stddev + row["div_k_face"].stddev)};
    row["div_g"] = g;
    row["div_k"] = k;
    report.systems["gt"] = std::move(row);
    return report;
}

inline EvalReport merge_reports(std::vector<EvalReport> parts) {
    require(!parts.empty(), "no reports to merge");
    EvalReport out = parts.front();
    for (size_t i = 1; i < parts.size(); ++i)
        for (auto& [name, row] : parts[i].systems) out.systems[name] = row;
    return out;
}

}  // namespace convo
