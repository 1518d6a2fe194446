#pragma once

#include <convo/core.hpp>
#include <convo/data.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <iostream>
#include <map>

namespace convo {

constexpr int kVelocityWindow = 30;   // frames per flattened FD_k window
constexpr int kVelocityHop = 10;
constexpr int kDivGeoPairs = 30;
constexpr int kDefaultGroupSize = 5;  // samples per audio for Div_sample

// ---- Frechet distance -------------------------------------------------------

namespace detail {

// trace of (A B)^{1/2} for symmetric PSD A, B via sqrtm(A) B sqrtm(A)
inline double trace_cov_sqrt(const DMat& a, const DMat& b) {
    Eigen::SelfAdjointEigenSolver<DMat> ea(a);
    DVec la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    DMat sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
    DMat m = sqrt_a * b * sqrt_a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<DMat> em(m);
    // negative eigenvalues are numerical noise; clamp at zero
    return em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

}  // namespace detail

inline double frechet_from_moments(const DVec& mu_a, const DMat& cov_a, const DVec& mu_b,
                                   const DMat& cov_b) {
    require(mu_a.size() == mu_b.size() && cov_a.rows() == cov_b.rows(), "moment dim mismatch");
    double mean_term = (mu_a - mu_b).squaredNorm();
    double trace_term = cov_a.trace() + cov_b.trace() - 2.0 * detail::trace_cov_sqrt(cov_a, cov_b);
    return mean_term + trace_term;
}

struct GaussianMoments {
    DVec mu;
    DMat cov;
};

// unbiased covariance (FID convention)
inline GaussianMoments fit_moments(const DMat& samples) {
    require(samples.rows() >= 2, "need at least two samples to fit moments");
    GaussianMoments m;
    m.mu = samples.colwise().mean();
    DMat centered = samples.rowwise() - m.mu.transpose();
    m.cov = centered.transpose() * centered / (double)(samples.rows() - 1);
    return m;
}

// 2-Wasserstein distance between Gaussians fitted to the two sample sets.
// When the dimension exceeds the combined sample count, the computation is
// projected onto the exact span of the centered data (the distance is
// unchanged because both covariances and the mean gap live in that span).
inline double frechet_distance(const Mat& samples_a, const Mat& samples_b) {
    require(samples_a.cols() == samples_b.cols(), "sample dim mismatch");
    DMat a = samples_a.cast<double>(), b = samples_b.cast<double>();
    long d = a.cols(), rank_cap = a.rows() + b.rows() + 1;
    if (d > rank_cap) {
        DVec mu_a = a.colwise().mean(), mu_b = b.colwise().mean();
        DMat stacked(a.rows() + b.rows() + 1, d);
        stacked.topRows(a.rows()) = a.rowwise() - mu_a.transpose();
        stacked.middleRows(a.rows(), b.rows()) = b.rowwise() - mu_b.transpose();
        stacked.bottomRows(1) = (mu_a - mu_b).transpose();
        Eigen::HouseholderQR<DMat> qr(stacked.transpose());
        DMat q = qr.householderQ() * DMat::Identity(d, rank_cap);
        a = a * q;
        b = b * q;
    }
    GaussianMoments ma = fit_moments(a), mb = fit_moments(b);
    if (a.rows() <= a.cols() || b.rows() <= b.cols())
        std::cerr << "[metrics] covariance rank warning: fewer samples than dimensions\n";
    return frechet_from_moments(ma.mu, ma.cov, mb.mu, mb.cov);
}

// ---- pooled take metrics ----------------------------------------------------

struct FdResult {
    double pose = 0.0;
    double face = 0.0;

    double headline() const { return 0.5 * (pose + face); }
};

namespace detail {

inline Mat pool_frames(const std::vector<const Take*>& takes, bool face_space) {
    long rows = 0;
    for (const Take* t : takes) rows += face_space ? t->face.length() : t->motion.length();
    require(rows > 0, "no frames to pool");
    int cols = face_space ? (int)takes[0]->face.frames.cols() : (int)takes[0]->motion.frames.cols();
    Mat out(rows, cols);
    long at = 0;
    for (const Take* t : takes) {
        const Mat& f = face_space ? t->face.frames : t->motion.frames;
        out.middleRows(at, f.rows()) = f;
        at += f.rows();
    }
    return out;
}

inline Mat pool_velocity_windows(const std::vector<const Take*>& takes, bool face_space,
                                 int window = kVelocityWindow, int hop = kVelocityHop) {
    std::vector<Mat> rows;
    int cols = 0;
    for (const Take* t : takes) {
        const Mat& f = face_space ? t->face.frames : t->motion.frames;
        if ((int)f.rows() < window + 1) {
            std::cerr << "[metrics] skipping take '" << t->id << "': shorter than W+1 frames\n";
            continue;
        }
        Mat vel = velocities(f);
        cols = (int)vel.cols() * window;
        for (int start = 0; start + window <= vel.rows(); start += hop) {
            Mat flat(1, cols);
            for (int w = 0; w < window; ++w)
                flat.middleCols(w * vel.cols(), vel.cols()) = vel.row(start + w);
            rows.push_back(flat);
        }
    }
    require(!rows.empty(), "no velocity windows to pool");
    Mat out((long)rows.size(), cols);
    for (size_t i = 0; i < rows.size(); ++i) out.row((long)i) = rows[i];
    return out;
}

}  // namespace detail

// FD over static frames, pose and expression spaces reported separately
inline FdResult fd_geometric(const std::vector<const Take*>& gen,
                             const std::vector<const Take*>& ref) {
    require(!gen.empty() && !ref.empty(), "fd_geometric needs nonempty sets");
    FdResult r;
    r.pose = frechet_distance(detail::pool_frames(gen, false), detail::pool_frames(ref, false));
    r.face = frechet_distance(detail::pool_frames(gen, true), detail::pool_frames(ref, true));
    return r;
}

// FD over flattened fixed-length velocity windows
inline FdResult fd_kinetic(const std::vector<const Take*>& gen,
                           const std::vector<const Take*>& ref) {
    require(!gen.empty() && !ref.empty(), "fd_kinetic needs nonempty sets");
    FdResult r;
    r.pose = frechet_distance(detail::pool_velocity_windows(gen, false),
                              detail::pool_velocity_windows(ref, false));
    r.face = frechet_distance(detail::pool_velocity_windows(gen, true),
                              detail::pool_velocity_windows(ref, true));
    return r;
}

// ---- diversity metrics ------------------------------------------------------

// mean L2 distance over 30 random unordered frame pairs
inline double div_geometric(const Mat& frames, Rng& rng, int n_pairs = kDivGeoPairs) {
    require(frames.rows() >= 2, "div_geometric needs at least two frames");
    double acc = 0.0;
    for (int i = 0; i < n_pairs; ++i) {
        int a = rng.uniform_int(0, (int)frames.rows() - 1);
        int b = rng.uniform_int(0, (int)frames.rows() - 2);
        if (b >= a) ++b;  // uniform over unordered distinct pairs
        acc += (double)(frames.row(a) - frames.row(b)).norm();
    }
    return acc / n_pairs;
}

// temporal variance: mean over dims of the per-dim variance over time
inline double div_kinetic(const Mat& frames) {
    require(frames.rows() >= 1, "div_kinetic needs frames");
    double acc = 0.0;
    for (int c = 0; c < frames.cols(); ++c) {
        double mean = frames.col(c).cast<double>().mean();
        acc += (frames.col(c).cast<double>().array() - mean).square().mean();
    }
    return acc / frames.cols();
}

// variance across samples generated from one audio, averaged over frames
// and dims; population variance across the group
inline double div_sample(const std::vector<Mat>& samples) {
    require(samples.size() >= 2, "div_sample needs at least two samples");
    const Mat& first = samples[0];
    for (const Mat& s : samples)
        require(s.rows() == first.rows() && s.cols() == first.cols(),
                "div_sample shapes must match");
    double acc = 0.0;
    for (int r = 0; r < first.rows(); ++r)
        for (int c = 0; c < first.cols(); ++c) {
            double mean = 0.0;
            for (const Mat& s : samples) mean += s(r, c);
            mean /= (double)samples.size();
            double var = 0.0;
            for (const Mat& s : samples) var += (s(r, c) - mean) * (s(r, c) - mean);
            acc += var / (double)samples.size();
        }
    return acc / ((double)first.rows() * first.cols());
}

// ---- lip errors --------------------------------------------------------------

struct LipKeypoints {
    int top = 0, bottom = 1, left = 2, right = 3;
};

struct LipErrors {
    double horizontal = 0.0;  // mm^2
    double vertical = 0.0;
    double mesh = 0.0;
};

// Opening distances are computed per frame on generated and reference
// lips; the errors are mean squared differences of those distances. Mesh
// L2 is the mean squared vertex error over the whole lip set.
inline LipErrors lip_errors(const LipSequence& gen, const LipSequence& ref,
                            const LipKeypoints& kp = {}) {
    require(gen.frames.rows() == ref.frames.rows() && gen.frames.cols() == ref.frames.cols(),
            "lip sequences must share T and d_l");
    int t_frames = gen.length();
    require(t_frames >= 1, "empty lip sequence");
    int verts = gen.vertex_count();
    require(kp.top < verts && kp.bottom < verts && kp.left < verts && kp.right < verts,
            "lip keypoint index out of range");
    auto coord = [](const Mat& m, int t, int v, int axis) { return (double)m(t, v * 3 + axis); };
    LipErrors e;
    for (int t = 0; t < t_frames; ++t) {
        double v_gen = coord(gen.frames, t, kp.top, 1) - coord(gen.frames, t, kp.bottom, 1);
        double v_ref = coord(ref.frames, t, kp.top, 1) - coord(ref.frames, t, kp.bottom, 1);
        double h_gen = coord(gen.frames, t, kp.right, 0) - coord(gen.frames, t, kp.left, 0);
        double h_ref = coord(ref.frames, t, kp.right, 0) - coord(ref.frames, t, kp.left, 0);
        e.vertical += (v_gen - v_ref) * (v_gen - v_ref);
        e.horizontal += (h_gen - h_ref) * (h_gen - h_ref);
        for (int v = 0; v < verts; ++v) {
            double dx = coord(gen.frames, t, v, 0) - coord(ref.frames, t, v, 0);
            double dy = coord(gen.frames, t, v, 1) - coord(ref.frames, t, v, 1);
            double dz = coord(gen.frames, t, v, 2) - coord(ref.frames, t, v, 2);
            e.mesh += (dx * dx + dy * dy + dz * dz) / verts;
        }
    }
    e.vertical /= t_frames;
    e.horizontal /= t_frames;
    e.mesh /= t_frames;
    return e;
}

// ---- evaluation report -------------------------------------------------------

struct MetricStat {
    double mean = 0.0, stddev = 0.0;
    Json to_json() const { return {{"mean", mean}, {"std", stddev}}; }
};

inline MetricStat stat_of(const std::vector<double>& values) {
    MetricStat s;
    if (values.empty()) return s;
    for (double v : values) s.mean += v;
    s.mean /= (double)values.size();
    for (double v : values) s.stddev += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(s.stddev / (double)values.size());
    return s;
}

constexpr int kReportSchemaVersion = 1;

// One system's row: map metric name -> aggregated stat.
using SystemReport = std::map<std::string, MetricStat>;

struct EvalReport {
    std::string split;
    std::vector<uint64_t> seeds;
    int group_size = kDefaultGroupSize;
    std::map<std::string, SystemReport> systems;

    Json to_json() const {
        Json j = {{"schema_version", kReportSchemaVersion},
                  {"split", split},
                  {"seeds", seeds},
                  {"group_size", group_size},
                  {"systems", Json::object()}};
        for (const auto& [name, sys] : systems) {
            Json row = Json::object();
            for (const auto& [metric, stat] : sys) row[metric] = stat.to_json();
            j["systems"][name] = row;
        }
        return j;
    }

    static EvalReport from_json(const Json& j) {
        require(j.value("schema_version", -1) == kReportSchemaVersion,
                "unsupported report schema version");
        EvalReport r;
        r.split = j.at("split").get<std::string>();
        r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        r.group_size = j.value("group_size", kDefaultGroupSize);
        for (const auto& [name, row] : j.at("systems").items())
            for (const auto& [metric, stat] : row.items())
                r.systems[name][metric] = MetricStat{stat.at("mean").get<double>(),
                                                     stat.at("std").get<double>()};
        return r;
    }
};

}  // namespace convo
