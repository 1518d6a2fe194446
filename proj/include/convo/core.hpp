#pragma once

#include <convo/array_io.hpp>
#include <convo/common.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace convo {

constexpr int kGuideStride = 30;  // guide poses at 1 fps
constexpr int kFaceDim = 256;

// Rotation axes a joint is allowed to articulate. Composition order is
// fixed intrinsic roll (x) -> pitch (y) -> yaw (z); a joint consumes one
// pose angle per allowed axis, in that order.
struct Joint {
    std::string name;
    int parent = -1;  // -1 = root
    bool roll = false, pitch = false, yaw = false;
    Eigen::Vector3d offset = Eigen::Vector3d::Zero();  // rest offset from parent, meters

    int dof() const { return (roll ? 1 : 0) + (pitch ? 1 : 0) + (yaw ? 1 : 0); }
};

class Skeleton {
public:
    std::vector<Joint> joints;

    int dof() const {
        int n = 0;
        for (const auto& j : joints) n += j.dof();
        return n;
    }

    // Joints must be listed in topological order with exactly one root.
    void validate() const {
        require(!joints.empty(), "skeleton has no joints");
        int roots = 0;
        for (size_t i = 0; i < joints.size(); ++i) {
            const Joint& j = joints[i];
            if (j.parent < 0)
                ++roots;
            else
                require(j.parent < (int)i, "skeleton joint '" + j.name + "' parent must precede it");
            require(j.parent < (int)joints.size(), "skeleton parent index out of range");
        }
        require(roots == 1, "skeleton must have exactly one root joint");
    }

    int joint_index(const std::string& name) const {
        for (size_t i = 0; i < joints.size(); ++i)
            if (joints[i].name == name) return (int)i;
        return -1;
    }

    // first pose-vector slot owned by joint i
    int dof_offset(int joint) const {
        int n = 0;
        for (int i = 0; i < joint; ++i) n += joints[i].dof();
        return n;
    }

    static Skeleton load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

inline Skeleton Skeleton::load(const std::filesystem::path& path) {
    std::ifstream f(path);
    require(f.good(), "cannot open skeleton file: " + path.string());
    Json doc;
    try {
        doc = Json::parse(f);
    } catch (const std::exception& e) {
        throw ConvoError(std::string("skeleton file parse error: ") + e.what());
    }
    Skeleton s;
    for (const auto& jj : doc.at("joints")) {
        Joint j;
        j.name = jj.at("name").get<std::string>();
        j.parent = jj.at("parent").is_null() ? -1 : jj.at("parent").get<int>();
        std::string axes = jj.at("axes").get<std::string>();
        for (char c : axes) {
            if (c == 'r') j.roll = true;
            else if (c == 'p') j.pitch = true;
            else if (c == 'y') j.yaw = true;
            else throw ConvoError("skeleton axes must be subset of 'rpy', got: " + axes);
        }
        auto off = jj.at("offset");
        require(off.size() == 3, "skeleton offset must be a 3-vector");
        j.offset = Eigen::Vector3d(off[0].get<double>(), off[1].get<double>(), off[2].get<double>());
        s.joints.push_back(std::move(j));
    }
    s.validate();
    return s;
}

inline void Skeleton::save(const std::filesystem::path& path) const {
    Json doc;
    doc["joints"] = Json::array();
    for (const auto& j : joints) {
        std::string axes;
        if (j.roll) axes += 'r';
        if (j.pitch) axes += 'p';
        if (j.yaw) axes += 'y';
        doc["joints"].push_back({{"name", j.name},
                                 {"parent", j.parent < 0 ? Json() : Json(j.parent)},
                                 {"axes", axes},
                                 {"offset", {j.offset.x(), j.offset.y(), j.offset.z()}}});
    }
    std::ofstream f(path);
    require(f.good(), "cannot write skeleton file: " + path.string());
    f << doc.dump(2) << "\n";
}

// T x d_pose rotation angles (radians) at a fixed frame rate.
struct MotionSequence {
    Mat frames;  // T x d_pose
    float fps = (float)kMotionFps;

    int length() const { return (int)frames.rows(); }
    int dim() const { return (int)frames.cols(); }
};

// T x 256 latent expression codes.
struct FaceSequence {
    Mat frames;

    int length() const { return (int)frames.rows(); }
};

// K x d_pose poses at 1 fps.
struct GuidePoseSequence {
    Mat poses;

    int length() const { return (int)poses.rows(); }
    int dim() const { return (int)poses.cols(); }
};

// T x (d_l*3) lip vertex coordinates in millimeters, layout per vertex (x,y,z).
struct LipSequence {
    Mat frames;

    int length() const { return (int)frames.rows(); }
    int vertex_count() const { return (int)frames.cols() / 3; }
};

// Guide pose k (0-indexed) is motion frame (k+1)*stride - 1; with the
// default 30 fps / stride 30 this is the paper's 1 fps subsampling.
inline GuidePoseSequence subsample_guide_poses(const MotionSequence& motion, int stride = kGuideStride) {
    require(stride >= 1, "guide stride must be positive");
    require(motion.length() >= stride, "sequence too short for guide poses");
    int k = motion.length() / stride;
    GuidePoseSequence g;
    g.poses.resize(k, motion.dim());
    for (int i = 0; i < k; ++i) g.poses.row(i) = motion.frames.row((i + 1) * stride - 1);
    return g;
}

// row t = frames[t+1] - frames[t]
inline Mat velocities(const Mat& frames) {
    require(frames.rows() >= 2, "need at least two frames");
    return frames.bottomRows(frames.rows() - 1) - frames.topRows(frames.rows() - 1);
}

inline Eigen::Matrix3d rot_x(double a) {
    Eigen::Matrix3d m;
    m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
    return m;
}
inline Eigen::Matrix3d rot_y(double a) {
    Eigen::Matrix3d m;
    m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
    return m;
}
inline Eigen::Matrix3d rot_z(double a) {
    Eigen::Matrix3d m;
    m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    return m;
}

// Positions of every joint for one pose vector. Root sits at the origin
// plus its rest offset; each child is placed by the accumulated parent
// rotation applied to its rest offset. Double precision so that
// round-trip identities hold to 1e-9.
inline std::vector<Eigen::Vector3d> forward_kinematics(const Eigen::Ref<const Vec>& pose,
                                                       const Skeleton& skeleton) {
    require((int)pose.size() == skeleton.dof(), "pose/skeleton DOF mismatch");
    std::vector<Eigen::Vector3d> positions(skeleton.joints.size());
    std::vector<Eigen::Matrix3d> global(skeleton.joints.size());
    int slot = 0;
    for (size_t i = 0; i < skeleton.joints.size(); ++i) {
        const Joint& j = skeleton.joints[i];
        Eigen::Matrix3d local = Eigen::Matrix3d::Identity();
        if (j.roll) local = local * rot_x(pose[slot++]);
        if (j.pitch) local = local * rot_y(pose[slot++]);
        if (j.yaw) local = local * rot_z(pose[slot++]);
        if (j.parent < 0) {
            positions[i] = j.offset;
            global[i] = local;
        } else {
            positions[i] = positions[j.parent] + global[j.parent] * j.offset;
            global[i] = global[j.parent] * local;
        }
    }
    return positions;
}

// The 104-DOF desk skeleton shipped with the toolkit. The joint list is a
// plausible full-body layout (torso, arms with twist joints, articulated
// fingers, legs); twist joints carry roll only.
inline Skeleton make_desk_skeleton() {
    Skeleton s;
    auto add = [&](const std::string& name, int parent, const std::string& axes, double x, double y,
                   double z) {
        Joint j;
        j.name = name;
        j.parent = parent;
        for (char c : axes) {
            if (c == 'r') j.roll = true;
            if (c == 'p') j.pitch = true;
            if (c == 'y') j.yaw = true;
        }
        j.offset = Eigen::Vector3d(x, y, z);
        s.joints.push_back(j);
        return (int)s.joints.size() - 1;
    };

    // y up, x right, z forward; offsets in meters
    int pelvis = add("pelvis", -1, "rpy", 0, 0.95, 0);                  // 3
    int spine1 = add("spine_lower", pelvis, "rpy", 0, 0.10, 0);         // 6
    int spine2 = add("spine_mid", spine1, "rpy", 0, 0.12, 0);           // 9
    int spine3 = add("spine_upper", spine2, "rpy", 0, 0.12, 0);         // 12
    int chest = add("chest", spine3, "rpy", 0, 0.10, 0);                // 15
    int neck = add("neck", chest, "rpy", 0, 0.10, 0);                   // 18
    add("head", neck, "rpy", 0, 0.10, 0);                               // 21

    for (int side = 0; side < 2; ++side) {
        std::string p = side == 0 ? "l_" : "r_";
        double sx = side == 0 ? 1.0 : -1.0;
        int clav = add(p + "clavicle", chest, "py", sx * 0.05, 0.08, 0);          // +2
        int sho = add(p + "shoulder", clav, "rpy", sx * 0.13, 0, 0);              // +3
        int utw = add(p + "upperarm_twist", sho, "r", sx * 0.14, 0, 0);           // +1
        int elb = add(p + "elbow", utw, "p", sx * 0.14, 0, 0);                    // +1
        int ftw = add(p + "forearm_twist", elb, "r", sx * 0.13, 0, 0);            // +1
        int wri = add(p + "wrist", ftw, "rpy", sx * 0.13, 0, 0);                  // +3
        // thumb: 2+1+1, four fingers: base 2, mid 1, tip 1 each
        int tb = add(p + "thumb_base", wri, "py", sx * 0.02, -0.01, 0.03);        // +2
        int tm = add(p + "thumb_mid", tb, "p", sx * 0.03, 0, 0.01);               // +1
        add(p + "thumb_tip", tm, "p", sx * 0.03, 0, 0.005);                       // +1
        const char* fingers[4] = {"index", "middle", "ring", "pinky"};
        for (int fi = 0; fi < 4; ++fi) {
            double zoff = 0.02 - 0.013 * fi;
            int fb = add(p + fingers[fi] + std::string("_base"), wri, "py", sx * 0.09, 0, zoff);  // +2
            int fm = add(p + fingers[fi] + std::string("_mid"), fb, "p", sx * 0.035, 0, 0);       // +1
            add(p + fingers[fi] + std::string("_tip"), fm, "p", sx * 0.025, 0, 0);                // +1
        }
        // per side: 2+3+1+1+1+3 + 4 + 16 = 31
    }

    for (int side = 0; side < 2; ++side) {
        std::string p = side == 0 ? "l_" : "r_";
        double sx = side == 0 ? 1.0 : -1.0;
        int hip = add(p + "hip", pelvis, "rpy", sx * 0.09, -0.05, 0);   // +3
        int knee = add(p + "knee", hip, "p", 0, -0.42, 0);              // +1
        int ank = add(p + "ankle", knee, "rp", 0, -0.42, 0);            // +2
        add(p + "toe", ank, "p", 0, -0.05, 0.12);                       // +1
        // per side: 7
    }

    // 21 torso/head + 2*31 arms/hands + 2*7 legs = 97; pad with facial-rig
    // carriers so the full rig owns 104 angles like the reference capture
    int head = s.joint_index("head");
    add("jaw", head, "p", 0, -0.03, 0.05);          // 98
    add("l_eye", head, "py", 0.03, 0.04, 0.08);     // 100
    add("r_eye", head, "py", -0.03, 0.04, 0.08);    // 102
    add("head_top", head, "ry", 0, 0.12, 0);        // 104

    s.validate();
    require(s.dof() == 104, "desk skeleton must own 104 angles");
    return s;
}

}  // namespace convo
