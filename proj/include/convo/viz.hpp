#pragma once

#include <convo/core.hpp>
#include <convo/data.hpp>

#include <filesystem>
#include <fstream>

namespace convo {

// Stick-figure renderer: orthographic projection of forward-kinematics
// joint positions onto the x/y plane, written as a PPM image sequence
// (assemble into a video with ffmpeg if needed).

struct Image {
    int width = 0, height = 0;
    std::vector<uint8_t> rgb;

    Image(int w, int h) : width(w), height(h), rgb((size_t)w * h * 3, 255) {}

    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        if (x < 0 || y < 0 || x >= width || y >= height) return;
        size_t i = ((size_t)y * width + x) * 3;
        rgb[i] = r;
        rgb[i + 1] = g;
        rgb[i + 2] = b;
    }

    void line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
        int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            set(x0, y0, r, g, b);
            if (x0 == x1 && y0 == y1) break;
            int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void save_ppm(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        require(f.good(), "cannot write image: " + path.string());
        f << "P6\n" << width << " " << height << "\n255\n";
        f.write(reinterpret_cast<const char*>(rgb.data()), (std::streamsize)rgb.size());
        require(f.good(), "image write failed: " + path.string());
    }
};

struct VizOptions {
    int panel_width = 256;
    int panel_height = 320;
    bool face_strip = false;  // append a strip chart of face-code magnitudes
    float meters_tall = 2.0f; // world height mapped onto the panel
};

namespace detail {

inline void draw_pose(Image& img, int panel_x, const Eigen::Ref<const Vec>& pose,
                      const Skeleton& skeleton, const VizOptions& opt, uint8_t r, uint8_t g,
                      uint8_t b) {
    auto pos = forward_kinematics(pose, skeleton);
    float scale = (float)opt.panel_height / opt.meters_tall;
    auto to_px = [&](const Eigen::Vector3d& p) {
        int x = panel_x + opt.panel_width / 2 + (int)std::lround(p.x() * scale);
        int y = opt.panel_height - 10 - (int)std::lround(p.y() * scale * 0.9);
        return std::pair<int, int>(x, y);
    };
    for (size_t j = 0; j < skeleton.joints.size(); ++j) {
        int parent = skeleton.joints[j].parent;
        if (parent < 0) continue;
        auto [x0, y0] = to_px(pos[(size_t)parent]);
        auto [x1, y1] = to_px(pos[j]);
        img.line(x0, y0, x1, y1, r, g, b);
    }
}

inline void draw_face_strip(Image& img, const Eigen::Ref<const Vec>& face, int strip_y,
                            int strip_h) {
    int dims = std::min<int>(64, (int)face.size());
    for (int d = 0; d < dims; ++d) {
        float v = std::clamp(face(d) / 3.f, -1.f, 1.f);
        uint8_t r = v > 0 ? (uint8_t)(255 - v * 200) : 255;
        uint8_t b = v < 0 ? (uint8_t)(255 + v * 200) : 255;
        int x0 = d * img.width / dims, x1 = (d + 1) * img.width / dims;
        for (int y = strip_y; y < strip_y + strip_h; ++y)
            for (int x = x0; x < x1; ++x) img.set(x, y, r, (uint8_t)((r + b) / 2), b);
    }
}

}  // namespace detail

// Renders one frame per motion row; a second sequence (ground truth or an
// alternative sample) lands side by side in the same image. Returns the
// number of frames emitted.
inline int visualize(const MotionSequence& motion, const Skeleton& skeleton,
                     const std::filesystem::path& out_dir, const VizOptions& opt = {},
                     const MotionSequence* side_by_side = nullptr,
                     const FaceSequence* face = nullptr) {
    require(motion.dim() == skeleton.dof(), "pose/skeleton DOF mismatch");
    if (side_by_side)
        require(side_by_side->length() == motion.length(), "side-by-side lengths must match");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    require(!ec && std::filesystem::is_directory(out_dir),
            "cannot create output directory: " + out_dir.string());
    int panels = side_by_side ? 2 : 1;
    int strip_h = opt.face_strip ? 24 : 0;
    for (int t = 0; t < motion.length(); ++t) {
        Image img(opt.panel_width * panels, opt.panel_height + strip_h);
        detail::draw_pose(img, 0, motion.frames.row(t).transpose(), skeleton, opt, 40, 40, 200);
        if (side_by_side)
            detail::draw_pose(img, opt.panel_width, side_by_side->frames.row(t).transpose(),
                              skeleton, opt, 40, 160, 40);
        if (opt.face_strip && face && t < face->length())
            detail::draw_face_strip(img, face->frames.row(t).transpose(), opt.panel_height,
                                    strip_h);
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%05d.ppm", t);
        img.save_ppm(out_dir / name);
    }
    return motion.length();
}

}  // namespace convo
