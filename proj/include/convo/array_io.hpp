#pragma once

#include <convo/common.hpp>

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

namespace convo {

using Json = nlohmann::json;

// One binary container for every array on disk: 8-byte magic, u32 JSON
// header length, header bytes, then a little-endian float32 payload.
// The header carries the shape plus format-specific metadata.
inline constexpr char kArrayMagic[8] = {'C', 'O', 'N', 'V', 'O', 'A', 'R', 'R'};

inline void write_array_file(const std::filesystem::path& path, const Json& header, const float* data,
                             size_t count) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open for write: " + path.string());
    std::string hdr = header.dump();
    uint32_t hlen = (uint32_t)hdr.size();
    f.write(kArrayMagic, 8);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hdr.data(), hlen);
    f.write(reinterpret_cast<const char*>(data), (std::streamsize)(count * sizeof(float)));
    require(f.good(), "write failed: " + path.string());
}

struct ArrayFile {
    Json header;
    std::vector<float> data;
};

inline ArrayFile read_array_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open: " + path.string());
    char magic[8];
    f.read(magic, 8);
    require(f.good() && std::memcmp(magic, kArrayMagic, 8) == 0, "malformed feature file: bad magic in " + path.string());
    uint32_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    require(f.good() && hlen > 0 && hlen < (1u << 24), "malformed feature file: bad header length");
    std::string hdr(hlen, '\0');
    f.read(hdr.data(), hlen);
    require(f.good(), "malformed feature file: truncated header");
    ArrayFile out;
    try {
        out.header = Json::parse(hdr);
    } catch (const std::exception& e) {
        throw ConvoError(std::string("malformed feature file: header parse: ") + e.what());
    }
    f.seekg(0, std::ios::end);
    auto end = f.tellg();
    size_t payload = (size_t)end - (8 + 4 + hlen);
    require(payload % sizeof(float) == 0, "malformed feature file: payload not float32-aligned");
    out.data.resize(payload / sizeof(float));
    f.seekg(8 + 4 + hlen, std::ios::beg);
    f.read(reinterpret_cast<char*>(out.data.data()), (std::streamsize)payload);
    require(f.good(), "malformed feature file: truncated payload");
    return out;
}

// Row-major matrix convenience wrappers (rows = time, cols = channels).
inline void save_matrix(const std::filesystem::path& path, const Mat& m, float fps = 0.f) {
    Json h = {{"kind", "matrix"}, {"rows", m.rows()}, {"cols", m.cols()}};
    if (fps > 0.f) h["fps"] = fps;
    std::vector<float> buf((size_t)m.rows() * m.cols());
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) buf[(size_t)r * m.cols() + c] = m(r, c);
    write_array_file(path, h, buf.data(), buf.size());
}

inline Mat load_matrix(const std::filesystem::path& path) {
    ArrayFile af = read_array_file(path);
    require(af.header.value("kind", "") == "matrix", "malformed feature file: expected matrix kind");
    int rows = af.header.at("rows").get<int>();
    int cols = af.header.at("cols").get<int>();
    require(rows >= 0 && cols >= 0 && (size_t)rows * cols == af.data.size(),
            "malformed feature file: shape/payload mismatch");
    Mat m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = af.data[(size_t)r * cols + c];
    return m;
}

// FNV over the row-major byte stream
inline uint64_t matrix_checksum(const Mat& m) {
    uint64_t h = 1469598103934665603ULL;
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) {
            float v = m(r, c);
            h = fnv1a(&v, sizeof(float), h);
        }
    return h;
}

}  // namespace convo
