#pragma once

#include <convo/array_io.hpp>
#include <convo/nn/layers.hpp>

#include <filesystem>
#include <fstream>

namespace convo {

// Checkpoint = JSON manifest (model type, config, seed, step, losses,
// tensor index) followed by one float32 payload holding every named
// parameter back to back.
inline constexpr char kCkptMagic[8] = {'C', 'O', 'N', 'V', 'O', 'C', 'K', 'P'};

inline void save_checkpoint(const std::filesystem::path& path, Json manifest,
                            const nn::ParamList& params) {
    Json index = Json::array();
    size_t offset = 0;
    for (const auto& [name, p] : params.items) {
        index.push_back({{"name", name}, {"rows", p->rows()}, {"cols", p->cols()}, {"offset", offset}});
        offset += (size_t)p->rows() * p->cols();
    }
    manifest["tensors"] = index;
    manifest["version"] = 1;

    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint for write: " + path.string());
    std::string hdr = manifest.dump();
    uint32_t hlen = (uint32_t)hdr.size();
    f.write(kCkptMagic, 8);
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hdr.data(), hlen);
    std::vector<float> buf;
    for (const auto& [name, p] : params.items) {
        buf.resize((size_t)p->rows() * p->cols());
        for (int r = 0; r < p->rows(); ++r)
            for (int c = 0; c < p->cols(); ++c) buf[(size_t)r * p->cols() + c] = p->value(r, c);
        f.write(reinterpret_cast<const char*>(buf.data()), (std::streamsize)(buf.size() * sizeof(float)));
    }
    require(f.good(), "checkpoint write failed: " + path.string());
}

// Reads the manifest only (to dispatch on model type / config).
inline Json read_checkpoint_manifest(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint: " + path.string());
    char magic[8];
    f.read(magic, 8);
    require(f.good() && std::memcmp(magic, kCkptMagic, 8) == 0, "bad checkpoint magic: " + path.string());
    uint32_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    require(f.good() && hlen > 0 && hlen < (1u << 26), "bad checkpoint header length");
    std::string hdr(hlen, '\0');
    f.read(hdr.data(), hlen);
    require(f.good(), "truncated checkpoint header");
    return Json::parse(hdr);
}

// Fills an already-constructed model's params by name; shapes must match.
inline void load_checkpoint_params(const std::filesystem::path& path, nn::ParamList& params) {
    Json manifest = read_checkpoint_manifest(path);
    std::ifstream f(path, std::ios::binary);
    f.seekg(8, std::ios::beg);
    uint32_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    f.seekg(8 + 4 + hlen, std::ios::beg);
    std::streampos payload_start = f.tellg();

    std::unordered_map<std::string, Json> index;
    for (const auto& e : manifest.at("tensors")) index[e.at("name").get<std::string>()] = e;

    std::vector<float> buf;
    for (auto& [name, p] : params.items) {
        auto it = index.find(name);
        require(it != index.end(), "checkpoint missing tensor: " + name);
        int rows = it->second.at("rows").get<int>();
        int cols = it->second.at("cols").get<int>();
        require(rows == p->rows() && cols == p->cols(), "checkpoint shape mismatch for: " + name);
        size_t offset = it->second.at("offset").get<size_t>();
        buf.resize((size_t)rows * cols);
        f.seekg(payload_start + (std::streampos)(offset * sizeof(float)), std::ios::beg);
        f.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)(buf.size() * sizeof(float)));
        require(f.good(), "truncated checkpoint payload at: " + name);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) p->value(r, c) = buf[(size_t)r * cols + c];
    }
}

}  // namespace convo
