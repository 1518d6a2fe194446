#pragma once

#include <convo/checkpoint.hpp>
#include <convo/core.hpp>
#include <convo/nn/layers.hpp>

namespace convo {

// Residual VQ-VAE over 1 fps guide poses. Encoder and decoder are stacks
// of kernel-2 causal 1-D convolutions with dilations 1,2,4, so each has a
// total receptive field of 8 timesteps.
struct RvqConfig {
    int codebook_size = 1024;
    int embedding_dim = 64;
    int residual_depth = 4;
    int hidden = 128;
    float commitment_beta = 0.25f;
    float ema_decay = 0.99f;
    int dead_code_steps = 200;  // reseed entries unused this long
    float lr = 1e-3f;
    int batch_windows = 4;      // guide windows per optimizer step

    void validate() const {
        require(codebook_size >= 2, "codebook size must be >= 2");
        require(residual_depth >= 1, "residual depth must be >= 1");
        require(embedding_dim >= 1 && hidden >= 1, "rvq dims must be positive");
    }

    Json to_json() const {
        return {{"codebook_size", codebook_size}, {"embedding_dim", embedding_dim},
                {"residual_depth", residual_depth}, {"hidden", hidden},
                {"commitment_beta", commitment_beta}, {"ema_decay", ema_decay},
                {"dead_code_steps", dead_code_steps}, {"lr", lr},
                {"batch_windows", batch_windows}};
    }
    static RvqConfig from_json(const Json& j) {
        RvqConfig c;
        c.codebook_size = j.value("codebook_size", c.codebook_size);
        c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
        c.residual_depth = j.value("residual_depth", c.residual_depth);
        c.hidden = j.value("hidden", c.hidden);
        c.commitment_beta = j.value("commitment_beta", c.commitment_beta);
        c.ema_decay = j.value("ema_decay", c.ema_decay);
        c.dead_code_steps = j.value("dead_code_steps", c.dead_code_steps);
        c.lr = j.value("lr", c.lr);
        c.batch_windows = j.value("batch_windows", c.batch_windows);
        return c;
    }
};

// Flattened residual-VQ token sequence: row-major over (timestep k,
// residual level n), every index in [0, C).
struct TokenSequence {
    std::vector<int> tokens;
    int codebook_size = 0;
    int residual_depth = 0;

    int timesteps() const { return residual_depth > 0 ? (int)tokens.size() / residual_depth : 0; }

    void validate() const {
        require(residual_depth >= 1, "token sequence needs residual depth");
        require(tokens.size() % (size_t)residual_depth == 0,
                "token count must be divisible by residual depth");
        for (int id : tokens)
            require(id >= 0 && id < codebook_size, "token index out of codebook range");
    }

    // K x N index grid <-> flat layout
    static TokenSequence flatten(const std::vector<std::vector<int>>& grid, int codebook_size) {
        TokenSequence ts;
        ts.codebook_size = codebook_size;
        ts.residual_depth = grid.empty() ? 1 : (int)grid[0].size();
        for (const auto& row : grid) {
            require((int)row.size() == ts.residual_depth, "ragged token grid");
            for (int id : row) ts.tokens.push_back(id);
        }
        return ts;
    }
    std::vector<std::vector<int>> unflatten() const {
        validate();
        std::vector<std::vector<int>> grid((size_t)timesteps());
        for (int k = 0; k < timesteps(); ++k)
            grid[(size_t)k].assign(tokens.begin() + (size_t)k * residual_depth,
                                   tokens.begin() + (size_t)(k + 1) * residual_depth);
        return grid;
    }
};

class RvqModel {
public:
    RvqConfig cfg;
    int d_pose = 0;

    nn::Conv1dK2 enc1, enc2, enc3;
    nn::Conv1dK2 dec1, dec2, dec3;
    std::vector<nn::Param> codebooks;  // per level, C x embedding_dim

    RvqModel() = default;
    RvqModel(const RvqConfig& config, int pose_dim, Rng& rng) : cfg(config), d_pose(pose_dim) {
        cfg.validate();
        enc1 = nn::Conv1dK2(rng, d_pose, cfg.hidden, 1);
        enc2 = nn::Conv1dK2(rng, cfg.hidden, cfg.hidden, 2);
        enc3 = nn::Conv1dK2(rng, cfg.hidden, cfg.embedding_dim, 4);
        dec1 = nn::Conv1dK2(rng, cfg.embedding_dim, cfg.hidden, 1);
        dec2 = nn::Conv1dK2(rng, cfg.hidden, cfg.hidden, 2);
        dec3 = nn::Conv1dK2(rng, cfg.hidden, d_pose, 4);
        for (int n = 0; n < cfg.residual_depth; ++n) {
            nn::Param cb = nn::make_param(rng, cfg.codebook_size, cfg.embedding_dim, 0.1f);
            cb.value.row(0).setZero();  // keeps the residual-norm contraction property
            codebooks.push_back(std::move(cb));
        }
    }

    nn::Node* encode_graph(nn::Tape& t, nn::Node* poses) {
        nn::Node* h = nn::gelu(t, enc1.fwd(t, poses));
        h = nn::gelu(t, enc2.fwd(t, h));
        return enc3.fwd(t, h);
    }

    nn::Node* decode_graph(nn::Tape& t, nn::Node* latents) {
        nn::Node* h = nn::gelu(t, dec1.fwd(t, latents));
        h = nn::gelu(t, dec2.fwd(t, h));
        return dec3.fwd(t, h);
    }

    nn::ParamList params() {
        nn::ParamList pl;
        pl.merge("enc1", enc1.params());
        pl.merge("enc2", enc2.params());
        pl.merge("enc3", enc3.params());
        pl.merge("dec1", dec1.params());
        pl.merge("dec2", dec2.params());
        pl.merge("dec3", dec3.params());
        for (size_t n = 0; n < codebooks.size(); ++n)
            pl.add("codebook" + std::to_string(n), &codebooks[n]);
        return pl;
    }
};

// Greedy recursive quantization of one latent vector: at each level pick
// the nearest entry of that level's codebook, subtract it, continue on the
// residual. Ties break toward the lower index.
inline std::pair<std::vector<int>, Vec> quantize_residual(const Vec& latent,
                                                          const std::vector<nn::Param>& codebooks) {
    std::vector<int> indices;
    Vec residual = latent;
    Vec quantized = Vec::Zero(latent.size());
    for (const nn::Param& cb : codebooks) {
        require(cb.value.allFinite(), "codebook contains non-finite entries");
        int best = 0;
        float best_d = std::numeric_limits<float>::infinity();
        for (int j = 0; j < cb.value.rows(); ++j) {
            float d = (residual.transpose() - cb.value.row(j)).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        indices.push_back(best);
        residual -= cb.value.row(best).transpose();
        quantized += cb.value.row(best).transpose();
    }
    return {indices, quantized};
}

inline Mat rvq_encode_values(RvqModel& model, const Mat& poses) {
    nn::Tape t;
    return model.encode_graph(t, t.constant(poses))->value;
}

inline Mat rvq_decode_values(RvqModel& model, const Mat& latents) {
    nn::Tape t;
    return model.decode_graph(t, t.constant(latents))->value;
}

// K x embedding_dim latents, one per guide timestep
inline Mat encode(RvqModel& model, const GuidePoseSequence& guide) {
    require(guide.length() >= 1, "guide sequence is empty");
    require(guide.dim() == model.d_pose, "pose dim does not match trained model");
    return rvq_encode_values(model, guide.poses);
}

inline TokenSequence encode_tokens(RvqModel& model, const GuidePoseSequence& guide) {
    Mat z = encode(model, guide);
    std::vector<std::vector<int>> grid;
    for (int k = 0; k < z.rows(); ++k) {
        auto [ids, q] = quantize_residual(z.row(k).transpose(), model.codebooks);
        grid.push_back(ids);
    }
    return TokenSequence::flatten(grid, model.cfg.codebook_size);
}

// Reconstruction from tokens; active_levels < residual_depth drops the
// finest residual levels before decoding.
inline GuidePoseSequence decode(RvqModel& model, const TokenSequence& tokens, int active_levels = -1) {
    require(tokens.residual_depth == model.cfg.residual_depth, "token depth mismatch");
    require(tokens.tokens.size() % (size_t)model.cfg.residual_depth == 0,
            "token count must be divisible by residual depth");
    int levels = active_levels < 0 ? model.cfg.residual_depth : active_levels;
    require(levels >= 1 && levels <= model.cfg.residual_depth, "bad active level count");
    int k_steps = tokens.timesteps();
    require(k_steps >= 1, "empty token sequence");
    Mat latents = Mat::Zero(k_steps, model.cfg.embedding_dim);
    for (int k = 0; k < k_steps; ++k)
        for (int n = 0; n < levels; ++n) {
            int id = tokens.tokens[(size_t)k * model.cfg.residual_depth + n];
            require(id >= 0 && id < model.cfg.codebook_size, "token index out of codebook range");
            latents.row(k) += model.codebooks[(size_t)n].value.row(id);
        }
    nn::Tape t;
    GuidePoseSequence out;
    out.poses = model.decode_graph(t, t.constant(latents))->value;
    return out;
}

struct RvqTrainLog {
    std::vector<float> recon_loss;  // sampled every 100 steps
    float final_recon = 0.f, final_commit = 0.f;
};

// EMA codebook training with straight-through gradients for the conv
// stacks. Dead entries (unused for cfg.dead_code_steps) are reseeded from
// the residuals seen in the current batch.
inline RvqTrainLog train_rvq(RvqModel& model, const std::vector<GuidePoseSequence>& corpus,
                             int steps, uint64_t seed) {
    require(!corpus.empty(), "rvq training corpus is empty");
    for (const auto& g : corpus) require(g.dim() == model.d_pose, "corpus pose dim mismatch");
    Rng rng(seed);
    nn::Tape tape;
    nn::Adam opt(model.cfg.lr);
    const int depth = model.cfg.residual_depth;
    const int c_size = model.cfg.codebook_size;
    const int e_dim = model.cfg.embedding_dim;

    std::vector<Mat> ema_sum(depth, Mat::Zero(c_size, e_dim));
    std::vector<Vec> ema_count(depth, Vec::Zero(c_size));
    std::vector<std::vector<int>> unused_for((size_t)depth, std::vector<int>(c_size, 0));
    RvqTrainLog log;

    const int batch = std::max(1, model.cfg.batch_windows);
    for (int step = 0; step < steps; ++step) {
        tape.clear();
        std::vector<Mat> batch_sum((size_t)depth, Mat::Zero(c_size, e_dim));
        std::vector<Vec> batch_count((size_t)depth, Vec::Zero(c_size));
        std::vector<Mat> reseed_pool((size_t)depth);  // residual inputs seen this step
        nn::Node* total_loss = nullptr;
        float recon_acc = 0.f, commit_acc = 0.f;

        for (int b = 0; b < batch; ++b) {
            const GuidePoseSequence& seq =
                corpus[(size_t)rng.uniform_int(0, (int)corpus.size() - 1)];
            int k_len = std::min(seq.length(), 20);
            int start = rng.uniform_int(0, seq.length() - k_len);
            Mat poses = seq.poses.middleRows(start, k_len);

            nn::Node* z = model.encode_graph(tape, tape.constant(poses));
            const Mat& z_val = z->value;

            // greedy residual assignment per timestep, tracking per-level
            // inputs and the cumulative quantization per depth
            std::vector<Mat> cum_quant((size_t)depth, Mat(k_len, e_dim));
            for (int k = 0; k < k_len; ++k) {
                Vec residual = z_val.row(k).transpose();
                Vec q = Vec::Zero(e_dim);
                for (int n = 0; n < depth; ++n) {
                    const Mat& cb = model.codebooks[(size_t)n].value;
                    int best = 0;
                    float best_d = std::numeric_limits<float>::infinity();
                    for (int j = 0; j < c_size; ++j) {
                        float d = (residual.transpose() - cb.row(j)).squaredNorm();
                        if (d < best_d) {
                            best_d = d;
                            best = j;
                        }
                    }
                    batch_sum[(size_t)n].row(best) += residual.transpose();
                    batch_count[(size_t)n](best) += 1.f;
                    Mat& pool = reseed_pool[(size_t)n];
                    pool.conservativeResize(pool.rows() + 1, e_dim);
                    pool.row(pool.rows() - 1) = residual.transpose();
                    residual -= cb.row(best).transpose();
                    q += cb.row(best).transpose();
                    cum_quant[(size_t)n].row(k) = q.transpose();
                }
            }
            const Mat& quantized = cum_quant[(size_t)depth - 1];

            // quantizer dropout: half the windows decode from a random
            // prefix of residual levels so partial-depth reconstructions
            // stay usable
            int active = depth;
            if (depth > 1 && rng.uniform() < 0.5f) active = rng.uniform_int(1, depth);

            // straight-through: decoder sees quantized latents, encoder
            // gets the identity gradient
            nn::Node* dec_in =
                nn::add(tape, z, tape.constant(cum_quant[(size_t)active - 1] - z_val));
            nn::Node* recon = model.decode_graph(tape, dec_in);
            nn::Node* recon_loss = nn::mse(tape, recon, poses);
            nn::Node* commit = nn::mse(tape, z, quantized);
            nn::Node* loss =
                nn::add(tape, recon_loss, nn::scale(tape, commit, model.cfg.commitment_beta));
            recon_acc += recon_loss->value(0, 0);
            commit_acc += commit->value(0, 0);
            total_loss = total_loss ? nn::add(tape, total_loss, loss) : loss;
        }

        float recon_v = recon_acc / (float)batch, commit_v = commit_acc / (float)batch;
        if (!std::isfinite(recon_v) || !std::isfinite(commit_v))
            throw ConvoError("NaN loss in rvq training at step " + std::to_string(step));
        total_loss = nn::scale(tape, total_loss, 1.f / (float)batch);
        tape.backward(total_loss);
        opt.step(tape);

        // EMA codebook update + dead-code reseeding
        for (int n = 0; n < depth; ++n) {
            float d = model.cfg.ema_decay;
            ema_sum[(size_t)n] = d * ema_sum[(size_t)n] + (1.f - d) * batch_sum[(size_t)n];
            ema_count[(size_t)n] = d * ema_count[(size_t)n] + (1.f - d) * batch_count[(size_t)n];
            Mat& cb = model.codebooks[(size_t)n].value;
            for (int j = 0; j < c_size; ++j) {
                if (batch_count[(size_t)n](j) > 0.f) {
                    unused_for[(size_t)n][(size_t)j] = 0;
                    cb.row(j) = ema_sum[(size_t)n].row(j) / (ema_count[(size_t)n](j) + 1e-5f);
                } else if (++unused_for[(size_t)n][(size_t)j] >= model.cfg.dead_code_steps) {
                    int src = rng.uniform_int(0, (int)reseed_pool[(size_t)n].rows() - 1);
                    cb.row(j) = reseed_pool[(size_t)n].row(src);
                    ema_sum[(size_t)n].row(j) = cb.row(j) * 0.1f;
                    ema_count[(size_t)n](j) = 0.1f;
                    unused_for[(size_t)n][(size_t)j] = 0;
                }
            }
        }

        if (step % 100 == 0) log.recon_loss.push_back(recon_v);
        log.final_recon = recon_v;
        log.final_commit = commit_v;
    }
    return log;
}

// mean reconstruction MSE over a held-out set with n active levels
inline double rvq_reconstruction_mse(RvqModel& model, const std::vector<GuidePoseSequence>& seqs,
                                     int active_levels) {
    double total = 0.0;
    long count = 0;
    for (const auto& g : seqs) {
        TokenSequence toks = encode_tokens(model, g);
        GuidePoseSequence rec = decode(model, toks, active_levels);
        total += (double)(rec.poses - g.poses).array().square().sum();
        count += (long)g.poses.size();
    }
    return count > 0 ? total / (double)count : 0.0;
}

inline void save_rvq(const RvqModel& model, const std::filesystem::path& path, uint64_t seed,
                     int step, const RvqTrainLog& log) {
    Json manifest = {{"model", "rvq"},
                     {"config", model.cfg.to_json()},
                     {"d_pose", model.d_pose},
                     {"seed", seed},
                     {"step", step},
                     {"losses", {{"recon", log.final_recon}, {"commit", log.final_commit}}}};
    nn::ParamList pl = const_cast<RvqModel&>(model).params();
    save_checkpoint(path, manifest, pl);
}

inline RvqModel load_rvq(const std::filesystem::path& path) {
    Json manifest = read_checkpoint_manifest(path);
    require(manifest.value("model", "") == "rvq", "checkpoint is not an rvq model");
    Rng rng(0);
    RvqModel model(RvqConfig::from_json(manifest.at("config")), manifest.at("d_pose").get<int>(), rng);
    nn::ParamList pl = model.params();
    load_checkpoint_params(path, pl);
    return model;
}

}  // namespace convo
