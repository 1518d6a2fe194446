#pragma once

#include <convo/audio.hpp>
#include <convo/checkpoint.hpp>
#include <convo/data.hpp>
#include <convo/rvq.hpp>

#include <algorithm>
#include <numeric>

namespace convo {

// Audio-conditioned autoregressive transformer over flattened residual-VQ
// tokens. Masked self-attention sees only previous tokens; non-causal
// cross-attention sees the full audio context; the time-averaged audio
// embedding drives FiLM in every block.
struct GuideTransformerConfig {
    int self_layers = 2;
    int cross_layers = 6;
    int heads = 8;
    int width = 256;
    int ff_hidden = 512;
    int max_poses = 20;     // longest guide sequence the position table covers
    int pose_stride = 30;   // frames per guide pose (1 for the VQ-only ablation)
    float lr = 1e-3f;

    void validate() const {
        require(self_layers > 0 && cross_layers > 0 && heads > 0, "layer/head counts must be positive");
        require(width % heads == 0, "width must divide heads");
    }

    Json to_json() const {
        return {{"self_layers", self_layers}, {"cross_layers", cross_layers}, {"heads", heads},
                {"width", width},             {"ff_hidden", ff_hidden},       {"max_poses", max_poses},
                {"pose_stride", pose_stride}, {"lr", lr}};
    }
    static GuideTransformerConfig from_json(const Json& j) {
        GuideTransformerConfig c;
        c.self_layers = j.value("self_layers", c.self_layers);
        c.cross_layers = j.value("cross_layers", c.cross_layers);
        c.heads = j.value("heads", c.heads);
        c.width = j.value("width", c.width);
        c.ff_hidden = j.value("ff_hidden", c.ff_hidden);
        c.max_poses = j.value("max_poses", c.max_poses);
        c.pose_stride = j.value("pose_stride", c.pose_stride);
        c.lr = j.value("lr", c.lr);
        return c;
    }
};

namespace detail {

struct GuideBlock {
    nn::LayerNorm ln_attn, ln_ff;
    nn::MultiheadAttention attn;
    nn::Film film;
    nn::FeedForward ff;

    GuideBlock() = default;
    GuideBlock(Rng& rng, int width, int heads, int ff_hidden)
        : ln_attn(width), ln_ff(width), attn(rng, width, heads), film(rng, width, width),
          ff(rng, width, ff_hidden) {}

    // mem == nullptr means self-attention
    nn::Node* fwd(nn::Tape& t, nn::Node* x, nn::Node* mem, const Mat* mask, nn::Node* film_cond) {
        nn::Node* h = ln_attn.fwd(t, x);
        x = nn::add(t, x, attn.fwd(t, h, mem ? mem : h, mask));
        x = film.fwd(t, x, film_cond);
        return nn::add(t, x, ff.fwd(t, ln_ff.fwd(t, x)));
    }

    nn::ParamList params() {
        nn::ParamList pl;
        pl.merge("ln_attn", ln_attn.params());
        pl.merge("ln_ff", ln_ff.params());
        pl.merge("attn", attn.params());
        pl.merge("film", film.params());
        pl.merge("ff", ff.params());
        return pl;
    }
};

}  // namespace detail

class GuideTransformer {
public:
    GuideTransformerConfig cfg;
    int codebook_size = 0;   // C; vocabulary adds one BOS token
    int residual_depth = 0;  // N tokens per pose
    int d_audio = 0;         // stacked dyad feature width (2 * d_a)

    nn::Embedding tok_emb, pos_emb, level_emb;
    nn::Linear audio_in;
    std::vector<detail::GuideBlock> self_blocks, cross_blocks;
    nn::LayerNorm ln_final;
    nn::Linear head;

    GuideTransformer() = default;
    GuideTransformer(const GuideTransformerConfig& config, int c_size, int depth, int audio_dim,
                     Rng& rng)
        : cfg(config), codebook_size(c_size), residual_depth(depth), d_audio(audio_dim) {
        cfg.validate();
        require(c_size >= 2 && depth >= 1, "transformer needs a trained codebook shape");
        tok_emb = nn::Embedding(rng, c_size + 1, cfg.width);  // + BOS
        pos_emb = nn::Embedding(rng, cfg.max_poses * depth, cfg.width);
        level_emb = nn::Embedding(rng, depth, cfg.width);
        audio_in = nn::Linear(rng, audio_dim, cfg.width);
        for (int i = 0; i < cfg.self_layers; ++i)
            self_blocks.emplace_back(rng, cfg.width, cfg.heads, cfg.ff_hidden);
        for (int i = 0; i < cfg.cross_layers; ++i)
            cross_blocks.emplace_back(rng, cfg.width, cfg.heads, cfg.ff_hidden);
        ln_final = nn::LayerNorm(cfg.width);
        head = nn::Linear(rng, cfg.width, c_size, /*zero_init=*/true);
    }

    int bos_token() const { return codebook_size; }
    int max_tokens() const { return cfg.max_poses * residual_depth; }

    // Teacher-forced pass: row i of the result is the distribution over
    // token i given tokens < i and the full audio context.
    nn::Node* logits_graph(nn::Tape& t, const std::vector<int>& targets_prefix,
                           const AudioFeatures& audio) {
        int m = (int)targets_prefix.size() + 1;  // BOS plus given tokens
        require(m <= max_tokens(), "token sequence exceeds the trained horizon");
        std::vector<int> input_ids(1, bos_token());
        for (int id : targets_prefix) {
            require(id >= 0 && id < codebook_size, "prefix contains invalid token index");
            input_ids.push_back(id);
        }
        std::vector<int> positions(m), levels(m);
        std::iota(positions.begin(), positions.end(), 0);
        for (int i = 0; i < m; ++i) levels[(size_t)i] = i % residual_depth;

        nn::Node* x = nn::add(t, tok_emb.fwd(t, input_ids),
                              nn::add(t, pos_emb.fwd(t, positions), level_emb.fwd(t, levels)));

        Mat audio_stack = audio.stacked();
        require((int)audio_stack.cols() == d_audio, "audio feature width mismatch");
        std::vector<float> frame_pos(audio_stack.rows());
        for (size_t i = 0; i < frame_pos.size(); ++i) frame_pos[i] = (float)i * 0.1f;
        nn::Node* mem = nn::add(t, audio_in.fwd(t, t.constant(audio_stack)),
                                t.constant(nn::sinusoidal_rows(frame_pos, cfg.width)));
        nn::Node* film_cond = nn::mean_rows(t, mem);

        Mat self_mask = nn::causal_mask(m);
        for (auto& b : self_blocks) x = b.fwd(t, x, nullptr, &self_mask, film_cond);
        for (auto& b : cross_blocks) x = b.fwd(t, x, mem, nullptr, film_cond);
        return head.fwd(t, ln_final.fwd(t, x));
    }

    Mat logits_all(const std::vector<int>& targets_prefix, const AudioFeatures& audio) {
        nn::Tape t;
        return logits_graph(t, targets_prefix, audio)->value;
    }

    nn::ParamList params() {
        nn::ParamList pl;
        pl.merge("tok_emb", tok_emb.params());
        pl.merge("pos_emb", pos_emb.params());
        pl.merge("level_emb", level_emb.params());
        pl.merge("audio_in", audio_in.params());
        for (size_t i = 0; i < self_blocks.size(); ++i)
            pl.merge("self" + std::to_string(i), self_blocks[i].params());
        for (size_t i = 0; i < cross_blocks.size(); ++i)
            pl.merge("cross" + std::to_string(i), cross_blocks[i].params());
        pl.merge("ln_final", ln_final.params());
        pl.merge("head", head.params());
        return pl;
    }
};

// Logits for the next token after the given prefix.
inline Vec next_token_logits(GuideTransformer& model, const std::vector<int>& prefix,
                             const AudioFeatures& audio) {
    require((int)prefix.size() < model.max_tokens(), "prefix already spans the full horizon");
    Mat logits = model.logits_all(prefix, audio);
    return logits.row(logits.rows() - 1).transpose();
}

// Smallest set of tokens whose sorted probabilities reach p; sorting ties
// break toward the lower index.
inline std::vector<int> nucleus_set(const Vec& logits, float p) {
    require(p > 0.f && p <= 1.f, "nucleus p must be in (0, 1]");
    require(logits.allFinite(), "non-finite logits");
    int n = (int)logits.size();
    double mx = logits.maxCoeff();
    std::vector<double> probs((size_t)n);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        probs[(size_t)i] = std::exp((double)logits(i) - mx);
        sum += probs[(size_t)i];
    }
    for (auto& q : probs) q /= sum;
    std::vector<int> order((size_t)n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[(size_t)a] > probs[(size_t)b]; });
    std::vector<int> keep;
    double acc = 0;
    for (int idx : order) {
        keep.push_back(idx);
        acc += probs[(size_t)idx];
        if (acc >= (double)p - 1e-12) break;
    }
    return keep;
}

inline int nucleus_sample(const Vec& logits, float p, Rng& rng) {
    std::vector<int> keep = nucleus_set(logits, p);
    double mx = logits.maxCoeff();
    std::vector<double> w(keep.size());
    double sum = 0;
    for (size_t i = 0; i < keep.size(); ++i) {
        w[i] = std::exp((double)logits(keep[i]) - mx);
        sum += w[i];
    }
    double u = (double)rng.uniform() * sum;
    double acc = 0;
    for (size_t i = 0; i < keep.size(); ++i) {
        acc += w[i];
        if (u <= acc) return keep[i];
    }
    return keep.back();
}

// Autoregressive rollout of K*N tokens for the audio's duration, decoded
// to guide poses through the residual-VQ decoder.
inline GuidePoseSequence generate_guide_poses(GuideTransformer& model, RvqModel& rvq,
                                              const AudioFeatures& audio, float top_p, Rng& rng,
                                              TokenSequence* tokens_out = nullptr) {
    require(model.codebook_size == rvq.cfg.codebook_size &&
                model.residual_depth == rvq.cfg.residual_depth,
            "transformer and rvq models disagree on C or N");
    require(audio.length() >= kMotionFps, "audio shorter than 1 s");
    int k_poses = audio.length() / model.cfg.pose_stride;
    require(k_poses >= 1, "audio shorter than one guide stride");
    require(k_poses <= model.cfg.max_poses, "audio longer than the trained horizon");
    int total = k_poses * model.residual_depth;
    std::vector<int> tokens;
    tokens.reserve((size_t)total);
    for (int i = 0; i < total; ++i) {
        Vec logits = next_token_logits(model, tokens, audio);
        tokens.push_back(nucleus_sample(logits, top_p, rng));
    }
    TokenSequence ts;
    ts.tokens = tokens;
    ts.codebook_size = model.codebook_size;
    ts.residual_depth = model.residual_depth;
    ts.validate();
    if (tokens_out) *tokens_out = ts;
    return decode(rvq, ts);
}

struct GuideTrainLog {
    std::vector<float> loss;          // sampled every 50 steps
    float final_loss = 0.f;
    std::vector<float> level_accuracy;  // teacher-forced accuracy per residual level
};

// Next-token cross entropy with teacher forcing on tokens produced by the
// frozen rvq encoder.
inline GuideTrainLog train_guide_transformer(GuideTransformer& model, RvqModel& rvq,
                                             const std::vector<const Take*>& takes, int steps,
                                             uint64_t seed) {
    require(!takes.empty(), "guide transformer corpus is empty");
    Rng rng(seed);
    nn::Tape tape;
    nn::Adam opt(model.cfg.lr);
    GuideTrainLog log;
    std::vector<long> level_hits((size_t)model.residual_depth, 0),
        level_total((size_t)model.residual_depth, 0);

    for (int step = 0; step < steps; ++step) {
        const Take& take = *takes[(size_t)rng.uniform_int(0, (int)takes.size() - 1)];
        Take window = take.length() > kMinWindowFrames ? sample_training_window(take, rng) : take;
        int max_frames = model.cfg.max_poses * model.cfg.pose_stride;
        if (window.length() > max_frames) window = window.slice(0, max_frames);
        if (window.length() < model.cfg.pose_stride) continue;
        GuidePoseSequence guides = subsample_guide_poses(window.motion, model.cfg.pose_stride);
        TokenSequence ts = encode_tokens(rvq, guides);

        tape.clear();
        // input row i holds token i-1 (BOS at 0) and predicts token i
        std::vector<int> prefix(ts.tokens.begin(), ts.tokens.end() - 1);
        nn::Node* logits = model.logits_graph(tape, prefix, window.audio);
        const std::vector<int>& targets = ts.tokens;
        require(logits->value.rows() == (int)targets.size(), "teacher forcing misalignment");
        nn::Node* loss = nn::cross_entropy(tape, logits, targets);
        float loss_v = loss->value(0, 0);
        if (!std::isfinite(loss_v))
            throw ConvoError("NaN loss in guide transformer training at step " + std::to_string(step));
        tape.backward(loss);
        opt.step(tape);

        for (int i = 0; i < (int)targets.size(); ++i) {
            int pred;
            logits->value.row(i).maxCoeff(&pred);
            int lvl = i % model.residual_depth;
            level_total[(size_t)lvl]++;
            if (pred == targets[(size_t)i]) level_hits[(size_t)lvl]++;
        }
        if (step % 50 == 0) log.loss.push_back(loss_v);
        log.final_loss = loss_v;
    }
    for (int n = 0; n < model.residual_depth; ++n)
        log.level_accuracy.push_back(level_total[(size_t)n] > 0
                                         ? (float)level_hits[(size_t)n] / level_total[(size_t)n]
                                         : 0.f);
    return log;
}

inline void save_guide(const GuideTransformer& model, const std::filesystem::path& path,
                       uint64_t seed, int step, const GuideTrainLog& log) {
    Json manifest = {{"model", "guide"},
                     {"config", model.cfg.to_json()},
                     {"codebook_size", model.codebook_size},
                     {"residual_depth", model.residual_depth},
                     {"d_audio", model.d_audio},
                     {"seed", seed},
                     {"step", step},
                     {"losses", {{"cross_entropy", log.final_loss}}}};
    nn::ParamList pl = const_cast<GuideTransformer&>(model).params();
    save_checkpoint(path, manifest, pl);
}

inline GuideTransformer load_guide(const std::filesystem::path& path) {
    Json manifest = read_checkpoint_manifest(path);
    require(manifest.value("model", "") == "guide", "checkpoint is not a guide transformer");
    Rng rng(0);
    GuideTransformer model(GuideTransformerConfig::from_json(manifest.at("config")),
                           manifest.at("codebook_size").get<int>(),
                           manifest.at("residual_depth").get<int>(),
                           manifest.at("d_audio").get<int>(), rng);
    nn::ParamList pl = model.params();
    load_checkpoint_params(path, pl);
    return model;
}

}  // namespace convo
