#pragma once

#include <convo/checkpoint.hpp>
#include <convo/nn/layers.hpp>

#include <optional>

namespace convo {

// DDPM noise schedule. alpha[tau] and alpha_bar[tau] are 1-indexed by
// diffusion step; index 0 carries the tau=0 boundary convention
// alpha_bar = 1 (no noise).
struct NoiseSchedule {
    int steps = 0;
    std::vector<float> alpha;      // per-step alpha_tau
    std::vector<float> alpha_bar;  // cumulative products

    static NoiseSchedule cosine(int steps) {
        require(steps >= 2, "schedule needs at least two steps");
        NoiseSchedule s;
        s.steps = steps;
        s.alpha.assign((size_t)steps + 1, 1.f);
        s.alpha_bar.assign((size_t)steps + 1, 1.f);
        const double offset = 0.008;
        auto f = [&](double t) {
            double a = (t / steps + offset) / (1.0 + offset) * M_PI / 2.0;
            return std::cos(a) * std::cos(a);
        };
        double f0 = f(0.0), prev_bar = 1.0;
        for (int tau = 1; tau <= steps; ++tau) {
            double bar = f((double)tau) / f0;
            double alpha = bar / prev_bar;
            alpha = std::clamp(alpha, 1.0 - 0.999, 1.0 - 1e-8);  // clip beta at 0.999
            double new_bar = prev_bar * alpha;
            s.alpha[(size_t)tau] = (float)alpha;
            s.alpha_bar[(size_t)tau] = (float)new_bar;
            prev_bar = new_bar;
        }
        s.validate();
        return s;
    }

    void validate() const {
        require(steps >= 2 && (int)alpha.size() == steps + 1, "schedule not initialized");
        for (int tau = 1; tau <= steps; ++tau) {
            require(alpha[(size_t)tau] > 0.f && alpha[(size_t)tau] < 1.f, "alpha must lie in (0,1)");
            require(alpha_bar[(size_t)tau] < alpha_bar[(size_t)tau - 1],
                    "alpha_bar must be strictly decreasing");
            if (tau >= 2)
                require(alpha[(size_t)tau] <= alpha[(size_t)tau - 1] + 1e-7f,
                        "alpha must be monotonically decreasing");
        }
        require(alpha_bar[(size_t)steps] < 1e-3f, "terminal alpha_bar must be below 1e-3");
    }

    // strided sampling schedule: n_steps values descending from steps,
    // always ending at tau = 1 so the final prediction is the tau=1 pass
    std::vector<int> strided(int n_steps) const {
        require(n_steps >= 1, "need at least one sampling step");
        n_steps = std::min(n_steps, steps);
        std::vector<int> taus;
        for (int j = n_steps; j >= 1; --j) {
            int tau = (int)std::lround((double)j * steps / n_steps);
            tau = std::clamp(tau, 1, steps);
            if (taus.empty() || taus.back() != tau) taus.push_back(tau);
        }
        if (taus.back() != 1) taus.push_back(1);
        return taus;
    }

    Json to_json() const { return {{"kind", "cosine"}, {"steps", steps}}; }
    static NoiseSchedule from_json(const Json& j) { return cosine(j.at("steps").get<int>()); }
};

// Conditioning slots with explicit null markers. nullopt is the paper's
// empty-set token; the denoiser represents it with a learned null
// embedding, never with zero-filled data.
struct ConditioningBundle {
    std::optional<Mat> stream_a;             // audio features, T x (2 d_a)
    std::optional<Mat> stream_b;             // lips (face model) or guide poses (body model)
    std::vector<float> stream_b_positions;   // frame timestamp per stream_b row

    ConditioningBundle nulled() const { return ConditioningBundle{}; }
};

// x_tau = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps
inline Mat q_sample(const Mat& x0, int tau, const Mat& eps, const NoiseSchedule& schedule) {
    require(tau >= 0 && tau <= schedule.steps, "diffusion step out of range");
    require(eps.rows() == x0.rows() && eps.cols() == x0.cols(), "noise shape mismatch");
    float ab = schedule.alpha_bar[(size_t)tau];
    return std::sqrt(ab) * x0 + std::sqrt(1.f - ab) * eps;
}

inline Mat gaussian_like(int rows, int cols, Rng& rng) { return rng.normal_mat(rows, cols); }

// Denoiser: input projection + sinusoidal frame positions, then blocks of
// full self-attention over time, cross-attention to each conditioning
// stream, FiLM on the diffusion-step embedding, and a feed-forward. The
// head predicts x0 directly.
struct DenoiserConfig {
    int blocks = 4;
    int width = 256;
    int heads = 4;
    int ff_hidden = 512;
    float lr = 1e-3f;
    float cond_drop_prob = 0.1f;

    Json to_json() const {
        return {{"blocks", blocks}, {"width", width},   {"heads", heads},
                {"ff_hidden", ff_hidden}, {"lr", lr},   {"cond_drop_prob", cond_drop_prob}};
    }
    static DenoiserConfig from_json(const Json& j) {
        DenoiserConfig c;
        c.blocks = j.value("blocks", c.blocks);
        c.width = j.value("width", c.width);
        c.heads = j.value("heads", c.heads);
        c.ff_hidden = j.value("ff_hidden", c.ff_hidden);
        c.lr = j.value("lr", c.lr);
        c.cond_drop_prob = j.value("cond_drop_prob", c.cond_drop_prob);
        return c;
    }
};

namespace detail {

struct DenoiserBlock {
    nn::LayerNorm ln_self, ln_cross_a, ln_cross_b, ln_ff;
    nn::MultiheadAttention self_attn, cross_a, cross_b;
    nn::Film film;
    nn::FeedForward ff;

    DenoiserBlock() = default;
    DenoiserBlock(Rng& rng, int width, int heads, int ff_hidden)
        : ln_self(width), ln_cross_a(width), ln_cross_b(width), ln_ff(width),
          self_attn(rng, width, heads), cross_a(rng, width, heads), cross_b(rng, width, heads),
          film(rng, width, width), ff(rng, width, ff_hidden) {}

    nn::Node* fwd(nn::Tape& t, nn::Node* x, nn::Node* mem_a, nn::Node* mem_b, nn::Node* step_emb,
                  const Mat* self_mask) {
        nn::Node* h = ln_self.fwd(t, x);
        x = nn::add(t, x, self_attn.fwd(t, h, h, self_mask));
        x = nn::add(t, x, cross_a.fwd(t, ln_cross_a.fwd(t, x), mem_a, nullptr));
        x = nn::add(t, x, cross_b.fwd(t, ln_cross_b.fwd(t, x), mem_b, nullptr));
        x = film.fwd(t, x, step_emb);
        return nn::add(t, x, ff.fwd(t, ln_ff.fwd(t, x)));
    }

    nn::ParamList params() {
        nn::ParamList pl;
        pl.merge("ln_self", ln_self.params());
        pl.merge("ln_ca", ln_cross_a.params());
        pl.merge("ln_cb", ln_cross_b.params());
        pl.merge("ln_ff", ln_ff.params());
        pl.merge("self", self_attn.params());
        pl.merge("cross_a", cross_a.params());
        pl.merge("cross_b", cross_b.params());
        pl.merge("film", film.params());
        pl.merge("ff", ff.params());
        return pl;
    }
};

}  // namespace detail

class DenoiserNet {
public:
    DenoiserConfig cfg;
    int d_model = 0;   // channels of the diffused signal
    int d_cond_a = 0;  // audio stream width (2 * d_a)
    int d_cond_b = 0;  // lips or guide-pose stream width
    int schedule_steps = 1000;

    nn::Linear input_proj;
    nn::Linear cond_a_proj, cond_b_proj;
    nn::Param null_a, null_b;  // learned empty-set embeddings
    nn::Linear step_mlp1, step_mlp2;
    std::vector<detail::DenoiserBlock> blocks;
    nn::LayerNorm ln_final;
    nn::Linear head;

    DenoiserNet() = default;
    DenoiserNet(const DenoiserConfig& config, int d_signal, int cond_a_dim, int cond_b_dim,
                int steps, Rng& rng)
        : cfg(config), d_model(d_signal), d_cond_a(cond_a_dim), d_cond_b(cond_b_dim),
          schedule_steps(steps) {
        require(cfg.blocks >= 1 && cfg.width % cfg.heads == 0, "bad denoiser config");
        input_proj = nn::Linear(rng, d_model, cfg.width);
        cond_a_proj = nn::Linear(rng, d_cond_a, cfg.width);
        cond_b_proj = nn::Linear(rng, d_cond_b, cfg.width);
        null_a = nn::make_param(rng, 1, cfg.width, 0.02f);
        null_b = nn::make_param(rng, 1, cfg.width, 0.02f);
        step_mlp1 = nn::Linear(rng, cfg.width, cfg.width);
        step_mlp2 = nn::Linear(rng, cfg.width, cfg.width);
        for (int i = 0; i < cfg.blocks; ++i) blocks.emplace_back(rng, cfg.width, cfg.heads, cfg.ff_hidden);
        ln_final = nn::LayerNorm(cfg.width);
        head = nn::Linear(rng, cfg.width, d_model, /*zero_init=*/true);
    }

    nn::Node* forward_graph(nn::Tape& t, const Mat& x_tau, int tau, const ConditioningBundle& cond,
                            int valid_rows = -1) {
        int t_frames = (int)x_tau.rows();
        std::vector<float> pos((size_t)t_frames);
        for (int i = 0; i < t_frames; ++i) pos[(size_t)i] = (float)i * 0.1f;
        nn::Node* x = nn::add(t, input_proj.fwd(t, t.constant(x_tau)),
                              t.constant(nn::sinusoidal_rows(pos, cfg.width)));

        nn::Node* mem_a;
        if (cond.stream_a.has_value()) {
            require((int)cond.stream_a->cols() == d_cond_a, "conditioning stream A width mismatch");
            std::vector<float> apos((size_t)cond.stream_a->rows());
            for (size_t i = 0; i < apos.size(); ++i) apos[i] = (float)i * 0.1f;
            mem_a = nn::add(t, cond_a_proj.fwd(t, t.constant(*cond.stream_a)),
                            t.constant(nn::sinusoidal_rows(apos, cfg.width)));
        } else {
            mem_a = t.param(null_a);
        }
        nn::Node* mem_b;
        if (cond.stream_b.has_value()) {
            require((int)cond.stream_b->cols() == d_cond_b, "conditioning stream B width mismatch");
            std::vector<float> bpos = cond.stream_b_positions;
            if ((int)bpos.size() != cond.stream_b->rows()) {
                bpos.resize((size_t)cond.stream_b->rows());
                for (size_t i = 0; i < bpos.size(); ++i) bpos[i] = (float)i;
            }
            for (auto& v : bpos) v *= 0.1f;
            mem_b = nn::add(t, cond_b_proj.fwd(t, t.constant(*cond.stream_b)),
                            t.constant(nn::sinusoidal_rows(bpos, cfg.width)));
        } else {
            mem_b = t.param(null_b);
        }

        // diffusion-step embedding drives FiLM in every block
        Mat step_feat = nn::sinusoidal_rows({(float)tau * 1000.f / (float)schedule_steps}, cfg.width);
        nn::Node* step_emb =
            step_mlp2.fwd(t, nn::gelu(t, step_mlp1.fwd(t, t.constant(step_feat))));

        Mat self_mask;
        const Mat* mask_ptr = nullptr;
        if (valid_rows >= 0 && valid_rows < t_frames) {
            self_mask = nn::padding_mask(t_frames, t_frames, valid_rows);
            mask_ptr = &self_mask;
        }
        for (auto& b : blocks) x = b.fwd(t, x, mem_a, mem_b, step_emb, mask_ptr);
        return head.fwd(t, ln_final.fwd(t, x));
    }

    // inference-only forward
    Mat predict_x0(const Mat& x_tau, int tau, const ConditioningBundle& cond) {
        nn::Tape t;
        return forward_graph(t, x_tau, tau, cond)->value;
    }

    nn::ParamList params() {
        nn::ParamList pl;
        pl.merge("input", input_proj.params());
        pl.merge("cond_a", cond_a_proj.params());
        pl.merge("cond_b", cond_b_proj.params());
        pl.add("null_a", &null_a);
        pl.add("null_b", &null_b);
        pl.merge("step1", step_mlp1.params());
        pl.merge("step2", step_mlp2.params());
        for (size_t i = 0; i < blocks.size(); ++i)
            pl.merge("block" + std::to_string(i), blocks[i].params());
        pl.merge("ln_final", ln_final.params());
        pl.merge("head", head.params());
        return pl;
    }
};

// independent dropout per present conditioning slot
inline ConditioningBundle drop_conditioning(const ConditioningBundle& cond, float p_drop, Rng& rng) {
    ConditioningBundle out = cond;
    if (out.stream_a.has_value() && rng.uniform() < p_drop) out.stream_a.reset();
    if (out.stream_b.has_value() && rng.uniform() < p_drop) {
        out.stream_b.reset();
        out.stream_b_positions.clear();
    }
    return out;
}

// One training-loss evaluation: tau uniform in [1, steps], eps ~ N(0, I),
// loss = mean squared error between x0 and the model's x0 prediction.
inline float training_loss(DenoiserNet& model, const Mat& x0, const ConditioningBundle& cond,
                           const NoiseSchedule& schedule, Rng& rng, float p_drop,
                           nn::Tape* tape_out = nullptr, nn::Node** loss_out = nullptr) {
    int tau = rng.uniform_int(1, schedule.steps);
    Mat eps = gaussian_like((int)x0.rows(), (int)x0.cols(), rng);
    Mat x_tau = q_sample(x0, tau, eps, schedule);
    ConditioningBundle used = drop_conditioning(cond, p_drop, rng);
    if (tape_out) {
        nn::Node* pred = model.forward_graph(*tape_out, x_tau, tau, used);
        nn::Node* loss = nn::mse(*tape_out, pred, x0);
        if (loss_out) *loss_out = loss;
        return loss->value(0, 0);
    }
    nn::Tape t;
    nn::Node* pred = model.forward_graph(t, x_tau, tau, used);
    nn::Node* loss = nn::mse(t, pred, x0);
    return loss->value(0, 0);
}

inline Mat cfg_combine(const Mat& uncond, const Mat& with_cond, float s) {
    return uncond + s * (with_cond - uncond);
}

// classifier-free guidance combination; s = 1 is exactly the conditional
// pass and s = 0 exactly the unconditional one
inline Mat cfg_predict(DenoiserNet& model, const Mat& x_tau, int tau, const ConditioningBundle& cond,
                       float s) {
    if (s == 1.f) return model.predict_x0(x_tau, tau, cond);
    ConditioningBundle null_cond;
    if (s == 0.f) return model.predict_x0(x_tau, tau, null_cond);
    Mat uncond = model.predict_x0(x_tau, tau, null_cond);
    Mat with_cond = model.predict_x0(x_tau, tau, cond);
    return cfg_combine(uncond, with_cond, s);
}

// Ancestral sampling: start from pure noise, predict x0, re-noise to the
// next (lower) step with fresh noise, return the final x0 prediction.
inline Mat reverse_sample(DenoiserNet& model, const ConditioningBundle& cond,
                          const NoiseSchedule& schedule, float s, Rng& rng, int rows, int cols,
                          int sample_steps = 250) {
    std::vector<int> taus = schedule.strided(sample_steps);
    Mat x = gaussian_like(rows, cols, rng);
    Mat x0_hat;
    for (size_t i = 0; i < taus.size(); ++i) {
        x0_hat = cfg_predict(model, x, taus[i], cond, s);
        if (i + 1 == taus.size()) break;
        int next_tau = taus[i + 1];
        Mat eps = gaussian_like(rows, cols, rng);
        x = q_sample(x0_hat, next_tau, eps, schedule);
    }
    return x0_hat;
}

}  // namespace convo
