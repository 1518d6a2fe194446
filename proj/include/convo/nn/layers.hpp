#pragma once

#include <convo/nn/autograd.hpp>

#include <string>
#include <vector>

namespace convo::nn {

// name -> Param registry used by checkpoints
struct ParamList {
    std::vector<std::pair<std::string, Param*>> items;

    void add(const std::string& name, Param* p) { items.emplace_back(name, p); }
    void merge(const std::string& prefix, const ParamList& other) {
        for (const auto& [n, p] : other.items) items.emplace_back(prefix + "." + n, p);
    }
};

inline Param make_param(Rng& rng, int rows, int cols, float stddev) {
    Param p;
    p.value = rng.normal_mat(rows, cols, stddev);
    return p;
}

inline Param make_zero_param(int rows, int cols) {
    Param p;
    p.value = Mat::Zero(rows, cols);
    return p;
}

struct Linear {
    Param W, b;

    Linear() = default;
    Linear(Rng& rng, int in, int out, bool zero_init = false) {
        W = zero_init ? make_zero_param(in, out)
                      : make_param(rng, in, out, std::sqrt(2.f / (float)(in + out)));
        b = make_zero_param(1, out);
    }

    Node* fwd(Tape& t, Node* x) { return add_rowvec(t, matmul(t, x, t.param(W)), t.param(b)); }

    ParamList params() {
        ParamList pl;
        pl.add("W", &W);
        pl.add("b", &b);
        return pl;
    }
};

struct LayerNorm {
    Param gain, bias;

    LayerNorm() = default;
    explicit LayerNorm(int dim) {
        gain.value = Mat::Ones(1, dim);
        bias.value = Mat::Zero(1, dim);
    }

    Node* fwd(Tape& t, Node* x) { return layer_norm(t, x, t.param(gain), t.param(bias)); }

    ParamList params() {
        ParamList pl;
        pl.add("gain", &gain);
        pl.add("bias", &bias);
        return pl;
    }
};

struct FeedForward {
    Linear fc1, fc2;

    FeedForward() = default;
    FeedForward(Rng& rng, int dim, int hidden) : fc1(rng, dim, hidden), fc2(rng, hidden, dim) {}

    Node* fwd(Tape& t, Node* x) { return fc2.fwd(t, gelu(t, fc1.fwd(t, x))); }

    ParamList params() {
        ParamList pl;
        pl.merge("fc1", fc1.params());
        pl.merge("fc2", fc2.params());
        return pl;
    }
};

// Attention masks are additive (-inf blocks a key). Rows beyond
// query_valid / cols beyond key_valid are for padded batches.
inline Mat causal_mask(int n, int valid = -1) {
    const float ninf = -std::numeric_limits<float>::infinity();
    int v = valid < 0 ? n : valid;
    Mat m = Mat::Zero(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            if (c > r || c >= v) m(r, c) = ninf;
    // fully padded rows still need one finite key to keep softmax defined
    for (int r = v; r < n; ++r) m(r, 0) = 0.f;
    return m;
}

inline Mat padding_mask(int query_rows, int key_cols, int key_valid) {
    const float ninf = -std::numeric_limits<float>::infinity();
    Mat m = Mat::Zero(query_rows, key_cols);
    if (key_valid >= 0 && key_valid < key_cols)
        for (int r = 0; r < query_rows; ++r)
            for (int c = key_valid; c < key_cols; ++c) m(r, c) = ninf;
    require(key_valid != 0, "attention memory must have at least one valid key");
    return m;
}

struct MultiheadAttention {
    int heads = 1;
    Linear q, k, v, o;

    MultiheadAttention() = default;
    MultiheadAttention(Rng& rng, int dim, int n_heads)
        : heads(n_heads), q(rng, dim, dim), k(rng, dim, dim), v(rng, dim, dim), o(rng, dim, dim) {
        require(dim % n_heads == 0, "attention width must divide head count");
    }

    // x: Tq x W queries, mem: Tk x W keys/values, mask: Tq x Tk additive or null
    Node* fwd(Tape& t, Node* x, Node* mem, const Mat* mask) {
        int dim = (int)q.W.value.cols();
        int dh = dim / heads;
        float inv_sqrt = 1.f / std::sqrt((float)dh);
        Node* qs = q.fwd(t, x);
        Node* ks = k.fwd(t, mem);
        Node* vs = v.fwd(t, mem);
        std::vector<Node*> outs(heads);
        for (int h = 0; h < heads; ++h) {
            Node* qh = slice_cols(t, qs, h * dh, dh);
            Node* kh = slice_cols(t, ks, h * dh, dh);
            Node* vh = slice_cols(t, vs, h * dh, dh);
            Node* scores = scale(t, matmul(t, qh, kh, false, true), inv_sqrt);
            Node* probs = softmax_rows(t, scores, mask);
            outs[h] = matmul(t, probs, vh);
        }
        return o.fwd(t, concat_cols(t, outs));
    }

    ParamList params() {
        ParamList pl;
        pl.merge("q", q.params());
        pl.merge("k", k.params());
        pl.merge("v", v.params());
        pl.merge("o", o.params());
        return pl;
    }
};

// feature-wise linear modulation: x * (1 + scale(c)) + shift(c), c is 1 x D
struct Film {
    Linear to_scale, to_shift;

    Film() = default;
    Film(Rng& rng, int cond_dim, int dim)
        : to_scale(rng, cond_dim, dim, /*zero_init=*/true),
          to_shift(rng, cond_dim, dim, /*zero_init=*/true) {}

    Node* fwd(Tape& t, Node* x, Node* cond) {
        Node* s = add_const(t, to_scale.fwd(t, cond), 1.f);
        return add_rowvec(t, mul_rowvec(t, x, s), to_shift.fwd(t, cond));
    }

    ParamList params() {
        ParamList pl;
        pl.merge("scale", to_scale.params());
        pl.merge("shift", to_shift.params());
        return pl;
    }
};

// causal 1-D convolution, kernel size 2 with dilation:
// y_t = x_t W0 + x_{t-dilation} W1 + b, left edge replicated
struct Conv1dK2 {
    Param W0, W1, b;
    int dilation = 1;

    Conv1dK2() = default;
    Conv1dK2(Rng& rng, int in, int out, int dil) : dilation(dil) {
        float s = std::sqrt(1.f / (float)(2 * in));
        W0 = make_param(rng, in, out, s);
        W1 = make_param(rng, in, out, s);
        b = make_zero_param(1, out);
    }

    Node* fwd(Tape& t, Node* x) {
        Node* cur = matmul(t, x, t.param(W0));
        Node* past = matmul(t, shift_rows(t, x, dilation), t.param(W1));
        return add_rowvec(t, add(t, cur, past), t.param(b));
    }

    ParamList params() {
        ParamList pl;
        pl.add("W0", &W0);
        pl.add("W1", &W1);
        pl.add("b", &b);
        return pl;
    }
};

// centered 1-D convolution of odd kernel size (edge-replicating padding)
struct Conv1dCentered {
    std::vector<Param> W;
    Param b;
    int half = 0;

    Conv1dCentered() = default;
    Conv1dCentered(Rng& rng, int in, int out, int kernel) {
        require(kernel % 2 == 1, "centered conv needs odd kernel");
        half = kernel / 2;
        float s = std::sqrt(1.f / (float)(kernel * in));
        for (int i = 0; i < kernel; ++i) W.push_back(make_param(rng, in, out, s));
        b = make_zero_param(1, out);
    }

    Node* fwd(Tape& t, Node* x) {
        Node* acc = nullptr;
        for (int i = 0; i < (int)W.size(); ++i) {
            int offset = i - half;
            Node* term = matmul(t, offset == 0 ? x : shift_rows(t, x, offset), t.param(W[i]));
            acc = acc ? add(t, acc, term) : term;
        }
        return add_rowvec(t, acc, t.param(b));
    }

    ParamList params() {
        ParamList pl;
        for (size_t i = 0; i < W.size(); ++i) pl.add("W" + std::to_string(i), &W[i]);
        pl.add("b", &b);
        return pl;
    }
};

struct Embedding {
    Param table;

    Embedding() = default;
    Embedding(Rng& rng, int count, int dim) { table = make_param(rng, count, dim, 0.02f); }

    Node* fwd(Tape& t, const std::vector<int>& ids) { return gather_rows(t, t.param(table), ids); }

    ParamList params() {
        ParamList pl;
        pl.add("table", &table);
        return pl;
    }
};

// fixed sinusoidal features for positions / diffusion steps
inline Mat sinusoidal_rows(const std::vector<float>& positions, int dim) {
    Mat m((int)positions.size(), dim);
    for (int r = 0; r < (int)positions.size(); ++r)
        for (int i = 0; i < dim / 2; ++i) {
            float freq = std::exp(-std::log(10000.f) * (float)i / (float)(dim / 2));
            m(r, 2 * i) = std::sin(positions[(size_t)r] * freq);
            m(r, 2 * i + 1) = std::cos(positions[(size_t)r] * freq);
        }
    if (dim % 2 == 1) m.col(dim - 1).setZero();
    return m;
}

struct Adam {
    float lr = 1e-3f;
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    float clip_norm = 1.f;  // 0 disables clipping
    long step_count = 0;

    explicit Adam(float learning_rate = 1e-3f) : lr(learning_rate) {}

    void step(Tape& tape) {
        ++step_count;
        float gscale = 1.f;
        if (clip_norm > 0.f) {
            double sq = 0.0;
            for (const auto& [p, node] : tape.bindings())
                if (node->grad.size() != 0) sq += (double)node->grad.squaredNorm();
            double norm = std::sqrt(sq);
            if (norm > clip_norm) gscale = (float)(clip_norm / norm);
        }
        float bc1 = 1.f - std::pow(beta1, (float)step_count);
        float bc2 = 1.f - std::pow(beta2, (float)step_count);
        for (const auto& [p, node] : tape.bindings()) {
            if (node->grad.size() == 0) continue;
            if (p->m.size() == 0) {
                p->m = Mat::Zero(p->value.rows(), p->value.cols());
                p->v = Mat::Zero(p->value.rows(), p->value.cols());
            }
            Mat g = node->grad * gscale;
            p->m = beta1 * p->m + (1.f - beta1) * g;
            p->v = (beta2 * p->v.array() + (1.f - beta2) * g.array().square()).matrix();
            p->value.array() -=
                lr * (p->m.array() / bc1) / ((p->v.array() / bc2).sqrt() + eps);
        }
    }
};

}  // namespace convo::nn
