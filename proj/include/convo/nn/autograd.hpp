#pragma once

#include <convo/common.hpp>

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

namespace convo::nn {

using convo::Mat;
using RowArr = Eigen::Array<float, 1, Eigen::Dynamic>;

// Trainable tensor plus its Adam state.
struct Param {
    Mat value;
    Mat m, v;  // first/second moment, sized on first update

    int rows() const { return (int)value.rows(); }
    int cols() const { return (int)value.cols(); }
};

struct Node {
    Mat value;
    Mat grad;  // empty until the backward pass touches it
    bool needs_grad = false;
    std::function<void(Node&)> backprop;
};

// Dynamic tape: ops append nodes that only reference earlier nodes, so the
// reverse creation order is a valid backward schedule. One tape per
// training step; clear() between steps.
class Tape {
public:
    Node* constant(Mat v) { return make(std::move(v), false); }

    // gradient-tracked leaf not tied to a Param (tests, straight-through)
    Node* leaf(Mat v) { return make(std::move(v), true); }

    // memoized so that reuse of a Param inside one graph accumulates grads
    Node* param(Param& p) {
        auto it = param_map_.find(&p);
        if (it != param_map_.end()) return it->second;
        Node* n = make(p.value, true);
        param_map_.emplace(&p, n);
        bindings_.emplace_back(&p, n);
        return n;
    }

    Node* make(Mat v, bool needs) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = std::move(v);
        n.needs_grad = needs;
        return &n;
    }

    static Mat& grad_of(Node* n) {
        if (n->grad.size() == 0) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
        return n->grad;
    }

    void backward(Node* loss) {
        require(loss->value.rows() == 1 && loss->value.cols() == 1, "backward expects scalar loss");
        grad_of(loss)(0, 0) = 1.f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = *it;
            if (n.backprop && n.grad.size() != 0) n.backprop(n);
        }
    }

    const std::vector<std::pair<Param*, Node*>>& bindings() const { return bindings_; }

    void clear() {
        nodes_.clear();
        param_map_.clear();
        bindings_.clear();
    }

    size_t size() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
    std::unordered_map<Param*, Node*> param_map_;
    std::vector<std::pair<Param*, Node*>> bindings_;
};

// ---- primitive ops -------------------------------------------------------

inline Node* matmul(Tape& t, Node* a, Node* b, bool trans_a = false, bool trans_b = false) {
    Mat v;
    if (!trans_a && !trans_b) v = a->value * b->value;
    else if (!trans_a && trans_b) v = a->value * b->value.transpose();
    else if (trans_a && !trans_b) v = a->value.transpose() * b->value;
    else v = a->value.transpose() * b->value.transpose();
    Node* out = t.make(std::move(v), a->needs_grad || b->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, b, trans_a, trans_b](Node& n) {
            const Mat& g = n.grad;
            if (a->needs_grad) {
                Mat& ga = Tape::grad_of(a);
                if (!trans_a && !trans_b) ga.noalias() += g * b->value.transpose();
                else if (!trans_a && trans_b) ga.noalias() += g * b->value;
                else if (trans_a && !trans_b) ga.noalias() += b->value * g.transpose();
                else ga.noalias() += b->value.transpose() * g.transpose();
            }
            if (b->needs_grad) {
                Mat& gb = Tape::grad_of(b);
                if (!trans_a && !trans_b) gb.noalias() += a->value.transpose() * g;
                else if (!trans_a && trans_b) gb.noalias() += g.transpose() * a->value;
                else if (trans_a && !trans_b) gb.noalias() += a->value * g;
                else gb.noalias() += g.transpose() * a->value.transpose();
            }
        };
    return out;
}

inline Node* add(Tape& t, Node* a, Node* b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "add: shape mismatch");
    Node* out = t.make(a->value + b->value, a->needs_grad || b->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, b](Node& n) {
            if (a->needs_grad) Tape::grad_of(a) += n.grad;
            if (b->needs_grad) Tape::grad_of(b) += n.grad;
        };
    return out;
}

// a: R x C, row: 1 x C broadcast over rows
inline Node* add_rowvec(Tape& t, Node* a, Node* row) {
    require(row->value.rows() == 1 && row->value.cols() == a->value.cols(), "add_rowvec: shape");
    Node* out = t.make(a->value.rowwise() + row->value.row(0), a->needs_grad || row->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, row](Node& n) {
            if (a->needs_grad) Tape::grad_of(a) += n.grad;
            if (row->needs_grad) Tape::grad_of(row).row(0) += n.grad.colwise().sum();
        };
    return out;
}

inline Node* mul_rowvec(Tape& t, Node* a, Node* row) {
    require(row->value.rows() == 1 && row->value.cols() == a->value.cols(), "mul_rowvec: shape");
    Mat v = (a->value.array().rowwise() * row->value.row(0).array()).matrix();
    Node* out = t.make(std::move(v), a->needs_grad || row->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, row](Node& n) {
            if (a->needs_grad)
                Tape::grad_of(a).array() += n.grad.array().rowwise() * row->value.row(0).array();
            if (row->needs_grad)
                Tape::grad_of(row).row(0) +=
                    (n.grad.array() * a->value.array()).colwise().sum().matrix();
        };
    return out;
}

inline Node* cmul(Tape& t, Node* a, Node* b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(), "cmul: shape");
    Node* out = t.make(a->value.cwiseProduct(b->value), a->needs_grad || b->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, b](Node& n) {
            if (a->needs_grad) Tape::grad_of(a) += n.grad.cwiseProduct(b->value);
            if (b->needs_grad) Tape::grad_of(b) += n.grad.cwiseProduct(a->value);
        };
    return out;
}

inline Node* scale(Tape& t, Node* a, float s) {
    Node* out = t.make(a->value * s, a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, s](Node& n) { Tape::grad_of(a) += n.grad * s; };
    return out;
}

inline Node* add_const(Tape& t, Node* a, float c) {
    Node* out = t.make((a->value.array() + c).matrix(), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a](Node& n) { Tape::grad_of(a) += n.grad; };
    return out;
}

inline Node* gelu(Tape& t, Node* a) {
    const float k = 0.7978845608028654f;  // sqrt(2/pi)
    Mat x = a->value;
    Mat th = (k * (x.array() + 0.044715f * x.array().cube())).tanh().matrix();
    Node* out = t.make((0.5f * x.array() * (1.f + th.array())).matrix(), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, x, th, k](Node& n) {
            auto sech2 = 1.f - th.array().square();
            auto dinner = k * (1.f + 3.f * 0.044715f * x.array().square());
            Mat d = (0.5f * (1.f + th.array()) + 0.5f * x.array() * sech2 * dinner).matrix();
            Tape::grad_of(a) += n.grad.cwiseProduct(d);
        };
    return out;
}

inline Node* relu(Tape& t, Node* a) {
    Node* out = t.make(a->value.cwiseMax(0.f), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a](Node& n) {
            Tape::grad_of(a).array() += n.grad.array() * (a->value.array() > 0.f).cast<float>();
        };
    return out;
}

// row-wise softmax; additive mask (0 or -inf entries) applied before
inline Node* softmax_rows(Tape& t, Node* a, const Mat* mask = nullptr) {
    Mat s = a->value;
    if (mask) {
        require(mask->rows() == s.rows() && mask->cols() == s.cols(), "softmax mask: shape");
        s += *mask;
    }
    Mat p(s.rows(), s.cols());
    for (int r = 0; r < s.rows(); ++r) {
        float mx = s.row(r).maxCoeff();
        RowArr e = (s.row(r).array() - mx).exp();
        p.row(r) = (e / e.sum()).matrix();
    }
    Node* out = t.make(std::move(p), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a](Node& n) {
            const Mat& p = n.value;
            Mat d(p.rows(), p.cols());
            for (int r = 0; r < p.rows(); ++r) {
                float dot = n.grad.row(r).dot(p.row(r));
                d.row(r) = (p.row(r).array() * (n.grad.row(r).array() - dot)).matrix();
            }
            Tape::grad_of(a) += d;
        };
    return out;
}

// per-row normalization with learned gain/bias (1 x C each)
inline Node* layer_norm(Tape& t, Node* a, Node* gain, Node* bias, float eps = 1e-5f) {
    int rows = (int)a->value.rows(), cols = (int)a->value.cols();
    Mat xhat(rows, cols);
    Eigen::VectorXf inv_std(rows);
    for (int r = 0; r < rows; ++r) {
        float mu = a->value.row(r).mean();
        float var = (a->value.row(r).array() - mu).square().mean();
        float is = 1.f / std::sqrt(var + eps);
        inv_std(r) = is;
        xhat.row(r) = ((a->value.row(r).array() - mu) * is).matrix();
    }
    Mat v = ((xhat.array().rowwise() * gain->value.row(0).array()).rowwise() +
             bias->value.row(0).array())
                .matrix();
    Node* out = t.make(std::move(v), a->needs_grad || gain->needs_grad || bias->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, gain, bias, xhat, inv_std](Node& n) {
            if (gain->needs_grad)
                Tape::grad_of(gain).row(0) +=
                    (n.grad.array() * xhat.array()).colwise().sum().matrix();
            if (bias->needs_grad) Tape::grad_of(bias).row(0) += n.grad.colwise().sum();
            if (a->needs_grad) {
                Mat& ga = Tape::grad_of(a);
                for (int r = 0; r < xhat.rows(); ++r) {
                    RowArr dxhat = n.grad.row(r).array() * gain->value.row(0).array();
                    float mean_dxhat = dxhat.mean();
                    float mean_dxhat_xhat = (dxhat * xhat.row(r).array()).mean();
                    ga.row(r) +=
                        (inv_std(r) * (dxhat - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat))
                            .matrix();
                }
            }
        };
    return out;
}

inline Node* slice_cols(Tape& t, Node* a, int start, int n_cols) {
    Node* out = t.make(a->value.middleCols(start, n_cols), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, start, n_cols](Node& n) {
            Tape::grad_of(a).middleCols(start, n_cols) += n.grad;
        };
    return out;
}

inline Node* concat_cols(Tape& t, const std::vector<Node*>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    int rows = (int)parts[0]->value.rows(), cols = 0;
    bool needs = false;
    for (Node* p : parts) {
        require(p->value.rows() == rows, "concat_cols: row mismatch");
        cols += (int)p->value.cols();
        needs = needs || p->needs_grad;
    }
    Mat v(rows, cols);
    int at = 0;
    for (Node* p : parts) {
        v.middleCols(at, p->value.cols()) = p->value;
        at += (int)p->value.cols();
    }
    Node* out = t.make(std::move(v), needs);
    if (needs)
        out->backprop = [parts](Node& n) {
            int at = 0;
            for (Node* p : parts) {
                if (p->needs_grad) Tape::grad_of(p) += n.grad.middleCols(at, p->value.cols());
                at += (int)p->value.cols();
            }
        };
    return out;
}

inline Node* concat_rows(Tape& t, const std::vector<Node*>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    int cols = (int)parts[0]->value.cols(), rows = 0;
    bool needs = false;
    for (Node* p : parts) {
        require(p->value.cols() == cols, "concat_rows: col mismatch");
        rows += (int)p->value.rows();
        needs = needs || p->needs_grad;
    }
    Mat v(rows, cols);
    int at = 0;
    for (Node* p : parts) {
        v.middleRows(at, p->value.rows()) = p->value;
        at += (int)p->value.rows();
    }
    Node* out = t.make(std::move(v), needs);
    if (needs)
        out->backprop = [parts](Node& n) {
            int at = 0;
            for (Node* p : parts) {
                if (p->needs_grad) Tape::grad_of(p) += n.grad.middleRows(at, p->value.rows());
                at += (int)p->value.rows();
            }
        };
    return out;
}

inline Node* gather_rows(Tape& t, Node* table, std::vector<int> ids) {
    Mat v((int)ids.size(), table->value.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < table->value.rows(), "gather_rows: index out of range");
        v.row((int)i) = table->value.row(ids[i]);
    }
    Node* out = t.make(std::move(v), table->needs_grad);
    if (out->needs_grad)
        out->backprop = [table, ids = std::move(ids)](Node& n) {
            Mat& g = Tape::grad_of(table);
            for (size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += n.grad.row((int)i);
        };
    return out;
}

// out.row(r) = a.row(clamp(r - k, 0, T-1)); edge-replicating time shift
inline Node* shift_rows(Tape& t, Node* a, int k) {
    int rows = (int)a->value.rows();
    Mat v(rows, a->value.cols());
    for (int r = 0; r < rows; ++r) v.row(r) = a->value.row(std::clamp(r - k, 0, rows - 1));
    Node* out = t.make(std::move(v), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a, k, rows](Node& n) {
            Mat& g = Tape::grad_of(a);
            for (int r = 0; r < rows; ++r) g.row(std::clamp(r - k, 0, rows - 1)) += n.grad.row(r);
        };
    return out;
}

inline Node* mean_rows(Tape& t, Node* a) {
    Node* out = t.make(a->value.colwise().mean(), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a](Node& n) {
            float inv = 1.f / (float)a->value.rows();
            Tape::grad_of(a) += (n.grad.row(0) * inv).replicate(a->value.rows(), 1);
        };
    return out;
}

inline Node* mean_all(Tape& t, Node* a) {
    Mat v(1, 1);
    v(0, 0) = a->value.mean();
    Node* out = t.make(std::move(v), a->needs_grad);
    if (out->needs_grad)
        out->backprop = [a](Node& n) {
            Tape::grad_of(a).array() += n.grad(0, 0) / (float)a->value.size();
        };
    return out;
}

// mean squared error vs a constant target; valid_rows < 0 means all rows
inline Node* mse(Tape& t, Node* pred, const Mat& target, int valid_rows = -1) {
    require(pred->value.rows() == target.rows() && pred->value.cols() == target.cols(),
            "mse: shape mismatch");
    int vr = valid_rows < 0 ? (int)pred->value.rows() : valid_rows;
    require(vr >= 1 && vr <= pred->value.rows(), "mse: invalid row count");
    float n_elems = (float)vr * (float)pred->value.cols();
    Mat diff = pred->value.topRows(vr) - target.topRows(vr);
    Mat v(1, 1);
    v(0, 0) = diff.array().square().sum() / n_elems;
    Node* out = t.make(std::move(v), pred->needs_grad);
    if (out->needs_grad)
        out->backprop = [pred, diff, vr, n_elems](Node& n) {
            Tape::grad_of(pred).topRows(vr) += (2.f * n.grad(0, 0) / n_elems) * diff;
        };
    return out;
}

// mean over rows of (logsumexp(row) - logits[target]); grad = softmax - onehot
inline Node* cross_entropy(Tape& t, Node* logits, std::vector<int> targets) {
    int rows = (int)logits->value.rows();
    require((int)targets.size() == rows, "cross_entropy: target count mismatch");
    Mat p(rows, logits->value.cols());
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        require(targets[(size_t)r] >= 0 && targets[(size_t)r] < logits->value.cols(),
                "cross_entropy: target out of range");
        float mx = logits->value.row(r).maxCoeff();
        RowArr e = (logits->value.row(r).array() - mx).exp();
        float sum = e.sum();
        p.row(r) = (e / sum).matrix();
        total += std::log(sum) + mx - logits->value(r, targets[(size_t)r]);
    }
    Mat v(1, 1);
    v(0, 0) = (float)(total / rows);
    Node* out = t.make(std::move(v), logits->needs_grad);
    if (out->needs_grad)
        out->backprop = [logits, p, targets = std::move(targets), rows](Node& n) {
            Mat g = p;
            for (int r = 0; r < rows; ++r) g(r, targets[(size_t)r]) -= 1.f;
            Tape::grad_of(logits) += (n.grad(0, 0) / rows) * g;
        };
    return out;
}

}  // namespace convo::nn
