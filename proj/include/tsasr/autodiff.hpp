#pragma once

// Reverse-mode differentiation over a single-owner tape. Ops append nodes in
// execution order; backward() walks them in reverse, which is a valid
// topological order by construction. Gradient accumulation follows node
// creation order, so repeated runs are bit-identical.

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tsasr/tensor.hpp"

namespace tsasr {

class GradTape;

struct Var {
    int id = -1;
    GradTape* tape = nullptr;

    bool valid() const { return id >= 0 && tape != nullptr; }
    const Tensor& value() const;
};

class GradTape {
  public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::function<void(GradTape&, int)> backward;
    };

    // Leaf that never receives gradients (inputs, masks, positional tables).
    Var constant(Tensor v) { return push(std::move(v), false); }

    // Leaf that accumulates gradients but is not a named parameter.
    Var leaf(Tensor v) { return push(std::move(v), true); }

    Var parameter(const std::string& name, const Tensor& v) {
        require(!name.empty(), "parameter: empty name");
        require(param_index_.find(name) == param_index_.end(), "parameter registered twice: " + name);
        Var var = push(v, true);
        param_index_[name] = var.id;
        param_order_.emplace_back(name, var.id);
        return var;
    }

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }

    // Zero tensor if the node never received gradient flow.
    Tensor grad(Var v) const {
        const Node& n = nodes_[check(v)];
        return n.has_grad ? n.grad : Tensor::zeros(n.value.shape);
    }

    Tensor grad_of_param(const std::string& name) const {
        auto it = param_index_.find(name);
        require(it != param_index_.end(), "unknown parameter: " + name);
        return grad(Var{it->second, const_cast<GradTape*>(this)});
    }

    const std::vector<std::pair<std::string, int>>& parameters() const { return param_order_; }

    void accumulate(int id, const Tensor& g) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return;
        require_dim(g.same_shape(n.value), "gradient shape mismatch");
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            for (size_t i = 0; i < n.grad.data.size(); ++i) n.grad.data[i] += g.data[i];
        }
    }

    void backward(Var loss) {
        const size_t root = check(loss);
        require_dim(nodes_[root].value.numel() == 1, "backward: loss must be scalar");
        accumulate(static_cast<int>(root), Tensor::full(nodes_[root].value.shape, 1.0));
        for (int i = static_cast<int>(root); i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.has_grad && n.backward) n.backward(*this, i);
        }
    }

    bool recording = true;

    Var push(Tensor v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad && recording;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1, this};
    }

    Var push_op(Tensor v, std::vector<int> parents, std::function<void(GradTape&, int)> bw) {
        bool req = false;
        for (int p : parents) req = req || nodes_[static_cast<size_t>(p)].requires_grad;
        Var var = push(std::move(v), req);
        if (req && recording) nodes_[static_cast<size_t>(var.id)].backward = std::move(bw);
        return var;
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }

  private:
    size_t check(Var v) const {
        require(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "Var does not belong to this tape");
        return static_cast<size_t>(v.id);
    }

    std::vector<Node> nodes_;
    std::map<std::string, int> param_index_;
    std::vector<std::pair<std::string, int>> param_order_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {
inline GradTape& same_tape(Var a, Var b) {
    require(a.valid() && b.valid() && a.tape == b.tape, "vars must share one tape");
    return *a.tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Each mirrors the pure kernel in tensor.hpp.
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    GradTape& t = detail::same_tape(a, b);
    return t.push_op(add(a.value(), b.value()), {a.id, b.id}, [pa = a.id, pb = b.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, g);
        t.accumulate(pb, g);
    });
}

inline Var sub(Var a, Var b) {
    GradTape& t = detail::same_tape(a, b);
    return t.push_op(sub(a.value(), b.value()), {a.id, b.id}, [pa = a.id, pb = b.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, g);
        t.accumulate(pb, scale(g, -1.0));
    });
}

inline Var mul(Var a, Var b) {
    GradTape& t = detail::same_tape(a, b);
    return t.push_op(mul(a.value(), b.value()), {a.id, b.id}, [pa = a.id, pb = b.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, mul(g, t.node(pb).value));
        t.accumulate(pb, mul(g, t.node(pa).value));
    });
}

inline Var scale(Var a, double s) {
    GradTape& t = *a.tape;
    return t.push_op(scale(a.value(), s), {a.id}, [pa = a.id, s](GradTape& t, int self) {
        t.accumulate(pa, scale(t.node(self).grad, s));
    });
}

inline Var add_rowvec(Var a, Var v) {
    GradTape& t = detail::same_tape(a, v);
    return t.push_op(add_rowvec(a.value(), v.value()), {a.id, v.id}, [pa = a.id, pv = v.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, g);
        Tensor gv({g.shape[1]});
        for (int i = 0; i < g.shape[0]; ++i) {
            const double* p = g.row_ptr(i);
            for (int j = 0; j < g.shape[1]; ++j) gv.data[static_cast<size_t>(j)] += p[j];
        }
        t.accumulate(pv, gv);
    });
}

// Row scaling by a constant per-frame factor (masks, STNO probabilities).
inline Var row_scale(Var a, const Tensor& s) {
    GradTape& t = *a.tape;
    return t.push_op(row_scale(a.value(), s), {a.id}, [pa = a.id, s](GradTape& t, int self) {
        t.accumulate(pa, row_scale(t.node(self).grad, s));
    });
}

inline Var matmul(Var a, Var b) {
    GradTape& t = detail::same_tape(a, b);
    return t.push_op(matmul(a.value(), b.value()), {a.id, b.id}, [pa = a.id, pb = b.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, matmul_nt(g, t.node(pb).value));
        t.accumulate(pb, matmul_tn(t.node(pa).value, g));
    });
}

inline Var matmul_nt(Var a, Var b) {
    GradTape& t = detail::same_tape(a, b);
    return t.push_op(matmul_nt(a.value(), b.value()), {a.id, b.id}, [pa = a.id, pb = b.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, matmul(g, t.node(pb).value));
        t.accumulate(pb, matmul_tn(g, t.node(pa).value));
    });
}

inline Var transpose(Var a) {
    GradTape& t = *a.tape;
    return t.push_op(transpose(a.value()), {a.id}, [pa = a.id](GradTape& t, int self) {
        t.accumulate(pa, transpose(t.node(self).grad));
    });
}

inline Var softmax_rows(Var a) {
    GradTape& t = *a.tape;
    return t.push_op(softmax_rows(a.value()), {a.id}, [pa = a.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& y = t.node(self).value;
        Tensor da = y;
        for (int i = 0; i < y.shape[0]; ++i) {
            const double* gi = g.row_ptr(i);
            const double* yi = y.row_ptr(i);
            double dot = 0.0;
            for (int j = 0; j < y.shape[1]; ++j) dot += gi[j] * yi[j];
            double* di = da.row_ptr(i);
            for (int j = 0; j < y.shape[1]; ++j) di[j] = yi[j] * (gi[j] - dot);
        }
        t.accumulate(pa, da);
    });
}

inline Var log_softmax_rows(Var a) {
    GradTape& t = *a.tape;
    return t.push_op(log_softmax_rows(a.value()), {a.id}, [pa = a.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& y = t.node(self).value;  // log-probs
        Tensor da = g;
        for (int i = 0; i < y.shape[0]; ++i) {
            const double* gi = g.row_ptr(i);
            const double* yi = y.row_ptr(i);
            double gsum = 0.0;
            for (int j = 0; j < y.shape[1]; ++j) gsum += gi[j];
            double* di = da.row_ptr(i);
            for (int j = 0; j < y.shape[1]; ++j) di[j] = gi[j] - std::exp(yi[j]) * gsum;
        }
        t.accumulate(pa, da);
    });
}

inline Var gelu(Var a) {
    GradTape& t = *a.tape;
    return t.push_op(gelu(a.value()), {a.id}, [pa = a.id](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        const Tensor& x = t.node(pa).value;
        Tensor da = g;
        for (size_t i = 0; i < da.data.size(); ++i) da.data[i] *= gelu_grad_scalar(x.data[i]);
        t.accumulate(pa, da);
    });
}

inline Var layer_norm_rows(Var a, Var gain, Var offset, double eps = 1e-5) {
    GradTape& t = detail::same_tape(a, gain);
    detail::same_tape(a, offset);
    return t.push_op(layer_norm_rows(a.value(), gain.value(), offset.value(), eps), {a.id, gain.id, offset.id},
                     [pa = a.id, pg = gain.id, pb = offset.id, eps](GradTape& t, int self) {
                         const Tensor& g = t.node(self).grad;
                         const Tensor& x = t.node(pa).value;
                         const Tensor& gain = t.node(pg).value;
                         const int r = x.shape[0], c = x.shape[1];
                         Tensor dx({r, c}), dgain({c}), doff({c});
                         for (int i = 0; i < r; ++i) {
                             const double* xi = x.row_ptr(i);
                             const double* gi = g.row_ptr(i);
                             double mu = 0.0;
                             for (int j = 0; j < c; ++j) mu += xi[j];
                             mu /= c;
                             double var = 0.0;
                             for (int j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                             var /= c;
                             const double inv = 1.0 / std::sqrt(var + eps);
                             double mean_h = 0.0, mean_hx = 0.0;
                             for (int j = 0; j < c; ++j) {
                                 const double xhat = (xi[j] - mu) * inv;
                                 const double h = gi[j] * gain.data[static_cast<size_t>(j)];
                                 mean_h += h;
                                 mean_hx += h * xhat;
                                 dgain.data[static_cast<size_t>(j)] += gi[j] * xhat;
                                 doff.data[static_cast<size_t>(j)] += gi[j];
                             }
                             mean_h /= c;
                             mean_hx /= c;
                             double* di = dx.row_ptr(i);
                             for (int j = 0; j < c; ++j) {
                                 const double xhat = (xi[j] - mu) * inv;
                                 const double h = gi[j] * gain.data[static_cast<size_t>(j)];
                                 di[j] = (h - mean_h - xhat * mean_hx) * inv;
                             }
                         }
                         t.accumulate(pa, dx);
                         t.accumulate(pg, dgain);
                         t.accumulate(pb, doff);
                     });
}

inline Var unfold1d(Var x, int kernel, int stride, int pad) {
    GradTape& t = *x.tape;
    const int t_in = x.value().shape[0], channels = x.value().shape[1];
    return t.push_op(unfold1d(x.value(), kernel, stride, pad), {x.id},
                     [px = x.id, t_in, channels, kernel, stride, pad](GradTape& t, int self) {
                         t.accumulate(px, fold1d(t.node(self).grad, t_in, channels, kernel, stride, pad));
                     });
}

inline Var concat_cols(Var a, Var b) {
    GradTape& t = detail::same_tape(a, b);
    const int ca = a.value().shape[1];
    return t.push_op(concat_cols(a.value(), b.value()), {a.id, b.id}, [pa = a.id, pb = b.id, ca](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, slice_cols(g, 0, ca));
        t.accumulate(pb, slice_cols(g, ca, g.shape[1]));
    });
}

inline Var slice_cols(Var a, int c0, int c1) {
    GradTape& t = *a.tape;
    const std::vector<int> ashape = a.value().shape;
    return t.push_op(slice_cols(a.value(), c0, c1), {a.id}, [pa = a.id, ashape, c0](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        Tensor da(ashape);
        for (int i = 0; i < g.shape[0]; ++i)
            std::copy(g.row_ptr(i), g.row_ptr(i) + g.shape[1], da.row_ptr(i) + c0);
        t.accumulate(pa, da);
    });
}

inline Var slice_rows(Var a, int r0, int r1) {
    GradTape& t = *a.tape;
    const std::vector<int> ashape = a.value().shape;
    return t.push_op(slice_rows(a.value(), r0, r1), {a.id}, [pa = a.id, ashape, r0](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        Tensor da(ashape);
        std::copy(g.data.begin(), g.data.end(), da.data.begin() + static_cast<int64_t>(r0) * ashape[1]);
        t.accumulate(pa, da);
    });
}

inline Var concat_rows(Var a, Var b) {
    GradTape& t = detail::same_tape(a, b);
    const int ra = a.value().shape[0];
    return t.push_op(concat_rows(a.value(), b.value()), {a.id, b.id}, [pa = a.id, pb = b.id, ra](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        t.accumulate(pa, slice_rows(g, 0, ra));
        t.accumulate(pb, slice_rows(g, ra, g.shape[0]));
    });
}

// Appends a constant column; gradients flow to `a` only.
inline Var append_col(Var a, const Tensor& v) {
    GradTape& t = *a.tape;
    const int ca = a.value().shape[1];
    return t.push_op(append_col(a.value(), v), {a.id}, [pa = a.id, ca](GradTape& t, int self) {
        t.accumulate(pa, slice_cols(t.node(self).grad, 0, ca));
    });
}

inline Var append_const_col(Var a, double v) {
    return append_col(a, Tensor::full({a.value().shape[0]}, v));
}

// Gathers table rows by token id. table: [V x d].
inline Var embedding_rows(Var table, const std::vector<int>& ids) {
    GradTape& t = *table.tape;
    const Tensor& tab = table.value();
    require_dim(tab.ndim() == 2, "embedding_rows: table must be 2-D");
    Tensor out({static_cast<int>(ids.size()), tab.shape[1]});
    for (size_t i = 0; i < ids.size(); ++i) {
        require_dim(ids[i] >= 0 && ids[i] < tab.shape[0], "embedding_rows: id out of range");
        std::copy(tab.row_ptr(ids[i]), tab.row_ptr(ids[i]) + tab.shape[1], out.row_ptr(static_cast<int>(i)));
    }
    const std::vector<int> tshape = tab.shape;
    return t.push_op(std::move(out), {table.id}, [pt = table.id, ids, tshape](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        Tensor dt(tshape);
        for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = dt.row_ptr(ids[i]);
            const double* src = g.row_ptr(static_cast<int>(i));
            for (int j = 0; j < tshape[1]; ++j) dst[j] += src[j];
        }
        t.accumulate(pt, dt);
    });
}

// Places row i of `rows` at position ids[i] of a zero [total x d] tensor.
// Inverse access pattern of embedding_rows; ids must be distinct.
inline Var scatter_rows(Var rows, const std::vector<int>& ids, int total_rows) {
    GradTape& t = *rows.tape;
    const Tensor& src = rows.value();
    require_dim(src.ndim() == 2 && static_cast<int>(ids.size()) == src.shape[0], "scatter_rows: id count mismatch");
    Tensor out({total_rows, src.shape[1]});
    for (size_t i = 0; i < ids.size(); ++i) {
        require_dim(ids[i] >= 0 && ids[i] < total_rows, "scatter_rows: id out of range");
        std::copy(src.row_ptr(static_cast<int>(i)), src.row_ptr(static_cast<int>(i)) + src.shape[1], out.row_ptr(ids[i]));
    }
    return t.push_op(std::move(out), {rows.id}, [pr = rows.id, ids](GradTape& t, int self) {
        const Tensor& g = t.node(self).grad;
        Tensor dr({static_cast<int>(ids.size()), g.shape[1]});
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy(g.row_ptr(ids[i]), g.row_ptr(ids[i]) + g.shape[1], dr.row_ptr(static_cast<int>(i)));
        t.accumulate(pr, dr);
    });
}

inline Var gather_rows(Var m, const std::vector<int>& ids) { return embedding_rows(m, ids); }

inline Var sum_all(Var a) {
    GradTape& t = *a.tape;
    const std::vector<int> ashape = a.value().shape;
    return t.push_op(Tensor::scalar(sum_all(a.value())), {a.id}, [pa = a.id, ashape](GradTape& t, int self) {
        t.accumulate(pa, Tensor::full(ashape, t.node(self).grad.data[0]));
    });
}

// Sum of -logp[i, labels[i]] over rows; logp: [L x V].
inline Var nll_rows(Var logp, const std::vector<int>& labels) {
    GradTape& t = *logp.tape;
    const Tensor& lp = logp.value();
    require_dim(lp.ndim() == 2 && static_cast<int>(labels.size()) == lp.shape[0], "nll_rows: label count mismatch");
    double loss = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
        require_dim(labels[i] >= 0 && labels[i] < lp.shape[1], "nll_rows: label out of range");
        loss -= lp.at(static_cast<int>(i), labels[i]);
    }
    const std::vector<int> lshape = lp.shape;
    return t.push_op(Tensor::scalar(loss), {logp.id}, [pl = logp.id, labels, lshape](GradTape& t, int self) {
        const double g = t.node(self).grad.data[0];
        Tensor dl(lshape);
        for (size_t i = 0; i < labels.size(); ++i) dl.at(static_cast<int>(i), labels[i]) = -g;
        t.accumulate(pl, dl);
    });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// softmax_j((Q_i . K_j + bias_ij) / sqrt(d)) V_j. The scale uses the query
// width d; an absent bias and an all-zero bias are bit-identical paths.
inline Var scaled_dot_attention(Var q, Var k, Var v, const Var* additive_bias = nullptr) {
    // Note: tape node references are invalidated by every op push, so all
    // shape facts are copied out before building the graph.
    const std::vector<int> qshape = q.value().shape;
    const std::vector<int> kshape = k.value().shape;
    require_dim(qshape.size() == 2 && qshape[1] > 0, "scaled_dot_attention: bad query shape");
    require_dim(kshape.size() == 2 && kshape[1] == qshape[1], "scaled_dot_attention: key width mismatch");
    require_dim(v.value().ndim() == 2 && v.value().shape[0] == kshape[0], "scaled_dot_attention: key/value count mismatch");
    if (additive_bias != nullptr)
        require_dim(additive_bias->value().shape == std::vector<int>({qshape[0], kshape[0]}),
                    "scaled_dot_attention: bias shape mismatch");
    Var scores = matmul_nt(q, k);
    if (additive_bias != nullptr) scores = add(scores, *additive_bias);
    scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(qshape[1])));
    return matmul(softmax_rows(scores), v);
}

inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* additive_bias = nullptr) {
    GradTape tape;
    tape.recording = false;
    Var qb = tape.constant(q), kb = tape.constant(k), vb = tape.constant(v);
    if (additive_bias != nullptr) {
        Var bias = tape.constant(*additive_bias);
        return scaled_dot_attention(qb, kb, vb, &bias).value();
    }
    return scaled_dot_attention(qb, kb, vb).value();
}

}  // namespace tsasr
