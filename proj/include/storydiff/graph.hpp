#pragma once

#include <algorithm>
#include <cassert>
#include <memory>

#include "storydiff/tensor.hpp"

namespace storydiff {

// Reverse-mode autodiff on a flat tape. Nodes are created in topological
// order by construction, so backward() is a single reverse sweep. The engine
// is scalar-generic: float for the denoiser, double for the encoder stack
// (whose gradients feed sampling guidance and finite-difference checks).

template <class S>
class GraphT;

template <class S>
struct VarT {
    GraphT<S>* g = nullptr;
    int id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const TensorT<S>& val() const;
    const TensorT<S>& grad() const;
    int64_t dim(int i) const { return val().dim(i); }
};

template <class S>
class GraphT {
  public:
    struct Node {
        TensorT<S> value;
        TensorT<S> grad;  // allocated lazily
        std::function<void(GraphT&, int)> backward;
        std::vector<int> parents;
        bool needs_grad = false;
    };

    std::vector<Node> nodes;

    int add_node(TensorT<S> value, std::vector<int> parents,
                 std::function<void(GraphT&, int)> bw) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.backward = std::move(bw);
        for (int p : n.parents)
            if (nodes[size_t(p)].needs_grad) n.needs_grad = true;
        nodes.push_back(std::move(n));
        return int(nodes.size()) - 1;
    }

    VarT<S> input(TensorT<S> v, bool needs_grad = false) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        nodes.push_back(std::move(n));
        return {this, int(nodes.size()) - 1};
    }

    TensorT<S>& value(int id) { return nodes[size_t(id)].value; }
    const TensorT<S>& value(int id) const { return nodes[size_t(id)].value; }

    TensorT<S>& grad_ref(int id) {
        Node& n = nodes[size_t(id)];
        if (n.grad.numel() == 0) n.grad = TensorT<S>::zeros(n.value.shape);
        return n.grad;
    }

    bool has_grad(int id) const { return nodes[size_t(id)].grad.numel() != 0; }

    // Accumulates seed (default: ones for scalars) into root's grad and runs
    // the reverse sweep.
    void backward(VarT<S> root, const TensorT<S>* seed = nullptr) {
        TensorT<S>& rg = grad_ref(root.id);
        if (seed) {
            if (!seed->same_shape(rg)) throw ValidationError("backward: seed shape mismatch");
            rg.add_(*seed);
        } else {
            if (rg.numel() != 1)
                throw ValidationError("backward: non-scalar root requires an explicit seed");
            rg.data()[0] += S(1);
        }
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes[size_t(id)];
            if (!n.needs_grad || !n.backward || n.grad.numel() == 0) continue;
            n.backward(*this, id);
        }
    }

    void clear() { nodes.clear(); }
    size_t size() const { return nodes.size(); }
};

template <class S>
const TensorT<S>& VarT<S>::val() const {
    return g->value(id);
}
template <class S>
const TensorT<S>& VarT<S>::grad() const {
    return g->nodes[size_t(id)].grad;
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace ops {

template <class S>
inline void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* what) {
    if (!a.same_shape(b)) throw ValidationError(std::string(what) + ": shape mismatch");
}

template <class S>
VarT<S> add_scaled(VarT<S> a, VarT<S> b, S ca, S cb) {
    auto* g = a.g;
    check_same_shape(a.val(), b.val(), "add");
    TensorT<S> out(a.val().shape);
    const S* pa = a.val().data();
    const S* pb = b.val().data();
    S* po = out.data();
    int64_t n = out.numel();
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) po[i] = ca * pa[i] + cb * pb[i];
    }, 1 << 16);
    int aid = a.id, bid = b.id;
    int id = g->add_node(std::move(out), {aid, bid}, [aid, bid, ca, cb](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        if (gr.nodes[size_t(aid)].needs_grad) {
            TensorT<S>& ga = gr.grad_ref(aid);
            for (int64_t i = 0; i < go.numel(); ++i) ga.data()[i] += ca * go.data()[i];
        }
        if (gr.nodes[size_t(bid)].needs_grad) {
            TensorT<S>& gb = gr.grad_ref(bid);
            for (int64_t i = 0; i < go.numel(); ++i) gb.data()[i] += cb * go.data()[i];
        }
    });
    return {g, id};
}

template <class S>
VarT<S> add(VarT<S> a, VarT<S> b) {
    return add_scaled(a, b, S(1), S(1));
}
template <class S>
VarT<S> sub(VarT<S> a, VarT<S> b) {
    return add_scaled(a, b, S(1), S(-1));
}

template <class S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
    auto* g = a.g;
    check_same_shape(a.val(), b.val(), "mul");
    TensorT<S> out(a.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = a.val().data()[i] * b.val().data()[i];
    int aid = a.id, bid = b.id;
    int id = g->add_node(std::move(out), {aid, bid}, [aid, bid](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        const TensorT<S>& va = gr.value(aid);
        const TensorT<S>& vb = gr.value(bid);
        if (gr.nodes[size_t(aid)].needs_grad) {
            TensorT<S>& ga = gr.grad_ref(aid);
            for (int64_t i = 0; i < go.numel(); ++i) ga.data()[i] += go.data()[i] * vb.data()[i];
        }
        if (gr.nodes[size_t(bid)].needs_grad) {
            TensorT<S>& gb = gr.grad_ref(bid);
            for (int64_t i = 0; i < go.numel(); ++i) gb.data()[i] += go.data()[i] * va.data()[i];
        }
    });
    return {g, id};
}

template <class S>
VarT<S> scale(VarT<S> a, S c) {
    auto* g = a.g;
    TensorT<S> out(a.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = c * a.val().data()[i];
    int aid = a.id;
    int id = g->add_node(std::move(out), {aid}, [aid, c](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        if (!gr.nodes[size_t(aid)].needs_grad) return;
        TensorT<S>& ga = gr.grad_ref(aid);
        for (int64_t i = 0; i < go.numel(); ++i) ga.data()[i] += c * go.data()[i];
    });
    return {g, id};
}

// y = x reshaped; storage shared, gradient passes through flat.
template <class S>
VarT<S> view(VarT<S> a, std::vector<int64_t> shape) {
    auto* g = a.g;
    TensorT<S> out = a.val().view(std::move(shape));
    int aid = a.id;
    int id = g->add_node(std::move(out), {aid}, [aid](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        if (!gr.nodes[size_t(aid)].needs_grad) return;
        TensorT<S>& ga = gr.grad_ref(aid);
        for (int64_t i = 0; i < go.numel(); ++i) ga.data()[i] += go.data()[i];
    });
    return {g, id};
}

// C = A(M,K) * B(K,N)
template <class S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
    auto* g = a.g;
    int64_t m = a.val().dim(0), k = a.val().dim(1), n = b.val().dim(1);
    if (b.val().dim(0) != k) throw ValidationError("matmul: inner dim mismatch");
    TensorT<S> out({m, n});
    gemm(a.val().data(), b.val().data(), out.data(), m, k, n);
    int aid = a.id, bid = b.id;
    int id = g->add_node(std::move(out), {aid, bid}, [aid, bid, m, k, n](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        if (gr.nodes[size_t(aid)].needs_grad)
            gemm(go.data(), gr.value(bid).data(), gr.grad_ref(aid).data(), m, n, k, false, true, true);
        if (gr.nodes[size_t(bid)].needs_grad)
            gemm(gr.value(aid).data(), go.data(), gr.grad_ref(bid).data(), k, m, n, true, false, true);
    });
    return {g, id};
}

// C = A(M,K) * B(N,K)^T — the usual linear-layer orientation.
template <class S>
VarT<S> matmul_nt(VarT<S> a, VarT<S> b) {
    auto* g = a.g;
    int64_t m = a.val().dim(0), k = a.val().dim(1), n = b.val().dim(0);
    if (b.val().dim(1) != k) throw ValidationError("matmul_nt: inner dim mismatch");
    TensorT<S> out({m, n});
    gemm(a.val().data(), b.val().data(), out.data(), m, k, n, false, true);
    int aid = a.id, bid = b.id;
    int id = g->add_node(std::move(out), {aid, bid}, [aid, bid, m, k, n](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        if (gr.nodes[size_t(aid)].needs_grad)
            gemm(go.data(), gr.value(bid).data(), gr.grad_ref(aid).data(), m, n, k, false, false, true);
        if (gr.nodes[size_t(bid)].needs_grad)
            gemm(go.data(), gr.value(aid).data(), gr.grad_ref(bid).data(), n, m, k, true, false, true);
    });
    return {g, id};
}

// x (N,D) + b (D) broadcast over rows
template <class S>
VarT<S> add_rowbias(VarT<S> x, VarT<S> b) {
    auto* g = x.g;
    int64_t d = b.val().numel();
    int64_t rows = x.val().numel() / d;
    if (x.val().dim(-1) != d) throw ValidationError("add_rowbias: width mismatch");
    TensorT<S> out(x.val().shape);
    const S* px = x.val().data();
    const S* pb = b.val().data();
    S* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
    int xid = x.id, bid = b.id;
    int id = g->add_node(std::move(out), {xid, bid}, [xid, bid, rows, d](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        if (gr.nodes[size_t(xid)].needs_grad) {
            TensorT<S>& gx = gr.grad_ref(xid);
            for (int64_t i = 0; i < go.numel(); ++i) gx.data()[i] += go.data()[i];
        }
        if (gr.nodes[size_t(bid)].needs_grad) {
            TensorT<S>& gb = gr.grad_ref(bid);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gb.data()[j] += go.data()[r * d + j];
        }
    });
    return {g, id};
}

// x (B,C,H,W) + v (B,C) broadcast over spatial dims (time-embedding injection)
template <class S>
VarT<S> add_channel_vec(VarT<S> x, VarT<S> v) {
    auto* g = x.g;
    int64_t B = x.val().dim(0), C = x.val().dim(1);
    int64_t hw = x.val().numel() / (B * C);
    if (v.val().numel() != B * C) throw ValidationError("add_channel_vec: size mismatch");
    TensorT<S> out(x.val().shape);
    const S* px = x.val().data();
    const S* pv = v.val().data();
    S* po = out.data();
    for (int64_t bc = 0; bc < B * C; ++bc) {
        S add = pv[bc];
        for (int64_t i = 0; i < hw; ++i) po[bc * hw + i] = px[bc * hw + i] + add;
    }
    int xid = x.id, vid = v.id;
    int id = g->add_node(std::move(out), {xid, vid}, [xid, vid, B, C, hw](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        if (gr.nodes[size_t(xid)].needs_grad) {
            TensorT<S>& gx = gr.grad_ref(xid);
            for (int64_t i = 0; i < go.numel(); ++i) gx.data()[i] += go.data()[i];
        }
        if (gr.nodes[size_t(vid)].needs_grad) {
            TensorT<S>& gv = gr.grad_ref(vid);
            for (int64_t bc = 0; bc < B * C; ++bc) {
                S s = 0;
                for (int64_t i = 0; i < hw; ++i) s += go.data()[bc * hw + i];
                gv.data()[bc] += s;
            }
        }
    });
    return {g, id};
}

template <class S>
VarT<S> silu(VarT<S> x) {
    auto* g = x.g;
    TensorT<S> out(x.val().shape);
    const S* px = x.val().data();
    S* po = out.data();
    int64_t n = out.numel();
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            S s = S(1) / (S(1) + std::exp(-px[i]));
            po[i] = px[i] * s;
        }
    }, 1 << 16);
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        const TensorT<S>& vx = gr.value(xid);
        TensorT<S>& gx = gr.grad_ref(xid);
        int64_t n = go.numel();
        const S* pgo = go.data();
        const S* px = vx.data();
        S* pgx = gx.data();
        parallel_for(n, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) {
                S s = S(1) / (S(1) + std::exp(-px[i]));
                pgx[i] += pgo[i] * s * (S(1) + px[i] * (S(1) - s));
            }
        }, 1 << 16);
    });
    return {g, id};
}

template <class S>
VarT<S> sigmoid(VarT<S> x) {
    auto* g = x.g;
    TensorT<S> out(x.val().shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data()[i] = S(1) / (S(1) + std::exp(-x.val().data()[i]));
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        const TensorT<S>& vy = gr.value(self);
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t i = 0; i < go.numel(); ++i) {
            S y = vy.data()[i];
            gx.data()[i] += go.data()[i] * y * (S(1) - y);
        }
    });
    return {g, id};
}

// Concatenate along `dim`. All inputs share every other dimension.
template <class S>
VarT<S> concat(const std::vector<VarT<S>>& parts, int dim) {
    if (parts.empty()) throw ValidationError("concat: no inputs");
    auto* g = parts[0].g;
    const auto& s0 = parts[0].val().shape;
    int nd = int(s0.size());
    if (dim < 0) dim += nd;
    std::vector<int64_t> out_shape = s0;
    int64_t total = 0;
    for (const auto& p : parts) total += p.val().dim(dim);
    out_shape[size_t(dim)] = total;

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= s0[size_t(i)];
    for (int i = dim + 1; i < nd; ++i) inner *= s0[size_t(i)];

    TensorT<S> out(out_shape);
    std::vector<int> pids;
    std::vector<int64_t> sizes;
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t len = p.val().dim(dim);
        const S* src = p.val().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner, src + o * len * inner,
                        size_t(len * inner) * sizeof(S));
        pids.push_back(p.id);
        sizes.push_back(len);
        off += len;
    }
    int id = g->add_node(std::move(out), pids,
                         [pids, sizes, outer, inner, total](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        int64_t off = 0;
        for (size_t pi = 0; pi < pids.size(); ++pi) {
            int64_t len = sizes[pi];
            if (gr.nodes[size_t(pids[pi])].needs_grad) {
                TensorT<S>& gp = gr.grad_ref(pids[pi]);
                for (int64_t o = 0; o < outer; ++o) {
                    const S* src = go.data() + (o * total + off) * inner;
                    S* dst = gp.data() + o * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            }
            off += len;
        }
    });
    return {g, id};
}

template <class S>
VarT<S> slice(VarT<S> x, int dim, int64_t start, int64_t len) {
    auto* g = x.g;
    const auto& s0 = x.val().shape;
    int nd = int(s0.size());
    if (dim < 0) dim += nd;
    int64_t total = s0[size_t(dim)];
    if (start < 0 || start + len > total) throw ValidationError("slice: out of range");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= s0[size_t(i)];
    for (int i = dim + 1; i < nd; ++i) inner *= s0[size_t(i)];
    std::vector<int64_t> out_shape = s0;
    out_shape[size_t(dim)] = len;
    TensorT<S> out(out_shape);
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, x.val().data() + (o * total + start) * inner,
                    size_t(len * inner) * sizeof(S));
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid},
                         [xid, outer, inner, total, start, len](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t o = 0; o < outer; ++o) {
            const S* src = go.data() + o * len * inner;
            S* dst = gx.data() + (o * total + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
    return {g, id};
}

// Repeat x along a new leading dimension.
template <class S>
VarT<S> broadcast0(VarT<S> x, int64_t reps) {
    auto* g = x.g;
    std::vector<int64_t> out_shape;
    out_shape.push_back(reps);
    for (int64_t d : x.val().shape) out_shape.push_back(d);
    int64_t n = x.val().numel();
    TensorT<S> out(out_shape);
    for (int64_t r = 0; r < reps; ++r)
        std::memcpy(out.data() + r * n, x.val().data(), size_t(n) * sizeof(S));
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, reps, n](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t r = 0; r < reps; ++r)
            for (int64_t i = 0; i < n; ++i) gx.data()[i] += go.data()[r * n + i];
    });
    return {g, id};
}

// Scale each leading-dim slice of x by a constant weight (no grad to weights).
template <class S>
VarT<S> scale_slices(VarT<S> x, std::vector<S> w) {
    auto* g = x.g;
    int64_t B = x.val().dim(0);
    if (int64_t(w.size()) != B) throw ValidationError("scale_slices: weight count mismatch");
    int64_t n = x.val().numel() / B;
    TensorT<S> out(x.val().shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < n; ++i) out.data()[b * n + i] = x.val().data()[b * n + i] * w[size_t(b)];
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, w, B, n](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < n; ++i) gx.data()[b * n + i] += go.data()[b * n + i] * w[size_t(b)];
    });
    return {g, id};
}

// Rows of `table` (V,D) gathered by ids -> (N,D).
template <class S>
VarT<S> embedding(VarT<S> table, const std::vector<int>& ids) {
    auto* g = table.g;
    int64_t V = table.val().dim(0), D = table.val().dim(1);
    int64_t N = int64_t(ids.size());
    TensorT<S> out({N, D});
    for (int64_t i = 0; i < N; ++i) {
        int r = ids[size_t(i)];
        if (r < 0 || r >= V) throw ValidationError("embedding: id out of range");
        std::memcpy(out.data() + i * D, table.val().data() + int64_t(r) * D, size_t(D) * sizeof(S));
    }
    int tid = table.id;
    int id = g->add_node(std::move(out), {tid}, [tid, ids, D](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(tid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gt = gr.grad_ref(tid);
        for (size_t i = 0; i < ids.size(); ++i) {
            S* dst = gt.data() + int64_t(ids[i]) * D;
            const S* src = go.data() + int64_t(i) * D;
            for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
        }
    });
    return {g, id};
}

template <class S>
VarT<S> mean_all(VarT<S> x) {
    auto* g = x.g;
    int64_t n = x.val().numel();
    TensorT<S> out({1});
    S s = 0;
    for (int64_t i = 0; i < n; ++i) s += x.val().data()[i];
    out.data()[0] = s / S(n);
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, n](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        S g0 = gr.nodes[size_t(self)].grad.data()[0] / S(n);
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t i = 0; i < n; ++i) gx.data()[i] += g0;
    });
    return {g, id};
}

template <class S>
VarT<S> sum_all(VarT<S> x) {
    auto* g = x.g;
    int64_t n = x.val().numel();
    TensorT<S> out({1});
    S s = 0;
    for (int64_t i = 0; i < n; ++i) s += x.val().data()[i];
    out.data()[0] = s;
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, n](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        S g0 = gr.nodes[size_t(self)].grad.data()[0];
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t i = 0; i < n; ++i) gx.data()[i] += g0;
    });
    return {g, id};
}

// mean((a-b)^2) over all elements
template <class S>
VarT<S> mse(VarT<S> a, VarT<S> b) {
    auto* g = a.g;
    check_same_shape(a.val(), b.val(), "mse");
    int64_t n = a.val().numel();
    TensorT<S> out({1});
    double s = 0;  // accumulate in double; n can be large
    for (int64_t i = 0; i < n; ++i) {
        double d = double(a.val().data()[i]) - double(b.val().data()[i]);
        s += d * d;
    }
    out.data()[0] = S(s / double(n));
    int aid = a.id, bid = b.id;
    int id = g->add_node(std::move(out), {aid, bid}, [aid, bid, n](GraphT<S>& gr, int self) {
        S g0 = gr.nodes[size_t(self)].grad.data()[0];
        const TensorT<S>& va = gr.value(aid);
        const TensorT<S>& vb = gr.value(bid);
        S c = S(2) * g0 / S(n);
        if (gr.nodes[size_t(aid)].needs_grad) {
            TensorT<S>& ga = gr.grad_ref(aid);
            for (int64_t i = 0; i < n; ++i) ga.data()[i] += c * (va.data()[i] - vb.data()[i]);
        }
        if (gr.nodes[size_t(bid)].needs_grad) {
            TensorT<S>& gb = gr.grad_ref(bid);
            for (int64_t i = 0; i < n; ++i) gb.data()[i] -= c * (va.data()[i] - vb.data()[i]);
        }
    });
    return {g, id};
}

// Rows normalized to unit L2 norm: y_r = x_r / sqrt(|x_r|^2 + eps)
template <class S>
VarT<S> l2norm_rows(VarT<S> x, S eps = S(1e-12)) {
    auto* g = x.g;
    int64_t d = x.val().dim(-1);
    int64_t rows = x.val().numel() / d;
    TensorT<S> out(x.val().shape);
    std::vector<S> inv_r(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        S s = 0;
        const S* px = x.val().data() + r * d;
        for (int64_t j = 0; j < d; ++j) s += px[j] * px[j];
        S ir = S(1) / std::sqrt(s + eps);
        inv_r[size_t(r)] = ir;
        for (int64_t j = 0; j < d; ++j) out.data()[r * d + j] = px[j] * ir;
    }
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, rows, d, inv_r](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        const TensorT<S>& vy = gr.value(self);
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t r = 0; r < rows; ++r) {
            const S* pg = go.data() + r * d;
            const S* py = vy.data() + r * d;
            S dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += pg[j] * py[j];
            S ir = inv_r[size_t(r)];
            for (int64_t j = 0; j < d; ++j) gx.data()[r * d + j] += (pg[j] - py[j] * dot) * ir;
        }
    });
    return {g, id};
}

// (B,C,H,W) -> (B,C): spatial mean
template <class S>
VarT<S> global_mean_hw(VarT<S> x) {
    auto* g = x.g;
    int64_t B = x.val().dim(0), C = x.val().dim(1);
    int64_t hw = x.val().numel() / (B * C);
    TensorT<S> out({B, C});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        S s = 0;
        for (int64_t i = 0; i < hw; ++i) s += x.val().data()[bc * hw + i];
        out.data()[bc] = s / S(hw);
    }
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, B, C, hw](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t bc = 0; bc < B * C; ++bc) {
            S c = go.data()[bc] / S(hw);
            for (int64_t i = 0; i < hw; ++i) gx.data()[bc * hw + i] += c;
        }
    });
    return {g, id};
}

// (B,T,D) -> (B,D): mean over positions where mask01[b*T+t] > 0.
template <class S>
VarT<S> masked_mean_rows(VarT<S> x, const std::vector<S>& mask01) {
    auto* g = x.g;
    int64_t B = x.val().dim(0), T = x.val().dim(1), D = x.val().dim(2);
    if (int64_t(mask01.size()) != B * T) throw ValidationError("masked_mean_rows: mask size");
    TensorT<S> out({B, D});
    std::vector<S> inv_cnt(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
        S cnt = 0;
        for (int64_t t = 0; t < T; ++t) cnt += (mask01[size_t(b * T + t)] > 0) ? S(1) : S(0);
        if (cnt == 0) throw ValidationError("masked_mean_rows: empty mask row");
        inv_cnt[size_t(b)] = S(1) / cnt;
        for (int64_t t = 0; t < T; ++t) {
            if (mask01[size_t(b * T + t)] <= 0) continue;
            const S* px = x.val().data() + (b * T + t) * D;
            for (int64_t j = 0; j < D; ++j) out.data()[b * D + j] += px[j];
        }
        for (int64_t j = 0; j < D; ++j) out.data()[b * D + j] *= inv_cnt[size_t(b)];
    }
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid},
                         [xid, mask01, B, T, D, inv_cnt](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < T; ++t) {
                if (mask01[size_t(b * T + t)] <= 0) continue;
                S* pg = gx.data() + (b * T + t) * D;
                for (int64_t j = 0; j < D; ++j) pg[j] += go.data()[b * D + j] * inv_cnt[size_t(b)];
            }
    });
    return {g, id};
}

// Mean cross entropy of row-softmax vs integer targets; logits (N,M).
template <class S>
VarT<S> cross_entropy_rows(VarT<S> logits, const std::vector<int>& targets) {
    auto* g = logits.g;
    int64_t N = logits.val().dim(0), M = logits.val().dim(1);
    if (int64_t(targets.size()) != N) throw ValidationError("cross_entropy: target count");
    TensorT<S> out({1});
    auto probs = std::make_shared<std::vector<S>>(size_t(N * M));
    double loss = 0;
    for (int64_t r = 0; r < N; ++r) {
        const S* z = logits.val().data() + r * M;
        S mx = z[0];
        for (int64_t j = 1; j < M; ++j) mx = std::max(mx, z[j]);
        double den = 0;
        for (int64_t j = 0; j < M; ++j) den += std::exp(double(z[j] - mx));
        double logden = std::log(den);
        for (int64_t j = 0; j < M; ++j)
            (*probs)[size_t(r * M + j)] = S(std::exp(double(z[j] - mx)) / den);
        loss += logden - double(z[targets[size_t(r)]] - mx);
    }
    out.data()[0] = S(loss / double(N));
    int lid = logits.id;
    int id = g->add_node(std::move(out), {lid}, [lid, targets, N, M, probs](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(lid)].needs_grad) return;
        S g0 = gr.nodes[size_t(self)].grad.data()[0] / S(N);
        TensorT<S>& gl = gr.grad_ref(lid);
        for (int64_t r = 0; r < N; ++r)
            for (int64_t j = 0; j < M; ++j) {
                S p = (*probs)[size_t(r * M + j)];
                S t = (j == targets[size_t(r)]) ? S(1) : S(0);
                gl.data()[r * M + j] += g0 * (p - t);
            }
    });
    return {g, id};
}

// Mean binary cross entropy with logits; targets constant, same shape.
template <class S>
VarT<S> bce_logits(VarT<S> logits, const TensorT<S>& targets) {
    auto* g = logits.g;
    check_same_shape(logits.val(), targets, "bce_logits");
    int64_t n = logits.val().numel();
    auto tgt = std::make_shared<TensorT<S>>(targets.clone());
    TensorT<S> out({1});
    double loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        double z = double(logits.val().data()[i]);
        double t = double(targets.data()[i]);
        // softplus(z) - t*z, computed stably
        double sp = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        loss += sp - t * z;
    }
    out.data()[0] = S(loss / double(n));
    int lid = logits.id;
    int id = g->add_node(std::move(out), {lid}, [lid, tgt, n](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(lid)].needs_grad) return;
        S g0 = gr.nodes[size_t(self)].grad.data()[0] / S(n);
        const TensorT<S>& vz = gr.value(lid);
        TensorT<S>& gl = gr.grad_ref(lid);
        for (int64_t i = 0; i < n; ++i) {
            S sg = S(1) / (S(1) + std::exp(-vz.data()[i]));
            gl.data()[i] += g0 * (sg - tgt->data()[i]);
        }
    });
    return {g, id};
}

}  // namespace ops

}  // namespace storydiff
