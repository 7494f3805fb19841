#pragma once

#include "storydiff/graph.hpp"

namespace storydiff {
namespace ops {

// ---------------------------------------------------------------------------
// conv2d: im2col + GEMM. Batch is split across the worker lane; the column
// buffer is recomputed in backward instead of cached (memory over time).
// Weight gradients accumulate into per-lane partials reduced in fixed order.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void im2col(const S* x, int64_t C, int64_t H, int64_t W, int k, int stride, int pad, S* col,
            int64_t OH, int64_t OW) {
    for (int64_t c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                S* dst = col + ((c * k + ki) * k + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) {
                        for (int64_t ox = 0; ox < OW; ++ox) dst[oy * OW + ox] = 0;
                        continue;
                    }
                    const S* row = x + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        int64_t ix = ox * stride - pad + kj;
                        dst[oy * OW + ox] = (ix >= 0 && ix < W) ? row[ix] : S(0);
                    }
                }
            }
}

template <class S>
void col2im_add(const S* col, int64_t C, int64_t H, int64_t W, int k, int stride, int pad, S* x,
                int64_t OH, int64_t OW) {
    for (int64_t c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const S* src = col + ((c * k + ki) * k + kj) * OH * OW;
                for (int64_t oy = 0; oy < OH; ++oy) {
                    int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) continue;
                    S* row = x + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        int64_t ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < W) row[ix] += src[oy * OW + ox];
                    }
                }
            }
}

}  // namespace detail

template <class S>
VarT<S> conv2d(VarT<S> x, VarT<S> w, VarT<S> bias, int stride, int pad) {
    auto* g = x.g;
    int64_t B = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    int64_t Co = w.val().dim(0), Ci = w.val().dim(1);
    int k = int(w.val().dim(2));
    if (Ci != C) throw ValidationError("conv2d: channel mismatch");
    if (w.val().dim(3) != k) throw ValidationError("conv2d: non-square kernel");
    int64_t OH = (H + 2 * pad - k) / stride + 1;
    int64_t OW = (W + 2 * pad - k) / stride + 1;
    int64_t CK = C * k * k, N = OH * OW;

    TensorT<S> out({B, Co, OH, OW});
    {
        const S* px = x.val().data();
        const S* pw = w.val().data();
        const S* pb = bias.valid() ? bias.val().data() : nullptr;
        S* po = out.data();
        parallel_for(B, [&](int64_t b0, int64_t b1) {
            std::vector<S> col(size_t(CK * N));
            for (int64_t b = b0; b < b1; ++b) {
                detail::im2col(px + b * C * H * W, C, H, W, k, stride, pad, col.data(), OH, OW);
                gemm(pw, col.data(), po + b * Co * N, Co, CK, N);
                if (pb)
                    for (int64_t co = 0; co < Co; ++co) {
                        S add = pb[co];
                        S* dst = po + (b * Co + co) * N;
                        for (int64_t i = 0; i < N; ++i) dst[i] += add;
                    }
            }
        }, 1);
    }

    int xid = x.id, wid = w.id, bid = bias.valid() ? bias.id : -1;
    std::vector<int> parents = {xid, wid};
    if (bid >= 0) parents.push_back(bid);
    int id = g->add_node(std::move(out), parents,
                         [=](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        const S* pgo = go.data();
        bool need_x = gr.nodes[size_t(xid)].needs_grad;
        bool need_w = gr.nodes[size_t(wid)].needs_grad;
        bool need_b = bid >= 0 && gr.nodes[size_t(bid)].needs_grad;
        const S* px = gr.value(xid).data();
        const S* pw = gr.value(wid).data();

        // halves must match WorkerLane's fixed split so each partial buffer
        // is written by exactly one thread
        int64_t split = B / 2;
        TensorT<S> wpart0({Co, CK}), wpart1({Co, CK});
        TensorT<S> bpart0({Co}), bpart1({Co});
        S* pgx = need_x ? gr.grad_ref(xid).data() : nullptr;

        parallel_for(B, [&](int64_t b0, int64_t b1) {
            std::vector<S> col(size_t(CK * N));
            std::vector<S> dcol(size_t(CK * N));
            S* wp = (b0 < split || B < 2) ? wpart0.data() : wpart1.data();
            S* bp = (b0 < split || B < 2) ? bpart0.data() : bpart1.data();
            for (int64_t b = b0; b < b1; ++b) {
                const S* gy = pgo + b * Co * N;
                if (need_w || need_x)
                    detail::im2col(px + b * C * H * W, C, H, W, k, stride, pad, col.data(), OH, OW);
                if (need_w) gemm(gy, col.data(), wp, Co, N, CK, false, true, true);
                if (need_b)
                    for (int64_t co = 0; co < Co; ++co) {
                        S s = 0;
                        for (int64_t i = 0; i < N; ++i) s += gy[co * N + i];
                        bp[co] += s;
                    }
                if (need_x) {
                    gemm(pw, gy, dcol.data(), CK, Co, N, true, false, false);
                    detail::col2im_add(dcol.data(), C, H, W, k, stride, pad, pgx + b * C * H * W,
                                       OH, OW);
                }
            }
        }, 1);

        if (need_w) {
            TensorT<S>& gw = gr.grad_ref(wid);
            for (int64_t i = 0; i < gw.numel(); ++i)
                gw.data()[i] += wpart0.data()[i] + wpart1.data()[i];
        }
        if (need_b) {
            TensorT<S>& gb = gr.grad_ref(bid);
            for (int64_t i = 0; i < Co; ++i) gb.data()[i] += bpart0.data()[i] + bpart1.data()[i];
        }
    });
    return {g, id};
}

template <class S>
VarT<S> upsample_nearest2(VarT<S> x) {
    auto* g = x.g;
    int64_t B = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    TensorT<S> out({B, C, 2 * H, 2 * W});
    const S* px = x.val().data();
    S* po = out.data();
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx) {
                S v = px[(bc * H + y) * W + xx];
                S* dst = po + (bc * 2 * H + 2 * y) * 2 * W + 2 * xx;
                dst[0] = v;
                dst[1] = v;
                dst[2 * W] = v;
                dst[2 * W + 1] = v;
            }
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, B, C, H, W](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t bc = 0; bc < B * C; ++bc)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xx = 0; xx < W; ++xx) {
                    const S* src = go.data() + (bc * 2 * H + 2 * y) * 2 * W + 2 * xx;
                    gx.data()[(bc * H + y) * W + xx] +=
                        src[0] + src[1] + src[2 * W] + src[2 * W + 1];
                }
    });
    return {g, id};
}

// (B,M,N) -> (B,N,M)
template <class S>
VarT<S> transpose_12(VarT<S> x) {
    auto* g = x.g;
    if (x.val().ndim() != 3) throw ValidationError("transpose_12: want 3 dims");
    int64_t B = x.val().dim(0), M = x.val().dim(1), N = x.val().dim(2);
    TensorT<S> out({B, N, M});
    const S* px = x.val().data();
    S* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < M; ++i)
            for (int64_t j = 0; j < N; ++j) po[(b * N + j) * M + i] = px[(b * M + i) * N + j];
    int xid = x.id;
    int id = g->add_node(std::move(out), {xid}, [xid, B, M, N](GraphT<S>& gr, int self) {
        if (!gr.nodes[size_t(xid)].needs_grad) return;
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        TensorT<S>& gx = gr.grad_ref(xid);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = 0; j < N; ++j)
                    gx.data()[(b * M + i) * N + j] += go.data()[(b * N + j) * M + i];
    });
    return {g, id};
}

// ---------------------------------------------------------------------------
// GroupNorm over (B,C,H,W) with per-channel affine.
// ---------------------------------------------------------------------------

template <class S>
VarT<S> group_norm(VarT<S> x, VarT<S> gamma, VarT<S> beta, int groups, S eps = S(1e-5)) {
    auto* g = x.g;
    int64_t B = x.val().dim(0), C = x.val().dim(1);
    int64_t hw = x.val().numel() / (B * C);
    if (C % groups != 0) throw ValidationError("group_norm: C % groups != 0");
    int64_t cpg = C / groups;
    int64_t gsz = cpg * hw;

    TensorT<S> out(x.val().shape);
    auto mu = std::make_shared<std::vector<S>>(size_t(B * groups));
    auto inv_sd = std::make_shared<std::vector<S>>(size_t(B * groups));
    {
        const S* px = x.val().data();
        const S* pg = gamma.val().data();
        const S* pb = beta.val().data();
        S* po = out.data();
        parallel_for(B * groups, [&](int64_t i0, int64_t i1) {
            for (int64_t bg = i0; bg < i1; ++bg) {
                int64_t b = bg / groups, gi = bg % groups;
                const S* base = px + (b * C + gi * cpg) * hw;
                double m = 0;
                for (int64_t i = 0; i < gsz; ++i) m += double(base[i]);
                m /= double(gsz);
                double v = 0;
                for (int64_t i = 0; i < gsz; ++i) {
                    double d = double(base[i]) - m;
                    v += d * d;
                }
                v /= double(gsz);
                S is = S(1.0 / std::sqrt(v + double(eps)));
                (*mu)[size_t(bg)] = S(m);
                (*inv_sd)[size_t(bg)] = is;
                S* dst = po + (b * C + gi * cpg) * hw;
                for (int64_t cc = 0; cc < cpg; ++cc) {
                    int64_t ch = gi * cpg + cc;
                    S ga = pg[ch], be = pb[ch];
                    for (int64_t i = 0; i < hw; ++i)
                        dst[cc * hw + i] = (base[cc * hw + i] - S(m)) * is * ga + be;
                }
            }
        }, 1);
    }

    int xid = x.id, gid = gamma.id, bid = beta.id;
    int id = g->add_node(std::move(out), {xid, gid, bid},
                         [=](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        const TensorT<S>& vx = gr.value(xid);
        const S* pg = gr.value(gid).data();
        bool need_x = gr.nodes[size_t(xid)].needs_grad;
        bool need_g = gr.nodes[size_t(gid)].needs_grad;
        bool need_b = gr.nodes[size_t(bid)].needs_grad;

        // dgamma/dbeta: plain loops, deterministic order
        if (need_g || need_b) {
            TensorT<S>* gg = need_g ? &gr.grad_ref(gid) : nullptr;
            TensorT<S>* gb = need_b ? &gr.grad_ref(bid) : nullptr;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t ch = 0; ch < C; ++ch) {
                    int64_t bg = b * groups + ch / cpg;
                    S m = (*mu)[size_t(bg)], is = (*inv_sd)[size_t(bg)];
                    const S* gsrc = go.data() + (b * C + ch) * hw;
                    const S* xsrc = vx.data() + (b * C + ch) * hw;
                    S sg = 0, sb = 0;
                    for (int64_t i = 0; i < hw; ++i) {
                        sg += gsrc[i] * (xsrc[i] - m) * is;
                        sb += gsrc[i];
                    }
                    if (gg) gg->data()[ch] += sg;
                    if (gb) gb->data()[ch] += sb;
                }
        }
        if (!need_x) return;
        TensorT<S>& gx = gr.grad_ref(xid);
        S* pgx = gx.data();
        const S* pgo = go.data();
        const S* pvx = vx.data();
        parallel_for(B * groups, [&](int64_t i0, int64_t i1) {
            for (int64_t bg = i0; bg < i1; ++bg) {
                int64_t b = bg / groups, gi = bg % groups;
                S m = (*mu)[size_t(bg)], is = (*inv_sd)[size_t(bg)];
                const S* xb = pvx + (b * C + gi * cpg) * hw;
                const S* gb2 = pgo + (b * C + gi * cpg) * hw;
                // dL/dxhat = go * gamma; need its mean and <dxhat, xhat> mean
                double s1 = 0, s2 = 0;
                for (int64_t cc = 0; cc < cpg; ++cc) {
                    S ga = pg[gi * cpg + cc];
                    for (int64_t i = 0; i < hw; ++i) {
                        double dxh = double(gb2[cc * hw + i]) * double(ga);
                        double xh = (double(xb[cc * hw + i]) - double(m)) * double(is);
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                }
                s1 /= double(gsz);
                s2 /= double(gsz);
                S* dst = pgx + (b * C + gi * cpg) * hw;
                for (int64_t cc = 0; cc < cpg; ++cc) {
                    S ga = pg[gi * cpg + cc];
                    for (int64_t i = 0; i < hw; ++i) {
                        double dxh = double(gb2[cc * hw + i]) * double(ga);
                        double xh = (double(xb[cc * hw + i]) - double(m)) * double(is);
                        dst[cc * hw + i] += S((dxh - s1 - xh * s2) * double(is));
                    }
                }
            }
        }, 1);
    });
    return {g, id};
}

// LayerNorm over the last dimension, rows = everything before it.
template <class S>
VarT<S> layer_norm_rows(VarT<S> x, VarT<S> gamma, VarT<S> beta, S eps = S(1e-5)) {
    auto* g = x.g;
    int64_t d = x.val().dim(-1);
    int64_t rows = x.val().numel() / d;
    TensorT<S> out(x.val().shape);
    auto mu = std::make_shared<std::vector<S>>(size_t(rows));
    auto inv_sd = std::make_shared<std::vector<S>>(size_t(rows));
    {
        const S* px = x.val().data();
        const S* pg = gamma.val().data();
        const S* pb = beta.val().data();
        for (int64_t r = 0; r < rows; ++r) {
            const S* xr = px + r * d;
            double m = 0;
            for (int64_t j = 0; j < d; ++j) m += double(xr[j]);
            m /= double(d);
            double v = 0;
            for (int64_t j = 0; j < d; ++j) {
                double dd = double(xr[j]) - m;
                v += dd * dd;
            }
            v /= double(d);
            S is = S(1.0 / std::sqrt(v + double(eps)));
            (*mu)[size_t(r)] = S(m);
            (*inv_sd)[size_t(r)] = is;
            for (int64_t j = 0; j < d; ++j)
                out.data()[r * d + j] = (xr[j] - S(m)) * is * pg[j] + pb[j];
        }
    }
    int xid = x.id, gid = gamma.id, bid = beta.id;
    int id = g->add_node(std::move(out), {xid, gid, bid},
                         [=](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        const TensorT<S>& vx = gr.value(xid);
        const S* pg = gr.value(gid).data();
        bool need_x = gr.nodes[size_t(xid)].needs_grad;
        bool need_g = gr.nodes[size_t(gid)].needs_grad;
        bool need_b = gr.nodes[size_t(bid)].needs_grad;
        TensorT<S>* gg = need_g ? &gr.grad_ref(gid) : nullptr;
        TensorT<S>* gb = need_b ? &gr.grad_ref(bid) : nullptr;
        TensorT<S>* gx = need_x ? &gr.grad_ref(xid) : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
            S m = (*mu)[size_t(r)], is = (*inv_sd)[size_t(r)];
            const S* xr = vx.data() + r * d;
            const S* gr2 = go.data() + r * d;
            double s1 = 0, s2 = 0;
            for (int64_t j = 0; j < d; ++j) {
                double xh = (double(xr[j]) - double(m)) * double(is);
                if (gg) gg->data()[j] += gr2[j] * S(xh);
                if (gb) gb->data()[j] += gr2[j];
                double dxh = double(gr2[j]) * double(pg[j]);
                s1 += dxh;
                s2 += dxh * xh;
            }
            if (!need_x) continue;
            s1 /= double(d);
            s2 /= double(d);
            for (int64_t j = 0; j < d; ++j) {
                double xh = (double(xr[j]) - double(m)) * double(is);
                double dxh = double(gr2[j]) * double(pg[j]);
                gx->data()[r * d + j] += S((dxh - s1 - xh * s2) * double(is));
            }
        }
    });
    return {g, id};
}

// ---------------------------------------------------------------------------
// Multi-head attention core. q (B,Tq,D), k/v (B,Tk,D); heads split D into
// contiguous chunks. key_mask, if given, has B*Tk entries, 0 = masked out.
// Softmax rows with every key masked degrade to uniform (max subtraction),
// and their output is a combination of masked values; callers mask those
// outputs downstream. probs_out, if non-null, receives the (B,H,Tq,Tk)
// attention weights (inspection only, not part of the graph).
// ---------------------------------------------------------------------------

template <class S>
VarT<S> mha(VarT<S> q, VarT<S> k, VarT<S> v, int heads,
            const std::vector<S>* key_mask = nullptr,
            std::shared_ptr<std::vector<S>>* probs_out = nullptr) {
    auto* g = q.g;
    int64_t B = q.val().dim(0), Tq = q.val().dim(1), D = q.val().dim(2);
    int64_t Tk = k.val().dim(1);
    if (k.val().dim(0) != B || v.val().dim(0) != B || v.val().dim(1) != Tk ||
        k.val().dim(2) != D || v.val().dim(2) != D)
        throw ValidationError("mha: shape mismatch");
    if (D % heads != 0) throw ValidationError("mha: D % heads != 0");
    int64_t dh = D / heads;
    S iscale = S(1.0 / std::sqrt(double(dh)));

    auto probs = std::make_shared<std::vector<S>>(size_t(B * heads * Tq * Tk));
    TensorT<S> out({B, Tq, D});
    {
        const S* pq = q.val().data();
        const S* pk = k.val().data();
        const S* pv = v.val().data();
        S* po = out.data();
        parallel_for(B, [&](int64_t b0, int64_t b1) {
            std::vector<S> z(size_t(Tq * Tk));
            for (int64_t b = b0; b < b1; ++b)
                for (int h = 0; h < heads; ++h) {
                    const S* qh = pq + (b * Tq) * D + h * dh;
                    const S* kh = pk + (b * Tk) * D + h * dh;
                    const S* vh = pv + (b * Tk) * D + h * dh;
                    // z = q k^T / sqrt(dh); strided rows, so plain loops
                    for (int64_t i = 0; i < Tq; ++i)
                        for (int64_t j = 0; j < Tk; ++j) {
                            S s = 0;
                            for (int64_t c = 0; c < dh; ++c) s += qh[i * D + c] * kh[j * D + c];
                            s *= iscale;
                            if (key_mask && (*key_mask)[size_t(b * Tk + j)] <= 0) s -= S(1e9);
                            z[size_t(i * Tk + j)] = s;
                        }
                    S* P = probs->data() + ((b * heads + h) * Tq) * Tk;
                    for (int64_t i = 0; i < Tq; ++i) {
                        S mx = z[size_t(i * Tk)];
                        for (int64_t j = 1; j < Tk; ++j) mx = std::max(mx, z[size_t(i * Tk + j)]);
                        double den = 0;
                        for (int64_t j = 0; j < Tk; ++j)
                            den += std::exp(double(z[size_t(i * Tk + j)] - mx));
                        for (int64_t j = 0; j < Tk; ++j)
                            P[i * Tk + j] = S(std::exp(double(z[size_t(i * Tk + j)] - mx)) / den);
                    }
                    for (int64_t i = 0; i < Tq; ++i)
                        for (int64_t c = 0; c < dh; ++c) {
                            S s = 0;
                            for (int64_t j = 0; j < Tk; ++j) s += P[i * Tk + j] * vh[j * D + c];
                            po[(b * Tq + i) * D + h * dh + c] = s;
                        }
                }
        }, 1);
    }
    if (probs_out) *probs_out = probs;

    int qid = q.id, kid = k.id, vid = v.id;
    int id = g->add_node(std::move(out), {qid, kid, vid},
                         [=](GraphT<S>& gr, int self) {
        const TensorT<S>& go = gr.nodes[size_t(self)].grad;
        bool need_q = gr.nodes[size_t(qid)].needs_grad;
        bool need_k = gr.nodes[size_t(kid)].needs_grad;
        bool need_v = gr.nodes[size_t(vid)].needs_grad;
        if (!(need_q || need_k || need_v)) return;
        const S* pq = gr.value(qid).data();
        const S* pk = gr.value(kid).data();
        const S* pv = gr.value(vid).data();
        S* pgq = need_q ? gr.grad_ref(qid).data() : nullptr;
        S* pgk = need_k ? gr.grad_ref(kid).data() : nullptr;
        S* pgv = need_v ? gr.grad_ref(vid).data() : nullptr;
        const S* pgo = go.data();
        parallel_for(B, [&](int64_t b0, int64_t b1) {
            std::vector<S> dP(size_t(Tq * Tk)), dZ(size_t(Tq * Tk));
            for (int64_t b = b0; b < b1; ++b)
                for (int h = 0; h < heads; ++h) {
                    const S* qh = pq + (b * Tq) * D + h * dh;
                    const S* kh = pk + (b * Tk) * D + h * dh;
                    const S* vh = pv + (b * Tk) * D + h * dh;
                    const S* P = probs->data() + ((b * heads + h) * Tq) * Tk;
                    const S* gOh = pgo + (b * Tq) * D + h * dh;
                    // dV
                    if (need_v)
                        for (int64_t j = 0; j < Tk; ++j)
                            for (int64_t c = 0; c < dh; ++c) {
                                S s = 0;
                                for (int64_t i = 0; i < Tq; ++i)
                                    s += P[i * Tk + j] * gOh[i * D + c];
                                pgv[(b * Tk + j) * D + h * dh + c] += s;
                            }
                    if (!(need_q || need_k)) continue;
                    // dP = dO V^T; dZ = softmax backward
                    for (int64_t i = 0; i < Tq; ++i)
                        for (int64_t j = 0; j < Tk; ++j) {
                            S s = 0;
                            for (int64_t c = 0; c < dh; ++c) s += gOh[i * D + c] * vh[j * D + c];
                            dP[size_t(i * Tk + j)] = s;
                        }
                    for (int64_t i = 0; i < Tq; ++i) {
                        S dot = 0;
                        for (int64_t j = 0; j < Tk; ++j)
                            dot += dP[size_t(i * Tk + j)] * P[i * Tk + j];
                        for (int64_t j = 0; j < Tk; ++j)
                            dZ[size_t(i * Tk + j)] =
                                (dP[size_t(i * Tk + j)] - dot) * P[i * Tk + j] * iscale;
                    }
                    if (need_q)
                        for (int64_t i = 0; i < Tq; ++i)
                            for (int64_t c = 0; c < dh; ++c) {
                                S s = 0;
                                for (int64_t j = 0; j < Tk; ++j)
                                    s += dZ[size_t(i * Tk + j)] * kh[j * D + c];
                                pgq[(b * Tq + i) * D + h * dh + c] += s;
                            }
                    if (need_k)
                        for (int64_t j = 0; j < Tk; ++j)
                            for (int64_t c = 0; c < dh; ++c) {
                                S s = 0;
                                for (int64_t i = 0; i < Tq; ++i)
                                    s += dZ[size_t(i * Tk + j)] * qh[i * D + c];
                                pgk[(b * Tk + j) * D + h * dh + c] += s;
                            }
                }
        }, 1);
    });
    return {g, id};
}

}  // namespace ops
}  // namespace storydiff
