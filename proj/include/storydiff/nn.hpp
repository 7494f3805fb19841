#pragma once

#include <map>

#include "storydiff/graph.hpp"
#include "storydiff/graph_nn_ops.hpp"

namespace storydiff {

// Named parameter with Adam state. Addresses are stable (unique_ptr in the
// store), so layers keep raw pointers.
template <class S>
struct ParamT {
    std::string name;
    TensorT<S> value;
    TensorT<S> adam_m, adam_v;
    bool trainable = true;
};

template <class S>
class ParamStoreT {
  public:
    ParamT<S>& create(const std::string& name, std::vector<int64_t> shape) {
        if (by_name_.count(name)) throw ValidationError("duplicate parameter: " + name);
        auto p = std::make_unique<ParamT<S>>();
        p->name = name;
        p->value = TensorT<S>::zeros(std::move(shape));
        ParamT<S>* raw = p.get();
        by_name_[name] = raw;
        params_.push_back(std::move(p));
        return *raw;
    }

    ParamT<S>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    const std::vector<std::unique_ptr<ParamT<S>>>& all() const { return params_; }

    int64_t count_scalars() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    uint64_t weights_hash() const {
        uint64_t h = 0xCBF29CE484222325ull;
        for (const auto& p : params_) {
            h = fnv1a64(p->name, h);
            h = fnv1a64(p->value.data(), size_t(p->value.numel()) * sizeof(S), h);
        }
        return h;
    }

  private:
    std::vector<std::unique_ptr<ParamT<S>>> params_;
    std::map<std::string, ParamT<S>*> by_name_;
};

// Per-forward-pass association between parameters and their graph nodes.
// train_mode=false binds everything as constants (inference; gradients may
// still flow to non-parameter inputs, which sampling guidance relies on).
template <class S>
struct TapeT {
    GraphT<S>* g = nullptr;
    bool train_mode = false;
    std::vector<std::pair<ParamT<S>*, int>> bound;

    VarT<S> bind(ParamT<S>& p) {
        VarT<S> v = g->input(p.value, train_mode && p.trainable);
        if (train_mode && p.trainable) bound.push_back({&p, v.id});
        return v;
    }
};

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <class S>
struct LinearT {
    ParamT<S>* w = nullptr;  // (out, in)
    ParamT<S>* b = nullptr;

    void init(ParamStoreT<S>& ps, const std::string& name, int64_t in, int64_t out, Rng& rng,
              double w_scale = 1.0) {
        w = &ps.create(name + ".w", {out, in});
        b = &ps.create(name + ".b", {out});
        S sd = S(w_scale / std::sqrt(double(in)));
        for (int64_t i = 0; i < w->value.numel(); ++i) w->value.data()[i] = S(rng.normal()) * sd;
    }

    // x: (..., in) -> (..., out)
    VarT<S> fwd(TapeT<S>& tp, VarT<S> x) const {
        auto shape = x.val().shape;
        int64_t in = shape.back();
        int64_t rows = x.val().numel() / in;
        VarT<S> x2 = ops::view(x, {rows, in});
        VarT<S> y = ops::add_rowbias(ops::matmul_nt(x2, tp.bind(*w)), tp.bind(*b));
        shape.back() = w->value.dim(0);
        return ops::view(y, shape);
    }
};

template <class S>
struct Conv2dT {
    ParamT<S>* w = nullptr;  // (out, in, k, k)
    ParamT<S>* b = nullptr;
    int stride = 1, pad = 1;

    void init(ParamStoreT<S>& ps, const std::string& name, int64_t in, int64_t out, int k,
              int stride_, int pad_, Rng& rng, double w_scale = 1.0) {
        stride = stride_;
        pad = pad_;
        w = &ps.create(name + ".w", {out, in, k, k});
        b = &ps.create(name + ".b", {out});
        S sd = S(w_scale * std::sqrt(2.0 / double(in * k * k)));
        for (int64_t i = 0; i < w->value.numel(); ++i) w->value.data()[i] = S(rng.normal()) * sd;
    }

    VarT<S> fwd(TapeT<S>& tp, VarT<S> x) const {
        return ops::conv2d(x, tp.bind(*w), tp.bind(*b), stride, pad);
    }
};

template <class S>
struct GroupNormT {
    ParamT<S>* gamma = nullptr;
    ParamT<S>* beta = nullptr;
    int groups = 8;

    void init(ParamStoreT<S>& ps, const std::string& name, int64_t channels, int groups_) {
        groups = groups_;
        gamma = &ps.create(name + ".g", {channels});
        beta = &ps.create(name + ".b", {channels});
        gamma->value.fill(S(1));
    }

    VarT<S> fwd(TapeT<S>& tp, VarT<S> x) const {
        return ops::group_norm(x, tp.bind(*gamma), tp.bind(*beta), groups);
    }
};

template <class S>
struct LayerNormT {
    ParamT<S>* gamma = nullptr;
    ParamT<S>* beta = nullptr;

    void init(ParamStoreT<S>& ps, const std::string& name, int64_t width) {
        gamma = &ps.create(name + ".g", {width});
        beta = &ps.create(name + ".b", {width});
        gamma->value.fill(S(1));
    }

    VarT<S> fwd(TapeT<S>& tp, VarT<S> x) const {
        return ops::layer_norm_rows(x, tp.bind(*gamma), tp.bind(*beta));
    }
};

// ---------------------------------------------------------------------------
// Adam with bias correction. Moments update in the parameter's scalar type.
// ---------------------------------------------------------------------------

template <class S>
struct AdamT {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;

    void step(GraphT<S>& g, const std::vector<std::pair<ParamT<S>*, int>>& bound) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, double(t));
        double bc2 = 1.0 - std::pow(beta2, double(t));
        for (auto& [p, id] : bound) {
            if (!g.has_grad(id)) continue;
            const TensorT<S>& gr = g.nodes[size_t(id)].grad;
            if (p->adam_m.numel() == 0) {
                p->adam_m = TensorT<S>::zeros(p->value.shape);
                p->adam_v = TensorT<S>::zeros(p->value.shape);
            }
            S* pm = p->adam_m.data();
            S* pv = p->adam_v.data();
            S* pw = p->value.data();
            const S* pg = gr.data();
            int64_t n = p->value.numel();
            for (int64_t i = 0; i < n; ++i) {
                double gi = double(pg[i]);
                if (!std::isfinite(gi)) throw NumericError("non-finite gradient in " + p->name);
                double m = beta1 * double(pm[i]) + (1 - beta1) * gi;
                double v = beta2 * double(pv[i]) + (1 - beta2) * gi * gi;
                pm[i] = S(m);
                pv[i] = S(v);
                pw[i] -= S(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
            }
        }
    }
};

// Exponential moving average of a parameter store, keyed by name.
template <class S>
class EmaT {
  public:
    void init_from(const ParamStoreT<S>& ps) {
        shadow_.clear();
        for (const auto& p : ps.all()) shadow_[p->name] = p->value.clone();
    }

    void update(const ParamStoreT<S>& ps, double decay) {
        for (const auto& p : ps.all()) {
            TensorT<S>& s = shadow_.at(p->name);
            const S* pv = p->value.data();
            S* sv = s.data();
            for (int64_t i = 0; i < s.numel(); ++i)
                sv[i] = S(decay * double(sv[i]) + (1.0 - decay) * double(pv[i]));
        }
    }

    // Swap shadow and live weights (call twice to restore).
    void swap_with(ParamStoreT<S>& ps) {
        for (const auto& p : ps.all()) std::swap(shadow_.at(p->name), p->value);
    }

    bool empty() const { return shadow_.empty(); }
    std::map<std::string, TensorT<S>>& tensors() { return shadow_; }
    const std::map<std::string, TensorT<S>>& tensors() const { return shadow_; }

  private:
    std::map<std::string, TensorT<S>> shadow_;
};

using ParamStore = ParamStoreT<float>;
using ParamStoreD = ParamStoreT<double>;
using Tape = TapeT<float>;
using TapeD = TapeT<double>;

}  // namespace storydiff
