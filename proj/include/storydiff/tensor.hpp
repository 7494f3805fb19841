#pragma once

#include <Eigen/Core>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>

#include "storydiff/common.hpp"

namespace storydiff {

// Dense row-major tensor. Storage is shared between views (reshape is free);
// code that mutates a tensor must own freshly allocated storage.
template <class S>
struct TensorT {
    std::vector<int64_t> shape;
    std::shared_ptr<std::vector<S>> storage;

    TensorT() = default;

    explicit TensorT(std::vector<int64_t> shp)
        : shape(std::move(shp)), storage(std::make_shared<std::vector<S>>(numel_of(shape), S(0))) {}

    static int64_t numel_of(const std::vector<int64_t>& shp) {
        int64_t n = 1;
        for (int64_t d : shp) n *= d;
        return n;
    }

    static TensorT zeros(std::vector<int64_t> shp) { return TensorT(std::move(shp)); }

    static TensorT full(std::vector<int64_t> shp, S v) {
        TensorT t(std::move(shp));
        std::fill(t.data(), t.data() + t.numel(), v);
        return t;
    }

    static TensorT from(std::vector<int64_t> shp, std::initializer_list<S> vals) {
        TensorT t(std::move(shp));
        int64_t i = 0;
        for (S v : vals) t.data()[i++] = v;
        return t;
    }

    static TensorT randn(std::vector<int64_t> shp, Rng& rng, S stddev = S(1)) {
        TensorT t(std::move(shp));
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = S(rng.normal()) * stddev;
        return t;
    }

    int64_t numel() const { return storage ? int64_t(storage->size()) : 0; }
    int ndim() const { return int(shape.size()); }
    int64_t dim(int i) const { return shape[size_t(i < 0 ? i + ndim() : i)]; }

    S* data() { return storage->data(); }
    const S* data() const { return storage->data(); }
    S& operator[](int64_t i) { return (*storage)[size_t(i)]; }
    S operator[](int64_t i) const { return (*storage)[size_t(i)]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    // Shares storage; element count must match.
    TensorT view(std::vector<int64_t> shp) const {
        if (numel_of(shp) != numel()) throw ValidationError("view: element count mismatch");
        TensorT t;
        t.shape = std::move(shp);
        t.storage = storage;
        return t;
    }

    TensorT clone() const {
        TensorT t;
        t.shape = shape;
        t.storage = std::make_shared<std::vector<S>>(*storage);
        return t;
    }

    template <class S2>
    TensorT<S2> cast() const {
        TensorT<S2> t(shape);
        for (int64_t i = 0; i < numel(); ++i) t.data()[i] = S2((*storage)[size_t(i)]);
        return t;
    }

    void fill(S v) { std::fill(data(), data() + numel(), v); }

    void add_(const TensorT& o) {
        for (int64_t i = 0; i < numel(); ++i) data()[i] += o.data()[i];
    }

    bool all_finite() const {
        for (int64_t i = 0; i < numel(); ++i)
            if (!std::isfinite(double((*storage)[size_t(i)]))) return false;
        return true;
    }

    S max_abs() const {
        S m = 0;
        for (int64_t i = 0; i < numel(); ++i) m = std::max(m, std::abs((*storage)[size_t(i)]));
        return m;
    }

    uint64_t byte_hash() const {
        return fnv1a64(data(), size_t(numel()) * sizeof(S));
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---------------------------------------------------------------------------
// GEMM on raw row-major buffers via Eigen. Large products split across the
// worker lane by output columns; every output element keeps a fixed
// k-accumulation order, so results do not depend on the split.
// ---------------------------------------------------------------------------

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

// C(m,n) = A(m,k) * B(k,n), optionally transposing inputs (dims given are of
// the operands as used, not as stored). accumulate adds into C.
template <class S>
void gemm(const S* A, const S* B, S* C, int64_t m, int64_t k, int64_t n, bool trans_a = false,
          bool trans_b = false, bool accumulate = false) {
    auto run = [&](int64_t c0, int64_t c1) {
        if (c1 <= c0) return;
        // Map operands; for transposed inputs map the stored layout and use .transpose().
        ECMap<S> a(A, trans_a ? k : m, trans_a ? m : k);
        ECMap<S> b(B, trans_b ? n : k, trans_b ? k : n);
        EMap<S> c(C, m, n);
        auto cb = c.middleCols(c0, c1 - c0);
        if (!trans_a && !trans_b) {
            if (accumulate) cb.noalias() += a * b.middleCols(c0, c1 - c0);
            else cb.noalias() = a * b.middleCols(c0, c1 - c0);
        } else if (trans_a && !trans_b) {
            if (accumulate) cb.noalias() += a.transpose() * b.middleCols(c0, c1 - c0);
            else cb.noalias() = a.transpose() * b.middleCols(c0, c1 - c0);
        } else if (!trans_a && trans_b) {
            if (accumulate) cb.noalias() += a * b.transpose().middleCols(c0, c1 - c0);
            else cb.noalias() = a * b.transpose().middleCols(c0, c1 - c0);
        } else {
            if (accumulate) cb.noalias() += a.transpose() * b.transpose().middleCols(c0, c1 - c0);
            else cb.noalias() = a.transpose() * b.transpose().middleCols(c0, c1 - c0);
        }
    };
    // Threading pays off only for sizeable products.
    if (m * k * n >= (int64_t(1) << 22) && n >= 8) {
        parallel_for(n, run, 4);
    } else {
        run(0, n);
    }
}

template <class S>
void gemm(const TensorT<S>& A, const TensorT<S>& B, TensorT<S>& C, int64_t m, int64_t k, int64_t n,
          bool trans_a = false, bool trans_b = false, bool accumulate = false) {
    gemm(A.data(), B.data(), C.data(), m, k, n, trans_a, trans_b, accumulate);
}

}  // namespace storydiff
