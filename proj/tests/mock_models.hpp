#pragma once

#include <functional>

#include "storydiff/denoiser.hpp"

namespace storydiff {

// Scriptable noise predictor for sampler/denoiser algebra tests.
struct LambdaEps : IEpsModel {
    using Fn = std::function<Tensor(const Tensor&, const std::vector<int>&, const Tensor&,
                                    const std::vector<float>&)>;
    Fn fn;
    int calls = 0;

    explicit LambdaEps(Fn f) : fn(std::move(f)) {}

    Tensor predict(const Tensor& xt, const std::vector<int>& t, const Tensor& cond,
                   const std::vector<float>& cond_mask) override {
        ++calls;
        return fn(xt, t, cond, cond_mask);
    }
};

inline LambdaEps constant_eps(float value) {
    return LambdaEps([value](const Tensor& xt, const std::vector<int>&, const Tensor&,
                             const std::vector<float>&) {
        return Tensor::full(xt.shape, value);
    });
}

inline DenoiserConfig tiny_denoiser_config(int T = 20, bool no_attention = false) {
    DenoiserConfig c;
    c.unet.widths = {16, 32, 64};
    c.unet.d_cond = 32;
    c.unet.heads = 4;
    c.unet.res_blocks = 2;
    c.T = T;
    c.beta_start = 5e-3;
    c.beta_end = 0.25;
    c.no_attention = no_attention;
    c.init_seed = 99;
    return c;
}

}  // namespace storydiff
