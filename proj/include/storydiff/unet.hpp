#pragma once

#include "storydiff/nn.hpp"

namespace storydiff {

struct UNetConfig {
    int in_channels = 3;
    int image_size = 32;
    std::vector<int> widths = {64, 128, 256};  // one per resolution (32, 16, 8)
    int d_cond = 128;
    int res_blocks = 2;  // residual blocks per level on each path
    int heads = 4;
    int groups = 8;
    std::vector<int> attn_levels = {1, 2};  // cross-attention at 16x16 and 8x8

    int time_dim() const { return widths[0] * 4; }
    void validate() const;
};

// Conditional noise-prediction U-Net. Cross-attention blocks attend from
// spatial feature tokens to the condition token sequence; everything else is
// the standard resnet/strided-conv/nearest-upsample stack.
class UNet {
  public:
    void init(ParamStore& ps, const UNetConfig& cfg, Rng& rng);

    // x (B,C,H,W); t one step index per sample (1-based); cond (B,Tc,d_cond);
    // cond_mask B*Tc entries, 0 = padded token.
    VarT<float> fwd(Tape& tp, VarT<float> x, const std::vector<int>& t, int T, VarT<float> cond,
                    const std::vector<float>& cond_mask) const;

    const UNetConfig& config() const { return cfg_; }

  private:
    struct ResBlock {
        GroupNormT<float> gn1, gn2;
        Conv2dT<float> conv1, conv2;
        LinearT<float> temb;
        Conv2dT<float> skip;  // 1x1, only when channel count changes
        bool has_skip = false;

        void init(ParamStore& ps, const std::string& name, int cin, int cout, int time_dim,
                  int groups, Rng& rng);
        VarT<float> fwd(Tape& tp, VarT<float> x, VarT<float> temb_vec) const;
    };

    struct CrossAttn {
        GroupNormT<float> gn;
        LinearT<float> wq, wk, wv, wo;
        int heads = 4;

        void init(ParamStore& ps, const std::string& name, int channels, int d_cond, int heads,
                  Rng& rng);
        VarT<float> fwd(Tape& tp, VarT<float> x, VarT<float> cond,
                        const std::vector<float>& cond_mask) const;
    };

    UNetConfig cfg_;
    LinearT<float> time_mlp1_, time_mlp2_;
    Conv2dT<float> stem_;
    std::vector<std::vector<ResBlock>> enc_res_;
    std::vector<std::vector<CrossAttn>> enc_attn_;
    std::vector<Conv2dT<float>> down_;
    ResBlock
        mid_res1_, mid_res2_;
    CrossAttn mid_attn_;
    std::vector<std::vector<ResBlock>> dec_res_;
    std::vector<std::vector<CrossAttn>> dec_attn_;
    std::vector<Conv2dT<float>> up_;
    GroupNormT<float> head_gn_;
    Conv2dT<float> head_conv_;

    bool level_has_attn(int level) const;
};

// sinusoidal step features, (B, dim); t is 1-based, scaled relative to T
Tensor time_features(const std::vector<int>& t, int T, int dim);

}  // namespace storydiff
