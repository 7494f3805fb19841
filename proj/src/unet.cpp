#include "storydiff/unet.hpp"

namespace storydiff {

using namespace ops;

void UNetConfig::validate() const {
    if (widths.size() < 2) throw ValidationError("unet: need at least 2 resolutions");
    for (int w : widths)
        if (w % groups != 0) throw ValidationError("unet: widths must be divisible by groups");
    if (res_blocks < 1) throw ValidationError("unet: res_blocks must be >= 1");
    int levels = int(widths.size());
    int min_size = image_size >> (levels - 1);
    if (min_size < 4) throw ValidationError("unet: too many levels for the image size");
    for (int l : attn_levels)
        if (l < 0 || l >= levels) throw ValidationError("unet: attn level out of range");
}

Tensor time_features(const std::vector<int>& t, int T, int dim) {
    int64_t B = int64_t(t.size());
    Tensor out({B, int64_t(dim)});
    int half = dim / 2;
    for (int64_t b = 0; b < B; ++b) {
        double tv = double(t[size_t(b)]) / double(T) * 1000.0;  // schedule-length invariant scale
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
            out.data()[b * dim + i] = float(std::sin(tv * freq));
            out.data()[b * dim + half + i] = float(std::cos(tv * freq));
        }
    }
    return out;
}

void UNet::ResBlock::init(ParamStore& ps, const std::string& name, int cin, int cout, int time_dim,
                          int groups, Rng& rng) {
    gn1.init(ps, name + ".gn1", cin, groups);
    conv1.init(ps, name + ".conv1", cin, cout, 3, 1, 1, rng);
    temb.init(ps, name + ".temb", time_dim, cout, rng);
    gn2.init(ps, name + ".gn2", cout, groups);
    conv2.init(ps, name + ".conv2", cout, cout, 3, 1, 1, rng, 0.5);
    has_skip = cin != cout;
    if (has_skip) skip.init(ps, name + ".skip", cin, cout, 1, 1, 0, rng);
}

VarT<float> UNet::ResBlock::fwd(Tape& tp, VarT<float> x, VarT<float> temb_vec) const {
    auto* self = const_cast<ResBlock*>(this);
    VarT<float> h = self->conv1.fwd(tp, silu(self->gn1.fwd(tp, x)));
    VarT<float> tv = self->temb.fwd(tp, temb_vec);  // (B, cout)
    h = add_channel_vec(h, tv);
    h = self->conv2.fwd(tp, silu(self->gn2.fwd(tp, h)));
    VarT<float> sk = has_skip ? self->skip.fwd(tp, x) : x;
    return add(sk, h);
}

void UNet::CrossAttn::init(ParamStore& ps, const std::string& name, int channels, int d_cond,
                           int heads_, Rng& rng) {
    heads = heads_;
    gn.init(ps, name + ".gn", channels, 8);
    wq.init(ps, name + ".wq", channels, channels, rng);
    wk.init(ps, name + ".wk", d_cond, channels, rng);
    wv.init(ps, name + ".wv", d_cond, channels, rng);
    wo.init(ps, name + ".wo", channels, channels, rng, 0.5);
}

VarT<float> UNet::CrossAttn::fwd(Tape& tp, VarT<float> x, VarT<float> cond,
                                 const std::vector<float>& cond_mask) const {
    auto* self = const_cast<CrossAttn*>(this);
    int64_t B = x.val().dim(0), C = x.val().dim(1), H = x.val().dim(2), W = x.val().dim(3);
    VarT<float> tok = transpose_12(view(self->gn.fwd(tp, x), {B, C, H * W}));  // (B,HW,C)
    VarT<float> q = self->wq.fwd(tp, tok);
    VarT<float> k = self->wk.fwd(tp, cond);
    VarT<float> v = self->wv.fwd(tp, cond);
    VarT<float> att = self->wo.fwd(tp, mha(q, k, v, heads, &cond_mask));
    return add(x, view(transpose_12(att), {B, C, H, W}));
}

bool UNet::level_has_attn(int level) const {
    for (int l : cfg_.attn_levels)
        if (l == level) return true;
    return false;
}

void UNet::init(ParamStore& ps, const UNetConfig& cfg, Rng& rng) {
    cfg.validate();
    cfg_ = cfg;
    int levels = int(cfg.widths.size());
    int td = cfg.time_dim();

    time_mlp1_.init(ps, "unet.time1", cfg.widths[0], td, rng);
    time_mlp2_.init(ps, "unet.time2", td, td, rng);
    stem_.init(ps, "unet.stem", cfg.in_channels, cfg.widths[0], 3, 1, 1, rng);

    enc_res_.resize(size_t(levels));
    enc_attn_.resize(size_t(levels));
    dec_res_.resize(size_t(levels));
    dec_attn_.resize(size_t(levels));
    for (int l = 0; l < levels; ++l) {
        int w = cfg.widths[size_t(l)];
        for (int r = 0; r < cfg.res_blocks; ++r) {
            std::string base = "unet.enc" + std::to_string(l) + "_" + std::to_string(r);
            enc_res_[size_t(l)].emplace_back();
            enc_res_[size_t(l)].back().init(ps, base, w, w, td, cfg.groups, rng);
            if (level_has_attn(l)) {
                enc_attn_[size_t(l)].emplace_back();
                enc_attn_[size_t(l)].back().init(ps, base + ".attn", w, cfg.d_cond, cfg.heads,
                                                 rng);
            }
        }
        for (int r = 0; r < cfg.res_blocks; ++r) {
            std::string base = "unet.dec" + std::to_string(l) + "_" + std::to_string(r);
            dec_res_[size_t(l)].emplace_back();
            dec_res_[size_t(l)].back().init(ps, base, 2 * w, w, td, cfg.groups, rng);
            if (level_has_attn(l)) {
                dec_attn_[size_t(l)].emplace_back();
                dec_attn_[size_t(l)].back().init(ps, base + ".attn", w, cfg.d_cond, cfg.heads,
                                                 rng);
            }
        }
        if (l + 1 < levels) {
            down_.emplace_back();
            down_.back().init(ps, "unet.down" + std::to_string(l), w, cfg.widths[size_t(l) + 1], 3,
                              2, 1, rng);
            up_.emplace_back();
            up_.back().init(ps, "unet.up" + std::to_string(l), cfg.widths[size_t(l) + 1], w, 3, 1,
                            1, rng);
        }
    }
    int wtop = cfg.widths.back();
    mid_res1_.init(ps, "unet.mid1", wtop, wtop, td, cfg.groups, rng);
    mid_attn_.init(ps, "unet.mid_attn", wtop, cfg.d_cond, cfg.heads, rng);
    mid_res2_.init(ps, "unet.mid2", wtop, wtop, td, cfg.groups, rng);
    head_gn_.init(ps, "unet.head_gn", cfg.widths[0], cfg.groups);
    // small (but nonzero) output init keeps the initial prediction near zero
    // without creating dead gradient paths
    head_conv_.init(ps, "unet.head", cfg.widths[0], cfg.in_channels, 3, 1, 1, rng, 0.05);
}

VarT<float> UNet::fwd(Tape& tp, VarT<float> x, const std::vector<int>& t, int T, VarT<float> cond,
                      const std::vector<float>& cond_mask) const {
    auto* self = const_cast<UNet*>(this);
    int64_t B = x.val().dim(0);
    if (int64_t(t.size()) != B) throw ValidationError("unet: t count != batch");
    if (cond.val().ndim() != 3 || cond.val().dim(0) != B)
        throw ValidationError("unet: condition batch mismatch");
    if (cond.val().dim(2) != cfg_.d_cond)
        throw ValidationError("unet: condition width mismatch with model d_cond");
    if (cond_mask.size() != size_t(B * cond.val().dim(1)))
        throw ValidationError("unet: condition mask size");

    auto* g = tp.g;
    VarT<float> tf = g->input(time_features(t, T, cfg_.widths[0]), false);
    VarT<float> temb = self->time_mlp2_.fwd(tp, silu(self->time_mlp1_.fwd(tp, tf)));

    int levels = int(cfg_.widths.size());
    VarT<float> h = self->stem_.fwd(tp, x);
    std::vector<std::vector<VarT<float>>> skips(static_cast<size_t>(levels));

    for (int l = 0; l < levels; ++l) {
        for (int r = 0; r < cfg_.res_blocks; ++r) {
            h = enc_res_[size_t(l)][size_t(r)].fwd(tp, h, temb);
            if (level_has_attn(l)) h = enc_attn_[size_t(l)][size_t(r)].fwd(tp, h, cond, cond_mask);
            skips[size_t(l)].push_back(h);
        }
        if (l + 1 < levels) h = self->down_[size_t(l)].fwd(tp, h);
    }

    h = mid_res1_.fwd(tp, h, temb);
    h = mid_attn_.fwd(tp, h, cond, cond_mask);
    h = mid_res2_.fwd(tp, h, temb);

    for (int l = levels - 1; l >= 0; --l) {
        for (int r = 0; r < cfg_.res_blocks; ++r) {
            VarT<float> skip = skips[size_t(l)].back();
            skips[size_t(l)].pop_back();
            h = concat<float>({h, skip}, 1);
            h = dec_res_[size_t(l)][size_t(r)].fwd(tp, h, temb);
            if (level_has_attn(l)) h = dec_attn_[size_t(l)][size_t(r)].fwd(tp, h, cond, cond_mask);
        }
        if (l > 0) h = self->up_[size_t(l) - 1].fwd(tp, upsample_nearest2(h));
    }

    return self->head_conv_.fwd(tp, silu(self->head_gn_.fwd(tp, h)));
}

}  // namespace storydiff
