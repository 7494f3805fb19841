#include "storydiff/encoders.hpp"

namespace storydiff {

using namespace ops;

double text_similarity(const TextEmbedding& a, const TextEmbedding& b) {
    if (a.pooled.numel() == 0 || b.pooled.numel() == 0)
        throw ValidationError("text_similarity: missing pooled vector");
    if (a.pooled.numel() != b.pooled.numel())
        throw ValidationError("text_similarity: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.pooled.numel(); ++i) {
        dot += a.pooled[i] * b.pooled[i];
        na += a.pooled[i] * a.pooled[i];
        nb += b.pooled[i] * b.pooled[i];
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
}

Encoders::Encoders(int d_model, uint64_t init_seed) : d_model_(d_model) {
    Rng rng(init_seed);
    int64_t V = int64_t(vocabulary().size());
    tok_embed_ = &params_.create("text.tok_embed", {V, d_model});
    pos_embed_ = &params_.create("text.pos_embed", {kMaxTokens, d_model});
    for (int64_t i = 0; i < tok_embed_->value.numel(); ++i)
        tok_embed_->value.data()[i] = rng.normal() * 0.05;
    for (int64_t i = 0; i < pos_embed_->value.numel(); ++i)
        pos_embed_->value.data()[i] = rng.normal() * 0.05;

    blocks_.resize(2);
    for (size_t b = 0; b < blocks_.size(); ++b) {
        std::string p = "text.block" + std::to_string(b);
        auto& blk = blocks_[b];
        blk.ln1.init(params_, p + ".ln1", d_model);
        blk.ln2.init(params_, p + ".ln2", d_model);
        blk.wq.init(params_, p + ".wq", d_model, d_model, rng);
        blk.wk.init(params_, p + ".wk", d_model, d_model, rng);
        blk.wv.init(params_, p + ".wv", d_model, d_model, rng);
        blk.wo.init(params_, p + ".wo", d_model, d_model, rng, 0.5);
        blk.mlp1.init(params_, p + ".mlp1", d_model, 2 * d_model, rng);
        blk.mlp2.init(params_, p + ".mlp2", 2 * d_model, d_model, rng, 0.5);
    }
    final_ln_.init(params_, "text.final_ln", d_model);

    const int chans[5] = {3, 32, 64, 128, 128};
    conv_.resize(4);
    conv_gn_.resize(4);
    for (int i = 0; i < 4; ++i) {
        conv_[i].init(params_, "img.conv" + std::to_string(i), chans[i], chans[i + 1], 3, 2, 1,
                      rng);
        conv_gn_[i].init(params_, "img.gn" + std::to_string(i), chans[i + 1], 8);
    }
    img_proj_.init(params_, "img.proj", 128, d_model, rng);
    pair_proj_.init(params_, "pair.proj", 2 * d_model, d_model, rng);

    log_scale_ = &params_.create("logit_scale", {1});
    log_scale_->value.data()[0] = std::log(1.0 / 0.07);
}

double Encoders::logit_scale() const {
    return std::min(100.0, std::exp(log_scale_->value[0]));
}

VarT<double> Encoders::text_tower_fwd(TapeT<double>& tp, const std::vector<std::vector<int>>& batch,
                                      std::vector<double>* token_mask_out) const {
    auto* g = tp.g;
    int64_t B = int64_t(batch.size());
    std::vector<int> flat_ids(size_t(B) * kMaxTokens, 0);
    std::vector<double> mask(size_t(B) * kMaxTokens, 0.0);
    for (int64_t b = 0; b < B; ++b) {
        const auto& ids = batch[size_t(b)];
        if (ids.empty()) throw ValidationError("encode_text: empty token sequence");
        int64_t n = std::min<int64_t>(int64_t(ids.size()), kMaxTokens);
        for (int64_t t = 0; t < n; ++t) {
            int id = ids[size_t(t)];
            if (id < 0 || id >= int(vocabulary().size()))
                throw ValidationError("encode_text: token id out of vocabulary");
            flat_ids[size_t(b * kMaxTokens + t)] = id;
            mask[size_t(b * kMaxTokens + t)] = 1.0;
        }
    }
    if (token_mask_out) *token_mask_out = mask;

    auto* self = const_cast<Encoders*>(this);
    VarT<double> x = embedding(tp.bind(*self->tok_embed_), flat_ids);   // (B*32, d)
    VarT<double> pos = broadcast0(tp.bind(*self->pos_embed_), B);       // (B,32,d)
    x = add(view(x, {B, kMaxTokens, int64_t(d_model_)}), pos);

    for (const auto& blk : blocks_) {
        VarT<double> h = blk.ln1.fwd(tp, x);
        VarT<double> q = blk.wq.fwd(tp, h);
        VarT<double> k = blk.wk.fwd(tp, h);
        VarT<double> v = blk.wv.fwd(tp, h);
        VarT<double> att = mha(q, k, v, 4, &mask);
        x = add(x, blk.wo.fwd(tp, att));
        VarT<double> m = blk.ln2.fwd(tp, x);
        m = blk.mlp2.fwd(tp, silu(blk.mlp1.fwd(tp, m)));
        x = add(x, m);
    }
    return final_ln_.fwd(tp, x);  // (B,32,d)
}

VarT<double> Encoders::pooled_from_tokens(TapeT<double>& tp, VarT<double> tokens,
                                          const std::vector<double>& token_mask) const {
    return l2norm_rows(masked_mean_rows(tokens, token_mask));
}

VarT<double> Encoders::image_tower_fwd(TapeT<double>& tp, VarT<double> x) const {
    for (size_t i = 0; i < conv_.size(); ++i)
        x = silu(conv_gn_[i].fwd(tp, conv_[i].fwd(tp, x)));
    return l2norm_rows(img_proj_.fwd(tp, global_mean_hw(x)));
}

VarT<double> Encoders::pair_fuse(TapeT<double>& tp, VarT<double> text_pooled,
                                 VarT<double> image_emb) const {
    VarT<double> cat = concat<double>({text_pooled, image_emb}, 1);
    return l2norm_rows(pair_proj_.fwd(tp, cat));
}

TextEmbedding Encoders::encode_text(const std::vector<int>& token_ids) const {
    GraphT<double> g;
    TapeT<double> tp{&g, false};
    std::vector<double> mask;
    VarT<double> toks = text_tower_fwd(tp, {token_ids}, &mask);
    VarT<double> pooled = pooled_from_tokens(tp, toks, mask);
    TextEmbedding e;
    e.tokens = toks.val().view({kMaxTokens, int64_t(d_model_)}).clone();
    e.pooled = pooled.val().view({int64_t(d_model_)}).clone();
    e.n_tokens = int(std::min<size_t>(token_ids.size(), kMaxTokens));
    return e;
}

TextEmbedding Encoders::encode_text(const std::string& prompt) const {
    return encode_text(tokenize(prompt));
}

PairEmbedding Encoders::encode_pair(const std::vector<int>& token_ids,
                                    const ImageU8& image) const {
    GraphT<double> g;
    TapeT<double> tp{&g, false};
    std::vector<double> mask;
    VarT<double> toks = text_tower_fwd(tp, {token_ids}, &mask);
    VarT<double> pooled = pooled_from_tokens(tp, toks, mask);
    TensorD img = image_to_tensor<double>(image);
    VarT<double> iv = image_tower_fwd(tp, g.input(img.view({1, 3, img.dim(1), img.dim(2)}), false));
    VarT<double> fused = pair_fuse(tp, pooled, iv);
    PairEmbedding p;
    p.vector = fused.val().view({int64_t(d_model_)}).clone();
    return p;
}

PairEmbedding Encoders::encode_pair(const std::string& prompt, const ImageU8& image) const {
    return encode_pair(tokenize(prompt), image);
}

TensorD Encoders::image_embedding(const TensorD& chw) const {
    GraphT<double> g;
    TapeT<double> tp{&g, false};
    VarT<double> iv =
        image_tower_fwd(tp, g.input(chw.view({1, chw.dim(0), chw.dim(1), chw.dim(2)}), false));
    return iv.val().view({int64_t(d_model_)}).clone();
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

double contrastive_step(Encoders& enc, AdamT<double>& opt,
                        const std::vector<std::vector<int>>& tokens,
                        const std::vector<TensorD>& images) {
    if (tokens.size() != images.size() || tokens.empty())
        throw ValidationError("contrastive_step: bad batch");
    int64_t B = int64_t(tokens.size());
    int64_t d = enc.d_model();

    GraphT<double> g;
    TapeT<double> tp{&g, true};

    TensorD imgs({B, 3, images[0].dim(1), images[0].dim(2)});
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(imgs.data() + b * images[0].numel(), images[size_t(b)].data(),
                    size_t(images[0].numel()) * sizeof(double));

    std::vector<double> mask;
    VarT<double> toks = enc.text_tower_fwd(tp, tokens, &mask);
    VarT<double> tpool = enc.pooled_from_tokens(tp, toks, mask);            // (B,d)
    VarT<double> ivec = enc.image_tower_fwd(tp, g.input(imgs, false));      // (B,d)
    VarT<double> pvec = enc.pair_fuse(tp, tpool, ivec);                     // (B,d)

    double s = enc.logit_scale();
    std::vector<int> diag(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) diag[size_t(i)] = int(i);

    // symmetric InfoNCE text<->image plus alignment of the fused pair vector
    // with both of its halves
    VarT<double> logits_ti = scale(matmul_nt(tpool, ivec), s);
    VarT<double> logits_it = scale(matmul_nt(ivec, tpool), s);
    VarT<double> logits_pi = scale(matmul_nt(pvec, ivec), s);
    VarT<double> logits_pt = scale(matmul_nt(pvec, tpool), s);
    VarT<double> loss = add(
        scale(add(cross_entropy_rows(logits_ti, diag), cross_entropy_rows(logits_it, diag)), 0.5),
        scale(add(cross_entropy_rows(logits_pi, diag), cross_entropy_rows(logits_pt, diag)),
              0.25));

    double lv = loss.val()[0];
    if (!std::isfinite(lv)) throw NumericError("contrastive loss diverged (NaN/Inf)");
    g.backward(loss);
    opt.step(g, tp.bound);
    return lv;
}

namespace {

struct FlatFrames {
    std::vector<const Frame*> frames;
    explicit FlatFrames(const std::vector<StoryRecord>& stories) {
        for (const auto& st : stories)
            for (const auto& fr : st.frames) frames.push_back(&fr);
    }
};

}  // namespace

double retrieval_top1(const Encoders& enc, const std::vector<StoryRecord>& stories, int batch,
                      uint64_t seed, int n_batches) {
    FlatFrames flat(stories);
    if (flat.frames.size() < size_t(batch)) throw ValidationError("retrieval: not enough frames");
    Rng rng(seed);
    int hits = 0, total = 0;
    for (int nb = 0; nb < n_batches; ++nb) {
        GraphT<double> g;
        TapeT<double> tp{&g, false};
        std::vector<std::vector<int>> tokens;
        TensorD imgs({batch, 3, kFrameSize, kFrameSize});
        for (int b = 0; b < batch; ++b) {
            const Frame* fr = flat.frames[rng.below(flat.frames.size())];
            tokens.push_back(tokenize(fr->prompt));
            TensorD t = image_to_tensor<double>(fr->image);
            std::memcpy(imgs.data() + int64_t(b) * t.numel(), t.data(),
                        size_t(t.numel()) * sizeof(double));
        }
        std::vector<double> mask;
        VarT<double> toks = enc.text_tower_fwd(tp, tokens, &mask);
        VarT<double> tpool = enc.pooled_from_tokens(tp, toks, mask);
        VarT<double> ivec = enc.image_tower_fwd(tp, g.input(imgs, false));
        VarT<double> logits = matmul_nt(tpool, ivec);
        for (int i = 0; i < batch; ++i) {
            int best = 0;
            double bv = -1e18;
            for (int j = 0; j < batch; ++j) {
                double v = logits.val()[int64_t(i) * batch + j];
                if (v > bv) {
                    bv = v;
                    best = j;
                }
            }
            hits += best == i;
            ++total;
        }
    }
    return double(hits) / double(total);
}

ContrastiveStats train_contrastive(Encoders& enc, const std::vector<StoryRecord>& train_stories,
                                   const std::vector<StoryRecord>& valid_stories,
                                   const ContrastiveConfig& cfg) {
    FlatFrames flat(train_stories);
    if (flat.frames.empty()) throw ValidationError("train_contrastive: empty train split");
    Rng rng(cfg.seed);
    AdamT<double> opt;
    opt.lr = cfg.lr;

    ContrastiveStats stats;
    for (int it = 0; it < cfg.iters; ++it) {
        std::vector<std::vector<int>> tokens;
        std::vector<TensorD> images;
        for (int b = 0; b < cfg.batch; ++b) {
            const Frame* fr = flat.frames[rng.below(flat.frames.size())];
            tokens.push_back(tokenize(fr->prompt));
            images.push_back(image_to_tensor<double>(fr->image));
        }
        stats.final_loss = contrastive_step(enc, opt, tokens, images);
        ++stats.iters;
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[contrastive] iter %d loss %.4f\n", it + 1, stats.final_loss);
    }
    stats.val_retrieval_top1 =
        retrieval_top1(enc, valid_stories.empty() ? train_stories : valid_stories,
                       std::min<int>(cfg.batch, 64), cfg.seed + 1);
    return stats;
}

}  // namespace storydiff
