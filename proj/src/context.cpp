#include "storydiff/context.hpp"

namespace storydiff {

using namespace ops;

AnchorSelection select_anchor(const TextEmbedding& v, const std::vector<HistoryEntry>& history,
                              double tau) {
    if (tau < -1.0 || tau > 1.0) throw ValidationError("select_anchor: tau outside [-1, 1]");
    AnchorSelection sel;
    sel.threshold = tau;
    int best_frame = -1;
    for (size_t i = 0; i < history.size(); ++i) {
        double s = text_similarity(v, history[i].prompt_embedding);
        // ties go to the most recent frame
        if (s > sel.best_score ||
            (s == sel.best_score && history[i].frame_index > best_frame)) {
            sel.best_score = s;
            sel.selected_index = int(i);
            best_frame = history[i].frame_index;
        }
    }
    if (history.empty() || sel.best_score < tau) sel.selected_index = -1;
    return sel;
}

void AdaptiveContext::init(ParamStore& ps, int d_model, int heads, bool residual, Rng& rng) {
    d_model_ = d_model;
    heads_ = heads;
    residual_ = residual;
    if (d_model % heads != 0) throw ValidationError("context: d_model % heads != 0");
    wq_.init(ps, "context.wq", d_model, d_model, rng);
    wk_.init(ps, "context.wk", d_model, d_model, rng);
    wv_.init(ps, "context.wv", d_model, d_model, rng);
    wo_.init(ps, "context.wo", d_model, d_model, rng, 0.5);
    null_tokens_ = &ps.create("context.null", {kMaxTokens, d_model});
    for (int64_t i = 0; i < null_tokens_->value.numel(); ++i)
        null_tokens_->value.data()[i] = float(rng.normal()) * 0.05f;
}

VarT<float> AdaptiveContext::attend_batch(Tape& tp, VarT<float> v_pooled, VarT<float> h_pad,
                                          const std::vector<float>& hist_mask,
                                          std::shared_ptr<std::vector<float>>* probs_out) const {
    if (no_attention) return h_pad;
    int64_t B = h_pad.val().dim(0), Hmax = h_pad.val().dim(1);
    auto* self = const_cast<AdaptiveContext*>(this);

    VarT<float> q = view(self->wq_.fwd(tp, v_pooled), {B, 1, int64_t(d_model_)});
    VarT<float> k = self->wk_.fwd(tp, h_pad);
    VarT<float> v = self->wv_.fwd(tp, h_pad);
    VarT<float> att = mha(q, k, v, heads_, &hist_mask, probs_out);  // (B,1,d)
    VarT<float> a = self->wo_.fwd(tp, att);

    std::vector<VarT<float>> reps(size_t(Hmax), a);
    VarT<float> a_tiled = Hmax == 1 ? a : concat(reps, 1);  // (B,Hmax,d)
    return residual_ ? add(h_pad, a_tiled) : a_tiled;
}

std::vector<Tensor> AdaptiveContext::attend_history(
    const TextEmbedding& v, const std::vector<HistoryEntry>& history,
    std::shared_ptr<std::vector<float>>* probs_out) const {
    if (history.empty()) return {};
    int64_t H = int64_t(history.size());
    GraphT<float> g;
    Tape tp{&g, false};

    Tensor pooled({1, int64_t(d_model_)});
    if (v.pooled.numel() != d_model_) throw ValidationError("attend_history: d_model mismatch");
    for (int64_t i = 0; i < d_model_; ++i) pooled.data()[i] = float(v.pooled[i]);

    Tensor h_pad({1, H, int64_t(d_model_)});
    for (int64_t j = 0; j < H; ++j) {
        const TensorD& hj = history[size_t(j)].pair_embedding.vector;
        if (hj.numel() != d_model_) throw ValidationError("attend_history: embedding width");
        for (int64_t i = 0; i < d_model_; ++i)
            h_pad.data()[j * d_model_ + i] = float(hj[i]);
    }
    std::vector<float> mask(size_t(H), 1.0f);
    VarT<float> out =
        attend_batch(tp, g.input(pooled, false), g.input(h_pad, false), mask, probs_out);

    std::vector<Tensor> updated;
    for (int64_t j = 0; j < H; ++j) {
        Tensor u({int64_t(d_model_)});
        std::memcpy(u.data(), out.val().data() + j * d_model_, size_t(d_model_) * sizeof(float));
        updated.push_back(std::move(u));
    }
    return updated;
}

ConditionBundle AdaptiveContext::build_condition(const TextEmbedding& v,
                                                 const std::vector<Tensor>& updated) const {
    ConditionBundle b;
    b.current_tokens = to_float_tokens(v);
    b.updated_history = updated;
    b.condition = Tensor({kMaxTokens + int64_t(updated.size()), int64_t(d_model_)});
    std::memcpy(b.condition.data(), b.current_tokens.data(),
                size_t(kMaxTokens * d_model_) * sizeof(float));
    for (size_t j = 0; j < updated.size(); ++j) {
        if (updated[j].numel() != d_model_)
            throw ValidationError("build_condition: history vector width mismatch");
        std::memcpy(b.condition.data() + (kMaxTokens + int64_t(j)) * d_model_, updated[j].data(),
                    size_t(d_model_) * sizeof(float));
    }
    return b;
}

ConditionBundle AdaptiveContext::null_condition() const {
    ConditionBundle b;
    b.null_flag = true;
    b.current_tokens = null_tokens_->value.clone();
    b.condition = null_tokens_->value.clone();
    return b;
}

Tensor to_float_tokens(const TextEmbedding& e) {
    Tensor t({e.tokens.dim(0), e.tokens.dim(1)});
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = float(e.tokens[i]);
    return t;
}

Tensor to_float_vector(const TensorD& v) {
    Tensor t({v.numel()});
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = float(v[i]);
    return t;
}

}  // namespace storydiff
