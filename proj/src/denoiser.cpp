#include "storydiff/denoiser.hpp"

namespace storydiff {

using namespace ops;

void DenoiserModel::init(const DenoiserConfig& c) {
    cfg = c;
    schedule = build_schedule(c.T, c.beta_start, c.beta_end);
    Rng rng(c.init_seed);
    unet.init(params, c.unet, rng);
    context.init(params, c.unet.d_cond, c.context_heads, c.context_residual, rng);
    context.no_attention = c.no_attention;
}

Tensor DenoiserModel::predict(const Tensor& xt, const std::vector<int>& t, const Tensor& cond,
                              const std::vector<float>& cond_mask) {
    GraphT<float> g;
    Tape tp{&g, false};
    VarT<float> out = unet.fwd(tp, g.input(xt, false), t, cfg.T, g.input(cond, false), cond_mask);
    if (!out.val().all_finite()) throw NumericError("denoiser produced non-finite prediction");
    return out.val().clone();
}

EncodedStories precompute_features(const std::vector<StoryRecord>& stories, const Encoders& enc) {
    EncodedStories out;
    out.d = enc.d_model();
    out.stories.resize(stories.size());
    parallel_for(int64_t(stories.size()), [&](int64_t s0, int64_t s1) {
        for (int64_t s = s0; s < s1; ++s) {
            for (const auto& fr : stories[size_t(s)].frames) {
                FrameFeatures ff;
                auto toks = tokenize(fr.prompt);
                TextEmbedding te = enc.encode_text(toks);
                ff.v_tokens = to_float_tokens(te);
                ff.v_pooled = to_float_vector(te.pooled);
                ff.h_vec = to_float_vector(enc.encode_pair(toks, fr.image).vector);
                ff.image = fr.image;
                out.stories[size_t(s)].push_back(std::move(ff));
            }
        }
    });
    return out;
}

DenoiserBatch assemble_batch(const EncodedStories& data, const NoiseSchedule& sched, int batch,
                             double dropout_p, Rng& rng) {
    if (data.stories.empty()) throw ValidationError("assemble_batch: empty dataset");
    int64_t B = batch;
    int d = data.d;

    // pick (story, frame) pairs
    std::vector<std::pair<int, int>> picks;
    for (int64_t b = 0; b < B; ++b) {
        int s = int(rng.below(data.stories.size()));
        int f = int(rng.below(data.stories[size_t(s)].size()));
        picks.push_back({s, f});
    }
    int Hmax = 0;
    for (auto [s, f] : picks) Hmax = std::max(Hmax, f);

    DenoiserBatch b;
    b.cond.Hmax = Hmax;
    b.cond.v_tokens = Tensor({B, kMaxTokens, d});
    b.cond.v_pooled = Tensor({B, d});
    b.cond.h_pad = Tensor({B, Hmax, d});  // zero rows when no sample has history
    b.cond.hist_mask.assign(size_t(B * Hmax), 0.0f);
    b.cond.null_flags.assign(size_t(B), 0.0f);

    const int64_t hw = int64_t(kFrameSize) * kFrameSize;
    b.x0 = Tensor({B, 3, kFrameSize, kFrameSize});
    b.eps = Tensor({B, 3, kFrameSize, kFrameSize});
    b.t.resize(size_t(B));

    for (int64_t i = 0; i < B; ++i) {
        auto [s, f] = picks[size_t(i)];
        const auto& story = data.stories[size_t(s)];
        const FrameFeatures& ff = story[size_t(f)];

        std::memcpy(b.cond.v_tokens.data() + i * kMaxTokens * d, ff.v_tokens.data(),
                    size_t(kMaxTokens * d) * sizeof(float));
        std::memcpy(b.cond.v_pooled.data() + i * d, ff.v_pooled.data(), size_t(d) * sizeof(float));
        for (int j = 0; j < f; ++j) {  // teacher forcing: ground-truth history
            std::memcpy(b.cond.h_pad.data() + (i * Hmax + j) * d, story[size_t(j)].h_vec.data(),
                        size_t(d) * sizeof(float));
            b.cond.hist_mask[size_t(i * Hmax + j)] = 1.0f;
        }
        if (rng.uniform() < dropout_p) b.cond.null_flags[size_t(i)] = 1.0f;

        b.t[size_t(i)] = 1 + int(rng.below(uint64_t(sched.T)));
        Tensor x0 = image_to_tensor<float>(ff.image);
        std::memcpy(b.x0.data() + i * 3 * hw, x0.data(), size_t(3 * hw) * sizeof(float));
        for (int64_t k = 0; k < 3 * hw; ++k) b.eps.data()[i * 3 * hw + k] = float(rng.normal());
    }

    // closed-form corruption
    b.xt = Tensor({B, 3, kFrameSize, kFrameSize});
    for (int64_t i = 0; i < B; ++i) {
        float c0 = float(std::sqrt(sched.a_bar(b.t[size_t(i)])));
        float c1 = float(std::sqrt(1.0 - sched.a_bar(b.t[size_t(i)])));
        for (int64_t k = 0; k < 3 * hw; ++k)
            b.xt.data()[i * 3 * hw + k] =
                c0 * b.x0.data()[i * 3 * hw + k] + c1 * b.eps.data()[i * 3 * hw + k];
    }
    return b;
}

VarT<float> condition_graph(Tape& tp, const AdaptiveContext& ctx, const ConditioningBatch& cb,
                            std::vector<float>* mask_out) {
    auto* g = tp.g;
    int64_t B = cb.v_tokens.dim(0);
    int64_t d = cb.v_tokens.dim(2);
    auto* mctx = const_cast<AdaptiveContext*>(&ctx);

    std::vector<float> keep(static_cast<size_t>(B)), drop(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
        drop[size_t(i)] = cb.null_flags[size_t(i)];
        keep[size_t(i)] = 1.0f - drop[size_t(i)];
    }

    VarT<float> v_clean = scale_slices(g->input(cb.v_tokens, false), keep);
    VarT<float> v_null = scale_slices(broadcast0(tp.bind(mctx->null_tokens()), B), drop);
    VarT<float> v_part = add(v_clean, v_null);

    std::vector<float> mask(size_t(B * (kMaxTokens + cb.Hmax)), 1.0f);
    if (cb.Hmax == 0) {
        if (mask_out) *mask_out = mask;
        return v_part;
    }

    // null-conditioned samples additionally mask out their history tokens
    std::vector<float> hist_eff = cb.hist_mask;
    for (int64_t i = 0; i < B; ++i)
        for (int j = 0; j < cb.Hmax; ++j)
            hist_eff[size_t(i * cb.Hmax + j)] *= keep[size_t(i)];

    VarT<float> h_hat = ctx.attend_batch(tp, g->input(cb.v_pooled, false),
                                         g->input(cb.h_pad, false), hist_eff);
    for (int64_t i = 0; i < B; ++i)
        for (int j = 0; j < cb.Hmax; ++j)
            mask[size_t(i * (kMaxTokens + cb.Hmax) + kMaxTokens + j)] =
                hist_eff[size_t(i * cb.Hmax + j)];
    if (mask_out) *mask_out = mask;
    return concat<float>({v_part, h_hat}, 1);
}

Tensor condition_values(const AdaptiveContext& ctx, const ConditioningBatch& cb,
                        std::vector<float>* mask_out) {
    GraphT<float> g;
    Tape tp{&g, false};
    return condition_graph(tp, ctx, cb, mask_out).val().clone();
}

double denoiser_training_step(DenoiserModel& m, const DenoiserBatch& b, AdamT<float>& opt,
                              uint64_t batch_seed) {
    GraphT<float> g;
    Tape tp{&g, true};
    std::vector<float> cond_mask;
    VarT<float> cond = condition_graph(tp, m.context, b.cond, &cond_mask);
    VarT<float> eps_hat =
        m.unet.fwd(tp, g.input(b.xt, false), b.t, m.cfg.T, cond, cond_mask);
    VarT<float> loss = mse(eps_hat, g.input(b.eps, false));
    double lv = loss.val()[0];
    if (!std::isfinite(lv))
        throw NumericError("denoiser loss is non-finite at batch seed " +
                           std::to_string(batch_seed));
    g.backward(loss);
    opt.step(g, tp.bound);
    return lv;
}

double denoiser_eval_loss(IEpsModel& m, const DenoiserBatch& b, const AdaptiveContext& ctx) {
    std::vector<float> cond_mask;
    Tensor cond = condition_values(ctx, b.cond, &cond_mask);
    Tensor pred = m.predict(b.xt, b.t, cond, cond_mask);
    double acc = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        double d = double(pred[i]) - double(b.eps[i]);
        acc += d * d;
    }
    return acc / double(pred.numel());
}

DenoiserTrainStats train_denoiser(DenoiserModel& m, const EncodedStories& data,
                                  const DenoiserTrainConfig& cfg) {
    DenoiserTrainStats stats;
    if (cfg.epochs < 0) throw ValidationError("train_denoiser: negative epochs");
    int64_t frames = data.frame_count();
    if (frames == 0) throw ValidationError("train_denoiser: empty dataset");
    int64_t steps_per_epoch = (frames + cfg.batch - 1) / cfg.batch;
    int64_t total = steps_per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) total = std::min<int64_t>(total, cfg.max_steps);
    if (total == 0) return stats;

    AdamT<float> opt;
    opt.lr = cfg.lr;
    m.ema.init_from(m.params);
    Rng root(cfg.seed);

    for (int64_t step = 0; step < total; ++step) {
        uint64_t batch_seed = root.next_u64();
        Rng brng(batch_seed);
        DenoiserBatch b = assemble_batch(data, m.schedule, cfg.batch, cfg.dropout_p, brng);
        double loss = denoiser_training_step(m, b, opt, batch_seed);
        m.ema.update(m.params, cfg.ema_decay);
        if (step == 0) stats.first_loss = loss;
        stats.final_loss = loss;
        ++stats.steps;
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
            stats.loss_log.push_back({int(step + 1), loss});
            std::fprintf(stderr, "[denoiser] step %lld/%lld loss %.5f\n",
                         static_cast<long long>(step + 1), static_cast<long long>(total), loss);
        }
    }
    return stats;
}

}  // namespace storydiff
