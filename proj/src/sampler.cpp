#include "storydiff/sampler.hpp"

namespace storydiff {

using namespace ops;

std::vector<int> make_timestep_path(int T, int steps) {
    std::vector<int> path;
    if (steps <= 0 || steps >= T) {
        for (int t = T; t >= 1; --t) path.push_back(t);
        return path;
    }
    if (steps == 1) return {T};
    // uniform stride over [1, T], descending, unique
    for (int k = steps - 1; k >= 0; --k) {
        int t = 1 + int(std::lround(double(T - 1) * double(k) / double(steps - 1)));
        if (path.empty() || path.back() != t) path.push_back(t);
    }
    return path;
}

Tensor cfg_noise(IEpsModel& m, const Tensor& xt, const std::vector<int>& t, const Tensor& cond,
                 const std::vector<float>& cond_mask, const Tensor& null_cond,
                 const std::vector<float>& null_mask, double gamma) {
    if (gamma < 1.0) throw ValidationError("cfg_noise: gamma must be >= 1");
    Tensor eps_c = m.predict(xt, t, cond, cond_mask);
    if (gamma == 1.0) return eps_c;
    Tensor eps_u = m.predict(xt, t, null_cond, null_mask);
    Tensor out(eps_c.shape);
    float gf = float(gamma);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data()[i] = eps_u[i] + gf * (eps_c[i] - eps_u[i]);
    return out;
}

Tensor adaptive_noise(IEpsModel& m, const Encoders& enc, const Tensor& xt,
                      const std::vector<int>& t, const Tensor& cond,
                      const std::vector<float>& cond_mask, const Tensor& null_cond,
                      const std::vector<float>& null_mask,
                      const std::vector<const TensorD*>& anchor_f, const NoiseSchedule& sched,
                      const GuidanceConfig& gc) {
    gc.validate();
    Tensor eps = cfg_noise(m, xt, t, cond, cond_mask, null_cond, null_mask, gc.gamma);
    if (gc.no_guidance || gc.g == 0.0) return eps;

    int64_t B = xt.dim(0);
    std::vector<int64_t> active;
    for (int64_t i = 0; i < B; ++i)
        if (i < int64_t(anchor_f.size()) && anchor_f[size_t(i)] != nullptr) active.push_back(i);
    if (active.empty()) return eps;

    int64_t C = xt.dim(1), H = xt.dim(2), W = xt.dim(3);
    int64_t px = C * H * W;
    int64_t Ba = int64_t(active.size());
    int d = enc.d_model();

    // x0_hat and x_in per active sample, double precision
    TensorD x_in({Ba, C, H, W});
    std::vector<double> chain(static_cast<size_t>(Ba)), sq1m(static_cast<size_t>(Ba));
    for (int64_t a = 0; a < Ba; ++a) {
        int64_t i = active[size_t(a)];
        double abar = sched.a_bar(t[size_t(i)]);
        double sa = std::sqrt(abar);
        double w = std::sqrt(1.0 - abar);
        sq1m[size_t(a)] = w;
        chain[size_t(a)] = w / sa + (1.0 - w);  // d x_in / d x_t, scalar
        for (int64_t k = 0; k < px; ++k) {
            double xv = double(xt[i * px + k]);
            double x0h = (xv - w * double(eps[i * px + k])) / sa;
            x_in.data()[a * px + k] = w * x0h + (1.0 - w) * xv;
        }
    }

    // d/dx_in of sum_a f(x_in_a) . f(x_h_a); rows are independent samples
    GraphT<double> g;
    TapeT<double> tp{&g, false};
    VarT<double> imgs = g.input(x_in, true);
    VarT<double> emb = enc.image_tower_fwd(tp, imgs);
    TensorD anchors({Ba, d});
    for (int64_t a = 0; a < Ba; ++a) {
        const TensorD* af = anchor_f[size_t(active[size_t(a)])];
        if (af->numel() != d) throw ValidationError("adaptive_noise: anchor embedding width");
        std::memcpy(anchors.data() + a * d, af->data(), size_t(d) * sizeof(double));
    }
    VarT<double> s = sum_all(mul(emb, g.input(anchors, false)));
    g.backward(s);
    const TensorD& grad_xin = g.nodes[size_t(imgs.id)].grad;

    Tensor out = eps.clone();
    for (int64_t a = 0; a < Ba; ++a) {
        int64_t i = active[size_t(a)];
        double coeff = gc.g * sq1m[size_t(a)] * chain[size_t(a)];
        for (int64_t k = 0; k < px; ++k) {
            double gv = grad_xin[a * px + k];
            if (!std::isfinite(gv))
                throw NumericError("adaptive guidance gradient is non-finite at t=" +
                                   std::to_string(t[size_t(i)]));
            out.data()[i * px + k] = float(double(out[i * px + k]) - coeff * gv);
        }
    }
    return out;
}

TensorD sample_frames(IEpsModel& m, const Encoders* enc, std::vector<FrameSlot>& slots,
                      const NoiseSchedule& sched, const GuidanceConfig& gc,
                      const Tensor& null_cond, const std::vector<float>& null_mask, int height,
                      int width) {
    gc.validate();
    int64_t B = int64_t(slots.size());
    if (B == 0) return TensorD({0, 3, height, width});
    bool wants_guidance = !gc.no_guidance && gc.g > 0.0;
    if (wants_guidance && enc == nullptr)
        throw ValidationError("sample_frames: guidance requested without an encoder");

    // pad conditions to a common token count
    int64_t Tc = 0;
    for (const auto& s : slots) Tc = std::max<int64_t>(Tc, s.cond.dim(0));
    int d = int(slots[0].cond.dim(1));
    Tensor cond({B, Tc, d});
    std::vector<float> cond_mask(size_t(B * Tc), 0.0f);
    for (int64_t i = 0; i < B; ++i) {
        int64_t n = slots[size_t(i)].cond.dim(0);
        std::memcpy(cond.data() + i * Tc * d, slots[size_t(i)].cond.data(),
                    size_t(n * d) * sizeof(float));
        for (int64_t j = 0; j < n; ++j)
            cond_mask[size_t(i * Tc + j)] = slots[size_t(i)].mask[size_t(j)];
    }
    Tensor null_b({B, null_cond.dim(0), null_cond.dim(1)});
    std::vector<float> null_b_mask(size_t(B * null_cond.dim(0)), 1.0f);
    for (int64_t i = 0; i < B; ++i)
        std::memcpy(null_b.data() + i * null_cond.numel(), null_cond.data(),
                    size_t(null_cond.numel()) * sizeof(float));
    for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < null_cond.dim(0); ++j)
            null_b_mask[size_t(i * null_cond.dim(0) + j)] = null_mask[size_t(j)];

    std::vector<const TensorD*> anchors;
    for (const auto& s : slots) anchors.push_back(s.anchor_f);

    int64_t px = 3LL * height * width;
    std::vector<Rng> rngs;
    for (const auto& s : slots) rngs.emplace_back(s.noise_seed);

    TensorD x({B, 3, height, width});
    for (int64_t i = 0; i < B; ++i)
        for (int64_t k = 0; k < px; ++k) x.data()[i * px + k] = rngs[size_t(i)].normal();

    std::vector<int> path = make_timestep_path(sched.T, gc.steps);
    for (size_t step = 0; step < path.size(); ++step) {
        int t = path[step];
        int t_prev = step + 1 < path.size() ? path[step + 1] : 0;
        std::vector<int> tv(size_t(B), t);

        Tensor xf({B, 3, height, width});
        for (int64_t i = 0; i < x.numel(); ++i) xf.data()[i] = float(x[i]);

        Tensor eps = wants_guidance
                         ? adaptive_noise(m, *enc, xf, tv, cond, cond_mask, null_b, null_b_mask,
                                          anchors, sched, gc)
                         : cfg_noise(m, xf, tv, cond, cond_mask, null_b, null_b_mask, gc.gamma);

        double abar_t = sched.a_bar(t);
        double abar_p = sched.a_bar(t_prev);
        double alpha_eff = abar_t / abar_p;
        double beta_eff = 1.0 - alpha_eff;
        double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_eff);
        double eps_coeff = beta_eff / std::sqrt(1.0 - abar_t);
        double sigma = t_prev == 0 ? 0.0
                                   : std::sqrt(beta_eff * (1.0 - abar_p) / (1.0 - abar_t));

        for (int64_t i = 0; i < B; ++i) {
            for (int64_t k = 0; k < px; ++k) {
                double mean =
                    (x[i * px + k] - eps_coeff * double(eps[i * px + k])) * inv_sqrt_alpha;
                double z = sigma > 0.0 ? rngs[size_t(i)].normal() : 0.0;
                double v = mean + sigma * z;
                if (!std::isfinite(v))
                    throw NumericError("sampler state non-finite at t=" + std::to_string(t));
                x.data()[i * px + k] = v;
            }
        }
    }
    for (int64_t i = 0; i < x.numel(); ++i)
        x.data()[i] = std::min(1.0, std::max(-1.0, x[i]));
    return x;
}

// ---------------------------------------------------------------------------
// story generation
// ---------------------------------------------------------------------------

Task task_from_string(const std::string& s) {
    if (s == "visualization") return Task::visualization;
    if (s == "continuation") return Task::continuation;
    throw ValidationError("unknown task: " + s + " (want visualization|continuation)");
}

std::string task_to_string(Task t) {
    return t == Task::visualization ? "visualization" : "continuation";
}

namespace {

uint64_t frame_noise_seed(const GuidanceConfig& gc, const std::string& story_id, int frame) {
    uint64_t h = fnv1a64(story_id);
    h = fnv1a64(&frame, sizeof(frame), h);
    h = fnv1a64(&gc.seed, sizeof(gc.seed), h);
    return h;
}

struct StoryState {
    const StoryRecord* story = nullptr;
    StoryGenerationResult result;
    std::vector<TextEmbedding> prompt_embeds;  // cached per frame
    std::vector<HistoryEntry> history;         // grows as frames are produced
    std::vector<TensorD> anchor_cache;         // f(x) per produced frame
};

void push_history(StoryState& st, const Encoders& enc, int frame_index, const ImageU8& img) {
    HistoryEntry h;
    h.frame_index = frame_index;
    h.image = img;
    h.prompt_embedding = st.prompt_embeds[size_t(frame_index)];
    h.pair_embedding =
        enc.encode_pair(tokenize(st.story->frames[size_t(frame_index)].prompt), img);
    st.history.push_back(std::move(h));
    st.anchor_cache.push_back(enc.image_embedding(image_to_tensor<double>(img)));
}

}  // namespace

std::vector<StoryGenerationResult> generate_stories(DenoiserModel& m, const Encoders& enc,
                                                    const std::vector<StoryRecord>& stories,
                                                    Task task, const GuidanceConfig& gc,
                                                    int batch_chunk) {
    gc.validate();
    if (enc.d_model() != m.cfg.unet.d_cond)
        throw ValidationError("generate: encoder d_model != denoiser d_cond");
    EmaScope ema(m);

    std::vector<StoryState> states(stories.size());
    size_t max_len = 0;
    for (size_t s = 0; s < stories.size(); ++s) {
        states[s].story = &stories[s];
        states[s].result.story_id = stories[s].story_id;
        if (task == Task::continuation && stories[s].frames.empty())
            throw ValidationError("continuation requires a first frame: " + stories[s].story_id);
        for (const auto& fr : stories[s].frames)
            states[s].prompt_embeds.push_back(enc.encode_text(tokenize(fr.prompt)));
        max_len = std::max(max_len, stories[s].frames.size());
    }

    ConditionBundle null_bundle = m.context.null_condition();
    std::vector<float> null_mask(size_t(null_bundle.condition.dim(0)), 1.0f);
    bool guide = !gc.no_guidance && gc.g > 0.0;

    for (size_t frame = 0; frame < max_len; ++frame) {
        // continuation: the given first frame passes through byte-exactly
        std::vector<size_t> active;
        for (size_t s = 0; s < states.size(); ++s) {
            if (frame >= stories[s].frames.size()) continue;
            if (task == Task::continuation && frame == 0) {
                FrameGenLog log;
                log.frame_index = 0;
                log.given = true;
                log.threshold = gc.tau_sim;
                states[s].result.frames.push_back(stories[s].frames[0].image);
                states[s].result.logs.push_back(log);
                push_history(states[s], enc, 0, stories[s].frames[0].image);
                continue;
            }
            active.push_back(s);
        }

        for (size_t chunk = 0; chunk < active.size(); chunk += size_t(batch_chunk)) {
            size_t end = std::min(active.size(), chunk + size_t(batch_chunk));
            std::vector<FrameSlot> slots;
            std::vector<FrameGenLog> logs;
            for (size_t ci = chunk; ci < end; ++ci) {
                StoryState& st = states[active[ci]];
                const TextEmbedding& v = st.prompt_embeds[frame];

                auto updated = m.context.attend_history(v, st.history);
                ConditionBundle bundle = m.context.build_condition(v, updated);

                FrameGenLog log;
                log.frame_index = int(frame);
                log.threshold = gc.tau_sim;
                log.noise_seed = frame_noise_seed(gc, st.story->story_id, int(frame));

                FrameSlot slot;
                slot.cond = bundle.condition;
                slot.mask.assign(size_t(bundle.condition.dim(0)), 1.0f);
                slot.noise_seed = log.noise_seed;
                if (guide) {
                    AnchorSelection sel = select_anchor(v, st.history, gc.tau_sim);
                    log.best_score = sel.best_score;
                    if (sel.fired()) {
                        log.anchor_fired = true;
                        log.anchor_frame = st.history[size_t(sel.selected_index)].frame_index;
                        slot.anchor_f = &st.anchor_cache[size_t(sel.selected_index)];
                    }
                }
                slots.push_back(std::move(slot));
                logs.push_back(log);
            }

            TensorD out = sample_frames(m, guide ? &enc : nullptr, slots, m.schedule, gc,
                                        null_bundle.condition, null_mask, kFrameSize, kFrameSize);
            for (size_t ci = chunk; ci < end; ++ci) {
                StoryState& st = states[active[ci]];
                int64_t a = int64_t(ci - chunk);
                TensorD img_t({3, kFrameSize, kFrameSize});
                std::memcpy(img_t.data(), out.data() + a * img_t.numel(),
                            size_t(img_t.numel()) * sizeof(double));
                ImageU8 img = tensor_to_image(img_t);
                st.result.frames.push_back(img);
                st.result.logs.push_back(logs[ci - chunk]);
                push_history(st, enc, int(frame), img);
            }
        }
    }

    std::vector<StoryGenerationResult> results;
    for (auto& st : states) results.push_back(std::move(st.result));
    return results;
}

StoryGenerationResult generate_story(DenoiserModel& m, const Encoders& enc,
                                     const StoryRecord& story, Task task,
                                     const GuidanceConfig& gc) {
    return generate_stories(m, enc, {story}, task, gc, 1)[0];
}

double anchor_similarity(const Encoders& enc, const TensorD& image_chw, const TensorD& anchor_f) {
    TensorD emb = enc.image_embedding(image_chw);
    double s = 0;
    for (int64_t i = 0; i < emb.numel(); ++i) s += emb[i] * anchor_f[i];
    return s;
}

}  // namespace storydiff
