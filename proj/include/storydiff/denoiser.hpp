#pragma once

#include "storydiff/context.hpp"
#include "storydiff/schedule.hpp"
#include "storydiff/unet.hpp"

namespace storydiff {

// Noise-prediction surface used by the sampler; mocks implement it in tests.
// The condition is a plain tensor because it is constant during a frame's
// reverse loop (conditioning is built once per frame).
class IEpsModel {
  public:
    virtual ~IEpsModel() = default;
    virtual Tensor predict(const Tensor& xt, const std::vector<int>& t, const Tensor& cond,
                           const std::vector<float>& cond_mask) = 0;
};

struct DenoiserConfig {
    UNetConfig unet;
    int T = 200;
    double beta_start = 5e-4;
    double beta_end = 0.1;
    int context_heads = 4;
    bool context_residual = true;
    bool no_attention = false;  // ablation: history vectors pass through unchanged
    uint64_t init_seed = 42;
};

// U-Net + adaptive context attention + learned null condition, one parameter
// store, one EMA shadow. Encoders stay outside and frozen.
struct DenoiserModel : IEpsModel {
    DenoiserConfig cfg;
    NoiseSchedule schedule;
    ParamStore params;
    UNet unet;
    AdaptiveContext context;
    EmaT<float> ema;

    void init(const DenoiserConfig& c);

    Tensor predict(const Tensor& xt, const std::vector<int>& t, const Tensor& cond,
                   const std::vector<float>& cond_mask) override;

    int64_t param_count() const { return params.count_scalars(); }
    uint64_t weights_hash() const { return params.weights_hash(); }
};

// Swaps EMA weights in on construction and back out on destruction.
class EmaScope {
  public:
    explicit EmaScope(DenoiserModel& m) : m_(m), active_(!m.ema.empty()) {
        if (active_) m_.ema.swap_with(m_.params);
    }
    ~EmaScope() {
        if (active_) m_.ema.swap_with(m_.params);
    }
    EmaScope(const EmaScope&) = delete;
    EmaScope& operator=(const EmaScope&) = delete;

  private:
    DenoiserModel& m_;
    bool active_;
};

// ---------------------------------------------------------------------------
// frozen-encoder features, precomputed once per training run
// ---------------------------------------------------------------------------

struct FrameFeatures {
    Tensor v_tokens;  // (32, d)
    Tensor v_pooled;  // (d)
    Tensor h_vec;     // (d) joint pair embedding
    ImageU8 image;
};

struct EncodedStories {
    int d = 0;
    std::vector<std::vector<FrameFeatures>> stories;
    int64_t frame_count() const {
        int64_t n = 0;
        for (const auto& s : stories) n += int64_t(s.size());
        return n;
    }
};

EncodedStories precompute_features(const std::vector<StoryRecord>& stories, const Encoders& enc);

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

struct ConditioningBatch {
    Tensor v_tokens;                // (B,32,d)
    Tensor v_pooled;                // (B,d)
    Tensor h_pad;                   // (B,Hmax,d); Hmax may be 0
    std::vector<float> hist_mask;   // B*Hmax
    std::vector<float> null_flags;  // B entries in {0,1}
    int Hmax = 0;
};

struct DenoiserBatch {
    Tensor x0, eps, xt;  // (B,C,H,W)
    std::vector<int> t;
    ConditioningBatch cond;
};

// Samples (story, frame) pairs, draws t uniformly on {1..T} and Gaussian eps,
// corrupts via the closed form, teacher-forces history from ground truth, and
// applies condition dropout with probability dropout_p.
DenoiserBatch assemble_batch(const EncodedStories& data, const NoiseSchedule& sched, int batch,
                             double dropout_p, Rng& rng);

// Builds the condition token tensor inside the caller's graph so gradients
// reach the adaptive attention and the null tokens. mask_out gets B*(32+Hmax).
VarT<float> condition_graph(Tape& tp, const AdaptiveContext& ctx, const ConditioningBatch& cb,
                            std::vector<float>* mask_out);

// Inference-mode condition values (no gradients), same semantics.
Tensor condition_values(const AdaptiveContext& ctx, const ConditioningBatch& cb,
                        std::vector<float>* mask_out);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct DenoiserTrainConfig {
    int epochs = 12;
    int max_steps = 0;  // 0 = no cap
    int batch = 32;
    double lr = 1e-4;       // reference value
    double dropout_p = 0.1;  // condition dropout for classifier-free guidance
    double ema_decay = 0.999;
    uint64_t seed = 1;
    int log_every = 100;
};

struct DenoiserTrainStats {
    double first_loss = 0;
    double final_loss = 0;
    int steps = 0;
    std::vector<std::pair<int, double>> loss_log;
};

// One optimization step; returns the loss. Throws NumericError (naming the
// batch seed) if the loss goes non-finite.
double denoiser_training_step(DenoiserModel& m, const DenoiserBatch& b, AdamT<float>& opt,
                              uint64_t batch_seed);

// Loss semantics without gradients, for any predictor (mocks included).
double denoiser_eval_loss(IEpsModel& m, const DenoiserBatch& b, const AdaptiveContext& ctx);

DenoiserTrainStats train_denoiser(DenoiserModel& m, const EncodedStories& data,
                                  const DenoiserTrainConfig& cfg);

}  // namespace storydiff
