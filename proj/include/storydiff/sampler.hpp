#pragma once

#include "storydiff/denoiser.hpp"

namespace storydiff {

struct GuidanceConfig {
    double gamma = 7.5;    // classifier-free guidance scale, >= 1
    double g = 0.15;       // similarity-guidance weight, >= 0
    double tau_sim = 0.65; // anchor threshold on prompt similarity
    int steps = 0;         // sampler steps; 0 = full schedule length
    uint64_t seed = 0;
    bool no_guidance = false;  // ablation flag: forces the g = 0 path

    void validate() const {
        if (gamma < 1.0) throw ValidationError("guidance: gamma must be >= 1");
        if (g < 0.0) throw ValidationError("guidance: g must be >= 0");
    }
};

// Descending step indices for the reverse loop; steps==0 or >=T gives the
// full path T..1, otherwise a uniform stride over [1, T].
std::vector<int> make_timestep_path(int T, int steps);

// eps_hat = eps(null) + gamma * (eps(cond) - eps(null)); gamma == 1 returns
// the conditional prediction itself (bit-exact, single evaluation).
Tensor cfg_noise(IEpsModel& m, const Tensor& xt, const std::vector<int>& t, const Tensor& cond,
                 const std::vector<float>& cond_mask, const Tensor& null_cond,
                 const std::vector<float>& null_mask, double gamma);

// Similarity guidance on top of CFG. anchor_f[i] is f(x_h) for sample i or
// nullptr when the anchor did not fire; the gradient of f(x_in) . f(x_h) is
// taken with respect to x_t through x0_hat and x_in (the CFG estimate stands
// in for the true noise and is treated as constant). g == 0 or an all-null
// anchor list returns the CFG result unchanged, bit for bit.
Tensor adaptive_noise(IEpsModel& m, const Encoders& enc, const Tensor& xt,
                      const std::vector<int>& t, const Tensor& cond,
                      const std::vector<float>& cond_mask, const Tensor& null_cond,
                      const std::vector<float>& null_mask,
                      const std::vector<const TensorD*>& anchor_f, const NoiseSchedule& sched,
                      const GuidanceConfig& gc);

// ---------------------------------------------------------------------------
// frame sampling
// ---------------------------------------------------------------------------

// One frame slot in a batched reverse loop.
struct FrameSlot {
    Tensor cond;               // (Tc, d)
    std::vector<float> mask;   // Tc
    const TensorD* anchor_f = nullptr;  // unit vector, or null
    uint64_t noise_seed = 0;   // per-slot stream: batching cannot change results
};

// Ancestral reverse process from pure noise; returns (B,3,H,W) in [-1,1].
TensorD sample_frames(IEpsModel& m, const Encoders* enc, std::vector<FrameSlot>& slots,
                      const NoiseSchedule& sched, const GuidanceConfig& gc,
                      const Tensor& null_cond, const std::vector<float>& null_mask, int height,
                      int width);

// ---------------------------------------------------------------------------
// whole-story generation
// ---------------------------------------------------------------------------

enum class Task { visualization, continuation };

Task task_from_string(const std::string& s);
std::string task_to_string(Task t);

struct FrameGenLog {
    int frame_index = 0;
    bool given = false;        // continuation pass-through
    bool anchor_fired = false;
    int anchor_frame = -1;
    double best_score = -2.0;
    double threshold = 0.0;
    uint64_t noise_seed = 0;
};

struct StoryGenerationResult {
    std::string story_id;
    std::vector<ImageU8> frames;
    std::vector<FrameGenLog> logs;
};

// Frames are generated strictly in order; history entries are built from the
// frames actually produced (or the given first frame for continuation).
StoryGenerationResult generate_story(DenoiserModel& m, const Encoders& enc,
                                     const StoryRecord& story, Task task,
                                     const GuidanceConfig& gc);

// Lockstep batched version: frame i of every story is sampled in one reverse
// loop. Per-slot noise streams make results identical to the single-story
// path's structure (each story still sees only its own history).
std::vector<StoryGenerationResult> generate_stories(DenoiserModel& m, const Encoders& enc,
                                                    const std::vector<StoryRecord>& stories,
                                                    Task task, const GuidanceConfig& gc,
                                                    int batch_chunk = 32);

// f(x0_hat) . f(x_h) at the end of a trajectory, used by the sign probe.
double anchor_similarity(const Encoders& enc, const TensorD& image_chw, const TensorD& anchor_f);

}  // namespace storydiff
