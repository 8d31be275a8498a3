#pragma once
// Joint end-to-end optimization of the watermark encoder and the neural
// detector around the frozen language model: binary detection loss on
// parallel watermarked/clean generations, cosine semantic loss, two-objective
// gradient combination, a three-stage curriculum with a tanh-sharpness
// warm-up, and byte-identical checkpoint/resume.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "wm/decoder.hpp"
#include "wm/editor.hpp"
#include "wm/encoder.hpp"
#include "wm/grammar.hpp"
#include "wm/lm.hpp"
#include "wm/optim.hpp"
#include "wm/tensor.hpp"

namespace wm::trn {

struct TrainConfig {
    int steps = 2000;          // total optimizer steps
    int batch = 8;             // prompts per step (each yields one WM + one NWM)
    double lr = 1e-4;          // fixed Adam learning rate
    double clip = 5.0;         // global norm cap on the combined gradient; the
                               // sharpened tanh produces rare huge encoder
                               // spikes that would poison the second moment
    double stage2_frac = 2.0 / 7.0;  // curriculum boundaries as step fractions
    double stage3_frac = 4.0 / 7.0;
    double w_dec = 10.0;       // static loss weights, applied before combining
    double w_sem = 1.0;
    double delta_train = 1.0;  // perturbation strength during training
    int k = 20;                // candidates per step
    int window = 10;           // encoder context window
    int enc_hidden = 64;
    int dec_hidden = 64;
    int dec_head = 32;
    double tau_g = 0.1;        // Gumbel-Softmax temperature
    double tau_t_start = 1.0;  // tanh sharpness, warmed geometrically across
    double tau_t_end = 1000.0; // stage 1 and held at the ceiling afterwards
    int gen_tokens = 40;       // output length of every training generation
    int probe_every = 100;     // probe-set evaluation cadence (steps)
    int probe_size = 32;       // prompts in the fixed probe set
    int checkpoint_every = 500;
    uint64_t seed = 1;
    ed::EditConfig edit;       // noise layer; edit.activation is the N rate

    bool use_mgda = true;            // off: plain sum of the weighted gradients
    bool use_static_weights = true;  // off: w_dec = w_sem = 1
    bool use_noise = true;           // off: stage 3 never edits
    bool use_sem = true;             // off: semantic objective never built
    bool normalize_grads = false;    // on: unit-normalize both before combining

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    void validate() const;   // fractions ascending in (0,1), positive sizes
    uint64_t config_hash() const;
};

// Curriculum stage of a 0-based step: 1 below floor(stage2_frac * steps),
// 3 from floor(stage3_frac * steps), 2 between.
int stage_of(const TrainConfig& cfg, int step);

// Geometric interpolation from tau_t_start to tau_t_end across stage 1;
// the ceiling from stage 2 on.
double tau_t_at(const TrainConfig& cfg, int step);

// Mean binary cross-entropy over per-sample detection logits (1 x 1 each);
// labels are 1 for watermarked (clean or edited), 0 for clean-model text.
diff::Tensor loss_dec(diff::Graph* g, const std::vector<diff::Tensor>& logits,
                      const std::vector<double>& labels);

// Cosine distance 1 - cos(e_wm, e_nwm), in [0, 2]. Rejects zero-norm inputs.
diff::Tensor loss_sem(diff::Graph* g, const diff::Tensor& e_wm, const diff::Tensor& e_nwm);

// Two-objective min-norm coefficient:
//   alpha* = clip(<g_sem - g_dec, g_sem> / |g_dec - g_sem|^2, 0, 1),
// 0.5 when |g_dec - g_sem| < 1e-12. The combined update direction is
// alpha* g_dec + (1 - alpha*) g_sem.
double mgda_alpha(const std::vector<double>& g_dec, const std::vector<double>& g_sem);

// Everything train_step mutates: models under training plus optimizer state.
struct TrainState {
    TrainConfig cfg;
    enc::Encoder encoder;
    dec::Decoder decoder;
    diff::Adam opt;
    int step = 0;
};

TrainState init_train(const lm::LanguageModel& lm, const TrainConfig& cfg);

struct StepReport {
    double loss_dec = 0;   // raw mean BCE (before the static weight)
    double loss_sem = 0;   // raw mean cosine distance; 0 when not computed
    double alpha = 1;      // combination coefficient; -1 when MGDA was off
    double gnorm_dec = 0;  // norms of the weighted accumulated gradients
    double gnorm_sem = 0;
};

// One optimizer step on encoder + decoder jointly, LM untouched. Per prompt:
// soft WM generation, hard NWM generation from the same prompt, stage >= 3
// noise layer on the WM rows, detection logits on both, per-stage losses.
// All randomness is derived from (cfg.seed, st.step, prompt index), so a
// resumed run replays the identical stream. Throws on non-finite losses.
StepReport train_step(TrainState& st, const lm::LanguageModel& lm, const Grammar& gr,
                      const std::vector<std::vector<int>>& prompts, int stage);

struct ProbeReport {
    double acc = 0;  // balanced detection accuracy at logit threshold 0
    double f1 = 0;   // F1 of the watermarked class at the same threshold
};

// Fixed probe set (derived from cfg.seed): hard WM and NWM generations,
// scored by the current detector.
ProbeReport run_probe(const TrainState& st, const lm::LanguageModel& lm, const Grammar& gr);

struct TrainReport {
    ProbeReport final_probe;
    int steps_run = 0;
    std::string encoder_path;  // <out>/encoder.ck
    std::string decoder_path;  // <out>/decoder.ck
    std::string state_path;    // <out>/train_state.ck
    std::string metrics_path;  // <out>/metrics.csv
};

// Full curriculum run. Writes metrics.csv rows
//   step,stage,loss_dec,loss_sem,alpha,probe_acc,probe_f1
// (probe cells filled on probe steps, alpha blank when MGDA was off),
// checkpoints every checkpoint_every steps, and the final encoder/decoder.
// `resume_path` continues a run byte-identically from its saved state; the
// config hash and LM checksum must match. On divergence writes
// <out>/diverged.json and rethrows.
TrainReport train(const lm::LanguageModel& lm, const Grammar& gr, const TrainConfig& cfg,
                  const std::string& out_dir, const std::string& resume_path = "");

// ------------------------------------------------------------- persistence

void save_train_state(const TrainState& st, const lm::LanguageModel& lm,
                      const std::string& path);
TrainState load_train_state(const std::string& path, const lm::LanguageModel& lm);

}  // namespace wm::trn
