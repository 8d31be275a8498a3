#pragma once

// Sampling and generation. Two regimes share one loop shape:
//
//   soft (training):  p_t = softmax((l_hat + g)/tau_g) with fresh Gumbel noise
//                     g each step; the next input is the soft token
//                     x_t = p_t^T E, so the whole generation is differentiable
//                     with the noise held constant (reparameterization).
//   hard (inference): one multinomial draw per step from
//                     softmax(l_hat / temperature), one uniform consumed per
//                     step, so streams with delta = 0 are exactly the base
//                     LM's streams under the same seed.
//
// l_hat = masked base logits + delta * watermark (+ optional key bias on the
// candidate positions). Special tokens are masked before candidates are
// built, and EOS stays masked too: generations run to max_tokens, modelling
// a continuous word stream (EOS is a rewrite-prompt marker, not a
// generation stopper, for this corpus).

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "wm/encoder.hpp"
#include "wm/lm.hpp"
#include "wm/rng.hpp"
#include "wm/tensor.hpp"

namespace wm::smp {

struct GenerationConfig {
    int max_tokens = 100;
    double tau_g = 0.1;        // Gumbel-softmax temperature (soft mode)
    double temperature = 1.0;  // sampling temperature (hard mode)
    uint64_t seed = 0;
    double delta = 1.25;       // watermark strength; ignored when !watermark
    int k = 20;                // candidates per step
    bool watermark = true;
    std::string key;           // nonempty -> key bias added to the candidates
    bool trace_hard = false;   // keep the per-step trace in hard mode too

    nlohmann::json to_json() const;
    static GenerationConfig from_json(const nlohmann::json& j);
};

// --------------------------------------------------------------- primitives

// n i.i.d. standard Gumbel draws: g = -log(-log U), U in (0,1) exclusive.
std::vector<double> gumbel_noise(Rng& rng, int n);

// softmax((logits + g)/tau_g) with g drawn fresh (one draw per entry,
// row-major) and treated as a constant by the tape. Works on any B x V value.
diff::Tensor gumbel_softmax(diff::Graph* g, const diff::Tensor& logits, double tau_g, Rng& rng);
// Same, with caller-supplied noise (for gradient checks against fixed g).
diff::Tensor gumbel_softmax(diff::Graph* g, const diff::Tensor& logits, double tau_g,
                            const diff::Tensor& noise);

// One multinomial draw from softmax(logits / temperature); consumes exactly
// one uniform variate.
int hard_sample(const diff::Tensor& logits, double temperature, Rng& rng);

// --------------------------------------------------------------- generation

// Everything the detector-side experiments need to replay one step. Both
// generation modes derive it from the hardened stream, so retrieval over the
// stored tokens reproduces these values.
struct StepTrace {
    std::vector<int> cand_ids;        // k candidate ids, best first
    std::vector<double> base_topk;    // their base logits
    std::vector<double> wm_topk;      // their watermark logits, in [-1, 1]
    int chosen = -1;                  // sampled token id
    int rank = -1;                    // index of chosen in cand_ids, -1 if grey
};

struct Generation {
    std::vector<int> prompt;          // ids as consumed
    std::vector<int> tokens;          // sampled output ids (argmax ids in soft mode)
    std::vector<diff::Tensor> probs;  // soft rows, one per output token (soft mode)
    std::vector<StepTrace> trace;     // soft: always; hard: only when trace_hard

    std::vector<int> stream() const;  // prompt followed by tokens
};

// Hard-sampling generation. The encoder is consulted only when cfg.watermark;
// with it off the stream equals the base LM's under the same seed. Passing
// delta = 0 with watermark on exercises the full path and also reproduces the
// base stream (identity perturbation).
Generation generate_hard(const lm::LanguageModel& lm, const enc::Encoder& e,
                         const std::vector<int>& prompt, const GenerationConfig& cfg);

// Differentiable generation; gradients reach the encoder weights through
// every step's perturbation and through the fed-back soft tokens. The graph
// may be null for a forward-only run. The trace is computed on a parallel
// replay of the hardened tokens (the sampled path itself stays soft).
Generation generate_soft(diff::Graph* g, const lm::LanguageModel& lm, const enc::Encoder& e,
                         const std::vector<int>& prompt, const GenerationConfig& cfg);

// Persisted record of one generation (one JSON object per line in sample
// files): id, prompt/output text, token ids, watermark flag, seed, delta, k.
nlohmann::json generation_record(const Generation& gen, const tok::Tokenizer& tk,
                                 const GenerationConfig& cfg, const std::string& id);

}  // namespace wm::smp
