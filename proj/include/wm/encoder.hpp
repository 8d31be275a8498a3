#pragma once

// Watermark encoder: scores each top-k continuation of a fixed-width context
// window with a bounded value in [-1, 1] and expands those scores into a
// sparse perturbation vector over the vocabulary. Tokens outside the
// candidate set (the "grey" tokens) get exactly 0, so the watermark can never
// promote a token the base model did not already shortlist.
//
// Scoring path per candidate i: the window*d context embedding and the
// candidate's embedding are concatenated (conceptually), passed through a
// two-hidden-layer tanh MLP to one scalar s_i, and squashed as
// tanh(tau_t * s_i). A large tau_t drives scores to effectively hard +-1;
// training warms tau_t up from 1 so gradients are not dead from the start.
//
// Perturbation: l_hat = l + delta * l_wm, optionally plus a key-derived +-1
// bias on the candidate positions only, which partitions generations between
// holders of different keys.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wm/lm.hpp"
#include "wm/rng.hpp"
#include "wm/tensor.hpp"

namespace wm::enc {

// Top-k candidate continuations of one context window.
struct CandidateSet {
    std::vector<int> context;        // exactly `window` ids, left-padded with [PAD]
    std::vector<int> ids;            // candidate token ids, best first
    std::vector<double> base_logits; // base logits aligned with ids

    int k() const { return static_cast<int>(ids.size()); }
    // The i-th scored sequence: context followed by candidate i (window + 1 ids).
    std::vector<int> sequence(int i) const;
};

struct Encoder {
    int window = 10;       // context tokens scored alongside each candidate
    int k = 20;            // candidates per step
    int d_model = 0;       // embedding width of the host language model
    int hidden = 64;       // MLP width (both hidden layers)
    double tau_t = 1000;   // tanh sharpness; trainer warms this up, inference
                           // uses the configured ceiling
    double delta = 1.25;   // perturbation strength at inference (training: 1.0)

    // Layer 1 is stored in two blocks: the context block multiplies the
    // window*d context embedding once per step, the candidate block multiplies
    // each candidate embedding. Identical to one (window+1)*d x hidden matrix
    // acting on the concatenation, but the shared context product makes the
    // k-candidate sweep ~(window+1)/2 - fold cheaper.
    diff::Tensor w_ctx;    // (window*d) x hidden
    diff::Tensor w_cand;   // d x hidden
    diff::Tensor b1;       // hidden
    diff::Tensor w2, b2;   // hidden x hidden, hidden
    diff::Tensor w3, b3;   // hidden x 1, 1

    std::vector<diff::Tensor> params() const;
    std::vector<std::pair<std::string, diff::Tensor>> named_params() const;
    uint64_t weights_checksum() const;
    void validate() const;  // tau_t > 0, delta >= 0, k >= 1, window >= 1, shapes
};

// Fresh encoder with uniform 1/sqrt(fan_in) init, seeded deterministically.
Encoder init_encoder(int window, int k, int d_model, int hidden, uint64_t seed);

// Last `window` ids of a stream, left-padded with [PAD] when it is shorter.
std::vector<int> context_window(const std::vector<int>& stream, int window);

// Top-k by base logit (descending; ties broken by ascending token id).
// base_logits must be a value row over the vocabulary; pass masked logits so
// special tokens never become candidates. Rejects k < 1 and k > |V|.
CandidateSet build_candidates(const std::vector<int>& context, const diff::Tensor& base_logits,
                              int k);

struct WatermarkLogits {
    diff::Tensor pre;   // 1 x k, raw MLP scalars (finite-difference friendly)
    diff::Tensor topk;  // 1 x k, tanh(tau_t * pre), each in [-1, 1]
    diff::Tensor full;  // 1 x |V|, topk scattered to candidate ids, 0 elsewhere
};

// Scores a candidate set. The hard overload embeds cands.context through the
// frozen LM table; the soft overload takes the window's embedding-domain rows
// (each 1 x d, e.g. soft_embed outputs) so gradients reach the generation
// path. Differentiable w.r.t. encoder weights (and soft context rows).
WatermarkLogits watermark_logits(diff::Graph* g, const Encoder& e, const lm::LanguageModel& lm,
                                 const CandidateSet& cands);
WatermarkLogits watermark_logits(diff::Graph* g, const Encoder& e, const lm::LanguageModel& lm,
                                 const std::vector<diff::Tensor>& ctx_rows,
                                 const CandidateSet& cands);

// Deterministic +-1 bias vector derived from a secret key string.
struct KeyBias {
    std::string key;
    std::vector<double> lb;  // |V| entries, each exactly -1 or +1
};

// Seeds a stream from the FNV-1a hash of the key; each entry is an
// independent fair +-1 draw. Same key -> identical vector, always.
KeyBias derive_key_bias(const std::string& key, int vocab);

// Probability that the hardened +-1 watermark of a k-candidate step survives
// unchanged under an unrelated key's bias partition: 0.5^k.
double key_collision_probability(int k);

// l_hat = base + delta * full_wm; the biased overload adds the key bias on the
// candidate positions only, leaving grey tokens untouched:
// l_hat = base + delta * (full_wm + scatter(lb[ids])).
diff::Tensor perturb(diff::Graph* g, const diff::Tensor& base_logits, const diff::Tensor& full_wm,
                     double delta);
diff::Tensor perturb(diff::Graph* g, const diff::Tensor& base_logits, const diff::Tensor& full_wm,
                     double delta, const KeyBias& bias, const std::vector<int>& cand_ids);

// ------------------------------------------------------------- persistence

void save_encoder(const Encoder& e, const std::string& path);
Encoder load_encoder(const std::string& path);

}  // namespace wm::enc
