#pragma once

// Small recurrent language model over a toy tokenizer: embedding -> single
// gated recurrent cell -> output projection. Pretraining covers three tasks:
//
//   1. next-token cross-entropy on corpus crops,
//   2. prompted rewriting: [EPB] x [EPE] -> paraphrase(x) + [EOS], teacher
//      forced on short chunks (a small recurrent state cannot memorize whole
//      sentences, so rewriting is learned chunk-wise),
//   3. a semantic anchor: the hidden state after [SPB] x [SPE] is trained
//      contrastively so paraphrase pairs land nearby and random pairs do not.
//
// After train_lm the model is frozen; nothing downstream may mutate it
// (weights_checksum guards this). Soft inputs are probability rows over the
// vocabulary; feeding a hard token equals feeding its one-hot row exactly.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wm/grammar.hpp"
#include "wm/rng.hpp"
#include "wm/tensor.hpp"
#include "wm/tokenizer.hpp"

namespace wm::lm {

// Logit value used to mask tokens out of sampling; finite so downstream
// softmax arithmetic never produces NaN.
inline constexpr double kMaskLogit = -1e30;

struct LmConfig {
    int d_model = 32;
    int d_hidden = 64;
    int steps = 10000;
    int batch = 16;
    int crop = 32;        // next-token crop length, in tokenizer ids
    int chunk = 4;        // rewrite chunk length, in words
    double lr = 2e-3;
    double clip = 1.0;
    double drop_prob = 0.10;   // token drop rate of the paraphrase teacher
    double pair_boost = 3.0;   // rewrite-loss weight on synonym-pair targets
    int anchor_min = 4;        // semantic-anchor crop bounds, in words
    int anchor_max = 20;
    double margin = 0.2;       // negative-pair hinge margin on cosine
    double holdout_frac = 0.10;
    uint64_t seed = 1;

    nlohmann::json to_json() const;
    static LmConfig from_json(const nlohmann::json& j);
};

struct LanguageModel {
    tok::Tokenizer tokenizer;
    LmConfig config;
    diff::Tensor emb;             // |V| x d
    diff::GruCell cell;           // d -> hidden
    diff::Tensor w_out, b_out;    // hidden x |V|, |V|
    bool frozen = false;

    int vocab_size() const { return tokenizer.vocab_size(); }
    int d_model() const { return config.d_model; }
    int d_hidden() const { return config.d_hidden; }

    std::vector<diff::Tensor> params() const;
    std::vector<std::pair<std::string, diff::Tensor>> named_params() const;
    void freeze();
    uint64_t weights_checksum() const;
    void validate() const;  // embedding rows must equal vocabulary size
};

// Fresh randomly initialized (untrained) model; output projection starts near
// zero so the initial next-token loss sits at ln |V|.
LanguageModel init_lm(const tok::Tokenizer& tokenizer, const LmConfig& config);

// ------------------------------------------------------------ forward steps

// B x hidden zero state.
diff::Tensor initial_state(const LanguageModel& lm, int batch);

// Advance one step on hard token ids (one per batch row).
diff::Tensor step_tokens(diff::Graph* g, const LanguageModel& lm, const diff::Tensor& h,
                         const std::vector<int>& ids);

// Advance one step on embedding-domain rows x (B x d).
diff::Tensor step_soft(diff::Graph* g, const LanguageModel& lm, const diff::Tensor& h,
                       const diff::Tensor& x);

// Output logits from a state: h @ w_out + b_out (B x |V|).
diff::Tensor output_logits(diff::Graph* g, const LanguageModel& lm, const diff::Tensor& h);

// Convex combination of embedding rows: probs (B x |V|) @ E. Rejects negative
// entries and rows whose mass strays from 1 by more than 1e-9.
diff::Tensor soft_embed(diff::Graph* g, const LanguageModel& lm, const diff::Tensor& probs);

// Logits after consuming a full context. The soft overload takes probability
// rows (1 x |V| each) and is differentiable end to end.
diff::Tensor next_logits(const LanguageModel& lm, const std::vector<int>& context);
diff::Tensor next_logits(diff::Graph* g, const LanguageModel& lm,
                         const std::vector<diff::Tensor>& soft_context);

// logits + mask row: specials pushed to kMaskLogit (EOS exempt on request).
diff::Tensor mask_specials(diff::Graph* g, const LanguageModel& lm, const diff::Tensor& logits,
                           bool allow_eos);

// Final hidden state after [SPB] seq [SPE] (1 x hidden).
diff::Tensor semantic_embedding(diff::Graph* g, const LanguageModel& lm,
                                const std::vector<int>& ids);
diff::Tensor semantic_embedding(diff::Graph* g, const LanguageModel& lm,
                                const std::vector<diff::Tensor>& soft_seq);

// ---------------------------------------------------------------- rewriting

struct RewriteResult {
    std::vector<diff::Tensor> probs;  // soft rows (1 x |V|), EOS row excluded
    std::vector<int> hard;            // argmax ids of those rows
};

// Autoregressive prompted edit of a soft sequence: feed [EPB] seq [EPE], then
// sample with Gumbel-Softmax at temperature tau_g until EOS wins the argmax
// or 1.5 x input length steps have run. Differentiable w.r.t. the input rows.
RewriteResult rewrite(diff::Graph* g, const LanguageModel& lm,
                      const std::vector<diff::Tensor>& input_probs, double tau_g, Rng& rng);

// Hard-token convenience: inputs become one-hot rows, outputs are hardened.
RewriteResult rewrite_hard(const LanguageModel& lm, const std::vector<int>& ids, double tau_g,
                           Rng& rng);

// ----------------------------------------------------------------- training

struct TrainLmReport {
    double final_loss = 0;       // next-token loss at the last such step
    double holdout_ppl = 0;      // teacher-forced perplexity on held-out lines
    double rewrite_acc = 0;      // teacher-forced token accuracy, held-out
    double anchor_pos_cos = 0;   // mean cosine of held-out paraphrase pairs
    double anchor_neg_cos = 0;   // mean cosine of mismatched pairs
    int steps = 0;

    nlohmann::json to_json() const;
};

// Pretrains on the corpus (one sentence per line), freezes, and reports.
// Throws with the step index if the loss turns non-finite.
LanguageModel train_lm(const std::vector<std::string>& corpus, const Grammar& grammar,
                       const tok::Tokenizer& tokenizer, const LmConfig& config,
                       TrainLmReport* report = nullptr);

// Teacher-forced perplexity over full sentences (BOS-prefixed).
double holdout_perplexity(const LanguageModel& lm, const std::vector<std::string>& sentences);

// Mean probability mass the model puts on grammar-legal successors, measured
// at every full-context position of the given sentences.
double legal_successor_mass(const LanguageModel& lm, const Grammar& grammar,
                            const std::vector<std::string>& sentences);

// ------------------------------------------------------------- persistence

void save_lm(const LanguageModel& lm, const std::string& path);
LanguageModel load_lm(const std::string& path);

}  // namespace wm::lm
