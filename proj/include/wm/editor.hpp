#pragma once

// Edit simulation in two roles:
//
//   training (soft domain): a noise layer that fires with a configured
//   probability and passes the watermarked soft sequence through either an
//   online prompted rewrite (the host LM editing its own output, end-to-end
//   differentiable) or one synthetic channel — token drops, synonym-directed
//   substitution, or copy-paste into non-watermarked text. Every output stays
//   a sequence of probability rows, so gradients keep flowing.
//
//   evaluation (hard tokens): the attack suite — synonym replacement,
//   chunked LM paraphrase, and copy-paste embedding into fresh grammar text.
//
// Channels operate on the word tokenizer's id layout (token id = word id +
// first content id); that is the tokenizer both training and the hard attacks
// run on.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "wm/grammar.hpp"
#include "wm/lm.hpp"
#include "wm/rng.hpp"
#include "wm/tensor.hpp"

namespace wm::ed {

struct EditConfig {
    double activation = 0.5;   // training: probability the noise layer fires
    double online_mix = 0.5;   // training: P(online rewrite | fired)
    // Synthetic-channel selection weights when the layer fires and the online
    // rewrite was not chosen: {drop, substitute, copypaste}.
    std::vector<double> channel_mix = {1.0, 1.0, 1.0};
    double drop_prob = 0.10;    // drop channel: i.i.d. removal probability
    double sub_prob = 0.30;     // substitute channel: per-position probability
    double copy_ratio = 0.25;   // copy-paste: watermarked fraction of the output
    double replace_ratio = 0.5; // synonym attack: per-eligible-word probability
    double tau_g = 0.1;         // Gumbel temperature of rewrite-based edits

    nlohmann::json to_json() const;
    static EditConfig from_json(const nlohmann::json& j);
    void validate() const;
};

// --------------------------------------------------------- training (soft)

// Chunked prompted rewrite of a soft sequence: consecutive chunks of
// lm.config.chunk rows each pass through the LM's edit prompt; outputs are
// concatenated. Differentiable w.r.t. the input rows. A degenerate rewrite
// that deletes everything falls back to the input unchanged.
std::vector<diff::Tensor> edit_online(diff::Graph* g, const lm::LanguageModel& lm,
                                      const std::vector<diff::Tensor>& soft_wm, double tau_g,
                                      Rng& rng);

// One synthetic channel, selected by cfg.channel_mix:
//   drop        remove positions i.i.d. with cfg.drop_prob
//   substitute  with cfg.sub_prob per position, move every token's probability
//               mass to its grammar synonym (a fixed linear map, so the row
//               stays a distribution and the op stays differentiable)
//   copy-paste  embed the sequence at a random offset into hard rows drawn
//               from nwm_pool so the watermarked fraction is cfg.copy_ratio
// Rejects edits that would leave an empty sequence.
std::vector<diff::Tensor> edit_channels(diff::Graph* g, const lm::LanguageModel& lm,
                                        const Grammar& grammar,
                                        const std::vector<diff::Tensor>& soft_wm,
                                        const std::vector<std::vector<int>>& nwm_pool,
                                        const EditConfig& cfg, Rng& rng);

// Training-time dispatcher: fires with cfg.activation; chooses the online
// rewrite with cfg.online_mix, otherwise a synthetic channel. `applied` names
// what happened: none | online | drop | substitute | copypaste.
struct EditOutcome {
    std::vector<diff::Tensor> seq;
    std::string applied;
};
EditOutcome noise_layer(diff::Graph* g, const lm::LanguageModel& lm, const Grammar& grammar,
                        const std::vector<diff::Tensor>& soft_wm,
                        const std::vector<std::vector<int>>& nwm_pool, const EditConfig& cfg,
                        Rng& rng);

// -------------------------------------------------------- evaluation (hard)

enum class AttackKind { none, synonym, paraphrase, copypaste };

AttackKind attack_kind_from(const std::string& name);  // unknown -> throws
std::string to_string(AttackKind k);

// Hard-token attack on a generation's output tokens.
//   synonym     each word with a synonym partner is replaced by it with
//               probability cfg.replace_ratio
//   paraphrase  chunked rewrite through the LM's edit prompt (hard sampling)
//   copypaste   the tokens are embedded verbatim at a random offset into
//               fresh grammar-sampled text so they make up cfg.copy_ratio
std::vector<int> attack(const std::vector<int>& tokens, AttackKind kind, const EditConfig& cfg,
                        const Grammar& grammar, const lm::LanguageModel& lm, Rng& rng);

}  // namespace wm::ed
