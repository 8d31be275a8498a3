#pragma once

// Synthetic text source: a second-order Markov grammar over a small word
// vocabulary, with synonym groups that share transition rows. Every
// distributional quantity used by the tests (stationary distribution, entropy
// rate, perplexity of a text, frequency variances) is computable exactly from
// the tables, which is what makes the generated corpus usable as an oracle.
//
// Construction: words are grouped into concepts (a concept = one word or a
// pair of synonyms with split probabilities). Concepts follow a second-order
// chain whose support depends only on the previous concept — the second-order
// context reweights probabilities within that support — so rows exist for
// every (prev2, prev1) pair while the successor graph stays sparse and
// strongly connected (each concept links to its two cyclic neighbours).
// Surface probability factorises as P(w | a, b) = P(concept(w) | ca, cb) *
// split(w), hence synonyms occupy identical grammatical slots by construction.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "wm/rng.hpp"

namespace wm {

struct GrammarParams {
    uint64_t seed = 1;
    int n_concepts = 96;
    int n_words = 128;        // surface words; n_words - n_concepts concepts get a synonym
    int branching = 5;        // successor concepts per concept
    double concentration = 1.3;  // row sharpness; larger = flatter rows
    double order2_mix = 0.15;    // weight of the second-order reweighting
    int min_len = 20;
    int max_len = 120;
    bool uniform_rows = false;   // exact 1/branching rows (degenerate test grammars)
};

struct Grammar {
    GrammarParams params;
    std::vector<std::string> words;          // word id -> surface form
    std::vector<int> concept_of;             // word id -> concept
    std::vector<std::vector<int>> words_of;  // concept -> word ids (1 or 2)
    std::vector<std::vector<double>> split;  // concept -> split probabilities
    std::vector<std::vector<int>> succ;      // concept -> successor concepts
    std::vector<std::vector<double>> base_row;  // concept -> probs over succ
    std::vector<std::vector<double>> alt_a;     // boosted variant (even successors up)
    std::vector<std::vector<double>> alt_b;     // mirrored variant
    std::vector<int> flavor;                    // concept -> which variant it induces as prev2

    // Derived analysis, filled by finalize().
    std::vector<double> pair_pi;   // stationary over pair states c2 * C + c1
    std::vector<double> word_pi;   // stationary surface unigram
    double entropy_rate = 0.0;     // nats per word
    double logprob_m2 = 0.0;       // E[(log p)^2] under stationarity
    // Mixed rows depend on c2 only through flavor[c2]; both variants are
    // precomputed per c1 so the oracles avoid per-call allocation.
    std::vector<std::vector<double>> row_variant[2];

    int n_concepts() const { return static_cast<int>(succ.size()); }
    int n_words() const { return static_cast<int>(words.size()); }

    // Row over succ[c1] for concept context (c2, c1).
    std::vector<double> concept_row(int c2, int c1) const;
    // P(w | a, b) for word ids; 0 when w is not a legal successor.
    double transition_prob(int a, int b, int w) const;
    // Legal successor words of (a, b) with their probabilities.
    std::vector<std::pair<int, double>> successor_words(int a, int b) const;
    // Word ids interchangeable with w (same concept), excluding w itself.
    std::vector<int> synonyms_of(int w) const;
    int word_id(const std::string& s) const;  // -1 when unknown

    // Autocovariance-corrected variance of the empirical frequency of word w
    // over n stationary tokens (truncated at max_lag; the tail is negligible
    // for these fast-mixing chains).
    double freq_variance(int w, long long n_tokens, int max_lag = 60) const;

    void finalize();  // solves the stationary distribution and moments

    nlohmann::json to_json() const;
    static Grammar from_json(const nlohmann::json& j);
};

Grammar build_grammar(const GrammarParams& p);

// One sentence as word ids; the start context is drawn from the stationary
// pair distribution, so every emitted position is stationary.
std::vector<int> sample_sentence(const Grammar& g, Rng& rng);

// n sentences, each a space-joined line of surface words.
std::vector<std::string> make_corpus(const Grammar& g, int n_sentences, uint64_t seed);

// exp of the mean negative log transition probability over positions with a
// full two-word context. Unknown words and grammar-illegal transitions take a
// floor probability of 1e-6. Rejects texts with no scorable position.
double true_perplexity(const Grammar& g, const std::vector<int>& word_ids);
double true_perplexity(const Grammar& g, const std::vector<std::string>& tokens);
double true_perplexity_text(const Grammar& g, const std::string& text);

}  // namespace wm
