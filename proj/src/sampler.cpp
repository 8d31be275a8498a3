#include "wm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

namespace wm::smp {

using diff::Graph;
using diff::Tensor;

// ------------------------------------------------------------------- config

nlohmann::json GenerationConfig::to_json() const {
    return {{"max_tokens", max_tokens}, {"tau_g", tau_g},
            {"temperature", temperature}, {"seed", seed},
            {"delta", delta},           {"k", k},
            {"watermark", watermark},   {"key", key},
            {"trace_hard", trace_hard}};
}

GenerationConfig GenerationConfig::from_json(const nlohmann::json& j) {
    GenerationConfig c;
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.tau_g = j.value("tau_g", c.tau_g);
    c.temperature = j.value("temperature", c.temperature);
    c.seed = j.value("seed", c.seed);
    c.delta = j.value("delta", c.delta);
    c.k = j.value("k", c.k);
    c.watermark = j.value("watermark", c.watermark);
    c.key = j.value("key", c.key);
    c.trace_hard = j.value("trace_hard", c.trace_hard);
    return c;
}

// --------------------------------------------------------------- primitives

std::vector<double> gumbel_noise(Rng& rng, int n) {
    if (n < 1) throw std::invalid_argument("gumbel_noise: n must be >= 1");
    std::vector<double> g(static_cast<size_t>(n));
    for (auto& x : g) x = rng.gumbel();
    return g;
}

Tensor gumbel_softmax(Graph* g, const Tensor& logits, double tau_g, Rng& rng) {
    auto noise = gumbel_noise(rng, static_cast<int>(logits.size()));
    return gumbel_softmax(g, logits, tau_g,
                          Tensor::from(logits.shape(), std::move(noise)));
}

Tensor gumbel_softmax(Graph* g, const Tensor& logits, double tau_g, const Tensor& noise) {
    if (!(tau_g > 0)) throw std::invalid_argument("gumbel_softmax: tau_g must be > 0");
    if (noise.rows() != logits.rows() || noise.cols() != logits.cols())
        throw std::invalid_argument("gumbel_softmax: noise is " + noise.shape_str() +
                                    ", logits are " + logits.shape_str());
    if (noise.flows())
        throw std::invalid_argument("gumbel_softmax: noise must be a constant");
    return diff::softmax_rows(g, diff::scale(g, diff::add(g, logits, noise), 1.0 / tau_g));
}

int hard_sample(const Tensor& logits, double temperature, Rng& rng) {
    if (!(temperature > 0)) throw std::invalid_argument("hard_sample: temperature must be > 0");
    if (logits.rows() != 1) throw std::invalid_argument("hard_sample: expected a single row");
    long long n = logits.size();
    double mx = logits.at(0);
    for (long long i = 1; i < n; ++i) mx = std::max(mx, logits.at(i));
    std::vector<double> w(static_cast<size_t>(n));
    for (long long i = 0; i < n; ++i) w[i] = std::exp((logits.at(i) - mx) / temperature);
    return static_cast<int>(rng.choice(w));  // exactly one uniform draw
}

// --------------------------------------------------------------- generation

std::vector<int> Generation::stream() const {
    std::vector<int> s = prompt;
    s.insert(s.end(), tokens.begin(), tokens.end());
    return s;
}

namespace {

void check_config(const std::vector<int>& prompt, const GenerationConfig& cfg) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (cfg.max_tokens < 1) throw std::invalid_argument("generate: max_tokens must be >= 1");
    if (!(cfg.tau_g > 0)) throw std::invalid_argument("generate: tau_g must be > 0");
    if (!(cfg.temperature > 0)) throw std::invalid_argument("generate: temperature must be > 0");
}

int argmax_row(const Tensor& row) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(row.size()); ++j)
        if (row.at(j) > row.at(best)) best = j;
    return best;
}

StepTrace make_trace(const enc::CandidateSet& cands, const enc::WatermarkLogits* wl, int chosen) {
    StepTrace st;
    st.cand_ids = cands.ids;
    st.base_topk = cands.base_logits;
    if (wl) {
        st.wm_topk.reserve(cands.ids.size());
        for (int i = 0; i < cands.k(); ++i) st.wm_topk.push_back(wl->topk.at(i));
    } else {
        st.wm_topk.assign(cands.ids.size(), 0.0);
    }
    st.chosen = chosen;
    auto it = std::find(st.cand_ids.begin(), st.cand_ids.end(), chosen);
    st.rank = it == st.cand_ids.end() ? -1 : static_cast<int>(it - st.cand_ids.begin());
    return st;
}

}  // namespace

Generation generate_hard(const lm::LanguageModel& lm, const enc::Encoder& e,
                         const std::vector<int>& prompt, const GenerationConfig& cfg) {
    check_config(prompt, cfg);
    auto rng = derive_rng(cfg.seed, "generate");
    enc::KeyBias bias;
    bool use_bias = cfg.watermark && !cfg.key.empty();
    if (use_bias) bias = enc::derive_key_bias(cfg.key, lm.vocab_size());

    Generation out;
    out.prompt = prompt;
    Tensor h = lm::initial_state(lm, 1);
    for (int id : prompt) h = lm::step_tokens(nullptr, lm, h, {id});
    std::vector<int> stream = prompt;

    for (int t = 0; t < cfg.max_tokens; ++t) {
        Tensor masked = lm::mask_specials(nullptr, lm, lm::output_logits(nullptr, lm, h), false);
        Tensor final_logits = masked;
        enc::CandidateSet cands;
        enc::WatermarkLogits wl;
        bool scored = false;
        if (cfg.watermark) {
            cands = enc::build_candidates(enc::context_window(stream, e.window), masked, cfg.k);
            wl = enc::watermark_logits(nullptr, e, lm, cands);
            final_logits = use_bias
                               ? enc::perturb(nullptr, masked, wl.full, cfg.delta, bias, cands.ids)
                               : enc::perturb(nullptr, masked, wl.full, cfg.delta);
            scored = true;
        }
        int chosen = hard_sample(final_logits, cfg.temperature, rng);
        if (cfg.trace_hard) {
            if (!scored)  // candidates for the record; no watermark was applied
                cands = enc::build_candidates(enc::context_window(stream, e.window), masked, cfg.k);
            out.trace.push_back(make_trace(cands, scored ? &wl : nullptr, chosen));
        }
        out.tokens.push_back(chosen);
        stream.push_back(chosen);
        h = lm::step_tokens(nullptr, lm, h, {chosen});
    }
    return out;
}

Generation generate_soft(Graph* g, const lm::LanguageModel& lm, const enc::Encoder& e,
                         const std::vector<int>& prompt, const GenerationConfig& cfg) {
    check_config(prompt, cfg);
    auto rng = derive_rng(cfg.seed, "generate");
    enc::KeyBias bias;
    bool use_bias = cfg.watermark && !cfg.key.empty();
    if (use_bias) bias = enc::derive_key_bias(cfg.key, lm.vocab_size());

    Generation out;
    out.prompt = prompt;
    Tensor h = lm::initial_state(lm, 1);
    for (int id : prompt) h = lm::step_tokens(g, lm, h, {id});
    std::vector<int> stream = prompt;

    // The trace replays the hardened stream through its own state, so the
    // stored candidate sets and watermark logits are exactly what retrieval
    // recomputes from the tokens later. The soft state below drives sampling
    // and carries all gradients; this side is bookkeeping only.
    Graph trace_g;
    Tensor h_hard = lm::initial_state(lm, 1);
    for (int id : prompt) h_hard = lm::step_tokens(&trace_g, lm, h_hard, {id});

    // Embedding rows of the encoder's context window; prompt rows come from
    // the frozen table, generated rows are the fed-back soft tokens.
    std::deque<Tensor> ctx_rows;
    for (int i = 0; i < e.window; ++i) {
        int pos = static_cast<int>(prompt.size()) - e.window + i;
        int id = pos >= 0 ? prompt[static_cast<size_t>(pos)] : tok::kPad;
        ctx_rows.push_back(diff::gather_rows(g, lm.emb, {id}));
    }

    for (int t = 0; t < cfg.max_tokens; ++t) {
        Tensor masked = lm::mask_specials(g, lm, lm::output_logits(g, lm, h), false);
        Tensor final_logits = masked;
        enc::CandidateSet cands =
            enc::build_candidates(enc::context_window(stream, e.window), masked, cfg.k);
        enc::WatermarkLogits wl;
        if (cfg.watermark) {
            wl = enc::watermark_logits(g, e, lm,
                                       std::vector<Tensor>(ctx_rows.begin(), ctx_rows.end()),
                                       cands);
            final_logits = use_bias
                               ? enc::perturb(g, masked, wl.full, cfg.delta, bias, cands.ids)
                               : enc::perturb(g, masked, wl.full, cfg.delta);
        }
        Tensor p = gumbel_softmax(g, final_logits, cfg.tau_g, rng);
        int chosen = argmax_row(p);

        Tensor masked_hard =
            lm::mask_specials(&trace_g, lm, lm::output_logits(&trace_g, lm, h_hard), false);
        enc::CandidateSet cands_hard =
            enc::build_candidates(enc::context_window(stream, e.window), masked_hard, cfg.k);
        enc::WatermarkLogits wl_hard;
        if (cfg.watermark) wl_hard = enc::watermark_logits(&trace_g, e, lm, cands_hard);
        out.trace.push_back(make_trace(cands_hard, cfg.watermark ? &wl_hard : nullptr, chosen));
        h_hard = lm::step_tokens(&trace_g, lm, h_hard, {chosen});

        out.probs.push_back(p);
        out.tokens.push_back(chosen);
        stream.push_back(chosen);

        Tensor x = lm::soft_embed(g, lm, p);  // 1 x d soft token
        h = lm::step_soft(g, lm, h, x);
        ctx_rows.pop_front();
        ctx_rows.push_back(x);
    }
    return out;
}

nlohmann::json generation_record(const Generation& gen, const tok::Tokenizer& tk,
                                 const GenerationConfig& cfg, const std::string& id) {
    return {{"id", id},
            {"prompt", tk.detokenize(gen.prompt)},
            {"output", tk.detokenize(gen.tokens)},
            {"tokens", gen.tokens},
            {"watermark", cfg.watermark},
            {"seed", cfg.seed},
            {"delta", cfg.delta},
            {"k", cfg.k}};
}

}  // namespace wm::smp
