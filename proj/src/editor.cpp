#include "wm/editor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "wm/tokenizer.hpp"

namespace wm::ed {

using diff::Graph;
using diff::Tensor;

// ------------------------------------------------------------------- config

nlohmann::json EditConfig::to_json() const {
    return {{"activation", activation},   {"online_mix", online_mix},
            {"channel_mix", channel_mix}, {"drop_prob", drop_prob},
            {"sub_prob", sub_prob},       {"copy_ratio", copy_ratio},
            {"replace_ratio", replace_ratio}, {"tau_g", tau_g}};
}

EditConfig EditConfig::from_json(const nlohmann::json& j) {
    EditConfig c;
    c.activation = j.value("activation", c.activation);
    c.online_mix = j.value("online_mix", c.online_mix);
    c.channel_mix = j.value("channel_mix", c.channel_mix);
    c.drop_prob = j.value("drop_prob", c.drop_prob);
    c.sub_prob = j.value("sub_prob", c.sub_prob);
    c.copy_ratio = j.value("copy_ratio", c.copy_ratio);
    c.replace_ratio = j.value("replace_ratio", c.replace_ratio);
    c.tau_g = j.value("tau_g", c.tau_g);
    c.validate();
    return c;
}

void EditConfig::validate() const {
    auto prob = [](double p, const char* name) {
        if (!(p >= 0 && p <= 1))
            throw std::invalid_argument(std::string("EditConfig: ") + name +
                                        " must lie in [0, 1], got " + std::to_string(p));
    };
    prob(activation, "activation");
    prob(online_mix, "online_mix");
    prob(drop_prob, "drop_prob");
    prob(sub_prob, "sub_prob");
    prob(replace_ratio, "replace_ratio");
    if (!(copy_ratio > 0 && copy_ratio <= 1))
        throw std::invalid_argument("EditConfig: copy_ratio must lie in (0, 1]");
    if (channel_mix.size() != 3)
        throw std::invalid_argument("EditConfig: channel_mix needs 3 weights (drop, substitute, copypaste)");
    double s = 0;
    for (double w : channel_mix) {
        if (w < 0) throw std::invalid_argument("EditConfig: channel weights must be >= 0");
        s += w;
    }
    if (!(s > 0)) throw std::invalid_argument("EditConfig: channel weights must have positive mass");
    if (!(tau_g > 0)) throw std::invalid_argument("EditConfig: tau_g must be > 0");
}

// --------------------------------------------------------- training (soft)

std::vector<Tensor> edit_online(Graph* g, const lm::LanguageModel& lm,
                                const std::vector<Tensor>& soft_wm, double tau_g, Rng& rng) {
    if (soft_wm.empty()) throw std::invalid_argument("edit_online: empty sequence");
    int chunk = std::max(1, lm.config.chunk);
    std::vector<Tensor> out;
    for (size_t start = 0; start < soft_wm.size(); start += static_cast<size_t>(chunk)) {
        size_t stop = std::min(soft_wm.size(), start + static_cast<size_t>(chunk));
        std::vector<Tensor> piece(soft_wm.begin() + static_cast<long>(start),
                                  soft_wm.begin() + static_cast<long>(stop));
        auto rr = lm::rewrite(g, lm, piece, tau_g, rng);
        out.insert(out.end(), rr.probs.begin(), rr.probs.end());
    }
    // A rewrite that deleted everything would leave nothing to train on;
    // fall back to the unedited sequence (vanishingly rare after pretraining).
    return out.empty() ? soft_wm : out;
}

namespace {

Tensor one_hot_row(int id, int vocab) {
    if (id < 0 || id >= vocab)
        throw std::out_of_range("editor: token id " + std::to_string(id) +
                                " outside vocabulary of " + std::to_string(vocab));
    Tensor r = Tensor::zeros({1, vocab});
    r.d->v[static_cast<size_t>(id)] = 1.0;
    return r;
}

// Fixed linear map sending every token's probability mass to its grammar
// synonym (identity for singletons, specials, and non-word pieces). One-hot
// rows keep each output row a distribution.
Tensor synonym_permutation(const Grammar& grammar, int vocab) {
    Tensor p = Tensor::zeros({vocab, vocab});
    for (int t = 0; t < vocab; ++t) {
        int target = t;
        int wid = t - tok::kFirstContent;
        if (wid >= 0 && wid < grammar.n_words()) {
            const auto& others = grammar.synonyms_of(wid);
            if (!others.empty()) target = others.front() + tok::kFirstContent;
        }
        p.d->v[static_cast<size_t>(t) * vocab + target] = 1.0;
    }
    return p;
}

// Hard non-watermarked ids for a copy-paste context: `n` tokens drawn from
// randomly chosen pool entries.
std::vector<int> pool_tokens(const std::vector<std::vector<int>>& pool, int n, Rng& rng) {
    if (pool.empty()) throw std::invalid_argument("editor: copy-paste needs a non-watermarked pool");
    std::vector<int> out;
    out.reserve(static_cast<size_t>(n));
    while (static_cast<int>(out.size()) < n) {
        const auto& entry = pool[rng.below(pool.size())];
        if (entry.empty()) throw std::invalid_argument("editor: empty pool entry");
        for (int id : entry) {
            out.push_back(id);
            if (static_cast<int>(out.size()) == n) break;
        }
    }
    return out;
}

enum class Channel { drop = 0, substitute = 1, copypaste = 2 };

std::pair<std::vector<Tensor>, std::string> apply_channel(
    Graph* g, const lm::LanguageModel& lm, const Grammar& grammar,
    const std::vector<Tensor>& soft_wm, const std::vector<std::vector<int>>& nwm_pool,
    const EditConfig& cfg, Rng& rng) {
    auto ch = static_cast<Channel>(rng.choice(cfg.channel_mix));
    int vocab = lm.vocab_size();
    switch (ch) {
        case Channel::drop: {
            std::vector<Tensor> out;
            for (const auto& row : soft_wm)
                if (rng.uniform() >= cfg.drop_prob) out.push_back(row);
            if (out.empty())
                throw std::invalid_argument("edit_channels: drop removed every position");
            return {std::move(out), "drop"};
        }
        case Channel::substitute: {
            Tensor perm = synonym_permutation(grammar, vocab);
            std::vector<Tensor> out;
            out.reserve(soft_wm.size());
            for (const auto& row : soft_wm)
                out.push_back(rng.uniform() < cfg.sub_prob ? diff::matmul(g, row, perm) : row);
            return {std::move(out), "substitute"};
        }
        case Channel::copypaste: {
            int len = static_cast<int>(soft_wm.size());
            int total = static_cast<int>(std::ceil(len / cfg.copy_ratio));
            int n_ctx = total - len;
            std::vector<Tensor> out;
            out.reserve(static_cast<size_t>(total));
            if (n_ctx > 0) {
                auto ids = pool_tokens(nwm_pool, n_ctx, rng);
                int offset = static_cast<int>(rng.below(static_cast<uint64_t>(n_ctx + 1)));
                for (int i = 0; i < offset; ++i) out.push_back(one_hot_row(ids[i], vocab));
                out.insert(out.end(), soft_wm.begin(), soft_wm.end());
                for (int i = offset; i < n_ctx; ++i) out.push_back(one_hot_row(ids[i], vocab));
            } else {
                out = soft_wm;
            }
            return {std::move(out), "copypaste"};
        }
    }
    throw std::logic_error("edit_channels: unreachable");
}

}  // namespace

std::vector<Tensor> edit_channels(Graph* g, const lm::LanguageModel& lm, const Grammar& grammar,
                                  const std::vector<Tensor>& soft_wm,
                                  const std::vector<std::vector<int>>& nwm_pool,
                                  const EditConfig& cfg, Rng& rng) {
    if (soft_wm.empty()) throw std::invalid_argument("edit_channels: empty sequence");
    cfg.validate();
    return apply_channel(g, lm, grammar, soft_wm, nwm_pool, cfg, rng).first;
}

EditOutcome noise_layer(Graph* g, const lm::LanguageModel& lm, const Grammar& grammar,
                        const std::vector<Tensor>& soft_wm,
                        const std::vector<std::vector<int>>& nwm_pool, const EditConfig& cfg,
                        Rng& rng) {
    if (soft_wm.empty()) throw std::invalid_argument("noise_layer: empty sequence");
    cfg.validate();
    if (rng.uniform() >= cfg.activation) return {soft_wm, "none"};
    if (rng.uniform() < cfg.online_mix)
        return {edit_online(g, lm, soft_wm, cfg.tau_g, rng), "online"};
    auto [seq, name] = apply_channel(g, lm, grammar, soft_wm, nwm_pool, cfg, rng);
    return {std::move(seq), std::move(name)};
}

// -------------------------------------------------------- evaluation (hard)

AttackKind attack_kind_from(const std::string& name) {
    if (name == "none") return AttackKind::none;
    if (name == "synonym") return AttackKind::synonym;
    if (name == "paraphrase") return AttackKind::paraphrase;
    if (name == "copypaste") return AttackKind::copypaste;
    throw std::invalid_argument("attack: unknown kind '" + name + "'");
}

std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::none: return "none";
        case AttackKind::synonym: return "synonym";
        case AttackKind::paraphrase: return "paraphrase";
        case AttackKind::copypaste: return "copypaste";
    }
    throw std::logic_error("attack kind: unreachable");
}

std::vector<int> attack(const std::vector<int>& tokens, AttackKind kind, const EditConfig& cfg,
                        const Grammar& grammar, const lm::LanguageModel& lm, Rng& rng) {
    if (tokens.empty()) throw std::invalid_argument("attack: empty token sequence");
    cfg.validate();
    switch (kind) {
        case AttackKind::none:
            return tokens;
        case AttackKind::synonym: {
            std::vector<int> out = tokens;
            for (auto& t : out) {
                int wid = t - tok::kFirstContent;
                if (wid < 0 || wid >= grammar.n_words()) continue;
                const auto& others = grammar.synonyms_of(wid);
                if (others.empty()) continue;  // singleton: not eligible
                if (rng.uniform() < cfg.replace_ratio) t = others.front() + tok::kFirstContent;
            }
            return out;
        }
        case AttackKind::paraphrase: {
            int chunk = std::max(1, lm.config.chunk);
            std::vector<int> out;
            for (size_t start = 0; start < tokens.size(); start += static_cast<size_t>(chunk)) {
                size_t stop = std::min(tokens.size(), start + static_cast<size_t>(chunk));
                std::vector<int> piece(tokens.begin() + static_cast<long>(start),
                                       tokens.begin() + static_cast<long>(stop));
                auto rr = lm::rewrite_hard(lm, piece, cfg.tau_g, rng);
                // A rewrite that deleted the whole chunk keeps the original:
                // the attack must still hand back usable text.
                if (rr.hard.empty())
                    out.insert(out.end(), piece.begin(), piece.end());
                else
                    out.insert(out.end(), rr.hard.begin(), rr.hard.end());
            }
            return out;
        }
        case AttackKind::copypaste: {
            int len = static_cast<int>(tokens.size());
            int total = static_cast<int>(std::ceil(len / cfg.copy_ratio));
            int n_ctx = total - len;
            std::vector<int> ctx;
            ctx.reserve(static_cast<size_t>(n_ctx));
            while (static_cast<int>(ctx.size()) < n_ctx) {
                auto sent = sample_sentence(grammar, rng);
                for (int wid : sent) {
                    ctx.push_back(wid + tok::kFirstContent);
                    if (static_cast<int>(ctx.size()) == n_ctx) break;
                }
            }
            int offset = n_ctx > 0 ? static_cast<int>(rng.below(static_cast<uint64_t>(n_ctx + 1))) : 0;
            std::vector<int> out(ctx.begin(), ctx.begin() + offset);
            out.insert(out.end(), tokens.begin(), tokens.end());
            out.insert(out.end(), ctx.begin() + offset, ctx.end());
            return out;
        }
    }
    throw std::logic_error("attack: unreachable");
}

}  // namespace wm::ed
