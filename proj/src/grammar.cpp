#include "wm/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace wm {

namespace {

std::vector<double> normalized(std::vector<double> v) {
    double s = 0;
    for (double x : v) s += x;
    for (double& x : v) x /= s;
    return v;
}

// Mild Dirichlet-style row: exponential draws raised to 1/concentration.
std::vector<double> random_row(int n, double concentration, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) x = std::pow(-std::log(rng.uniform_open()), 1.0 / concentration) + 0.05;
    return normalized(std::move(v));
}

std::string make_word(Rng& rng) {
    static const char cons[] = "bdfgklmnprstvz";
    static const char vows[] = "aeiou";
    int syll = 2 + static_cast<int>(rng.below(2));
    std::string w;
    for (int s = 0; s < syll; ++s) {
        w += cons[rng.below(sizeof cons - 1)];
        w += vows[rng.below(sizeof vows - 1)];
    }
    if (rng.uniform() < 0.4) w += cons[rng.below(sizeof cons - 1)];
    return w;
}

}  // namespace

std::vector<double> Grammar::concept_row(int c2, int c1) const {
    if (!row_variant[0].empty()) return row_variant[flavor[c2]][c1];
    const auto& base = base_row[c1];
    double mu = params.order2_mix;
    if (mu == 0.0) return base;
    const auto& alt = flavor[c2] ? alt_a[c1] : alt_b[c1];
    std::vector<double> row(base.size());
    for (size_t i = 0; i < base.size(); ++i) row[i] = (1.0 - mu) * base[i] + mu * alt[i];
    return row;
}

double Grammar::transition_prob(int a, int b, int w) const {
    int ca = concept_of[a], cb = concept_of[b], cw = concept_of[w];
    const auto& s = succ[cb];
    auto it = std::find(s.begin(), s.end(), cw);
    if (it == s.end()) return 0.0;
    auto row = concept_row(ca, cb);
    double p = row[static_cast<size_t>(it - s.begin())];
    const auto& ws = words_of[cw];
    for (size_t i = 0; i < ws.size(); ++i)
        if (ws[i] == w) return p * split[cw][i];
    return 0.0;
}

std::vector<std::pair<int, double>> Grammar::successor_words(int a, int b) const {
    int ca = concept_of[a], cb = concept_of[b];
    auto row = concept_row(ca, cb);
    std::vector<std::pair<int, double>> out;
    for (size_t i = 0; i < succ[cb].size(); ++i) {
        int c = succ[cb][i];
        for (size_t j = 0; j < words_of[c].size(); ++j)
            out.emplace_back(words_of[c][j], row[i] * split[c][j]);
    }
    return out;
}

std::vector<int> Grammar::synonyms_of(int w) const {
    std::vector<int> out;
    for (int u : words_of[concept_of[w]])
        if (u != w) out.push_back(u);
    return out;
}

int Grammar::word_id(const std::string& s) const {
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == s) return static_cast<int>(i);
    return -1;
}

void Grammar::finalize() {
    int C = n_concepts();
    long long P = static_cast<long long>(C) * C;
    // Materialise both row variants per c1.
    double mu = params.order2_mix;
    for (int f = 0; f < 2; ++f) {
        row_variant[f].assign(C, {});
        for (int c1 = 0; c1 < C; ++c1) {
            const auto& base = base_row[c1];
            const auto& alt = f ? alt_a[c1] : alt_b[c1];
            auto& row = row_variant[f][c1];
            row.resize(base.size());
            for (size_t i = 0; i < base.size(); ++i) row[i] = (1.0 - mu) * base[i] + mu * alt[i];
        }
    }
    // Power iteration over pair states (c2, c1) -> (c1, c').
    std::vector<double> pi(P, 1.0 / P), next(P);
    for (int iter = 0; iter < 4000; ++iter) {
        std::fill(next.begin(), next.end(), 0.0);
        for (int c2 = 0; c2 < C; ++c2) {
            for (int c1 = 0; c1 < C; ++c1) {
                double mass = pi[static_cast<long long>(c2) * C + c1];
                if (mass == 0.0) continue;
                const auto& row = row_variant[flavor[c2]][c1];
                const auto& s = succ[c1];
                for (size_t i = 0; i < s.size(); ++i)
                    next[static_cast<long long>(c1) * C + s[i]] += mass * row[i];
            }
        }
        double diff = 0;
        for (long long i = 0; i < P; ++i) diff += std::abs(next[i] - pi[i]);
        pi.swap(next);
        if (diff < 1e-13) break;
        if (iter == 3999 && diff > 1e-10)
            throw std::runtime_error("grammar: stationary distribution failed to converge");
    }
    pair_pi = std::move(pi);

    // Entropy rate and second moment of -log p at the surface level.
    double H = 0, M2 = 0;
    std::vector<double> concept_occ(C, 0.0);
    for (int c2 = 0; c2 < C; ++c2) {
        for (int c1 = 0; c1 < C; ++c1) {
            double mass = pair_pi[static_cast<long long>(c2) * C + c1];
            if (mass == 0.0) continue;
            concept_occ[c1] += mass;
            const auto& row = row_variant[flavor[c2]][c1];
            const auto& s = succ[c1];
            for (size_t i = 0; i < s.size(); ++i) {
                int c = s[i];
                double pc = row[i];
                if (pc == 0.0) continue;
                for (size_t j = 0; j < words_of[c].size(); ++j) {
                    double pw = pc * split[c][j];
                    if (pw == 0.0) continue;
                    double lp = std::log(pw);
                    H -= mass * pw * lp;
                    M2 += mass * pw * lp * lp;
                }
            }
        }
    }
    entropy_rate = H;
    logprob_m2 = M2;

    word_pi.assign(words.size(), 0.0);
    for (size_t w = 0; w < words.size(); ++w) {
        int c = concept_of[w];
        const auto& ws = words_of[c];
        for (size_t j = 0; j < ws.size(); ++j)
            if (ws[j] == static_cast<int>(w)) word_pi[w] = concept_occ[c] * split[c][j];
    }
}

double Grammar::freq_variance(int w, long long n_tokens, int max_lag) const {
    int C = n_concepts();
    long long P = static_cast<long long>(C) * C;
    int cw = concept_of[w];
    double sw = 0;
    for (size_t j = 0; j < words_of[cw].size(); ++j)
        if (words_of[cw][j] == w) sw = split[cw][j];
    double piw = word_pi[w];
    // gamma_0 for the word indicator.
    double var = piw * (1.0 - piw);
    // u_0 = pi restricted to pairs ending in cw; propagate and read mass back.
    std::vector<double> u(P, 0.0), nu(P);
    for (int c2 = 0; c2 < C; ++c2) u[static_cast<long long>(c2) * C + cw] = pair_pi[static_cast<long long>(c2) * C + cw];
    for (int lag = 1; lag <= max_lag; ++lag) {
        std::fill(nu.begin(), nu.end(), 0.0);
        for (int c2 = 0; c2 < C; ++c2) {
            for (int c1 = 0; c1 < C; ++c1) {
                double mass = u[static_cast<long long>(c2) * C + c1];
                if (mass == 0.0) continue;
                const auto& row = row_variant[flavor[c2]][c1];
                const auto& s = succ[c1];
                for (size_t i = 0; i < s.size(); ++i)
                    nu[static_cast<long long>(c1) * C + s[i]] += mass * row[i];
            }
        }
        u.swap(nu);
        double joint_c = 0;  // P(C_0 = cw, C_lag = cw)
        for (int c2 = 0; c2 < C; ++c2) joint_c += u[static_cast<long long>(c2) * C + cw];
        double gamma = sw * sw * joint_c - piw * piw;
        var += 2.0 * gamma;
    }
    return var / static_cast<double>(n_tokens);
}

Grammar build_grammar(const GrammarParams& p) {
    if (p.n_words < p.n_concepts || p.n_concepts < 1)
        throw std::invalid_argument("grammar: need n_words >= n_concepts >= 1");
    if (p.n_words > 2 * p.n_concepts)
        throw std::invalid_argument("grammar: synonym groups hold at most 2 words");
    if (p.branching < 1 || p.branching > p.n_concepts)
        throw std::invalid_argument("grammar: branching must be in [1, n_concepts]");
    if (p.min_len < 1 || p.max_len < p.min_len)
        throw std::invalid_argument("grammar: bad sentence length bounds");

    Grammar g;
    g.params = p;
    Rng rng = derive_rng(p.seed, "grammar-build");
    int C = p.n_concepts;

    // Distinct surface forms.
    std::set<std::string> seen;
    while (static_cast<int>(g.words.size()) < p.n_words) {
        std::string w = make_word(rng);
        if (seen.insert(w).second) g.words.push_back(w);
    }

    // First n_concepts words are concept heads; the remainder become synonyms
    // of evenly spaced concepts.
    g.words_of.assign(C, {});
    g.concept_of.assign(p.n_words, 0);
    for (int w = 0; w < C; ++w) {
        g.concept_of[w] = w;
        g.words_of[w].push_back(w);
    }
    int extra = p.n_words - C;
    for (int e = 0; e < extra; ++e) {
        int c = extra == 0 ? 0 : static_cast<int>((static_cast<long long>(e) * C) / extra);
        int w = C + e;
        g.concept_of[w] = c;
        g.words_of[c].push_back(w);
    }
    g.split.assign(C, {});
    for (int c = 0; c < C; ++c) {
        if (g.words_of[c].size() == 1) {
            g.split[c] = {1.0};
        } else {
            double s = 0.35 + 0.3 * rng.uniform();
            g.split[c] = {s, 1.0 - s};
        }
    }

    // Successor sets: the two cyclic neighbours guarantee irreducibility and
    // aperiodicity; the rest are random distinct concepts.
    g.succ.assign(C, {});
    for (int c = 0; c < C; ++c) {
        std::set<int> s;
        if (C > 1) {
            s.insert((c + 1) % C);
            if (p.branching >= 2) s.insert((c + 2) % C);
        } else {
            s.insert(0);
        }
        while (static_cast<int>(s.size()) < p.branching) s.insert(static_cast<int>(rng.below(C)));
        g.succ[c].assign(s.begin(), s.end());
    }

    g.base_row.assign(C, {});
    g.alt_a.assign(C, {});
    g.alt_b.assign(C, {});
    for (int c = 0; c < C; ++c) {
        int b = static_cast<int>(g.succ[c].size());
        if (p.uniform_rows) {
            g.base_row[c].assign(b, 1.0 / b);
        } else {
            g.base_row[c] = random_row(b, p.concentration, rng);
        }
        std::vector<double> wa(b), wb(b);
        for (int i = 0; i < b; ++i) {
            wa[i] = g.base_row[c][i] * (i % 2 == 0 ? 1.6 : 0.625);
            wb[i] = g.base_row[c][i] * (i % 2 == 0 ? 0.625 : 1.6);
        }
        g.alt_a[c] = normalized(std::move(wa));
        g.alt_b[c] = normalized(std::move(wb));
    }
    g.flavor.assign(C, 0);
    for (int c = 0; c < C; ++c) g.flavor[c] = rng.uniform() < 0.5 ? 0 : 1;

    g.finalize();
    return g;
}

std::vector<int> sample_sentence(const Grammar& g, Rng& rng) {
    int C = g.n_concepts();
    int len = g.params.min_len + static_cast<int>(rng.below(
        static_cast<uint64_t>(g.params.max_len - g.params.min_len + 1)));
    size_t start = rng.choice(g.pair_pi);
    int c2 = static_cast<int>(start) / C;
    int c1 = static_cast<int>(start) % C;
    std::vector<int> out;
    out.reserve(len);
    for (int t = 0; t < len; ++t) {
        const auto& row = g.row_variant[g.flavor[c2]][c1];
        int ci = static_cast<int>(rng.choice(row));
        int c = g.succ[c1][ci];
        int wi = g.words_of[c].size() == 1 ? 0 : static_cast<int>(rng.choice(g.split[c]));
        out.push_back(g.words_of[c][wi]);
        c2 = c1;
        c1 = c;
    }
    return out;
}

std::vector<std::string> make_corpus(const Grammar& g, int n_sentences, uint64_t seed) {
    if (n_sentences < 1) throw std::invalid_argument("make_corpus: need at least one sentence");
    Rng rng = derive_rng(seed, "corpus");
    std::vector<std::string> out;
    out.reserve(n_sentences);
    for (int i = 0; i < n_sentences; ++i) {
        std::vector<int> ids = sample_sentence(g, rng);
        std::string line;
        for (size_t j = 0; j < ids.size(); ++j) {
            if (j) line += ' ';
            line += g.words[ids[j]];
        }
        out.push_back(std::move(line));
    }
    return out;
}

double true_perplexity(const Grammar& g, const std::vector<int>& word_ids) {
    if (word_ids.empty()) throw std::invalid_argument("true_perplexity: empty text");
    if (word_ids.size() < 3)
        throw std::invalid_argument("true_perplexity: no position has a full two-word context");
    constexpr double kFloor = 1e-6;
    double total = 0;
    int n = 0;
    for (size_t t = 2; t < word_ids.size(); ++t) {
        int a = word_ids[t - 2], b = word_ids[t - 1], w = word_ids[t];
        double p = (a < 0 || b < 0 || w < 0) ? kFloor : g.transition_prob(a, b, w);
        if (p <= 0.0) p = kFloor;
        total += -std::log(p);
        ++n;
    }
    return std::exp(total / n);
}

double true_perplexity(const Grammar& g, const std::vector<std::string>& tokens) {
    std::vector<int> ids(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) ids[i] = g.word_id(tokens[i]);
    return true_perplexity(g, ids);
}

double true_perplexity_text(const Grammar& g, const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> tokens;
    std::string w;
    while (is >> w) tokens.push_back(w);
    return true_perplexity(g, tokens);
}

nlohmann::json Grammar::to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["params"] = {{"seed", params.seed},
                   {"n_concepts", params.n_concepts},
                   {"n_words", params.n_words},
                   {"branching", params.branching},
                   {"concentration", params.concentration},
                   {"order2_mix", params.order2_mix},
                   {"min_len", params.min_len},
                   {"max_len", params.max_len},
                   {"uniform_rows", params.uniform_rows}};
    j["words"] = words;
    j["concept_of"] = concept_of;
    j["split"] = split;
    j["succ"] = succ;
    j["base_row"] = base_row;
    j["alt_a"] = alt_a;
    j["alt_b"] = alt_b;
    j["flavor"] = flavor;
    return j;
}

Grammar Grammar::from_json(const nlohmann::json& j) {
    if (j.value("format_version", -1) != 1)
        throw std::runtime_error("grammar: unsupported format_version");
    Grammar g;
    const auto& p = j.at("params");
    g.params.seed = p.at("seed").get<uint64_t>();
    g.params.n_concepts = p.at("n_concepts").get<int>();
    g.params.n_words = p.at("n_words").get<int>();
    g.params.branching = p.at("branching").get<int>();
    g.params.concentration = p.at("concentration").get<double>();
    g.params.order2_mix = p.at("order2_mix").get<double>();
    g.params.min_len = p.at("min_len").get<int>();
    g.params.max_len = p.at("max_len").get<int>();
    g.params.uniform_rows = p.at("uniform_rows").get<bool>();
    j.at("words").get_to(g.words);
    j.at("concept_of").get_to(g.concept_of);
    j.at("split").get_to(g.split);
    j.at("succ").get_to(g.succ);
    j.at("base_row").get_to(g.base_row);
    j.at("alt_a").get_to(g.alt_a);
    j.at("alt_b").get_to(g.alt_b);
    j.at("flavor").get_to(g.flavor);
    g.words_of.assign(g.params.n_concepts, {});
    for (size_t w = 0; w < g.concept_of.size(); ++w)
        g.words_of[g.concept_of[w]].push_back(static_cast<int>(w));
    g.finalize();
    return g;
}

}  // namespace wm
