#include "wm/lm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "wm/checkpoint.hpp"
#include "wm/optim.hpp"

namespace wm::lm {

using diff::Graph;
using diff::Tensor;

// ------------------------------------------------------------------ config

nlohmann::json LmConfig::to_json() const {
    return {{"d_model", d_model},     {"d_hidden", d_hidden},
            {"steps", steps},         {"batch", batch},
            {"crop", crop},           {"chunk", chunk},
            {"lr", lr},               {"clip", clip},
            {"drop_prob", drop_prob}, {"pair_boost", pair_boost},
            {"anchor_min", anchor_min},
            {"anchor_max", anchor_max}, {"margin", margin},
            {"holdout_frac", holdout_frac}, {"seed", seed}};
}

LmConfig LmConfig::from_json(const nlohmann::json& j) {
    LmConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.d_hidden = j.value("d_hidden", c.d_hidden);
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.crop = j.value("crop", c.crop);
    c.chunk = j.value("chunk", c.chunk);
    c.lr = j.value("lr", c.lr);
    c.clip = j.value("clip", c.clip);
    c.drop_prob = j.value("drop_prob", c.drop_prob);
    c.pair_boost = j.value("pair_boost", c.pair_boost);
    c.anchor_min = j.value("anchor_min", c.anchor_min);
    c.anchor_max = j.value("anchor_max", c.anchor_max);
    c.margin = j.value("margin", c.margin);
    c.holdout_frac = j.value("holdout_frac", c.holdout_frac);
    c.seed = j.value("seed", c.seed);
    return c;
}

nlohmann::json TrainLmReport::to_json() const {
    return {{"final_loss", final_loss},     {"holdout_ppl", holdout_ppl},
            {"rewrite_acc", rewrite_acc},   {"anchor_pos_cos", anchor_pos_cos},
            {"anchor_neg_cos", anchor_neg_cos}, {"steps", steps}};
}

// ------------------------------------------------------------------- model

std::vector<Tensor> LanguageModel::params() const {
    std::vector<Tensor> p = {emb};
    auto cp = cell.params();
    p.insert(p.end(), cp.begin(), cp.end());
    p.push_back(w_out);
    p.push_back(b_out);
    return p;
}

std::vector<std::pair<std::string, Tensor>> LanguageModel::named_params() const {
    return {{"emb", emb}, {"wzx", cell.wzx}, {"wzh", cell.wzh}, {"bz", cell.bz},
            {"wcx", cell.wcx}, {"wch", cell.wch}, {"bc", cell.bc},
            {"w_out", w_out}, {"b_out", b_out}};
}

void LanguageModel::freeze() {
    // Clearing flows as well keeps the tape from recording gradient work for
    // weights nothing is allowed to update.
    for (auto& p : params()) p.d->requires_grad = p.d->flows = false;
    frozen = true;
}

uint64_t LanguageModel::weights_checksum() const {
    return ckpt::weights_checksum(named_params());
}

void LanguageModel::validate() const {
    if (emb.rows() != vocab_size())
        throw std::runtime_error("lm: embedding rows " + std::to_string(emb.rows()) +
                                 " != vocabulary size " + std::to_string(vocab_size()));
    if (emb.cols() != config.d_model || w_out.rows() != config.d_hidden ||
        w_out.cols() != vocab_size())
        throw std::runtime_error("lm: parameter shapes inconsistent with config");
}

LanguageModel init_lm(const tok::Tokenizer& tokenizer, const LmConfig& config) {
    if (tokenizer.vocab_size() <= tok::kNumSpecials)
        throw std::invalid_argument("init_lm: tokenizer has no content vocabulary");
    LanguageModel m;
    m.tokenizer = tokenizer;
    m.config = config;
    auto rng = derive_rng(config.seed, "lm-init");
    int v = tokenizer.vocab_size();
    m.emb = Tensor::uniform({v, config.d_model}, 0.1, rng);
    m.cell = diff::GruCell::init(config.d_model, config.d_hidden, rng);
    // Near-zero output projection: initial loss sits at ln |V|.
    m.w_out = Tensor::uniform({config.d_hidden, v}, 0.01, rng);
    m.b_out = Tensor::zeros({v}, true);
    m.validate();
    return m;
}

// ------------------------------------------------------------ forward steps

Tensor initial_state(const LanguageModel& lm, int batch) {
    return Tensor::zeros({batch, lm.config.d_hidden});
}

Tensor step_tokens(Graph* g, const LanguageModel& lm, const Tensor& h,
                   const std::vector<int>& ids) {
    for (int t : ids)
        if (t < 0 || t >= lm.vocab_size())
            throw std::out_of_range("lm: token id " + std::to_string(t) +
                                    " outside vocabulary of size " +
                                    std::to_string(lm.vocab_size()));
    Tensor x = diff::gather_rows(g, lm.emb, ids);
    return diff::gru_cell(g, x, h, lm.cell);
}

Tensor step_soft(Graph* g, const LanguageModel& lm, const Tensor& h, const Tensor& x) {
    return diff::gru_cell(g, x, h, lm.cell);
}

Tensor output_logits(Graph* g, const LanguageModel& lm, const Tensor& h) {
    return diff::affine(g, h, lm.w_out, lm.b_out);
}

Tensor soft_embed(Graph* g, const LanguageModel& lm, const Tensor& probs) {
    if (probs.cols() != lm.vocab_size())
        throw std::invalid_argument("soft_embed: row width != vocabulary size");
    int rows = probs.rows();
    for (int r = 0; r < rows; ++r) {
        double sum = 0;
        for (int j = 0; j < probs.cols(); ++j) {
            double p = probs.at(static_cast<long long>(r) * probs.cols() + j);
            if (p < 0) throw std::invalid_argument("soft_embed: negative probability");
            sum += p;
        }
        if (std::fabs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("soft_embed: row mass " + std::to_string(sum) +
                                        " is not 1");
    }
    return diff::matmul(g, probs, lm.emb);
}

Tensor next_logits(const LanguageModel& lm, const std::vector<int>& context) {
    if (context.empty()) throw std::invalid_argument("next_logits: empty context");
    Tensor h = initial_state(lm, 1);
    for (int t : context) h = step_tokens(nullptr, lm, h, {t});
    return output_logits(nullptr, lm, h);
}

Tensor next_logits(Graph* g, const LanguageModel& lm,
                   const std::vector<Tensor>& soft_context) {
    if (soft_context.empty()) throw std::invalid_argument("next_logits: empty context");
    Tensor h = initial_state(lm, 1);
    for (const auto& p : soft_context) h = step_soft(g, lm, h, soft_embed(g, lm, p));
    return output_logits(g, lm, h);
}

Tensor mask_specials(Graph* g, const LanguageModel& lm, const Tensor& logits, bool allow_eos) {
    int rows = logits.rows(), v = logits.cols();
    if (v != lm.vocab_size()) throw std::invalid_argument("mask_specials: width mismatch");
    Tensor mask = Tensor::zeros(logits.shape());
    for (int r = 0; r < rows; ++r)
        for (int s = 0; s < tok::kNumSpecials; ++s) {
            if (allow_eos && s == tok::kEos) continue;
            mask.d->v[static_cast<long long>(r) * v + s] = kMaskLogit;
        }
    return diff::add(g, logits, mask);
}

namespace {

Tensor fold_semantic(Graph* g, const LanguageModel& lm, const std::function<Tensor(Tensor)>& fold) {
    Tensor h = initial_state(lm, 1);
    h = step_tokens(g, lm, h, {tok::kSpb});
    h = fold(h);
    return step_tokens(g, lm, h, {tok::kSpe});
}

}  // namespace

Tensor semantic_embedding(Graph* g, const LanguageModel& lm, const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("semantic_embedding: empty sequence");
    return fold_semantic(g, lm, [&](Tensor h) {
        for (int t : ids) h = step_tokens(g, lm, h, {t});
        return h;
    });
}

Tensor semantic_embedding(Graph* g, const LanguageModel& lm,
                          const std::vector<Tensor>& soft_seq) {
    if (soft_seq.empty()) throw std::invalid_argument("semantic_embedding: empty sequence");
    return fold_semantic(g, lm, [&](Tensor h) {
        for (const auto& p : soft_seq) h = step_soft(g, lm, h, soft_embed(g, lm, p));
        return h;
    });
}

// ---------------------------------------------------------------- rewriting

namespace {

int row_argmax(const Tensor& row) {
    int best = 0;
    for (int j = 1; j < row.cols(); ++j)
        if (row.at(j) > row.at(best)) best = j;
    return best;
}

Tensor gumbel_noise_row(int v, Rng& rng) {
    Tensor n = Tensor::zeros({1, v});
    for (int j = 0; j < v; ++j) n.d->v[j] = rng.gumbel();
    return n;
}

}  // namespace

RewriteResult rewrite(Graph* g, const LanguageModel& lm, const std::vector<Tensor>& input_probs,
                      double tau_g, Rng& rng) {
    if (input_probs.empty()) throw std::invalid_argument("rewrite: empty input");
    if (tau_g <= 0) throw std::invalid_argument("rewrite: temperature must be positive");
    Tensor h = initial_state(lm, 1);
    h = step_tokens(g, lm, h, {tok::kEpb});
    // Reversed ingestion, matching how the rewrite task was pretrained.
    for (auto it = input_probs.rbegin(); it != input_probs.rend(); ++it)
        h = step_soft(g, lm, h, soft_embed(g, lm, *it));
    h = step_tokens(g, lm, h, {tok::kEpe});

    RewriteResult out;
    long long cap = std::max<long long>(1, (3 * static_cast<long long>(input_probs.size())) / 2);
    for (long long t = 0; t < cap; ++t) {
        Tensor logits = output_logits(g, lm, h);
        Tensor masked = mask_specials(g, lm, logits, /*allow_eos=*/true);
        Tensor noisy = diff::add(g, masked, gumbel_noise_row(lm.vocab_size(), rng));
        Tensor p = diff::softmax_rows(g, diff::scale(g, noisy, 1.0 / tau_g));
        int hard = row_argmax(p);
        if (hard == tok::kEos) break;
        out.probs.push_back(p);
        out.hard.push_back(hard);
        h = step_soft(g, lm, h, soft_embed(g, lm, p));
    }
    return out;
}

RewriteResult rewrite_hard(const LanguageModel& lm, const std::vector<int>& ids, double tau_g,
                           Rng& rng) {
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    for (int t : ids) {
        if (t < 0 || t >= lm.vocab_size())
            throw std::out_of_range("rewrite_hard: token id outside vocabulary");
        Tensor r = Tensor::zeros({1, lm.vocab_size()});
        r.d->v[t] = 1.0;
        rows.push_back(r);
    }
    return rewrite(nullptr, lm, rows, tau_g, rng);
}

// ----------------------------------------------------------------- training

namespace {

struct SeqRow {
    std::vector<int> in, tgt;  // equal length; tgt [PAD] positions carry no loss
    std::vector<double> wgt;   // optional per-position loss weights (empty = 1s)
};

// Teacher-forced mean cross-entropy over a ragged batch; optionally counts
// argmax hits on loss-carrying positions. Accuracy counters stay unweighted —
// weights shape the gradient, not the metric.
Tensor teacher_ce(Graph* g, const LanguageModel& lm, const std::vector<SeqRow>& rows,
                  long long* correct = nullptr, long long* counted = nullptr) {
    if (rows.empty()) throw std::invalid_argument("teacher_ce: empty batch");
    size_t lmax = 0;
    for (const auto& r : rows) {
        if (r.in.size() != r.tgt.size()) throw std::logic_error("teacher_ce: ragged row");
        if (!r.wgt.empty() && r.wgt.size() != r.tgt.size())
            throw std::logic_error("teacher_ce: ragged weights");
        lmax = std::max(lmax, r.in.size());
    }
    int b = static_cast<int>(rows.size());
    Tensor h = initial_state(lm, b);
    Tensor total;
    double n_total = 0;
    for (size_t t = 0; t < lmax; ++t) {
        std::vector<int> in_col(b, tok::kPad), tgt_col(b, tok::kPad);
        std::vector<double> w_col(b, 0.0);
        int cnt = 0;
        double w_cnt = 0;
        for (int r = 0; r < b; ++r)
            if (t < rows[r].in.size()) {
                in_col[r] = rows[r].in[t];
                tgt_col[r] = rows[r].tgt[t];
                if (tgt_col[r] != tok::kPad) {
                    ++cnt;
                    w_col[r] = rows[r].wgt.empty() ? 1.0 : rows[r].wgt[t];
                    w_cnt += w_col[r];
                }
            }
        h = step_tokens(g, lm, h, in_col);
        if (cnt == 0 || w_cnt <= 0) continue;
        Tensor logits = output_logits(g, lm, h);
        Tensor ce = diff::cross_entropy(g, logits, tgt_col, w_col, tok::kPad);
        Tensor w = diff::scale(g, ce, w_cnt);
        total = total.defined() ? diff::add(g, total, w) : w;
        n_total += w_cnt;
        if (correct) {
            int v = logits.cols();
            for (int r = 0; r < b; ++r) {
                if (tgt_col[r] == tok::kPad) continue;
                int best = 0;
                for (int j = 1; j < v; ++j)
                    if (logits.at(static_cast<long long>(r) * v + j) >
                        logits.at(static_cast<long long>(r) * v + best))
                        best = j;
                if (best == tgt_col[r]) ++*correct;
                ++*counted;
            }
        }
    }
    if (!total.defined()) throw std::invalid_argument("teacher_ce: no loss-carrying position");
    return diff::scale(g, total, 1.0 / n_total);
}

std::vector<std::string> sentence_words(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// Deterministic synonym swap (words with a synonym partner rotate to the next
// group member; singletons stay) plus independent token drops. Deterministic
// substitution keeps the teacher predictable, so token accuracy measures the
// model, not the teacher's coin flips. Never returns empty: when every token
// drops, the substituted-only sequence is used instead.
std::vector<std::string> paraphrase_words(const Grammar& gr, const std::vector<std::string>& x,
                                          double drop_prob, Rng& rng) {
    std::vector<std::string> subbed, kept;
    for (const auto& w : x) {
        int wid = gr.word_id(w);
        std::string rep = w;
        if (wid >= 0) {
            const auto& others = gr.synonyms_of(wid);
            if (!others.empty()) rep = gr.words[others.front()];
        }
        subbed.push_back(rep);
        if (rng.uniform() >= drop_prob) kept.push_back(rep);
    }
    return kept.empty() ? subbed : kept;
}

SeqRow rewrite_row(const Grammar& gr, const tok::Tokenizer& tk,
                   const std::vector<std::string>& words, int lo, int hi, double drop_prob,
                   double pair_boost, Rng& rng) {
    lo = std::min<int>(lo, static_cast<int>(words.size()));
    hi = std::min<int>(hi, static_cast<int>(words.size()));
    if (hi < lo) hi = lo;
    int m = lo + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo + 1)));
    size_t start = rng.below(words.size() - m + 1);
    std::vector<std::string> x(words.begin() + start, words.begin() + start + m);
    auto y = paraphrase_words(gr, x, drop_prob, rng);

    std::ostringstream xs;
    for (size_t i = 0; i < x.size(); ++i) xs << (i ? " " : "") << x[i];
    auto x_ids = tk.tokenize(xs.str());
    // Per-token output ids, with the loss upweighted on words that have a
    // synonym partner: those targets depend on exactly which group member was
    // ingested, a signal the other tasks never separate (synonyms share
    // contexts, and the anchor objective actively pulls them together).
    std::vector<int> y_ids;
    std::vector<double> y_wgt;
    for (const auto& w : y) {
        int wid = gr.word_id(w);
        double wt = (wid >= 0 && !gr.synonyms_of(wid).empty()) ? pair_boost : 1.0;
        for (int id : tk.tokenize(w)) {
            y_ids.push_back(id);
            y_wgt.push_back(wt);
        }
    }

    SeqRow r;
    r.in.push_back(tok::kEpb);
    // The source is fed reversed (classic seq2seq trick): the first output
    // token is then the most recently ingested one, which a small recurrent
    // state can recall far more reliably.
    r.in.insert(r.in.end(), x_ids.rbegin(), x_ids.rend());
    r.in.push_back(tok::kEpe);
    r.in.insert(r.in.end(), y_ids.begin(), y_ids.end());
    r.tgt.assign(x_ids.size() + 2, tok::kPad);
    r.tgt.pop_back();  // the [EPE] position predicts the first output token
    r.tgt.insert(r.tgt.end(), y_ids.begin(), y_ids.end());
    r.tgt.push_back(tok::kEos);
    if (pair_boost != 1.0) {
        r.wgt.assign(x_ids.size() + 1, 1.0);
        r.wgt.insert(r.wgt.end(), y_wgt.begin(), y_wgt.end());
        r.wgt.push_back(1.0);  // [EOS]
    }
    return r;
}

// Final hidden states after [SPB] row [SPE] for a ragged batch (B x hidden).
Tensor anchor_states(Graph* g, const LanguageModel& lm,
                     const std::vector<std::vector<int>>& rows) {
    int b = static_cast<int>(rows.size());
    size_t lmax = 0;
    for (const auto& r : rows) lmax = std::max(lmax, r.size());
    Tensor h = initial_state(lm, b);
    std::vector<Tensor> finals(b);
    // Stream per row: [SPB] ids... [SPE] [PAD]...; capture at the [SPE] step.
    for (size_t t = 0; t < lmax + 2; ++t) {
        std::vector<int> col(b, tok::kPad);
        for (int r = 0; r < b; ++r) {
            size_t n = rows[r].size();
            if (t == 0)
                col[r] = tok::kSpb;
            else if (t <= n)
                col[r] = rows[r][t - 1];
            else if (t == n + 1)
                col[r] = tok::kSpe;
        }
        h = step_tokens(g, lm, h, col);
        for (int r = 0; r < b; ++r)
            if (t == rows[r].size() + 1) finals[r] = diff::gather_rows(g, h, {r});
    }
    return diff::stack_rows(g, finals);
}

struct AnchorBatch {
    std::vector<std::vector<int>> x, xp;
};

AnchorBatch anchor_batch(const Grammar& gr, const tok::Tokenizer& tk,
                         const std::vector<std::vector<std::string>>& train_words,
                         const LmConfig& cfg, int b, Rng& rng) {
    AnchorBatch out;
    for (int i = 0; i < b; ++i) {
        const auto& words = train_words[rng.below(train_words.size())];
        int hi = std::min<int>(cfg.anchor_max, static_cast<int>(words.size()));
        int lo = std::min<int>(cfg.anchor_min, hi);
        int m = lo + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo + 1)));
        size_t start = rng.below(words.size() - m + 1);
        std::vector<std::string> x(words.begin() + start, words.begin() + start + m);
        auto xp = paraphrase_words(gr, x, cfg.drop_prob, rng);
        std::ostringstream xs, ps;
        for (size_t k = 0; k < x.size(); ++k) xs << (k ? " " : "") << x[k];
        for (size_t k = 0; k < xp.size(); ++k) ps << (k ? " " : "") << xp[k];
        out.x.push_back(tk.tokenize(xs.str()));
        out.xp.push_back(tk.tokenize(ps.str()));
    }
    return out;
}

Tensor anchor_loss(Graph* g, const LanguageModel& lm, const AnchorBatch& ab, double margin) {
    Tensor z = anchor_states(g, lm, ab.x);
    Tensor zp = anchor_states(g, lm, ab.xp);
    int b = static_cast<int>(ab.x.size());
    Tensor total;
    for (int r = 0; r < b; ++r) {
        Tensor zr = diff::gather_rows(g, z, {r});
        Tensor pos = diff::cos_sim(g, zr, diff::gather_rows(g, zp, {r}));
        Tensor neg = diff::cos_sim(g, zr, diff::gather_rows(g, zp, {(r + 1) % b}));
        Tensor term = diff::add(g, diff::add_const(g, diff::scale(g, pos, -1.0), 1.0),
                                diff::relu(g, diff::add_const(g, neg, -margin)));
        total = total.defined() ? diff::add(g, total, term) : term;
    }
    return diff::scale(g, total, 1.0 / b);
}

}  // namespace

double holdout_perplexity(const LanguageModel& lm, const std::vector<std::string>& sentences) {
    if (sentences.empty()) throw std::invalid_argument("holdout_perplexity: no sentences");
    double loss_sum = 0;
    long long n = 0;
    for (size_t i = 0; i < sentences.size(); i += 32) {
        std::vector<SeqRow> rows;
        for (size_t k = i; k < std::min(sentences.size(), i + 32); ++k) {
            auto ids = lm.tokenizer.tokenize(sentences[k]);
            if (ids.empty()) continue;
            SeqRow r;
            r.in.push_back(tok::kBos);
            r.in.insert(r.in.end(), ids.begin(), ids.end() - 1);
            r.tgt = ids;
            rows.push_back(std::move(r));
        }
        if (rows.empty()) continue;
        long long cnt = 0;
        for (const auto& r : rows) cnt += static_cast<long long>(r.tgt.size());
        loss_sum += teacher_ce(nullptr, lm, rows).value() * static_cast<double>(cnt);
        n += cnt;
    }
    if (n == 0) throw std::invalid_argument("holdout_perplexity: empty sentences");
    return std::exp(loss_sum / static_cast<double>(n));
}

double legal_successor_mass(const LanguageModel& lm, const Grammar& grammar,
                            const std::vector<std::string>& sentences) {
    if (lm.tokenizer.kind != tok::Kind::word ||
        lm.tokenizer.content_size() != grammar.n_words())
        throw std::invalid_argument("legal_successor_mass: needs the grammar's word tokenizer");
    double mass_sum = 0;
    long long n = 0;
    for (const auto& s : sentences) {
        auto ids = lm.tokenizer.tokenize(s);
        if (ids.size() < 3) continue;
        Tensor h = initial_state(lm, 1);
        h = step_tokens(nullptr, lm, h, {tok::kBos});
        for (size_t t = 0; t < ids.size() - 1; ++t) {
            h = step_tokens(nullptr, lm, h, {ids[t]});
            if (t < 1) continue;  // need two words of context
            Tensor probs = diff::softmax_rows(
                nullptr, mask_specials(nullptr, lm, output_logits(nullptr, lm, h), false));
            int wa = ids[t - 1] - tok::kFirstContent;
            int wb = ids[t] - tok::kFirstContent;
            double mass = 0;
            for (const auto& [w, pw] : grammar.successor_words(wa, wb))
                mass += probs.at(w + tok::kFirstContent);
            mass_sum += mass;
            ++n;
        }
    }
    if (n == 0) throw std::invalid_argument("legal_successor_mass: no scorable position");
    return mass_sum / static_cast<double>(n);
}

LanguageModel train_lm(const std::vector<std::string>& corpus, const Grammar& grammar,
                       const tok::Tokenizer& tokenizer, const LmConfig& config,
                       TrainLmReport* report) {
    if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
    size_t n_hold = std::max<size_t>(1, static_cast<size_t>(
                                            std::llround(config.holdout_frac *
                                                         static_cast<double>(corpus.size()))));
    if (n_hold >= corpus.size()) throw std::invalid_argument("train_lm: corpus too small");
    std::vector<std::string> train_lines(corpus.begin(), corpus.end() - n_hold);
    std::vector<std::string> hold_lines(corpus.end() - n_hold, corpus.end());

    std::vector<std::vector<int>> train_ids;
    std::vector<std::vector<std::string>> train_words;
    for (const auto& s : train_lines) {
        auto w = sentence_words(s);
        if (w.empty()) continue;
        train_words.push_back(w);
        train_ids.push_back(tokenizer.tokenize(s));
    }
    if (train_ids.empty()) throw std::invalid_argument("train_lm: no usable sentences");

    LanguageModel m = init_lm(tokenizer, config);
    diff::Adam opt(m.params(), {config.lr, 0.9, 0.999, 1e-8, config.clip});

    double last_nt_loss = 0;
    for (int step = 0; step < config.steps; ++step) {
        auto rng = derive_rng(config.seed, "lm-step", static_cast<uint64_t>(step));
        // Linear decay to 20% of the base rate over the run.
        opt.set_lr(config.lr * (1.0 - 0.8 * static_cast<double>(step) / config.steps));
        int task = step % 5;  // 2 next-token : 2 rewrite : 1 anchor
        // Recalling a chunk is the hard part of rewriting, so the chunk length
        // grows 2 -> config.chunk over the first 40% of training, and teacher
        // drops switch on only in the second half. The anchor objective
        // converges early, so its slot turns into extra rewrite practice for
        // the last 20% (which also removes its synonym-collapsing pull while
        // the swap task consolidates).
        double progress = static_cast<double>(step) / config.steps;
        if (task == 4 && progress >= 0.8) task = 1;
        int hi = 2 + static_cast<int>(std::floor((config.chunk - 2) *
                                                 std::min(1.0, progress / 0.40)));
        double drop = progress < 0.5 ? 0.0 : config.drop_prob;
        Graph graph;
        Tensor loss;
        if (task == 0 || task == 2) {
            std::vector<SeqRow> rows;
            for (int bi = 0; bi < config.batch; ++bi) {
                const auto& ids = train_ids[rng.below(train_ids.size())];
                int len = static_cast<int>(ids.size());
                int l = std::min(config.crop, len);
                int start = len > l ? static_cast<int>(rng.below(
                                          static_cast<uint64_t>(len - l + 1)))
                                    : 0;
                SeqRow r;
                r.in.push_back(start == 0 ? tok::kBos : ids[start - 1]);
                r.in.insert(r.in.end(), ids.begin() + start, ids.begin() + start + l - 1);
                r.tgt.assign(ids.begin() + start, ids.begin() + start + l);
                rows.push_back(std::move(r));
            }
            loss = teacher_ce(&graph, m, rows);
            last_nt_loss = loss.value();
        } else if (task == 1 || task == 3) {
            std::vector<SeqRow> rows;
            for (int bi = 0; bi < config.batch; ++bi) {
                // Half the rows pin the current maximum length; uniform
                // sampling alone would starve the hardest length of practice.
                int lo = (hi > 2 && rng.uniform() < 0.5) ? hi : 2;
                rows.push_back(rewrite_row(grammar, tokenizer,
                                           train_words[rng.below(train_words.size())], lo, hi,
                                           drop, config.pair_boost, rng));
            }
            loss = teacher_ce(&graph, m, rows);
        } else {
            auto ab = anchor_batch(grammar, tokenizer, train_words, config, config.batch, rng);
            loss = anchor_loss(&graph, m, ab, config.margin);
        }
        if (!std::isfinite(loss.value()))
            throw std::runtime_error("train_lm: loss diverged at step " + std::to_string(step));
        graph.backward(loss);
        opt.step();
    }

    m.freeze();

    if (report) {
        report->final_loss = last_nt_loss;
        report->steps = config.steps;
        report->holdout_ppl = holdout_perplexity(m, hold_lines);

        auto rng = derive_rng(config.seed, "lm-eval");
        std::vector<std::vector<std::string>> hold_words;
        for (const auto& s : hold_lines) {
            auto w = sentence_words(s);
            if (!w.empty()) hold_words.push_back(std::move(w));
        }
        long long correct = 0, counted = 0;
        for (int i = 0; i < 200; i += 25) {
            std::vector<SeqRow> rows;
            for (int k = 0; k < 25; ++k)
                rows.push_back(rewrite_row(grammar, tokenizer,
                                           hold_words[rng.below(hold_words.size())], 3,
                                           config.chunk, config.drop_prob, 1.0, rng));
            teacher_ce(nullptr, m, rows, &correct, &counted);
        }
        report->rewrite_acc = counted ? static_cast<double>(correct) / counted : 0.0;

        double pos_sum = 0, neg_sum = 0;
        int pairs = 0;
        for (int i = 0; i < 200; i += 25) {
            auto ab = anchor_batch(grammar, tokenizer, hold_words, config, 25, rng);
            Tensor z = anchor_states(nullptr, m, ab.x);
            Tensor zp = anchor_states(nullptr, m, ab.xp);
            int b = static_cast<int>(ab.x.size());
            for (int r = 0; r < b; ++r) {
                Tensor zr = diff::gather_rows(nullptr, z, {r});
                pos_sum +=
                    diff::cos_sim(nullptr, zr, diff::gather_rows(nullptr, zp, {r})).value();
                neg_sum += diff::cos_sim(nullptr, zr,
                                         diff::gather_rows(nullptr, zp, {(r + 1) % b}))
                               .value();
                ++pairs;
            }
        }
        report->anchor_pos_cos = pos_sum / pairs;
        report->anchor_neg_cos = neg_sum / pairs;
    }
    return m;
}

// ------------------------------------------------------------- persistence

void save_lm(const LanguageModel& lm, const std::string& path) {
    ckpt::Checkpoint c;
    c.manifest["format_version"] = ckpt::kFormatVersion;
    c.manifest["kind"] = "lm";
    c.manifest["config"] = lm.config.to_json();
    c.manifest["frozen"] = lm.frozen;
    nlohmann::json tj;
    tj["id"] = lm.tokenizer.id;
    tj["kind"] = tok::to_string(lm.tokenizer.kind);
    tj["pieces"] = lm.tokenizer.pieces;
    tj["merges"] = lm.tokenizer.merges;
    c.manifest["tokenizer"] = tj;
    for (const auto& [name, t] : lm.named_params()) c.add(name, t);
    ckpt::save(path, c);
}

LanguageModel load_lm(const std::string& path) {
    auto c = ckpt::load(path);
    if (c.manifest.value("kind", "") != "lm")
        throw std::runtime_error("load_lm: " + path + " is not a language model checkpoint");
    LanguageModel m;
    const auto& tj = c.manifest.at("tokenizer");
    m.tokenizer.id = tj.at("id").get<std::string>();
    m.tokenizer.kind =
        tj.at("kind").get<std::string>() == "word" ? tok::Kind::word : tok::Kind::subword;
    m.tokenizer.pieces = tj.at("pieces").get<std::vector<std::string>>();
    m.tokenizer.merges =
        tj.at("merges").get<std::vector<std::pair<std::string, std::string>>>();
    m.tokenizer.finalize();
    m.config = LmConfig::from_json(c.manifest.at("config"));
    m.emb = c.get("emb");
    m.cell.wzx = c.get("wzx");
    m.cell.wzh = c.get("wzh");
    m.cell.bz = c.get("bz");
    m.cell.wcx = c.get("wcx");
    m.cell.wch = c.get("wch");
    m.cell.bc = c.get("bc");
    m.w_out = c.get("w_out");
    m.b_out = c.get("b_out");
    for (auto& p : m.params()) p.d->requires_grad = p.d->flows = true;
    if (c.manifest.value("frozen", false)) m.freeze();
    m.validate();
    return m;
}

}  // namespace wm::lm
