#include "wm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "wm/checkpoint.hpp"
#include "wm/tokenizer.hpp"

namespace wm::enc {

using diff::Graph;
using diff::Tensor;

// -------------------------------------------------------------- candidates

std::vector<int> CandidateSet::sequence(int i) const {
    if (i < 0 || i >= k()) throw std::out_of_range("CandidateSet::sequence: index " + std::to_string(i));
    std::vector<int> s = context;
    s.push_back(ids[i]);
    return s;
}

std::vector<int> context_window(const std::vector<int>& stream, int window) {
    if (window < 1) throw std::invalid_argument("context_window: window must be >= 1");
    std::vector<int> out(static_cast<size_t>(window), tok::kPad);
    size_t take = std::min(stream.size(), static_cast<size_t>(window));
    std::copy(stream.end() - take, stream.end(), out.end() - take);
    return out;
}

CandidateSet build_candidates(const std::vector<int>& context, const Tensor& base_logits, int k) {
    if (!base_logits.defined() || base_logits.rows() != 1)
        throw std::invalid_argument("build_candidates: base_logits must be a single row");
    int v = base_logits.cols();
    if (k < 1 || k > v)
        throw std::invalid_argument("build_candidates: k = " + std::to_string(k) +
                                    " outside [1, " + std::to_string(v) + "]");
    std::vector<int> order(static_cast<size_t>(v));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        double la = base_logits.at(a), lb = base_logits.at(b);
        if (la != lb) return la > lb;
        return a < b;  // ties: lower id first, for run-to-run reproducibility
    });
    CandidateSet c;
    c.context = context;
    c.ids.assign(order.begin(), order.begin() + k);
    c.base_logits.reserve(static_cast<size_t>(k));
    for (int id : c.ids) c.base_logits.push_back(base_logits.at(id));
    return c;
}

// ------------------------------------------------------------------ encoder

std::vector<Tensor> Encoder::params() const { return {w_ctx, w_cand, b1, w2, b2, w3, b3}; }

std::vector<std::pair<std::string, Tensor>> Encoder::named_params() const {
    return {{"w_ctx", w_ctx}, {"w_cand", w_cand}, {"b1", b1},
            {"w2", w2},       {"b2", b2},         {"w3", w3},
            {"b3", b3}};
}

uint64_t Encoder::weights_checksum() const { return ckpt::weights_checksum(named_params()); }

void Encoder::validate() const {
    if (window < 1) throw std::logic_error("Encoder: window must be >= 1");
    if (k < 1) throw std::logic_error("Encoder: k must be >= 1");
    if (!(tau_t > 0)) throw std::logic_error("Encoder: tau_t must be > 0");
    if (delta < 0) throw std::logic_error("Encoder: delta must be >= 0");
    if (d_model < 1 || hidden < 1) throw std::logic_error("Encoder: dimensions must be >= 1");
    auto expect = [](const Tensor& t, int r, int c, const char* name) {
        if (!t.defined() || t.rows() != r || t.cols() != c)
            throw std::logic_error(std::string("Encoder: ") + name + " has shape " +
                                   (t.defined() ? t.shape_str() : "undefined") + ", expected " +
                                   std::to_string(r) + "x" + std::to_string(c));
    };
    expect(w_ctx, window * d_model, hidden, "w_ctx");
    expect(w_cand, d_model, hidden, "w_cand");
    expect(b1, 1, hidden, "b1");
    expect(w2, hidden, hidden, "w2");
    expect(b2, 1, hidden, "b2");
    expect(w3, hidden, 1, "w3");
    expect(b3, 1, 1, "b3");
}

Encoder init_encoder(int window, int k, int d_model, int hidden, uint64_t seed) {
    Encoder e;
    e.window = window;
    e.k = k;
    e.d_model = d_model;
    e.hidden = hidden;
    auto rng = derive_rng(seed, "encoder-init");
    auto u = [&](std::vector<int> shape, int fan_in) {
        return Tensor::uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    };
    // One logical (window+1)*d x hidden first layer, stored as two blocks with
    // a shared fan-in. The context block starts damped so the initial red/green
    // partition is dominated by the candidate token itself: a near-token-local
    // partition is far easier for the detector to pick up early in training,
    // and context sensitivity can still grow as the objectives demand it.
    // (An undamped start makes the partition a random function of the full
    // window, which a fresh detector cannot track within the training budget.)
    int fan1 = (window + 1) * d_model;
    constexpr double kCtxInitScale = 0.2;
    e.w_ctx = u({window * d_model, hidden}, fan1);
    for (auto& v : e.w_ctx.d->v) v *= kCtxInitScale;
    e.w_cand = u({d_model, hidden}, fan1);
    e.b1 = Tensor::zeros({hidden}, true);
    e.w2 = u({hidden, hidden}, hidden);
    e.b2 = Tensor::zeros({hidden}, true);
    e.w3 = u({hidden, 1}, hidden);
    e.b3 = Tensor::zeros({1}, true);
    e.validate();
    return e;
}

// -------------------------------------------------------------------- score

namespace {

WatermarkLogits score(Graph* g, const Encoder& e, const lm::LanguageModel& lm,
                      const Tensor& ctx_flat, const CandidateSet& cands) {
    e.validate();
    int k = cands.k();
    if (k < 1) throw std::invalid_argument("watermark_logits: empty candidate set");
    int v = lm.vocab_size();
    for (int id : cands.ids)
        if (id < 0 || id >= v)
            throw std::out_of_range("watermark_logits: candidate id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(v));
    if (ctx_flat.rows() != 1 || ctx_flat.cols() != e.window * e.d_model)
        throw std::invalid_argument("watermark_logits: context is " + ctx_flat.shape_str() +
                                    ", expected 1x" + std::to_string(e.window * e.d_model));

    Tensor shared = diff::matmul(g, ctx_flat, e.w_ctx);              // 1 x H
    Tensor cand_emb = diff::gather_rows(g, lm.emb, cands.ids);       // k x d
    Tensor h1 = diff::matmul(g, cand_emb, e.w_cand);                 // k x H
    h1 = diff::add_rowwise(g, h1, shared);
    h1 = diff::tanh_op(g, diff::add_rowwise(g, h1, e.b1));
    Tensor h2 = diff::tanh_op(g, diff::add_rowwise(g, diff::matmul(g, h1, e.w2), e.b2));
    Tensor pre = diff::add_rowwise(g, diff::matmul(g, h2, e.w3), e.b3);  // k x 1

    WatermarkLogits out;
    out.pre = diff::reshape_copy(g, pre, {1, k});
    out.topk = diff::tanh_op(g, diff::scale(g, out.pre, e.tau_t));
    out.full = diff::scatter_row(g, out.topk, cands.ids, v);
    return out;
}

}  // namespace

WatermarkLogits watermark_logits(Graph* g, const Encoder& e, const lm::LanguageModel& lm,
                                 const CandidateSet& cands) {
    if (static_cast<int>(cands.context.size()) != e.window)
        throw std::invalid_argument("watermark_logits: context has " +
                                    std::to_string(cands.context.size()) + " ids, window is " +
                                    std::to_string(e.window));
    Tensor rows = diff::gather_rows(g, lm.emb, cands.context);  // window x d
    Tensor flat = diff::reshape_copy(g, rows, {1, e.window * e.d_model});
    return score(g, e, lm, flat, cands);
}

WatermarkLogits watermark_logits(Graph* g, const Encoder& e, const lm::LanguageModel& lm,
                                 const std::vector<Tensor>& ctx_rows, const CandidateSet& cands) {
    if (static_cast<int>(ctx_rows.size()) != e.window)
        throw std::invalid_argument("watermark_logits: context has " +
                                    std::to_string(ctx_rows.size()) + " rows, window is " +
                                    std::to_string(e.window));
    for (const auto& r : ctx_rows)
        if (r.rows() != 1 || r.cols() != e.d_model)
            throw std::invalid_argument("watermark_logits: context row is " + r.shape_str() +
                                        ", expected 1x" + std::to_string(e.d_model));
    Tensor flat = diff::concat_flat(g, ctx_rows);
    return score(g, e, lm, flat, cands);
}

// ---------------------------------------------------------------- key bias

KeyBias derive_key_bias(const std::string& key, int vocab) {
    if (key.empty()) throw std::invalid_argument("derive_key_bias: empty key");
    if (vocab < 1) throw std::invalid_argument("derive_key_bias: vocab must be >= 1");
    KeyBias b;
    b.key = key;
    b.lb.reserve(static_cast<size_t>(vocab));
    Rng rng(derive_seed(fnv1a64(key), "key-bias"));
    for (int i = 0; i < vocab; ++i) b.lb.push_back(rng.raw() & 1 ? 1.0 : -1.0);
    return b;
}

double key_collision_probability(int k) {
    if (k < 1) throw std::invalid_argument("key_collision_probability: k must be >= 1");
    return std::pow(0.5, k);
}

// ------------------------------------------------------------------ perturb

diff::Tensor perturb(Graph* g, const Tensor& base_logits, const Tensor& full_wm, double delta) {
    if (base_logits.rows() != 1 || full_wm.rows() != 1 ||
        base_logits.cols() != full_wm.cols())
        throw std::invalid_argument("perturb: base is " + base_logits.shape_str() +
                                    ", watermark is " + full_wm.shape_str());
    if (delta < 0) throw std::invalid_argument("perturb: delta must be >= 0");
    return diff::add(g, base_logits, diff::scale(g, full_wm, delta));
}

diff::Tensor perturb(Graph* g, const Tensor& base_logits, const Tensor& full_wm, double delta,
                     const KeyBias& bias, const std::vector<int>& cand_ids) {
    int v = base_logits.cols();
    if (static_cast<int>(bias.lb.size()) != v)
        throw std::invalid_argument("perturb: bias has " + std::to_string(bias.lb.size()) +
                                    " entries for vocabulary of " + std::to_string(v));
    if (cand_ids.empty()) throw std::invalid_argument("perturb: empty candidate list");
    std::vector<double> vals;
    vals.reserve(cand_ids.size());
    for (int id : cand_ids) {
        if (id < 0 || id >= v)
            throw std::out_of_range("perturb: candidate id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(v));
        vals.push_back(bias.lb[static_cast<size_t>(id)]);
    }
    Tensor scatter = diff::scatter_row(
        g, Tensor::from({1, static_cast<int>(vals.size())}, std::move(vals)), cand_ids, v);
    return perturb(g, base_logits, diff::add(g, full_wm, scatter), delta);
}

// -------------------------------------------------------------- persistence

void save_encoder(const Encoder& e, const std::string& path) {
    e.validate();
    ckpt::Checkpoint c;
    c.manifest = {{"format_version", ckpt::kFormatVersion},
                  {"kind", "encoder"},
                  {"window", e.window},
                  {"k", e.k},
                  {"d_model", e.d_model},
                  {"hidden", e.hidden},
                  {"tau_t", e.tau_t},
                  {"delta", e.delta}};
    for (const auto& [name, t] : e.named_params()) c.add(name, t);
    ckpt::save(path, c);
}

Encoder load_encoder(const std::string& path) {
    auto c = ckpt::load(path);
    if (c.manifest.value("kind", "") != "encoder")
        throw std::runtime_error("load_encoder: " + path + " is not an encoder checkpoint");
    Encoder e;
    e.window = c.manifest.at("window").get<int>();
    e.k = c.manifest.at("k").get<int>();
    e.d_model = c.manifest.at("d_model").get<int>();
    e.hidden = c.manifest.at("hidden").get<int>();
    e.tau_t = c.manifest.at("tau_t").get<double>();
    e.delta = c.manifest.at("delta").get<double>();
    e.w_ctx = c.get("w_ctx");
    e.w_cand = c.get("w_cand");
    e.b1 = c.get("b1");
    e.w2 = c.get("w2");
    e.b2 = c.get("b2");
    e.w3 = c.get("w3");
    e.b3 = c.get("b3");
    for (auto& p : e.params()) p.d->requires_grad = p.d->flows = true;
    e.validate();
    return e;
}

}  // namespace wm::enc
