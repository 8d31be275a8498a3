#include "wm/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "wm/checkpoint.hpp"

namespace wm::dec {

using diff::Graph;
using diff::Tensor;

// -------------------------------------------------------------------- model

std::vector<Tensor> Decoder::params() const {
    std::vector<Tensor> ps = cell.params();
    ps.insert(ps.end(), {w1, b1, w2, b2});
    return ps;
}

std::vector<std::pair<std::string, Tensor>> Decoder::named_params() const {
    return {{"wzx", cell.wzx}, {"wzh", cell.wzh}, {"bz", cell.bz},
            {"wcx", cell.wcx}, {"wch", cell.wch}, {"bc", cell.bc},
            {"w1", w1},         {"b1", b1},         {"w2", w2},        {"b2", b2}};
}

uint64_t Decoder::weights_checksum() const {
    return ckpt::weights_checksum(named_params());
}

void Decoder::validate() const {
    if (d_model <= 0 || hidden <= 0 || head_hidden <= 0)
        throw std::runtime_error("decoder: widths must be positive");
    if (w1.rows() != hidden || w1.cols() != head_hidden || w2.rows() != head_hidden ||
        w2.cols() != 1)
        throw std::runtime_error("decoder: head shapes inconsistent with widths");
}

Decoder init_decoder(int d_model, int hidden, int head_hidden, uint64_t seed) {
    Decoder d;
    d.d_model = d_model;
    d.hidden = hidden;
    d.head_hidden = head_hidden;
    auto rng = derive_rng(seed, "decoder-init");
    d.cell = diff::GruCell::init(d_model, hidden, rng);
    auto u = [&](std::vector<int> shape, int fan_in) {
        return Tensor::uniform(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    };
    d.w1 = u({hidden, head_hidden}, hidden);
    d.b1 = Tensor::zeros({head_hidden}, true);
    d.w2 = u({head_hidden, 1}, head_hidden);
    d.b2 = Tensor::zeros({1}, true);
    d.validate();
    return d;
}

// ---------------------------------------------------------------- detection

namespace {

Tensor head_logit(Graph* g, const Decoder& dec, const Tensor& h) {
    Tensor t1 = diff::tanh_op(g, diff::add_rowwise(g, diff::matmul(g, h, dec.w1), dec.b1));
    return diff::add_rowwise(g, diff::matmul(g, t1, dec.w2), dec.b2);
}

}  // namespace

Tensor detect_neural(Graph* g, const Decoder& dec, const lm::LanguageModel& lm,
                     const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("detect_neural: empty sequence");
    Tensor h = Tensor::zeros({1, dec.hidden});
    for (int id : ids) {
        Tensor x = diff::gather_rows(g, lm.emb, {id});
        h = diff::gru_cell(g, x, h, dec.cell);
    }
    return head_logit(g, dec, h);
}

Tensor detect_neural(Graph* g, const Decoder& dec, const lm::LanguageModel& lm,
                     const std::vector<Tensor>& soft_seq) {
    if (soft_seq.empty()) throw std::invalid_argument("detect_neural: empty sequence");
    Tensor h = Tensor::zeros({1, dec.hidden});
    for (const Tensor& row : soft_seq) {
        Tensor x = lm::soft_embed(g, lm, row);
        h = diff::gru_cell(g, x, h, dec.cell);
    }
    return head_logit(g, dec, h);
}

// ---------------------------------------------------------------- retrieval

int RetrievalTrace::n_scored() const {
    return static_cast<int>(std::count_if(ranks.begin(), ranks.end(), [](int r) { return r >= 0; }));
}

int RetrievalTrace::n_green() const {
    return static_cast<int>(std::count_if(lw.begin(), lw.end(), [](double v) { return v > 0; }));
}

double RetrievalTrace::cum_perturbation() const {
    double s = 0;
    for (double v : lw) s += v;  // grey entries contribute exactly 0
    return s;
}

RetrievalTrace retrieve_partition(const lm::LanguageModel& lm, const enc::Encoder& e,
                                  const std::vector<int>& tokens) {
    if (static_cast<int>(tokens.size()) <= e.window)
        throw std::invalid_argument("retrieve_partition: need more than " +
                                    std::to_string(e.window) + " tokens, got " +
                                    std::to_string(tokens.size()));
    for (int id : tokens)
        if (id < 0 || id >= lm.vocab_size())
            throw std::out_of_range("retrieve_partition: token id " + std::to_string(id) +
                                    " outside vocabulary");
    Graph g;
    RetrievalTrace tr;
    tr.window = e.window;
    Tensor h = lm::initial_state(lm, 1);
    std::vector<int> prefix;
    prefix.reserve(tokens.size());
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (static_cast<int>(t) >= e.window) {
            Tensor base = lm::output_logits(&g, lm, h);
            Tensor masked = lm::mask_specials(&g, lm, base, /*allow_eos=*/false);
            auto cands = enc::build_candidates(enc::context_window(prefix, e.window), masked, e.k);
            auto wl = enc::watermark_logits(&g, e, lm, cands);
            auto it = std::find(cands.ids.begin(), cands.ids.end(), tokens[t]);
            if (it == cands.ids.end()) {
                tr.ranks.push_back(-1);
                tr.lw.push_back(0.0);
            } else {
                int rank = static_cast<int>(it - cands.ids.begin());
                tr.ranks.push_back(rank);
                tr.lw.push_back(wl.topk.d->v[static_cast<size_t>(rank)]);
            }
        }
        h = lm::step_tokens(&g, lm, h, {tokens[t]});
        prefix.push_back(tokens[t]);
    }
    return tr;
}

// --------------------------------------------------------------- statistics

StatScore detect_statistical(const RetrievalTrace& trace, double gamma_hat) {
    if (!(gamma_hat > 0 && gamma_hat < 1))
        throw std::invalid_argument("detect_statistical: gamma_hat must lie in (0, 1)");
    StatScore s;
    s.n_scored = trace.n_scored();
    if (s.n_scored < 1)
        throw std::runtime_error("detect_statistical: no scored positions (all grey)");
    s.n_green = trace.n_green();
    s.green_fraction = static_cast<double>(s.n_green) / s.n_scored;
    s.z = (s.n_green - gamma_hat * s.n_scored) /
          std::sqrt(gamma_hat * (1 - gamma_hat) * s.n_scored);
    s.cum_perturbation = trace.cum_perturbation();
    return s;
}

double calibrate_gamma(const std::vector<RetrievalTrace>& nwm_traces) {
    double sum = 0;
    int used = 0;
    for (const auto& tr : nwm_traces) {
        int ns = tr.n_scored();
        if (ns < 1) continue;
        sum += static_cast<double>(tr.n_green()) / ns;
        ++used;
    }
    if (used < 100)
        throw std::invalid_argument("calibrate_gamma: needs >= 100 usable traces, got " +
                                    std::to_string(used));
    double gamma = sum / used;
    if (!(gamma > 0 && gamma < 1))
        throw std::runtime_error("calibrate_gamma: degenerate green rate " +
                                 std::to_string(gamma));
    return gamma;
}

double calibrate_threshold(std::vector<double> nwm_scores, double target_fpr) {
    if (nwm_scores.size() < 100)
        throw std::invalid_argument("calibrate_threshold: needs >= 100 scores, got " +
                                    std::to_string(nwm_scores.size()));
    if (!(target_fpr > 0 && target_fpr < 1))
        throw std::invalid_argument("calibrate_threshold: target_fpr must lie in (0, 1)");
    for (double v : nwm_scores)
        if (!std::isfinite(v)) throw std::invalid_argument("calibrate_threshold: non-finite score");
    std::sort(nwm_scores.begin(), nwm_scores.end(), std::greater<>());
    int n = static_cast<int>(nwm_scores.size());
    int allowed = static_cast<int>(std::floor(target_fpr * n));
    // Ties at the cut move it toward higher rank, so strictly-greater scores
    // never exceed the allowance.
    int c = allowed;
    while (c > 0 && nwm_scores[static_cast<size_t>(c - 1)] == nwm_scores[static_cast<size_t>(c)])
        --c;
    if (c == 0) return nwm_scores.front() + 1.0;  // nothing may clear: sit above the max
    return 0.5 * (nwm_scores[static_cast<size_t>(c - 1)] + nwm_scores[static_cast<size_t>(c)]);
}

nlohmann::json detection_record(const std::string& id, double neural_logit,
                                const std::optional<StatScore>& stat, double threshold) {
    nlohmann::json r{{"id", id},
                     {"neural_logit", neural_logit},
                     {"threshold", threshold},
                     {"verdict", neural_logit > threshold ? "watermarked" : "clean"}};
    if (stat) {
        r["green_fraction"] = stat->green_fraction;
        r["z"] = stat->z;
        r["cum_perturbation"] = stat->cum_perturbation;
        r["n_scored"] = stat->n_scored;
    } else {
        r["green_fraction"] = nullptr;
        r["z"] = nullptr;
        r["cum_perturbation"] = nullptr;
        r["n_scored"] = 0;
        r["warning"] = "no scored positions";
    }
    return r;
}

// ------------------------------------------------------------- persistence

void save_decoder(const Decoder& d, const std::string& path) {
    d.validate();
    ckpt::Checkpoint c;
    c.manifest = {{"format_version", ckpt::kFormatVersion},
                  {"kind", "decoder"},
                  {"d_model", d.d_model},
                  {"hidden", d.hidden},
                  {"head_hidden", d.head_hidden}};
    for (const auto& [name, t] : d.named_params()) c.add(name, t);
    ckpt::save(path, c);
}

Decoder load_decoder(const std::string& path) {
    auto c = ckpt::load(path);
    if (c.manifest.value("kind", "") != "decoder")
        throw std::runtime_error("load_decoder: " + path + " is not a decoder checkpoint");
    Decoder d;
    d.d_model = c.manifest.at("d_model").get<int>();
    d.hidden = c.manifest.at("hidden").get<int>();
    d.head_hidden = c.manifest.at("head_hidden").get<int>();
    d.cell.wzx = c.get("wzx");
    d.cell.wzh = c.get("wzh");
    d.cell.bz = c.get("bz");
    d.cell.wcx = c.get("wcx");
    d.cell.wch = c.get("wch");
    d.cell.bc = c.get("bc");
    d.w1 = c.get("w1");
    d.b1 = c.get("b1");
    d.w2 = c.get("w2");
    d.b2 = c.get("b2");
    for (auto& p : d.params()) p.d->requires_grad = p.d->flows = true;
    d.validate();
    return d;
}

}  // namespace wm::dec
