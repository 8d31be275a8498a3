#include "wm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>

#include "wm/tokenizer.hpp"

namespace wm::ev {

using diff::Tensor;

// ------------------------------------------------------------- detection

namespace {

// predicted positive <=> score > threshold
struct Counts {
    int tp = 0, fp = 0;
};

Counts counts_at(const std::vector<double>& wm_sorted, const std::vector<double>& nwm_sorted,
                 double t) {
    auto above = [&](const std::vector<double>& v) {
        return static_cast<int>(v.end() - std::upper_bound(v.begin(), v.end(), t));
    };
    return {above(wm_sorted), above(nwm_sorted)};
}

double f1_of(Counts c, int n_pos) {
    int fn = n_pos - c.tp;
    double den = 2.0 * c.tp + c.fp + fn;
    return den > 0 ? 2.0 * c.tp / den : 0.0;
}

}  // namespace

DetectionMetrics eval_detection(const std::vector<double>& wm_scores,
                                const std::vector<double>& nwm_scores) {
    if (wm_scores.empty() || nwm_scores.empty())
        throw std::invalid_argument("eval_detection: empty score set");
    std::vector<double> wm = wm_scores, nwm = nwm_scores;
    std::sort(wm.begin(), wm.end());
    std::sort(nwm.begin(), nwm.end());

    std::vector<double> all = wm;
    all.insert(all.end(), nwm.begin(), nwm.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    std::vector<double> cands;
    cands.reserve(all.size() + 1);
    cands.push_back(all.front() - 1.0);  // all positive
    for (size_t i = 0; i + 1 < all.size(); ++i) cands.push_back(0.5 * (all[i] + all[i + 1]));
    cands.push_back(all.back() + 1.0);  // all negative

    DetectionMetrics m;
    int n_pos = static_cast<int>(wm.size()), n_neg = static_cast<int>(nwm.size());
    m.roc.reserve(cands.size());
    double best = -1, best_t = 0;
    for (double t : cands) {
        Counts c = counts_at(wm, nwm, t);
        double f1 = f1_of(c, n_pos);
        if (f1 > best) {
            best = f1;
            best_t = t;
        }
        m.roc.push_back({t, static_cast<double>(c.fp) / n_neg, static_cast<double>(c.tp) / n_pos});
    }
    m.best_f1 = best;
    m.best_threshold = best_t;
    // thresholds ascend -> rates descend; flip so the curve runs (0,0) -> (1,1)
    std::reverse(m.roc.begin(), m.roc.end());

    // rank-based AUC, ties counted half
    std::vector<std::pair<double, int>> tagged;
    tagged.reserve(all.size());
    for (double s : wm) tagged.push_back({s, 1});
    for (double s : nwm) tagged.push_back({s, 0});
    std::sort(tagged.begin(), tagged.end());
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < tagged.size()) {
        size_t j = i;
        while (j < tagged.size() && tagged[j].first == tagged[i].first) ++j;
        double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
        for (size_t q = i; q < j; ++q)
            if (tagged[q].second) rank_sum_pos += avg_rank;
        i = j;
    }
    m.auc = (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (static_cast<double>(n_pos) * n_neg);

    m.tpr_at_1fpr = counts_at(wm, nwm, dec::calibrate_threshold(nwm_scores, 0.01)).tp /
                    static_cast<double>(n_pos);
    m.tpr_at_5fpr = counts_at(wm, nwm, dec::calibrate_threshold(nwm_scores, 0.05)).tp /
                    static_cast<double>(n_pos);
    return m;
}

double f1_at(const std::vector<double>& wm_scores, const std::vector<double>& nwm_scores,
             double threshold) {
    if (wm_scores.empty() || nwm_scores.empty())
        throw std::invalid_argument("f1_at: empty score set");
    std::vector<double> wm = wm_scores, nwm = nwm_scores;
    std::sort(wm.begin(), wm.end());
    std::sort(nwm.begin(), nwm.end());
    return f1_of(counts_at(wm, nwm, threshold), static_cast<int>(wm.size()));
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("pearson: need two equal-length series");
    double n = static_cast<double>(x.size()), mx = 0, my = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) throw std::domain_error("pearson: constant series");
    return sxy / std::sqrt(sxx * syy);
}

nlohmann::json DetectionMetrics::to_json(bool with_roc) const {
    nlohmann::json j = {{"best_f1", best_f1},
                        {"best_threshold", best_threshold},
                        {"auc", auc},
                        {"tpr_at_1fpr", tpr_at_1fpr},
                        {"tpr_at_5fpr", tpr_at_5fpr}};
    if (with_roc) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& p : roc) pts.push_back({{"t", p.threshold}, {"fpr", p.fpr}, {"tpr", p.tpr}});
        j["roc"] = pts;
    }
    return j;
}

// --------------------------------------------------------------- quality

namespace {

std::vector<int> word_ids_of(const std::vector<int>& token_ids, const Grammar& gr) {
    std::vector<int> w;
    w.reserve(token_ids.size());
    for (int id : token_ids) {
        int wid = id - tok::kFirstContent;
        if (wid >= 0 && wid < gr.n_words()) w.push_back(wid);
    }
    return w;
}

std::vector<double> unigram_add1(const std::vector<std::vector<int>>& texts, const Grammar& gr) {
    std::vector<double> c(static_cast<size_t>(gr.n_words()), 1.0);  // add-1
    double total = static_cast<double>(gr.n_words());
    for (const auto& t : texts)
        for (int wid : word_ids_of(t, gr)) {
            c[static_cast<size_t>(wid)] += 1.0;
            total += 1.0;
        }
    for (auto& v : c) v /= total;
    return c;
}

}  // namespace

QualityMetrics eval_quality(const std::vector<std::vector<int>>& wm_texts,
                            const std::vector<std::vector<int>>& nwm_texts, const Grammar& gr) {
    if (wm_texts.empty() || nwm_texts.empty())
        throw std::invalid_argument("eval_quality: empty text set");
    auto mean_ppl = [&](const std::vector<std::vector<int>>& texts) {
        double s = 0;
        int used = 0;
        for (const auto& t : texts) {
            auto w = word_ids_of(t, gr);
            if (w.empty()) continue;
            s += true_perplexity(gr, w);
            ++used;
        }
        if (!used) throw std::invalid_argument("eval_quality: no scoreable text");
        return s / used;
    };
    QualityMetrics q;
    q.ppl_wm = mean_ppl(wm_texts);
    q.ppl_nwm = mean_ppl(nwm_texts);
    q.ppl_ratio = q.ppl_wm / q.ppl_nwm;
    auto p = unigram_add1(wm_texts, gr), qd = unigram_add1(nwm_texts, gr);
    double kl = 0;
    for (size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / qd[i]);
    q.unigram_kl = kl;
    return q;
}

nlohmann::json QualityMetrics::to_json() const {
    return {{"ppl_wm", ppl_wm},
            {"ppl_nwm", ppl_nwm},
            {"ppl_ratio", ppl_ratio},
            {"unigram_kl", unigram_kl}};
}

GammaStats gamma_stats(const std::vector<std::vector<int>>& nwm_texts,
                       const lm::LanguageModel& lm, const enc::Encoder& e) {
    if (nwm_texts.empty()) throw std::invalid_argument("gamma_stats: empty text set");
    std::vector<double> fr;
    for (const auto& t : nwm_texts) {
        if (static_cast<int>(t.size()) <= e.window) continue;
        auto tr = dec::retrieve_partition(lm, e, t);
        if (tr.n_scored() < 1) continue;
        fr.push_back(static_cast<double>(tr.n_green()) / tr.n_scored());
    }
    GammaStats g;
    g.n = static_cast<int>(fr.size());
    if (!g.n) throw std::invalid_argument("gamma_stats: no usable text");
    for (double f : fr) g.mean += f;
    g.mean /= g.n;
    if (g.n > 1) {
        double s2 = 0;
        for (double f : fr) s2 += (f - g.mean) * (f - g.mean);
        g.stdev = std::sqrt(s2 / (g.n - 1));
    }
    return g;
}

nlohmann::json GammaStats::to_json() const {
    return {{"mean", mean}, {"stdev", stdev}, {"n", n}};
}

// ------------------------------------------------------------ experiment

nlohmann::json ExperimentSpec::to_json() const {
    return {{"lm_path", lm_path},
            {"encoder_path", encoder_path},
            {"decoder_path", decoder_path},
            {"grammar_seed", grammar_seed},
            {"samples", samples},
            {"prompt_tokens", prompt_tokens},
            {"min_tokens", min_tokens},
            {"max_tokens", max_tokens},
            {"delta", delta},
            {"k", k},
            {"attacks", attacks},
            {"detector", detector},
            {"target_fpr", target_fpr},
            {"edit", edit.to_json()},
            {"seed", seed},
            {"out_dir", out_dir}};
}

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j) {
    ExperimentSpec s;
    s.lm_path = j.value("lm_path", s.lm_path);
    s.encoder_path = j.value("encoder_path", s.encoder_path);
    s.decoder_path = j.value("decoder_path", s.decoder_path);
    s.grammar_seed = j.value("grammar_seed", s.grammar_seed);
    s.samples = j.value("samples", s.samples);
    s.prompt_tokens = j.value("prompt_tokens", s.prompt_tokens);
    s.min_tokens = j.value("min_tokens", s.min_tokens);
    s.max_tokens = j.value("max_tokens", s.max_tokens);
    s.delta = j.value("delta", s.delta);
    s.k = j.value("k", s.k);
    if (j.contains("attacks")) s.attacks = j.at("attacks").get<std::vector<std::string>>();
    s.detector = j.value("detector", s.detector);
    s.target_fpr = j.value("target_fpr", s.target_fpr);
    if (j.contains("edit")) s.edit = ed::EditConfig::from_json(j.at("edit"));
    s.seed = j.value("seed", s.seed);
    s.out_dir = j.value("out_dir", s.out_dir);
    s.validate();
    return s;
}

void ExperimentSpec::validate() const {
    if (lm_path.empty() || encoder_path.empty() || decoder_path.empty())
        throw std::invalid_argument("ExperimentSpec: checkpoint paths must be set");
    if (samples < 1 || prompt_tokens < 1)
        throw std::invalid_argument("ExperimentSpec: counts must be positive");
    if (min_tokens < 1 || max_tokens < min_tokens)
        throw std::invalid_argument("ExperimentSpec: token range invalid");
    if (!(delta >= 0) || k < 1) throw std::invalid_argument("ExperimentSpec: delta/k invalid");
    if (detector != "neural" && detector != "statistical" && detector != "both")
        throw std::invalid_argument("ExperimentSpec: detector must be neural|statistical|both");
    if (detector != "neural" && samples < 100)
        throw std::invalid_argument(
            "ExperimentSpec: statistical detection needs >= 100 samples to calibrate");
    if (!(target_fpr > 0 && target_fpr < 1))
        throw std::invalid_argument("ExperimentSpec: target_fpr must be in (0,1)");
    for (const auto& a : attacks) ed::attack_kind_from(a);  // throws on unknown
    edit.validate();
}

nlohmann::json ConditionReport::to_json() const {
    nlohmann::json j;
    j["condition"] = condition;
    j["neural"] = neural ? neural->to_json() : nlohmann::json(nullptr);
    j["statistical"] = statistical ? statistical->to_json() : nlohmann::json(nullptr);
    if (neural) j["shared_f1_neural"] = shared_f1_neural;
    if (statistical) j["shared_f1_statistical"] = shared_f1_statistical;
    return j;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json conds = nlohmann::json::array();
    for (const auto& c : conditions) conds.push_back(c.to_json());
    return {{"samples", samples},
            {"metrics_valid", metrics_valid},
            {"gamma_hat", gamma_hat},
            {"gamma", gamma.to_json()},
            {"quality", quality.to_json()},
            {"conditions", conds},
            {"correlation_r",
             std::isfinite(correlation_r) ? nlohmann::json(correlation_r) : nlohmann::json(nullptr)}};
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

MetricsReport run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    namespace fs = std::filesystem;
    if (!spec.out_dir.empty()) fs::create_directories(spec.out_dir);

    lm::LanguageModel m = lm::load_lm(spec.lm_path);
    m.freeze();
    enc::Encoder e = enc::load_encoder(spec.encoder_path);
    dec::Decoder d = dec::load_decoder(spec.decoder_path);
    GrammarParams gp;
    gp.seed = spec.grammar_seed;
    Grammar gr = build_grammar(gp);

    bool want_neural = spec.detector != "statistical";
    bool want_stat = spec.detector != "neural";

    // paired generations; prompt and length shared inside each pair
    auto prng = derive_rng(spec.seed, "eval-prompts");
    auto lrng = derive_rng(spec.seed, "eval-len");
    std::vector<std::vector<int>> prompts(static_cast<size_t>(spec.samples));
    std::vector<std::vector<int>> wm(static_cast<size_t>(spec.samples));
    std::vector<std::vector<int>> nwm(static_cast<size_t>(spec.samples));
    for (int i = 0; i < spec.samples; ++i) {
        std::vector<int>& p = prompts[static_cast<size_t>(i)];
        while (static_cast<int>(p.size()) < spec.prompt_tokens)
            for (int wid : sample_sentence(gr, prng)) p.push_back(wid + tok::kFirstContent);
        p.resize(static_cast<size_t>(spec.prompt_tokens));
        int len = spec.min_tokens +
                  static_cast<int>(lrng.below(static_cast<uint64_t>(spec.max_tokens - spec.min_tokens + 1)));
        smp::GenerationConfig gc;
        gc.max_tokens = len;
        gc.delta = spec.delta;
        gc.k = spec.k;
        gc.watermark = true;
        gc.seed = derive_seed(spec.seed, "gen-wm", static_cast<uint64_t>(i));
        wm[static_cast<size_t>(i)] = smp::generate_hard(m, e, p, gc).tokens;
        gc.watermark = false;
        gc.seed = derive_seed(spec.seed, "gen-nwm", static_cast<uint64_t>(i));
        nwm[static_cast<size_t>(i)] = smp::generate_hard(m, e, p, gc).tokens;
    }

    // conditions: clean + attacked variants of the WM arm
    std::vector<std::pair<std::string, std::vector<std::vector<int>>>> conditions;
    conditions.push_back({"clean", wm});
    for (const auto& name : spec.attacks) {
        ed::AttackKind kind = ed::attack_kind_from(name);
        std::vector<std::vector<int>> edited(static_cast<size_t>(spec.samples));
        for (int i = 0; i < spec.samples; ++i) {
            auto arng = derive_rng(spec.seed, "attack-" + name, static_cast<uint64_t>(i));
            edited[static_cast<size_t>(i)] =
                ed::attack(wm[static_cast<size_t>(i)], kind, spec.edit, gr, m, arng);
        }
        conditions.push_back({name, std::move(edited)});
    }

    // statistical calibration on the clean negatives
    MetricsReport rep;
    rep.samples = spec.samples;
    rep.metrics_valid = spec.samples >= 100;
    std::vector<dec::RetrievalTrace> nwm_traces;
    if (want_stat) {
        for (const auto& t : nwm)
            if (static_cast<int>(t.size()) > e.window) nwm_traces.push_back(dec::retrieve_partition(m, e, t));
        rep.gamma_hat = dec::calibrate_gamma(nwm_traces);
    }
    rep.gamma = gamma_stats(nwm, m, e);

    auto neural_score = [&](const std::vector<int>& t) {
        return dec::detect_neural(nullptr, d, m, t).value();
    };
    auto stat_score = [&](const std::vector<int>& t) -> std::optional<double> {
        if (static_cast<int>(t.size()) <= e.window) return std::nullopt;
        auto tr = dec::retrieve_partition(m, e, t);
        if (tr.n_scored() < 1) return std::nullopt;
        return dec::detect_statistical(tr, rep.gamma_hat).z;
    };

    std::vector<double> neg_neural, neg_stat;
    for (const auto& t : nwm) {
        if (want_neural) neg_neural.push_back(neural_score(t));
        if (want_stat)
            if (auto z = stat_score(t)) neg_stat.push_back(*z);
    }

    std::ofstream scores;
    if (!spec.out_dir.empty()) {
        scores.open(fs::path(spec.out_dir) / "scores.csv", std::ios::trunc);
        scores << "condition,id,arm,neural,z\n";
    }
    auto emit = [&](const std::string& cond, int id, const std::string& arm,
                    std::optional<double> nl, std::optional<double> z) {
        if (!scores.is_open()) return;
        scores << cond << ',' << id << ',' << arm << ',' << (nl ? fmt(*nl) : "") << ','
               << (z ? fmt(*z) : "") << "\n";
    };

    double clean_thr_neural = 0, clean_thr_stat = 0;
    std::vector<double> clean_wm_neural;  // for the correlation figure
    for (const auto& [cond, texts] : conditions) {
        std::vector<double> pos_neural, pos_stat;
        for (int i = 0; i < spec.samples; ++i) {
            std::optional<double> nl, z;
            if (want_neural) {
                nl = neural_score(texts[static_cast<size_t>(i)]);
                pos_neural.push_back(*nl);
            }
            if (want_stat)
                if ((z = stat_score(texts[static_cast<size_t>(i)]))) pos_stat.push_back(*z);
            emit(cond, i, "wm", nl, z);
        }
        if (cond == "clean") {
            for (int i = 0; i < spec.samples; ++i)
                emit(cond, i, "nwm",
                     want_neural ? std::optional<double>(neg_neural[static_cast<size_t>(i)])
                                 : std::nullopt,
                     want_stat ? stat_score(nwm[static_cast<size_t>(i)]) : std::nullopt);
            clean_wm_neural = pos_neural;
        }
        ConditionReport cr;
        cr.condition = cond;
        if (want_neural) {
            cr.neural = eval_detection(pos_neural, neg_neural);
            if (cond == "clean") clean_thr_neural = cr.neural->best_threshold;
            cr.shared_f1_neural = f1_at(pos_neural, neg_neural, clean_thr_neural);
        }
        if (want_stat) {
            cr.statistical = eval_detection(pos_stat, neg_stat);
            if (cond == "clean") clean_thr_stat = cr.statistical->best_threshold;
            cr.shared_f1_statistical = f1_at(pos_stat, neg_stat, clean_thr_stat);
        }
        rep.conditions.push_back(std::move(cr));
    }

    rep.quality = eval_quality(wm, nwm, gr);

    // cumulative retrieved perturbation vs neural logit on clean WM samples
    rep.correlation_r = std::numeric_limits<double>::quiet_NaN();
    if (want_neural && want_stat) {
        std::vector<double> cum, logit;
        for (int i = 0; i < spec.samples; ++i) {
            const auto& t = wm[static_cast<size_t>(i)];
            if (static_cast<int>(t.size()) <= e.window) continue;
            auto tr = dec::retrieve_partition(m, e, t);
            if (tr.n_scored() < 1) continue;
            cum.push_back(tr.cum_perturbation());
            logit.push_back(clean_wm_neural[static_cast<size_t>(i)]);
        }
        if (cum.size() >= 2) {
            try {
                rep.correlation_r = pearson(cum, logit);
            } catch (const std::domain_error&) {
                // constant series: leave the correlation unset
            }
        }
    }

    if (!spec.out_dir.empty()) {
        std::ofstream sj(fs::path(spec.out_dir) / "spec.json", std::ios::trunc);
        sj << spec.to_json().dump(2) << "\n";
        std::ofstream samples(fs::path(spec.out_dir) / "samples.jsonl", std::ios::trunc);
        for (int i = 0; i < spec.samples; ++i)
            samples << nlohmann::json{{"id", i},
                                      {"prompt", prompts[static_cast<size_t>(i)]},
                                      {"wm", wm[static_cast<size_t>(i)]},
                                      {"nwm", nwm[static_cast<size_t>(i)]}}
                           .dump()
                    << "\n";
        std::ofstream rj(fs::path(spec.out_dir) / "report.json", std::ios::trunc);
        rj << rep.to_json().dump(2) << "\n";
        std::ofstream rc(fs::path(spec.out_dir) / "report.csv", std::ios::trunc);
        rc << "condition,detector,best_f1,best_threshold,auc,tpr_at_1fpr,tpr_at_5fpr,shared_f1\n";
        for (const auto& c : rep.conditions) {
            if (c.neural)
                rc << c.condition << ",neural," << fmt(c.neural->best_f1) << ','
                   << fmt(c.neural->best_threshold) << ',' << fmt(c.neural->auc) << ','
                   << fmt(c.neural->tpr_at_1fpr) << ',' << fmt(c.neural->tpr_at_5fpr) << ','
                   << fmt(c.shared_f1_neural) << "\n";
            if (c.statistical)
                rc << c.condition << ",statistical," << fmt(c.statistical->best_f1) << ','
                   << fmt(c.statistical->best_threshold) << ',' << fmt(c.statistical->auc) << ','
                   << fmt(c.statistical->tpr_at_1fpr) << ',' << fmt(c.statistical->tpr_at_5fpr)
                   << ',' << fmt(c.shared_f1_statistical) << "\n";
        }
    }
    return rep;
}

}  // namespace wm::ev
