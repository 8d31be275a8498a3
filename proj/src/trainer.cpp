#include "wm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "wm/checkpoint.hpp"
#include "wm/sampler.hpp"
#include "wm/tokenizer.hpp"

namespace wm::trn {

using diff::Graph;
using diff::Tensor;

// ------------------------------------------------------------------- config

nlohmann::json TrainConfig::to_json() const {
    return {{"steps", steps},
            {"batch", batch},
            {"lr", lr},
            {"clip", clip},
            {"stage2_frac", stage2_frac},
            {"stage3_frac", stage3_frac},
            {"w_dec", w_dec},
            {"w_sem", w_sem},
            {"delta_train", delta_train},
            {"k", k},
            {"window", window},
            {"enc_hidden", enc_hidden},
            {"dec_hidden", dec_hidden},
            {"dec_head", dec_head},
            {"tau_g", tau_g},
            {"tau_t_start", tau_t_start},
            {"tau_t_end", tau_t_end},
            {"gen_tokens", gen_tokens},
            {"probe_every", probe_every},
            {"probe_size", probe_size},
            {"checkpoint_every", checkpoint_every},
            {"seed", seed},
            {"edit", edit.to_json()},
            {"use_mgda", use_mgda},
            {"use_static_weights", use_static_weights},
            {"use_noise", use_noise},
            {"use_sem", use_sem},
            {"normalize_grads", normalize_grads}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.clip = j.value("clip", c.clip);
    c.stage2_frac = j.value("stage2_frac", c.stage2_frac);
    c.stage3_frac = j.value("stage3_frac", c.stage3_frac);
    c.w_dec = j.value("w_dec", c.w_dec);
    c.w_sem = j.value("w_sem", c.w_sem);
    c.delta_train = j.value("delta_train", c.delta_train);
    c.k = j.value("k", c.k);
    c.window = j.value("window", c.window);
    c.enc_hidden = j.value("enc_hidden", c.enc_hidden);
    c.dec_hidden = j.value("dec_hidden", c.dec_hidden);
    c.dec_head = j.value("dec_head", c.dec_head);
    c.tau_g = j.value("tau_g", c.tau_g);
    c.tau_t_start = j.value("tau_t_start", c.tau_t_start);
    c.tau_t_end = j.value("tau_t_end", c.tau_t_end);
    c.gen_tokens = j.value("gen_tokens", c.gen_tokens);
    c.probe_every = j.value("probe_every", c.probe_every);
    c.probe_size = j.value("probe_size", c.probe_size);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.seed = j.value("seed", c.seed);
    if (j.contains("edit")) c.edit = ed::EditConfig::from_json(j.at("edit"));
    c.use_mgda = j.value("use_mgda", c.use_mgda);
    c.use_static_weights = j.value("use_static_weights", c.use_static_weights);
    c.use_noise = j.value("use_noise", c.use_noise);
    c.use_sem = j.value("use_sem", c.use_sem);
    c.normalize_grads = j.value("normalize_grads", c.normalize_grads);
    c.validate();
    return c;
}

void TrainConfig::validate() const {
    if (steps < 1 || batch < 1 || gen_tokens < 1 || probe_every < 1 || probe_size < 1)
        throw std::invalid_argument("TrainConfig: sizes must be positive");
    if (!(stage2_frac > 0 && stage2_frac < 1 && stage3_frac > 0 && stage3_frac < 1 &&
          stage2_frac < stage3_frac))
        throw std::invalid_argument("TrainConfig: curriculum fractions must be ascending in (0,1)");
    if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (!(clip >= 0)) throw std::invalid_argument("TrainConfig: clip must be >= 0");
    if (!(tau_g > 0) || !(tau_t_start > 0) || !(tau_t_end >= tau_t_start))
        throw std::invalid_argument("TrainConfig: temperatures must be positive, end >= start");
    if (!(delta_train >= 0)) throw std::invalid_argument("TrainConfig: delta_train must be >= 0");
    if (k < 1 || window < 1 || enc_hidden < 1 || dec_hidden < 1 || dec_head < 1)
        throw std::invalid_argument("TrainConfig: model widths must be positive");
    if (!(w_dec > 0) || !(w_sem > 0))
        throw std::invalid_argument("TrainConfig: loss weights must be > 0");
    edit.validate();
}

uint64_t TrainConfig::config_hash() const { return fnv1a64(to_json().dump()); }

int stage_of(const TrainConfig& cfg, int step) {
    if (step < 0 || step >= cfg.steps)
        throw std::out_of_range("stage_of: step " + std::to_string(step) + " outside run of " +
                                std::to_string(cfg.steps));
    int b2 = static_cast<int>(std::floor(cfg.stage2_frac * cfg.steps));
    int b3 = static_cast<int>(std::floor(cfg.stage3_frac * cfg.steps));
    return step < b2 ? 1 : step < b3 ? 2 : 3;
}

double tau_t_at(const TrainConfig& cfg, int step) {
    int b2 = static_cast<int>(std::floor(cfg.stage2_frac * cfg.steps));
    if (step >= b2 || b2 <= 1) return cfg.tau_t_end;
    double u = static_cast<double>(step) / b2;  // in [0, 1) across stage 1
    return cfg.tau_t_start * std::pow(cfg.tau_t_end / cfg.tau_t_start, u);
}

// ------------------------------------------------------------------- losses

Tensor loss_dec(Graph* g, const std::vector<Tensor>& logits, const std::vector<double>& labels) {
    if (logits.empty() || logits.size() != labels.size())
        throw std::invalid_argument("loss_dec: " + std::to_string(logits.size()) +
                                    " logits for " + std::to_string(labels.size()) + " labels");
    return diff::bce_with_logits(g, diff::concat_flat(g, logits), labels);
}

Tensor loss_sem(Graph* g, const Tensor& e_wm, const Tensor& e_nwm) {
    // 1 - cos in [0, 2]; cos_sim itself rejects zero-norm inputs.
    return diff::add_const(g, diff::scale(g, diff::cos_sim(g, e_wm, e_nwm), -1.0), 1.0);
}

double mgda_alpha(const std::vector<double>& g_dec, const std::vector<double>& g_sem) {
    if (g_dec.size() != g_sem.size())
        throw std::invalid_argument("mgda_alpha: gradient lengths differ");
    double num = 0, den = 0;
    for (size_t i = 0; i < g_dec.size(); ++i) {
        double d = g_dec[i] - g_sem[i];
        num += -d * g_sem[i];  // <g_sem - g_dec, g_sem>
        den += d * d;
    }
    if (std::sqrt(den) < 1e-12) return 0.5;  // coincident gradients: any alpha ties
    return std::clamp(num / den, 0.0, 1.0);
}

// ------------------------------------------------------------------ helpers

namespace {

std::vector<Tensor> joint_params(const TrainState& st) {
    std::vector<Tensor> ps = st.encoder.params();
    auto dp = st.decoder.params();
    ps.insert(ps.end(), dp.begin(), dp.end());
    return ps;
}

long long total_size(const std::vector<Tensor>& ps) {
    long long n = 0;
    for (const auto& p : ps) n += p.size();
    return n;
}

// Current-epoch gradients of the parameter list, flattened in order (same
// layout as Graph::backward_pair).
std::vector<double> flat_grads(const std::vector<Tensor>& ps, long long total) {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(total));
    for (const auto& p : ps) {
        if (diff::grad_is_current(p))
            out.insert(out.end(), p.d->g.begin(), p.d->g.end());
        else
            out.insert(out.end(), static_cast<size_t>(p.size()), 0.0);
    }
    return out;
}

double l2(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Training prompt: one grammar sentence as content-token ids, capped at 12.
std::vector<int> sample_prompt(const Grammar& gr, Rng& rng) {
    auto sent = sample_sentence(gr, rng);
    std::vector<int> ids;
    for (int wid : sent) {
        ids.push_back(wid + tok::kFirstContent);
        if (ids.size() == 12) break;
    }
    return ids;
}

smp::GenerationConfig gen_config(const TrainConfig& cfg, uint64_t seed, bool watermark) {
    smp::GenerationConfig gc;
    gc.max_tokens = cfg.gen_tokens;
    gc.tau_g = cfg.tau_g;
    gc.seed = seed;
    gc.delta = cfg.delta_train;
    gc.k = cfg.k;
    gc.watermark = watermark;
    return gc;
}

}  // namespace

// ----------------------------------------------------------------- training

TrainState init_train(const lm::LanguageModel& lm, const TrainConfig& cfg) {
    cfg.validate();
    if (!lm.frozen) throw std::invalid_argument("init_train: language model must be frozen");
    enc::Encoder e = enc::init_encoder(cfg.window, cfg.k, lm.d_model(), cfg.enc_hidden,
                                       derive_seed(cfg.seed, "enc-init"));
    e.tau_t = cfg.tau_t_start;
    dec::Decoder d = dec::init_decoder(lm.d_model(), cfg.dec_hidden, cfg.dec_head,
                                       derive_seed(cfg.seed, "dec-init"));
    std::vector<Tensor> ps = e.params();
    auto dp = d.params();
    ps.insert(ps.end(), dp.begin(), dp.end());
    diff::AdamConfig ac;
    ac.lr = cfg.lr;
    ac.clip = cfg.clip;
    return TrainState{cfg, std::move(e), std::move(d), diff::Adam(std::move(ps), ac), 0};
}

StepReport train_step(TrainState& st, const lm::LanguageModel& lm, const Grammar& gr,
                      const std::vector<std::vector<int>>& prompts, int stage) {
    const TrainConfig& cfg = st.cfg;
    if (stage < 1 || stage > 3) throw std::invalid_argument("train_step: stage must be 1..3");
    if (prompts.empty()) throw std::invalid_argument("train_step: empty prompt batch");
    st.encoder.tau_t = tau_t_at(cfg, st.step);

    std::vector<Tensor> params = joint_params(st);
    long long total = total_size(params);
    std::vector<double> acc_dec(static_cast<size_t>(total), 0.0);
    std::vector<double> acc_sem(static_cast<size_t>(total), 0.0);
    int batch = static_cast<int>(prompts.size());
    bool with_sem = stage >= 2 && cfg.use_sem;
    double wd = cfg.use_static_weights ? cfg.w_dec : 1.0;
    double ws = cfg.use_static_weights ? cfg.w_sem : 1.0;

    // Clean-model generations first: they are also the copy-paste pool.
    std::vector<smp::Generation> nwm(static_cast<size_t>(batch));
    std::vector<std::vector<int>> pool;
    pool.reserve(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        auto gc = gen_config(cfg, derive_seed(cfg.seed, "gen-nwm", st.step, i), false);
        nwm[static_cast<size_t>(i)] = smp::generate_hard(lm, st.encoder, prompts[i], gc);
        pool.push_back(nwm[static_cast<size_t>(i)].tokens);
    }

    double sum_ld = 0, sum_ls = 0;
    for (int i = 0; i < batch; ++i) {
        Graph g;
        auto gw = gen_config(cfg, derive_seed(cfg.seed, "gen-wm", st.step, i), true);
        auto wm = smp::generate_soft(&g, lm, st.encoder, prompts[i], gw);

        std::vector<Tensor> wm_seq = wm.probs;
        if (stage >= 3 && cfg.use_noise) {
            auto nrng = derive_rng(cfg.seed, "noise", st.step, i);
            wm_seq = ed::noise_layer(&g, lm, gr, wm.probs, pool, cfg.edit, nrng).seq;
        }

        Tensor lg_wm = dec::detect_neural(&g, st.decoder, lm, wm_seq);
        Tensor lg_nwm = dec::detect_neural(&g, st.decoder, lm, nwm[static_cast<size_t>(i)].tokens);
        Tensor ld = loss_dec(&g, {lg_wm, lg_nwm}, {1.0, 0.0});
        sum_ld += ld.value();
        Tensor obj_d = diff::scale(&g, ld, wd);

        if (with_sem) {
            // Fidelity is judged on the unedited watermarked rows.
            Tensor e_wm = lm::semantic_embedding(&g, lm, wm.probs);
            Tensor e_nwm = lm::semantic_embedding(&g, lm, nwm[static_cast<size_t>(i)].tokens);
            Tensor ls = loss_sem(&g, e_wm, e_nwm);
            sum_ls += ls.value();
            Tensor obj_s = diff::scale(&g, ls, ws);
            auto [gd, gs] = g.backward_pair(obj_d, obj_s, params);
            for (long long j = 0; j < total; ++j) {
                acc_dec[static_cast<size_t>(j)] += gd[static_cast<size_t>(j)];
                acc_sem[static_cast<size_t>(j)] += gs[static_cast<size_t>(j)];
            }
        } else {
            g.backward(obj_d);
            auto gd = flat_grads(params, total);
            for (long long j = 0; j < total; ++j) acc_dec[static_cast<size_t>(j)] += gd[static_cast<size_t>(j)];
        }
    }

    StepReport rep;
    rep.loss_dec = sum_ld / batch;
    rep.loss_sem = with_sem ? sum_ls / batch : 0.0;
    if (!std::isfinite(rep.loss_dec) || !std::isfinite(rep.loss_sem))
        throw std::runtime_error("train diverged at step " + std::to_string(st.step) +
                                 ": loss_dec=" + std::to_string(rep.loss_dec) +
                                 " loss_sem=" + std::to_string(rep.loss_sem));
    for (auto& v : acc_dec) v /= batch;
    for (auto& v : acc_sem) v /= batch;
    rep.gnorm_dec = l2(acc_dec);
    rep.gnorm_sem = l2(acc_sem);

    std::vector<double> combined;
    if (!with_sem) {
        rep.alpha = 1.0;
        combined = std::move(acc_dec);
    } else {
        if (cfg.normalize_grads) {
            if (rep.gnorm_dec > 0)
                for (auto& v : acc_dec) v /= rep.gnorm_dec;
            if (rep.gnorm_sem > 0)
                for (auto& v : acc_sem) v /= rep.gnorm_sem;
        }
        if (cfg.use_mgda) {
            double a = mgda_alpha(acc_dec, acc_sem);
            rep.alpha = a;
            combined.resize(static_cast<size_t>(total));
            for (long long j = 0; j < total; ++j)
                combined[static_cast<size_t>(j)] = a * acc_dec[static_cast<size_t>(j)] +
                                                   (1 - a) * acc_sem[static_cast<size_t>(j)];
        } else {
            rep.alpha = -1;  // sentinel: plain sum, no convex combination
            combined.resize(static_cast<size_t>(total));
            for (long long j = 0; j < total; ++j)
                combined[static_cast<size_t>(j)] =
                    acc_dec[static_cast<size_t>(j)] + acc_sem[static_cast<size_t>(j)];
        }
    }

    size_t off = 0;
    for (auto& p : params) {
        auto n = static_cast<size_t>(p.size());
        diff::set_grad(p, std::vector<double>(combined.begin() + static_cast<long>(off),
                                              combined.begin() + static_cast<long>(off + n)));
        off += n;
    }
    st.opt.step();
    st.step += 1;
    return rep;
}

ProbeReport run_probe(const TrainState& st, const lm::LanguageModel& lm, const Grammar& gr) {
    const TrainConfig& cfg = st.cfg;
    auto prng = derive_rng(cfg.seed, "probe-prompts");
    int tp = 0, fn = 0, fp = 0, tn = 0;
    for (int i = 0; i < cfg.probe_size; ++i) {
        auto prompt = sample_prompt(gr, prng);
        auto wm = smp::generate_hard(
            lm, st.encoder, prompt, gen_config(cfg, derive_seed(cfg.seed, "probe-wm", i), true));
        auto nw = smp::generate_hard(
            lm, st.encoder, prompt, gen_config(cfg, derive_seed(cfg.seed, "probe-nwm", i), false));
        // Forward-only detection: a null graph records no tape.
        double lw = dec::detect_neural(nullptr, st.decoder, lm, wm.tokens).value();
        double ln = dec::detect_neural(nullptr, st.decoder, lm, nw.tokens).value();
        (lw > 0 ? tp : fn) += 1;
        (ln > 0 ? fp : tn) += 1;
    }
    ProbeReport pr;
    pr.acc = static_cast<double>(tp + tn) / (2.0 * cfg.probe_size);
    double denom = 2.0 * tp + fp + fn;
    pr.f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
    return pr;
}

// ------------------------------------------------------------- persistence

void save_train_state(const TrainState& st, const lm::LanguageModel& lm,
                      const std::string& path) {
    ckpt::Checkpoint c;
    c.manifest = {{"format_version", ckpt::kFormatVersion},
                  {"kind", "wm-train"},
                  {"step", st.step},
                  {"config", st.cfg.to_json()},
                  {"config_hash", st.cfg.config_hash()},
                  {"lm_checksum", lm.weights_checksum()}};
    for (const auto& [name, t] : st.encoder.named_params()) c.add("enc." + name, t);
    for (const auto& [name, t] : st.decoder.named_params()) c.add("dec." + name, t);
    st.opt.save_state(c, "adam.");
    ckpt::save(path, c);
}

TrainState load_train_state(const std::string& path, const lm::LanguageModel& lm) {
    auto c = ckpt::load(path);
    if (c.manifest.value("kind", "") != "wm-train")
        throw std::runtime_error("load_train_state: " + path + " is not a training checkpoint");
    if (c.manifest.at("lm_checksum").get<uint64_t>() != lm.weights_checksum())
        throw std::runtime_error("load_train_state: checkpoint was trained against a different LM");
    TrainConfig cfg = TrainConfig::from_json(c.manifest.at("config"));

    enc::Encoder e;
    e.window = cfg.window;
    e.k = cfg.k;
    e.d_model = lm.d_model();
    e.hidden = cfg.enc_hidden;
    e.w_ctx = c.get("enc.w_ctx");
    e.w_cand = c.get("enc.w_cand");
    e.b1 = c.get("enc.b1");
    e.w2 = c.get("enc.w2");
    e.b2 = c.get("enc.b2");
    e.w3 = c.get("enc.w3");
    e.b3 = c.get("enc.b3");
    for (auto& p : e.params()) p.d->requires_grad = p.d->flows = true;

    dec::Decoder d;
    d.d_model = lm.d_model();
    d.hidden = cfg.dec_hidden;
    d.head_hidden = cfg.dec_head;
    d.cell.wzx = c.get("dec.wzx");
    d.cell.wzh = c.get("dec.wzh");
    d.cell.bz = c.get("dec.bz");
    d.cell.wcx = c.get("dec.wcx");
    d.cell.wch = c.get("dec.wch");
    d.cell.bc = c.get("dec.bc");
    d.w1 = c.get("dec.w1");
    d.b1 = c.get("dec.b1");
    d.w2 = c.get("dec.w2");
    d.b2 = c.get("dec.b2");
    for (auto& p : d.params()) p.d->requires_grad = p.d->flows = true;

    int step = c.manifest.at("step").get<int>();
    e.tau_t = tau_t_at(cfg, std::min(step, cfg.steps - 1));
    std::vector<Tensor> ps = e.params();
    auto dp = d.params();
    ps.insert(ps.end(), dp.begin(), dp.end());
    diff::AdamConfig ac;
    ac.lr = cfg.lr;
    ac.clip = cfg.clip;
    TrainState st{cfg, std::move(e), std::move(d), diff::Adam(std::move(ps), ac), step};
    st.opt.load_state(c, "adam.");
    return st;
}

// ------------------------------------------------------------------ the run

namespace {

void write_metrics_row(std::ofstream& out, int step, int stage, const StepReport& rep,
                       const ProbeReport* probe) {
    char buf[256];
    std::string alpha;
    if (rep.alpha >= 0) {
        std::snprintf(buf, sizeof buf, "%.6g", rep.alpha);
        alpha = buf;
    }
    std::snprintf(buf, sizeof buf, "%d,%d,%.8g,%.8g,%s", step, stage, rep.loss_dec, rep.loss_sem,
                  alpha.c_str());
    out << buf;
    if (probe) {
        std::snprintf(buf, sizeof buf, ",%.4f,%.4f", probe->acc, probe->f1);
        out << buf;
    } else {
        out << ",,";
    }
    out << "\n";
}

}  // namespace

TrainReport train(const lm::LanguageModel& lm, const Grammar& gr, const TrainConfig& cfg,
                  const std::string& out_dir, const std::string& resume_path) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    bool fresh = resume_path.empty();
    TrainState st = fresh ? init_train(lm, cfg) : load_train_state(resume_path, lm);
    if (!fresh && st.cfg.config_hash() != cfg.config_hash())
        throw std::runtime_error("train: resumed checkpoint was produced by a different config");

    TrainReport report;
    report.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    report.state_path = (fs::path(out_dir) / "train_state.ck").string();
    report.encoder_path = (fs::path(out_dir) / "encoder.ck").string();
    report.decoder_path = (fs::path(out_dir) / "decoder.ck").string();

    std::ofstream metrics(report.metrics_path,
                          fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw std::runtime_error("train: cannot write " + report.metrics_path);
    if (fresh) metrics << "step,stage,loss_dec,loss_sem,alpha,probe_acc,probe_f1\n";

    for (int s = st.step; s < cfg.steps; ++s) {
        int stage = stage_of(cfg, s);
        auto prng = derive_rng(cfg.seed, "prompts", s);
        std::vector<std::vector<int>> prompts;
        prompts.reserve(static_cast<size_t>(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b) prompts.push_back(sample_prompt(gr, prng));

        StepReport rep;
        try {
            rep = train_step(st, lm, gr, prompts, stage);
        } catch (const std::exception& ex) {
            std::ofstream dump(fs::path(out_dir) / "diverged.json");
            dump << nlohmann::json{{"step", s}, {"stage", stage}, {"error", ex.what()}}.dump(2)
                 << "\n";
            throw;
        }

        bool probe_now = s % cfg.probe_every == 0 || s == cfg.steps - 1;
        ProbeReport pr;
        if (probe_now) pr = run_probe(st, lm, gr);
        write_metrics_row(metrics, s, stage, rep, probe_now ? &pr : nullptr);
        metrics.flush();
        if (probe_now) report.final_probe = pr;

        if (cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 &&
            s + 1 < cfg.steps)
            save_train_state(st, lm, report.state_path);
    }

    st.encoder.tau_t = cfg.tau_t_end;  // inference always runs at the ceiling
    enc::save_encoder(st.encoder, report.encoder_path);
    dec::save_decoder(st.decoder, report.decoder_path);
    save_train_state(st, lm, report.state_path);
    report.steps_run = st.step;
    return report;
}

}  // namespace wm::trn
