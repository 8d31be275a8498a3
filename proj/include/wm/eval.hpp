#pragma once
// Evaluation harness: detection metrics (best-threshold F1, ROC, AUC,
// TPR@FPR), text-quality metrics against the grammar oracle (perplexity
// ratio, unigram KL), green-fraction statistics, and a full experiment
// runner that generates paired watermarked/clean samples, applies the attack
// suite, scores both detectors, and persists byte-stable reports.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wm/decoder.hpp"
#include "wm/editor.hpp"
#include "wm/encoder.hpp"
#include "wm/grammar.hpp"
#include "wm/lm.hpp"
#include "wm/sampler.hpp"

namespace wm::ev {

// ------------------------------------------------------------- detection

struct RocPoint {
    double threshold = 0;
    double fpr = 0;
    double tpr = 0;
};

struct DetectionMetrics {
    double best_f1 = 0;         // max F1 over the full threshold sweep
    double best_threshold = 0;  // lowest threshold attaining best_f1
    double auc = 0;             // rank-based (ties count half)
    double tpr_at_1fpr = 0;     // TPR at the 1% / 5% calibrated thresholds
    double tpr_at_5fpr = 0;
    std::vector<RocPoint> roc;  // fpr ascending, endpoints included

    nlohmann::json to_json(bool with_roc = false) const;
};

// Threshold sweep with watermarked = positive, predicted positive when
// score > threshold. Candidate thresholds: below-min (all positive),
// midpoints between adjacent distinct scores, above-max (all negative).
DetectionMetrics eval_detection(const std::vector<double>& wm_scores,
                                const std::vector<double>& nwm_scores);

// F1 of the same rule at one fixed threshold.
double f1_at(const std::vector<double>& wm_scores, const std::vector<double>& nwm_scores,
             double threshold);

// Pearson correlation; throws std::domain_error when either side is constant.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// --------------------------------------------------------------- quality

struct QualityMetrics {
    double ppl_wm = 0;      // mean grammar-oracle perplexity per set
    double ppl_nwm = 0;
    double ppl_ratio = 0;   // ppl_wm / ppl_nwm
    double unigram_kl = 0;  // KL(WM-unigram || NWM-unigram), add-1 smoothed

    nlohmann::json to_json() const;
};

// Texts are content-token-id sequences; special ids are skipped.
QualityMetrics eval_quality(const std::vector<std::vector<int>>& wm_texts,
                            const std::vector<std::vector<int>>& nwm_texts, const Grammar& gr);

struct GammaStats {
    double mean = 0;   // green fraction over clean-model text: calibration of
    double stdev = 0;  // the statistical detector's null
    int n = 0;

    nlohmann::json to_json() const;
};

// Green-fraction mean/std via retrieval over clean-model token sequences;
// sequences too short to score are skipped (n reports the usable count).
GammaStats gamma_stats(const std::vector<std::vector<int>>& nwm_texts,
                       const lm::LanguageModel& lm, const enc::Encoder& e);

// ------------------------------------------------------------ experiment

struct ExperimentSpec {
    std::string lm_path;
    std::string encoder_path;
    std::string decoder_path;
    uint64_t grammar_seed = 1;  // evaluation corpus source
    int samples = 200;          // per arm (WM and NWM)
    int prompt_tokens = 6;
    int min_tokens = 40;        // sample length drawn uniformly per pair
    int max_tokens = 60;
    double delta = 1.0;
    int k = 20;
    std::vector<std::string> attacks = {"synonym", "copypaste", "paraphrase"};
    std::string detector = "both";  // neural | statistical | both
    double target_fpr = 0.01;
    ed::EditConfig edit;        // attack strengths
    uint64_t seed = 1;
    std::string out_dir;

    nlohmann::json to_json() const;
    static ExperimentSpec from_json(const nlohmann::json& j);
    void validate() const;  // paths nonempty, counts positive, detector known
};

struct ConditionReport {
    std::string condition;  // clean | synonym | copypaste | paraphrase
    std::optional<DetectionMetrics> neural;
    std::optional<DetectionMetrics> statistical;
    // F1 at the clean condition's best threshold (threshold-sharing policy).
    double shared_f1_neural = 0;
    double shared_f1_statistical = 0;

    nlohmann::json to_json() const;
};

struct MetricsReport {
    int samples = 0;
    bool metrics_valid = false;  // samples >= 100
    double gamma_hat = 0;        // statistical-null calibration (clean text)
    GammaStats gamma;
    QualityMetrics quality;
    std::vector<ConditionReport> conditions;
    // Correlation between retrieved cumulative perturbation and the neural
    // logit over clean watermarked samples.
    double correlation_r = 0;

    nlohmann::json to_json() const;
};

// Full protocol: paired generations, attack suite, both detectors, quality
// and calibration statistics. Writes spec.json, samples.jsonl, scores.csv,
// report.json, and report.csv under spec.out_dir; reruns with the same spec
// are byte-identical. Throws on unreadable checkpoints.
MetricsReport run_experiment(const ExperimentSpec& spec);

}  // namespace wm::ev
