#pragma once
// Watermark decoders: a trainable recurrent detector over frozen embeddings,
// the red/green retrieval pass that re-derives per-token watermark logits
// from a stored stream, a z-score statistical detector on top of it, and
// false-positive-rate threshold calibration shared by both score kinds.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wm/encoder.hpp"
#include "wm/lm.hpp"
#include "wm/tensor.hpp"

namespace wm::dec {

// Recurrent detector: frozen-embedding input -> GRU -> two-layer MLP head ->
// one detection logit per sequence, read off the final hidden state.
struct Decoder {
    int d_model = 0;      // embedding width of the host language model
    int hidden = 64;      // recurrent state width
    int head_hidden = 32; // MLP head width

    diff::GruCell cell;   // d_model -> hidden
    diff::Tensor w1, b1;  // hidden x head_hidden, head_hidden
    diff::Tensor w2, b2;  // head_hidden x 1, 1

    std::vector<diff::Tensor> params() const;
    std::vector<std::pair<std::string, diff::Tensor>> named_params() const;
    uint64_t weights_checksum() const;
    void validate() const;  // widths positive, shapes consistent
};

// Fresh decoder with uniform 1/sqrt(fan_in) init, seeded deterministically.
Decoder init_decoder(int d_model, int hidden, int head_hidden, uint64_t seed);

// Detection logit (1 x 1) for a token stream. The soft overload consumes
// probability rows (1 x |V| each); one-hot rows match the hard path bit for
// bit. Differentiable w.r.t. decoder weights and soft rows; sigmoid of the
// logit is the watermark probability.
diff::Tensor detect_neural(diff::Graph* g, const Decoder& dec, const lm::LanguageModel& lm,
                           const std::vector<int>& ids);
diff::Tensor detect_neural(diff::Graph* g, const Decoder& dec, const lm::LanguageModel& lm,
                           const std::vector<diff::Tensor>& soft_seq);

// Per-position result of re-deriving the watermark partition from a stored
// stream. Position t is scored once t >= window; a position whose realized
// token fell outside the top-k candidate set is grey (rank -1, lw 0).
struct RetrievalTrace {
    int window = 0;           // first scored stream position
    std::vector<int> ranks;   // candidate rank per position window..L-1, -1 = grey
    std::vector<double> lw;   // retrieved watermark logit in [-1, 1], 0 when grey

    int n_scored() const;     // non-grey positions
    int n_green() const;      // positions with lw > 0
    double cum_perturbation() const;  // sum of lw over non-grey positions
};

// Replays the stream through the frozen LM, rebuilding masked base logits,
// top-k candidates, and watermark logits exactly as generation did (hidden
// state carried from the stream start). Needs strictly more than `window`
// tokens.
RetrievalTrace retrieve_partition(const lm::LanguageModel& lm, const enc::Encoder& e,
                                  const std::vector<int>& tokens);

struct StatScore {
    int n_scored = 0;
    int n_green = 0;
    double green_fraction = 0;
    double z = 0;
    double cum_perturbation = 0;
};

// Normal-approximation test of the green-token count against rate gamma_hat:
//   z = (G - gamma_hat * n_s) / sqrt(gamma_hat * (1 - gamma_hat) * n_s).
// Positions with lw exactly 0 count as red. Throws when the trace has no
// scored positions; callers treat that sample as non-watermarked and say so.
StatScore detect_statistical(const RetrievalTrace& trace, double gamma_hat);

// Mean green fraction over non-watermarked calibration traces (traces without
// scored positions are skipped). Needs >= 100 usable traces; the result must
// land strictly inside (0, 1).
double calibrate_gamma(const std::vector<RetrievalTrace>& nwm_traces);

// Threshold at the empirical (1 - target_fpr) quantile of non-watermarked
// scores: the midpoint of the boundary pair, moved past ties toward higher
// rank, so a strict `score > threshold` verdict keeps the calibration-set
// false-positive rate <= target. Works for either detector's score. Needs
// >= 100 scores.
double calibrate_threshold(std::vector<double> nwm_scores, double target_fpr);

// Per-sample record for the detect CLI: {id, neural_logit, green_fraction, z,
// cum_perturbation, n_scored, threshold, verdict}. A missing stat score (all
// positions grey) nulls the statistical fields and adds a warning.
nlohmann::json detection_record(const std::string& id, double neural_logit,
                                const std::optional<StatScore>& stat, double threshold);

// ------------------------------------------------------------- persistence

void save_decoder(const Decoder& d, const std::string& path);
Decoder load_decoder(const std::string& path);

}  // namespace wm::dec
