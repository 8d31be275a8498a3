#pragma once

// Two toy tokenizers (word-level and trained subword BPE), the token-domain
// converter that bridges them, and alignment diagnostics.
//
// Both tokenizers share one id layout: seven structural specials occupy ids
// 0..6 ([PAD] [BOS] [EOS] [EPB] [EPE] [SPB] [SPE]) and content pieces follow
// densely from id 7. Language models embed tokenizer ids directly, so the
// embedding row count equals vocab_size().
//
// Subword pieces use a "##" continuation marker (word-internal BPE): the
// first piece of a word is bare, every later piece is prefixed with "##".
// Detokenization joins words with single spaces and skips specials, so
// detokenize(tokenize(text)) reproduces text up to whitespace normalization.
//
// The converter works purely on token strings. Context conversion takes the
// latest 2W source tokens, detokenizes, retokenizes with the target
// tokenizer, and keeps the latest W tokens (left-padded with [PAD] when
// shorter). The doubled window absorbs the boundary distortion of a window
// that starts mid-word, which is why converting a tokenizer to itself is the
// identity on the suffix it returns.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace wm::tok {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kEpb = 3;  // edit-prompt begin
inline constexpr int kEpe = 4;  // edit-prompt end
inline constexpr int kSpb = 5;  // semantic-probe begin
inline constexpr int kSpe = 6;  // semantic-probe end
inline constexpr int kFirstContent = 7;
inline constexpr int kNumSpecials = 7;

const std::vector<std::string>& special_pieces();

enum class Kind { word, subword };

enum class Tag { unchanged, merged, split };

std::string to_string(Kind k);
std::string to_string(Tag t);

class Tokenizer {
  public:
    std::string id;
    Kind kind = Kind::word;
    std::vector<std::string> pieces;                           // id -> piece string
    std::vector<std::pair<std::string, std::string>> merges;   // subword only

    int vocab_size() const { return static_cast<int>(pieces.size()); }
    int content_size() const { return vocab_size() - kNumSpecials; }
    bool is_special(int id_) const { return id_ >= 0 && id_ < kNumSpecials; }

    // -1 when the piece is not in the vocabulary.
    int lookup(const std::string& piece) const;
    const std::string& piece(int id_) const;

    // Whitespace-split words mapped to ids; never emits specials. Unknown
    // words (word kind) or unknown characters (subword kind) are rejected.
    std::vector<int> tokenize(const std::string& text) const;
    std::vector<std::string> tokenize_pieces(const std::string& text) const;

    // Content pieces only; specials are structural and carry no text. A
    // leading continuation piece (window cut mid-word) starts a bare word.
    std::string detokenize(const std::vector<int>& ids) const;

    // Precompute the piece decomposition of each word. The cache is immutable
    // afterwards, keeping tokenize() re-entrant; unseen words are encoded on
    // the fly without touching it. Factories warm from their corpus already.
    void warm(const std::vector<std::string>& words);

    // Line-oriented: vocab file has one piece per line in id order (specials
    // included); merges file has one "left right" pair per line. The merges
    // path is ignored for word tokenizers.
    void save(const std::string& vocab_path, const std::string& merges_path) const;
    static Tokenizer load(const std::string& id, Kind kind, const std::string& vocab_path,
                          const std::string& merges_path);

    // Rebuild lookup tables after pieces/merges are filled; validates the
    // special prefix and rejects duplicate pieces.
    void finalize();

  private:
    std::unordered_map<std::string, int> piece_ids_;
    std::unordered_map<std::string, int> merge_rank_;  // "left\x1fright" -> rank
    std::unordered_map<std::string, std::vector<int>> word_cache_;

    std::vector<int> encode_word(const std::string& word) const;
};

// Sorted distinct whitespace-split words of a corpus.
std::vector<std::string> corpus_words(const std::vector<std::string>& corpus);

// Word-level tokenizer over an explicit vocabulary (one id per word, in the
// given order). Words must be distinct, nonempty, and whitespace-free.
Tokenizer word_tokenizer(const std::vector<std::string>& vocab, const std::string& id);

// Convenience: vocabulary = sorted distinct words of the corpus.
Tokenizer word_tokenizer_from_corpus(const std::vector<std::string>& corpus,
                                     const std::string& id);

// Greedy pair-merge BPE. target_content_size counts content pieces (initial
// character alphabet + merge products); the seven specials come on top. Merge
// selection: highest pair count, ties broken by lexicographically smallest
// (left, right) pair. Rejects a target below the alphabet size.
Tokenizer train_bpe(const std::vector<std::string>& corpus, int target_content_size,
                    const std::string& id);

struct ConversionResult {
    std::vector<int> tokens;  // target-domain ids, fixed length
    std::vector<Tag> tags;    // one per output token ([PAD] positions: unchanged)

    Tag last_tag() const;
};

// Latest 2*window tokens of a_ids, detokenized and retokenized under B, then
// truncated to the latest `window` tokens (left-padded with [PAD]).
std::vector<int> convert_context(const std::vector<int>& a_ids, const Tokenizer& a,
                                 int window, const Tokenizer& b);

// Same windowing for context plus one appended candidate token; returns
// window+1 target tokens. The candidate may merge with the preceding text,
// split into several target pieces, or survive unchanged; the tag of the last
// output position reports which. Tags compare character spans per word:
// equal span -> unchanged, target piece inside one source piece -> split,
// anything spanning several source pieces -> merged.
ConversionResult convert_candidate(const std::vector<int>& a_context, int a_candidate,
                                   const Tokenizer& a, const Tokenizer& b, int window);

// 1 - edit_distance / max(|a|,|b|) over token strings; both empty -> 1.
double levenshtein_similarity(const std::vector<std::string>& a,
                              const std::vector<std::string>& b);

// Mean pairwise levenshtein_similarity of tokenized sentences. Requires at
// least 100 sentences; diagonal is exactly 1.
std::vector<std::vector<double>> alignment_report(const std::vector<std::string>& corpus,
                                                  const std::vector<const Tokenizer*>& toks);

// CSV with a header row of tokenizer ids and one labelled row per tokenizer.
std::string alignment_csv(const std::vector<std::vector<double>>& matrix,
                          const std::vector<std::string>& ids);

// Exact binomial tail: probability that more than half of k candidate tokens
// misalign when each aligns independently with probability align_prob.
double misalignment_tail(int k, double align_prob);

}  // namespace wm::tok
