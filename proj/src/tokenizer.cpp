#include "wm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace wm::tok {

namespace {

constexpr char kRankSep = '\x1f';

bool has_marker(const std::string& piece) {
    return piece.size() >= 2 && piece[0] == '#' && piece[1] == '#';
}

// Piece text without the continuation marker.
std::string content_of(const std::string& piece) {
    return has_marker(piece) ? piece.substr(2) : piece;
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> out;
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// A word as its initial character pieces: first char bare, rest marked.
std::vector<std::string> char_pieces(const std::string& word) {
    std::vector<std::string> syms;
    syms.reserve(word.size());
    for (size_t i = 0; i < word.size(); ++i) {
        std::string s = i == 0 ? std::string() : std::string("##");
        s.push_back(word[i]);
        syms.push_back(std::move(s));
    }
    return syms;
}

}  // namespace

const std::vector<std::string>& special_pieces() {
    static const std::vector<std::string> kSpecials = {"[PAD]", "[BOS]", "[EOS]", "[EPB]",
                                                       "[EPE]", "[SPB]", "[SPE]"};
    return kSpecials;
}

std::string to_string(Kind k) { return k == Kind::word ? "word" : "subword"; }

std::string to_string(Tag t) {
    switch (t) {
        case Tag::unchanged: return "unchanged";
        case Tag::merged: return "merged";
        case Tag::split: return "split";
    }
    throw std::logic_error("to_string: bad tag");
}

// ---------------------------------------------------------------- Tokenizer

void Tokenizer::finalize() {
    if (static_cast<int>(pieces.size()) < kNumSpecials)
        throw std::runtime_error("tokenizer '" + id + "': vocabulary lacks the special prefix");
    for (int i = 0; i < kNumSpecials; ++i)
        if (pieces[i] != special_pieces()[i])
            throw std::runtime_error("tokenizer '" + id + "': id " + std::to_string(i) +
                                     " must be " + special_pieces()[i]);
    if (kind == Kind::word && !merges.empty())
        throw std::runtime_error("tokenizer '" + id + "': word tokenizer cannot carry merges");
    piece_ids_.clear();
    for (size_t i = 0; i < pieces.size(); ++i) {
        if (pieces[i].empty())
            throw std::runtime_error("tokenizer '" + id + "': empty piece at id " +
                                     std::to_string(i));
        if (!piece_ids_.emplace(pieces[i], static_cast<int>(i)).second)
            throw std::runtime_error("tokenizer '" + id + "': duplicate piece '" + pieces[i] +
                                     "'");
    }
    merge_rank_.clear();
    for (size_t r = 0; r < merges.size(); ++r) {
        std::string key = merges[r].first + kRankSep + merges[r].second;
        if (!merge_rank_.emplace(std::move(key), static_cast<int>(r)).second)
            throw std::runtime_error("tokenizer '" + id + "': duplicate merge rule");
    }
    word_cache_.clear();
}

int Tokenizer::lookup(const std::string& piece_) const {
    auto it = piece_ids_.find(piece_);
    return it == piece_ids_.end() ? -1 : it->second;
}

const std::string& Tokenizer::piece(int id_) const {
    if (id_ < 0 || id_ >= vocab_size())
        throw std::out_of_range("tokenizer '" + id + "': id " + std::to_string(id_) +
                                " outside vocabulary of size " + std::to_string(vocab_size()));
    return pieces[id_];
}

std::vector<int> Tokenizer::encode_word(const std::string& word) const {
    if (kind == Kind::word) {
        int wid = lookup(word);
        if (wid < 0)
            throw std::runtime_error("tokenizer '" + id + "': unknown word '" + word + "'");
        return {wid};
    }
    std::vector<std::string> syms = char_pieces(word);
    while (syms.size() >= 2) {
        int best_rank = std::numeric_limits<int>::max();
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = merge_rank_.find(syms[i] + kRankSep + syms[i + 1]);
            if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        const auto& [left, right] = merges[best_rank];
        std::vector<std::string> out;
        out.reserve(syms.size());
        for (size_t i = 0; i < syms.size();) {
            if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
                out.push_back(left + content_of(right));
                i += 2;
            } else {
                out.push_back(syms[i++]);
            }
        }
        syms.swap(out);
    }
    std::vector<int> ids;
    ids.reserve(syms.size());
    for (const auto& s : syms) {
        int pid = lookup(s);
        if (pid < 0)
            throw std::runtime_error("tokenizer '" + id + "': word '" + word +
                                     "' needs unknown piece '" + s + "'");
        ids.push_back(pid);
    }
    return ids;
}

std::vector<int> Tokenizer::tokenize(const std::string& text) const {
    std::istringstream is(text);
    std::string w;
    std::vector<int> out;
    while (is >> w) {
        auto it = word_cache_.find(w);
        if (it != word_cache_.end()) {
            out.insert(out.end(), it->second.begin(), it->second.end());
        } else {
            auto ids = encode_word(w);
            out.insert(out.end(), ids.begin(), ids.end());
        }
    }
    return out;
}

std::vector<std::string> Tokenizer::tokenize_pieces(const std::string& text) const {
    auto ids = tokenize(text);
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(pieces[i]);
    return out;
}

std::string Tokenizer::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
        if (t < 0 || t >= vocab_size())
            throw std::out_of_range("tokenizer '" + id + "': id " + std::to_string(t) +
                                    " outside vocabulary");
        if (is_special(t)) continue;
        const std::string& p = pieces[t];
        if (has_marker(p)) {
            out += content_of(p);
        } else {
            if (!out.empty()) out += ' ';
            out += p;
        }
    }
    return out;
}

void Tokenizer::warm(const std::vector<std::string>& words) {
    for (const auto& w : words)
        if (!word_cache_.count(w)) word_cache_.emplace(w, encode_word(w));
}

void Tokenizer::save(const std::string& vocab_path, const std::string& merges_path) const {
    std::ofstream vf(vocab_path);
    if (!vf) throw std::runtime_error("tokenizer: cannot write " + vocab_path);
    for (const auto& p : pieces) vf << p << '\n';
    if (kind == Kind::subword) {
        std::ofstream mf(merges_path);
        if (!mf) throw std::runtime_error("tokenizer: cannot write " + merges_path);
        for (const auto& [a, b] : merges) mf << a << ' ' << b << '\n';
    }
}

Tokenizer Tokenizer::load(const std::string& id_, Kind kind_, const std::string& vocab_path,
                          const std::string& merges_path) {
    Tokenizer t;
    t.id = id_;
    t.kind = kind_;
    std::ifstream vf(vocab_path);
    if (!vf) throw std::runtime_error("tokenizer: cannot read " + vocab_path);
    std::string line;
    while (std::getline(vf, line)) {
        if (line.empty()) continue;
        t.pieces.push_back(line);
    }
    if (kind_ == Kind::subword) {
        std::ifstream mf(merges_path);
        if (!mf) throw std::runtime_error("tokenizer: cannot read " + merges_path);
        while (std::getline(mf, line)) {
            if (line.empty()) continue;
            std::istringstream is(line);
            std::string a, b, extra;
            if (!(is >> a >> b) || (is >> extra))
                throw std::runtime_error("tokenizer: malformed merge line '" + line + "'");
            t.merges.emplace_back(a, b);
        }
    }
    t.finalize();
    return t;
}

// ----------------------------------------------------------------- builders

std::vector<std::string> corpus_words(const std::vector<std::string>& corpus) {
    std::set<std::string> seen;
    for (const auto& line : corpus)
        for (auto& w : split_words(line)) seen.insert(std::move(w));
    return {seen.begin(), seen.end()};
}

Tokenizer word_tokenizer(const std::vector<std::string>& vocab, const std::string& id) {
    if (vocab.empty()) throw std::invalid_argument("word_tokenizer: empty vocabulary");
    Tokenizer t;
    t.id = id;
    t.kind = Kind::word;
    t.pieces = special_pieces();
    for (const auto& w : vocab) {
        if (w.empty() || w.find_first_of(" \t\n") != std::string::npos)
            throw std::invalid_argument("word_tokenizer: bad word '" + w + "'");
        t.pieces.push_back(w);
    }
    t.finalize();
    t.warm(vocab);
    return t;
}

Tokenizer word_tokenizer_from_corpus(const std::vector<std::string>& corpus,
                                     const std::string& id) {
    auto words = corpus_words(corpus);
    if (words.empty()) throw std::invalid_argument("word_tokenizer: corpus has no words");
    return word_tokenizer(words, id);
}

Tokenizer train_bpe(const std::vector<std::string>& corpus, int target_content_size,
                    const std::string& id) {
    if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
    std::map<std::string, long long> freq;
    for (const auto& line : corpus)
        for (auto& w : split_words(line)) ++freq[w];
    if (freq.empty()) throw std::invalid_argument("train_bpe: corpus has no words");

    struct Entry {
        std::vector<std::string> syms;
        long long f;
    };
    std::vector<Entry> entries;
    std::set<std::string> alphabet;
    for (const auto& [w, f] : freq) {
        auto syms = char_pieces(w);
        alphabet.insert(syms.begin(), syms.end());
        entries.push_back({std::move(syms), f});
    }
    if (target_content_size < static_cast<int>(alphabet.size()))
        throw std::invalid_argument("train_bpe: target " + std::to_string(target_content_size) +
                                    " below alphabet size " + std::to_string(alphabet.size()));

    Tokenizer t;
    t.id = id;
    t.kind = Kind::subword;
    t.pieces = special_pieces();
    t.pieces.insert(t.pieces.end(), alphabet.begin(), alphabet.end());
    std::set<std::string> have(alphabet.begin(), alphabet.end());

    while (static_cast<int>(have.size()) < target_content_size) {
        // std::map iteration keeps ties resolved toward the smallest pair.
        std::map<std::pair<std::string, std::string>, long long> counts;
        for (const auto& e : entries)
            for (size_t i = 0; i + 1 < e.syms.size(); ++i)
                counts[{e.syms[i], e.syms[i + 1]}] += e.f;
        if (counts.empty())
            throw std::runtime_error("train_bpe: target unreachable, every word fully merged");
        std::pair<std::string, std::string> best;
        long long best_count = -1;
        for (const auto& [pair, c] : counts)
            if (c > best_count) {
                best = pair;
                best_count = c;
            }
        std::string merged = best.first + content_of(best.second);
        t.merges.push_back(best);
        for (auto& e : entries) {
            std::vector<std::string> out;
            out.reserve(e.syms.size());
            for (size_t i = 0; i < e.syms.size();) {
                if (i + 1 < e.syms.size() && e.syms[i] == best.first &&
                    e.syms[i + 1] == best.second) {
                    out.push_back(merged);
                    i += 2;
                } else {
                    out.push_back(e.syms[i++]);
                }
            }
            e.syms.swap(out);
        }
        if (have.insert(merged).second) t.pieces.push_back(merged);
    }
    t.finalize();
    std::vector<std::string> words;
    words.reserve(freq.size());
    for (const auto& [w, f] : freq) words.push_back(w);
    t.warm(words);
    return t;
}

// ---------------------------------------------------------------- converter

Tag ConversionResult::last_tag() const {
    if (tags.empty()) throw std::logic_error("ConversionResult: empty tags");
    return tags.back();
}

namespace {

std::vector<int> window_of(const std::vector<int>& ids, size_t take) {
    take = std::min(take, ids.size());
    return {ids.end() - static_cast<std::ptrdiff_t>(take), ids.end()};
}

// One tag per target-domain token of `text`, by character-span comparison
// against the source tokenization of the same word.
std::vector<Tag> retok_tags(const std::string& text, const Tokenizer& a, const Tokenizer& b) {
    std::vector<Tag> tags;
    for (const auto& w : split_words(text)) {
        auto ap = a.tokenize_pieces(w);
        auto bp = b.tokenize_pieces(w);
        std::vector<std::pair<int, int>> spans;
        int pos = 0;
        for (const auto& p : ap) {
            int len = static_cast<int>(content_of(p).size());
            spans.emplace_back(pos, pos + len);
            pos += len;
        }
        int bpos = 0;
        for (const auto& p : bp) {
            int s = bpos;
            int e = bpos + static_cast<int>(content_of(p).size());
            bpos = e;
            Tag tag = Tag::merged;
            for (const auto& [as, ae] : spans) {
                if (as == s && ae == e) {
                    tag = Tag::unchanged;
                    break;
                }
                if (as <= s && e <= ae) {
                    tag = Tag::split;
                    break;
                }
            }
            tags.push_back(tag);
        }
    }
    return tags;
}

}  // namespace

std::vector<int> convert_context(const std::vector<int>& a_ids, const Tokenizer& a, int window,
                                 const Tokenizer& b) {
    if (window <= 0) throw std::invalid_argument("convert_context: window must be positive");
    auto win = window_of(a_ids, 2 * static_cast<size_t>(window));
    auto b_ids = b.tokenize(a.detokenize(win));
    std::vector<int> out(window, kPad);
    size_t keep = std::min(b_ids.size(), static_cast<size_t>(window));
    std::copy(b_ids.end() - static_cast<std::ptrdiff_t>(keep), b_ids.end(),
              out.end() - static_cast<std::ptrdiff_t>(keep));
    return out;
}

ConversionResult convert_candidate(const std::vector<int>& a_context, int a_candidate,
                                   const Tokenizer& a, const Tokenizer& b, int window) {
    if (window <= 0) throw std::invalid_argument("convert_candidate: window must be positive");
    if (a_candidate < 0 || a_candidate >= a.vocab_size())
        throw std::invalid_argument("convert_candidate: candidate id outside vocabulary");
    if (a.is_special(a_candidate))
        throw std::invalid_argument("convert_candidate: candidate must be a content token");
    auto win = window_of(a_context, 2 * static_cast<size_t>(window));
    win.push_back(a_candidate);
    std::string text = a.detokenize(win);
    auto b_ids = b.tokenize(text);
    auto tags = retok_tags(text, a, b);

    size_t out_len = static_cast<size_t>(window) + 1;
    ConversionResult r;
    r.tokens.assign(out_len, kPad);
    r.tags.assign(out_len, Tag::unchanged);
    size_t keep = std::min(b_ids.size(), out_len);
    std::copy(b_ids.end() - static_cast<std::ptrdiff_t>(keep), b_ids.end(),
              r.tokens.end() - static_cast<std::ptrdiff_t>(keep));
    std::copy(tags.end() - static_cast<std::ptrdiff_t>(keep), tags.end(),
              r.tags.end() - static_cast<std::ptrdiff_t>(keep));
    return r;
}

// --------------------------------------------------------------- alignment

double levenshtein_similarity(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
    size_t n = a.size(), m = b.size();
    if (n == 0 && m == 0) return 1.0;
    std::vector<int> prev(m + 1), cur(m + 1);
    for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= m; ++j) {
            int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        prev.swap(cur);
    }
    return 1.0 - static_cast<double>(prev[m]) / static_cast<double>(std::max(n, m));
}

std::vector<std::vector<double>> alignment_report(const std::vector<std::string>& corpus,
                                                  const std::vector<const Tokenizer*>& toks) {
    if (corpus.size() < 100)
        throw std::invalid_argument("alignment_report: need at least 100 sentences, got " +
                                    std::to_string(corpus.size()));
    if (toks.empty()) throw std::invalid_argument("alignment_report: no tokenizers");
    size_t k = toks.size();
    // Pre-tokenize once per tokenizer.
    std::vector<std::vector<std::vector<std::string>>> pieces(k);
    for (size_t i = 0; i < k; ++i) {
        pieces[i].reserve(corpus.size());
        for (const auto& s : corpus) pieces[i].push_back(toks[i]->tokenize_pieces(s));
    }
    std::vector<std::vector<double>> m(k, std::vector<double>(k, 0.0));
    for (size_t i = 0; i < k; ++i) {
        m[i][i] = 1.0;
        for (size_t j = i + 1; j < k; ++j) {
            double sum = 0;
            for (size_t s = 0; s < corpus.size(); ++s)
                sum += levenshtein_similarity(pieces[i][s], pieces[j][s]);
            m[i][j] = m[j][i] = sum / static_cast<double>(corpus.size());
        }
    }
    return m;
}

std::string alignment_csv(const std::vector<std::vector<double>>& matrix,
                          const std::vector<std::string>& ids) {
    if (matrix.size() != ids.size())
        throw std::invalid_argument("alignment_csv: matrix/id size mismatch");
    std::ostringstream os;
    os << "tokenizer";
    for (const auto& id : ids) os << ',' << id;
    os << '\n';
    char buf[32];
    for (size_t i = 0; i < matrix.size(); ++i) {
        if (matrix[i].size() != ids.size())
            throw std::invalid_argument("alignment_csv: ragged matrix");
        os << ids[i];
        for (double v : matrix[i]) {
            std::snprintf(buf, sizeof buf, "%.6f", v);
            os << ',' << buf;
        }
        os << '\n';
    }
    return os.str();
}

double misalignment_tail(int k, double align_prob) {
    if (k < 1) throw std::invalid_argument("misalignment_tail: k must be at least 1");
    if (align_prob < 0.0 || align_prob > 1.0)
        throw std::invalid_argument("misalignment_tail: align_prob outside [0,1]");
    double q = 1.0 - align_prob;
    int lo = k / 2 + 1;
    double sum = 0;
    double choose = 1.0;  // C(k, i), advanced incrementally from i = 0
    for (int i = 0; i <= k; ++i) {
        if (i >= lo) sum += choose * std::pow(q, i) * std::pow(align_prob, k - i);
        choose = choose * static_cast<double>(k - i) / static_cast<double>(i + 1);
    }
    return std::min(1.0, std::max(0.0, sum));
}

}  // namespace wm::tok
