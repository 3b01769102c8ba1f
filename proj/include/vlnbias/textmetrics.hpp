#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vlnbias/common.hpp"
#include "vlnbias/episode.hpp"

namespace vlnbias::textmetrics {

// Lowercases and splits on whitespace; every punctuation character becomes
// its own token.
std::vector<std::string> tokenize(std::string_view text);

// Interns string tokens as dense ids.
class Vocabulary {
public:
    Token intern(std::string_view word);
    std::optional<Token> find(std::string_view word) const;
    const std::string& word(Token t) const { return words_.at(static_cast<std::size_t>(t)); }
    std::size_t size() const { return words_.size(); }

    TokenSeq encode(std::string_view text);  // tokenize + intern

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, Token> ids_;
};

inline constexpr int kMaxOrder = 4;
inline constexpr double kBleuEpsilon = 1e-9;

// Multi-reference n-gram index: for every n-gram (n = 1..4) the maximum count
// in any single reference, plus the reference lengths for the brevity penalty.
class ReferenceIndex {
public:
    explicit ReferenceIndex(std::span<const TokenSeq> references);

    std::size_t max_count(std::span<const Token> ngram) const;
    // Closest reference length to `candidate_length`; ties go to the shorter.
    std::size_t closest_length(std::size_t candidate_length) const;
    bool empty() const { return lengths_.empty(); }

private:
    struct Key {
        std::array<Token, kMaxOrder> tokens{};
        int n = 0;
        friend bool operator==(const Key&, const Key&) = default;
    };
    struct KeyHash {
        std::size_t operator()(const Key& k) const;
    };
    static Key make_key(std::span<const Token> ngram);

    std::unordered_map<Key, std::size_t, KeyHash> max_counts_;
    std::vector<std::size_t> lengths_;
};

// BLEU-4: geometric mean of clipped n-gram precisions with the
// closest-reference brevity penalty. Orders above the candidate length are
// dropped and the remaining orders weighted uniformly; zero clipped counts are
// replaced by kBleuEpsilon. Throws DomainError on empty references or an
// empty candidate.
double bleu4(std::span<const Token> candidate, std::span<const TokenSeq> references);
double bleu4(std::span<const Token> candidate, const ReferenceIndex& index);

// LCS-based F-measure; beta = 1 gives F1.
double rouge_l(std::span<const Token> candidate, std::span<const Token> reference, double beta = 1.0);

std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b);

enum class Aggregate { Min, Max };

// min (or max) over training instructions of ROUGE-L(inst(x), inst(t)).
double dis_rouge(std::span<const Token> instruction, std::span<const TokenSeq> training,
                 Aggregate aggregate = Aggregate::Min, double beta = 1.0);

// BLEU-4 of inst(x) against every training instruction as references.
double dis_bleu(std::span<const Token> instruction, std::span<const TokenSeq> training);
double dis_bleu(std::span<const Token> instruction, const ReferenceIndex& training_index);

struct DistanceItem {
    std::string item_id;
    double dis_rouge = 0.0;
    double dis_bleu = 0.0;
    std::optional<bool> success;
};

struct HistogramBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    std::size_t successes = 0;
    std::optional<double> success_rate;  // unset for empty bins
};

struct DistanceHistogram {
    std::vector<HistogramBin> bins;
};

struct DistanceReport {
    std::vector<DistanceItem> items;
    DistanceHistogram rouge;
    DistanceHistogram bleu;
};

// Equal-width bins over [0,1] (1.0 falls into the last bin) with per-bin mean
// success. Throws ValidationError if the inputs are misaligned.
DistanceHistogram distance_success_table(std::span<const double> distances, std::span<const bool> successes,
                                         int num_bins);

// CSV with columns item_id,dis_rouge,dis_bleu,success (success blank when unknown).
std::string distance_report_csv(const DistanceReport& report);
std::string histogram_csv(const DistanceReport& report);

}  // namespace vlnbias::textmetrics
