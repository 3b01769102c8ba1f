#include "vlnbias/textmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "vlnbias/common.hpp"
#include "vlnbias/format.hpp"

namespace vlnbias::textmetrics {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
    };
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            out.emplace_back(1, raw);
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

Token Vocabulary::intern(std::string_view word) {
    auto it = ids_.find(std::string(word));
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<Token>(words_.size());
    words_.emplace_back(word);
    ids_.emplace(words_.back(), id);
    return id;
}

std::optional<Token> Vocabulary::find(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

TokenSeq Vocabulary::encode(std::string_view text) {
    TokenSeq out;
    for (const auto& w : tokenize(text)) out.push_back(intern(w));
    return out;
}

// --- BLEU ------------------------------------------------------------------

std::size_t ReferenceIndex::KeyHash::operator()(const Key& k) const {
    std::uint64_t h = static_cast<std::uint64_t>(k.n);
    for (int i = 0; i < k.n; ++i) h = hash_combine(h, static_cast<std::uint32_t>(k.tokens[i]));
    return static_cast<std::size_t>(h);
}

ReferenceIndex::Key ReferenceIndex::make_key(std::span<const Token> ngram) {
    Key k;
    k.n = static_cast<int>(ngram.size());
    std::copy(ngram.begin(), ngram.end(), k.tokens.begin());
    return k;
}

ReferenceIndex::ReferenceIndex(std::span<const TokenSeq> references) {
    for (const TokenSeq& ref : references) {
        lengths_.push_back(ref.size());
        std::unordered_map<Key, std::size_t, KeyHash> local;
        for (int n = 1; n <= kMaxOrder; ++n) {
            for (std::size_t i = 0; i + n <= ref.size(); ++i) {
                ++local[make_key(std::span<const Token>(ref).subspan(i, n))];
            }
        }
        for (const auto& [key, count] : local) {
            auto& slot = max_counts_[key];
            slot = std::max(slot, count);
        }
    }
    std::sort(lengths_.begin(), lengths_.end());
}

std::size_t ReferenceIndex::max_count(std::span<const Token> ngram) const {
    auto it = max_counts_.find(make_key(ngram));
    return it == max_counts_.end() ? 0 : it->second;
}

std::size_t ReferenceIndex::closest_length(std::size_t candidate_length) const {
    std::size_t best = lengths_.front();
    auto gap = [&](std::size_t r) { return r > candidate_length ? r - candidate_length : candidate_length - r; };
    for (std::size_t r : lengths_) {
        if (gap(r) < gap(best)) best = r;  // sorted ascending, so ties keep the shorter
    }
    return best;
}

double bleu4(std::span<const Token> candidate, const ReferenceIndex& index) {
    if (index.empty()) throw DomainError("BLEU needs at least one reference");
    if (candidate.empty()) throw DomainError("BLEU candidate is empty");

    const int orders = std::min<int>(kMaxOrder, static_cast<int>(candidate.size()));
    double log_sum = 0.0;
    for (int n = 1; n <= orders; ++n) {
        std::map<std::vector<Token>, std::size_t> counts;
        for (std::size_t i = 0; i + n <= candidate.size(); ++i) {
            ++counts[std::vector<Token>(candidate.begin() + i, candidate.begin() + i + n)];
        }
        std::size_t clipped = 0;
        for (const auto& [gram, count] : counts) clipped += std::min(count, index.max_count(gram));
        const double total = static_cast<double>(candidate.size() - n + 1);
        const double numerator = clipped == 0 ? kBleuEpsilon : static_cast<double>(clipped);
        log_sum += std::log(numerator / total);
    }
    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(index.closest_length(candidate.size()));
    const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
    return std::clamp(bp * std::exp(log_sum / orders), 0.0, 1.0);
}

double bleu4(std::span<const Token> candidate, std::span<const TokenSeq> references) {
    if (references.empty()) throw DomainError("BLEU needs at least one reference");
    return bleu4(candidate, ReferenceIndex(references));
}

// --- ROUGE-L ---------------------------------------------------------------

std::size_t lcs_length(std::span<const Token> a, std::span<const Token> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(std::span<const Token> candidate, std::span<const Token> reference, double beta) {
    if (candidate.empty() || reference.empty()) throw DomainError("ROUGE-L needs nonempty sequences");
    const auto lcs = static_cast<double>(lcs_length(candidate, reference));
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(reference.size());
    const double b2 = beta * beta;
    return (1.0 + b2) * p * r / (r + b2 * p);
}

double dis_rouge(std::span<const Token> instruction, std::span<const TokenSeq> training, Aggregate aggregate,
                 double beta) {
    if (training.empty()) throw DomainError("training instruction set is empty");
    double acc = aggregate == Aggregate::Min ? kInfinity : -kInfinity;
    for (const TokenSeq& t : training) {
        const double s = rouge_l(instruction, t, beta);
        acc = aggregate == Aggregate::Min ? std::min(acc, s) : std::max(acc, s);
    }
    return acc;
}

double dis_bleu(std::span<const Token> instruction, std::span<const TokenSeq> training) {
    if (training.empty()) throw DomainError("training instruction set is empty");
    return bleu4(instruction, training);
}

double dis_bleu(std::span<const Token> instruction, const ReferenceIndex& training_index) {
    if (training_index.empty()) throw DomainError("training instruction set is empty");
    return bleu4(instruction, training_index);
}

// --- distributions ---------------------------------------------------------

DistanceHistogram distance_success_table(std::span<const double> distances, std::span<const bool> successes,
                                         int num_bins) {
    if (num_bins < 1) throw ValidationError("need at least one histogram bin");
    if (distances.size() != successes.size()) {
        throw ValidationError("distance/success vectors differ in length (" + std::to_string(distances.size()) +
                              " vs " + std::to_string(successes.size()) + ")");
    }
    DistanceHistogram h;
    h.bins.resize(static_cast<std::size_t>(num_bins));
    for (int b = 0; b < num_bins; ++b) {
        h.bins[b].lo = static_cast<double>(b) / num_bins;
        h.bins[b].hi = static_cast<double>(b + 1) / num_bins;
    }
    for (std::size_t i = 0; i < distances.size(); ++i) {
        const double d = std::clamp(distances[i], 0.0, 1.0);
        const int b = std::min(num_bins - 1, static_cast<int>(std::floor(d * num_bins)));
        ++h.bins[b].count;
        if (successes[i]) ++h.bins[b].successes;
    }
    for (auto& bin : h.bins) {
        if (bin.count > 0) bin.success_rate = static_cast<double>(bin.successes) / static_cast<double>(bin.count);
    }
    return h;
}

std::string distance_report_csv(const DistanceReport& report) {
    std::string out = "item_id,dis_rouge,dis_bleu,success\n";
    for (const auto& item : report.items) {
        out += item.item_id + "," + format_fixed(item.dis_rouge, 6) + "," + format_fixed(item.dis_bleu, 6) + ",";
        if (item.success) out += *item.success ? "1" : "0";
        out += "\n";
    }
    return out;
}

std::string histogram_csv(const DistanceReport& report) {
    std::string out = "metric,bin_lo,bin_hi,count,success_rate\n";
    auto emit = [&](std::string_view name, const DistanceHistogram& h) {
        for (const auto& bin : h.bins) {
            out += std::string(name) + "," + format_fixed(bin.lo, 2) + "," + format_fixed(bin.hi, 2) + "," +
                   std::to_string(bin.count) + "," + (bin.success_rate ? format_fixed(*bin.success_rate, 4) : "") +
                   "\n";
        }
    };
    emit("rouge", report.rouge);
    emit("bleu", report.bleu);
    return out;
}

}  // namespace vlnbias::textmetrics
