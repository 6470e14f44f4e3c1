#pragma once

// Types shared by every language model and the completion engine.

#include <algorithm>
#include <cmath>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "akr/common.hpp"

namespace akr {

using EncodedSequence = std::vector<TokenId>;
using ProbVector = std::vector<double>;

enum class CompletionMode { Start, Full };

inline std::string_view to_string(CompletionMode m) { return m == CompletionMode::Start ? "start" : "full"; }

struct RankedEntry {
    TokenId token_id = 0;
    double log_score = 0.0;
    std::size_t rank = 0;  // 1-based

    friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

struct RankedCandidates {
    std::vector<RankedEntry> entries;

    /// 1-based rank of a token, or 0 if it is not among the entries.
    std::size_t rank_of(TokenId id) const
    {
        for (const auto& e : entries) {
            if (e.token_id == id) {
                return e.rank;
            }
        }
        return 0;
    }

    friend bool operator==(const RankedCandidates&, const RankedCandidates&) = default;
};

/// Sorts (token, score) pairs by descending score, ties by ascending id,
/// keeps the first k and assigns dense ranks.
inline RankedCandidates make_ranking(std::vector<std::pair<TokenId, double>> scored, std::size_t k)
{
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    RankedCandidates out;
    const std::size_t n = std::min(k, scored.size());
    out.entries.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.entries.push_back({scored[i].first, scored[i].second, i + 1});
    }
    return out;
}

/// Autoregressive model over token ids. Sequences are scored from the
/// start-of-line state, whose conditioning context is <EOS>.
class LanguageModel {
public:
    virtual ~LanguageModel() = default;

    virtual std::size_t vocab_size() const = 0;

    /// Distribution of the token following `prefix`.
    virtual ProbVector next_token_dist(std::span<const TokenId> prefix) const = 0;

    /// Total log-likelihood in nats.
    virtual double score_sequence(std::span<const TokenId> ids) const = 0;

    /// score_sequence(prefix ++ c) for every continuation c.
    virtual std::vector<double> score_continuations(std::span<const TokenId> prefix,
                                                    const std::vector<std::vector<TokenId>>& continuations) const
    {
        std::vector<double> out;
        out.reserve(continuations.size());
        std::vector<TokenId> buf;
        for (const auto& c : continuations) {
            buf.assign(prefix.begin(), prefix.end());
            buf.insert(buf.end(), c.begin(), c.end());
            out.push_back(score_sequence(buf));
        }
        return out;
    }
};

/// exp(mean NLL in nats).
inline double perplexity(double mean_nll_nats) { return std::exp(mean_nll_nats); }

/// 2^(mean NLL), i.e. the loss figure read as bits.
inline double perplexity_base2(double mean_nll) { return std::exp2(mean_nll); }

}  // namespace akr
