#pragma once

// Count-based n-gram language model with add-alpha smoothing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "akr/common.hpp"
#include "akr/error.hpp"
#include "akr/ingest.hpp"
#include "akr/lm.hpp"
#include "akr/tokenizer.hpp"

namespace akr {

enum class NGramSmoothing {
    AddAlpha,        // unseen context: add-alpha over zero counts (uniform when alpha > 0)
    UnigramBackoff,  // unseen context: add-alpha unigram distribution
};

struct SequenceLogLik {
    double log_likelihood = 0.0;  // nats, may be -inf
    std::size_t length = 0;

    bool negative_infinity() const { return std::isinf(log_likelihood) && log_likelihood < 0; }
    double mean_nll() const { return length == 0 ? 0.0 : -log_likelihood / static_cast<double>(length); }
};

class NGramModel : public LanguageModel {
public:
    using Context = std::vector<TokenId>;
    using Successors = std::map<TokenId, std::uint64_t>;

    NGramModel() = default;
    NGramModel(std::size_t order, std::size_t vocab_size, double alpha,
               NGramSmoothing smoothing = NGramSmoothing::AddAlpha)
        : order_(order), vocab_size_(vocab_size), alpha_(alpha), smoothing_(smoothing)
    {
        if (order_ < 1) {
            throw Error(ErrorCode::InvalidOrder, "n-gram order must be >= 1");
        }
        if (!(alpha_ >= 0.0)) {
            throw Error(ErrorCode::InvalidConfig, "alpha must be non-negative");
        }
    }

    std::size_t order() const noexcept { return order_; }
    std::size_t vocab_size() const override { return vocab_size_; }
    double alpha() const noexcept { return alpha_; }
    NGramSmoothing smoothing() const noexcept { return smoothing_; }
    void set_smoothing(NGramSmoothing s) noexcept { smoothing_ = s; }
    std::uint64_t vocab_hash() const noexcept { return vocab_hash_; }
    void set_vocab_hash(std::uint64_t h) noexcept { vocab_hash_ = h; }
    const std::map<Context, Successors>& counts() const noexcept { return counts_; }

    std::uint64_t count(const Context& ctx, TokenId w) const
    {
        const auto it = counts_.find(ctx);
        if (it == counts_.end()) {
            return 0;
        }
        const auto jt = it->second.find(w);
        return jt == it->second.end() ? 0 : jt->second;
    }

    std::uint64_t context_total(const Context& ctx) const
    {
        const auto it = totals_.find(ctx);
        return it == totals_.end() ? 0 : it->second;
    }

    /// Adds one observation. Used by fitting and by the loader.
    void add(const Context& ctx, TokenId w, std::uint64_t n = 1)
    {
        if (w >= vocab_size_) {
            throw Error(ErrorCode::UnknownId, "successor id out of range");
        }
        counts_[ctx][w] += n;
        totals_[ctx] += n;
        unigram_.resize(vocab_size_, 0);
        unigram_[w] += n;
        unigram_total_ += n;
    }

    /// Last n-1 ids of `history`, left-padded with <EOS>.
    Context context_of(std::span<const TokenId> history) const
    {
        const std::size_t need = order_ - 1;
        Context ctx(need, kEosId);
        const std::size_t take = std::min(need, history.size());
        std::copy(history.end() - static_cast<std::ptrdiff_t>(take), history.end(), ctx.end() - static_cast<std::ptrdiff_t>(take));
        return ctx;
    }

    /// p(w | ctx) = (count(ctx, w) + alpha) / (count(ctx, .) + alpha V).
    double prob(const Context& ctx, TokenId w) const
    {
        const double V = static_cast<double>(vocab_size_);
        const auto total = context_total(ctx);
        if (total == 0 && (alpha_ == 0.0 || smoothing_ == NGramSmoothing::UnigramBackoff)) {
            return unigram_prob(w);
        }
        return (static_cast<double>(count(ctx, w)) + alpha_) / (static_cast<double>(total) + alpha_ * V);
    }

    double unigram_prob(TokenId w) const
    {
        const double V = static_cast<double>(vocab_size_);
        const double c = w < unigram_.size() ? static_cast<double>(unigram_[w]) : 0.0;
        const double denom = static_cast<double>(unigram_total_) + alpha_ * V;
        if (denom == 0.0) {
            return 1.0 / V;
        }
        return (c + alpha_) / denom;
    }

    ProbVector next_dist(std::span<const TokenId> history) const
    {
        const Context ctx = context_of(history);
        ProbVector p(vocab_size_);
        for (TokenId w = 0; w < vocab_size_; ++w) {
            p[w] = prob(ctx, w);
        }
        return p;
    }

    ProbVector next_token_dist(std::span<const TokenId> prefix) const override { return next_dist(prefix); }

    double score_sequence(std::span<const TokenId> ids) const override { return sequence_loglik(ids).log_likelihood; }

    /// Sum of log p(x_t | previous n-1) over the sequence, starting from the
    /// <EOS>-padded context.
    SequenceLogLik sequence_loglik(std::span<const TokenId> seq) const
    {
        SequenceLogLik out;
        out.length = seq.size();
        for (std::size_t t = 0; t < seq.size(); ++t) {
            out.log_likelihood += std::log(prob(context_of(seq.first(t)), seq[t]));
        }
        return out;
    }

    /// Ranks fillers for a single-token gap between `prefix` and `suffix`.
    /// Start mode scores p(w | prefix); full mode multiplies in every n-gram
    /// window that overlaps the gap (for bigrams, p(next | w)).
    RankedCandidates complete(std::span<const TokenId> prefix, std::span<const TokenId> suffix, CompletionMode mode,
                              std::size_t k) const
    {
        std::vector<TokenId> seq(prefix.begin(), prefix.end());
        const std::size_t gap = seq.size();
        seq.push_back(0);
        if (mode == CompletionMode::Full) {
            seq.insert(seq.end(), suffix.begin(), suffix.end());
        }
        const std::size_t last = std::min(seq.size(), gap + order_);
        std::vector<std::pair<TokenId, double>> scored;
        scored.reserve(vocab_size_);
        for (TokenId w = 0; w < vocab_size_; ++w) {
            if (is_completion_excluded(w)) {
                continue;
            }
            seq[gap] = w;
            double s = 0.0;
            for (std::size_t t = gap; t < last; ++t) {
                s += std::log(prob(context_of(std::span<const TokenId>(seq).first(t)), seq[t]));
            }
            scored.emplace_back(w, s);
        }
        return make_ranking(std::move(scored), k);
    }

    /// Text form: "AKNG1", then "n V alpha vocab_hash", then one record per
    /// context: context ids, a tab, and space-separated successor:count pairs.
    std::string serialize() const
    {
        std::string out = "AKNG1\n" + std::to_string(order_) + " " + std::to_string(vocab_size_) + " " + format_double(alpha_) +
                          " " + hex64(vocab_hash_) + "\n";
        for (const auto& [ctx, succ] : counts_) {
            std::vector<std::string> c;
            for (auto id : ctx) {
                c.push_back(std::to_string(id));
            }
            std::vector<std::string> s;
            for (const auto& [w, n] : succ) {
                s.push_back(std::to_string(w) + ":" + std::to_string(n));
            }
            out += join(c, " ") + "\t" + join(s, " ") + "\n";
        }
        return out;
    }

    static NGramModel parse(std::string_view text, NGramSmoothing smoothing = NGramSmoothing::AddAlpha)
    {
        auto lines = split(text, '\n');
        if (!lines.empty() && lines.back().empty()) {
            lines.pop_back();
        }
        if (lines.size() < 2 || lines[0] != "AKNG1") {
            throw Error(ErrorCode::BadFormat, "not an AKNG1 model");
        }
        const auto head = split_ws(lines[1]);
        if (head.size() != 3 && head.size() != 4) {
            throw Error(ErrorCode::BadFormat, "bad n-gram header");
        }
        NGramModel m(std::stoull(head[0]), std::stoull(head[1]), std::stod(head[2]), smoothing);
        if (head.size() == 4) {
            m.vocab_hash_ = std::stoull(head[3], nullptr, 16);
        }
        for (std::size_t i = 2; i < lines.size(); ++i) {
            const auto fields = split(lines[i], '\t');
            if (fields.size() != 2) {
                throw Error(ErrorCode::BadFormat, "bad n-gram record on line " + std::to_string(i + 1));
            }
            Context ctx;
            for (const auto& c : split_ws(fields[0])) {
                ctx.push_back(static_cast<TokenId>(std::stoul(c)));
            }
            if (ctx.size() != m.order_ - 1) {
                throw Error(ErrorCode::BadFormat, "context length disagrees with order");
            }
            for (const auto& pair : split_ws(fields[1])) {
                const auto colon = pair.find(':');
                if (colon == std::string::npos) {
                    throw Error(ErrorCode::BadFormat, "bad successor pair '" + pair + "'");
                }
                m.add(ctx, static_cast<TokenId>(std::stoul(pair.substr(0, colon))), std::stoull(pair.substr(colon + 1)));
            }
        }
        return m;
    }

private:
    std::size_t order_ = 2;
    std::size_t vocab_size_ = 0;
    double alpha_ = 0.01;
    NGramSmoothing smoothing_ = NGramSmoothing::AddAlpha;
    std::uint64_t vocab_hash_ = 0;
    std::map<Context, Successors> counts_;
    std::map<Context, std::uint64_t> totals_;
    std::vector<std::uint64_t> unigram_;
    std::uint64_t unigram_total_ = 0;
};

/// Counts every length-n window of every line, each line left-padded with
/// n-1 <EOS> context tokens.
inline NGramModel fit_ngram(std::span<const EncodedSequence> train, std::size_t n, double alpha, std::size_t vocab_size,
                            NGramSmoothing smoothing = NGramSmoothing::AddAlpha)
{
    if (n < 1) {
        throw Error(ErrorCode::InvalidOrder, "n-gram order must be >= 1");
    }
    if (train.empty()) {
        throw Error(ErrorCode::EmptyTrainingStream, "no training sequences");
    }
    NGramModel m(n, vocab_size, alpha, smoothing);
    for (const auto& seq : train) {
        for (std::size_t t = 0; t < seq.size(); ++t) {
            m.add(m.context_of(std::span<const TokenId>(seq).first(t)), seq[t]);
        }
    }
    return m;
}

}  // namespace akr
