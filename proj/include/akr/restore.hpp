#pragma once

// Completion engine and evaluation harness: prefix ranking, full-sentence
// rescoring of a candidate pool, MRR / hit@k over masked words, and the
// four-way multiple-choice test.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "akr/common.hpp"
#include "akr/error.hpp"
#include "akr/lm.hpp"
#include "akr/ngram.hpp"
#include "akr/tokenizer.hpp"

namespace akr {

struct CompletionQuery {
    std::vector<TokenId> left;
    std::vector<TokenId> right;
    CompletionMode mode = CompletionMode::Start;
    std::size_t pool_size = 100;
    std::size_t k = 10;

    void validate() const
    {
        if (k < 1 || pool_size < k) {
            throw Error(ErrorCode::InvalidConfig, "completion query needs pool_size >= k >= 1");
        }
    }
};

/// Candidates ordered by p(w | left); structural tokens are never offered.
inline RankedCandidates rank_start(const LanguageModel& lm, const CompletionQuery& q)
{
    const ProbVector p = lm.next_token_dist(q.left);
    std::vector<std::pair<TokenId, double>> scored;
    scored.reserve(p.size());
    for (TokenId w = 0; w < p.size(); ++w) {
        if (!is_completion_excluded(w)) {
            scored.emplace_back(w, std::log(p[w]));
        }
    }
    return make_ranking(std::move(scored), q.k);
}

/// Takes the pool_size best prefix candidates and re-ranks them by the
/// log-likelihood of the whole sentence left ++ [w] ++ right. Tokens outside
/// the pool cannot appear.
inline RankedCandidates rank_full(const LanguageModel& lm, const CompletionQuery& q)
{
    CompletionQuery pool_query = q;
    pool_query.k = q.pool_size;
    const auto pool = rank_start(lm, pool_query);
    std::vector<std::vector<TokenId>> continuations;
    continuations.reserve(pool.entries.size());
    for (const auto& e : pool.entries) {
        std::vector<TokenId> c{e.token_id};
        c.insert(c.end(), q.right.begin(), q.right.end());
        continuations.push_back(std::move(c));
    }
    const auto scores = lm.score_continuations(q.left, continuations);
    std::vector<std::pair<TokenId, double>> scored;
    scored.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scored.emplace_back(pool.entries[i].token_id, scores[i]);
    }
    return make_ranking(std::move(scored), q.k);
}

inline RankedCandidates rank(const LanguageModel& lm, const CompletionQuery& q)
{
    q.validate();
    return q.mode == CompletionMode::Start ? rank_start(lm, q) : rank_full(lm, q);
}

using Rank = std::optional<std::size_t>;  // 1-based; nullopt when absent

/// Mean of 1/rank with absent items contributing zero.
inline double mrr(std::span<const Rank> ranks)
{
    if (ranks.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const auto& r : ranks) {
        if (r && *r > 0) {
            sum += 1.0 / static_cast<double>(*r);
        }
    }
    return sum / static_cast<double>(ranks.size());
}

/// Fraction of items ranked within the top k. An empty list yields 0.
inline double hit_at_k(std::span<const Rank> ranks, std::size_t k)
{
    if (k < 1) {
        throw Error(ErrorCode::InvalidConfig, "hit@k needs k >= 1");
    }
    if (ranks.empty()) {
        std::clog << "warning: hit@" << k << " over an empty rank list is defined as 0\n";
        return 0.0;
    }
    std::size_t hits = 0;
    for (const auto& r : ranks) {
        hits += (r && *r >= 1 && *r <= k) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

struct EvalReport {
    std::string label;
    std::size_t n_items = 0;
    std::optional<double> mrr;
    std::map<std::size_t, double> hit_at;
    std::optional<double> mean_nll;      // nats per token
    std::optional<double> perplexity;    // e^mean_nll
    std::optional<double> perplexity_2;  // 2^mean_nll
    std::optional<double> accuracy;
};

/// Ranks a query; the masked-word harness is agnostic to the model behind it.
using Ranker = std::function<RankedCandidates(const CompletionQuery&)>;

inline Ranker lm_ranker(const LanguageModel& lm, CompletionMode mode, std::size_t pool_size = 100)
{
    return [&lm, mode, pool_size](const CompletionQuery& q) {
        CompletionQuery full = q;
        full.mode = mode;
        full.pool_size = mode == CompletionMode::Full ? pool_size : lm.vocab_size();
        full.k = full.pool_size;
        return rank(lm, full);
    };
}

inline Ranker ngram_ranker(const NGramModel& ng, CompletionMode mode)
{
    return [&ng, mode](const CompletionQuery& q) { return ng.complete(q.left, q.right, mode, ng.vocab_size()); };
}

/// Body length of a line (its trailing <EOS> excluded).
inline std::size_t body_length(std::span<const TokenId> line)
{
    return !line.empty() && line.back() == kEosId ? line.size() - 1 : line.size();
}

inline bool masked_eligible(std::span<const TokenId> line, std::size_t min_len)
{
    return body_length(line) >= min_len && std::find(line.begin(), line.end(), kBreakId) == line.end();
}

/// Index of the n-th word (1-based) of a line. Italic markers and the
/// terminator are not words.
inline std::optional<std::size_t> word_position(std::span<const TokenId> line, std::size_t n)
{
    std::size_t seen = 0;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const TokenId t = line[i];
        if (t == kItalicOpenId || t == kItalicCloseId || t == kEosId) {
            continue;
        }
        if (++seen == n) {
            return i;
        }
    }
    return std::nullopt;
}

struct MaskedEvalResult {
    EvalReport report;
    std::vector<Rank> ranks;
};

/// Removes the mask_index-th word (1-based, italic markers skipped) of every
/// test line that has no <BRK> and at least min_len tokens, ranks fillers
/// with `ranker`, and aggregates MRR and hit@{1,5,10}. The right context
/// keeps the line's <EOS>.
inline MaskedEvalResult eval_masked(const Ranker& ranker, std::span<const EncodedSequence> test_lines,
                                    std::size_t mask_index = 5, std::size_t min_len = 10, std::string label = {})
{
    if (mask_index < 1 || mask_index > min_len) {
        throw Error(ErrorCode::InvalidConfig, "mask_index must lie in [1, min_len]");
    }
    MaskedEvalResult out;
    for (const auto& line : test_lines) {
        if (!masked_eligible(line, min_len)) {
            continue;
        }
        const auto pos = word_position(line, mask_index);
        if (!pos) {
            continue;
        }
        CompletionQuery q;
        q.left.assign(line.begin(), line.begin() + static_cast<std::ptrdiff_t>(*pos));
        q.right.assign(line.begin() + static_cast<std::ptrdiff_t>(*pos) + 1, line.end());
        const TokenId target = line[*pos];
        const auto r = ranker(q).rank_of(target);
        out.ranks.push_back(r == 0 ? Rank{} : Rank{r});
    }
    if (out.ranks.empty()) {
        throw Error(ErrorCode::NoEligibleSentences, "no test line is long enough and free of breaks");
    }
    out.report.label = std::move(label);
    out.report.n_items = out.ranks.size();
    out.report.mrr = mrr(out.ranks);
    for (std::size_t k : {1, 5, 10}) {
        out.report.hit_at[k] = hit_at_k(out.ranks, k);
    }
    return out;
}

/// Per-line scoring from the start-of-line state, aggregated per token.
inline EvalReport eval_perplexity(const LanguageModel& lm, std::span<const EncodedSequence> lines, std::string label = {})
{
    double ll = 0.0;
    std::size_t n = 0;
    for (const auto& l : lines) {
        ll += lm.score_sequence(l);
        n += l.size();
    }
    EvalReport r;
    r.label = std::move(label);
    r.n_items = n;
    r.mean_nll = n == 0 ? 0.0 : -ll / static_cast<double>(n);
    r.perplexity = perplexity(*r.mean_nll);
    r.perplexity_2 = perplexity_base2(*r.mean_nll);
    return r;
}

// ---------------------------------------------------------------------------
// Multiple choice

enum class DistractorLabel { Semantic, Syntactic, Both };

inline std::string_view to_string(DistractorLabel l)
{
    switch (l) {
    case DistractorLabel::Semantic: return "semantic";
    case DistractorLabel::Syntactic: return "syntactic";
    case DistractorLabel::Both: return "both";
    }
    return "?";
}

inline DistractorLabel parse_distractor_label(std::string_view s)
{
    if (s == "semantic") return DistractorLabel::Semantic;
    if (s == "syntactic") return DistractorLabel::Syntactic;
    if (s == "both") return DistractorLabel::Both;
    throw Error(ErrorCode::BadFormat, "unknown distractor label '" + std::string(s) + "'");
}

struct McqQuestion {
    std::vector<TokenId> left;
    std::vector<TokenId> right;
    std::array<std::vector<TokenId>, 4> choices;
    std::size_t correct_index = 0;
    std::array<DistractorLabel, 3> distractor_labels{};  // wrong choices in ascending index order

    void validate() const
    {
        if (correct_index > 3) {
            throw Error(ErrorCode::BadFormat, "correct index must be 0..3");
        }
        for (const auto& c : choices) {
            if (c.empty()) {
                throw Error(ErrorCode::BadFormat, "empty choice");
            }
        }
        std::array<bool, 3> seen{};
        for (auto l : distractor_labels) {
            seen[static_cast<std::size_t>(l)] = true;
        }
        if (!(seen[0] && seen[1] && seen[2])) {
            throw Error(ErrorCode::BadFormat, "distractor labels must cover semantic, syntactic and both");
        }
    }

    /// Label of a wrong choice.
    DistractorLabel label_of(std::size_t choice) const
    {
        std::size_t slot = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            if (i == correct_index) {
                continue;
            }
            if (i == choice) {
                return distractor_labels[slot];
            }
            ++slot;
        }
        throw Error(ErrorCode::InvalidConfig, "choice is the correct one");
    }
};

/// One question per line, ten tab-separated fields: left context, right
/// context, four choices (tokens space-separated), correct index and three
/// distractor labels. '#' starts a comment line. Right contexts gain a
/// terminating <EOS> when they lack one, so each item scores a whole line.
inline std::vector<McqQuestion> parse_mcq(std::string_view text, const Vocabulary& vocab)
{
    std::vector<McqQuestion> out;
    std::size_t lineno = 0;
    for (const auto& line : split(text, '\n')) {
        ++lineno;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto f = split(line, '\t');
        if (f.size() != 10) {
            throw Error(ErrorCode::BadFormat, "mcq line " + std::to_string(lineno) + ": expected 10 fields");
        }
        McqQuestion q;
        auto enc = [&vocab](const std::string& s) {
            const auto toks = split_ws(s);
            return encode(toks, vocab);
        };
        q.left = enc(f[0]);
        q.right = enc(f[1]);
        if (q.right.empty() || q.right.back() != kEosId) {
            q.right.push_back(kEosId);
        }
        for (std::size_t i = 0; i < 4; ++i) {
            q.choices[i] = enc(f[2 + i]);
        }
        q.correct_index = std::stoul(f[6]);
        for (std::size_t i = 0; i < 3; ++i) {
            q.distractor_labels[i] = parse_distractor_label(f[7 + i]);
        }
        q.validate();
        out.push_back(std::move(q));
    }
    return out;
}

struct McqOutcome {
    std::array<double, 4> scores{};
    std::array<std::size_t, 4> ranking{};  // choice indices, best first
    std::size_t predicted = 0;
    bool correct = false;
    bool tie = false;  // the winning score was shared
};

struct McqResult {
    EvalReport report;
    std::vector<McqOutcome> outcomes;
    std::map<DistractorLabel, std::size_t> errors_by_label;
};

/// Inserts every choice into the gap and scores the whole line. The highest
/// total log-likelihood wins (per-token mean when `per_token` is set); equal
/// scores go to the lower choice index.
inline McqResult eval_mcq(const LanguageModel& lm, std::span<const McqQuestion> questions, bool per_token = false,
                          std::string label = {})
{
    McqResult out;
    std::size_t right = 0;
    for (const auto& q : questions) {
        q.validate();
        std::vector<std::vector<TokenId>> conts;
        for (const auto& c : q.choices) {
            std::vector<TokenId> s = c;
            s.insert(s.end(), q.right.begin(), q.right.end());
            conts.push_back(std::move(s));
        }
        const auto scores = lm.score_continuations(q.left, conts);
        McqOutcome o;
        for (std::size_t i = 0; i < 4; ++i) {
            const double len = static_cast<double>(q.left.size() + conts[i].size());
            o.scores[i] = per_token ? scores[i] / len : scores[i];
        }
        for (std::size_t i = 0; i < 4; ++i) {
            o.ranking[i] = i;
        }
        std::stable_sort(o.ranking.begin(), o.ranking.end(),
                         [&o](std::size_t a, std::size_t b) { return o.scores[a] > o.scores[b]; });
        o.predicted = o.ranking[0];
        o.tie = o.scores[o.ranking[1]] == o.scores[o.ranking[0]];
        if (o.tie) {
            std::clog << "note: tied top score in multiple-choice item " << out.outcomes.size() << "\n";
        }
        o.correct = o.predicted == q.correct_index;
        if (o.correct) {
            ++right;
        } else {
            ++out.errors_by_label[q.label_of(o.predicted)];
        }
        out.outcomes.push_back(o);
    }
    out.report.label = std::move(label);
    out.report.n_items = questions.size();
    out.report.accuracy = questions.empty() ? 0.0 : static_cast<double>(right) / static_cast<double>(questions.size());
    return out;
}

// ---------------------------------------------------------------------------
// Report rendering

inline std::string render_report_text(const std::vector<EvalReport>& reports)
{
    std::string out;
    for (const auto& r : reports) {
        if (!out.empty()) {
            out += '\n';
        }
        out += "model: " + (r.label.empty() ? std::string("-") : r.label) + "\n";
        out += "n_items: " + std::to_string(r.n_items) + "\n";
        auto opt = [&out](std::string_view k, const std::optional<double>& v) {
            if (v) {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.6f", *v);
                out.append(k);
                out += ": ";
                out += buf;
                out += '\n';
            }
        };
        opt("mean_nll", r.mean_nll);
        opt("perplexity_e", r.perplexity);
        opt("perplexity_2", r.perplexity_2);
        opt("mrr", r.mrr);
        for (const auto& [k, v] : r.hit_at) {
            opt("hit@" + std::to_string(k), v);
        }
        opt("accuracy", r.accuracy);
    }
    return out;
}

/// Tab-separated table with a header row; absent values are empty cells.
inline std::string render_report_machine(const std::vector<EvalReport>& reports)
{
    std::string out = "model\tn_items\tmean_nll\tperplexity_e\tperplexity_2\tmrr\thit@1\thit@5\thit@10\taccuracy\n";
    auto cell = [](const std::optional<double>& v) {
        if (!v) {
            return std::string();
        }
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.9g", *v);
        return std::string(buf);
    };
    for (const auto& r : reports) {
        auto hit = [&r](std::size_t k) {
            const auto it = r.hit_at.find(k);
            return it == r.hit_at.end() ? std::optional<double>{} : std::optional<double>{it->second};
        };
        out += (r.label.empty() ? std::string("-") : r.label) + "\t" + std::to_string(r.n_items) + "\t" + cell(r.mean_nll)
            + "\t" + cell(r.perplexity) + "\t" + cell(r.perplexity_2) + "\t" + cell(r.mrr) + "\t" + cell(hit(1)) + "\t"
            + cell(hit(5)) + "\t" + cell(hit(10)) + "\t" + cell(r.accuracy) + "\n";
    }
    return out;
}

}  // namespace akr
