#pragma once

// Akkadian token stream: mechanical bound transcription, determinative
// classes, italic markers, break handling and the numeric vocabulary.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "akr/common.hpp"
#include "akr/error.hpp"
#include "akr/ingest.hpp"

namespace akr {

namespace tok {
inline constexpr std::string_view kName = "NAME";
inline constexpr std::string_view kGodName = "GODNAME";
inline constexpr std::string_view kFemaleName = "FEMALENAME";
inline constexpr std::string_view kLocation = "LOCATION";
inline constexpr std::string_view kMonth = "MONTH";
inline constexpr std::string_view kNum = "NUM";
inline constexpr std::string_view kBreak = "<BRK>";
inline constexpr std::string_view kUnk = "<UNK>";
inline constexpr std::string_view kItalicOpen = "<i>";
inline constexpr std::string_view kItalicClose = "</i>";
inline constexpr std::string_view kEos = "<EOS>";
}  // namespace tok

/// Reserved tokens in id order: they always occupy ids 0..10.
inline constexpr std::array<std::string_view, 11> kReservedTokens = {
    tok::kName, tok::kGodName, tok::kFemaleName, tok::kLocation, tok::kMonth, tok::kNum,
    tok::kBreak, tok::kUnk, tok::kItalicOpen, tok::kItalicClose, tok::kEos,
};

inline constexpr TokenId kNameId = 0;
inline constexpr TokenId kNumId = 5;
inline constexpr TokenId kBreakId = 6;
inline constexpr TokenId kUnkId = 7;
inline constexpr TokenId kItalicOpenId = 8;
inline constexpr TokenId kItalicCloseId = 9;
inline constexpr TokenId kEosId = 10;

inline bool is_reserved(std::string_view token)
{
    return std::find(kReservedTokens.begin(), kReservedTokens.end(), token) != kReservedTokens.end();
}

/// Tokens that never make sense as a completion: structure and unknowns.
/// Placeholder classes (NAME, NUM, ...) remain valid candidates.
inline bool is_completion_excluded(TokenId id)
{
    return id == kBreakId || id == kUnkId || id == kEosId || id == kItalicOpenId || id == kItalicCloseId;
}

struct TokenizerOptions {
    bool collapse_breaks = true;
};

/// Hyphens (syllable joins) and dots (logogram component joins) are removed;
/// whitespace cannot survive either. Case and diacritics are untouched.
inline std::string bound_form(std::string_view surface)
{
    std::string out;
    out.reserve(surface.size());
    for (char c : surface) {
        if (c == '-' || c == '.' || detail::is_space(c)) {
            continue;
        }
        out.push_back(c);
    }
    return out;
}

inline std::vector<std::string> bound_transcribe(const MarkedWord& word)
{
    std::string form = bound_form(word.surface);
    if (form.empty()) {
        return {std::string(tok::kUnk)};
    }
    if (word.italic) {
        return {std::string(tok::kItalicOpen), std::move(form), std::string(tok::kItalicClose)};
    }
    return {std::move(form)};
}

/// Digits, digit groups joined by '/', '.', ',' or '+', and vulgar fraction
/// signs. Nothing else counts as a simple number.
inline bool is_numeric_surface(std::string_view s)
{
    static constexpr std::array<std::string_view, 9> fractions = {"½", "⅓", "⅔", "¼", "¾", "⅙", "⅚", "⅕", "⅛"};
    if (s.empty()) {
        return false;
    }
    bool seen_digit = false;
    bool last_was_sep = true;
    std::size_t i = 0;
    while (i < s.size()) {
        const char c = s[i];
        if (c >= '0' && c <= '9') {
            seen_digit = true;
            last_was_sep = false;
            ++i;
            continue;
        }
        if (c == '/' || c == '+' || c == '.' || c == ',') {
            if (last_was_sep) {
                return false;
            }
            last_was_sep = true;
            ++i;
            continue;
        }
        bool matched = false;
        for (auto f : fractions) {
            if (s.compare(i, f.size(), f) == 0) {
                seen_digit = true;
                last_was_sep = false;
                i += f.size();
                matched = true;
                break;
            }
        }
        if (!matched) {
            return false;
        }
    }
    return seen_digit && !last_was_sep;
}

enum class DeterminativeClass { None, Name, GodName, FemaleName, Location, Month };

struct ClassifyDiagnostic {
    std::string surface;
    std::vector<std::string> matched;  // every name-class that applied
};

namespace detail {

inline bool sup_is(const Superscript& s, SupPosition pos, std::string_view text)
{
    return s.position == pos && s.text == text;
}

inline bool sup_is_ci(const Superscript& s, SupPosition pos, std::string_view text)
{
    return s.position == pos && lower_ascii(s.text) == text;
}

}  // namespace detail

/// Maps one word to its stream fragment. Precedence: damage, then the name
/// classes (I/Id, d, f in that order), location (uru before / ki after),
/// month (iti), numbers, and finally bound transcription. When more than one
/// name class matches, the winner follows the precedence and the clash is
/// appended to `conflicts` if provided.
inline std::vector<std::string> classify(const MarkedWord& word, std::vector<ClassifyDiagnostic>* conflicts = nullptr)
{
    if (word.damage) {
        return {std::string(tok::kBreak)};
    }
    bool name = false;
    bool god = false;
    bool female = false;
    bool location = false;
    bool month = false;
    for (const auto& s : word.superscripts) {
        name = name || detail::sup_is(s, SupPosition::Before, "I") || detail::sup_is(s, SupPosition::Before, "Id");
        god = god || detail::sup_is(s, SupPosition::Before, "d");
        female = female || detail::sup_is(s, SupPosition::Before, "f");
        location = location || detail::sup_is_ci(s, SupPosition::Before, "uru") || detail::sup_is_ci(s, SupPosition::After, "ki");
        month = month || detail::sup_is_ci(s, SupPosition::Before, "iti");
    }
    const int name_classes = int(name) + int(god) + int(female);
    if (name_classes > 1 && conflicts != nullptr) {
        ClassifyDiagnostic d{word.surface, {}};
        if (name) d.matched.emplace_back(tok::kName);
        if (god) d.matched.emplace_back(tok::kGodName);
        if (female) d.matched.emplace_back(tok::kFemaleName);
        conflicts->push_back(std::move(d));
    }
    if (name) return {std::string(tok::kName)};
    if (god) return {std::string(tok::kGodName)};
    if (female) return {std::string(tok::kFemaleName)};
    if (location) return {std::string(tok::kLocation)};
    if (month) return {std::string(tok::kMonth)};
    if (is_numeric_surface(word.surface)) {
        return {std::string(tok::kNum)};
    }
    return bound_transcribe(word);
}

/// Concatenates the fragments of a line. Adjacent italic words share one
/// <i> ... </i> span, consecutive <BRK> tokens collapse into one (unless
/// disabled), and the line ends with <EOS>.
inline std::vector<std::string> tokenize_line(const Line& line, const TokenizerOptions& opts = {},
                                              std::vector<ClassifyDiagnostic>* conflicts = nullptr)
{
    std::vector<std::string> out;
    for (const auto& w : line) {
        for (auto& t : classify(w, conflicts)) {
            if (t == tok::kItalicOpen && !out.empty() && out.back() == tok::kItalicClose) {
                out.pop_back();
                continue;
            }
            if (opts.collapse_breaks && t == tok::kBreak && !out.empty() && out.back() == tok::kBreak) {
                continue;
            }
            out.push_back(std::move(t));
        }
    }
    out.emplace_back(tok::kEos);
    return out;
}

/// All lines of a document, each terminated by <EOS>.
inline std::vector<std::vector<std::string>> tokenize_document(const TransliteratedDocument& doc,
                                                               const TokenizerOptions& opts = {})
{
    std::vector<std::vector<std::string>> out;
    out.reserve(doc.lines.size());
    for (const auto& line : doc.lines) {
        out.push_back(tokenize_line(line, opts));
    }
    return out;
}

inline std::vector<std::string> flatten(const std::vector<std::vector<std::string>>& lines)
{
    std::vector<std::string> out;
    for (const auto& l : lines) {
        out.insert(out.end(), l.begin(), l.end());
    }
    return out;
}

class Vocabulary {
public:
    Vocabulary() = default;

    /// Builds from an ordered token list (ids follow list order). The list
    /// must start with the reserved tokens.
    static Vocabulary from_tokens(std::vector<std::string> tokens, std::size_t min_count)
    {
        Vocabulary v;
        v.min_count_ = min_count;
        if (tokens.size() < kReservedTokens.size()) {
            throw Error(ErrorCode::BadFormat, "vocabulary lacks reserved tokens");
        }
        for (std::size_t i = 0; i < kReservedTokens.size(); ++i) {
            if (tokens[i] != kReservedTokens[i]) {
                throw Error(ErrorCode::BadFormat, "reserved token mismatch at id " + std::to_string(i));
            }
        }
        for (auto& t : tokens) {
            if (t.empty() || t.find_first_of(" \t\n\r") != std::string::npos) {
                throw Error(ErrorCode::BadFormat, "invalid vocabulary token '" + t + "'");
            }
            const auto id = static_cast<TokenId>(v.token_of_.size());
            if (!v.id_of_.emplace(t, id).second) {
                throw Error(ErrorCode::BadFormat, "duplicate vocabulary token '" + t + "'");
            }
            v.token_of_.push_back(std::move(t));
        }
        return v;
    }

    std::size_t size() const noexcept { return token_of_.size(); }
    std::size_t min_count() const noexcept { return min_count_; }
    const std::map<std::string, std::size_t>& train_counts() const noexcept { return train_counts_; }

    bool contains(std::string_view token) const { return id_of_.find(std::string(token)) != id_of_.end(); }

    /// Out-of-vocabulary tokens map to <UNK>.
    TokenId id(std::string_view token) const
    {
        const auto it = id_of_.find(std::string(token));
        return it == id_of_.end() ? kUnkId : it->second;
    }

    const std::string& token(TokenId id) const
    {
        if (id >= token_of_.size()) {
            throw Error(ErrorCode::UnknownId, "token id " + std::to_string(id) + " >= " + std::to_string(token_of_.size()));
        }
        return token_of_[id];
    }

    const std::vector<std::string>& tokens() const noexcept { return token_of_; }

    /// File form: "AKVOC1 <min_count> <V>" then one token per line.
    std::string serialize() const
    {
        std::string out = "AKVOC1 " + std::to_string(min_count_) + " " + std::to_string(size()) + "\n";
        for (const auto& t : token_of_) {
            out += t;
            out += '\n';
        }
        return out;
    }

    static Vocabulary parse(std::string_view text)
    {
        auto lines = split(text, '\n');
        if (!lines.empty() && lines.back().empty()) {
            lines.pop_back();
        }
        if (lines.empty()) {
            throw Error(ErrorCode::BadFormat, "empty vocabulary file");
        }
        const auto header = split_ws(lines[0]);
        if (header.size() != 3 || header[0] != "AKVOC1") {
            throw Error(ErrorCode::BadFormat, "bad vocabulary header '" + lines[0] + "'");
        }
        const auto min_count = static_cast<std::size_t>(std::stoull(header[1]));
        const auto count = static_cast<std::size_t>(std::stoull(header[2]));
        if (count != lines.size() - 1) {
            throw Error(ErrorCode::BadFormat, "vocabulary header count disagrees with body");
        }
        return from_tokens(std::vector<std::string>(lines.begin() + 1, lines.end()), min_count);
    }

    /// Fingerprint stored in checkpoints to detect vocabulary/model mismatches.
    std::uint64_t hash() const { return fnv1a64(serialize()); }

private:
    friend Vocabulary build_vocabulary(const std::vector<std::string>&, std::size_t);

    std::unordered_map<std::string, TokenId> id_of_;
    std::vector<std::string> token_of_;
    std::size_t min_count_ = 0;
    std::map<std::string, std::size_t> train_counts_;
};

/// Reserved tokens first, then tokens seen at least min_count times by
/// descending count, ties in byte order. Rarer tokens will encode as <UNK>.
inline Vocabulary build_vocabulary(const std::vector<std::string>& train_tokens, std::size_t min_count = 3)
{
    if (train_tokens.empty()) {
        throw Error(ErrorCode::EmptyTrainingStream, "no training tokens");
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& t : train_tokens) {
        ++counts[t];
    }
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [t, n] : counts) {
        if (!is_reserved(t) && n >= min_count) {
            kept.emplace_back(t, n);
        }
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> order(kReservedTokens.begin(), kReservedTokens.end());
    for (auto& [t, n] : kept) {
        order.push_back(t);
    }
    Vocabulary v = Vocabulary::from_tokens(std::move(order), min_count);
    v.train_counts_ = std::move(counts);
    return v;
}

inline std::vector<TokenId> encode(std::span<const std::string> tokens, const Vocabulary& vocab)
{
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
        ids.push_back(vocab.id(t));
    }
    return ids;
}

inline std::vector<std::string> decode(std::span<const TokenId> ids, const Vocabulary& vocab)
{
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (auto id : ids) {
        out.push_back(vocab.token(id));
    }
    return out;
}

/// Token-stream file: space-separated tokens, one line per text line (the
/// trailing <EOS> of each line is implied by the newline).
inline std::string render_token_stream(const std::vector<std::vector<std::string>>& lines)
{
    std::string out;
    for (const auto& l : lines) {
        std::vector<std::string> body(l.begin(), l.end());
        if (!body.empty() && body.back() == tok::kEos) {
            body.pop_back();
        }
        out += join(body, " ");
        out += '\n';
    }
    return out;
}

inline std::vector<std::vector<std::string>> parse_token_stream(std::string_view text)
{
    auto raw = split(text, '\n');
    if (!raw.empty() && raw.back().empty()) {
        raw.pop_back();
    }
    std::vector<std::vector<std::string>> out;
    for (const auto& r : raw) {
        auto line = split_ws(r);
        line.emplace_back(tok::kEos);
        out.push_back(std::move(line));
    }
    return out;
}

}  // namespace akr
