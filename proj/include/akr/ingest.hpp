#pragma once

// Transliteration ingestion: tolerant extraction of saved HTML pages into
// marked words, the plain-text archive format, corpus splits and statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "akr/common.hpp"
#include "akr/error.hpp"

namespace akr {

enum class SupPosition { Before, After };

struct Superscript {
    std::string text;
    SupPosition position = SupPosition::Before;

    friend bool operator==(const Superscript&, const Superscript&) = default;
};

struct MarkedWord {
    std::string surface;
    bool italic = false;
    std::vector<Superscript> superscripts;
    bool damage = false;

    friend bool operator==(const MarkedWord&, const MarkedWord&) = default;
};

using Line = std::vector<MarkedWord>;

struct TransliteratedDocument {
    std::string doc_id;
    std::vector<Line> lines;
    std::string source_uri;

    friend bool operator==(const TransliteratedDocument&, const TransliteratedDocument&) = default;
};

namespace detail {

inline bool is_space(char c)
{
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline std::string trim(std::string_view s)
{
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(s[b])) {
        ++b;
    }
    while (e > b && is_space(s[e - 1])) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

inline std::string lower_ascii(std::string_view s)
{
    std::string out(s);
    for (auto& c : out) {
        if (c >= 'A' && c <= 'Z') {
            c = static_cast<char>(c - 'A' + 'a');
        }
    }
    return out;
}

inline void append_utf8(std::string& out, std::uint32_t cp)
{
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

/// Decodes one entity starting at text[pos] == '&'. Returns the number of
/// bytes consumed, or 0 if the sequence is not a recognised entity.
inline std::size_t decode_entity(std::string_view text, std::size_t pos, std::string& out)
{
    const auto semi = text.find(';', pos);
    if (semi == std::string_view::npos || semi - pos > 10) {
        return 0;
    }
    const std::string_view name = text.substr(pos + 1, semi - pos - 1);
    static const std::unordered_map<std::string_view, std::uint32_t> named = {
        {"amp", '&'}, {"lt", '<'}, {"gt", '>'}, {"quot", '"'}, {"apos", '\''}, {"nbsp", ' '},
        {"hellip", 0x2026}, {"ndash", 0x2013}, {"mdash", 0x2014},
        // accented vowels and s-caron, common in transliteration pages
        {"aacute", 0xE1}, {"eacute", 0xE9}, {"iacute", 0xED}, {"uacute", 0xFA},
        {"agrave", 0xE0}, {"egrave", 0xE8}, {"igrave", 0xEC}, {"ugrave", 0xF9},
        {"acirc", 0xE2}, {"ecirc", 0xEA}, {"icirc", 0xEE}, {"ucirc", 0xFB},
        {"Aacute", 0xC1}, {"Eacute", 0xC9}, {"Iacute", 0xCD}, {"Uacute", 0xDA},
        {"scaron", 0x161}, {"Scaron", 0x160},
    };
    if (!name.empty() && name[0] == '#') {
        std::uint32_t cp = 0;
        const bool hex = name.size() > 1 && (name[1] == 'x' || name[1] == 'X');
        const std::string_view digits = name.substr(hex ? 2 : 1);
        if (digits.empty()) {
            return 0;
        }
        for (char c : digits) {
            std::uint32_t d = 0;
            if (c >= '0' && c <= '9') {
                d = static_cast<std::uint32_t>(c - '0');
            } else if (hex && c >= 'a' && c <= 'f') {
                d = static_cast<std::uint32_t>(c - 'a' + 10);
            } else if (hex && c >= 'A' && c <= 'F') {
                d = static_cast<std::uint32_t>(c - 'A' + 10);
            } else {
                return 0;
            }
            cp = cp * (hex ? 16U : 10U) + d;
            if (cp > 0x10FFFF) {
                return 0;
            }
        }
        append_utf8(out, cp == 0xA0 ? ' ' : cp);
        return semi - pos + 1;
    }
    const auto it = named.find(name);
    if (it == named.end()) {
        return 0;
    }
    append_utf8(out, it->second);
    return semi - pos + 1;
}

inline bool is_line_break_tag(std::string_view name)
{
    static const std::set<std::string_view> tags = {
        "br", "p", "div", "tr", "li", "ul", "ol", "table", "tbody", "blockquote",
        "h1", "h2", "h3", "h4", "h5", "h6", "hr", "pre", "section", "article", "body",
    };
    return tags.count(name) != 0;
}

inline bool is_skipped_container(std::string_view name)
{
    return name == "script" || name == "style" || name == "head" || name == "title" || name == "noscript";
}

inline bool is_italic_tag(std::string_view name) { return name == "i" || name == "em"; }

/// Damage marks: square brackets, half brackets, standalone x / x+, ellipsis.
inline bool contains_bracket(std::string_view s)
{
    return s.find('[') != std::string_view::npos || s.find(']') != std::string_view::npos
        || s.find("⸢") != std::string_view::npos || s.find("⸣") != std::string_view::npos;
}

inline bool is_damage_word(std::string_view s)
{
    return s == "x" || s == "x+" || s == "X" || s.find("...") != std::string_view::npos
        || s.find("…") != std::string_view::npos;
}

/// Flags words that carry or sit inside bracket notation. Bracket depth is
/// tracked across the words of one line and reset at line end.
inline void mark_damage(Line& line)
{
    int depth = 0;
    for (auto& w : line) {
        bool touched = depth > 0 || contains_bracket(w.surface) || is_damage_word(w.surface);
        const std::string_view s = w.surface;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '[' || s.compare(i, 3, "⸢") == 0) {
                ++depth;
            } else if (s[i] == ']' || s.compare(i, 3, "⸣") == 0) {
                depth = std::max(0, depth - 1);
            }
        }
        w.damage = touched;
    }
}

class DocumentBuilder {
public:
    void text_char(char c)
    {
        if (in_sup_) {
            sup_text_.push_back(c);
            return;
        }
        if (is_space(c)) {
            end_word();
            return;
        }
        surface_.push_back(c);
        // Count code points, not bytes, so italic majority is script-neutral.
        if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) {
            ++codepoints_;
            if (italic_depth_ > 0) {
                ++italic_codepoints_;
            }
        }
    }

    void open_italic() { ++italic_depth_; }
    void reset_italic() { italic_depth_ = 0; }
    void close_italic()
    {
        if (italic_depth_ > 0) {
            --italic_depth_;
        }
    }

    void open_sup()
    {
        if (in_sup_) {
            throw Error(ErrorCode::MalformedMarkup, "nested superscript");
        }
        in_sup_ = true;
        sup_text_.clear();
    }

    void close_sup()
    {
        if (!in_sup_) {
            return;
        }
        in_sup_ = false;
        std::string text = trim(sup_text_);
        if (text.empty()) {
            return;
        }
        sups_.push_back({std::move(text), surface_.empty() ? SupPosition::Before : SupPosition::After});
    }

    void line_break()
    {
        if (in_sup_) {
            throw Error(ErrorCode::MalformedMarkup, "superscript spans a line boundary");
        }
        end_word();
        if (!sups_.empty() && !line_.empty()) {
            for (auto& s : sups_) {
                line_.back().superscripts.push_back({std::move(s.text), SupPosition::After});
            }
        }
        sups_.clear();
        if (!line_.empty()) {
            mark_damage(line_);
            lines_.push_back(std::move(line_));
        }
        line_.clear();
    }

    std::vector<Line> finish()
    {
        if (in_sup_) {
            throw Error(ErrorCode::MalformedMarkup, "unclosed superscript");
        }
        line_break();
        return std::move(lines_);
    }

private:
    void end_word()
    {
        if (surface_.empty()) {
            return;  // superscripts stay pending for the next word
        }
        MarkedWord w;
        w.italic = italic_codepoints_ * 2 >= codepoints_ && italic_codepoints_ > 0;
        w.surface = std::move(surface_);
        w.superscripts = std::move(sups_);
        line_.push_back(std::move(w));
        surface_.clear();
        sups_.clear();
        codepoints_ = 0;
        italic_codepoints_ = 0;
    }

    std::vector<Line> lines_;
    Line line_;
    std::string surface_;
    std::vector<Superscript> sups_;
    std::size_t codepoints_ = 0;
    std::size_t italic_codepoints_ = 0;
    int italic_depth_ = 0;
    bool in_sup_ = false;
    std::string sup_text_;
};

}  // namespace detail

/// Extracts the transliteration from one saved HTML page.
///
/// Every tag is dropped except italics (<i>, <em>) and superscripts (<sup>),
/// whose meaning is folded into the MarkedWord fields. Block-level elements
/// and <br> delimit lines; empty lines are not kept. Contents of script,
/// style and head are ignored, as are comments. An italic left open closes
/// with its enclosing block; superscripts that nest or cross a line are
/// malformed.
inline TransliteratedDocument extract_document(std::string_view html, std::string doc_id,
                                               std::string source_uri = {})
{
    detail::DocumentBuilder builder;
    std::string skip_until;  // closing tag name of a skipped container
    std::string decoded;
    std::size_t i = 0;
    while (i < html.size()) {
        const char c = html[i];
        if (c == '<') {
            if (html.compare(i, 4, "<!--") == 0) {
                const auto end = html.find("-->", i + 4);
                i = end == std::string_view::npos ? html.size() : end + 3;
                continue;
            }
            const auto close = html.find('>', i + 1);
            if (close == std::string_view::npos) {
                // A lone '<' with no tag end is text.
                if (skip_until.empty()) {
                    builder.text_char(c);
                }
                ++i;
                continue;
            }
            std::string_view body = html.substr(i + 1, close - i - 1);
            i = close + 1;
            if (body.empty() || body[0] == '!' || body[0] == '?') {
                continue;
            }
            const bool closing = body[0] == '/';
            if (closing) {
                body.remove_prefix(1);
            }
            std::size_t n = 0;
            while (n < body.size() && !detail::is_space(body[n]) && body[n] != '/' && body[n] != '>') {
                ++n;
            }
            const std::string name = detail::lower_ascii(body.substr(0, n));
            if (name.empty()) {
                continue;
            }
            if (!skip_until.empty()) {
                if (closing && name == skip_until) {
                    skip_until.clear();
                }
                continue;
            }
            if (!closing && detail::is_skipped_container(name)) {
                const bool self_closing = !body.empty() && body.back() == '/';
                if (!self_closing) {
                    skip_until = name;
                }
                continue;
            }
            if (detail::is_italic_tag(name)) {
                closing ? builder.close_italic() : builder.open_italic();
            } else if (name == "sup") {
                closing ? builder.close_sup() : builder.open_sup();
            } else if (detail::is_line_break_tag(name)) {
                builder.line_break();
                // an italic left open inside a block ends with it
                if (closing && name != "br" && name != "hr") {
                    builder.reset_italic();
                }
            }
            continue;
        }
        if (!skip_until.empty()) {
            ++i;
            continue;
        }
        if (c == '&') {
            decoded.clear();
            const auto used = detail::decode_entity(html, i, decoded);
            if (used > 0) {
                for (char d : decoded) {
                    builder.text_char(d);
                }
                i += used;
                continue;
            }
        }
        builder.text_char(c);
        ++i;
    }
    TransliteratedDocument doc;
    doc.doc_id = std::move(doc_id);
    doc.source_uri = std::move(source_uri);
    doc.lines = builder.finish();
    if (doc.lines.empty()) {
        throw Error(ErrorCode::EmptyDocument, "no transliteration content in '" + doc.doc_id + "'");
    }
    return doc;
}

namespace detail {

inline std::string escape_html(std::string_view s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        default: out.push_back(c);
        }
    }
    return out;
}

inline std::string render_word_html(const MarkedWord& w)
{
    std::string out;
    for (const auto& s : w.superscripts) {
        if (s.position == SupPosition::Before) {
            out += "<sup>" + escape_html(s.text) + "</sup>";
        }
    }
    out += w.italic ? "<i>" + escape_html(w.surface) + "</i>" : escape_html(w.surface);
    for (const auto& s : w.superscripts) {
        if (s.position == SupPosition::After) {
            out += "<sup>" + escape_html(s.text) + "</sup>";
        }
    }
    return out;
}

}  // namespace detail

/// Minimal HTML rendering; extract_document(render_html(d)) reproduces d.
inline std::string render_html(const TransliteratedDocument& doc)
{
    std::string out = "<html><body>\n";
    for (const auto& line : doc.lines) {
        out += "<p>";
        for (std::size_t k = 0; k < line.size(); ++k) {
            if (k != 0) {
                out += ' ';
            }
            out += detail::render_word_html(line[k]);
        }
        out += "</p>\n";
    }
    out += "</body></html>\n";
    return out;
}

/// Archive text form: one line per text line, single spaces between items,
/// italic runs bracketed by standalone "<i>" / "</i>" items, superscripts as
/// "^{text}" glued before or after the surface.
inline std::string render_text(const TransliteratedDocument& doc)
{
    std::string out;
    for (const auto& line : doc.lines) {
        std::vector<std::string> items;
        bool italic = false;
        for (const auto& w : line) {
            if (w.italic != italic) {
                items.emplace_back(w.italic ? "<i>" : "</i>");
                italic = w.italic;
            }
            std::string item;
            for (const auto& s : w.superscripts) {
                if (s.position == SupPosition::Before) {
                    item += "^{" + s.text + "}";
                }
            }
            item += w.surface;
            for (const auto& s : w.superscripts) {
                if (s.position == SupPosition::After) {
                    item += "^{" + s.text + "}";
                }
            }
            items.push_back(std::move(item));
        }
        if (italic) {
            items.emplace_back("</i>");
        }
        out += join(items, " ");
        out += '\n';
    }
    return out;
}

/// Inverse of render_text.
inline TransliteratedDocument parse_text(std::string_view text, std::string doc_id, std::string source_uri = {})
{
    TransliteratedDocument doc;
    doc.doc_id = std::move(doc_id);
    doc.source_uri = std::move(source_uri);
    auto raw_lines = split(text, '\n');
    if (!raw_lines.empty() && raw_lines.back().empty()) {
        raw_lines.pop_back();
    }
    for (const auto& raw : raw_lines) {
        Line line;
        bool italic = false;
        for (const auto& item : split_ws(raw)) {
            if (item == "<i>") {
                italic = true;
                continue;
            }
            if (item == "</i>") {
                italic = false;
                continue;
            }
            MarkedWord w;
            w.italic = italic;
            std::string_view rest = item;
            while (rest.size() > 2 && rest.substr(0, 2) == "^{") {
                const auto end = rest.find('}');
                if (end == std::string_view::npos) {
                    throw Error(ErrorCode::BadFormat, "unterminated superscript in '" + item + "'");
                }
                w.superscripts.push_back({std::string(rest.substr(2, end - 2)), SupPosition::Before});
                rest.remove_prefix(end + 1);
            }
            std::vector<Superscript> after;
            while (!rest.empty() && rest.back() == '}') {
                const auto start = rest.rfind("^{");
                if (start == std::string_view::npos) {
                    break;
                }
                after.insert(after.begin(), Superscript{std::string(rest.substr(start + 2, rest.size() - start - 3)), SupPosition::After});
                rest.remove_suffix(rest.size() - start);
            }
            w.superscripts.insert(w.superscripts.end(), after.begin(), after.end());
            w.surface = std::string(rest);
            if (w.surface.empty()) {
                throw Error(ErrorCode::BadFormat, "empty surface in '" + item + "'");
            }
            line.push_back(std::move(w));
        }
        detail::mark_damage(line);
        doc.lines.push_back(std::move(line));
    }
    if (doc.lines.empty()) {
        throw Error(ErrorCode::EmptyDocument, "no lines in '" + doc.doc_id + "'");
    }
    return doc;
}

struct CorpusSplit {
    std::vector<TransliteratedDocument> train;
    std::vector<TransliteratedDocument> test;
    std::uint64_t seed = 0;
    double test_fraction = 0.0;
};

/// Number of test documents for a corpus of n documents.
inline std::size_t test_count(std::size_t n, double test_fraction)
{
    return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
}

/// Assigns each doc_id to train (false) or test (true). Pure function of the
/// doc_id set, the fraction and the seed: ids are sorted, shuffled with the
/// seeded generator, and the first round(fraction * n) become test.
inline std::map<std::string, bool> split_assignment(std::vector<std::string> doc_ids, double test_fraction,
                                                    std::uint64_t seed)
{
    if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
        throw Error(ErrorCode::InvalidFraction, "test fraction must lie in [0,1]");
    }
    std::sort(doc_ids.begin(), doc_ids.end());
    if (std::adjacent_find(doc_ids.begin(), doc_ids.end()) != doc_ids.end()) {
        throw Error(ErrorCode::DuplicateDocId, "duplicate doc_id in corpus");
    }
    const std::size_t n_test = test_count(doc_ids.size(), test_fraction);
    std::vector<std::string> order = doc_ids;
    Rng rng(seed);
    rng.shuffle(order);
    std::map<std::string, bool> out;
    for (std::size_t k = 0; k < order.size(); ++k) {
        out[order[k]] = k < n_test;
    }
    return out;
}

inline CorpusSplit split_corpus(const std::vector<TransliteratedDocument>& corpus, double test_fraction,
                                std::uint64_t seed)
{
    if (corpus.empty()) {
        throw Error(ErrorCode::InvalidConfig, "cannot split an empty corpus");
    }
    std::vector<std::string> ids;
    ids.reserve(corpus.size());
    for (const auto& d : corpus) {
        ids.push_back(d.doc_id);
    }
    const auto assignment = split_assignment(ids, test_fraction, seed);
    CorpusSplit out;
    out.seed = seed;
    out.test_fraction = test_fraction;
    for (const auto& d : corpus) {
        (assignment.at(d.doc_id) ? out.test : out.train).push_back(d);
    }
    return out;
}

struct CorpusStats {
    std::size_t document_count = 0;
    std::size_t total_word_count = 0;
    std::size_t unique_word_count = 0;
    std::size_t count_once = 0;
    std::size_t count_twice = 0;

    friend bool operator==(const CorpusStats&, const CorpusStats&) = default;
};

/// Exact counts over a tokenized stream. Structural stream tokens (line
/// terminators and italic markers) are not words and are skipped.
inline CorpusStats corpus_stats(std::size_t document_count, const std::vector<std::string>& tokens)
{
    CorpusStats st;
    st.document_count = document_count;
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& t : tokens) {
        if (t == "<EOS>" || t == "<i>" || t == "</i>") {
            continue;
        }
        ++st.total_word_count;
        ++freq[t];
    }
    st.unique_word_count = freq.size();
    for (const auto& [tok, n] : freq) {
        st.count_once += n == 1 ? 1 : 0;
        st.count_twice += n == 2 ? 1 : 0;
    }
    return st;
}

// ---------------------------------------------------------------------------
// Archive on disk: <dir>/<doc_id>.txt per document plus <dir>/manifest.tsv.

struct Manifest {
    std::uint64_t seed = 0;
    double test_fraction = 0.0;
    std::map<std::string, bool> is_test;  // sorted by doc_id
};

inline std::string format_double(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string render_manifest(const Manifest& m)
{
    std::string out = "# seed\t" + std::to_string(m.seed) + "\n# test_fraction\t" + format_double(m.test_fraction) + "\n";
    for (const auto& [id, test] : m.is_test) {
        out += id + "\t" + (test ? "test" : "train") + "\n";
    }
    return out;
}

inline Manifest parse_manifest(std::string_view text)
{
    Manifest m;
    for (const auto& line : split(text, '\n')) {
        if (line.empty()) {
            continue;
        }
        const auto fields = split(line, '\t');
        if (fields.size() != 2) {
            throw Error(ErrorCode::BadFormat, "manifest line: " + line);
        }
        if (fields[0] == "# seed") {
            m.seed = std::stoull(fields[1]);
        } else if (fields[0] == "# test_fraction") {
            m.test_fraction = std::stod(fields[1]);
        } else if (fields[1] == "train" || fields[1] == "test") {
            m.is_test[fields[0]] = fields[1] == "test";
        } else {
            throw Error(ErrorCode::BadFormat, "manifest line: " + line);
        }
    }
    return m;
}

inline Manifest make_manifest(const std::vector<TransliteratedDocument>& corpus, double test_fraction, std::uint64_t seed)
{
    std::vector<std::string> ids;
    for (const auto& d : corpus) {
        ids.push_back(d.doc_id);
    }
    return Manifest{seed, test_fraction, split_assignment(ids, test_fraction, seed)};
}

inline void write_archive(const std::filesystem::path& dir, const std::vector<TransliteratedDocument>& corpus,
                          const Manifest& manifest)
{
    std::filesystem::create_directories(dir);
    for (const auto& d : corpus) {
        write_file(dir / (d.doc_id + ".txt"), render_text(d));
    }
    write_file(dir / "manifest.tsv", render_manifest(manifest));
}

struct Archive {
    std::vector<TransliteratedDocument> documents;  // manifest order
    Manifest manifest;

    CorpusSplit split() const
    {
        CorpusSplit s;
        s.seed = manifest.seed;
        s.test_fraction = manifest.test_fraction;
        for (const auto& d : documents) {
            (manifest.is_test.at(d.doc_id) ? s.test : s.train).push_back(d);
        }
        return s;
    }
};

inline Archive read_archive(const std::filesystem::path& dir)
{
    Archive a;
    a.manifest = parse_manifest(read_file(dir / "manifest.tsv"));
    for (const auto& [id, test] : a.manifest.is_test) {
        const auto path = dir / (id + ".txt");
        a.documents.push_back(parse_text(read_file(path), id, path.string()));
    }
    return a;
}

/// Reads every *.html / *.htm file of a directory, sorted by filename; the
/// stem becomes the doc_id.
inline std::vector<TransliteratedDocument> ingest_directory(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir)) {
        throw Error(ErrorCode::Io, "not a directory: " + dir.string());
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const auto ext = detail::lower_ascii(entry.path().extension().string());
        if (entry.is_regular_file() && (ext == ".html" || ext == ".htm")) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<TransliteratedDocument> out;
    for (const auto& f : files) {
        out.push_back(extract_document(read_file(f), f.stem().string(), f.string()));
    }
    return out;
}

}  // namespace akr
