#pragma once

// Deterministic generator of archival-style transliterations (debt notes,
// deliveries, witness lists, dates) used for desk-scale experiments and
// demos. Each document has one commodity; units, verbs and qualifiers agree
// with it across the line, so longer context pays off over bigrams.

#include <cstdint>
#include <string>
#include <vector>

#include "akr/common.hpp"
#include "akr/ingest.hpp"
#include "akr/tokenizer.hpp"

namespace akr {

struct SyntheticOptions {
    std::uint64_t seed = 2024;
    std::size_t target_tokens = 50000;  // stops once the tokenized corpus reaches this size
    double damage_rate = 0.06;          // per line
    double rare_word_rate = 0.12;       // per line
};

namespace synth {

struct Commodity {
    std::vector<std::string> units;
    std::string noun;
    std::vector<std::string> verbs;
    std::vector<std::string> qualities;
};

inline const std::vector<Commodity>& commodities()
{
    static const std::vector<Commodity> table = {
        {{"ma-na", "gín"}, "kù.babbar", {"SUM-in", "i-šal-lim"}, {"qa-lu-ú", "nu-uh-hu-tu"}},
        {{"gur"}, "še.bar", {"i-mad-dad", "ú-še-ri-bi"}, {"ma-ši-hu", "ga-mir-tu"}},
        {{"gur"}, "zú.lum.ma", {"i-mad-dad", "i-nam-din"}, {"eš-ru-ú", "ha-ṣa-ri"}},
        {{"gú.un"}, "sík.hi.a", {"i-šaq-qal", "SUM-in"}, {"ba-ab-ba-nu-ú", "pe-ṣu-ú"}},
        {{"gín"}, "an.bar", {"i-šaq-qal", "ú-tar-ru"}, {"ep-šú", "la-bi-ru"}},
    };
    return table;
}

inline const std::vector<std::string>& personal_names()
{
    static const std::vector<std::string> names = {
        "ba-la-ṭu", "ni-din-tu₄", "mu-ra-nu", "šu-la-a", "ri-mut", "ki-na-a", "iddin-na-a", "ar-di-ia",
        "la-ba-ši", "ib-na-a", "zé-ri-ia", "re-mut-dEN", "gi-mil-lu", "ta-at-ta-an-nu", "ha-ri-ṣa-nu", "ku-na-a",
        "bu-na-nu", "ba-zu-zu", "šá-pik-zé-ri", "mar-duk-a", "it-ti-EN", "da-di-ia", "kal-ba-a", "e-ṭir",
    };
    return names;
}

inline const std::vector<std::string>& places()
{
    static const std::vector<std::string> p = {"E", "TIN.TIR", "bar-sip", "ÙNU", "NIBRU", "KIŠ", "šu-šá-an"};
    return p;
}

inline const std::vector<std::string>& months()
{
    static const std::vector<std::string> m = {"BÁR", "GU₄", "SIG₄", "ŠU", "NE", "KIN", "DU₆", "APIN", "GAN", "AB", "ZÍZ", "ŠE"};
    return m;
}

inline const std::vector<std::string>& gods()
{
    static const std::vector<std::string> g = {"AMAR.UTU", "AG", "UTU", "EN", "30"};
    return g;
}

class Writer {
public:
    explicit Writer(Rng& rng) : rng_(rng) {}

    MarkedWord plain(std::string s) { return {std::move(s), false, {}, false}; }
    MarkedWord italic(std::string s) { return {std::move(s), true, {}, false}; }
    MarkedWord name() { return {rng_.pick(personal_names()), false, {{"I", SupPosition::Before}}, false}; }
    MarkedWord female() { return {rng_.pick(personal_names()), false, {{"f", SupPosition::Before}}, false}; }
    MarkedWord god() { return {rng_.pick(gods()), false, {{"d", SupPosition::Before}}, false}; }
    MarkedWord month() { return {rng_.pick(months()), false, {{"iti", SupPosition::Before}}, false}; }
    MarkedWord place()
    {
        if (rng_.bernoulli(0.5)) {
            return {rng_.pick(places()), false, {{"uru", SupPosition::Before}}, false};
        }
        return {rng_.pick(places()), false, {{"ki", SupPosition::After}}, false};
    }
    MarkedWord number()
    {
        if (rng_.bernoulli(0.1)) {
            return plain("1/2");
        }
        return plain(std::to_string(1 + rng_.below(rng_.bernoulli(0.7) ? 10 : 60)));
    }

    Rng& rng() { return rng_; }

private:
    Rng& rng_;
};

inline std::string rare_word(Rng& rng)
{
    static const std::vector<std::string> syl = {"ku", "ri", "ba", "šu", "ma", "ti", "la", "ṣa", "qu", "ḫi", "pu", "ze", "nu", "ru"};
    std::string w = rng.pick(syl);
    const auto n = 1 + rng.below(3);
    for (std::uint64_t i = 0; i < n; ++i) {
        w += "-" + rng.pick(syl);
    }
    return w;
}

inline Line opening_line(Writer& w, const Commodity& c)
{
    auto& rng = w.rng();
    const auto unit = rng.pick(c.units);
    switch (rng.below(3)) {
    case 0:
        return {w.number(), w.plain(unit), w.plain(c.noun), w.name(), w.plain(rng.pick(c.verbs)), w.italic("ina"),
                w.month(), w.plain(rng.pick(c.qualities)), w.italic("šá"), w.name()};
    case 1:
        return {w.number(), w.plain(unit), w.plain(c.noun), w.italic("šá"), w.name(), w.italic("a-šú"), w.italic("šá"),
                w.name(), w.plain(rng.pick(c.qualities))};
    default:
        return {w.plain(c.noun), w.number(), w.plain(unit), w.name(), w.plain(rng.pick(c.qualities)),
                w.plain(rng.pick(c.verbs)), w.italic("ina"), w.place(), w.italic("a-na"), w.name()};
    }
}

inline Line body_line(Writer& w, const Commodity& c)
{
    auto& rng = w.rng();
    switch (rng.below(4)) {
    case 0:
        return {w.italic("ina"), w.italic("muh-hi"), w.name(), w.italic("a-šú"), w.italic("šá"), w.name(),
                w.italic("a"), w.name()};
    case 1:
        return {w.italic("ina"), w.month(), w.plain(c.noun), w.name(), w.plain(rng.pick(c.verbs)),
                w.plain(rng.pick(c.qualities)), w.italic("ina"), w.place()};
    case 2:
        return {w.number(), w.plain(rng.pick(c.units)), w.italic("šá"), w.name(), w.plain(rng.pick(c.verbs)),
                w.italic("ina"), w.plain("é"), w.god(), w.plain(rng.pick(c.qualities))};
    default:
        return {w.plain("pu-ut"), w.plain("e-ṭè-ru"), w.italic("šá"), w.plain(c.noun), w.plain(rng.pick(c.qualities)),
                w.name(), w.italic("na-ši")};
    }
}

inline Line witness_line(Writer& w)
{
    if (w.rng().bernoulli(0.2)) {
        return {w.plain("lú"), w.plain("mu-kin-nu"), w.female(), w.italic("dumu.munus-šú"), w.italic("šá"), w.name()};
    }
    return {w.plain("lú"), w.plain("mu-kin-nu"), w.name(), w.italic("a-šú"), w.italic("šá"), w.name(), w.italic("a"),
            w.name()};
}

inline Line scribe_line(Writer& w)
{
    return {w.italic("u"), w.plain("lú"), w.plain("umbisag"), w.name(), w.italic("a-šú"), w.italic("šá"), w.name()};
}

inline Line date_line(Writer& w)
{
    return {w.place(), w.month(), w.plain("u₄"), w.number(), w.plain("kam"), w.plain("mu"), w.number(), w.plain("kam"),
            w.name(), w.plain("lugal")};
}

inline void damage(Line& line, Rng& rng)
{
    if (line.size() < 3) {
        return;
    }
    const auto start = static_cast<std::size_t>(rng.below(line.size() - 1));
    const auto len = static_cast<std::size_t>(1 + rng.below(std::min<std::size_t>(3, line.size() - start)));
    if (len == 1) {
        line[start] = {"[x]", false, {}, true};
        return;
    }
    line[start] = {"[x", false, {}, true};
    for (std::size_t k = start + 1; k + 1 < start + len; ++k) {
        line[k] = {"x", false, {}, true};
    }
    line[start + len - 1] = {"x]", false, {}, true};
}

}  // namespace synth

inline TransliteratedDocument generate_synthetic_document(Rng& rng, std::string doc_id, const SyntheticOptions& opts)
{
    synth::Writer w(rng);
    const auto& c = rng.pick(synth::commodities());
    TransliteratedDocument doc;
    doc.doc_id = std::move(doc_id);
    doc.source_uri = "synthetic:" + doc.doc_id;
    doc.lines.push_back(synth::opening_line(w, c));
    const auto n_body = 1 + rng.below(3);
    for (std::uint64_t i = 0; i < n_body; ++i) {
        doc.lines.push_back(synth::body_line(w, c));
    }
    const auto n_wit = 2 + rng.below(3);
    for (std::uint64_t i = 0; i < n_wit; ++i) {
        doc.lines.push_back(synth::witness_line(w));
    }
    doc.lines.push_back(synth::scribe_line(w));
    doc.lines.push_back(synth::date_line(w));
    for (auto& line : doc.lines) {
        if (rng.bernoulli(opts.rare_word_rate)) {
            line.push_back(w.plain(synth::rare_word(rng)));
        }
        if (rng.bernoulli(opts.damage_rate)) {
            synth::damage(line, rng);
        }
        detail::mark_damage(line);
    }
    return doc;
}

/// Documents are generated until the tokenized corpus (line terminators
/// included) holds at least target_tokens tokens.
inline std::vector<TransliteratedDocument> generate_synthetic_corpus(const SyntheticOptions& opts = {})
{
    Rng rng(opts.seed);
    std::vector<TransliteratedDocument> out;
    std::size_t tokens = 0;
    while (tokens < opts.target_tokens) {
        char id[32];
        std::snprintf(id, sizeof id, "syn-%05zu", out.size() + 1);
        out.push_back(generate_synthetic_document(rng, id, opts));
        for (const auto& line : out.back().lines) {
            tokens += tokenize_line(line).size();
        }
    }
    return out;
}

}  // namespace akr
