#pragma once

// Application layer: the JSON configuration file, the on-disk artifact
// layout, pipeline commands shared by the CLI, and the request handlers
// behind the HTTP service.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "akr/common.hpp"
#include "akr/error.hpp"
#include "akr/ingest.hpp"
#include "akr/lstm.hpp"
#include "akr/ngram.hpp"
#include "akr/restore.hpp"
#include "akr/synthetic.hpp"
#include "akr/tokenizer.hpp"

namespace akr {

using Json = nlohmann::json;

enum class ModelKind { NGram, Lstm };

inline std::string_view to_string(ModelKind k) { return k == ModelKind::NGram ? "ngram" : "lstm"; }

inline ModelKind parse_model_kind(std::string_view s)
{
    if (s == "ngram") return ModelKind::NGram;
    if (s == "lstm") return ModelKind::Lstm;
    throw Error(ErrorCode::InvalidConfig, "model must be ngram or lstm, got '" + std::string(s) + "'");
}

struct PathSettings {
    std::string corpus_dir = "data/sample";
    std::string artifacts_dir = "artifacts";
};

struct SplitSettings {
    double test_fraction = 0.1;
    std::uint64_t seed = 42;
    double valid_fraction = 0.1;  // carved out of the train split for early stopping
};

struct TokenizerSettings {
    std::size_t min_count = 3;
    bool collapse_breaks = true;
};

struct NGramSettings {
    std::size_t n = 2;
    double alpha = 0.01;
    NGramSmoothing smoothing = NGramSmoothing::AddAlpha;
};

struct EvalSettings {
    std::size_t mask_index = 5;
    std::size_t min_len = 10;
    std::size_t pool_size = 100;
    bool mcq_per_token = false;
};

struct ServerSettings {
    std::string bind = "127.0.0.1";
    int port = 8080;
    ModelKind model = ModelKind::Lstm;
};

struct AppConfig {
    PathSettings paths;
    SplitSettings split;
    TokenizerSettings tokenizer;
    LmConfig lstm;  // vocab_size is taken from the vocabulary at training time
    NGramSettings ngram;
    EvalSettings eval;
    ServerSettings server;
};

namespace detail {

/// Strict object reader: missing keys keep their defaults, unknown keys and
/// mistyped values are errors.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where))
    {
        if (!j_.is_object()) {
            throw Error(ErrorCode::InvalidConfig, where_ + ": expected an object");
        }
    }

    template <class T>
    void get(const std::string& key, T& out)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            if (!it->is_number_unsigned()) {
                throw Error(ErrorCode::InvalidConfig, path(key) + ": expected a non-negative integer");
            }
        }
        try {
            out = it->get<T>();
        } catch (const Json::exception& e) {
            throw Error(ErrorCode::InvalidConfig, path(key) + ": " + e.what());
        }
    }

    template <class F>
    void get_with(const std::string& key, F&& parse)
    {
        std::string s;
        get(key, s);
        if (j_.contains(key)) {
            parse(s);
        }
    }

    std::optional<Json> sub(const std::string& key)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? std::nullopt : std::optional<Json>(*it);
    }

    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

    void finish() const
    {
        for (const auto& [k, v] : j_.items()) {
            if (seen_.count(k) == 0) {
                throw Error(ErrorCode::InvalidConfig, "unknown field '" + path(k) + "'");
            }
        }
    }

private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline std::string_view smoothing_name(NGramSmoothing s)
{
    return s == NGramSmoothing::AddAlpha ? "add_alpha" : "unigram_backoff";
}

inline NGramSmoothing parse_smoothing(std::string_view s)
{
    if (s == "add_alpha") return NGramSmoothing::AddAlpha;
    if (s == "unigram_backoff") return NGramSmoothing::UnigramBackoff;
    throw Error(ErrorCode::InvalidConfig, "smoothing must be add_alpha or unigram_backoff");
}

}  // namespace detail

inline Json lm_config_to_json(const LmConfig& c)
{
    return Json{
        {"vocab_size", c.vocab_size},
        {"embed_dim", c.embed_dim},
        {"hidden_dim", c.hidden_dim},
        {"num_layers", c.num_layers},
        {"bptt_len", c.bptt_len},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"max_epochs", c.max_epochs},
        {"early_stop_patience", c.early_stop_patience},
        {"seed", c.seed},
        {"dropout_rate", c.dropout_rate},
        {"clip_norm", c.clip_norm},
        {"reset_at_eos", c.reset_at_eos},
        {"cell", c.cell == CellType::Lstm ? "lstm" : "rnn"},
        {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_eps", c.adam_eps},
    };
}

inline LmConfig lm_config_from_json(const Json& j, const std::string& where = "lstm")
{
    LmConfig c;
    detail::ObjectReader r(j, where);
    r.get("vocab_size", c.vocab_size);
    r.get("embed_dim", c.embed_dim);
    r.get("hidden_dim", c.hidden_dim);
    r.get("num_layers", c.num_layers);
    r.get("bptt_len", c.bptt_len);
    r.get("batch_size", c.batch_size);
    r.get("learning_rate", c.learning_rate);
    r.get("max_epochs", c.max_epochs);
    r.get("early_stop_patience", c.early_stop_patience);
    r.get("seed", c.seed);
    r.get("dropout_rate", c.dropout_rate);
    r.get("clip_norm", c.clip_norm);
    r.get("reset_at_eos", c.reset_at_eos);
    r.get_with("cell", [&c](const std::string& s) {
        if (s != "lstm" && s != "rnn") throw Error(ErrorCode::InvalidConfig, "cell must be lstm or rnn");
        c.cell = s == "lstm" ? CellType::Lstm : CellType::Rnn;
    });
    r.get_with("optimizer", [&c](const std::string& s) {
        if (s != "adam" && s != "sgd") throw Error(ErrorCode::InvalidConfig, "optimizer must be adam or sgd");
        c.optimizer = s == "adam" ? OptimizerKind::Adam : OptimizerKind::Sgd;
    });
    r.get("adam_beta1", c.adam_beta1);
    r.get("adam_beta2", c.adam_beta2);
    r.get("adam_eps", c.adam_eps);
    r.finish();
    return c;
}

inline Json to_json(const AppConfig& c)
{
    return Json{
        {"paths", {{"corpus_dir", c.paths.corpus_dir}, {"artifacts_dir", c.paths.artifacts_dir}}},
        {"split", {{"test_fraction", c.split.test_fraction}, {"seed", c.split.seed}, {"valid_fraction", c.split.valid_fraction}}},
        {"tokenizer", {{"min_count", c.tokenizer.min_count}, {"collapse_breaks", c.tokenizer.collapse_breaks}}},
        {"lstm", lm_config_to_json(c.lstm)},
        {"ngram", {{"n", c.ngram.n}, {"alpha", c.ngram.alpha}, {"smoothing", detail::smoothing_name(c.ngram.smoothing)}}},
        {"eval",
         {{"mask_index", c.eval.mask_index},
          {"min_len", c.eval.min_len},
          {"pool_size", c.eval.pool_size},
          {"mcq_per_token", c.eval.mcq_per_token}}},
        {"server", {{"bind", c.server.bind}, {"port", c.server.port}, {"model", to_string(c.server.model)}}},
    };
}

inline AppConfig app_config_from_json(const Json& j)
{
    AppConfig c;
    detail::ObjectReader top(j, "");
    if (auto s = top.sub("paths")) {
        detail::ObjectReader r(*s, "paths");
        r.get("corpus_dir", c.paths.corpus_dir);
        r.get("artifacts_dir", c.paths.artifacts_dir);
        r.finish();
    }
    if (auto s = top.sub("split")) {
        detail::ObjectReader r(*s, "split");
        r.get("test_fraction", c.split.test_fraction);
        r.get("seed", c.split.seed);
        r.get("valid_fraction", c.split.valid_fraction);
        r.finish();
    }
    if (auto s = top.sub("tokenizer")) {
        detail::ObjectReader r(*s, "tokenizer");
        r.get("min_count", c.tokenizer.min_count);
        r.get("collapse_breaks", c.tokenizer.collapse_breaks);
        r.finish();
    }
    if (auto s = top.sub("lstm")) {
        c.lstm = lm_config_from_json(*s);
    }
    if (auto s = top.sub("ngram")) {
        detail::ObjectReader r(*s, "ngram");
        r.get("n", c.ngram.n);
        r.get("alpha", c.ngram.alpha);
        r.get_with("smoothing", [&c](const std::string& v) { c.ngram.smoothing = detail::parse_smoothing(v); });
        r.finish();
    }
    if (auto s = top.sub("eval")) {
        detail::ObjectReader r(*s, "eval");
        r.get("mask_index", c.eval.mask_index);
        r.get("min_len", c.eval.min_len);
        r.get("pool_size", c.eval.pool_size);
        r.get("mcq_per_token", c.eval.mcq_per_token);
        r.finish();
    }
    if (auto s = top.sub("server")) {
        detail::ObjectReader r(*s, "server");
        r.get("bind", c.server.bind);
        r.get("port", c.server.port);
        r.get_with("model", [&c](const std::string& v) { c.server.model = parse_model_kind(v); });
        r.finish();
    }
    top.finish();
    return c;
}

inline std::string render_config(const AppConfig& c) { return to_json(c).dump(2) + "\n"; }

inline AppConfig parse_config(std::string_view text)
{
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
    }
    return app_config_from_json(j);
}

inline AppConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

// ---------------------------------------------------------------------------
// Artifacts

struct ArtifactPaths {
    std::filesystem::path root;

    std::filesystem::path corpus() const { return root / "corpus"; }
    std::filesystem::path vocab() const { return root / "vocab.txt"; }
    std::filesystem::path ngram() const { return root / "ngram.akng"; }
    std::filesystem::path lstm() const { return root / "lstm.aklm"; }
    std::filesystem::path train_log() const { return root / "train_log.tsv"; }
    std::filesystem::path model(ModelKind k) const { return k == ModelKind::NGram ? ngram() : lstm(); }
};

inline ArtifactPaths artifacts(const AppConfig& c) { return {c.paths.artifacts_dir}; }

inline TokenizerOptions tokenizer_options(const AppConfig& c) { return {c.tokenizer.collapse_breaks}; }

inline std::vector<std::vector<std::string>> tokenize_documents(const std::vector<TransliteratedDocument>& docs,
                                                                const TokenizerOptions& opts)
{
    std::vector<std::vector<std::string>> out;
    for (const auto& d : docs) {
        for (auto& l : tokenize_document(d, opts)) {
            out.push_back(std::move(l));
        }
    }
    return out;
}

inline std::vector<EncodedSequence> encode_lines(const std::vector<std::vector<std::string>>& lines, const Vocabulary& vocab)
{
    std::vector<EncodedSequence> out;
    out.reserve(lines.size());
    for (const auto& l : lines) {
        out.push_back(encode(l, vocab));
    }
    return out;
}

inline Vocabulary load_vocabulary(const AppConfig& c)
{
    const auto path = artifacts(c).vocab();
    if (!std::filesystem::exists(path)) {
        throw Error(ErrorCode::Io, "missing vocabulary " + path.string() + " (run ingest first)");
    }
    return Vocabulary::parse(read_file(path));
}

struct Datasets {
    Vocabulary vocab;
    std::vector<EncodedSequence> train;  // train split minus the validation carve-out
    std::vector<EncodedSequence> valid;
    std::vector<EncodedSequence> test;
};

/// The validation documents are drawn from the train split with seed + 1.
/// A train split too small to spare a document validates on itself.
inline Datasets load_datasets(const AppConfig& c)
{
    const auto paths = artifacts(c);
    Datasets d;
    d.vocab = load_vocabulary(c);
    const auto archive = read_archive(paths.corpus());
    const auto split = archive.split();
    if (split.train.empty()) {
        throw Error(ErrorCode::EmptyTrainingStream, "the train split is empty");
    }
    const auto opts = tokenizer_options(c);
    auto inner = split_corpus(split.train, c.split.valid_fraction, archive.manifest.seed + 1);
    if (inner.train.empty() || inner.test.empty()) {
        inner.train = split.train;
        inner.test = split.train;
    }
    d.train = encode_lines(tokenize_documents(inner.train, opts), d.vocab);
    d.valid = encode_lines(tokenize_documents(inner.test, opts), d.vocab);
    d.test = encode_lines(tokenize_documents(split.test, opts), d.vocab);
    return d;
}

// ---------------------------------------------------------------------------
// Pipeline commands

struct IngestSummary {
    std::size_t documents = 0;
    std::size_t train_documents = 0;
    std::size_t test_documents = 0;
    std::size_t vocab_size = 0;
    CorpusStats stats;
};

namespace detail {

inline IngestSummary write_corpus(const AppConfig& c, const std::vector<TransliteratedDocument>& docs)
{
    const auto paths = artifacts(c);
    const auto manifest = make_manifest(docs, c.split.test_fraction, c.split.seed);
    write_archive(paths.corpus(), docs, manifest);
    const auto opts = tokenizer_options(c);
    std::vector<TransliteratedDocument> train;
    for (const auto& d : docs) {
        if (!manifest.is_test.at(d.doc_id)) {
            train.push_back(d);
        }
    }
    if (train.empty()) {
        throw Error(ErrorCode::EmptyTrainingStream, "the train split is empty");
    }
    const auto vocab = build_vocabulary(flatten(tokenize_documents(train, opts)), c.tokenizer.min_count);
    write_file(paths.vocab(), vocab.serialize());
    IngestSummary s;
    s.documents = docs.size();
    s.train_documents = train.size();
    s.test_documents = docs.size() - train.size();
    s.vocab_size = vocab.size();
    s.stats = corpus_stats(docs.size(), flatten(tokenize_documents(docs, opts)));
    return s;
}

}  // namespace detail

/// Reads the HTML corpus (or generates the synthetic one), writes the
/// archive with its split manifest and the train-split vocabulary.
inline IngestSummary cmd_ingest(const AppConfig& c, const std::optional<SyntheticOptions>& synthetic = std::nullopt)
{
    std::vector<TransliteratedDocument> docs;
    if (synthetic) {
        docs = generate_synthetic_corpus(*synthetic);
    } else {
        if (!std::filesystem::is_directory(c.paths.corpus_dir)) {
            throw Error(ErrorCode::Io, "corpus directory does not exist: " + c.paths.corpus_dir);
        }
        docs = ingest_directory(c.paths.corpus_dir);
        if (docs.empty()) {
            throw Error(ErrorCode::EmptyDocument, "no .html files in " + c.paths.corpus_dir);
        }
    }
    return detail::write_corpus(c, docs);
}

/// Re-assigns an existing archive with the configured fraction and seed.
inline IngestSummary cmd_split(const AppConfig& c)
{
    const auto paths = artifacts(c);
    if (!std::filesystem::exists(paths.corpus() / "manifest.tsv")) {
        throw Error(ErrorCode::Io, "no archive under " + paths.corpus().string() + " (run ingest first)");
    }
    auto archive = read_archive(paths.corpus());
    std::filesystem::remove_all(paths.corpus());
    return detail::write_corpus(c, archive.documents);
}

struct StatsReport {
    CorpusStats all;
    CorpusStats train;
    CorpusStats test;
};

inline StatsReport cmd_stats(const AppConfig& c)
{
    const auto archive = read_archive(artifacts(c).corpus());
    const auto split = archive.split();
    const auto opts = tokenizer_options(c);
    StatsReport r;
    r.all = corpus_stats(archive.documents.size(), flatten(tokenize_documents(archive.documents, opts)));
    r.train = corpus_stats(split.train.size(), flatten(tokenize_documents(split.train, opts)));
    r.test = corpus_stats(split.test.size(), flatten(tokenize_documents(split.test, opts)));
    return r;
}

/// The n-gram model has no use for a validation set and counts the whole
/// train split.
inline NGramModel cmd_train_ngram(const AppConfig& c)
{
    const auto d = load_datasets(c);
    std::vector<EncodedSequence> all = d.train;
    if (d.valid != d.train) {
        all.insert(all.end(), d.valid.begin(), d.valid.end());
    }
    auto m = fit_ngram(all, c.ngram.n, c.ngram.alpha, d.vocab.size(), c.ngram.smoothing);
    m.set_vocab_hash(d.vocab.hash());
    write_file(artifacts(c).ngram(), m.serialize());
    return m;
}

inline std::string render_train_log(const TrainLog& log)
{
    std::string out = "epoch\ttrain_nll\tvalid_nll\twall_seconds\n";
    for (const auto& e : log.epochs) {
        out += std::to_string(e.epoch) + "\t" + format_double(e.train_nll) + "\t" + format_double(e.valid_nll) + "\t" +
               format_double(e.wall_seconds) + "\n";
    }
    out += "# best_epoch\t" + std::to_string(log.best_epoch) + "\n";
    return out;
}

inline TrainResult cmd_train_lstm(const AppConfig& c, const EpochCallback& on_epoch = {})
{
    const auto d = load_datasets(c);
    LmConfig cfg = c.lstm;
    cfg.vocab_size = d.vocab.size();
    auto result = train(d.train, d.valid, cfg, on_epoch);
    result.model.set_vocab_hash(d.vocab.hash());
    const auto paths = artifacts(c);
    write_file(paths.lstm(), save_checkpoint(result.model));
    write_file(paths.train_log(), render_train_log(result.log));
    return result;
}

/// A model loaded for evaluation or serving, checked against the vocabulary.
struct LoadedModel {
    ModelKind kind = ModelKind::Lstm;
    std::unique_ptr<NGramModel> ngram;
    std::unique_ptr<LstmModel> lstm;
    std::string model_id;
    std::uint64_t checkpoint_hash = 0;

    const LanguageModel& lm() const
    {
        if (ngram) return *ngram;
        return *lstm;
    }

    Json config_echo() const
    {
        if (ngram) {
            return Json{{"n", ngram->order()}, {"alpha", ngram->alpha()}, {"smoothing", detail::smoothing_name(ngram->smoothing())}};
        }
        return lm_config_to_json(lstm->config());
    }
};

inline LoadedModel load_model(const AppConfig& c, ModelKind kind, const Vocabulary& vocab)
{
    const auto path = artifacts(c).model(kind);
    if (!std::filesystem::exists(path)) {
        throw Error(ErrorCode::Io, "missing model file " + path.string());
    }
    const auto bytes = read_file(path);
    LoadedModel m;
    m.kind = kind;
    m.checkpoint_hash = fnv1a64(bytes);
    m.model_id = std::string(to_string(kind)) + "-" + hex64(m.checkpoint_hash).substr(0, 12);
    if (kind == ModelKind::NGram) {
        m.ngram = std::make_unique<NGramModel>(NGramModel::parse(bytes, c.ngram.smoothing));
        if (m.ngram->vocab_hash() != vocab.hash() || m.ngram->vocab_size() != vocab.size()) {
            throw Error(ErrorCode::VocabHashMismatch, "n-gram model was built with a different vocabulary");
        }
    } else {
        m.lstm = std::make_unique<LstmModel>(load_checkpoint(bytes, vocab.hash()));
        if (m.lstm->vocab_size() != vocab.size()) {
            throw Error(ErrorCode::VocabHashMismatch, "checkpoint vocabulary size disagrees with the vocabulary");
        }
    }
    return m;
}

inline EvalReport cmd_eval_perplexity(const AppConfig& c, ModelKind kind)
{
    const auto d = load_datasets(c);
    const auto m = load_model(c, kind, d.vocab);
    return eval_perplexity(m.lm(), d.test, std::string(to_string(kind)));
}

/// One report per completion mode.
inline std::vector<EvalReport> cmd_eval_masked(const AppConfig& c, ModelKind kind)
{
    const auto d = load_datasets(c);
    const auto m = load_model(c, kind, d.vocab);
    std::vector<EvalReport> out;
    for (auto mode : {CompletionMode::Start, CompletionMode::Full}) {
        const Ranker ranker = m.ngram ? ngram_ranker(*m.ngram, mode) : lm_ranker(*m.lstm, mode, c.eval.pool_size);
        const auto label = std::string(to_string(kind)) + " " + std::string(to_string(mode));
        out.push_back(eval_masked(ranker, d.test, c.eval.mask_index, c.eval.min_len, label).report);
    }
    return out;
}

inline McqResult cmd_eval_mcq(const AppConfig& c, ModelKind kind, const std::filesystem::path& questions)
{
    const auto vocab = load_vocabulary(c);
    const auto m = load_model(c, kind, vocab);
    const auto qs = parse_mcq(read_file(questions), vocab);
    return eval_mcq(m.lm(), qs, c.eval.mcq_per_token, std::string(to_string(kind)));
}

// ---------------------------------------------------------------------------
// Completion and the JSON service

struct CompletionCandidate {
    std::string token;
    double log_score = 0.0;
    std::size_t rank = 0;
};

struct CompletionResponse {
    std::vector<CompletionCandidate> candidates;
    CompletionMode mode = CompletionMode::Start;
    std::string model_id;
    std::int64_t elapsed_ms = 0;
};

inline Json to_json(const CompletionResponse& r)
{
    Json cands = Json::array();
    for (const auto& c : r.candidates) {
        cands.push_back({{"token", c.token}, {"log_score", c.log_score}, {"rank", c.rank}});
    }
    return Json{{"candidates", cands}, {"mode", to_string(r.mode)}, {"model_id", r.model_id}, {"elapsed_ms", r.elapsed_ms}};
}

inline CompletionMode parse_completion_mode(std::string_view s)
{
    if (s == "start") return CompletionMode::Start;
    if (s == "full") return CompletionMode::Full;
    throw Error(ErrorCode::InvalidConfig, "mode must be start or full");
}

inline CompletionResponse complete(const LoadedModel& m, const Vocabulary& vocab, std::span<const std::string> left,
                                   std::span<const std::string> right, CompletionMode mode, std::size_t k,
                                   std::size_t pool_size)
{
    const auto t0 = std::chrono::steady_clock::now();
    if (k < 1) {
        throw Error(ErrorCode::InvalidConfig, "k must be >= 1");
    }
    const auto l = encode(left, vocab);
    const auto r = encode(right, vocab);
    RankedCandidates ranked;
    if (m.ngram) {
        ranked = m.ngram->complete(l, r, mode, k);
    } else {
        CompletionQuery q;
        q.left = l;
        q.right = r;
        q.mode = mode;
        q.k = k;
        q.pool_size = std::max(k, std::min(pool_size, m.lm().vocab_size()));
        ranked = rank(m.lm(), q);
    }
    CompletionResponse out;
    out.mode = mode;
    out.model_id = m.model_id;
    for (const auto& e : ranked.entries) {
        out.candidates.push_back({vocab.token(e.token_id), e.log_score, e.rank});
    }
    out.elapsed_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

struct Reply {
    int status = 200;
    Json body;
};

/// Stateless request handlers over one immutable model; only the request
/// counter changes.
class Service {
public:
    Service(AppConfig config, Vocabulary vocab, LoadedModel model)
        : config_(std::move(config)), vocab_(std::move(vocab)), model_(std::move(model))
    {
    }

    const LoadedModel& model() const noexcept { return model_; }
    const Vocabulary& vocab() const noexcept { return vocab_; }
    std::uint64_t requests() const noexcept { return requests_.load(); }

    Reply handle(std::string_view method, std::string_view path, std::string_view body) const
    {
        ++requests_;
        try {
            if (method == "GET" && path == "/health") return health();
            if (method == "GET" && path == "/model") return model_info();
            if (method == "POST" && path == "/tokenize") return tokenize(parse_body(body));
            if (method == "POST" && path == "/complete") return complete(parse_body(body));
            if (method == "POST" && path == "/score") return score(parse_body(body));
            return {404, {{"error", "no route for " + std::string(method) + " " + std::string(path)}}};
        } catch (const Error& e) {
            return {400, {{"error", e.what()}}};
        } catch (const Json::exception& e) {
            return {400, {{"error", std::string("bad request: ") + e.what()}}};
        }
    }

    Reply health() const { return {200, {{"status", "ok"}}}; }

    Reply model_info() const
    {
        return {200,
                {{"model_id", model_.model_id},
                 {"kind", to_string(model_.kind)},
                 {"vocab_size", vocab_.size()},
                 {"vocab_hash", hex64(vocab_.hash())},
                 {"checkpoint_hash", hex64(model_.checkpoint_hash)},
                 {"config", model_.config_echo()},
                 {"requests", requests_.load()}}};
    }

    Reply tokenize(const Json& req) const
    {
        std::string text;
        std::string format = "html";
        detail::ObjectReader r(req, "request");
        r.get("text", text);
        r.get("format", format);
        r.finish();
        require(req, "text");
        TransliteratedDocument doc;
        if (format == "html") {
            doc = extract_document(text, "request");
        } else if (format == "text") {
            doc = parse_text(text, "request", "");
        } else {
            throw Error(ErrorCode::InvalidConfig, "format must be html or text");
        }
        return {200, {{"tokens", flatten(tokenize_document(doc, tokenizer_options(config_)))}}};
    }

    Reply complete(const Json& req) const
    {
        std::vector<std::string> left;
        std::vector<std::string> right;
        std::string mode = "start";
        std::size_t k = 10;
        detail::ObjectReader r(req, "request");
        r.get("left", left);
        r.get("right", right);
        r.get("mode", mode);
        r.get("k", k);
        r.finish();
        require(req, "left");
        const auto resp = akr::complete(model_, vocab_, left, right, parse_completion_mode(mode), k, config_.eval.pool_size);
        return {200, to_json(resp)};
    }

    Reply score(const Json& req) const
    {
        std::vector<std::string> tokens;
        detail::ObjectReader r(req, "request");
        r.get("tokens", tokens);
        r.finish();
        if (tokens.empty()) {
            throw Error(ErrorCode::InvalidConfig, "tokens must be a non-empty list");
        }
        const auto ids = encode(tokens, vocab_);
        const double ll = model_.lm().score_sequence(ids);
        const double nll = -ll / static_cast<double>(ids.size());
        return {200,
                {{"log_likelihood", ll},
                 {"mean_nll", nll},
                 {"perplexity_e", perplexity(nll)},
                 {"perplexity_2", perplexity_base2(nll)}}};
    }

private:
    static Json parse_body(std::string_view body)
    {
        try {
            return Json::parse(body);
        } catch (const Json::parse_error& e) {
            throw Error(ErrorCode::BadFormat, std::string("malformed JSON body: ") + e.what());
        }
    }

    static void require(const Json& req, const char* key)
    {
        if (!req.contains(key)) {
            throw Error(ErrorCode::InvalidConfig, std::string("missing field '") + key + "'");
        }
    }

    AppConfig config_;
    Vocabulary vocab_;
    LoadedModel model_;
    mutable std::atomic<std::uint64_t> requests_{0};
};

}  // namespace akr
