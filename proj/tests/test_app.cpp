#include <gtest/gtest.h>

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "akr/app.hpp"
#include "akr/http.hpp"

using namespace akr;
namespace fs = std::filesystem;

extern char** environ;

namespace {

const fs::path kSource = AKR_SOURCE_DIR;

fs::path make_temp_dir(const std::string& tag)
{
    std::string tmpl = (fs::temp_directory_path() / ("akr-" + tag + "-XXXXXX")).string();
    if (mkdtemp(tmpl.data()) == nullptr) {
        throw std::runtime_error("mkdtemp failed");
    }
    return tmpl;
}

struct RunResult {
    int status = -1;
    std::string out;  // stdout and stderr
};

RunResult run_tool(const std::string& args)
{
    const std::string cmd = std::string(AKR_TOOL) + " " + args + " 2>&1";
    RunResult r;
    FILE* p = popen(cmd.c_str(), "r");
    if (p == nullptr) {
        return r;
    }
    char buf[4096];
    std::size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) {
        r.out.append(buf, n);
    }
    const int st = pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::map<std::string, std::string> tree_contents(const fs::path& root)
{
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) {
            out[fs::relative(e.path(), root).string()] = read_file(e.path());
        }
    }
    return out;
}

AppConfig small_config(const fs::path& artifacts_dir)
{
    AppConfig c;
    c.paths.artifacts_dir = artifacts_dir.string();
    c.paths.corpus_dir = (kSource / "data" / "sample").string();
    c.tokenizer.min_count = 2;
    c.lstm.embed_dim = 8;
    c.lstm.hidden_dim = 16;
    c.lstm.num_layers = 1;
    c.lstm.batch_size = 4;
    c.lstm.bptt_len = 12;
    c.lstm.max_epochs = 2;
    c.lstm.dropout_rate = 0.0;
    c.lstm.learning_rate = 3e-3;
    c.eval.pool_size = 20;
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, RoundTrip)
{
    AppConfig c;
    c.split.seed = 7;
    c.lstm.hidden_dim = 33;
    c.lstm.cell = CellType::Rnn;
    c.ngram.n = 3;
    c.ngram.smoothing = NGramSmoothing::UnigramBackoff;
    c.server.model = ModelKind::NGram;
    c.eval.mcq_per_token = true;
    const auto text = render_config(c);
    EXPECT_EQ(render_config(parse_config(text)), text);
    EXPECT_EQ(parse_config(text).lstm, c.lstm);
}

TEST(Config, MissingKeysKeepDefaults)
{
    const auto c = parse_config(R"({"split": {"seed": 9}, "lstm": {"hidden_dim": 12}})");
    EXPECT_EQ(c.split.seed, 9u);
    EXPECT_EQ(c.split.test_fraction, 0.1);
    EXPECT_EQ(c.lstm.hidden_dim, 12u);
    EXPECT_EQ(c.lstm.embed_dim, LmConfig{}.embed_dim);
    EXPECT_EQ(c.ngram.n, 2u);
    EXPECT_EQ(render_config(parse_config("{}")), render_config(AppConfig{}));
}

TEST(Config, RejectsUnknownAndMistyped)
{
    for (const char* bad : {R"({"bogus": 1})", R"({"lstm": {"hiden_dim": 3}})", R"({"split": {"seed": -1}})",
                            R"({"split": {"seed": "x"}})", R"({"server": {"model": "gpt"}})",
                            R"({"ngram": {"smoothing": "kneser"}})", R"({"paths": 3})", "[1,2]", "{", ""}) {
        EXPECT_THROW(parse_config(bad), Error) << bad;
    }
}

// ---------------------------------------------------------------------------
// Pipeline over a small synthetic corpus, shared by the tests below

class Pipeline : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        dir_ = new fs::path(make_temp_dir("pipeline"));
        config_ = new AppConfig(small_config(*dir_ / "art"));
        SyntheticOptions s;
        s.target_tokens = 4000;
        s.seed = 5;
        ingest_ = new IngestSummary(cmd_ingest(*config_, s));
        ngram_ = new NGramModel(cmd_train_ngram(*config_));
        cmd_train_lstm(*config_);
    }

    static void TearDownTestSuite()
    {
        fs::remove_all(*dir_);
        delete ngram_;
        delete ingest_;
        delete config_;
        delete dir_;
    }

    static Service service(ModelKind kind)
    {
        auto vocab = load_vocabulary(*config_);
        auto model = load_model(*config_, kind, vocab);
        return Service(*config_, std::move(vocab), std::move(model));
    }

    static inline fs::path* dir_ = nullptr;
    static inline AppConfig* config_ = nullptr;
    static inline IngestSummary* ingest_ = nullptr;
    static inline NGramModel* ngram_ = nullptr;
};

TEST_F(Pipeline, IngestWroteArchiveAndVocabulary)
{
    const auto paths = artifacts(*config_);
    EXPECT_TRUE(fs::exists(paths.corpus() / "manifest.tsv"));
    EXPECT_TRUE(fs::exists(paths.vocab()));
    EXPECT_GT(ingest_->documents, 5u);
    EXPECT_EQ(ingest_->documents, ingest_->train_documents + ingest_->test_documents);
    EXPECT_GT(ingest_->stats.total_word_count, 2000u);  // words only, markers and terminators excluded
    const auto archive = read_archive(paths.corpus());
    EXPECT_EQ(archive.documents.size(), ingest_->documents);
    EXPECT_EQ(load_vocabulary(*config_).size(), ingest_->vocab_size);
}

TEST_F(Pipeline, NGramReloadReproducesCounts)
{
    const auto vocab = load_vocabulary(*config_);
    const auto m = load_model(*config_, ModelKind::NGram, vocab);
    ASSERT_TRUE(m.ngram);
    EXPECT_EQ(m.ngram->counts(), ngram_->counts());
    EXPECT_EQ(m.ngram->vocab_hash(), vocab.hash());
    EXPECT_EQ(m.model_id.rfind("ngram-", 0), 0u);
    EXPECT_EQ(m.model_id.size(), 6u + 12u);
}

TEST_F(Pipeline, LstmTrainingIsReproducible)
{
    const auto before = read_file(artifacts(*config_).lstm());
    auto other = *config_;
    const auto dir = make_temp_dir("repro");
    fs::copy(*dir_ / "art", dir / "art", fs::copy_options::recursive);
    other.paths.artifacts_dir = (dir / "art").string();
    cmd_train_lstm(other);
    EXPECT_EQ(read_file(artifacts(other).lstm()), before);
    EXPECT_TRUE(fs::exists(artifacts(other).train_log()));
    fs::remove_all(dir);
}

TEST_F(Pipeline, MissingVocabularyIsAnError)
{
    const auto dir = make_temp_dir("novocab");
    auto c = *config_;
    c.paths.artifacts_dir = dir.string();
    try {
        load_vocabulary(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Io);
    }
    fs::remove_all(dir);
}

TEST_F(Pipeline, ModelsRefuseAnotherVocabulary)
{
    const auto dir = make_temp_dir("mismatch");
    fs::copy(*dir_ / "art", dir / "art", fs::copy_options::recursive);
    auto c = *config_;
    c.paths.artifacts_dir = (dir / "art").string();
    auto tokens = load_vocabulary(*config_).tokens();
    tokens.push_back("zzz-extra");
    write_file(artifacts(c).vocab(), Vocabulary::from_tokens(tokens, 1).serialize());
    const auto vocab = load_vocabulary(c);
    for (auto kind : {ModelKind::NGram, ModelKind::Lstm}) {
        try {
            load_model(c, kind, vocab);
            FAIL() << to_string(kind);
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::VocabHashMismatch);
        }
    }
    fs::remove_all(dir);
}

TEST_F(Pipeline, EvaluationReports)
{
    for (auto kind : {ModelKind::NGram, ModelKind::Lstm}) {
        const auto ppl = cmd_eval_perplexity(*config_, kind);
        ASSERT_TRUE(ppl.perplexity && ppl.perplexity_2 && ppl.mean_nll);
        EXPECT_NEAR(*ppl.perplexity, std::exp(*ppl.mean_nll), 1e-9);
        EXPECT_NEAR(*ppl.perplexity_2, std::exp2(*ppl.mean_nll), 1e-9);
        EXPECT_GT(*ppl.perplexity, 1.0);

        const auto masked = cmd_eval_masked(*config_, kind);
        ASSERT_EQ(masked.size(), 2u);
        for (const auto& r : masked) {
            ASSERT_TRUE(r.mrr.has_value());
            EXPECT_GT(r.n_items, 0u);
            EXPECT_LE(r.hit_at.at(1), r.hit_at.at(5));
            EXPECT_LE(r.hit_at.at(5), r.hit_at.at(10));
        }

        const auto mcq = cmd_eval_mcq(*config_, kind, kSource / "data" / "sample" / "mcq.tsv");
        EXPECT_EQ(mcq.report.n_items, 2u);
        ASSERT_TRUE(mcq.report.accuracy.has_value());
    }
}

TEST_F(Pipeline, ServiceHandlers)
{
    for (auto kind : {ModelKind::NGram, ModelKind::Lstm}) {
        const auto svc = service(kind);
        const auto health = svc.handle("GET", "/health", "");
        EXPECT_EQ(health.status, 200);
        EXPECT_EQ(health.body["status"], "ok");

        const auto model = svc.handle("GET", "/model", "");
        EXPECT_EQ(model.status, 200);
        EXPECT_EQ(model.body["kind"], std::string(to_string(kind)));
        EXPECT_EQ(model.body["vocab_size"], svc.vocab().size());
        EXPECT_EQ(model.body["model_id"], svc.model().model_id);
        EXPECT_TRUE(model.body["config"].is_object());

        const auto tok = svc.handle(
            "POST", "/tokenize",
            R"({"text": "<p>2 ma-na kù.babbar <i>šá</i> <sup>I</sup>ba-la-ṭu a <i>šú šá</i> <sup>I</sup>mu-ra-nu</p>"})");
        ASSERT_EQ(tok.status, 200) << tok.body.dump();
        const std::vector<std::string> want{"NUM", "mana", "kùbabbar", "<i>", "šá", "</i>", "NAME", "a",
                                            "<i>", "šú", "šá", "</i>", "NAME", "<EOS>"};
        EXPECT_EQ(tok.body["tokens"].get<std::vector<std::string>>(), want);
        const auto tok_text = svc.handle("POST", "/tokenize", R"({"text": "2 ma-na\n", "format": "text"})");
        EXPECT_EQ(tok_text.status, 200) << tok_text.body.dump();

        for (const char* mode : {"start", "full"}) {
            const Json req{{"left", {"NUM", "mana"}}, {"right", {"<EOS>"}}, {"mode", mode}, {"k", 5}};
            const auto r = svc.handle("POST", "/complete", req.dump());
            ASSERT_EQ(r.status, 200) << r.body.dump();
            const auto& c = r.body["candidates"];
            ASSERT_EQ(c.size(), 5u);
            for (std::size_t i = 0; i < c.size(); ++i) {
                EXPECT_EQ(c[i]["rank"], i + 1);
                if (i > 0) {
                    EXPECT_GE(c[i - 1]["log_score"].get<double>(), c[i]["log_score"].get<double>());
                }
                const auto token = c[i]["token"].get<std::string>();
                EXPECT_FALSE(is_completion_excluded(svc.vocab().id(token))) << token;
            }
            EXPECT_EQ(r.body["mode"], mode);
            EXPECT_EQ(r.body["model_id"], svc.model().model_id);
            EXPECT_TRUE(r.body.contains("elapsed_ms"));
        }

        const auto score = svc.handle("POST", "/score", R"({"tokens": ["NUM", "mana", "<EOS>"]})");
        ASSERT_EQ(score.status, 200);
        const double ll = score.body["log_likelihood"];
        EXPECT_LT(ll, 0.0);
        EXPECT_NEAR(score.body["mean_nll"].get<double>(), -ll / 3.0, 1e-12);
        EXPECT_NEAR(score.body["perplexity_e"].get<double>(), std::exp(-ll / 3.0), 1e-9);

        const std::pair<const char*, const char*> bad[] = {
            {"/complete", "{not json"},
            {"/complete", R"({"left": ["a"], "extra": 1})"},
            {"/complete", R"({"right": ["a"]})"},
            {"/complete", R"({"left": ["a"], "k": "five"})"},
            {"/complete", R"({"left": ["a"], "k": 0})"},
            {"/complete", R"({"left": ["a"], "mode": "middle"})"},
            {"/complete", "[]"},
            {"/score", R"({"tokens": []})"},
            {"/score", R"({"tokens": "NUM"})"},
            {"/tokenize", R"({"text": "x", "format": "pdf"})"},
            {"/tokenize", R"({})"},
        };
        for (const auto& [path, body] : bad) {
            const auto r = svc.handle("POST", path, body);
            EXPECT_EQ(r.status, 400) << path << " " << body;
            EXPECT_TRUE(r.body.contains("error"));
        }
        EXPECT_EQ(svc.handle("GET", "/nope", "").status, 404);
        EXPECT_EQ(svc.handle("GET", "/complete", "").status, 404);
        EXPECT_EQ(svc.requests(), 20u);
    }
}

TEST_F(Pipeline, CompletionMatchesLibraryRanking)
{
    const auto svc = service(ModelKind::Lstm);
    const std::vector<std::string> left{"NUM", "mana"};
    const std::vector<std::string> right{"<EOS>"};
    const auto resp = complete(svc.model(), svc.vocab(), left, right, CompletionMode::Full, 7, config_->eval.pool_size);
    CompletionQuery query;
    query.left = encode(left, svc.vocab());
    query.right = encode(right, svc.vocab());
    query.mode = CompletionMode::Full;
    query.pool_size = config_->eval.pool_size;
    query.k = 7;
    const auto direct = rank(svc.model().lm(), query);
    ASSERT_EQ(resp.candidates.size(), direct.entries.size());
    for (std::size_t i = 0; i < direct.entries.size(); ++i) {
        EXPECT_EQ(resp.candidates[i].token, svc.vocab().token(direct.entries[i].token_id));
    }
}

TEST_F(Pipeline, HttpRoundTrip)
{
    const auto svc = service(ModelKind::NGram);
    httplib::Server srv;
    mount(srv, svc);
    const int port = srv.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread t([&srv] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    httplib::Client cli("127.0.0.1", port);
    auto h = cli.Get("/health");
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 200);
    EXPECT_EQ(h->get_header_value("Access-Control-Allow-Origin"), "*");
    EXPECT_EQ(Json::parse(h->body)["status"], "ok");

    auto c = cli.Post("/complete", R"({"left": ["NUM", "mana"], "k": 3, "mode": "full"})", "application/json");
    ASSERT_TRUE(c);
    EXPECT_EQ(c->status, 200);
    EXPECT_EQ(Json::parse(c->body)["candidates"].size(), 3u);

    auto bad = cli.Post("/complete", "{oops", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);
    EXPECT_TRUE(Json::parse(bad->body).contains("error"));

    auto missing = cli.Get("/no/such/route");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 404);

    auto pre = cli.Options("/complete");
    ASSERT_TRUE(pre);
    EXPECT_EQ(pre->status, 204);
    EXPECT_NE(pre->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);

    srv.stop();
    t.join();
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, IngestSampleCorpusIsDeterministic)
{
    const auto dir = make_temp_dir("cli");
    const auto corpus = kSource / "data" / "sample";
    const auto a = run_tool("--corpus " + q(corpus) + " --artifacts " + q(dir / "a") + " ingest");
    ASSERT_EQ(a.status, 0) << a.out;
    EXPECT_NE(a.out.find("documents: 3"), std::string::npos) << a.out;
    const auto archive = read_archive(dir / "a" / "corpus");
    EXPECT_EQ(archive.documents.size(), 3u);

    const auto b = run_tool("--corpus " + q(corpus) + " --artifacts " + q(dir / "b") + " ingest");
    ASSERT_EQ(b.status, 0) << b.out;
    EXPECT_EQ(tree_contents(dir / "a"), tree_contents(dir / "b"));

    // a second run over the same artifacts leaves identical bytes
    const auto again = run_tool("--corpus " + q(corpus) + " --artifacts " + q(dir / "a") + " ingest");
    ASSERT_EQ(again.status, 0);
    EXPECT_EQ(tree_contents(dir / "a"), tree_contents(dir / "b"));

    const auto stats = run_tool("--artifacts " + q(dir / "a") + " --format machine stats");
    ASSERT_EQ(stats.status, 0) << stats.out;
    EXPECT_EQ(stats.out.rfind("part\tdocuments", 0), 0u);
    fs::remove_all(dir);
}

TEST(Cli, ErrorsExitNonZero)
{
    const auto dir = make_temp_dir("clierr");
    fs::create_directories(dir / "empty");
    const auto empty = run_tool("--corpus " + q(dir / "empty") + " --artifacts " + q(dir / "a") + " ingest");
    EXPECT_NE(empty.status, 0);
    EXPECT_NE(empty.out.find("error:"), std::string::npos);

    const auto missing = run_tool("--corpus " + q(dir / "missing") + " --artifacts " + q(dir / "a") + " ingest");
    EXPECT_NE(missing.status, 0);

    write_file(dir / "bad.json", R"({"lstm": {"hiden_dim": 3}})");
    const auto cfg = run_tool("--config " + q(dir / "bad.json") + " config");
    EXPECT_NE(cfg.status, 0);
    EXPECT_NE(cfg.out.find("hiden_dim"), std::string::npos) << cfg.out;

    const auto untrained = run_tool("--artifacts " + q(dir / "a") + " eval-perplexity --model ngram");
    EXPECT_NE(untrained.status, 0);

    EXPECT_NE(run_tool("frobnicate").status, 0);
    fs::remove_all(dir);
}

TEST(Cli, ConfigPrintsEffectiveValues)
{
    const auto r = run_tool("--seed 17 config");
    ASSERT_EQ(r.status, 0) << r.out;
    const auto c = parse_config(r.out);
    EXPECT_EQ(c.split.seed, 17u);
    EXPECT_EQ(c.lstm.seed, 17u);
}

TEST_F(Pipeline, CliEvaluateAndComplete)
{
    const std::string art = "--artifacts " + q(config_->paths.artifacts_dir) + " ";
    const auto ppl = run_tool(art + "--format machine eval-perplexity --model ngram");
    ASSERT_EQ(ppl.status, 0) << ppl.out;
    EXPECT_NE(ppl.out.find("perplexity_e\tperplexity_2"), std::string::npos);

    const auto ppl_text = run_tool(art + "eval-perplexity --model ngram");
    EXPECT_NE(ppl_text.out.find("perplexity_e:"), std::string::npos);
    EXPECT_NE(ppl_text.out.find("perplexity_2:"), std::string::npos);

    const auto masked = run_tool(art + "eval-masked --model ngram");
    ASSERT_EQ(masked.status, 0) << masked.out;
    EXPECT_NE(masked.out.find("mrr:"), std::string::npos);
    EXPECT_NE(masked.out.find("hit@10:"), std::string::npos);

    const auto mcq = run_tool(art + "eval-mcq --model ngram --questions " + q(kSource / "data" / "sample" / "mcq.tsv"));
    ASSERT_EQ(mcq.status, 0) << mcq.out;
    EXPECT_NE(mcq.out.find("accuracy:"), std::string::npos);

    const auto comp = run_tool(art + "--format machine complete --model ngram --left 'NUM mana' --mode full -k 4");
    ASSERT_EQ(comp.status, 0) << comp.out;
    EXPECT_EQ(split(comp.out, '\n').size(), 1u + 4u + 1u);  // header, rows, trailing newline
}

TEST_F(Pipeline, ServeAnswersAndStopsOnSigterm)
{
    int out_pipe[2];
    ASSERT_EQ(pipe(out_pipe), 0);
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, out_pipe[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&fa, out_pipe[0]);
    std::vector<std::string> args{AKR_TOOL, "--artifacts", config_->paths.artifacts_dir, "serve", "--port", "0", "--model", "ngram"};
    std::vector<char*> argv;
    for (auto& a : args) {
        argv.push_back(a.data());
    }
    argv.push_back(nullptr);
    pid_t pid = 0;
    ASSERT_EQ(posix_spawn(&pid, AKR_TOOL, &fa, nullptr, argv.data(), environ), 0);
    posix_spawn_file_actions_destroy(&fa);
    close(out_pipe[1]);

    // first line: "serving <id> on http://host:port"
    std::string line;
    char ch = 0;
    while (read(out_pipe[0], &ch, 1) == 1 && ch != '\n') {
        line += ch;
    }
    const auto colon = line.rfind(':');
    ASSERT_NE(colon, std::string::npos) << line;
    const int port = std::stoi(line.substr(colon + 1));

    httplib::Client cli("127.0.0.1", port);
    auto h = cli.Get("/model");
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 200);
    EXPECT_EQ(Json::parse(h->body)["kind"], "ngram");

    kill(pid, SIGTERM);
    int st = 0;
    waitpid(pid, &st, 0);
    EXPECT_TRUE(WIFEXITED(st));
    EXPECT_EQ(WEXITSTATUS(st), 0);
    std::string rest;
    while (read(out_pipe[0], &ch, 1) == 1) {
        rest += ch;
    }
    close(out_pipe[0]);
    EXPECT_NE(rest.find("stopped after"), std::string::npos) << rest;
}
