// akrestore: command-line front end for ingesting transliterations,
// training the n-gram and LSTM models, evaluating them and serving
// completions over HTTP.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <pthread.h>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "akr/app.hpp"
#include "akr/http.hpp"

namespace {

using namespace akr;

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string format = "text";
    std::string artifacts;
    std::string corpus;
};

AppConfig effective_config(const Globals& g)
{
    AppConfig c;
    if (!g.config_path.empty()) {
        if (!std::filesystem::exists(g.config_path)) {
            throw Error(ErrorCode::Io, "config file not found: " + g.config_path);
        }
        c = load_config(g.config_path);
    }
    if (g.seed) {
        c.split.seed = *g.seed;
        c.lstm.seed = *g.seed;
    }
    if (!g.artifacts.empty()) {
        c.paths.artifacts_dir = g.artifacts;
    }
    if (!g.corpus.empty()) {
        c.paths.corpus_dir = g.corpus;
    }
    return c;
}

bool machine(const Globals& g) { return g.format == "machine"; }

void print_ingest(const Globals& g, const IngestSummary& s)
{
    if (machine(g)) {
        std::cout << "documents\ttrain_documents\ttest_documents\tvocab_size\ttotal_words\tunique_words\n"
                  << s.documents << '\t' << s.train_documents << '\t' << s.test_documents << '\t' << s.vocab_size << '\t'
                  << s.stats.total_word_count << '\t' << s.stats.unique_word_count << '\n';
        return;
    }
    std::cout << "documents: " << s.documents << " (train " << s.train_documents << ", test " << s.test_documents << ")\n"
              << "tokens: " << s.stats.total_word_count << "\n"
              << "distinct tokens: " << s.stats.unique_word_count << "\n"
              << "vocabulary: " << s.vocab_size << "\n";
}

void print_stats(const Globals& g, const StatsReport& r)
{
    const std::pair<const char*, const CorpusStats*> rows[] = {{"all", &r.all}, {"train", &r.train}, {"test", &r.test}};
    if (machine(g)) {
        std::cout << "part\tdocuments\ttotal_words\tunique_words\tcount_once\tcount_twice\n";
        for (const auto& [name, s] : rows) {
            std::cout << name << '\t' << s->document_count << '\t' << s->total_word_count << '\t' << s->unique_word_count
                      << '\t' << s->count_once << '\t' << s->count_twice << '\n';
        }
        return;
    }
    for (const auto& [name, s] : rows) {
        std::cout << name << ": " << s->document_count << " documents, " << s->total_word_count << " words, "
                  << s->unique_word_count << " distinct, " << s->count_once << " seen once, " << s->count_twice
                  << " seen twice\n";
    }
}

void print_reports(const Globals& g, const std::vector<EvalReport>& reports)
{
    std::cout << (machine(g) ? render_report_machine(reports) : render_report_text(reports));
}

int serve(const AppConfig& c)
{
    // Block the shutdown signals before any server thread exists so that
    // only the waiter below receives them.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    auto vocab = load_vocabulary(c);
    auto model = load_model(c, c.server.model, vocab);
    const Service svc(c, std::move(vocab), std::move(model));
    httplib::Server srv;
    mount(srv, svc);

    int port = c.server.port;
    if (port == 0) {
        port = srv.bind_to_any_port(c.server.bind);
        if (port < 0) {
            port = 0;
        }
    } else if (!srv.bind_to_port(c.server.bind, port)) {
        port = 0;
    }
    if (port == 0) {
        std::cerr << "error: cannot bind " << c.server.bind << ":" << c.server.port << "\n";
        return 3;
    }
    std::cout << "serving " << svc.model().model_id << " on http://" << c.server.bind << ":" << port << std::endl;

    std::thread waiter([&srv, &signals] {
        int sig = 0;
        sigwait(&signals, &sig);
        srv.stop();
    });
    const bool clean = srv.listen_after_bind();
    if (waiter.joinable()) {
        // wake the waiter if the server stopped on its own
        pthread_kill(waiter.native_handle(), SIGTERM);
        waiter.join();
    }
    std::cout << "stopped after " << svc.requests() << " requests" << std::endl;
    return clean ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Restoration of missing words in transliterated archival texts"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "JSON configuration file");
    app.add_option("--seed", g.seed, "seed for the split and for training");
    app.add_option("--format", g.format, "report format")->check(CLI::IsMember({"text", "machine"}));
    app.add_option("--artifacts", g.artifacts, "artifacts directory (overrides the config)");
    app.add_option("--corpus", g.corpus, "HTML corpus directory (overrides the config)");

    std::string model_name = "lstm";
    auto add_model_flag = [&model_name](CLI::App* sub) {
        sub->add_option("--model", model_name, "ngram or lstm")->check(CLI::IsMember({"ngram", "lstm"}));
    };

    auto* show = app.add_subcommand("config", "print the effective configuration");

    auto* ingest = app.add_subcommand("ingest", "extract an HTML corpus into the archive and build the vocabulary");
    std::size_t synthetic_tokens = 0;
    ingest->add_option("--synthetic-tokens", synthetic_tokens, "generate a synthetic corpus of about this many tokens instead");

    auto* stats = app.add_subcommand("stats", "corpus statistics of the archive");

    auto* split = app.add_subcommand("split", "reassign the train/test split of the archive");
    std::optional<double> test_fraction;
    split->add_option("--test-fraction", test_fraction, "fraction of documents held out for testing");

    auto* train_ngram = app.add_subcommand("train-ngram", "fit the n-gram baseline");
    auto* train_lstm = app.add_subcommand("train-lstm", "train the LSTM language model");
    std::optional<std::size_t> epochs;
    train_lstm->add_option("--epochs", epochs, "maximum number of epochs");

    auto* eval_ppl = app.add_subcommand("eval-perplexity", "test-split perplexity");
    add_model_flag(eval_ppl);
    auto* eval_masked_cmd = app.add_subcommand("eval-masked", "masked-word MRR and hit@k on the test split");
    add_model_flag(eval_masked_cmd);
    auto* eval_mcq_cmd = app.add_subcommand("eval-mcq", "four-way multiple-choice accuracy");
    add_model_flag(eval_mcq_cmd);
    std::string questions;
    eval_mcq_cmd->add_option("--questions", questions, "question file")->required();

    auto* complete_cmd = app.add_subcommand("complete", "rank fillers for a one-word gap");
    add_model_flag(complete_cmd);
    std::string left;
    std::string right;
    std::string mode = "full";
    std::size_t k = 10;
    complete_cmd->add_option("--left", left, "tokens before the gap, space separated");
    complete_cmd->add_option("--right", right, "tokens after the gap, space separated");
    complete_cmd->add_option("--mode", mode, "start or full")->check(CLI::IsMember({"start", "full"}));
    complete_cmd->add_option("-k", k, "number of candidates");

    auto* serve_cmd = app.add_subcommand("serve", "serve completions over HTTP");
    std::optional<int> port;
    std::optional<std::string> bind;
    serve_cmd->add_option("--port", port, "port (0 picks a free one)");
    serve_cmd->add_option("--bind", bind, "bind address");
    serve_cmd->add_option("--model", model_name, "ngram or lstm")->check(CLI::IsMember({"ngram", "lstm"}));

    CLI11_PARSE(app, argc, argv);

    try {
        AppConfig c = effective_config(g);
        const ModelKind kind = parse_model_kind(model_name);

        if (show->parsed()) {
            std::cout << render_config(c);
        } else if (ingest->parsed()) {
            std::optional<SyntheticOptions> synth;
            if (synthetic_tokens > 0) {
                synth = SyntheticOptions{};
                synth->target_tokens = synthetic_tokens;
                if (g.seed) {
                    synth->seed = *g.seed;
                }
            }
            print_ingest(g, cmd_ingest(c, synth));
        } else if (stats->parsed()) {
            print_stats(g, cmd_stats(c));
        } else if (split->parsed()) {
            if (test_fraction) {
                c.split.test_fraction = *test_fraction;
            }
            print_ingest(g, cmd_split(c));
        } else if (train_ngram->parsed()) {
            const auto m = cmd_train_ngram(c);
            std::cout << "wrote " << artifacts(c).ngram().string() << " (" << m.counts().size() << " contexts)\n";
        } else if (train_lstm->parsed()) {
            if (epochs) {
                c.lstm.max_epochs = *epochs;
            }
            if (machine(g)) {
                std::cout << "epoch\ttrain_nll\tvalid_nll\twall_seconds\n";
            }
            const auto r = cmd_train_lstm(c, [&g](const EpochLog& e) {
                if (machine(g)) {
                    std::cout << e.epoch << '\t' << format_double(e.train_nll) << '\t' << format_double(e.valid_nll) << '\t'
                              << format_double(e.wall_seconds) << std::endl;
                } else {
                    std::printf("epoch %zu  train %.4f  valid %.4f  (%.1fs)\n", e.epoch, e.train_nll, e.valid_nll, e.wall_seconds);
                    std::fflush(stdout);
                }
            });
            std::cout << (machine(g) ? "# best_epoch\t" : "best epoch: ") << r.log.best_epoch << "\n";
            if (!machine(g)) {
                std::cout << "wrote " << artifacts(c).lstm().string() << "\n";
            }
        } else if (eval_ppl->parsed()) {
            print_reports(g, {cmd_eval_perplexity(c, kind)});
        } else if (eval_masked_cmd->parsed()) {
            print_reports(g, cmd_eval_masked(c, kind));
        } else if (eval_mcq_cmd->parsed()) {
            const auto r = cmd_eval_mcq(c, kind, questions);
            print_reports(g, {r.report});
            if (!machine(g)) {
                for (const auto& [label, n] : r.errors_by_label) {
                    std::cout << "errors (" << to_string(label) << "): " << n << "\n";
                }
            }
        } else if (complete_cmd->parsed()) {
            const auto vocab = load_vocabulary(c);
            const auto m = load_model(c, kind, vocab);
            const auto l = split_ws(left);
            const auto r = split_ws(right);
            const auto resp = complete(m, vocab, l, r, parse_completion_mode(mode), k, c.eval.pool_size);
            if (machine(g)) {
                std::cout << "rank\ttoken\tlog_score\n";
            }
            for (const auto& cand : resp.candidates) {
                if (machine(g)) {
                    std::cout << cand.rank << '\t' << cand.token << '\t' << format_double(cand.log_score) << '\n';
                } else {
                    std::printf("%3zu  %-24s %10.4f\n", cand.rank, cand.token.c_str(), cand.log_score);
                }
            }
        } else if (serve_cmd->parsed()) {
            if (port) {
                c.server.port = *port;
            }
            if (bind) {
                c.server.bind = *bind;
            }
            c.server.model = kind;
            return serve(c);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
