#include "cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "icubert/errors.hpp"
#include "icubert/gradcheck.hpp"
#include "icubert/io.hpp"
#include "icubert/synth.hpp"
#include "icubert/text_embed.hpp"
#include "icubert/train.hpp"

namespace icubert::cli {

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorpusOptions {
    std::string events;
    std::vector<double> ratios{kDefaultRatios.begin(), kDefaultRatios.end()};
    std::uint64_t split_seed = 1;
    int window_minutes = kDefaultWindowMinutes;
    int max_seq_len = kDefaultMaxSeqLen;

    void add(CLI::App* app) {
        app->add_option("--events", events, "Event-line file")->required();
        app->add_option("--ratios", ratios, "Train,val,test patient ratios")->delimiter(',')->expected(3);
        app->add_option("--split-seed", split_seed, "Seed of the patient split");
        app->add_option("--window-minutes", window_minutes, "Window length W in minutes");
        app->add_option("--max-seq-len", max_seq_len, "Maximum tokens per window");
    }

    TokenizerConfig tokenizer() const {
        TokenizerConfig t;
        t.window_minutes = window_minutes;
        t.max_seq_len = max_seq_len;
        return t;
    }

    Corpus load() const {
        return assign_splits(parse_events(events), {ratios[0], ratios[1], ratios[2]}, split_seed);
    }
};

struct EmbedOptions {
    int pretrained_dim = kDefaultPretrainedDim;
    std::uint64_t embed_seed = 0;
    std::string embed_cache;
    bool stub_fallback = false;

    void add(CLI::App* app) {
        app->add_option("--pretrained-dim", pretrained_dim, "Stub text-embedding size");
        app->add_option("--embed-seed", embed_seed, "Stub text-embedding seed");
        app->add_option("--embed-cache", embed_cache, "Precomputed EHRV1 embedding cache");
        app->add_flag("--stub-fallback", stub_fallback, "Embed cache misses with the stub instead of failing");
    }

    std::shared_ptr<const EmbeddingProvider> provider() const {
        if (embed_cache.empty()) return std::make_shared<StubProvider>(pretrained_dim, embed_seed);
        int dim = 0;
        auto table = decode_embedding_cache(read_file(embed_cache), &dim);
        std::shared_ptr<const EmbeddingProvider> fallback;
        if (stub_fallback) fallback = std::make_shared<StubProvider>(dim, embed_seed);
        return std::make_shared<FileCacheProvider>(std::move(table), dim, fallback);
    }
};

struct TaskOptions {
    std::string labels;
    std::string task = "binary";
    std::vector<std::string> label_columns;
    int windows = 1;

    void add(CLI::App* app) {
        app->add_option("--labels", labels, "CSV of stay_id and targets")->required();
        app->add_option("--task", task, "binary, multilabel or regression");
        app->add_option("--label-columns", label_columns, "Target columns (default: label, target, or all)")
            ->delimiter(',');
        app->add_option("--windows", windows, "Leading windows averaged per stay");
    }

    TaskSpec spec() const {
        TaskSpec t;
        t.kind = parse_task_kind(task);
        t.name = task;
        t.windows_per_sample = windows;
        std::vector<std::string> cols = label_columns;
        if (cols.empty() && t.kind == TaskKind::binary) cols = {"label"};
        if (cols.empty() && t.kind == TaskKind::regression) cols = {"target"};
        t.labels = read_labels(labels, cols);
        t.outputs = t.labels.empty() ? static_cast<int>(std::max<std::size_t>(cols.size(), 1))
                                     : static_cast<int>(t.labels.begin()->second.size());
        return t;
    }
};

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw UsageError("unknown split '" + s + "'");
}

void log_config(CLI::App* app, std::ostream& err) {
    std::istringstream lines(app->config_to_str(true, false));
    std::string line;
    err << "# " << app->get_name() << " configuration\n";
    while (std::getline(lines, line)) {
        if (!line.empty()) err << "#   " << line << "\n";
    }
}

std::string with_default(const std::string& value, const std::string& base, const std::string& suffix) {
    return value.empty() ? base + suffix : value;
}

// Injects config-file keys that were not given as flags.
std::vector<std::string> merge_config(std::vector<std::string> args, const std::string& path) {
    const auto entries = read_config_file(path);
    for (const auto& [key, value] : entries) {
        const std::string flag = "--" + key;
        bool given = false;
        for (const auto& a : args) {
            if (a == flag || a.rfind(flag + "=", 0) == 0) given = true;
        }
        if (!given) args.push_back(flag + "=" + value);
    }
    return args;
}

}  // namespace

std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io_error, "cannot open config file " + path);
    std::map<std::string, std::string> out;
    std::string line;
    int line_no = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
        }
        std::string key = trim(line.substr(0, eq));
        if (key.rfind("--", 0) == 0) key.erase(0, 2);
        if (key.empty() || key == "config") throw UsageError(path + ":" + std::to_string(line_no) + ": invalid key");
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Quadruplet-token encoder for clinical event streams", "icubert"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    std::string config_path;
    int threads = 1;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value file; explicit flags take precedence");
        sub->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
    };

    // synth
    GeneratorSpec gen;
    std::uint64_t synth_seed = 1;
    double stay_hours_min = 24.0;
    double stay_hours_max = 24.0;
    std::string synth_out;
    std::string synth_labels;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic event-line corpus");
    common(synth);
    synth->add_option("--patients", gen.patients, "Patients");
    synth->add_option("--features", gen.features, "Dynamic features");
    synth->add_option("--rate", gen.rate, "Mean events per feature per minute");
    synth->add_option("--signal-incidence", gen.signal_incidence, "Share of stays with the planted condition");
    synth->add_option("--categorical-fraction", gen.categorical_fraction, "Share of categorical features");
    synth->add_option("--stay-hours-min", stay_hours_min, "Shortest stay in hours");
    synth->add_option("--stay-hours-max", stay_hours_max, "Longest stay in hours");
    synth->add_option("--max-stays", gen.max_stays_per_patient, "Stays per patient drawn from 1..N");
    synth->add_option("--window-minutes", gen.window_minutes, "Window that bounds the planted event");
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--out", synth_out, "Event-line output")->required();
    synth->add_option("--labels-out", synth_labels, "Outcome CSV (default: <out>.labels.csv)");

    // ingest
    CorpusOptions ingest_corpus;
    EmbedOptions ingest_embed;
    std::string vocab_out;
    std::string cache_out;
    auto* ingest = app.add_subcommand("ingest", "Parse, split and summarise a corpus");
    common(ingest);
    ingest_corpus.add(ingest);
    ingest_embed.add(ingest);
    ingest->add_option("--vocab-out", vocab_out, "Write train-split vocabularies as JSON");
    ingest->add_option("--cache-out", cache_out, "Write an embedding cache for every vocabulary text");

    // pretrain
    CorpusOptions pre_corpus;
    EmbedOptions pre_embed;
    ModelConfig model;
    TrainConfig pre;
    std::string feature_norm = "masked";
    std::string pre_out;
    std::string pre_log;
    std::string pre_vocab;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Masked language-value pre-training");
    common(pretrain_cmd);
    pre_corpus.add(pretrain_cmd);
    pre_embed.add(pretrain_cmd);
    pretrain_cmd->add_option("--hidden", model.encoder.hidden, "Hidden size d");
    pretrain_cmd->add_option("--layers", model.encoder.layers, "Encoder layers");
    pretrain_cmd->add_option("--heads", model.encoder.heads, "Attention heads");
    pretrain_cmd->add_option("--ffn-dim", model.encoder.ffn_dim, "Feed-forward width");
    pretrain_cmd->add_option("--dropout", model.encoder.dropout, "Encoder and embedding dropout");
    pretrain_cmd->add_option("--epochs", pre.epochs, "Epochs");
    pretrain_cmd->add_option("--batch-size", pre.batch_size, "Windows per batch");
    pretrain_cmd->add_option("--lr", pre.lr, "Peak learning rate");
    pretrain_cmd->add_option("--weight-decay", pre.weight_decay, "Decoupled weight decay");
    pretrain_cmd->add_option("--warmup-epochs", pre.warmup_epochs, "Warmup epochs (-1: 40% of epochs)");
    pretrain_cmd->add_option("--alpha", pre.loss.alpha, "Continuous-value weight");
    pretrain_cmd->add_option("--beta", pre.loss.beta, "Value-term weight");
    pretrain_cmd->add_option("--feature-norm", feature_norm, "masked (per masked slot) or all (per token)");
    pretrain_cmd->add_option("--mask-rate", pre.masking.select, "Token selection probability");
    pretrain_cmd->add_option("--seed", pre.seed, "Training seed");
    pretrain_cmd->add_option("--out", pre_out, "Checkpoint output")->required();
    pretrain_cmd->add_option("--log", pre_log, "Loss CSV (default: <out>.log.csv)");
    pretrain_cmd->add_option("--vocab-out", pre_vocab, "Vocabulary JSON (default: <out>.vocab.json)");

    // finetune
    CorpusOptions ft_corpus;
    EmbedOptions ft_embed;
    TaskOptions ft_task;
    TrainConfig ft;
    ft.lr = 1e-3;
    ft.warmup_epochs = 0;
    std::string class_weight = "auto";
    double task_dropout = 0.5;
    std::string ft_checkpoint;
    std::string ft_vocab;
    std::string ft_out;
    std::string ft_results;
    auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a task head with cross-validation");
    common(finetune_cmd);
    ft_corpus.add(finetune_cmd);
    ft_embed.add(finetune_cmd);
    ft_task.add(finetune_cmd);
    finetune_cmd->add_option("--checkpoint", ft_checkpoint, "Pre-trained checkpoint")->required();
    finetune_cmd->add_option("--vocab", ft_vocab, "Vocabulary JSON (default: <checkpoint>.vocab.json)");
    finetune_cmd->add_option("--epochs", ft.epochs, "Maximum epochs per fold");
    finetune_cmd->add_option("--batch-size", ft.batch_size, "Stays per batch");
    finetune_cmd->add_option("--lr", ft.lr, "Peak learning rate");
    finetune_cmd->add_option("--weight-decay", ft.weight_decay, "Decoupled weight decay");
    finetune_cmd->add_option("--warmup-epochs", ft.warmup_epochs, "Warmup epochs (-1: 40% of epochs)");
    finetune_cmd->add_option("--patience", ft.patience, "Early-stopping patience in epochs");
    finetune_cmd->add_option("--folds", ft.folds, "Cross-validation folds (1: use the given split)");
    finetune_cmd->add_option("--unfrozen-layers", ft.unfrozen_layers, "Top encoder layers updated");
    finetune_cmd->add_flag("--unfreeze-embedder", ft.unfreeze_embedder, "Also update the embedder");
    finetune_cmd->add_option("--class-weight", class_weight, "Positive-class weight or auto (N_neg/N_pos)");
    finetune_cmd->add_option("--task-dropout", task_dropout, "Dropout before the task head");
    finetune_cmd->add_option("--seed", ft.seed, "Training seed");
    finetune_cmd->add_option("--out", ft_out, "Task checkpoint output (best fold)")->required();
    finetune_cmd->add_option("--results", ft_results, "Metric report (default: <out>.results.txt)");

    // evaluate
    CorpusOptions ev_corpus;
    EmbedOptions ev_embed;
    TaskOptions ev_task;
    std::string ev_checkpoint;
    std::string ev_vocab;
    std::string ev_split = "test";
    std::string ev_results;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a fine-tuned checkpoint on one split");
    common(evaluate_cmd);
    ev_corpus.add(evaluate_cmd);
    ev_embed.add(evaluate_cmd);
    ev_task.add(evaluate_cmd);
    evaluate_cmd->add_option("--checkpoint", ev_checkpoint, "Task checkpoint")->required();
    evaluate_cmd->add_option("--vocab", ev_vocab, "Vocabulary JSON")->required();
    evaluate_cmd->add_option("--split", ev_split, "train, val or test");
    evaluate_cmd->add_option("--results", ev_results, "Also write the report here");

    // gradcheck
    ModelCheckConfig check;
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
    common(gradcheck_cmd);
    gradcheck_cmd->add_option("--hidden", check.hidden, "Hidden size");
    gradcheck_cmd->add_option("--layers", check.layers, "Encoder layers");
    gradcheck_cmd->add_option("--heads", check.heads, "Attention heads");
    gradcheck_cmd->add_option("--ffn-dim", check.ffn_dim, "Feed-forward width");
    gradcheck_cmd->add_option("--max-seq-len", check.max_seq_len, "Tokens per window");
    gradcheck_cmd->add_option("--features", check.feature_vocab, "Feature vocabulary size");
    gradcheck_cmd->add_option("--values", check.value_vocab, "Categorical vocabulary size");
    gradcheck_cmd->add_option("--pretrained-dim", check.pretrained_dim, "Text-embedding size");
    gradcheck_cmd->add_option("--window-minutes", check.window_minutes, "Time and duration table rows");
    gradcheck_cmd->add_option("--windows", check.windows, "Windows in the checked batch");
    gradcheck_cmd->add_option("--alpha", check.alpha, "Continuous-value weight");
    gradcheck_cmd->add_option("--beta", check.beta, "Value-term weight");
    gradcheck_cmd->add_option("--epsilon", check.options.epsilon, "Central-difference step");
    gradcheck_cmd->add_option("--tolerance", check.options.tolerance, "Maximum relative error");
    gradcheck_cmd->add_option("--samples", check.options.samples_per_param, "Entries per parameter (0: all)");
    gradcheck_cmd->add_option("--seed", check.seed, "Seed");

    // inspect-cache
    std::string cache_path;
    int cache_limit = 10;
    auto* inspect = app.add_subcommand("inspect-cache", "Summarise an embedding cache file");
    common(inspect);
    inspect->add_option("--cache", cache_path, "EHRV1 file")->required();
    inspect->add_option("--limit", cache_limit, "Entries to list");

    std::vector<std::string> args = raw_args;
    if (!args.empty() && args.front().rfind('-', 0) != 0 && app.get_subcommand_no_throw(args.front()) == nullptr) {
        err << "usage error: unknown subcommand '" << args.front() << "'\n" << app.help();
        return 2;
    }
    try {
        for (std::size_t i = 0; i < args.size(); ++i) {
            if (args[i] == "--config" && i + 1 < args.size()) {
                args = merge_config(args, args[i + 1]);
                break;
            }
            if (args[i].rfind("--config=", 0) == 0) {
                args = merge_config(args, args[i].substr(9));
                break;
            }
        }
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            for (auto* sub : app.get_subcommands()) out << sub->help();
            return 0;
        }
        err << "usage error: " << e.what() << "\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 2;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << name(e.code()) << ": " << e.what() << "\n";
        return 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    log_config(sub, err);
    try {
        if (sub == synth) {
            gen.stay_minutes_min = static_cast<int>(std::lround(stay_hours_min * 60.0));
            gen.stay_minutes_max = static_cast<int>(std::lround(stay_hours_max * 60.0));
            const SyntheticCorpus corpus = generate_corpus(gen, synth_seed);
            write_file_atomic(synth_out, format_events(corpus.registries));
            const std::string labels_path = with_default(synth_labels, synth_out, ".labels.csv");
            write_file_atomic(labels_path, format_outcomes(corpus.outcomes));
            int positives = 0;
            for (const auto& o : corpus.outcomes) positives += o.label;
            out << "registries: " << corpus.registries.size() << "\nstays: " << corpus.outcomes.size()
                << "\npositive stays: " << positives << "\nevents: " << synth_out << "\nlabels: " << labels_path << "\n";
        } else if (sub == ingest) {
            const Corpus corpus = ingest_corpus.load();
            const Vocabularies vocab = build_vocabularies(corpus);
            const TokenizerConfig tok = ingest_corpus.tokenizer();
            out << "patients: " << corpus.patients().size() << "\nstays: " << corpus.stays.size()
                << "\nregistries: " << corpus.registry_count() << "\n";
            for (Split s : {Split::train, Split::val, Split::test}) {
                std::size_t windows = 0;
                std::size_t truncated = 0;
                const auto stays = corpus.stays_in(s);
                for (const Stay* stay : stays) {
                    for (const auto& w : segment_windows(*stay, tok, &vocab)) {
                        ++windows;
                        truncated += static_cast<int>(w.tokens.size()) > tok.max_seq_len ? 1 : 0;
                    }
                }
                out << split_name(s) << ": " << stays.size() << " stays, " << windows << " windows, " << truncated
                    << " truncated\n";
            }
            out << "feature vocabulary: " << vocab.feature_count() << "\nvalue vocabulary: " << vocab.value_count()
                << "\n";
            if (!vocab_out.empty()) vocab.save(vocab_out);
            if (!cache_out.empty()) {
                const auto provider = ingest_embed.provider();
                std::map<std::string, PretrainedVector> table;
                for (int i = Vocabularies::kReservedFeatures; i < vocab.feature_count(); ++i) {
                    table[vocab.feature_at(i)] = provider->lookup(vocab.feature_at(i));
                }
                for (int i = Vocabularies::kReservedValues; i < vocab.value_count(); ++i) {
                    table[vocab.value_at(i)] = provider->lookup(vocab.value_at(i));
                }
                write_embedding_cache(cache_out, table, provider->dim());
                out << "cache entries: " << table.size() << "\n";
            }
        } else if (sub == pretrain_cmd) {
            if (feature_norm == "masked") {
                pre.loss.feature_norm = FeatureNormalization::masked_slots;
            } else if (feature_norm == "all") {
                pre.loss.feature_norm = FeatureNormalization::all_tokens;
            } else {
                throw UsageError("--feature-norm must be masked or all");
            }
            pre.threads = threads;
            model.embedder.dropout = model.encoder.dropout;
            const Corpus corpus = pre_corpus.load();
            const Vocabularies vocab = build_vocabularies(corpus);
            const auto provider = pre_embed.provider();
            const std::string log_path = with_default(pre_log, pre_out, ".log.csv");
            std::string log = loss_log_header();
            const PretrainResult result =
                pretrain(corpus, vocab, *provider, model, pre_corpus.tokenizer(), pre, [&](const EpochRecord& r) {
                    log += loss_log_rows(r);
                    write_file_atomic(log_path, log);
                    out << "epoch " << r.epoch << ": train " << r.train.total << ", val " << r.val.total
                        << ", val feature accuracy " << r.val_feature_accuracy << ", lr " << r.lr << "\n";
                });
            save_checkpoint(result.best, pre_out);
            vocab.save(with_default(pre_vocab, pre_out, ".vocab.json"));
            out << "best epoch: " << result.best_epoch << "\nmajority baseline: " << result.majority_baseline
                << "\ncheckpoint: " << pre_out << "\n";
        } else if (sub == finetune_cmd) {
            ft.threads = threads;
            if (class_weight != "auto") {
                try {
                    ft.class_weight = std::stod(class_weight);
                } catch (const std::exception&) {
                    throw UsageError("--class-weight must be auto or a number");
                }
            }
            const Corpus corpus = ft_corpus.load();
            const Vocabularies vocab = Vocabularies::load(with_default(ft_vocab, ft_checkpoint, ".vocab.json"));
            const auto provider = ft_embed.provider();
            const TaskSpec task = ft_task.spec();
            const ModelParams<float> base = load_checkpoint(ft_checkpoint);
            const FinetuneResult result =
                finetune(base, corpus, vocab, *provider, ft_corpus.tokenizer(), task, ft, task_dropout,
                         [&](int fold, const FinetuneEpoch& e) {
                             out << "fold " << fold << " epoch " << e.epoch << ": train " << e.train_loss << ", val "
                                 << e.val_loss << ", lr " << e.lr << "\n";
                         });
            save_checkpoint(result.folds[result.best_fold].model, ft_out);
            const std::string report = result.report.to_text();
            write_file_atomic(with_default(ft_results, ft_out, ".results.txt"), report);
            out << report;
        } else if (sub == evaluate_cmd) {
            const Corpus corpus = ev_corpus.load();
            const Vocabularies vocab = Vocabularies::load(ev_vocab);
            const auto provider = ev_embed.provider();
            const MetricReport report = evaluate(load_checkpoint(ev_checkpoint), corpus, vocab, *provider,
                                                 ev_corpus.tokenizer(), ev_task.spec(), parse_split(ev_split), threads);
            const std::string text = report.to_text();
            if (!ev_results.empty()) write_file_atomic(ev_results, text);
            out << text;
        } else if (sub == gradcheck_cmd) {
            check.options.throw_on_failure = false;
            const ModelCheckReport report = check_model_gradients(check);
            out << "pre-training loss\n" << report.pretrain.to_text() << "fine-tuning loss\n" << report.finetune.to_text();
            if (!report.passed()) {
                const auto& bad = report.pretrain.passed ? report.finetune : report.pretrain;
                throw GradMismatch(bad.worst.front().param, bad.worst.front().rel_err);
            }
        } else if (sub == inspect) {
            int dim = 0;
            const auto table = decode_embedding_cache(read_file(cache_path), &dim);
            out << "entries: " << table.size() << "\ndim: " << dim << "\n";
            int shown = 0;
            for (const auto& [key, vec] : table) {
                if (shown++ >= cache_limit) break;
                double norm = 0.0;
                for (float x : vec.values) norm += static_cast<double>(x) * x;
                out << "  " << key << "  |v| = " << std::sqrt(norm) << "\n";
            }
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n" << sub->help();
        return 2;
    } catch (const Error& e) {
        err << "error: " << name(e.code()) << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, std::cout, std::cerr);
}

}  // namespace icubert::cli
