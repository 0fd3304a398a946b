// mzu: train, evaluate, analyze and benchmark multi-zone recurrent models.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include "mzu/analysis.hpp"
#include "mzu/aspect.hpp"
#include "mzu/run_config.hpp"
#include "mzu/training.hpp"

namespace fs = std::filesystem;
using namespace mzu;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::string dashed(std::string key) {
    for (auto& c : key)
        if (c == '_') c = '-';
    return key;
}

struct Settings {
    std::string config_file;
    std::map<std::string, std::string> values;
    std::vector<std::pair<std::string, CLI::Option*>> options;
};

void add_settings(CLI::App* sub, Settings& s, bool with_steps = true) {
    sub->add_option("--config", s.config_file, "flat key=value config file; flags override it");
    for (const auto& info : setting_keys()) {
        const std::string key = info.key;
        if (!with_steps && key == "steps") continue;
        CLI::Option* opt = sub->add_option("--" + dashed(key), s.values[key], info.help);
        s.options.emplace_back(key, opt);
    }
}

// Defaults, then MZU_DATA_DIR, then the checkpoint's model echo (if asked),
// then the config file, then flags.
RunConfig resolve(const Settings& s, bool use_checkpoint_echo) {
    RunConfig rc;
    if (const char* dir = std::getenv("MZU_DATA_DIR")) rc.data_dir = dir;
    std::string file_text;
    if (!s.config_file.empty()) file_text = read_file(s.config_file);
    auto apply_user = [&](RunConfig& r) {
        if (!file_text.empty()) apply_config_text(r, file_text);
        for (const auto& [key, opt] : s.options)
            if (opt->count() > 0) apply_setting(r, key, s.values.at(key));
    };
    if (use_checkpoint_echo) {
        RunConfig probe = rc;
        apply_user(probe);
        if (probe.checkpoint.empty()) throw ConfigError("checkpoint: a checkpoint path is required");
        if (!fs::exists(probe.checkpoint)) throw CheckpointError("checkpoint not found: " + probe.checkpoint);
        apply_config_text(rc, load_checkpoint(probe.checkpoint).config);
    }
    apply_user(rc);
    validate(rc);
    return rc;
}

void print_row(const MetricsRow& r) {
    std::fprintf(stderr, "step %zu %s loss %.4f bpc %.4f%s\n", r.step, r.split.c_str(), r.loss_nats, r.bpc,
                 r.dzone_mean ? (" dzone " + std::to_string(*r.dzone_mean)).c_str() : "");
}

// ---- train ---------------------------------------------------------------

int train_lm(const RunConfig& rc, const std::string& resume, const std::string& last) {
    const CharCorpus corpus = load_run_corpus(rc);
    const ModelConfig model = model_config(rc, corpus.num_classes());
    TrainConfig tc = train_config(rc);
    if (!last.empty()) tc.last_checkpoint = last;
    TrainState state = resume.empty() ? init_train_state(model, tc)
                                      : restore_train_state(load_checkpoint(resume), model, tc);
    std::fprintf(stderr, "model %s/%s, %zu parameters, vocab %zu, %zu training chars\n", to_string(rc.model).c_str(),
                 to_string(rc.backend).c_str(), state.params.num_scalars(), corpus.num_classes(), corpus.train.size());
    const TrainSummary sum = tbptt_train(corpus, model, tc, state, print_row);
    std::printf("best valid bpc %.6f\n", sum.best_valid_bpc);
    return kOk;
}

int train_absa(const RunConfig& rc) {
    if (rc.train.empty() || rc.valid.empty()) throw ConfigError("train/valid: absa needs --train and --valid TSV files");
    WordVocab vocab;
    const AspectDataset train = load_aspect_tsv(rc.train, vocab, true);
    const AspectDataset dev = load_aspect_tsv(rc.valid, vocab, false);
    const AspectModelConfig cfg = aspect_model_config(rc, vocab.size());
    std::optional<std::ofstream> metrics;
    if (!rc.metrics.empty()) {
        metrics.emplace(rc.metrics, std::ios::trunc);
        if (!*metrics) throw DataError("cannot write " + rc.metrics);
        *metrics << "epoch,train_loss,dev_accuracy\n";
    }
    auto res = train_aspect(train, dev, cfg, aspect_train_config(rc), [&](const AspectEpoch& e) {
        std::fprintf(stderr, "epoch %zu loss %.4f dev acc %.4f\n", e.epoch, e.train_loss, e.dev_accuracy);
        if (metrics) *metrics << e.epoch << ',' << e.train_loss << ',' << e.dev_accuracy << '\n';
    });
    if (!rc.checkpoint.empty()) {
        Checkpoint c;
        c.config = model_echo(rc);
        c.params = res.params;
        save_checkpoint(rc.checkpoint, c);
    }
    std::printf("best dev accuracy %.4f\n", res.best_dev_accuracy);
    if (!rc.test.empty()) {
        const AspectDataset test = load_aspect_tsv(rc.test, vocab, false);
        std::printf("test accuracy %.4f\n", aspect_accuracy(res.params, cfg, test));
        const AspectDataset hds = build_hds(test);
        if (!hds.examples.empty()) std::printf("test HDS accuracy %.4f (%zu examples)\n", aspect_accuracy(res.params, cfg, hds), hds.examples.size());
    }
    return kOk;
}

// ---- eval ----------------------------------------------------------------

Split parse_split(const std::string& s) {
    if (s == "train") return Split::kTrain;
    if (s == "valid") return Split::kValid;
    if (s == "test") return Split::kTest;
    throw ConfigError("split: expected train, valid or test, got '" + s + "'");
}

int eval_lm(const RunConfig& rc, const std::string& split_name, bool by_length, const std::string& out_path) {
    const Split split = parse_split(split_name);
    const CharCorpus corpus = load_run_corpus(rc);
    const ModelConfig model = model_config(rc, corpus.num_classes());
    const ParamStore<float> params = restore_params(load_checkpoint(rc.checkpoint), model);
    if (!by_length) {
        const EvalResult r = evaluate_bpc(params, model, corpus.split(split));
        std::printf("split %s chars %zu bpc %.6f\n", split_name.c_str(), r.chars, r.bpc);
        return kOk;
    }
    const auto table = evaluate_by_length(params, model, corpus.lines(split), line_start_symbol(corpus));
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::trunc);
        if (!file) throw DataError("cannot write " + out_path);
    }
    std::ostream& out = out_path.empty() ? std::cout : file;
    out << "bucket,min_len,max_len,lines,chars,bpc\n";
    for (const auto& b : table) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f", b.bpc);
        out << b.bucket << ',' << (b.bucket - 1) * 10 + 1 << ',' << b.bucket * 10 << ',' << b.lines << ',' << b.chars
            << ',' << buf << '\n';
    }
    return kOk;
}

int eval_absa(const RunConfig& rc, const std::string& split_name, bool hds) {
    if (rc.train.empty()) throw ConfigError("train: absa evaluation rebuilds the vocabulary from --train");
    WordVocab vocab;
    load_aspect_tsv(rc.train, vocab, true);
    const std::string path = split_name == "train" ? rc.train : split_name == "test" ? rc.test : rc.valid;
    if (path.empty()) throw ConfigError(split_name + ": no file given for this split");
    AspectDataset ds = load_aspect_tsv(path, vocab, false);
    if (hds) ds = build_hds(ds);
    const AspectModelConfig cfg = aspect_model_config(rc, vocab.size());
    ParamStore<float> layout;
    Rng rng(0);
    init_aspect_model(layout, cfg, rng);
    const ParamStore<float> params = restore_params(load_checkpoint(rc.checkpoint), layout);
    std::printf("split %s%s examples %zu accuracy %.4f\n", split_name.c_str(), hds ? " (HDS)" : "", ds.examples.size(),
                aspect_accuracy(params, cfg, ds));
    return kOk;
}

// ---- analyze -------------------------------------------------------------

int analyze(const RunConfig& rc, std::string text, const std::string& text_file, std::size_t last_q,
            const std::string& prefix, const std::string& format_name) {
    if (rc.task != Task::kLm) throw ConfigError("task: analysis is defined for language models");
    const MapFormat format = parse_map_format(format_name);
    if (!text_file.empty()) text = read_file(text_file);
    if (text.empty()) throw ConfigError("text: pass --text or --text-file");
    const CharCorpus corpus = load_run_corpus(rc);
    const ModelConfig model = model_config(rc, corpus.num_classes());
    const ParamStore<float> params = restore_params(load_checkpoint(rc.checkpoint), model);
    const std::string ext = format == MapFormat::kPgm ? ".pgm" : ".csv";
    export_map(relevance_map(params, model, corpus, text, last_q), prefix + ext, format);
    std::printf("wrote %s%s\n", prefix.c_str(), ext.c_str());
    if (model.cell.kind == CellKind::kMzu && model.cell.ablation != Ablation::kRegularTrans) {
        const auto maps = zone_relevance_map(params, model, corpus, text, last_q);
        for (const auto& m : maps) {
            const std::string path = prefix + ".zone" + std::to_string(*m.zone) + ext;
            export_map(m, path, format);
            std::printf("wrote %s\n", path.c_str());
        }
    }
    return kOk;
}

// ---- bench ---------------------------------------------------------------

int bench(const RunConfig& rc, std::size_t steps) {
    constexpr std::size_t kPtbVocab = 50;
    auto millions = [](std::size_t n) { return static_cast<double>(n) / 1e6; };
    std::printf("analytic parameter counts (vocab %zu)\n", kPtbVocab);
    RunConfig ptb = rc;
    ptb.hidden = 800;
    ptb.filter = 1000;
    ptb.embed = 256;
    ptb.share_depth = true;
    ptb.depth = 1;
    ptb.ablation = Ablation::kNone;
    for (auto backend : {Composition::kSat, Composition::kGcn, Composition::kCap}) {
        ptb.model = CellKind::kMzu;
        ptb.backend = backend;
        std::printf("  %sMZU+DT d_h=800 d_f=1000 d_x=256 shared: %.3fM\n", to_string(backend).c_str(),
                    millions(language_model_param_count(model_config(ptb, kPtbVocab))));
    }
    ptb.model = CellKind::kGru;
    std::printf("  GRU+DT d_h=800 d_x=256: %.3fM\n", millions(language_model_param_count(model_config(ptb, kPtbVocab))));
    std::printf("  configured %s/%s d_h=%zu: %.3fM\n", to_string(rc.model).c_str(), to_string(rc.backend).c_str(),
                rc.hidden, millions(language_model_param_count(model_config(rc, kPtbVocab))));

    // Synthetic uniform symbols over a 27-letter alphabet.
    std::mt19937 rng(rc.seed);
    std::string text((steps + 1) * rc.batch * rc.tbptt + rc.batch + 1, ' ');
    for (auto& c : text) c = static_cast<char>('a' + rng() % 27);
    const CharCorpus corpus = build_char_corpus(text, text.substr(0, 64), text.substr(0, 64));
    std::printf("throughput (batch %zu, tbptt %zu, %zu steps)\n", rc.batch, rc.tbptt, steps);
    std::printf("  %-8s %12s %12s\n", "model", "steps/s", "chars/s");
    std::vector<std::pair<std::string, RunConfig>> variants;
    for (auto backend : {Composition::kSat, Composition::kGcn, Composition::kCap}) {
        RunConfig v = rc;
        v.model = CellKind::kMzu;
        v.backend = backend;
        variants.emplace_back(to_string(backend), v);
    }
    RunConfig g = rc;
    g.model = CellKind::kGru;
    g.ablation = Ablation::kNone;
    variants.emplace_back("gru", g);
    for (const auto& [name, v] : variants) {
        const ModelConfig model = model_config(v, corpus.num_classes());
        TrainConfig tc = train_config(v);
        tc.metrics_path.reset();
        tc.best_checkpoint.reset();
        TrainState state = init_train_state(model, tc);
        StreamBatcher streams(corpus.train, tc.batch, tc.tbptt);
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < steps; ++i) train_step(state, streams, model, tc);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const double sps = steps > 0 && secs > 0 ? static_cast<double>(steps) / secs : 0.0;
        std::printf("  %-8s %12.3f %12.1f\n", name.c_str(), sps, sps * static_cast<double>(rc.batch * rc.tbptt));
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-zone recurrent units: training, evaluation and analysis"};
    app.require_subcommand(1);

    Settings train_s, eval_s, analyze_s, bench_s;
    std::string resume, last_ckpt;
    auto* train = app.add_subcommand("train", "train a language model or aspect classifier");
    add_settings(train, train_s);
    train->add_option("--resume", resume, "continue from a checkpoint");
    train->add_option("--last-checkpoint", last_ckpt, "write the final state here");

    std::string split = "valid", eval_out;
    bool by_length = false, hds = false;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_settings(eval, eval_s);
    eval->add_option("--split", split, "train, valid or test");
    eval->add_flag("--by-length", by_length, "BPC per line-length bucket (width 10) as CSV");
    eval->add_flag("--hds", hds, "absa: evaluate on the hard sub-dataset");
    eval->add_option("--out", eval_out, "CSV output path (default stdout)");

    std::string text, text_file, prefix = "relevance", format = "pgm";
    std::size_t last_q = 20;
    auto* an = app.add_subcommand("analyze", "relevance maps for a text");
    add_settings(an, analyze_s);
    an->add_option("--text", text, "text to encode");
    an->add_option("--text-file", text_file, "read the text from a file");
    an->add_option("--last-q", last_q, "number of final positions to map");
    an->add_option("--out-prefix", prefix, "output path prefix");
    an->add_option("--format", format, "pgm or csv");

    std::size_t bench_steps = 5;
    auto* be = app.add_subcommand("bench", "parameter counts and training throughput");
    add_settings(be, bench_s, false);
    be->add_option("--steps", bench_steps, "timed updates per model");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*train) {
            const RunConfig rc = resolve(train_s, false);
            return rc.task == Task::kLm ? train_lm(rc, resume, last_ckpt) : train_absa(rc);
        }
        if (*eval) {
            const RunConfig rc = resolve(eval_s, true);
            return rc.task == Task::kLm ? eval_lm(rc, split, by_length, eval_out) : eval_absa(rc, split, hds);
        }
        if (*an) return analyze(resolve(analyze_s, true), text, text_file, last_q, prefix, format);
        if (*be) return bench(resolve(bench_s, false), bench_steps);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kNumeric;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return kUsage;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return kData;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const std::domain_error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kData;
    }
    return kOk;
}
