#include "mzu/run_config.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

namespace mzu {

const std::vector<SettingInfo>& setting_keys() {
    static const std::vector<SettingInfo> keys = {
        {"task", "lm or absa"},
        {"model", "mzu or gru"},
        {"backend", "zone composition: sat, gcn or cap"},
        {"zones", "zones per M-function (N)"},
        {"out_capsules", "output capsules for cap (J)"},
        {"routing_iters", "routing iterations for cap (T)"},
        {"hidden", "state width d_h"},
        {"filter", "zone FFN width d_f"},
        {"embed", "embedding width d_x"},
        {"depth", "transition cells after the input cell"},
        {"share_depth", "reuse input-cell weights at every depth (true/false)"},
        {"ablation", "none, regular_gate or regular_trans"},
        {"gcn_activation", "sigmoid or relu"},
        {"layer_norm", "layer normalization on pre-activations (true/false)"},
        {"lambda", "disagreement weight"},
        {"dzone_mean", "average disagreement over M-functions instead of summing (true/false)"},
        {"dropout", "candidate dropout rate"},
        {"lr", "Adam learning rate"},
        {"batch", "parallel streams (lm) or sentences per update (absa)"},
        {"tbptt", "truncated BPTT length"},
        {"clip", "global gradient norm limit"},
        {"seed", "random seed"},
        {"steps", "training updates (lm)"},
        {"epochs", "training epochs (absa)"},
        {"log_interval", "updates between train rows in the metrics log"},
        {"eval_interval", "updates between validation passes (0 = only at the end)"},
        {"eval_max_chars", "cap on validation characters (0 = whole split)"},
        {"wallclock", "record elapsed seconds in the metrics log (true/false)"},
        {"data_dir", "directory with train.txt, valid.txt, test.txt"},
        {"train", "training file"},
        {"valid", "validation file"},
        {"test", "test file"},
        {"corpus", "single text file split by split_fractions"},
        {"split_fractions", "train,valid,test fractions for corpus"},
        {"checkpoint", "checkpoint path"},
        {"metrics", "metrics CSV path"},
    };
    return keys;
}

std::string to_string(Task t) { return t == Task::kLm ? "lm" : "absa"; }

Task parse_task(const std::string& s) {
    if (s == "lm") return Task::kLm;
    if (s == "absa") return Task::kAbsa;
    throw ConfigError("task: expected lm or absa, got '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty())
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double d) {
    std::ostringstream ss;
    ss.precision(std::numeric_limits<double>::max_digits10);
    ss << d;
    return ss.str();
}

}  // namespace

void apply_setting(RunConfig& rc, const std::string& raw_key, const std::string& raw_value) {
    std::string key = trim(raw_key);
    for (auto& c : key)
        if (c == '-') c = '_';
    const std::string v = trim(raw_value);
    try {
        if (key == "task") rc.task = parse_task(v);
        else if (key == "model") rc.model = parse_cell_kind(v);
        else if (key == "backend") rc.backend = parse_composition(v);
        else if (key == "zones") rc.zones = to_size(key, v);
        else if (key == "out_capsules") rc.out_capsules = to_size(key, v);
        else if (key == "routing_iters") rc.routing_iters = to_size(key, v);
        else if (key == "hidden") rc.hidden = to_size(key, v);
        else if (key == "filter") rc.filter = to_size(key, v);
        else if (key == "embed") rc.embed = to_size(key, v);
        else if (key == "depth") rc.depth = to_size(key, v);
        else if (key == "share_depth") rc.share_depth = to_bool(key, v);
        else if (key == "ablation") rc.ablation = parse_ablation(v);
        else if (key == "gcn_activation") {
            if (v == "sigmoid") rc.gcn_activation = GcnActivation::kSigmoid;
            else if (v == "relu") rc.gcn_activation = GcnActivation::kRelu;
            else throw ConfigError("gcn_activation: expected sigmoid or relu, got '" + v + "'");
        } else if (key == "layer_norm") rc.layer_norm = to_bool(key, v);
        else if (key == "lambda") rc.lambda = to_double(key, v);
        else if (key == "dzone_mean") rc.dzone_mean = to_bool(key, v);
        else if (key == "dropout") rc.dropout = to_double(key, v);
        else if (key == "lr") rc.lr = to_double(key, v);
        else if (key == "batch") rc.batch = to_size(key, v);
        else if (key == "tbptt") rc.tbptt = to_size(key, v);
        else if (key == "clip") rc.clip = to_double(key, v);
        else if (key == "seed") {
            const std::size_t s = to_size(key, v);
            if (s > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("seed: must fit in 32 bits");
            rc.seed = static_cast<std::uint32_t>(s);
        } else if (key == "steps") rc.steps = to_size(key, v);
        else if (key == "epochs") rc.epochs = to_size(key, v);
        else if (key == "log_interval") rc.log_interval = to_size(key, v);
        else if (key == "eval_interval") rc.eval_interval = to_size(key, v);
        else if (key == "eval_max_chars") rc.eval_max_chars = to_size(key, v);
        else if (key == "wallclock") rc.wallclock = to_bool(key, v);
        else if (key == "data_dir") rc.data_dir = v;
        else if (key == "train") rc.train = v;
        else if (key == "valid") rc.valid = v;
        else if (key == "test") rc.test = v;
        else if (key == "corpus") rc.corpus = v;
        else if (key == "split_fractions") {
            std::array<double, 3> f{};
            std::istringstream ss(v);
            std::string part;
            std::size_t i = 0;
            while (std::getline(ss, part, ',')) {
                if (i == 3) throw ConfigError("split_fractions: expected three comma-separated values");
                f[i++] = to_double(key, trim(part));
            }
            if (i != 3) throw ConfigError("split_fractions: expected three comma-separated values");
            rc.split_fractions = f;
        } else if (key == "checkpoint") rc.checkpoint = v;
        else if (key == "metrics") rc.metrics = v;
        else throw ConfigError("unknown setting '" + raw_key + "'");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        // Parsers from other modules report plain invalid_argument.
        throw ConfigError(key + ": " + e.what());
    }
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(text);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key=value");
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

void apply_config_text(RunConfig& rc, const std::string& text) {
    for (const auto& [k, v] : parse_key_values(text)) apply_setting(rc, k, v);
}

std::string model_echo(const RunConfig& rc) {
    std::string s;
    auto kv = [&](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
    kv("task", to_string(rc.task));
    kv("model", to_string(rc.model));
    kv("backend", to_string(rc.backend));
    kv("zones", std::to_string(rc.zones));
    kv("out_capsules", std::to_string(rc.out_capsules));
    kv("routing_iters", std::to_string(rc.routing_iters));
    kv("hidden", std::to_string(rc.hidden));
    kv("filter", std::to_string(rc.filter));
    kv("embed", std::to_string(rc.embed));
    kv("depth", std::to_string(rc.depth));
    kv("share_depth", rc.share_depth ? "true" : "false");
    kv("ablation", to_string(rc.ablation));
    kv("gcn_activation", rc.gcn_activation == GcnActivation::kRelu ? "relu" : "sigmoid");
    kv("layer_norm", rc.layer_norm ? "true" : "false");
    kv("lambda", fmt(rc.lambda));
    kv("dzone_mean", rc.dzone_mean ? "true" : "false");
    kv("dropout", fmt(rc.dropout));
    return s;
}

CellConfig cell_config(const RunConfig& rc) {
    CellConfig c;
    c.kind = rc.model;
    c.m.d_x = rc.embed;
    c.m.d_h = rc.hidden;
    c.m.zones = rc.zones;
    c.m.out_zones = rc.out_capsules;
    c.m.routing_iters = rc.routing_iters;
    c.m.d_f = rc.filter;
    c.m.composition = rc.backend;
    c.m.gcn_activation = rc.gcn_activation;
    c.transition_depth = rc.depth;
    c.share_depth_params = rc.share_depth;
    c.ablation = rc.ablation;
    c.dropout = rc.dropout;
    c.layer_norm = rc.layer_norm;
    return c;
}

ModelConfig model_config(const RunConfig& rc, std::size_t vocab) { return {cell_config(rc), vocab}; }

AspectModelConfig aspect_model_config(const RunConfig& rc, std::size_t vocab) { return {cell_config(rc), vocab}; }

TrainConfig train_config(const RunConfig& rc) {
    TrainConfig t;
    t.adam.lr = rc.lr;
    t.batch = rc.batch;
    t.tbptt = rc.tbptt;
    t.clip = rc.clip;
    t.lambda = rc.lambda;
    t.dzone_mean = rc.dzone_mean;
    t.max_steps = rc.steps;
    t.log_interval = rc.log_interval;
    t.eval_interval = rc.eval_interval;
    t.eval_max_chars = rc.eval_max_chars;
    t.seed = rc.seed;
    t.wallclock = rc.wallclock;
    if (!rc.metrics.empty()) t.metrics_path = rc.metrics;
    if (!rc.checkpoint.empty()) t.best_checkpoint = rc.checkpoint;
    t.config_echo = model_echo(rc);
    return t;
}

AspectTrainConfig aspect_train_config(const RunConfig& rc) {
    AspectTrainConfig t;
    t.adam.lr = rc.lr;
    t.batch = rc.batch;
    t.epochs = rc.epochs;
    t.clip = rc.clip;
    t.lambda = rc.lambda;
    t.seed = rc.seed;
    return t;
}

void validate(const RunConfig& rc) {
    if (rc.embed == 0) throw ConfigError("embed: must be positive");
    if (rc.depth > 64) throw ConfigError("depth: at most 64 transition cells");
    cell_config(rc).validate();
    train_config(rc).validate();
    if (rc.task == Task::kAbsa && rc.epochs == 0) throw ConfigError("epochs: must be positive for absa");
}

CharCorpus load_run_corpus(const RunConfig& rc) {
    namespace fs = std::filesystem;
    if (!rc.train.empty() || !rc.valid.empty() || !rc.test.empty()) {
        if (rc.train.empty() || rc.valid.empty() || rc.test.empty())
            throw ConfigError("train/valid/test: give all three split files or none");
        return load_char_corpus(rc.train, rc.valid, rc.test);
    }
    if (!rc.corpus.empty()) return load_char_corpus(rc.corpus, rc.split_fractions);
    if (!rc.data_dir.empty()) {
        const fs::path d(rc.data_dir);
        return load_char_corpus(d / "train.txt", d / "valid.txt", d / "test.txt");
    }
    throw ConfigError("data: no corpus given; pass --train/--valid/--test, --corpus or --data-dir (or set MZU_DATA_DIR)");
}

}  // namespace mzu
