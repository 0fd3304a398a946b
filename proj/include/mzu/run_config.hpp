#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mzu/aspect.hpp"
#include "mzu/training.hpp"

namespace mzu {

enum class Task { kLm, kAbsa };

/// Flat run configuration. Every field has a key usable in a config file
/// (`key=value`) and as a `--key` flag with '_' written as '-'.
struct RunConfig {
    Task task = Task::kLm;
    CellKind model = CellKind::kMzu;
    Composition backend = Composition::kCap;
    std::size_t zones = 4;
    std::size_t out_capsules = 2;
    std::size_t routing_iters = 3;
    std::size_t hidden = 128;
    std::size_t filter = 256;
    std::size_t embed = 64;
    std::size_t depth = 1;
    bool share_depth = true;
    Ablation ablation = Ablation::kNone;
    GcnActivation gcn_activation = GcnActivation::kSigmoid;
    bool layer_norm = true;
    double lambda = 1.0;
    bool dzone_mean = false;
    double dropout = 0.5;
    double lr = 1e-3;
    std::size_t batch = 32;
    std::size_t tbptt = 64;
    double clip = 5.0;
    std::uint32_t seed = 1;
    std::size_t steps = 2000;
    std::size_t epochs = 10;
    std::size_t log_interval = 50;
    std::size_t eval_interval = 500;
    std::size_t eval_max_chars = 0;
    bool wallclock = false;
    std::string data_dir;
    std::string train;
    std::string valid;
    std::string test;
    std::string corpus;
    std::array<double, 3> split_fractions{0.9, 0.05, 0.05};
    std::string checkpoint;
    std::string metrics;
};

struct SettingInfo {
    const char* key;
    const char* help;
};

/// Every recognised key, in echo order.
const std::vector<SettingInfo>& setting_keys();

/// Sets one field from text; ConfigError names the key on bad input.
void apply_setting(RunConfig& rc, const std::string& key, const std::string& value);

/// Parses `key=value` lines; blank lines and '#' comments are skipped.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

void apply_config_text(RunConfig& rc, const std::string& text);

/// Model-shaping settings only, as key=value lines; stored in checkpoints.
std::string model_echo(const RunConfig& rc);

std::string to_string(Task t);
Task parse_task(const std::string& s);

CellConfig cell_config(const RunConfig& rc);
ModelConfig model_config(const RunConfig& rc, std::size_t vocab);
AspectModelConfig aspect_model_config(const RunConfig& rc, std::size_t vocab);
TrainConfig train_config(const RunConfig& rc);
AspectTrainConfig aspect_train_config(const RunConfig& rc);

/// Checks every constraint that does not depend on the data.
void validate(const RunConfig& rc);

/// Character corpus from, in order of preference: explicit train/valid/test
/// paths, a single corpus file with split fractions, or train.txt,
/// valid.txt and test.txt under data_dir.
CharCorpus load_run_corpus(const RunConfig& rc);

}  // namespace mzu
