#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzu/data.hpp"
#include "mzu/language_model.hpp"
#include "mzu/optim.hpp"

namespace mzu {

// Non-finite loss or gradient during training.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    AdamConfig adam;
    std::size_t batch = 256;
    std::size_t tbptt = 150;
    double clip = 5.0;
    double lambda = 1.0;
    bool dzone_mean = false;
    std::size_t max_steps = 1000;
    std::size_t log_interval = 50;
    std::size_t eval_interval = 500;  // 0 evaluates only at the end
    std::size_t eval_max_chars = 0;   // 0 evaluates the whole validation split
    std::uint32_t seed = 1;
    bool wallclock = false;           // fill elapsed_s in the metrics log
    std::optional<std::filesystem::path> metrics_path;
    std::optional<std::filesystem::path> best_checkpoint;
    std::optional<std::filesystem::path> last_checkpoint;
    std::string config_echo;

    void validate() const;
};

struct MetricsRow {
    std::size_t step = 0;
    std::string split;
    double loss_nats = 0;
    double bpc = 0;
    std::optional<double> dzone_mean;
    double lr = 0;
    std::optional<double> elapsed_s;
};

inline constexpr const char* kMetricsHeader = "step,split,loss_nats,bpc,dzone_mean,lr,elapsed_s";
std::string format_metrics_row(const MetricsRow& row);

/// Append-only CSV log; the header is written when the file is new or empty.
class MetricsWriter {
   public:
    explicit MetricsWriter(const std::filesystem::path& path);
    void write(const MetricsRow& row);

   private:
    std::filesystem::path path_;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
    ParamStore<float> params;
    Rng rng;
    std::size_t step = 0;
    Tensor<float> carry;  // [batch, d_h] state entering the next chunk
    double best_valid_bpc = std::numeric_limits<double>::infinity();
};

TrainState init_train_state(const ModelConfig& model, const TrainConfig& cfg);

struct StepStats {
    double loss = 0;       // minimized objective per token
    double nll = 0;        // nats per token
    std::optional<double> dzone_mean;
    double grad_norm = 0;  // before clipping
};

/// One truncated-BPTT update on the chunk at position step % num_chunks.
/// The carried state is reset at the start of every pass over the streams.
StepStats train_step(TrainState& state, const StreamBatcher& streams, const ModelConfig& model, const TrainConfig& cfg);

struct EvalResult {
    double nats = 0;  // per character
    double bpc = 0;
    std::size_t chars = 0;
    std::optional<double> dzone_mean;
};

/// Whole-sequence evaluation as one stream, state carried throughout.
/// `max_chars` > 0 truncates the sequence.
EvalResult evaluate_bpc(const ParamStore<float>& params, const ModelConfig& model, const std::vector<int>& ids,
                        std::size_t max_chars = 0, std::size_t chunk = 256);

struct LengthBucket {
    std::size_t bucket = 0;  // lines with length in ((bucket-1)*width, bucket*width]
    std::size_t lines = 0;
    std::size_t chars = 0;   // predicted characters
    double nats = 0;         // summed
    double bpc = 0;
};

/// Per-line evaluation from a zero state. Each line is predicted after the
/// `start` symbol; without one the first character serves as context.
std::vector<LengthBucket> evaluate_by_length(const ParamStore<float>& params, const ModelConfig& model,
                                             const std::vector<std::vector<int>>& lines, std::optional<int> start,
                                             std::size_t width = 10);

/// Newline id if the corpus has one, else the unknown id, else none.
std::optional<int> line_start_symbol(const CharCorpus& corpus);

struct TrainSummary {
    std::vector<MetricsRow> rows;
    double best_valid_bpc = std::numeric_limits<double>::infinity();
    std::optional<EvalResult> last_valid;
};

using ProgressFn = std::function<void(const MetricsRow&)>;

/// Trains until state.step reaches cfg.max_steps. Logs train rows every
/// log_interval steps and validation rows every eval_interval steps (and at
/// the end), saving the best checkpoint on improvement and the last one at
/// the end when paths are configured.
TrainSummary tbptt_train(const CharCorpus& corpus, const ModelConfig& model, const TrainConfig& cfg,
                         TrainState& state, const ProgressFn& progress = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config;
    std::uint32_t step = 0;
    float best_valid_bpc = std::numeric_limits<float>::infinity();
    ParamStore<float> params;
    Rng rng;
    std::map<std::string, Tensor<float>> extras;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const TrainState& state, const std::string& config);
/// Restores a run. Every parameter of `model` must be present with the same
/// shape; mismatches raise ShapeError.
TrainState restore_train_state(const Checkpoint& ckpt, const ModelConfig& model, const TrainConfig& cfg);

/// Copies checkpoint parameters into a freshly initialized store of `model`,
/// checking names and shapes.
ParamStore<float> restore_params(const Checkpoint& ckpt, const ModelConfig& model);
/// Same check against an arbitrary expected layout.
ParamStore<float> restore_params(const Checkpoint& ckpt, const ParamStore<float>& layout);

}  // namespace mzu
