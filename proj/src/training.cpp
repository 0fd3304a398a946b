#include "mzu/training.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mzu/objective.hpp"

namespace mzu {

void TrainConfig::validate() const {
    if (!(adam.lr > 0)) throw ConfigError("lr: must be positive");
    if (batch == 0) throw ConfigError("batch: must be positive");
    if (tbptt == 0) throw ConfigError("tbptt: must be at least 1");
    if (!(clip > 0)) throw ConfigError("clip: must be positive");
    if (log_interval == 0) throw ConfigError("log_interval: must be positive");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1)) throw ConfigError("beta1: must lie in [0, 1)");
    if (!(adam.beta2 >= 0 && adam.beta2 < 1)) throw ConfigError("beta2: must lie in [0, 1)");
    if (!(adam.eps > 0)) throw ConfigError("eps: must be positive");
    if (!std::isfinite(lambda)) throw ConfigError("lambda: must be finite");
}

std::string format_metrics_row(const MetricsRow& r) {
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.9g", v);
        return std::string(buf);
    };
    std::string s = std::to_string(r.step) + "," + r.split + "," + num(r.loss_nats) + "," + num(r.bpc) + ",";
    if (r.dzone_mean) s += num(*r.dzone_mean);
    s += "," + num(r.lr) + ",";
    if (r.elapsed_s) s += num(*r.elapsed_s);
    return s;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : path_(path) {
    std::error_code ec;
    const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open metrics file " + path.string());
    if (fresh) out << kMetricsHeader << '\n';
}

void MetricsWriter::write(const MetricsRow& row) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to metrics file " + path_.string());
    out << format_metrics_row(row) << '\n';
}

TrainState init_train_state(const ModelConfig& model, const TrainConfig& cfg) {
    model.validate();
    cfg.validate();
    TrainState s;
    s.rng.seed(cfg.seed);
    init_language_model(s.params, model, s.rng);
    s.carry = Tensor<float>({cfg.batch, model.cell.d_h()});
    return s;
}

namespace {

bool grads_finite(const GradMap<float>& g) {
    for (const auto& [name, t] : g)
        if (!t.all_finite()) return false;
    return true;
}

}  // namespace

StepStats train_step(TrainState& state, const StreamBatcher& streams, const ModelConfig& model, const TrainConfig& cfg) {
    if (streams.batch() != cfg.batch || streams.tbptt() != cfg.tbptt)
        throw ConfigError("batch/tbptt: stream layout does not match the training config");
    const std::size_t index = state.step % streams.num_chunks();
    if (index == 0 || state.carry.shape() != Shape{cfg.batch, model.cell.d_h()})
        state.carry = Tensor<float>({cfg.batch, model.cell.d_h()});
    const auto chunk = streams.chunk(index);

    Tape<float> tape;
    // A constant leaf: no gradient crosses into the previous chunk.
    Var<float> h0 = tape.constant(state.carry);
    StepContext ctx{true, &state.rng};
    auto out = lm_forward(tape, state.params, model, std::span<const int>(chunk.inputs),
                          std::span<const int>(chunk.targets), cfg.batch, cfg.tbptt, h0, ctx);
    Var<float> loss = lm_objective(out, cfg.lambda, cfg.dzone_mean);

    StepStats st;
    st.loss = loss.value().item();
    st.nll = out.nll_sum.value().item() / static_cast<double>(out.tokens);
    if (out.dzone_sum) st.dzone_mean = out.dzone_sum->value().item() / static_cast<double>(out.dzone_terms);
    if (!std::isfinite(st.loss)) throw NumericError("non-finite loss at step " + std::to_string(state.step));

    GradMap<float> grads = tape.gradients(loss, state.params);
    if (!grads_finite(grads)) throw NumericError("non-finite gradient at step " + std::to_string(state.step));
    st.grad_norm = global_norm(grads);
    grads = global_norm_clip(std::move(grads), cfg.clip);
    adam_update(state.params, grads, cfg.adam);

    state.carry = out.final_h.value();
    ++state.step;
    return st;
}

EvalResult evaluate_bpc(const ParamStore<float>& params, const ModelConfig& model, const std::vector<int>& ids,
                        std::size_t max_chars, std::size_t chunk) {
    EvalResult r;
    std::size_t n = ids.size();
    if (max_chars > 0 && max_chars < n) n = max_chars;
    if (n < 2) return r;
    if (chunk == 0) chunk = 256;
    Tensor<float> carry({1, model.cell.d_h()});
    double nll = 0, dz = 0;
    std::size_t dz_terms = 0;
    for (std::size_t pos = 0; pos + 1 < n; pos += chunk) {
        const std::size_t len = std::min(chunk, n - 1 - pos);
        Tape<float> tape;
        tape.set_recording(false);
        const std::span<const int> in(ids.data() + pos, len), tgt(ids.data() + pos + 1, len);
        auto out = lm_forward(tape, params, model, in, tgt, 1, len, tape.constant(carry), StepContext{});
        nll += out.nll_sum.value().item();
        if (out.dzone_sum) {
            dz += out.dzone_sum->value().item();
            dz_terms += out.dzone_terms;
        }
        carry = out.final_h.value();
    }
    r.chars = n - 1;
    r.nats = nll / static_cast<double>(r.chars);
    r.bpc = bpc(r.nats);
    if (dz_terms > 0) r.dzone_mean = dz / static_cast<double>(dz_terms);
    return r;
}

std::optional<int> line_start_symbol(const CharCorpus& corpus) {
    if (auto nl = corpus.id_of('\n')) return nl;
    return corpus.unknown_id;
}

std::vector<LengthBucket> evaluate_by_length(const ParamStore<float>& params, const ModelConfig& model,
                                             const std::vector<std::vector<int>>& lines, std::optional<int> start,
                                             std::size_t width) {
    if (width == 0) throw std::invalid_argument("evaluate_by_length: bucket width must be positive");
    // Lines of equal length share one batched forward pass; each row starts
    // from a zero state so the batching does not change any result.
    std::map<std::size_t, std::vector<const std::vector<int>*>> by_len;
    for (const auto& l : lines)
        if (!l.empty()) by_len[l.size()].push_back(&l);

    std::map<std::size_t, LengthBucket> buckets;
    constexpr std::size_t kMaxBatch = 64;
    for (const auto& [len, group] : by_len) {
        const std::size_t steps = start ? len : len - 1;
        if (steps == 0) continue;
        for (std::size_t g0 = 0; g0 < group.size(); g0 += kMaxBatch) {
            const std::size_t b = std::min(kMaxBatch, group.size() - g0);
            std::vector<int> in(b * steps), tgt(b * steps);
            for (std::size_t i = 0; i < b; ++i) {
                const auto& l = *group[g0 + i];
                for (std::size_t t = 0; t < steps; ++t) {
                    if (start) {
                        in[i * steps + t] = t == 0 ? *start : l[t - 1];
                        tgt[i * steps + t] = l[t];
                    } else {
                        in[i * steps + t] = l[t];
                        tgt[i * steps + t] = l[t + 1];
                    }
                }
            }
            Tape<float> tape;
            tape.set_recording(false);
            auto out = lm_forward(tape, params, model, std::span<const int>(in), std::span<const int>(tgt), b, steps,
                                  tape.constant(Tensor<float>({b, model.cell.d_h()})), StepContext{});
            auto& bk = buckets[(len + width - 1) / width];
            bk.bucket = (len + width - 1) / width;
            bk.lines += b;
            bk.chars += b * steps;
            bk.nats += out.nll_sum.value().item();
        }
    }
    std::vector<LengthBucket> table;
    for (auto& [k, bk] : buckets) {
        bk.bpc = bpc(bk.nats / static_cast<double>(bk.chars));
        table.push_back(bk);
    }
    return table;
}

namespace {

double elapsed_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TrainSummary tbptt_train(const CharCorpus& corpus, const ModelConfig& model, const TrainConfig& cfg,
                         TrainState& state, const ProgressFn& progress) {
    model.validate();
    cfg.validate();
    StreamBatcher streams(corpus.train, cfg.batch, cfg.tbptt);
    std::optional<MetricsWriter> writer;
    if (cfg.metrics_path) writer.emplace(*cfg.metrics_path);
    const auto t0 = std::chrono::steady_clock::now();

    TrainSummary summary;
    summary.best_valid_bpc = state.best_valid_bpc;
    auto emit = [&](MetricsRow row) {
        if (cfg.wallclock) row.elapsed_s = elapsed_since(t0);
        if (writer) writer->write(row);
        if (progress) progress(row);
        summary.rows.push_back(std::move(row));
    };
    auto run_eval = [&]() {
        if (corpus.valid.size() < 2) return;
        EvalResult ev = evaluate_bpc(state.params, model, corpus.valid, cfg.eval_max_chars);
        summary.last_valid = ev;
        emit({state.step, "valid", ev.nats, ev.bpc, ev.dzone_mean, cfg.adam.lr, std::nullopt});
        if (ev.bpc < state.best_valid_bpc) {
            // Kept at float precision so a resumed run compares identically.
            state.best_valid_bpc = static_cast<float>(ev.bpc);
            if (cfg.best_checkpoint) save_checkpoint(*cfg.best_checkpoint, make_checkpoint(state, cfg.config_echo));
        }
        summary.best_valid_bpc = state.best_valid_bpc;
    };

    double nll_acc = 0, dz_acc = 0;
    std::size_t n_acc = 0, dz_n = 0;
    bool evaluated_at_end = false;
    while (state.step < cfg.max_steps) {
        const StepStats st = train_step(state, streams, model, cfg);
        nll_acc += st.nll;
        ++n_acc;
        if (st.dzone_mean) {
            dz_acc += *st.dzone_mean;
            ++dz_n;
        }
        evaluated_at_end = false;
        if (state.step % cfg.log_interval == 0 || state.step == cfg.max_steps) {
            const double nats = nll_acc / static_cast<double>(n_acc);
            std::optional<double> dz;
            if (dz_n > 0) dz = dz_acc / static_cast<double>(dz_n);
            emit({state.step, "train", nats, bpc(nats), dz, cfg.adam.lr, std::nullopt});
            nll_acc = dz_acc = 0;
            n_acc = dz_n = 0;
        }
        if (cfg.eval_interval > 0 && state.step % cfg.eval_interval == 0) {
            run_eval();
            evaluated_at_end = true;
        }
    }
    if (!evaluated_at_end) run_eval();
    if (cfg.last_checkpoint) save_checkpoint(*cfg.last_checkpoint, make_checkpoint(state, cfg.config_echo));
    return summary;
}

// ---- checkpoint encoding -------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'Z', 'U', 'C', 'K', 'P', 'T', '1'};
constexpr std::size_t kRngWords = 625;

class Writer {
   public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
    void bytes(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_ += s;
    }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    void tensor_data(const Tensor<float>& t) {
        for (std::size_t i = 0; i < t.size(); ++i) f32(t[i]);
    }
    void tensor(const std::string& name, const Tensor<float>& t) {
        bytes(name);
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape()) u32(static_cast<std::uint32_t>(e));
        tensor_data(t);
    }
    std::string take() { return std::move(buf_); }

   private:
    std::string buf_;
};

class Reader {
   public:
    explicit Reader(const std::string& b) : b_(b) {}
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string bytes() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void tensor_data(Tensor<float>& t) {
        need(4 * t.size());
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = f32();
    }
    std::pair<std::string, Tensor<float>> tensor() {
        std::string name = bytes();
        const std::uint32_t rank = u32();
        if (rank == 0 || rank > 8) throw CheckpointError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
        Shape shape(rank);
        std::size_t total = 1;
        for (auto& e : shape) {
            e = u32();
            if (e == 0) throw CheckpointError("tensor '" + name + "' has a zero extent");
            total *= e;
        }
        need(4 * total);
        Tensor<float> t(shape);
        tensor_data(t);
        return {std::move(name), std::move(t)};
    }
    bool done() const { return pos_ == b_.size(); }

   private:
    const std::string& b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(c.version);
    w.bytes(c.config);
    w.u32(c.step);
    w.f32(c.best_valid_bpc);
    w.u32(static_cast<std::uint32_t>(c.params.size()));
    for (const auto& [name, e] : c.params.entries()) {
        w.tensor(name, e.value);
        w.tensor_data(e.m);
        w.tensor_data(e.v);
        w.u32(static_cast<std::uint32_t>(e.step));
    }
    std::ostringstream rs;
    rs << c.rng;
    std::istringstream words(rs.str());
    w.u32(kRngWords);
    for (std::size_t i = 0; i < kRngWords; ++i) {
        unsigned long v = 0;
        words >> v;
        w.u32(static_cast<std::uint32_t>(v));
    }
    w.u32(static_cast<std::uint32_t>(c.extras.size()));
    for (const auto& [name, t] : c.extras) w.tensor(name, t);
    return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw CheckpointError("not a checkpoint file (bad magic)");
    r.raw(sizeof kMagic);
    Checkpoint c;
    c.version = r.u32();
    if (c.version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    c.config = r.bytes();
    c.step = r.u32();
    c.best_valid_bpc = r.f32();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        auto [name, value] = r.tensor();
        if (c.params.contains(name)) throw CheckpointError("duplicate parameter '" + name + "'");
        auto& e = c.params.entry_mut_or_insert(name);
        e.m = Tensor<float>(value.shape());
        e.v = Tensor<float>(value.shape());
        e.value = std::move(value);
        r.tensor_data(e.m);
        r.tensor_data(e.v);
        e.step = r.u32();
    }
    const std::uint32_t nw = r.u32();
    if (nw != kRngWords) throw CheckpointError("bad RNG state length " + std::to_string(nw));
    std::ostringstream rs;
    for (std::size_t i = 0; i < kRngWords; ++i) rs << (i ? " " : "") << r.u32();
    std::istringstream in(rs.str());
    in >> c.rng;
    if (!in) throw CheckpointError("invalid RNG state");
    const std::uint32_t ne = r.u32();
    for (std::uint32_t i = 0; i < ne; ++i) {
        auto [name, t] = r.tensor();
        c.extras.emplace(std::move(name), std::move(t));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const TrainState& state, const std::string& config) {
    Checkpoint c;
    c.config = config;
    c.step = static_cast<std::uint32_t>(state.step);
    c.best_valid_bpc = static_cast<float>(state.best_valid_bpc);
    c.params = state.params;
    c.rng = state.rng;
    if (!state.carry.empty()) c.extras.emplace("state/h", state.carry);
    return c;
}

ParamStore<float> restore_params(const Checkpoint& ckpt, const ParamStore<float>& layout) {
    for (const auto& name : layout.names()) {
        if (!ckpt.params.contains(name)) throw ShapeError("restore_params", {}, "checkpoint lacks parameter '" + name + "'");
        const auto& want = layout.get(name).shape();
        const auto& got = ckpt.params.get(name).shape();
        if (want != got) throw ShapeError("restore_params", {want, got}, "parameter '" + name + "' has a different shape");
    }
    if (ckpt.params.size() != layout.size())
        throw ShapeError("restore_params", {}, "checkpoint has parameters the configured model does not");
    return ckpt.params;
}

ParamStore<float> restore_params(const Checkpoint& ckpt, const ModelConfig& model) {
    ParamStore<float> fresh;
    Rng rng(0);
    init_language_model(fresh, model, rng);
    return restore_params(ckpt, fresh);
}

TrainState restore_train_state(const Checkpoint& ckpt, const ModelConfig& model, const TrainConfig& cfg) {
    TrainState s;
    s.params = restore_params(ckpt, model);
    s.rng = ckpt.rng;
    s.step = ckpt.step;
    s.best_valid_bpc = ckpt.best_valid_bpc;
    auto it = ckpt.extras.find("state/h");
    if (it != ckpt.extras.end() && it->second.shape() == Shape{cfg.batch, model.cell.d_h()})
        s.carry = it->second;
    else
        s.carry = Tensor<float>({cfg.batch, model.cell.d_h()});
    return s;
}

}  // namespace mzu
