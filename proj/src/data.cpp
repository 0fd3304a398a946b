#include "mzu/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace mzu {

std::string to_string(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kValid: return "valid";
        case Split::kTest: return "test";
    }
    return "?";
}

const std::vector<int>& CharCorpus::split(Split s) const {
    switch (s) {
        case Split::kTrain: return train;
        case Split::kValid: return valid;
        case Split::kTest: return test;
    }
    return train;
}

std::optional<int> CharCorpus::id_of(unsigned char c) const {
    auto it = std::find(vocab.begin(), vocab.end(), c);
    if (it == vocab.end()) return std::nullopt;
    return static_cast<int>(it - vocab.begin());
}

std::string CharCorpus::decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(static_cast<std::size_t>(id) < vocab.size() ? static_cast<char>(vocab[id]) : '?');
    return out;
}

std::vector<std::vector<int>> CharCorpus::lines(Split s) const {
    const auto nl = id_of('\n');
    std::vector<std::vector<int>> out;
    std::vector<int> cur;
    for (int id : split(s)) {
        if (nl && id == *nl) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(id);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

CharCorpus build_char_corpus(const std::string& train, const std::string& valid, const std::string& test) {
    if (train.empty()) throw DataError("training split is empty");
    CharCorpus c;
    std::array<int, 256> ids;
    ids.fill(-1);
    for (unsigned char ch : train) {
        if (ids[ch] < 0) {
            ids[ch] = static_cast<int>(c.vocab.size());
            c.vocab.push_back(ch);
        }
    }
    c.train.reserve(train.size());
    for (unsigned char ch : train) c.train.push_back(ids[ch]);
    auto encode = [&](const std::string& text, std::vector<int>& out) {
        out.reserve(text.size());
        for (unsigned char ch : text) {
            if (ids[ch] >= 0) {
                out.push_back(ids[ch]);
            } else {
                if (!c.unknown_id) c.unknown_id = static_cast<int>(c.vocab.size());
                out.push_back(*c.unknown_id);
            }
        }
    };
    encode(valid, c.valid);
    encode(test, c.test);
    return c;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CharCorpus load_char_corpus(const std::filesystem::path& train, const std::filesystem::path& valid,
                            const std::filesystem::path& test) {
    std::string tr = read_file(train), va = read_file(valid), te = read_file(test);
    for (const auto& [p, t] : {std::pair{&train, &tr}, {&valid, &va}, {&test, &te}})
        if (t->empty()) throw DataError("empty file: " + p->string());
    return build_char_corpus(tr, va, te);
}

SplitSizes split_sizes(std::size_t n, std::array<double, 3> f) {
    for (double x : f)
        if (x < 0) throw DataError("split fractions must be non-negative");
    if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-6) throw DataError("split fractions must sum to 1");
    const auto take = [n](double frac) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * frac + 1e-9)); };
    SplitSizes s{take(f[0]), take(f[1]), 0};
    s.valid = std::min(s.valid, n - s.train);
    s.test = n - s.train - s.valid;
    return s;
}

CharCorpus load_char_corpus(const std::filesystem::path& file, std::array<double, 3> fractions) {
    const std::string text = read_file(file);
    if (text.empty()) throw DataError("empty file: " + file.string());
    const SplitSizes s = split_sizes(text.size(), fractions);
    return build_char_corpus(text.substr(0, s.train), text.substr(s.train, s.valid), text.substr(s.train + s.valid));
}

StreamBatcher::StreamBatcher(const std::vector<int>& ids, std::size_t batch, std::size_t tbptt)
    : ids_(ids), batch_(batch), tbptt_(tbptt) {
    if (batch == 0 || tbptt == 0) throw DataError("batch and tbptt length must be positive");
    if (ids.size() < batch * (tbptt + 1)) {
        throw DataError("corpus of " + std::to_string(ids.size()) + " symbols is shorter than batch*(tbptt+1) = " +
                        std::to_string(batch * (tbptt + 1)) + "; reduce --batch or --tbptt");
    }
    stream_len_ = ids.size() / batch;
    num_chunks_ = (stream_len_ - 1) / tbptt;
}

StreamBatcher::Chunk StreamBatcher::chunk(std::size_t index) const {
    if (index >= num_chunks_) throw std::out_of_range("chunk index out of range");
    Chunk c;
    c.inputs.resize(batch_ * tbptt_);
    c.targets.resize(batch_ * tbptt_);
    for (std::size_t b = 0; b < batch_; ++b) {
        const std::size_t base = b * stream_len_ + index * tbptt_;
        for (std::size_t t = 0; t < tbptt_; ++t) {
            c.inputs[b * tbptt_ + t] = ids_[base + t];
            c.targets[b * tbptt_ + t] = ids_[base + t + 1];
        }
    }
    return c;
}

int WordVocab::add(const std::string& w) {
    auto it = ids_.find(w);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(words_.size());
    words_.push_back(w);
    ids_.emplace(w, id);
    return id;
}

int WordVocab::lookup(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? 0 : it->second;
}

namespace {

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
        const std::size_t tab = line.find('\t', start);
        cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return cols;
}

std::vector<int> tokenize(const std::string& text, WordVocab& vocab, bool grow) {
    std::istringstream ss(text);
    std::vector<int> ids;
    for (std::string w; ss >> w;) ids.push_back(grow ? vocab.add(w) : vocab.lookup(w));
    return ids;
}

}  // namespace

AspectDataset parse_aspect_tsv(const std::string& text, WordVocab& vocab, bool grow) {
    AspectDataset ds;
    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        const auto cols = split_tabs(line);
        if (cols.size() != 3)
            throw DataError("line " + std::to_string(line_no) + ": expected 3 tab-separated columns, found " + std::to_string(cols.size()));
        const std::string label_text = lowercase(cols[2]);
        if (line_no == 1 && label_text == "label") continue;
        const auto label = parse_aspect_label(label_text);
        if (!label) throw DataError("line " + std::to_string(line_no) + ": unknown label '" + cols[2] + "'");
        AspectExample ex;
        ex.sentence = lowercase(cols[0]);
        ex.tokens = tokenize(ex.sentence, vocab, grow);
        ex.aspect = tokenize(lowercase(cols[1]), vocab, grow);
        ex.label = *label;
        if (ex.tokens.empty()) throw DataError("line " + std::to_string(line_no) + ": empty sentence");
        if (ex.aspect.empty()) throw DataError("line " + std::to_string(line_no) + ": empty aspect");
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

AspectDataset load_aspect_tsv(const std::filesystem::path& path, WordVocab& vocab, bool grow) {
    return parse_aspect_tsv(read_file(path), vocab, grow);
}

AspectDataset build_hds(const AspectDataset& ds) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const AspectExample*>> groups;
    for (const auto& ex : ds.examples) {
        auto [it, inserted] = groups.try_emplace(ex.sentence);
        if (inserted) order.push_back(ex.sentence);
        it->second.push_back(&ex);
    }
    AspectDataset out;
    out.hds = true;
    for (const auto& key : order) {
        const auto& members = groups.at(key);
        std::set<AspectLabel> labels;
        for (const auto* ex : members) labels.insert(ex->label);
        if (members.size() < 2 || labels.size() < 2) continue;
        for (const auto* ex : members) out.examples.push_back(*ex);
    }
    return out;
}

}  // namespace mzu
