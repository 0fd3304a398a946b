#include "mzu/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace mzu {

std::vector<int> encode_text(const CharCorpus& corpus, const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        if (auto id = corpus.id_of(c)) {
            ids.push_back(*id);
        } else if (corpus.unknown_id) {
            ids.push_back(*corpus.unknown_id);
        } else {
            throw DataError("character '" + std::string(1, static_cast<char>(c)) + "' is not in the model vocabulary");
        }
    }
    return ids;
}

TextEncoding encode_for_analysis(const ParamStore<float>& params, const ModelConfig& model,
                                 const std::vector<int>& ids) {
    const ParamStore<double> store = params.cast<double>();
    TextEncoding enc;
    enc.ids = ids;
    Tensor<double> h({1, model.cell.d_h()});
    for (int id : ids) {
        Tape<double> tape;
        tape.set_recording(false);
        const int one[1] = {id};
        Var<double> x = ops::embedding(tape.param(store, "embed"), std::span<const int>(one));
        auto traces = deep_transition_step(store, kRnnPrefix, model.cell, x, tape.constant(h), StepContext{});
        h = traces.back().h.value();
        enc.states.push_back(h.reshaped({model.cell.d_h()}));
        enc.candidates.push_back(traces.front().candidate.value().reshaped({model.cell.d_h()}));
        if (const auto& mh = traces.front().mh) {
            const auto& f = mh->abstracted.value();
            enc.abstracted.push_back(f.reshaped({f.shape()[1], f.shape()[2]}));
            enc.mh_out.push_back(mh->out.value().reshaped({model.cell.d_h()}));
        }
    }
    return enc;
}

namespace {

double cosine(const Tensor<double>& a, const Tensor<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double den = std::sqrt(na) * std::sqrt(nb);
    if (den < 1e-12) return 0.0;
    return std::clamp(dot / den, -1.0, 1.0);
}

RelevanceMap build_map(const std::string& text, const std::vector<Tensor<double>>& query_vecs,
                       const std::vector<Tensor<double>>& states, std::size_t last_q) {
    RelevanceMap m;
    m.context = text;
    const std::size_t n = states.size();
    for (std::size_t t = n - last_q; t < n; ++t) {
        m.query_positions.push_back(t);
        std::vector<double> row(t);
        for (std::size_t p = 0; p < t; ++p) row[p] = cosine(query_vecs[t], states[p]);
        m.rows.push_back(std::move(row));
    }
    return m;
}

void check_lengths(const std::string& text, std::size_t last_q) {
    if (last_q == 0) throw std::invalid_argument("relevance map: last_q must be positive");
    if (text.size() <= last_q)
        throw std::invalid_argument("relevance map: text of length " + std::to_string(text.size()) +
                                    " must be longer than last_q = " + std::to_string(last_q));
}

}  // namespace

RelevanceMap relevance_map(const ParamStore<float>& params, const ModelConfig& model, const CharCorpus& corpus,
                           const std::string& text, std::size_t last_q) {
    check_lengths(text, last_q);
    const TextEncoding enc = encode_for_analysis(params, model, encode_text(corpus, text));
    return build_map(text, enc.candidates, enc.states, last_q);
}

std::vector<Tensor<double>> zone_contributions(const ParamStore<float>& params, const ModelConfig& model,
                                               const Tensor<double>& f) {
    const std::size_t J = f.shape()[0], d_o = f.shape()[1], d_h = model.cell.d_h();
    const Tensor<float>& w = params.get(cell_prefix(kRnnPrefix, model.cell, 0) + "mh/agg/w");
    if (w.shape() != Shape{J * d_o, d_h}) throw ShapeError("zone_contributions", {f.shape(), w.shape()}, "aggregation matrix");
    std::vector<Tensor<double>> out;
    for (std::size_t k = 0; k < J; ++k) {
        Tensor<double> c({d_h});
        for (std::size_t i = 0; i < d_o; ++i) {
            const double fi = f.at(k, i);
            for (std::size_t j = 0; j < d_h; ++j) c[j] += fi * static_cast<double>(w.at(k * d_o + i, j));
        }
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<RelevanceMap> zone_relevance_map(const ParamStore<float>& params, const ModelConfig& model,
                                             const CharCorpus& corpus, const std::string& text, std::size_t last_q) {
    if (model.cell.kind != CellKind::kMzu || model.cell.ablation == Ablation::kRegularTrans)
        throw std::invalid_argument("zone relevance needs an MZU model with a multi-zone M_h");
    check_lengths(text, last_q);
    const TextEncoding enc = encode_for_analysis(params, model, encode_text(corpus, text));
    const std::size_t J = model.cell.m.num_out();
    std::vector<std::vector<Tensor<double>>> per_zone(J);
    for (const auto& f : enc.abstracted) {
        auto contrib = zone_contributions(params, model, f);
        for (std::size_t k = 0; k < J; ++k) per_zone[k].push_back(std::move(contrib[k]));
    }
    std::vector<RelevanceMap> maps;
    for (std::size_t k = 0; k < J; ++k) {
        maps.push_back(build_map(text, per_zone[k], enc.states, last_q));
        maps.back().zone = k;
    }
    return maps;
}

MapFormat parse_map_format(const std::string& s) {
    if (s == "pgm") return MapFormat::kPgm;
    if (s == "csv") return MapFormat::kCsv;
    throw std::invalid_argument("format: expected pgm or csv, got '" + s + "'");
}

std::uint8_t relevance_pixel(double r) {
    const double v = std::round(255.0 * (std::clamp(r, -1.0, 1.0) + 1.0) / 2.0);
    return static_cast<std::uint8_t>(v);
}

namespace {

std::string csv_cell(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

}  // namespace

void export_map(const RelevanceMap& map, const std::filesystem::path& path, MapFormat format) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const std::size_t width = map.context.size();
    if (format == MapFormat::kPgm) {
        out << "P5\n" << width << ' ' << map.rows.size() << "\n255\n";
        for (const auto& row : map.rows) {
            std::string px(width, '\0');
            for (std::size_t p = 0; p < row.size(); ++p) px[p] = static_cast<char>(relevance_pixel(row[p]));
            out.write(px.data(), static_cast<std::streamsize>(px.size()));
        }
    } else {
        out << "query";
        for (char c : map.context) out << ',' << csv_cell(std::string(1, c));
        out << '\n';
        char buf[40];
        for (std::size_t q = 0; q < map.rows.size(); ++q) {
            out << map.query_positions[q];
            for (std::size_t p = 0; p < width; ++p) {
                out << ',';
                if (p < map.rows[q].size()) {
                    std::snprintf(buf, sizeof buf, "%.9g", map.rows[q][p]);
                    out << buf;
                }
            }
            out << '\n';
        }
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace mzu
