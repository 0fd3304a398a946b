#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mzu/data.hpp"
#include "mzu/language_model.hpp"

namespace mzu {

/// Cosine relevance of earlier states to the candidate activation at each
/// query position. rows[q][p] relates query_positions[q] to position p, so
/// row q has exactly query_positions[q] entries.
struct RelevanceMap {
    std::string context;                       // the encoded text, one byte per position
    std::vector<std::size_t> query_positions;  // the last Q positions, ascending
    std::vector<std::vector<double>> rows;
    std::optional<std::size_t> zone;           // set for zone-specific maps
};

/// Encoded pass over one text with every intermediate kept.
struct TextEncoding {
    std::vector<int> ids;
    std::vector<Tensor<double>> states;      // block output h_p, [d_h]
    std::vector<Tensor<double>> candidates;  // input-cell h~_t after layer norm, before dropout
    // Input-cell M_h pieces; empty for models without one.
    std::vector<Tensor<double>> abstracted;  // F, [J, d_o]
    std::vector<Tensor<double>> mh_out;      // M_h output before layer norm, [d_h]
};

std::vector<int> encode_text(const CharCorpus& corpus, const std::string& text);

TextEncoding encode_for_analysis(const ParamStore<float>& params, const ModelConfig& model,
                                 const std::vector<int>& ids);

/// rows[q][p] = cos(h~_t, h_p) for t = query_positions[q] and all p < t.
RelevanceMap relevance_map(const ParamStore<float>& params, const ModelConfig& model, const CharCorpus& corpus,
                           const std::string& text, std::size_t last_q);

/// Contribution of F-zone k to the M_h output: F_k times the k-th row block
/// of the aggregation matrix. Summed over k and added to the aggregation bias
/// it gives the M_h output exactly.
std::vector<Tensor<double>> zone_contributions(const ParamStore<float>& params, const ModelConfig& model,
                                               const Tensor<double>& abstracted);

/// One map per F-zone (J of them): relevance of earlier states to each
/// zone's contribution vector.
std::vector<RelevanceMap> zone_relevance_map(const ParamStore<float>& params, const ModelConfig& model,
                                             const CharCorpus& corpus, const std::string& text, std::size_t last_q);

enum class MapFormat { kPgm, kCsv };
MapFormat parse_map_format(const std::string& s);

/// PGM: a Q x context grayscale with pixel round(255 * (r + 1) / 2) and
/// undefined cells (p >= t) black. CSV: header of context characters, one
/// row per query, blank cells for p >= t.
void export_map(const RelevanceMap& map, const std::filesystem::path& path, MapFormat format);

std::uint8_t relevance_pixel(double r);

}  // namespace mzu
