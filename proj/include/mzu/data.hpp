#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzu/objective.hpp"

namespace mzu {

// Unreadable, empty or malformed input data.
class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

enum class Split { kTrain, kValid, kTest };

std::string to_string(Split s);

/// Byte-level character corpus. Symbols get ids in order of first
/// appearance in the training split. Evaluation symbols never seen in
/// training map to one reserved id, which only exists (and only widens the
/// output layer) when such a symbol occurs.
struct CharCorpus {
    std::vector<unsigned char> vocab;
    std::vector<int> train;
    std::vector<int> valid;
    std::vector<int> test;
    std::optional<int> unknown_id;

    std::size_t num_classes() const { return vocab.size() + (unknown_id ? 1 : 0); }
    const std::vector<int>& split(Split s) const;
    std::optional<int> id_of(unsigned char c) const;
    std::string decode(const std::vector<int>& ids) const;
    // Lines of a split, newline symbols removed; empty lines skipped.
    std::vector<std::vector<int>> lines(Split s) const;
};

/// Builds a corpus from in-memory split texts.
CharCorpus build_char_corpus(const std::string& train, const std::string& valid, const std::string& test);

/// Reads three pre-split files. Preprocessing (e.g. PTB character
/// formatting) is expected to have been applied already.
CharCorpus load_char_corpus(const std::filesystem::path& train, const std::filesystem::path& valid,
                            const std::filesystem::path& test);

/// Reads one file and splits it contiguously by the given fractions.
CharCorpus load_char_corpus(const std::filesystem::path& file, std::array<double, 3> fractions);

struct SplitSizes {
    std::size_t train, valid, test;
};
SplitSizes split_sizes(std::size_t n, std::array<double, 3> fractions);

std::string read_file(const std::filesystem::path& path);

/// Reshapes an id sequence into `batch` contiguous streams and cuts them
/// into chunks of `tbptt` steps. Targets are inputs shifted by one inside a
/// stream; any remainder that does not fill a whole chunk is dropped.
class StreamBatcher {
   public:
    struct Chunk {
        // [batch x tbptt], stream-major: element (b, t) at b * tbptt + t.
        std::vector<int> inputs;
        std::vector<int> targets;
    };

    StreamBatcher(const std::vector<int>& ids, std::size_t batch, std::size_t tbptt);

    std::size_t num_chunks() const { return num_chunks_; }
    std::size_t batch() const { return batch_; }
    std::size_t tbptt() const { return tbptt_; }
    std::size_t stream_length() const { return stream_len_; }
    Chunk chunk(std::size_t index) const;

   private:
    std::vector<int> ids_;
    std::size_t batch_, tbptt_, stream_len_, num_chunks_;
};

/// Word vocabulary for the aspect task; id 0 is the unknown word.
class WordVocab {
   public:
    WordVocab() { add("<unk>"); }
    int add(const std::string& w);
    int lookup(const std::string& w) const;
    std::size_t size() const { return words_.size(); }
    const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& words() const { return words_; }

   private:
    std::vector<std::string> words_;
    std::map<std::string, int> ids_;
};

struct AspectExample {
    std::string sentence;  // lowercased source text; the HDS grouping key
    std::vector<int> tokens;
    std::vector<int> aspect;
    AspectLabel label = AspectLabel::kNeutral;
};

struct AspectDataset {
    std::vector<AspectExample> examples;
    bool hds = false;
};

/// Reads `sentence<TAB>aspect<TAB>label` rows. Text is lowercased and split
/// on whitespace. A first row whose label column reads "label" is a header.
/// New words are added to `vocab` when `grow` is set, else map to <unk>.
AspectDataset load_aspect_tsv(const std::filesystem::path& path, WordVocab& vocab, bool grow = true);
AspectDataset parse_aspect_tsv(const std::string& text, WordVocab& vocab, bool grow = true);

/// Keeps sentences with at least two aspects carrying at least two distinct
/// labels, one copy per aspect.
AspectDataset build_hds(const AspectDataset& ds);

}  // namespace mzu
