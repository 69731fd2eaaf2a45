#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lplm/tensor.hpp"

namespace lplm::corpus {

// Reserved token ids.
constexpr int kPad = 0;
constexpr int kUnk = 1;
constexpr int kBos = 2;
constexpr int kEos = 3;
constexpr int kNumReserved = 4;

using Sentence = std::vector<int>;  // token ids, non-empty

struct Article {
    std::string id;
    std::vector<Sentence> sentences;
    // Generating state per sentence; synthetic corpora only.
    std::optional<std::vector<int>> latent_states;

    int64_t token_count() const {
        int64_t n = 0;
        for (const auto& s : sentences) n += static_cast<int64_t>(s.size());
        return n;
    }
};

class TokenVocabulary {
public:
    TokenVocabulary();

    // Appends a non-reserved token; ids stay contiguous.
    int add(const std::string& token);
    int id_or_unk(const std::string& token) const;
    const std::string& token(int id) const;
    bool contains(const std::string& token) const;
    int size() const { return static_cast<int>(id_to_token_.size()); }

    const std::vector<std::string>& tokens() const { return id_to_token_; }

    void save(const std::string& path) const;
    static TokenVocabulary load(const std::string& path);

private:
    std::vector<std::string> id_to_token_;
    std::map<std::string, int> token_to_id_;
};

struct SyntheticSpec {
    int num_states = 0;
    std::vector<std::vector<double>> transition;  // S x S, row-stochastic
    std::vector<std::vector<double>> emission;    // S x W, row-stochastic
    std::pair<int, int> sentence_length_range;    // emitted words per sentence
    std::pair<int, int> sentences_per_article_range;
    uint64_t seed = 0;

    // Throws on non-stochastic rows (tolerance 1e-9) or empty ranges.
    void validate() const;

    static SyntheticSpec from_json_file(const std::string& path);
    static SyntheticSpec from_json_text(const std::string& text);
};

// Splits text at {., !, ?} followed by whitespace then an uppercase letter,
// or at end of text. Never drops non-whitespace characters; whitespace-only
// input yields an empty sequence.
std::vector<std::string> segment_sentences(const std::string& text);

// Maximal runs of non-space non-punctuation characters are words; each
// punctuation character is its own token.
std::vector<std::string> split_words(const std::string& sentence);

// Frequency-ranked vocabulary (ties broken lexicographically), capped at
// max_size entries including the 4 reserved ids. Throws on an empty corpus.
TokenVocabulary build_vocab(const std::vector<std::string>& texts, int max_size);

Sentence tokenize(const std::string& sentence, const TokenVocabulary& vocab);
std::string detokenize(const Sentence& s, const TokenVocabulary& vocab);

// Draws articles from the state chain: initial state uniform, states evolve
// by the transition matrix, sentence tokens by the emission row of the
// state, each sentence terminated with ".". Articles carry latent_states.
// Fully determined by (spec, num_articles).
std::vector<Article> generate_synthetic_corpus(const SyntheticSpec& spec, int num_articles);

// Vocabulary the generator emits against: reserved ids, then ".", then one
// capitalized pseudo-word per emission column.
TokenVocabulary synthetic_vocab(int inventory_size);
int synthetic_word_id(int word);  // emission column -> token id
constexpr int kSyntheticTerminatorId = kNumReserved;  // "."

// JSON-lines persistence: {"id": str, "sentences": [[int,...],...],
// "latent_states": [int,...] | null} per line.
void save_corpus_jsonl(const std::string& path, const std::vector<Article>& articles);
std::vector<Article> load_corpus_jsonl(const std::string& path);

// One article per .txt file, segmented and tokenized. File order is sorted
// by filename for reproducibility.
std::vector<Article> ingest_text_dir(const std::string& dir, const TokenVocabulary& vocab);
std::vector<std::string> read_text_dir(const std::string& dir);  // raw texts, sorted by filename

}  // namespace lplm::corpus
