#pragma once

#include <string>
#include <vector>

#include "lplm/corpus.hpp"
#include "lplm/tensor.hpp"

namespace lplm::actions {

// Unit-norm sentence vector.
struct SentenceEmbedding {
    core::Tensor vector;  // rank-1 [d]
};

// C cluster centroids over sentence embeddings; centroid index is the
// abstract writing action id.
struct ActionVocabulary {
    core::Tensor centroids;  // [C, d]

    int count() const { return centroids.dim(0); }
    int dim() const { return centroids.dim(1); }

    void save(const std::string& path) const;
    static ActionVocabulary load(const std::string& path, int expected_c, int expected_d);
};

struct LabeledArticle {
    corpus::Article article;
    std::vector<int> actions;  // one per sentence, < C
};

// Mean of the token embedding rows, L2-normalized. Throws on an empty
// sentence or an exactly-zero mean ("degenerate embedding").
SentenceEmbedding encode_sentence(const corpus::Sentence& sentence, const core::Tensor& embedding_table);

struct KMeansOptions {
    int max_iters = 100;
    double tol = 1e-6;
};

struct KMeansTrace {
    std::vector<double> inertia_per_iter;  // after each Lloyd assignment
    int iters = 0;
};

// k-means++ seeding (first centroid uniform, then squared-distance
// proportional) followed by Lloyd iterations until centroid movement < tol.
// Empty clusters are re-seeded with the point farthest from its assigned
// centroid. Deterministic for a fixed seed.
ActionVocabulary kmeans_fit(const std::vector<SentenceEmbedding>& embeddings, int c, uint64_t seed,
                            const KMeansOptions& opts = {}, KMeansTrace* trace = nullptr);

// Index of the nearest centroid by Euclidean distance; ties -> lowest id.
int assign_action(const SentenceEmbedding& embedding, const ActionVocabulary& vocab);

double inertia(const std::vector<SentenceEmbedding>& embeddings, const ActionVocabulary& vocab);

// actions[i] = assign_action(encode_sentence(sentences[i])). Errors are
// rethrown with the article id attached.
std::vector<LabeledArticle> label_corpus(const std::vector<corpus::Article>& articles, const ActionVocabulary& vocab,
                                         const core::Tensor& embedding_table);

// Labeled corpus on disk: the corpus JSON-lines record plus "actions".
void save_labeled_jsonl(const std::string& path, const std::vector<LabeledArticle>& labeled);
std::vector<LabeledArticle> load_labeled_jsonl(const std::string& path);

}  // namespace lplm::actions
