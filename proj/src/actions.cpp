#include "lplm/actions.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "lplm/checkpoint.hpp"
#include "lplm/rng.hpp"

namespace lplm::actions {

using core::NumericError;
using core::Rng;
using core::Tensor;

void ActionVocabulary::save(const std::string& path) const {
    core::save_checkpoint(path, {{"action_centroids", &centroids}});
}

ActionVocabulary ActionVocabulary::load(const std::string& path, int expected_c, int expected_d) {
    ActionVocabulary v;
    v.centroids = Tensor({expected_c, expected_d});
    core::load_checkpoint(path, {{"action_centroids", &v.centroids}});
    return v;
}

SentenceEmbedding encode_sentence(const corpus::Sentence& sentence, const Tensor& embedding_table) {
    if (sentence.empty()) throw std::invalid_argument("encode_sentence: empty sentence");
    const int v = embedding_table.dim(0), d = embedding_table.dim(1);
    Tensor mean({d});
    for (int tok : sentence) {
        if (tok < 0 || tok >= v) {
            throw std::out_of_range("encode_sentence: token id " + std::to_string(tok) + " out of range");
        }
        for (int j = 0; j < d; ++j) mean(j) += embedding_table(tok, j);
    }
    double norm2 = 0.0;
    for (int j = 0; j < d; ++j) {
        mean(j) /= static_cast<double>(sentence.size());
        norm2 += mean(j) * mean(j);
    }
    if (norm2 == 0.0) throw NumericError("degenerate embedding");
    const double inv = 1.0 / std::sqrt(norm2);
    for (int j = 0; j < d; ++j) mean(j) *= inv;
    return SentenceEmbedding{std::move(mean)};
}

namespace {
double sq_dist(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
        const double c = a[j] - b[j];
        s += c * c;
    }
    return s;
}
}  // namespace

ActionVocabulary kmeans_fit(const std::vector<SentenceEmbedding>& embeddings, int c, uint64_t seed,
                            const KMeansOptions& opts, KMeansTrace* trace) {
    const int n = static_cast<int>(embeddings.size());
    if (c < 2) throw std::invalid_argument("kmeans: need at least 2 clusters");
    if (n < c) {
        throw std::invalid_argument("kmeans: " + std::to_string(n) + " points for " + std::to_string(c) + " clusters");
    }
    const int d = embeddings[0].vector.dim(0);
    for (const auto& e : embeddings) {
        if (e.vector.dim(0) != d) throw core::ShapeError("kmeans: inconsistent embedding dimensions");
    }

    Rng rng(seed);
    Tensor centroids({c, d});

    // k-means++ seeding: first centroid uniform, the rest proportional to the
    // squared distance to the nearest chosen centroid.
    std::vector<double> best_d2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
    {
        const int first = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
        for (int j = 0; j < d; ++j) centroids(0, j) = embeddings[static_cast<size_t>(first)].vector(j);
        for (int k = 1; k < c; ++k) {
            double total = 0.0;
            for (int i = 0; i < n; ++i) {
                const double d2 = sq_dist(embeddings[static_cast<size_t>(i)].vector.data(),
                                          centroids.data() + static_cast<size_t>(k - 1) * d, d);
                if (d2 < best_d2[static_cast<size_t>(i)]) best_d2[static_cast<size_t>(i)] = d2;
                total += best_d2[static_cast<size_t>(i)];
            }
            int pick = -1;
            if (total <= 0.0) {
                // all points coincide with chosen centroids; fall back to uniform
                pick = static_cast<int>(rng.next_below(static_cast<uint64_t>(n)));
            } else {
                const double u = rng.next_double() * total;
                double cum = 0.0;
                for (int i = 0; i < n; ++i) {
                    cum += best_d2[static_cast<size_t>(i)];
                    if (u < cum) {
                        pick = i;
                        break;
                    }
                }
                if (pick < 0) pick = n - 1;
            }
            for (int j = 0; j < d; ++j) centroids(k, j) = embeddings[static_cast<size_t>(pick)].vector(j);
        }
    }

    std::vector<int> assign(static_cast<size_t>(n), -1);
    std::vector<double> dist(static_cast<size_t>(n), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(c), 0);
    Tensor next({c, d});

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        // assignment, ties to the lowest centroid id
        double total_inertia = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* p = embeddings[static_cast<size_t>(i)].vector.data();
            double best = std::numeric_limits<double>::infinity();
            int who = -1;
            for (int k = 0; k < c; ++k) {
                const double d2 = sq_dist(p, centroids.data() + static_cast<size_t>(k) * d, d);
                if (d2 < best) {
                    best = d2;
                    who = k;
                }
            }
            assign[static_cast<size_t>(i)] = who;
            dist[static_cast<size_t>(i)] = best;
            total_inertia += best;
        }
        if (trace) {
            trace->inertia_per_iter.push_back(total_inertia);
            trace->iters = iter + 1;
        }

        // handle empty clusters: steal the point farthest from its centroid
        std::fill(counts.begin(), counts.end(), 0);
        for (int i = 0; i < n; ++i) ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
        for (int k = 0; k < c; ++k) {
            if (counts[static_cast<size_t>(k)] > 0) continue;
            int far = -1;
            double far_d = -1.0;
            for (int i = 0; i < n; ++i) {
                if (counts[static_cast<size_t>(assign[static_cast<size_t>(i)])] <= 1) continue;
                if (dist[static_cast<size_t>(i)] > far_d) {
                    far_d = dist[static_cast<size_t>(i)];
                    far = i;
                }
            }
            if (far < 0) continue;  // every remaining cluster is a singleton
            --counts[static_cast<size_t>(assign[static_cast<size_t>(far)])];
            assign[static_cast<size_t>(far)] = k;
            counts[static_cast<size_t>(k)] = 1;
            dist[static_cast<size_t>(far)] = 0.0;
        }

        // means
        std::fill(next.vec().begin(), next.vec().end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const int k = assign[static_cast<size_t>(i)];
            const double* p = embeddings[static_cast<size_t>(i)].vector.data();
            double* row = next.data() + static_cast<size_t>(k) * d;
            for (int j = 0; j < d; ++j) row[j] += p[j];
        }
        double movement = 0.0;
        for (int k = 0; k < c; ++k) {
            double* row = next.data() + static_cast<size_t>(k) * d;
            const double inv = 1.0 / static_cast<double>(counts[static_cast<size_t>(k)]);
            for (int j = 0; j < d; ++j) row[j] *= inv;
            movement = std::max(movement, sq_dist(row, centroids.data() + static_cast<size_t>(k) * d, d));
        }
        std::swap(centroids.vec(), next.vec());
        if (std::sqrt(movement) < opts.tol) break;
    }

    return ActionVocabulary{std::move(centroids)};
}

int assign_action(const SentenceEmbedding& embedding, const ActionVocabulary& vocab) {
    const int c = vocab.count(), d = vocab.dim();
    if (embedding.vector.dim(0) != d) {
        throw core::ShapeError("assign_action: embedding dim " + std::to_string(embedding.vector.dim(0)) +
                               " vs centroid dim " + std::to_string(d));
    }
    double best = std::numeric_limits<double>::infinity();
    int who = 0;
    for (int k = 0; k < c; ++k) {
        const double d2 = sq_dist(embedding.vector.data(), vocab.centroids.data() + static_cast<size_t>(k) * d, d);
        if (d2 < best) {
            best = d2;
            who = k;
        }
    }
    return who;
}

double inertia(const std::vector<SentenceEmbedding>& embeddings, const ActionVocabulary& vocab) {
    const int d = vocab.dim();
    double total = 0.0;
    for (const auto& e : embeddings) {
        double best = std::numeric_limits<double>::infinity();
        for (int k = 0; k < vocab.count(); ++k) {
            best = std::min(best, sq_dist(e.vector.data(), vocab.centroids.data() + static_cast<size_t>(k) * d, d));
        }
        total += best;
    }
    return total;
}

std::vector<LabeledArticle> label_corpus(const std::vector<corpus::Article>& articles, const ActionVocabulary& vocab,
                                         const Tensor& embedding_table) {
    if (vocab.count() < 2) throw std::invalid_argument("label_corpus: empty or degenerate action vocabulary");
    std::vector<LabeledArticle> out;
    out.reserve(articles.size());
    for (const auto& a : articles) {
        LabeledArticle la;
        la.article = a;
        la.actions.reserve(a.sentences.size());
        for (const auto& s : a.sentences) {
            try {
                la.actions.push_back(assign_action(encode_sentence(s, embedding_table), vocab));
            } catch (const std::exception& e) {
                throw std::runtime_error("article '" + a.id + "': " + e.what());
            }
        }
        out.push_back(std::move(la));
    }
    return out;
}

void save_labeled_jsonl(const std::string& path, const std::vector<LabeledArticle>& labeled) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw core::IoError("cannot write labeled corpus: " + path);
    for (const auto& la : labeled) {
        nlohmann::ordered_json j;
        j["id"] = la.article.id;
        j["sentences"] = la.article.sentences;
        if (la.article.latent_states) {
            j["latent_states"] = *la.article.latent_states;
        } else {
            j["latent_states"] = nullptr;
        }
        j["actions"] = la.actions;
        out << j.dump() << "\n";
    }
    if (!out) throw core::IoError("write failed for labeled corpus: " + path);
}

std::vector<LabeledArticle> load_labeled_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw core::IoError("cannot open labeled corpus: " + path);
    std::vector<LabeledArticle> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        bool blank = true;
        for (char ch : line) {
            if (!std::isspace(static_cast<unsigned char>(ch))) {
                blank = false;
                break;
            }
        }
        if (blank) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        LabeledArticle la;
        la.article.id = j.at("id").get<std::string>();
        la.article.sentences = j.at("sentences").get<std::vector<corpus::Sentence>>();
        if (j.contains("latent_states") && !j.at("latent_states").is_null()) {
            la.article.latent_states = j.at("latent_states").get<std::vector<int>>();
        }
        la.actions = j.at("actions").get<std::vector<int>>();
        if (la.actions.size() != la.article.sentences.size()) {
            throw core::IoError(path + ":" + std::to_string(lineno) + ": actions length mismatch");
        }
        out.push_back(std::move(la));
    }
    return out;
}

}  // namespace lplm::actions
