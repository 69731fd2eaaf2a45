#include "lplm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "lplm/checkpoint.hpp"
#include "lplm/rng.hpp"

namespace lplm::corpus {

using core::IoError;
using core::NumericError;
using core::Rng;

TokenVocabulary::TokenVocabulary() {
    id_to_token_ = {"<pad>", "<unk>", "<bos>", "<eos>"};
    for (int i = 0; i < kNumReserved; ++i) token_to_id_[id_to_token_[static_cast<size_t>(i)]] = i;
}

int TokenVocabulary::add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    const int id = size();
    id_to_token_.push_back(token);
    token_to_id_[token] = id;
    return id;
}

int TokenVocabulary::id_or_unk(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& TokenVocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab: token id " + std::to_string(id));
    return id_to_token_[static_cast<size_t>(id)];
}

bool TokenVocabulary::contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

void TokenVocabulary::save(const std::string& path) const {
    nlohmann::ordered_json j;
    j["tokens"] = id_to_token_;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary: " + path);
    out << j.dump() << "\n";
}

TokenVocabulary TokenVocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary: " + path);
    nlohmann::json j;
    in >> j;
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens.size() < kNumReserved) throw IoError("vocabulary too small in " + path);
    TokenVocabulary v;
    for (size_t i = kNumReserved; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
}

// ---------------------------------------------------------------------------

namespace {
bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

bool splits_after(const std::string& text, size_t term_pos) {
    // Boundary when the terminator is followed by whitespace and then an
    // uppercase letter, or ends the text (possibly through trailing spaces).
    size_t i = term_pos + 1;
    if (i >= text.size()) return true;
    if (!std::isspace(static_cast<unsigned char>(text[i]))) return false;
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) return true;
    return std::isupper(static_cast<unsigned char>(text[i])) != 0;
}

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}
}  // namespace

std::vector<std::string> segment_sentences(const std::string& text) {
    std::vector<std::string> out;
    size_t start = 0;
    for (size_t i = 0; i < text.size(); ++i) {
        if (!is_terminator(text[i])) continue;
        // run of terminators counts as one potential boundary at its end
        if (i + 1 < text.size() && is_terminator(text[i + 1])) continue;
        if (splits_after(text, i)) {
            std::string sent = trim(text.substr(start, i + 1 - start));
            if (!sent.empty()) out.push_back(std::move(sent));
            start = i + 1;
        }
    }
    std::string tail = trim(text.substr(start));
    if (!tail.empty()) out.push_back(std::move(tail));
    return out;
}

std::vector<std::string> split_words(const std::string& sentence) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : sentence) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) words.push_back(std::exchange(cur, {}));
        } else if (std::ispunct(static_cast<unsigned char>(c))) {
            if (!cur.empty()) words.push_back(std::exchange(cur, {}));
            words.push_back(std::string(1, c));
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

TokenVocabulary build_vocab(const std::vector<std::string>& texts, int max_size) {
    if (max_size < kNumReserved + 1) {
        throw std::invalid_argument("build_vocab: max_size must be at least " + std::to_string(kNumReserved + 1));
    }
    std::map<std::string, int64_t> counts;
    for (const auto& text : texts) {
        for (const auto& w : split_words(text)) ++counts[w];
    }
    if (counts.empty()) throw std::invalid_argument("empty corpus");

    std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    TokenVocabulary v;
    const size_t keep = static_cast<size_t>(max_size - kNumReserved);
    for (size_t i = 0; i < ranked.size() && i < keep; ++i) v.add(ranked[i].first);
    return v;
}

Sentence tokenize(const std::string& sentence, const TokenVocabulary& vocab) {
    Sentence out;
    for (const auto& w : split_words(sentence)) out.push_back(vocab.id_or_unk(w));
    return out;
}

std::string detokenize(const Sentence& s, const TokenVocabulary& vocab) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out.push_back(' ');
        out += vocab.token(s[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {
void check_stochastic(const std::vector<std::vector<double>>& rows, size_t want_cols, const char* what) {
    if (rows.empty()) throw std::invalid_argument(std::string(what) + " matrix is empty");
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != want_cols) {
            throw std::invalid_argument(std::string(what) + " row " + std::to_string(r) + " has " +
                                        std::to_string(rows[r].size()) + " columns, expected " + std::to_string(want_cols));
        }
        double sum = 0.0;
        for (double p : rows[r]) {
            if (p < 0.0) throw std::invalid_argument(std::string(what) + " row " + std::to_string(r) + " has a negative entry");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw std::invalid_argument(std::string(what) + " row " + std::to_string(r) + " sums to " + std::to_string(sum));
        }
    }
}

int draw_from_row(const std::vector<double>& row, Rng& rng) {
    const double u = rng.next_double();
    double cum = 0.0;
    int last_positive = 0;
    for (size_t i = 0; i < row.size(); ++i) {
        if (row[i] > 0.0) last_positive = static_cast<int>(i);
        cum += row[i];
        if (u < cum) return static_cast<int>(i);
    }
    return last_positive;
}

std::string synthetic_word(int index) {
    // Capitalized pseudo-words so the segmentation rule fires at sentence
    // boundaries of generated text.
    static const char* kOnsets[] = {"B", "D", "F", "G", "K", "L", "M", "N", "P", "R", "S", "T", "V", "Z"};
    static const char* kNuclei[] = {"a", "e", "i", "o", "u", "ai", "or", "un"};
    static const char* kCodas[] = {"b", "d", "k", "l", "m", "n", "r", "s", "t", "x", "za", "vi", "go", "ne"};
    const int n_on = 14, n_nu = 8, n_co = 14;
    std::string w = kOnsets[index % n_on];
    int rest = index / n_on;
    w += kNuclei[rest % n_nu];
    rest /= n_nu;
    w += kCodas[rest % n_co];
    rest /= n_co;
    while (rest > 0) {
        w += kNuclei[rest % n_nu];
        rest /= n_nu;
    }
    return w;
}
}  // namespace

void SyntheticSpec::validate() const {
    if (num_states <= 0) throw std::invalid_argument("synthetic spec: num_states must be positive");
    if (transition.size() != static_cast<size_t>(num_states)) {
        throw std::invalid_argument("synthetic spec: transition must have num_states rows");
    }
    check_stochastic(transition, static_cast<size_t>(num_states), "transition");
    if (emission.size() != static_cast<size_t>(num_states)) {
        throw std::invalid_argument("synthetic spec: emission must have num_states rows");
    }
    check_stochastic(emission, emission[0].size(), "emission");
    if (sentence_length_range.first < 1 || sentence_length_range.second < sentence_length_range.first) {
        throw std::invalid_argument("synthetic spec: empty sentence_length_range");
    }
    if (sentences_per_article_range.first < 1 ||
        sentences_per_article_range.second < sentences_per_article_range.first) {
        throw std::invalid_argument("synthetic spec: empty sentences_per_article_range");
    }
}

TokenVocabulary synthetic_vocab(int inventory_size) {
    TokenVocabulary v;
    v.add(".");
    for (int i = 0; i < inventory_size; ++i) {
        const int id = v.add(synthetic_word(i));
        if (id != synthetic_word_id(i)) throw std::logic_error("synthetic word inventory produced a duplicate");
    }
    return v;
}

int synthetic_word_id(int word) { return kNumReserved + 1 + word; }

std::vector<Article> generate_synthetic_corpus(const SyntheticSpec& spec, int num_articles) {
    spec.validate();
    if (num_articles <= 0) throw std::invalid_argument("num_articles must be positive");
    std::vector<Article> articles;
    articles.reserve(static_cast<size_t>(num_articles));
    const auto [min_len, max_len] = spec.sentence_length_range;
    const auto [min_sents, max_sents] = spec.sentences_per_article_range;
    for (int a = 0; a < num_articles; ++a) {
        Rng rng(core::hash_stream(spec.seed, static_cast<uint64_t>(a)));
        Article art;
        art.id = "synv1-" + std::to_string(spec.seed) + "-" + std::to_string(a);
        const int n_sents = min_sents + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_sents - min_sents + 1)));
        std::vector<int> states;
        int state = static_cast<int>(rng.next_below(static_cast<uint64_t>(spec.num_states)));
        for (int s = 0; s < n_sents; ++s) {
            if (s > 0) state = draw_from_row(spec.transition[static_cast<size_t>(state)], rng);
            states.push_back(state);
            const int n_words = min_len + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_len - min_len + 1)));
            Sentence sent;
            sent.reserve(static_cast<size_t>(n_words) + 1);
            for (int w = 0; w < n_words; ++w) {
                sent.push_back(synthetic_word_id(draw_from_row(spec.emission[static_cast<size_t>(state)], rng)));
            }
            sent.push_back(kSyntheticTerminatorId);
            art.sentences.push_back(std::move(sent));
        }
        art.latent_states = std::move(states);
        articles.push_back(std::move(art));
    }
    return articles;
}

SyntheticSpec SyntheticSpec::from_json_text(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    SyntheticSpec s;
    s.num_states = j.at("num_states").get<int>();
    s.transition = j.at("transition").get<std::vector<std::vector<double>>>();
    s.emission = j.at("emission").get<std::vector<std::vector<double>>>();
    const auto slr = j.at("sentence_length_range").get<std::vector<int>>();
    const auto sar = j.at("sentences_per_article_range").get<std::vector<int>>();
    if (slr.size() != 2 || sar.size() != 2) throw std::invalid_argument("synthetic spec: ranges must be [min,max]");
    s.sentence_length_range = {slr[0], slr[1]};
    s.sentences_per_article_range = {sar[0], sar[1]};
    s.seed = j.at("seed").get<uint64_t>();
    s.validate();
    return s;
}

SyntheticSpec SyntheticSpec::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open synthetic spec: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

// ---------------------------------------------------------------------------

void save_corpus_jsonl(const std::string& path, const std::vector<Article>& articles) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write corpus: " + path);
    for (const auto& a : articles) {
        nlohmann::ordered_json j;
        j["id"] = a.id;
        j["sentences"] = a.sentences;
        if (a.latent_states) {
            j["latent_states"] = *a.latent_states;
        } else {
            j["latent_states"] = nullptr;
        }
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed for corpus: " + path);
}

std::vector<Article> load_corpus_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus: " + path);
    std::vector<Article> articles;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Article a;
        a.id = j.at("id").get<std::string>();
        a.sentences = j.at("sentences").get<std::vector<Sentence>>();
        if (a.sentences.empty()) throw IoError(path + ":" + std::to_string(lineno) + ": article has no sentences");
        for (const auto& s : a.sentences) {
            if (s.empty()) throw IoError(path + ":" + std::to_string(lineno) + ": empty sentence");
        }
        if (j.contains("latent_states") && !j.at("latent_states").is_null()) {
            a.latent_states = j.at("latent_states").get<std::vector<int>>();
            if (a.latent_states->size() != a.sentences.size()) {
                throw IoError(path + ":" + std::to_string(lineno) + ": latent_states length mismatch");
            }
        }
        articles.push_back(std::move(a));
    }
    return articles;
}

std::vector<std::string> read_text_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<std::string> texts;
    for (const auto& f : files) {
        std::ifstream in(f);
        if (!in) throw IoError("cannot open " + f.string());
        std::stringstream ss;
        ss << in.rdbuf();
        texts.push_back(ss.str());
    }
    return texts;
}

std::vector<Article> ingest_text_dir(const std::string& dir, const TokenVocabulary& vocab) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Article> articles;
    for (const auto& f : files) {
        std::ifstream in(f);
        if (!in) throw IoError("cannot open " + f.string());
        std::stringstream ss;
        ss << in.rdbuf();
        Article a;
        a.id = f.stem().string();
        for (const auto& sent : segment_sentences(ss.str())) {
            Sentence toks = tokenize(sent, vocab);
            if (!toks.empty()) a.sentences.push_back(std::move(toks));
        }
        if (!a.sentences.empty()) articles.push_back(std::move(a));
    }
    return articles;
}

}  // namespace lplm::corpus
