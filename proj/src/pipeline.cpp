#include "lplm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>
#include <iostream>
#include <sstream>

#include "json.hpp"

#include "lplm/checkpoint.hpp"
#include "lplm/thread_pool.hpp"

namespace lplm::pipeline {

using actions::LabeledArticle;
using adapter::AdapterModel;
using adapter::AdapterVars;
using adapter::ConditionedLM;
using adapter::LmVars;
using adapter::Variant;
using core::Binder;
using core::Rng;
using core::Tape;
using core::Tensor;
using core::Var;
using corpus::Article;
using planner::PlannerModel;

// ---------------------------------------------------------------------------
// configuration

namespace {
uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

void warn(TrainLog* log, const std::string& msg) {
    if (log) log->warnings.push_back(msg);
    if (!log || !log->quiet) std::cerr << "warning: " << msg << "\n";
}

void info(TrainLog* log, const std::string& msg) {
    if (!log || !log->quiet) std::cout << msg << "\n";
}
}  // namespace

void RunConfig::validate() const {
    auto positive = [](int64_t v, const char* name) {
        if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(action_count, "C");
    positive(t_steps, "T");
    positive(k_paths, "K");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    positive(d_lm, "d_lm");
    positive(lm_layers, "lm_layers");
    positive(lm_heads, "lm_heads");
    positive(planner_layers, "planner_layers");
    positive(planner_heads, "planner_heads");
    positive(adapter_layers, "adapter_layers");
    positive(adapter_heads, "adapter_heads");
    positive(window, "window");
    positive(m_max, "m_max");
    positive(t_max, "t_max");
    positive(batch_lm, "batch_lm");
    positive(batch_planner, "batch_planner");
    if (!(lr_lm > 0.0) || !(lr_planner > 0.0)) throw ConfigError("learning rates must be positive");
    positive(pretrain_steps, "pretrain_steps");
    positive(planner_steps, "planner_steps");
    positive(finetune_steps, "finetune_steps");
    positive(gen_len, "gen_len");
    if (eval_max_articles < 0) throw ConfigError("eval_max_articles must be non-negative");
    if (t_steps > t_max) throw ConfigError("T exceeds t_max");
    if (window < 3) throw ConfigError("window too small for any sentence");
    if (d_lm % lm_heads != 0) throw ConfigError("d_lm must be divisible by lm_heads");
    if (resolved_d_e() % planner_heads != 0) throw ConfigError("d_e must be divisible by planner_heads");
    if (resolved_d_a() % adapter_heads != 0 || d_lm % adapter_heads != 0) {
        throw ConfigError("d_a and d_lm must be divisible by adapter_heads");
    }
    if (action_count < 2) throw ConfigError("C must be at least 2");
}

namespace {
template <class J>
void assign_known(RunConfig& c, const std::string& key, const J& v) {
    if (key == "seed") c.seed = v.template get<uint64_t>();
    else if (key == "train_corpus") c.train_corpus = v.template get<std::string>();
    else if (key == "val_corpus") c.val_corpus = v.template get<std::string>();
    else if (key == "test_corpus") c.test_corpus = v.template get<std::string>();
    else if (key == "vocab") c.vocab_path = v.template get<std::string>();
    else if (key == "C") c.action_count = v.template get<int>();
    else if (key == "T") c.t_steps = v.template get<int>();
    else if (key == "K") c.k_paths = v.template get<int>();
    else if (key == "tau") c.tau = v.template get<double>();
    else if (key == "d_lm") c.d_lm = v.template get<int>();
    else if (key == "d_e") c.d_e = v.template get<int>();
    else if (key == "d_a") c.d_a = v.template get<int>();
    else if (key == "lm_layers") c.lm_layers = v.template get<int>();
    else if (key == "lm_heads") c.lm_heads = v.template get<int>();
    else if (key == "planner_layers") c.planner_layers = v.template get<int>();
    else if (key == "planner_heads") c.planner_heads = v.template get<int>();
    else if (key == "adapter_layers") c.adapter_layers = v.template get<int>();
    else if (key == "adapter_heads") c.adapter_heads = v.template get<int>();
    else if (key == "window") c.window = v.template get<int>();
    else if (key == "eval_window") c.eval_window = v.template get<int>();
    else if (key == "m_max") c.m_max = v.template get<int>();
    else if (key == "t_max") c.t_max = v.template get<int>();
    else if (key == "batch_lm") c.batch_lm = v.template get<int>();
    else if (key == "batch_planner") c.batch_planner = v.template get<int>();
    else if (key == "lr_lm") c.lr_lm = v.template get<double>();
    else if (key == "lr_planner") c.lr_planner = v.template get<double>();
    else if (key == "pretrain_steps") c.pretrain_steps = v.template get<int>();
    else if (key == "planner_steps") c.planner_steps = v.template get<int>();
    else if (key == "finetune_steps") c.finetune_steps = v.template get<int>();
    else if (key == "variant") c.variant = adapter::variant_from_name(v.template get<std::string>());
    else if (key == "rezero_enabled") c.rezero_enabled = v.template get<bool>();
    else if (key == "gen_len") c.gen_len = v.template get<int>();
    else if (key == "eval_max_articles") c.eval_max_articles = v.template get<int>();
    else throw ConfigError("unknown config key '" + key + "'");
}
}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    RunConfig c;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    try {
        for (const auto& [key, value] : j.items()) assign_known(c, key, value);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string RunConfig::canonical_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["train_corpus"] = train_corpus;
    j["val_corpus"] = val_corpus;
    j["test_corpus"] = test_corpus;
    j["vocab"] = vocab_path;
    j["C"] = action_count;
    j["T"] = t_steps;
    j["K"] = k_paths;
    j["tau"] = tau;
    j["d_lm"] = d_lm;
    j["d_e"] = d_e;
    j["d_a"] = d_a;
    j["lm_layers"] = lm_layers;
    j["lm_heads"] = lm_heads;
    j["planner_layers"] = planner_layers;
    j["planner_heads"] = planner_heads;
    j["adapter_layers"] = adapter_layers;
    j["adapter_heads"] = adapter_heads;
    j["window"] = window;
    j["eval_window"] = eval_window;
    j["m_max"] = m_max;
    j["t_max"] = t_max;
    j["batch_lm"] = batch_lm;
    j["batch_planner"] = batch_planner;
    j["lr_lm"] = lr_lm;
    j["lr_planner"] = lr_planner;
    j["pretrain_steps"] = pretrain_steps;
    j["planner_steps"] = planner_steps;
    j["finetune_steps"] = finetune_steps;
    j["variant"] = adapter::variant_name(variant);
    j["rezero_enabled"] = rezero_enabled;
    j["gen_len"] = gen_len;
    j["eval_max_articles"] = eval_max_articles;
    return j.dump();
}

std::string RunConfig::config_hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_json())));
    return std::string(buf);
}

planner::PlannerConfig RunConfig::planner_config() const {
    planner::PlannerConfig pc;
    pc.action_count = action_count;
    pc.width = resolved_d_e();
    pc.m_max = m_max;
    pc.layers = planner_layers;
    pc.heads = planner_heads;
    return pc;
}

adapter::AdapterConfig RunConfig::adapter_config() const {
    adapter::AdapterConfig ac;
    ac.action_count = action_count;
    ac.d_a = resolved_d_a();
    ac.d_lm = d_lm;
    ac.t_max = t_max;
    ac.layers = adapter_layers;
    ac.heads = adapter_heads;
    ac.rezero = rezero_enabled;
    return ac;
}

adapter::LmConfig RunConfig::lm_config(int vocab_size) const {
    adapter::LmConfig lc;
    lc.vocab = vocab_size;
    lc.d_lm = d_lm;
    lc.window_max = std::max(window, resolved_eval_window());
    lc.layers = lm_layers;
    lc.heads = lm_heads;
    return lc;
}

void EvalReport::save_json(const std::string& path) const {
    nlohmann::ordered_json j;
    j["perplexity"] = perplexity;
    j["token_count"] = token_count;
    if (edit_distance_mean) {
        j["edit_distance_mean"] = *edit_distance_mean;
    } else {
        j["edit_distance_mean"] = nullptr;
    }
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["config_hash"] = config_hash;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw core::IoError("cannot write report: " + path);
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// windows

namespace {
template <class GetArticle>
std::vector<Window> build_windows_impl(int n_articles, GetArticle&& article_at, int window_len) {
    if (window_len < 3) throw ConfigError("window too small");
    std::vector<Window> out;
    for (int ai = 0; ai < n_articles; ++ai) {
        const Article& art = article_at(ai);
        const int n = static_cast<int>(art.sentences.size());
        int s = 0;
        while (s < n) {
            Window w;
            w.article_index = ai;
            w.first_sentence = s;
            w.tokens.push_back(corpus::kBos);
            w.sent_slot.push_back(-1);
            int j = 0;
            while (s < n) {
                const auto& sent = art.sentences[static_cast<size_t>(s)];
                if (static_cast<int>(w.tokens.size() + sent.size()) > window_len) break;
                for (int tok : sent) {
                    w.tokens.push_back(tok);
                    w.sent_slot.push_back(j);
                }
                ++j;
                ++s;
            }
            if (j == 0) break;  // this sentence never fits; the article ends here
            w.num_sentences = j;
            out.push_back(std::move(w));
        }
    }
    return out;
}
}  // namespace

std::vector<Window> build_windows(const std::vector<Article>& articles, int window_len) {
    return build_windows_impl(static_cast<int>(articles.size()),
                              [&](int i) -> const Article& { return articles[static_cast<size_t>(i)]; }, window_len);
}

std::vector<Window> build_windows_labeled(const std::vector<LabeledArticle>& articles, int window_len) {
    return build_windows_impl(static_cast<int>(articles.size()),
                              [&](int i) -> const Article& { return articles[static_cast<size_t>(i)].article; },
                              window_len);
}

uint64_t boundary_seed(uint64_t seed, uint64_t article, uint64_t first_sentence, uint64_t sentence_j) {
    uint64_t h = core::hash_stream(seed, 0x70617468ull);  // distinct stream family for paths
    h = core::hash_stream(h, article);
    h = core::hash_stream(h, first_sentence);
    return core::hash_stream(h, sentence_j);
}

// ---------------------------------------------------------------------------
// conditioning

namespace {

// Per-boundary action paths for one fine-tuning or evaluation run. The
// planner is frozen here, so paths depend only on (seed, boundary) and are
// cached across training steps.
class PathProvider {
public:
    PathProvider(PlannerModel* planner, const Tensor* emb, Variant variant, int k_paths, int t_steps, double tau,
                 uint64_t seed, int m_max)
        : planner_(planner), emb_(emb), variant_(variant), k_(k_paths), t_(t_steps), tau_(tau), seed_(seed),
          m_max_(m_max) {}

    // context sentences for boundary j of window w (document order)
    std::span<const corpus::Sentence> context(const LabeledArticle& art, const Window& w, int j) const {
        int begin = w.first_sentence;
        int count = j;
        const int usable = m_max_ - t_ - 1;
        if (count > usable) {
            begin += count - usable;
            count = usable;
        }
        return std::span<const corpus::Sentence>(art.article.sentences.data() + begin, static_cast<size_t>(count));
    }

    const std::vector<std::vector<int>>& paths_for(const LabeledArticle& art, const Window& w, int j) {
        const Key key{w.article_index, w.first_sentence, j};
        auto it = path_cache_.find(key);
        if (it != path_cache_.end()) return it->second;
        return path_cache_.emplace(key, compute_paths(art, w, j)).first->second;
    }

    int argmax_for(const LabeledArticle& art, const Window& w, int j) {
        const Key key{w.article_index, w.first_sentence, j};
        auto it = argmax_cache_.find(key);
        if (it != argmax_cache_.end()) return it->second;
        return argmax_cache_.emplace(key, compute_argmax(art, w, j)).first->second;
    }

    // Samples every boundary of the window list up front, windows in
    // parallel. Results are identical to on-demand computation; only the
    // schedule differs.
    void precompute(const std::vector<LabeledArticle>& labeled, const std::vector<Window>& windows) {
        if (variant_ == Variant::kFixed || planner_ == nullptr) return;
        const bool wants_paths = variant_ == Variant::kProjectAvg || variant_ == Variant::kFull;
        std::vector<std::vector<std::vector<std::vector<int>>>> paths(windows.size());
        std::vector<std::vector<int>> argmaxes(windows.size());
        core::parallel_for(static_cast<int>(windows.size()), [&](int b, int e) {
            for (int wi = b; wi < e; ++wi) {
                const Window& w = windows[static_cast<size_t>(wi)];
                const LabeledArticle& art = labeled[static_cast<size_t>(w.article_index)];
                for (int j = 1; j < w.num_sentences; ++j) {
                    if (wants_paths) {
                        paths[static_cast<size_t>(wi)].push_back(compute_paths(art, w, j));
                    } else {
                        argmaxes[static_cast<size_t>(wi)].push_back(compute_argmax(art, w, j));
                    }
                }
            }
        });
        for (size_t wi = 0; wi < windows.size(); ++wi) {
            const Window& w = windows[wi];
            for (int j = 1; j < w.num_sentences; ++j) {
                const Key key{w.article_index, w.first_sentence, j};
                if (wants_paths) {
                    path_cache_.emplace(key, std::move(paths[wi][static_cast<size_t>(j - 1)]));
                } else {
                    argmax_cache_.emplace(key, argmaxes[wi][static_cast<size_t>(j - 1)]);
                }
            }
        }
    }

    Variant variant() const { return variant_; }

private:
    using Key = std::tuple<int, int, int>;

    std::vector<std::vector<int>> compute_paths(const LabeledArticle& art, const Window& w, int j) const {
        auto sampled = planner::sample_paths(*planner_, context(art, w, j), *emb_, k_, t_, tau_,
                                             boundary_seed(seed_, static_cast<uint64_t>(w.article_index),
                                                           static_cast<uint64_t>(w.first_sentence),
                                                           static_cast<uint64_t>(j)));
        std::vector<std::vector<int>> ids;
        ids.reserve(sampled.size());
        for (auto& p : sampled) ids.push_back(std::move(p.actions));
        return ids;
    }

    int compute_argmax(const LabeledArticle& art, const Window& w, int j) const {
        return planner::rollout_argmax(*planner_, context(art, w, j), *emb_, 1)[0];
    }

    PlannerModel* planner_;
    const Tensor* emb_;
    Variant variant_;
    int k_, t_;
    double tau_;
    uint64_t seed_;
    int m_max_;
    std::map<Key, std::vector<std::vector<int>>> path_cache_;
    std::map<Key, int> argmax_cache_;
};

// Builds the per-sentence conditioning vars for a window. Sentence 0 of a
// window has no planner context and stays unconditioned in every variant.
std::vector<Var> window_conditionings(Tape& tape, const AdapterVars& av, PathProvider* provider,
                                      const LabeledArticle& art, const Window& w) {
    std::vector<Var> conds;
    conds.reserve(static_cast<size_t>(w.num_sentences));
    for (int j = 0; j < w.num_sentences; ++j) {
        if (j == 0) {
            conds.push_back(tape.leaf(Tensor({1, av.cfg.d_lm})));
            continue;
        }
        switch (provider->variant()) {
            case Variant::kFixed:
                conds.push_back(adapter::make_fixed_conditioning(av));
                break;
            case Variant::kArgmax1:
                conds.push_back(adapter::project_action(av, provider->argmax_for(art, w, j)));
                break;
            case Variant::kProjectAvg:
                conds.push_back(adapter::multi_path_naive(av, provider->paths_for(art, w, j)));
                break;
            case Variant::kFull:
                conds.push_back(adapter::multi_path_full(av, provider->paths_for(art, w, j)));
                break;
        }
    }
    return conds;
}

Var window_loss(const LmVars& lmv, const Window& w, std::span<const Var> conds) {
    Var logits = adapter::condition_and_forward(lmv, w.tokens, w.sent_slot, conds);
    const int n = static_cast<int>(w.tokens.size());
    Var pred = slice_rows(logits, 0, n - 1);
    return cross_entropy(pred, std::span<const int>(w.tokens.data() + 1, static_cast<size_t>(n - 1)));
}

std::vector<Var> zero_conditionings(Tape& tape, int count, int d_lm) {
    std::vector<Var> conds;
    conds.reserve(static_cast<size_t>(count));
    Var zero = tape.leaf(Tensor({1, d_lm}));
    for (int i = 0; i < count; ++i) conds.push_back(zero);
    return conds;
}

}  // namespace

// ---------------------------------------------------------------------------
// training stages

ConditionedLM pretrain_base_lm(const RunConfig& cfg, const std::vector<Article>& corpus, int vocab_size,
                               TrainLog* log) {
    cfg.validate();
    const auto windows = build_windows(corpus, cfg.window);
    if (windows.empty()) throw ConfigError("corpus smaller than one window");

    Rng init_rng(core::hash_stream(cfg.seed, 0x6c6d5f696e6974ull));
    ConditionedLM lm = ConditionedLM::init(cfg.lm_config(vocab_size), init_rng);
    core::Adam adam({cfg.lr_lm});
    Rng batch_rng(core::hash_stream(cfg.seed, 0x707265747261696eull));

    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        Tape tape;
        Binder binder(tape);
        LmVars lmv = adapter::bind_lm(binder, "lm.", lm);
        Var total;
        for (int bi = 0; bi < cfg.batch_lm; ++bi) {
            const Window& w = windows[batch_rng.next_below(windows.size())];
            auto conds = zero_conditionings(tape, w.num_sentences, cfg.d_lm);
            Var loss = window_loss(lmv, w, conds);
            total = (bi == 0) ? loss : add(total, loss);
        }
        total = scale_const(total, 1.0 / cfg.batch_lm);
        tape.backward(total);
        const double loss_val = tape.value(total)(0);
        if (!std::isfinite(loss_val)) throw core::NumericError("pretrain loss is not finite");
        if (log) log->step_loss.push_back(loss_val);
        adam.step(binder.entries(), tape);
        if (step % 25 == 0 || step + 1 == cfg.pretrain_steps) {
            info(log, "pretrain step " + std::to_string(step) + " loss " + format_sig(loss_val));
        }
    }
    return lm;
}

actions::ActionVocabulary fit_actions(const RunConfig& cfg, const std::vector<Article>& corpus,
                                      const Tensor& embedding_table) {
    std::vector<actions::SentenceEmbedding> embs;
    for (const auto& art : corpus) {
        for (const auto& s : art.sentences) embs.push_back(actions::encode_sentence(s, embedding_table));
    }
    return actions::kmeans_fit(embs, cfg.action_count, core::hash_stream(cfg.seed, 0x6b6d65616e73ull));
}

PlannerModel train_planner(const RunConfig& cfg, const std::vector<LabeledArticle>& labeled,
                           const Tensor& embedding_table, TrainLog* log) {
    cfg.validate();
    if (labeled.empty()) throw ConfigError("empty labeled corpus");
    if (embedding_table.dim(1) != cfg.resolved_d_e()) {
        throw ConfigError("embedding table width " + std::to_string(embedding_table.dim(1)) +
                          " does not match d_e " + std::to_string(cfg.resolved_d_e()));
    }

    std::vector<int> usable;
    for (size_t i = 0; i < labeled.size(); ++i) {
        const int n = static_cast<int>(labeled[i].article.sentences.size());
        if (n >= cfg.t_steps + 1) {
            usable.push_back(static_cast<int>(i));
        } else {
            warn(log, "article '" + labeled[i].article.id + "' has " + std::to_string(n) +
                          " sentences, too short for T=" + std::to_string(cfg.t_steps) + "; skipped");
        }
    }
    if (usable.empty()) throw ConfigError("no article long enough for planner training at T=" + std::to_string(cfg.t_steps));

    Rng init_rng(core::hash_stream(cfg.seed, 0x706c616e5f696e69ull));
    PlannerModel model = PlannerModel::init(cfg.planner_config(), init_rng);
    core::Adam adam({cfg.lr_planner});
    Rng batch_rng(core::hash_stream(cfg.seed, 0x706c616e6e6572ull));

    for (int step = 0; step < cfg.planner_steps; ++step) {
        Tape tape;
        Binder binder(tape);
        planner::PlannerVars pv = planner::bind_planner(binder, "planner.", model);
        Var total;
        for (int bi = 0; bi < cfg.batch_planner; ++bi) {
            const LabeledArticle& art = labeled[static_cast<size_t>(usable[batch_rng.next_below(usable.size())])];
            const int n = static_cast<int>(art.article.sentences.size());
            const int max_i = n - cfg.t_steps + 1;  // boundary i in [2, max_i]
            const int i = 2 + static_cast<int>(batch_rng.next_below(static_cast<uint64_t>(max_i - 1)));
            Var loss = planner::planner_loss(tape, pv, art, embedding_table, cfg.t_steps, i);
            total = (bi == 0) ? loss : add(total, loss);
        }
        total = scale_const(total, 1.0 / cfg.batch_planner);
        tape.backward(total);
        const double loss_val = tape.value(total)(0);
        if (!std::isfinite(loss_val)) throw core::NumericError("planner loss is not finite");
        if (log) log->step_loss.push_back(loss_val);
        adam.step(binder.entries(), tape);
        if (step % 25 == 0 || step + 1 == cfg.planner_steps) {
            info(log, "planner step " + std::to_string(step) + " loss " + format_sig(loss_val));
        }
    }
    return model;
}

PlannerAccuracy measure_planner_accuracy(PlannerModel& model, const std::vector<LabeledArticle>& labeled,
                                         const Tensor& embedding_table, int t_steps, int max_articles) {
    PlannerAccuracy acc;
    acc.per_step.assign(static_cast<size_t>(t_steps), 0.0);
    std::vector<int64_t> hits(static_cast<size_t>(t_steps), 0);
    int64_t boundaries = 0;
    const size_t n_arts = max_articles > 0 ? std::min<size_t>(labeled.size(), static_cast<size_t>(max_articles))
                                           : labeled.size();
    for (size_t ai = 0; ai < n_arts; ++ai) {
        const auto& art = labeled[ai];
        const int n = static_cast<int>(art.article.sentences.size());
        for (int i = 2; i + t_steps - 1 <= n; ++i) {
            const auto ctx = std::span<const corpus::Sentence>(art.article.sentences.data(), static_cast<size_t>(i - 1));
            const auto rolled = planner::rollout_argmax(model, ctx, embedding_table, t_steps);
            for (int k = 0; k < t_steps; ++k) {
                if (rolled[static_cast<size_t>(k)] == art.actions[static_cast<size_t>(i - 1 + k)]) {
                    ++hits[static_cast<size_t>(k)];
                }
            }
            ++boundaries;
        }
    }
    acc.boundaries = boundaries;
    for (int k = 0; k < t_steps; ++k) {
        acc.per_step[static_cast<size_t>(k)] = boundaries > 0 ? static_cast<double>(hits[static_cast<size_t>(k)]) / boundaries : 0.0;
    }
    return acc;
}

std::pair<ConditionedLM, AdapterModel> finetune_conditioned_lm(const RunConfig& cfg,
                                                               const std::vector<LabeledArticle>& labeled,
                                                               PlannerModel* planner_model,
                                                               const ConditionedLM& base_lm, TrainLog* log) {
    cfg.validate();
    if (cfg.variant != Variant::kFixed && planner_model == nullptr) {
        throw ConfigError("adapter variant " + std::string(adapter::variant_name(cfg.variant)) +
                          " requires a trained planner");
    }
    const auto windows = build_windows_labeled(labeled, cfg.window);
    if (windows.empty()) throw ConfigError("corpus smaller than one window");

    ConditionedLM lm = base_lm;
    Rng init_rng(core::hash_stream(cfg.seed, 0x616461705f696e69ull));
    AdapterModel adp = AdapterModel::init(cfg.adapter_config(), init_rng);

    PathProvider provider(planner_model, &lm.token_embedding, cfg.variant, cfg.k_paths, cfg.t_steps, cfg.tau,
                          core::hash_stream(cfg.seed, 0x66745f7061746873ull), cfg.m_max);
    if (cfg.variant != Variant::kFixed) {
        info(log, "sampling planner paths for " + std::to_string(windows.size()) + " training windows");
        provider.precompute(labeled, windows);
    }

    core::Adam adam({cfg.lr_lm});
    Rng batch_rng(core::hash_stream(cfg.seed, 0x66696e6574756e65ull));

    for (int step = 0; step < cfg.finetune_steps; ++step) {
        Tape tape;
        Binder binder(tape);
        LmVars lmv = adapter::bind_lm(binder, "lm.", lm);
        AdapterVars av = adapter::bind_adapter(binder, "adapter.", adp);
        Var total;
        for (int bi = 0; bi < cfg.batch_lm; ++bi) {
            const Window& w = windows[batch_rng.next_below(windows.size())];
            const LabeledArticle& art = labeled[static_cast<size_t>(w.article_index)];
            auto conds = window_conditionings(tape, av, &provider, art, w);
            Var loss = window_loss(lmv, w, conds);
            total = (bi == 0) ? loss : add(total, loss);
        }
        total = scale_const(total, 1.0 / cfg.batch_lm);
        tape.backward(total);
        const double loss_val = tape.value(total)(0);
        if (!std::isfinite(loss_val)) throw core::NumericError("finetune loss is not finite");
        if (log) log->step_loss.push_back(loss_val);
        adam.step(binder.entries(), tape);
        if (step % 25 == 0 || step + 1 == cfg.finetune_steps) {
            info(log, std::string(adapter::variant_name(cfg.variant)) + " finetune step " + std::to_string(step) +
                          " loss " + format_sig(loss_val));
        }
    }
    return {std::move(lm), std::move(adp)};
}

// ---------------------------------------------------------------------------
// evaluation

PerplexityResult eval_perplexity(const RunConfig& cfg, ConditionedLM& lm, AdapterModel& adp,
                                 PlannerModel* planner_model, const std::vector<LabeledArticle>& corpus_in,
                                 int k_paths, int t_steps, double tau, uint64_t seed) {
    if (cfg.variant != Variant::kFixed && planner_model == nullptr) {
        throw ConfigError("eval: variant requires a planner");
    }
    if (!(tau > 0.0)) throw ConfigError("eval: tau must be positive");
    std::vector<LabeledArticle> corpus = corpus_in;
    if (cfg.eval_max_articles > 0 && static_cast<int>(corpus.size()) > cfg.eval_max_articles) {
        corpus.resize(static_cast<size_t>(cfg.eval_max_articles));
    }
    const auto windows = build_windows_labeled(corpus, cfg.resolved_eval_window());
    if (windows.empty()) throw ConfigError("eval corpus has no usable window");

    PathProvider provider(planner_model, &lm.token_embedding, cfg.variant, k_paths, t_steps, tau, seed, cfg.m_max);
    if (cfg.variant != Variant::kFixed) provider.precompute(corpus, windows);

    PerplexityResult res;
    double total_nll = 0.0;
    int64_t total_tokens = 0;
    const double t0 = now_seconds();
    for (size_t wi = 0; wi < windows.size(); ++wi) {
        const Window& w = windows[wi];
        const LabeledArticle& art = corpus[static_cast<size_t>(w.article_index)];
        Tape tape;
        Binder binder(tape);
        LmVars lmv = adapter::bind_lm(binder, "lm.", lm);
        AdapterVars av = adapter::bind_adapter(binder, "adapter.", adp);
        auto conds = window_conditionings(tape, av, &provider, art, w);
        Var loss = window_loss(lmv, w, conds);
        const int64_t n_targets = static_cast<int64_t>(w.tokens.size()) - 1;
        const double nll_sum = tape.value(loss)(0) * static_cast<double>(n_targets);
        if (!std::isfinite(nll_sum)) throw core::NumericError("eval NLL is not finite");
        total_nll += nll_sum;
        total_tokens += n_targets;
        res.per_window.push_back({static_cast<int>(wi), art.article.id, w.first_sentence, n_targets, nll_sum});
    }
    const double t1 = now_seconds();
    if (total_tokens == 0) throw ConfigError("eval: token count is zero");
    res.report.perplexity = std::exp(total_nll / static_cast<double>(total_tokens));
    res.report.token_count = total_tokens;
    res.report.wall_clock_seconds = t1 - t0;
    res.report.config_hash = cfg.config_hash();
    return res;
}

int levenshtein(std::span<const int> a, std::span<const int> b) {
    const size_t m = a.size(), n = b.size();
    if (m == 0) return static_cast<int>(n);
    if (n == 0) return static_cast<int>(m);
    std::vector<int> row(n + 1);
    for (size_t j = 0; j <= n; ++j) row[j] = static_cast<int>(j);
    for (size_t i = 0; i < m; ++i) {
        int corner = row[0];
        row[0] = static_cast<int>(i) + 1;
        for (size_t j = 0; j < n; ++j) {
            const int up = row[j + 1];
            int best;
            if (a[i] == b[j]) {
                best = corner;
            } else {
                best = 1 + std::min(corner, std::min(up, row[j]));
            }
            corner = up;
            row[j + 1] = best;
        }
    }
    return row[n];
}

// ---------------------------------------------------------------------------
// generation + edit distance

namespace {

// Incremental sentence-conditioned sampling. The window holds BOS plus the
// most recent whole sentences; conditioning vectors are computed once per
// sentence boundary from the planner (model-produced boundaries are
// terminator tokens).
struct GenerationState {
    std::vector<corpus::Sentence> sentences;  // completed, within window
    corpus::Sentence partial;
    std::vector<Tensor> conds;  // one [1,d_lm] value per sentence in `sentences` + one for the partial
};

bool is_terminator_token(const corpus::TokenVocabulary& vocab, int id) {
    const std::string& s = vocab.token(id);
    return s == "." || s == "!" || s == "?";
}

Tensor boundary_conditioning(const RunConfig& cfg, AdapterModel& adp, PlannerModel* planner_model,
                             const Tensor& emb_table, std::span<const corpus::Sentence> context, uint64_t seed) {
    Tape tape;
    Binder binder(tape);
    AdapterVars av = adapter::bind_adapter(binder, "adapter.", adp);
    Var c;
    switch (cfg.variant) {
        case Variant::kFixed:
            c = adapter::make_fixed_conditioning(av);
            break;
        case Variant::kArgmax1: {
            const int a = planner::rollout_argmax(*planner_model, context, emb_table, 1)[0];
            c = adapter::project_action(av, a);
            break;
        }
        case Variant::kProjectAvg:
        case Variant::kFull: {
            auto sampled = planner::sample_paths(*planner_model, context, emb_table, cfg.k_paths, cfg.t_steps,
                                                 cfg.tau, seed);
            std::vector<std::vector<int>> ids;
            ids.reserve(sampled.size());
            for (auto& p : sampled) ids.push_back(std::move(p.actions));
            c = cfg.variant == Variant::kProjectAvg ? adapter::multi_path_naive(av, ids)
                                                    : adapter::multi_path_full(av, ids);
            break;
        }
    }
    return tape.value(c);
}

int window_token_count(const GenerationState& st) {
    int n = 1;  // BOS
    for (const auto& s : st.sentences) n += static_cast<int>(s.size());
    n += static_cast<int>(st.partial.size());
    return n;
}

}  // namespace

EditDistanceResult eval_edit_distance(const RunConfig& cfg, ConditionedLM& lm, AdapterModel& adp,
                                      PlannerModel* planner_model, const actions::ActionVocabulary& avocab,
                                      const corpus::TokenVocabulary& vocab,
                                      const std::vector<LabeledArticle>& corpus_in, int gen_len, uint64_t seed) {
    if (cfg.variant != Variant::kFixed && planner_model == nullptr) {
        throw ConfigError("eval: variant requires a planner");
    }
    std::vector<LabeledArticle> corpus = corpus_in;
    if (cfg.eval_max_articles > 0 && static_cast<int>(corpus.size()) > cfg.eval_max_articles) {
        corpus.resize(static_cast<size_t>(cfg.eval_max_articles));
    }

    EditDistanceResult res;
    const double t0 = now_seconds();
    const int window_len = cfg.resolved_eval_window();
    for (size_t ai = 0; ai < corpus.size(); ++ai) {
        const LabeledArticle& art = corpus[ai];
        Rng tok_rng(core::hash_stream(core::hash_stream(seed, 0x67656eull), static_cast<uint64_t>(ai)));

        GenerationState st;
        st.sentences.push_back(art.article.sentences[0]);
        st.conds.push_back(Tensor({1, cfg.d_lm}));  // first sentence carries no conditioning
        int boundary_counter = 0;
        auto next_cond = [&]() {
            const uint64_t s = boundary_seed(core::hash_stream(seed, 0x65646974ull), static_cast<uint64_t>(ai), 0,
                                             static_cast<uint64_t>(++boundary_counter));
            return boundary_conditioning(cfg, adp, planner_model, lm.token_embedding,
                                         std::span<const corpus::Sentence>(st.sentences.data(), st.sentences.size()),
                                         s);
        };
        st.conds.push_back(next_cond());  // conditioning for the upcoming sentence

        corpus::Sentence generated;  // all generated tokens, across windows
        for (int g = 0; g < gen_len; ++g) {
            // slide: drop oldest sentences until the next token fits
            while (window_token_count(st) + 1 > window_len && st.sentences.size() > 1) {
                st.sentences.erase(st.sentences.begin());
                st.conds.erase(st.conds.begin());
            }
            if (window_token_count(st) + 1 > window_len) break;  // partial alone fills the window

            std::vector<int> tokens;
            std::vector<int> slots;
            tokens.push_back(corpus::kBos);
            slots.push_back(-1);
            for (size_t si = 0; si < st.sentences.size(); ++si) {
                for (int tok : st.sentences[si]) {
                    tokens.push_back(tok);
                    slots.push_back(static_cast<int>(si));
                }
            }
            for (int tok : st.partial) {
                tokens.push_back(tok);
                slots.push_back(static_cast<int>(st.sentences.size()));
            }

            Tape tape;
            Binder binder(tape);
            LmVars lmv = adapter::bind_lm(binder, "lm.", lm);
            std::vector<Var> conds;
            for (const Tensor& c : st.conds) conds.push_back(tape.leaf(c));
            Var logits = adapter::condition_and_forward(lmv, tokens, slots, conds);
            Var probs = softmax_rows(slice_rows(logits, static_cast<int>(tokens.size()) - 1, 1), 1.0);
            const Tensor& pv = tape.value(probs);
            int tok = core::sample_categorical(std::span<const double>(pv.data(), static_cast<size_t>(pv.size())),
                                               tok_rng);
            if (tok == corpus::kBos || tok == corpus::kPad) tok = corpus::kUnk;  // never re-emit control tokens
            generated.push_back(tok);
            st.partial.push_back(tok);
            if (is_terminator_token(vocab, tok)) {
                st.sentences.push_back(std::exchange(st.partial, {}));
                st.conds.push_back(next_cond());
            }
        }

        // Re-label generated text through segmentation, exactly as the
        // ground-truth sentences were labeled.
        std::vector<int> gen_actions;
        if (!generated.empty()) {
            const std::string text = corpus::detokenize(generated, vocab);
            for (const auto& sent_text : corpus::segment_sentences(text)) {
                const corpus::Sentence toks = corpus::tokenize(sent_text, vocab);
                if (toks.empty()) continue;
                gen_actions.push_back(actions::assign_action(actions::encode_sentence(toks, lm.token_embedding), avocab));
            }
        }
        std::vector<int> gold_actions(art.actions.begin() + 1, art.actions.end());
        res.per_article.push_back(static_cast<double>(levenshtein(gen_actions, gold_actions)));
    }
    const double t1 = now_seconds();

    double mean = 0.0;
    for (double d : res.per_article) mean += d;
    mean /= res.per_article.empty() ? 1.0 : static_cast<double>(res.per_article.size());
    res.report.perplexity = 0.0;
    res.report.token_count = static_cast<int64_t>(corpus.size()) * gen_len;
    res.report.edit_distance_mean = mean;
    res.report.wall_clock_seconds = t1 - t0;
    res.report.config_hash = cfg.config_hash();
    return res;
}

// ---------------------------------------------------------------------------
// sweeps

std::vector<SweepKRow> sweep_k(const RunConfig& cfg, ConditionedLM& lm, AdapterModel& adp, PlannerModel& planner_model,
                               const std::vector<LabeledArticle>& corpus, const std::vector<int>& k_list, double tau,
                               uint64_t seed) {
    if (cfg.variant != Variant::kFull && cfg.variant != Variant::kProjectAvg) {
        throw ConfigError("sweep-k requires the Full or ProjectAvg adapter variant");
    }
    std::vector<SweepKRow> rows;
    double base_time = 0.0;
    for (size_t i = 0; i < k_list.size(); ++i) {
        const int k = k_list[i];
        if (k < 1) throw ConfigError("sweep-k: K must be at least 1");
        auto r = eval_perplexity(cfg, lm, adp, &planner_model, corpus, k, cfg.t_steps, tau, seed);
        if (i == 0) base_time = r.report.wall_clock_seconds;
        SweepKRow row;
        row.k = k;
        row.ppl = r.report.perplexity;
        row.relative_time = base_time > 0.0 ? r.report.wall_clock_seconds / base_time : 1.0;
        rows.push_back(row);
    }
    return rows;
}

std::vector<SweepTempRow> sweep_temperature(const RunConfig& cfg, ConditionedLM& lm, AdapterModel& adp,
                                            PlannerModel& planner_model, const std::vector<LabeledArticle>& corpus,
                                            const std::vector<double>& tau_list, int k_paths, uint64_t seed) {
    if (cfg.variant != Variant::kFull && cfg.variant != Variant::kProjectAvg) {
        throw ConfigError("sweep-temp requires the Full or ProjectAvg adapter variant");
    }
    std::vector<SweepTempRow> rows;
    for (double tau : tau_list) {
        if (!(tau > 0.0)) throw ConfigError("sweep-temp: tau must be positive");
        auto r = eval_perplexity(cfg, lm, adp, &planner_model, corpus, k_paths, cfg.t_steps, tau, seed);
        rows.push_back({tau, r.report.perplexity});
    }
    return rows;
}

PathStats measure_path_stats(const RunConfig& cfg, PlannerModel& planner_model,
                             const std::vector<LabeledArticle>& corpus_in, const Tensor& embedding_table, int k_paths,
                             int t_steps, double tau, uint64_t seed) {
    std::vector<LabeledArticle> corpus = corpus_in;
    if (cfg.eval_max_articles > 0 && static_cast<int>(corpus.size()) > cfg.eval_max_articles) {
        corpus.resize(static_cast<size_t>(cfg.eval_max_articles));
    }
    const auto windows = build_windows_labeled(corpus, cfg.resolved_eval_window());
    PathStats stats;
    int64_t n_pairs = 0;
    int64_t n_steps = 0;
    double hamming_sum = 0.0;
    double spread_sum = 0.0;
    for (const Window& w : windows) {
        const LabeledArticle& art = corpus[static_cast<size_t>(w.article_index)];
        for (int j = 1; j < w.num_sentences; ++j) {
            int begin = w.first_sentence;
            int count = j;
            const int usable = cfg.m_max - t_steps - 1;
            if (count > usable) {
                begin += count - usable;
                count = usable;
            }
            const auto ctx_span =
                std::span<const corpus::Sentence>(art.article.sentences.data() + begin, static_cast<size_t>(count));
            const uint64_t bseed = boundary_seed(seed, static_cast<uint64_t>(w.article_index),
                                                 static_cast<uint64_t>(w.first_sentence), static_cast<uint64_t>(j));
            const auto paths = planner::sample_paths(planner_model, ctx_span, embedding_table, k_paths, t_steps, tau,
                                                     bseed);
            for (size_t a = 0; a < paths.size(); ++a) {
                for (size_t b = a + 1; b < paths.size(); ++b) {
                    int diff = 0;
                    for (int t = 0; t < t_steps; ++t) {
                        if (paths[a].actions[static_cast<size_t>(t)] != paths[b].actions[static_cast<size_t>(t)]) ++diff;
                    }
                    hamming_sum += diff;
                    ++n_pairs;
                }
            }
            // distribution flatness along the argmax-free sampled rollout of path 0
            Tape tape;
            Binder binder(tape);
            planner::PlannerVars pv = planner::bind_planner(binder, "planner.", planner_model);
            planner::LatentContext ctx = planner::represent(tape, pv, ctx_span, embedding_table);
            for (int t = 0; t < t_steps; ++t) {
                Var dist = planner::predict_action_dist(pv, ctx, tau);
                const Tensor& dv = tape.value(dist);
                double mx = dv(0, 0), mn = dv(0, 0);
                for (int a = 1; a < dv.dim(1); ++a) {
                    mx = std::max(mx, dv(0, a));
                    mn = std::min(mn, dv(0, a));
                }
                spread_sum += mx - mn;
                ++n_steps;
                if (t + 1 < t_steps) {
                    ctx = planner::dynamics_step(pv, ctx, paths[0].actions[static_cast<size_t>(t)]);
                }
            }
        }
    }
    stats.mean_pairwise_hamming = n_pairs > 0 ? hamming_sum / static_cast<double>(n_pairs) : 0.0;
    stats.mean_prob_spread = n_steps > 0 ? spread_sum / static_cast<double>(n_steps) : 0.0;
    return stats;
}

// ---------------------------------------------------------------------------
// persistence and CSV

void save_conditioned(const std::string& path, ConditionedLM& lm, AdapterModel& adp) {
    std::vector<std::pair<std::string, const Tensor*>> items;
    lm.visit("lm.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    adp.visit("adapter.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    core::save_checkpoint(path, items);
}

std::pair<ConditionedLM, AdapterModel> load_conditioned(const std::string& path, const adapter::LmConfig& lm_cfg,
                                                        const adapter::AdapterConfig& a_cfg) {
    Rng rng(0);
    ConditionedLM lm = ConditionedLM::init(lm_cfg, rng);
    AdapterModel adp = AdapterModel::init(a_cfg, rng);
    std::vector<std::pair<std::string, Tensor*>> items;
    lm.visit("lm.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    adp.visit("adapter.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    core::load_checkpoint(path, items);
    return {std::move(lm), std::move(adp)};
}

void save_lm(const std::string& path, ConditionedLM& lm) {
    std::vector<std::pair<std::string, const Tensor*>> items;
    lm.visit("lm.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    core::save_checkpoint(path, items);
}

ConditionedLM load_lm(const std::string& path, const adapter::LmConfig& cfg) {
    Rng rng(0);
    ConditionedLM lm = ConditionedLM::init(cfg, rng);
    std::vector<std::pair<std::string, Tensor*>> items;
    lm.visit("lm.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    core::load_checkpoint(path, items);
    return lm;
}

std::string format_sig(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return std::string(buf);
}

namespace {
std::string format_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}
}  // namespace

void write_ppl_csv(const std::string& path, const std::vector<WindowNll>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw core::IoError("cannot write csv: " + path);
    out << "window_index,article_id,first_sentence,tokens,nll_sum\n";
    for (const auto& r : rows) {
        out << r.window_index << "," << r.article_id << "," << r.first_sentence << "," << r.tokens << ","
            << format_full(r.nll_sum) << "\n";
    }
}

std::vector<WindowNll> read_ppl_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw core::IoError("cannot open csv: " + path);
    std::string line;
    if (!std::getline(in, line)) throw core::IoError("empty csv: " + path);
    std::vector<WindowNll> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        WindowNll r;
        std::getline(ss, field, ',');
        r.window_index = std::stoi(field);
        std::getline(ss, r.article_id, ',');
        std::getline(ss, field, ',');
        r.first_sentence = std::stoi(field);
        std::getline(ss, field, ',');
        r.tokens = std::stoll(field);
        std::getline(ss, field, ',');
        r.nll_sum = std::stod(field);
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_edit_csv(const std::string& path, const std::vector<std::string>& article_ids,
                    const std::vector<double>& distances) {
    if (article_ids.size() != distances.size()) throw std::invalid_argument("write_edit_csv: size mismatch");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw core::IoError("cannot write csv: " + path);
    out << "article_id,edit_distance\n";
    for (size_t i = 0; i < distances.size(); ++i) {
        out << article_ids[i] << "," << format_sig(distances[i]) << "\n";
    }
}

void write_sweep_k_csv(const std::string& path, const std::vector<SweepKRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw core::IoError("cannot write csv: " + path);
    out << "K,ppl,relative_time\n";
    for (const auto& r : rows) {
        out << r.k << "," << format_sig(r.ppl) << "," << format_sig(r.relative_time) << "\n";
    }
}

void write_sweep_temp_csv(const std::string& path, const std::vector<SweepTempRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw core::IoError("cannot write csv: " + path);
    out << "tau,ppl\n";
    for (const auto& r : rows) {
        out << format_sig(r.tau) << "," << format_sig(r.ppl) << "\n";
    }
}

}  // namespace lplm::pipeline
