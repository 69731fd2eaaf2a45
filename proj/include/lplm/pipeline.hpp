#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lplm/adapter_lm.hpp"
#include "lplm/planner.hpp"

namespace lplm::pipeline {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunConfig {
    uint64_t seed = 1;

    std::string train_corpus;
    std::string val_corpus;
    std::string test_corpus;
    std::string vocab_path;

    int action_count = 16;  // C
    int t_steps = 5;        // T
    int k_paths = 10;       // K
    double tau = 1.0;

    int d_lm = 128;
    int d_e = 0;  // 0 -> d_lm (planner runs on the LM embedding table)
    int d_a = 0;  // 0 -> d_lm
    int lm_layers = 4;
    int lm_heads = 4;
    int planner_layers = 2;
    int planner_heads = 2;
    int adapter_layers = 2;
    int adapter_heads = 2;

    int window = 128;
    int eval_window = 0;  // 0 -> window
    int m_max = 64;
    int t_max = 16;

    int batch_lm = 32;
    int batch_planner = 64;
    double lr_lm = 1e-4;
    double lr_planner = 1e-4;
    int pretrain_steps = 400;
    int planner_steps = 300;
    int finetune_steps = 400;

    adapter::Variant variant = adapter::Variant::kFull;
    bool rezero_enabled = true;

    int gen_len = 128;          // tokens generated for the edit-distance metric
    int eval_max_articles = 0;  // 0 -> all

    int resolved_d_e() const { return d_e > 0 ? d_e : d_lm; }
    int resolved_d_a() const { return d_a > 0 ? d_a : d_lm; }
    int resolved_eval_window() const { return eval_window > 0 ? eval_window : window; }

    void validate() const;  // throws ConfigError
    std::string canonical_json() const;
    std::string config_hash() const;  // fnv-1a 64 over canonical_json, hex

    static RunConfig from_json_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);

    planner::PlannerConfig planner_config() const;
    adapter::AdapterConfig adapter_config() const;
    adapter::LmConfig lm_config(int vocab_size) const;
};

struct EvalReport {
    double perplexity = 0.0;
    int64_t token_count = 0;
    std::optional<double> edit_distance_mean;
    double wall_clock_seconds = 0.0;
    std::string config_hash;

    void save_json(const std::string& path) const;
};

// One LM training window: whole sentences, BOS first.
struct Window {
    int article_index = 0;
    int first_sentence = 0;  // index within the article
    int num_sentences = 0;
    std::vector<int> tokens;     // [BOS, sentence tokens...]
    std::vector<int> sent_slot;  // per token: sentence index within window, -1 for BOS
};

// Consecutive whole-sentence windows per article. A sentence that does not
// fit a window on its own ends its article's coverage.
std::vector<Window> build_windows(const std::vector<corpus::Article>& articles, int window_len);
std::vector<Window> build_windows_labeled(const std::vector<actions::LabeledArticle>& articles, int window_len);

struct TrainLog {
    std::vector<double> step_loss;
    std::vector<std::string> warnings;
    bool quiet = false;
};

// Causal-LM pretraining with zero conditioning on whole-sentence windows.
adapter::ConditionedLM pretrain_base_lm(const RunConfig& cfg, const std::vector<corpus::Article>& corpus,
                                        int vocab_size, TrainLog* log = nullptr);

// Fits the action vocabulary on every sentence embedding in the corpus.
actions::ActionVocabulary fit_actions(const RunConfig& cfg, const std::vector<corpus::Article>& corpus,
                                      const core::Tensor& embedding_table);

struct PlannerAccuracy {
    std::vector<double> per_step;  // index k-1: argmax-rollout accuracy at step k
    int64_t boundaries = 0;
};

// Teacher-forced multi-step training over uniformly sampled boundaries;
// articles shorter than T+1 sentences are skipped with a warning.
planner::PlannerModel train_planner(const RunConfig& cfg, const std::vector<actions::LabeledArticle>& labeled,
                                    const core::Tensor& embedding_table, TrainLog* log = nullptr);

PlannerAccuracy measure_planner_accuracy(planner::PlannerModel& planner,
                                         const std::vector<actions::LabeledArticle>& labeled,
                                         const core::Tensor& embedding_table, int t_steps, int max_articles = 0);

// LM + adapter fine-tuning with the planner frozen. planner may be null only
// for the Fixed variant. Paths for each training boundary are sampled once
// (planner is frozen) and reused across steps.
std::pair<adapter::ConditionedLM, adapter::AdapterModel> finetune_conditioned_lm(
    const RunConfig& cfg, const std::vector<actions::LabeledArticle>& labeled, planner::PlannerModel* planner,
    const adapter::ConditionedLM& base_lm, TrainLog* log = nullptr);

struct WindowNll {
    int window_index = 0;
    std::string article_id;
    int first_sentence = 0;
    int64_t tokens = 0;
    double nll_sum = 0.0;
};

struct PerplexityResult {
    EvalReport report;
    std::vector<WindowNll> per_window;
};

// Teacher-forced perplexity: the planner is invoked at every sentence
// boundary; K, T and tau may differ from training. Timing covers the
// conditioning and forward passes only.
PerplexityResult eval_perplexity(const RunConfig& cfg, adapter::ConditionedLM& lm, adapter::AdapterModel& adp,
                                 planner::PlannerModel* planner, const std::vector<actions::LabeledArticle>& corpus,
                                 int k_paths, int t_steps, double tau, uint64_t seed);

int levenshtein(std::span<const int> a, std::span<const int> b);

struct EditDistanceResult {
    EvalReport report;
    std::vector<double> per_article;
};

// Generates gen_len tokens from each article's first sentence (temperature
// 1.0), re-labels the generated sentences through the action vocabulary and
// reports the mean Levenshtein distance to the article's remaining actions.
EditDistanceResult eval_edit_distance(const RunConfig& cfg, adapter::ConditionedLM& lm, adapter::AdapterModel& adp,
                                      planner::PlannerModel* planner, const actions::ActionVocabulary& avocab,
                                      const corpus::TokenVocabulary& vocab,
                                      const std::vector<actions::LabeledArticle>& corpus, int gen_len, uint64_t seed);

struct SweepKRow {
    int k = 0;
    double ppl = 0.0;
    double relative_time = 0.0;  // wall clock normalized to the K=1 row
};

std::vector<SweepKRow> sweep_k(const RunConfig& cfg, adapter::ConditionedLM& lm, adapter::AdapterModel& adp,
                               planner::PlannerModel& planner, const std::vector<actions::LabeledArticle>& corpus,
                               const std::vector<int>& k_list, double tau, uint64_t seed);

struct SweepTempRow {
    double tau = 0.0;
    double ppl = 0.0;
};

std::vector<SweepTempRow> sweep_temperature(const RunConfig& cfg, adapter::ConditionedLM& lm,
                                            adapter::AdapterModel& adp, planner::PlannerModel& planner,
                                            const std::vector<actions::LabeledArticle>& corpus,
                                            const std::vector<double>& tau_list, int k_paths, uint64_t seed);

struct PathStats {
    double mean_pairwise_hamming = 0.0;  // over the K paths, in positions
    double mean_prob_spread = 0.0;       // mean over steps of max-min of the step distribution
};

// Diversity and flatness of sampled paths at a given temperature, measured
// over every boundary of the corpus (capped by cfg.eval_max_articles).
PathStats measure_path_stats(const RunConfig& cfg, planner::PlannerModel& planner,
                             const std::vector<actions::LabeledArticle>& corpus, const core::Tensor& embedding_table,
                             int k_paths, int t_steps, double tau, uint64_t seed);

// --- persistence helpers shared by the CLI and tests ---

void save_conditioned(const std::string& path, adapter::ConditionedLM& lm, adapter::AdapterModel& adp);
std::pair<adapter::ConditionedLM, adapter::AdapterModel> load_conditioned(const std::string& path,
                                                                          const adapter::LmConfig& lm_cfg,
                                                                          const adapter::AdapterConfig& a_cfg);
void save_lm(const std::string& path, adapter::ConditionedLM& lm);
adapter::ConditionedLM load_lm(const std::string& path, const adapter::LmConfig& cfg);

std::string format_sig(double v, int digits = 6);
void write_ppl_csv(const std::string& path, const std::vector<WindowNll>& rows);
std::vector<WindowNll> read_ppl_csv(const std::string& path);
void write_edit_csv(const std::string& path, const std::vector<std::string>& article_ids,
                    const std::vector<double>& distances);
void write_sweep_k_csv(const std::string& path, const std::vector<SweepKRow>& rows);
void write_sweep_temp_csv(const std::string& path, const std::vector<SweepTempRow>& rows);

// Deterministic per-boundary path seed.
uint64_t boundary_seed(uint64_t seed, uint64_t article, uint64_t first_sentence, uint64_t sentence_j);

}  // namespace lplm::pipeline
