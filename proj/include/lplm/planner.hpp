#pragma once

#include <span>
#include <string>
#include <vector>

#include "lplm/actions.hpp"
#include "lplm/corpus.hpp"
#include "lplm/nn.hpp"
#include "lplm/optim.hpp"

namespace lplm::planner {

using core::Binder;
using core::Tape;
using core::Tensor;
using core::Var;

struct PlannerConfig {
    int action_count = 16;  // C
    int width = 64;         // latent dimension; must match the encoder table
    int m_max = 64;         // context sentences + rolled actions
    int layers = 2;
    int heads = 2;

    core::EncoderConfig encoder_cfg() const { return {width, heads, layers, 0, false}; }
};

// Per-sentence encoder output plus rolled action rows. Rows beyond
// real_count correspond, in order, to actions already advanced through the
// dynamics encoder.
struct LatentContext {
    Var latents;  // [m, width]
    int real_count = 0;

    int rows() const;
};

struct PathSample {
    std::vector<int> actions;
    std::vector<double> step_probs;  // probability of each drawn action
};

struct PlannerModel {
    PlannerConfig cfg;
    Tensor action_embedding;   // [C, width]
    core::EncoderParams f_encoder;
    Tensor f_cls_w;            // [width, C]
    Tensor f_cls_b;            // [C]
    core::EncoderParams g_encoder;
    Tensor sentence_pos;       // [m_max, width]

    static PlannerModel init(const PlannerConfig& cfg, core::Rng& rng);
    void visit(const std::string& prefix, const core::ParamVisitor& fn);
    void save(const std::string& path);
    static PlannerModel load(const std::string& path, const PlannerConfig& cfg);
};

struct PlannerVars {
    PlannerConfig cfg;
    Var action_embedding, f_cls_w, f_cls_b, sentence_pos;
    core::EncoderVars f_encoder, g_encoder;
};

// Binds with names under "planner." by convention; tests may use another
// prefix.
PlannerVars bind_planner(Binder& bind, const std::string& prefix, PlannerModel& m);

// Row i = encode_sentence(context[i]) + sentence position i. Throws if the
// context is empty or longer than m_max.
LatentContext represent(Tape& tape, const PlannerVars& vars, std::span<const corpus::Sentence> context,
                        const Tensor& embedding_table);

// Bi-directional encoding of all rows, mean pooled, linear classifier.
Var predict_action_logits(const PlannerVars& vars, const LatentContext& ctx);
// Softmax of the logits at temperature tau; sums to 1.
Var predict_action_dist(const PlannerVars& vars, const LatentContext& ctx, double tau);

// Appends the action embedding row and re-encodes every row; real_count is
// unchanged. Throws when the row count would exceed m_max.
LatentContext dynamics_step(const PlannerVars& vars, const LatentContext& ctx, int action);

// Greedy rollout: argmax, advance, repeat T times.
std::vector<int> rollout_argmax(const PlannerVars& vars, LatentContext ctx, int t_steps);

// K independent paths, sampled autoregressively at temperature tau. Path j
// draws from the rng substream hash(seed, j), so results do not depend on
// sampling order.
std::vector<PathSample> sample_paths(const PlannerVars& vars, const LatentContext& ctx, int k_paths, int t_steps,
                                     double tau, uint64_t seed);

// Teacher-forced multi-step loss at 1-based sentence boundary i: context is
// sentences 1..i-1, targets are actions i..i+T-1, and the dynamics consume
// the ground-truth action at each step. Mean NLL over the T steps.
Var planner_loss(Tape& tape, const PlannerVars& vars, const actions::LabeledArticle& labeled,
                 const Tensor& embedding_table, int t_steps, int boundary_i);

// Convenience wrappers that bind the model on an internal tape.
std::vector<int> rollout_argmax(PlannerModel& m, std::span<const corpus::Sentence> context,
                                const Tensor& embedding_table, int t_steps);
std::vector<PathSample> sample_paths(PlannerModel& m, std::span<const corpus::Sentence> context,
                                     const Tensor& embedding_table, int k_paths, int t_steps, double tau,
                                     uint64_t seed);

}  // namespace lplm::planner
