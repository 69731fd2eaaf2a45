#pragma once

#include <span>
#include <string>
#include <vector>

#include "lplm/nn.hpp"
#include "lplm/optim.hpp"

namespace lplm::adapter {

using core::Binder;
using core::Tape;
using core::Tensor;
using core::Var;

enum class Variant { kFixed, kArgmax1, kProjectAvg, kFull };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct AdapterConfig {
    int action_count = 16;  // C
    int d_a = 128;          // action embedding width
    int d_lm = 128;         // conditioning width
    int t_max = 16;         // path position rows
    int layers = 2;
    int heads = 2;
    bool rezero = true;  // false: drop the gated residual to the naive path

    core::EncoderConfig path_encoder_cfg() const { return {d_a, heads, layers, 0, false}; }
    core::EncoderConfig sample_encoder_cfg() const { return {d_lm, heads, layers, 0, false}; }
};

// Linear action projection plus the two-level path/sample aggregator with
// zero-initialized residual gates.
struct AdapterModel {
    AdapterConfig cfg;
    Tensor w;                 // [d_a, d_lm], applied as row-vector times matrix
    Tensor b;                 // [d_lm]
    Tensor action_embedding;  // [C, d_a]
    core::EncoderParams path_transformer;    // width d_a, bi-directional
    Tensor pt_out_w;          // [d_a, d_lm]
    Tensor pt_out_b;          // [d_lm]
    core::EncoderParams sample_transformer;  // width d_lm, bi-directional, no positions
    Tensor path_pos;          // [t_max, d_a]
    Tensor alpha1, alpha2;    // scalars, zero at init

    static AdapterModel init(const AdapterConfig& cfg, core::Rng& rng);
    void visit(const std::string& prefix, const core::ParamVisitor& fn);
};

struct AdapterVars {
    AdapterConfig cfg;
    Var w, b, action_embedding, pt_out_w, pt_out_b, path_pos, alpha1, alpha2;
    core::EncoderVars path_transformer, sample_transformer;
};

AdapterVars bind_adapter(Binder& bind, const std::string& prefix, AdapterModel& m);

struct LmConfig {
    int vocab = 512;
    int d_lm = 128;
    int window_max = 128;
    int layers = 4;
    int heads = 4;

    core::EncoderConfig encoder_cfg() const { return {d_lm, heads, layers, 0, true}; }
};

// Decoder-only causal LM. Conditioning vectors are added to the token
// embeddings of their sentence before the decoder stack.
struct ConditionedLM {
    LmConfig cfg;
    Tensor token_embedding;  // [V, d_lm]
    Tensor pos_embedding;    // [window_max, d_lm]
    core::EncoderParams decoder;
    Tensor out_w;  // [d_lm, V]
    Tensor out_b;  // [V]

    static ConditionedLM init(const LmConfig& cfg, core::Rng& rng);
    void visit(const std::string& prefix, const core::ParamVisitor& fn);
};

struct LmVars {
    LmConfig cfg;
    Var token_embedding, pos_embedding, out_w, out_b;
    core::EncoderVars decoder;
};

LmVars bind_lm(Binder& bind, const std::string& prefix, ConditionedLM& m);

// W * Emb(a) + b -> [1, d_lm]
Var project_action(const AdapterVars& vars, int action);

// Mean over the path steps of the projected action embeddings.
Var path_avg(const AdapterVars& vars, std::span<const int> path);

// Mean over K paths of path_avg.
Var multi_path_naive(const AdapterVars& vars, std::span<const std::vector<int>> paths);

// Two-level aggregation: per path, a position-aware encoder pooled and
// projected, gated by alpha1 into the path average; across paths, a
// position-free encoder pooled and gated by alpha2 into the naive mean.
// With both gates at zero this is exactly multi_path_naive. With
// cfg.rezero == false the gates and residuals are dropped entirely.
Var multi_path_full(const AdapterVars& vars, std::span<const std::vector<int>> paths);

// Fixed baseline: the projection of reserved action 0, identical for every
// sentence.
Var make_fixed_conditioning(const AdapterVars& vars);

// tokens: window token ids; sent_slot[t]: index into sentence_conds for the
// sentence containing token t, or -1 for unconditioned positions; returns
// next-token logits [L, V].
Var condition_and_forward(const LmVars& lm, std::span<const int> tokens, std::span<const int> sent_slot,
                          std::span<const Var> sentence_conds);

}  // namespace lplm::adapter
