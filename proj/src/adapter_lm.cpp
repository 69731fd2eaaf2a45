#include "lplm/adapter_lm.hpp"

#include <stdexcept>

namespace lplm::adapter {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::kFixed: return "Fixed";
        case Variant::kArgmax1: return "Argmax1";
        case Variant::kProjectAvg: return "ProjectAvg";
        case Variant::kFull: return "Full";
    }
    throw std::logic_error("unknown adapter variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "Fixed") return Variant::kFixed;
    if (name == "Argmax1") return Variant::kArgmax1;
    if (name == "ProjectAvg") return Variant::kProjectAvg;
    if (name == "Full") return Variant::kFull;
    throw std::invalid_argument("unknown adapter variant '" + name + "' (expected Fixed|Argmax1|ProjectAvg|Full)");
}

AdapterModel AdapterModel::init(const AdapterConfig& cfg, core::Rng& rng) {
    AdapterModel m;
    m.cfg = cfg;
    m.w = Tensor::gaussian({cfg.d_a, cfg.d_lm}, core::kInitStd, rng);
    m.b = Tensor::zeros({cfg.d_lm});
    m.action_embedding = Tensor::gaussian({cfg.action_count, cfg.d_a}, core::kInitStd, rng);
    m.path_transformer = core::EncoderParams::init(cfg.path_encoder_cfg(), rng);
    m.pt_out_w = Tensor::gaussian({cfg.d_a, cfg.d_lm}, core::kInitStd, rng);
    m.pt_out_b = Tensor::zeros({cfg.d_lm});
    m.sample_transformer = core::EncoderParams::init(cfg.sample_encoder_cfg(), rng);
    m.path_pos = Tensor::gaussian({cfg.t_max, cfg.d_a}, core::kInitStd, rng);
    m.alpha1 = Tensor::zeros({1});
    m.alpha2 = Tensor::zeros({1});
    return m;
}

void AdapterModel::visit(const std::string& prefix, const core::ParamVisitor& fn) {
    fn(prefix + "w", w);
    fn(prefix + "b", b);
    fn(prefix + "action_embedding", action_embedding);
    path_transformer.visit(prefix + "pt.", fn);
    fn(prefix + "pt.out_w", pt_out_w);
    fn(prefix + "pt.out_b", pt_out_b);
    sample_transformer.visit(prefix + "st.", fn);
    fn(prefix + "path_pos", path_pos);
    fn(prefix + "alpha1", alpha1);
    fn(prefix + "alpha2", alpha2);
}

AdapterVars bind_adapter(Binder& bind, const std::string& prefix, AdapterModel& m) {
    AdapterVars v;
    v.cfg = m.cfg;
    v.w = bind(prefix + "w", m.w);
    v.b = bind(prefix + "b", m.b);
    v.action_embedding = bind(prefix + "action_embedding", m.action_embedding);
    v.path_transformer = core::bind_encoder(bind, prefix + "pt.", m.path_transformer);
    v.pt_out_w = bind(prefix + "pt.out_w", m.pt_out_w);
    v.pt_out_b = bind(prefix + "pt.out_b", m.pt_out_b);
    v.sample_transformer = core::bind_encoder(bind, prefix + "st.", m.sample_transformer);
    v.path_pos = bind(prefix + "path_pos", m.path_pos);
    v.alpha1 = bind(prefix + "alpha1", m.alpha1);
    v.alpha2 = bind(prefix + "alpha2", m.alpha2);
    return v;
}

ConditionedLM ConditionedLM::init(const LmConfig& cfg, core::Rng& rng) {
    ConditionedLM m;
    m.cfg = cfg;
    m.token_embedding = Tensor::gaussian({cfg.vocab, cfg.d_lm}, core::kInitStd, rng);
    m.pos_embedding = Tensor::gaussian({cfg.window_max, cfg.d_lm}, core::kInitStd, rng);
    m.decoder = core::EncoderParams::init(cfg.encoder_cfg(), rng);
    m.out_w = Tensor::gaussian({cfg.d_lm, cfg.vocab}, core::kInitStd, rng);
    m.out_b = Tensor::zeros({cfg.vocab});
    return m;
}

void ConditionedLM::visit(const std::string& prefix, const core::ParamVisitor& fn) {
    fn(prefix + "token_embedding", token_embedding);
    fn(prefix + "pos_embedding", pos_embedding);
    decoder.visit(prefix + "decoder.", fn);
    fn(prefix + "out_w", out_w);
    fn(prefix + "out_b", out_b);
}

LmVars bind_lm(Binder& bind, const std::string& prefix, ConditionedLM& m) {
    LmVars v;
    v.cfg = m.cfg;
    v.token_embedding = bind(prefix + "token_embedding", m.token_embedding);
    v.pos_embedding = bind(prefix + "pos_embedding", m.pos_embedding);
    v.decoder = core::bind_encoder(bind, prefix + "decoder.", m.decoder);
    v.out_w = bind(prefix + "out_w", m.out_w);
    v.out_b = bind(prefix + "out_b", m.out_b);
    return v;
}

Var project_action(const AdapterVars& vars, int action) {
    if (action < 0 || action >= vars.cfg.action_count) {
        throw std::out_of_range("project_action: action id " + std::to_string(action) + " out of range");
    }
    Var emb = embedding(vars.action_embedding, {action});
    return core::linear(emb, vars.w, vars.b);
}

Var path_avg(const AdapterVars& vars, std::span<const int> path) {
    if (path.empty()) throw std::invalid_argument("path_avg: empty path");
    std::vector<int> ids(path.begin(), path.end());
    for (int a : ids) {
        if (a < 0 || a >= vars.cfg.action_count) {
            throw std::out_of_range("path_avg: action id " + std::to_string(a) + " out of range");
        }
    }
    Var embs = embedding(vars.action_embedding, std::move(ids));  // [T, d_a]
    Var projected = core::linear(embs, vars.w, vars.b);           // [T, d_lm]
    return mean_rows(projected);
}

Var multi_path_naive(const AdapterVars& vars, std::span<const std::vector<int>> paths) {
    if (paths.empty()) throw std::invalid_argument("multi_path_naive: no paths");
    std::vector<Var> per_path;
    per_path.reserve(paths.size());
    for (const auto& p : paths) per_path.push_back(path_avg(vars, p));
    if (per_path.size() == 1) return per_path[0];
    return mean_rows(stack_rows(per_path));
}

Var multi_path_full(const AdapterVars& vars, std::span<const std::vector<int>> paths) {
    if (paths.empty()) throw std::invalid_argument("multi_path_full: no paths");
    const size_t t_len = paths[0].size();
    for (const auto& p : paths) {
        if (p.size() != t_len) throw std::invalid_argument("multi_path_full: paths of unequal length");
    }
    if (static_cast<int>(t_len) > vars.cfg.t_max) {
        throw std::invalid_argument("multi_path_full: path length " + std::to_string(t_len) + " exceeds t_max " +
                                    std::to_string(vars.cfg.t_max));
    }
    Var pos = slice_rows(vars.path_pos, 0, static_cast<int>(t_len));
    std::vector<Var> per_path;
    per_path.reserve(paths.size());
    for (const auto& p : paths) {
        std::vector<int> ids(p.begin(), p.end());
        Var embs = embedding(vars.action_embedding, std::move(ids));  // [T, d_a]
        Var enc = core::encoder_forward(vars.path_transformer, add(embs, pos), /*causal=*/false);
        Var pooled = core::linear(mean_rows(enc), vars.pt_out_w, vars.pt_out_b);  // [1, d_lm]
        if (vars.cfg.rezero) {
            per_path.push_back(add(scale_var(pooled, vars.alpha1), path_avg(vars, p)));
        } else {
            per_path.push_back(pooled);
        }
    }
    Var stacked = per_path.size() == 1 ? per_path[0] : stack_rows(per_path);  // [K, d_lm]
    Var agg = mean_rows(core::encoder_forward(vars.sample_transformer, stacked, /*causal=*/false));
    if (vars.cfg.rezero) {
        return add(scale_var(agg, vars.alpha2), multi_path_naive(vars, paths));
    }
    return agg;
}

Var make_fixed_conditioning(const AdapterVars& vars) { return project_action(vars, 0); }

Var condition_and_forward(const LmVars& lm, std::span<const int> tokens, std::span<const int> sent_slot,
                          std::span<const Var> sentence_conds) {
    const int n = static_cast<int>(tokens.size());
    if (n < 2) throw std::invalid_argument("condition_and_forward: window needs at least 2 tokens");
    if (n > lm.cfg.window_max) {
        throw std::invalid_argument("condition_and_forward: window of " + std::to_string(n) + " tokens exceeds " +
                                    std::to_string(lm.cfg.window_max));
    }
    if (sent_slot.size() != tokens.size()) {
        throw std::invalid_argument("condition_and_forward: " + std::to_string(sent_slot.size()) +
                                    " sentence slots for " + std::to_string(tokens.size()) + " tokens");
    }
    Tape& tape = *lm.token_embedding.tape;
    const int s = static_cast<int>(sentence_conds.size());
    for (int slot : sent_slot) {
        if (slot < -1 || slot >= s) {
            throw std::out_of_range("condition_and_forward: sentence slot " + std::to_string(slot) +
                                    " outside [-1," + std::to_string(s) + ")");
        }
    }

    Var tok = embedding(lm.token_embedding, std::vector<int>(tokens.begin(), tokens.end()));
    Var x = add(tok, slice_rows(lm.pos_embedding, 0, n));

    // Per-token conditioning rows gathered from a stack whose row 0 is a
    // constant zero vector for unconditioned positions.
    std::vector<Var> stack;
    stack.reserve(sentence_conds.size() + 1);
    stack.push_back(tape.leaf(Tensor({1, lm.cfg.d_lm})));
    for (const Var& c : sentence_conds) {
        const Tensor& cv = tape.value(c);
        if (cv.rank() != 2 || cv.dim(0) != 1 || cv.dim(1) != lm.cfg.d_lm) {
            throw core::ShapeError("condition_and_forward: conditioning shape " + core::shape_str(cv.shape()));
        }
        stack.push_back(c);
    }
    std::vector<int> cond_ids(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) cond_ids[i] = sent_slot[i] + 1;
    x = add(x, embedding(stack_rows(stack), std::move(cond_ids)));

    Var enc = core::encoder_forward(lm.decoder, x, /*causal=*/true);
    return core::linear(enc, lm.out_w, lm.out_b);
}

}  // namespace lplm::adapter
