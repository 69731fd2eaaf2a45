#include "lplm/planner.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "lplm/checkpoint.hpp"

namespace lplm::planner {

int LatentContext::rows() const { return latents.tape->value(latents).dim(0); }

PlannerModel PlannerModel::init(const PlannerConfig& cfg, core::Rng& rng) {
    if (cfg.action_count < 2) throw std::invalid_argument("planner: action_count must be at least 2");
    PlannerModel m;
    m.cfg = cfg;
    m.action_embedding = Tensor::gaussian({cfg.action_count, cfg.width}, core::kInitStd, rng);
    m.f_encoder = core::EncoderParams::init(cfg.encoder_cfg(), rng);
    m.f_cls_w = Tensor::gaussian({cfg.width, cfg.action_count}, core::kInitStd, rng);
    m.f_cls_b = Tensor::zeros({cfg.action_count});
    m.g_encoder = core::EncoderParams::init(cfg.encoder_cfg(), rng);
    m.sentence_pos = Tensor::gaussian({cfg.m_max, cfg.width}, core::kInitStd, rng);
    return m;
}

void PlannerModel::visit(const std::string& prefix, const core::ParamVisitor& fn) {
    fn(prefix + "action_embedding", action_embedding);
    f_encoder.visit(prefix + "f.", fn);
    fn(prefix + "f.cls_w", f_cls_w);
    fn(prefix + "f.cls_b", f_cls_b);
    g_encoder.visit(prefix + "g.", fn);
    fn(prefix + "sentence_pos", sentence_pos);
}

void PlannerModel::save(const std::string& path) {
    std::vector<std::pair<std::string, const Tensor*>> items;
    visit("planner.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    core::save_checkpoint(path, items);
}

PlannerModel PlannerModel::load(const std::string& path, const PlannerConfig& cfg) {
    core::Rng rng(0);
    PlannerModel m = init(cfg, rng);
    std::vector<std::pair<std::string, Tensor*>> items;
    m.visit("planner.", [&](const std::string& n, Tensor& t) { items.emplace_back(n, &t); });
    core::load_checkpoint(path, items);
    return m;
}

PlannerVars bind_planner(Binder& bind, const std::string& prefix, PlannerModel& m) {
    PlannerVars v;
    v.cfg = m.cfg;
    v.action_embedding = bind(prefix + "action_embedding", m.action_embedding);
    v.f_encoder = core::bind_encoder(bind, prefix + "f.", m.f_encoder);
    v.f_cls_w = bind(prefix + "f.cls_w", m.f_cls_w);
    v.f_cls_b = bind(prefix + "f.cls_b", m.f_cls_b);
    v.g_encoder = core::bind_encoder(bind, prefix + "g.", m.g_encoder);
    v.sentence_pos = bind(prefix + "sentence_pos", m.sentence_pos);
    return v;
}

LatentContext represent(Tape& tape, const PlannerVars& vars, std::span<const corpus::Sentence> context,
                        const Tensor& embedding_table) {
    const int m = static_cast<int>(context.size());
    if (m < 1) throw std::invalid_argument("represent: need at least one context sentence");
    if (m > vars.cfg.m_max) {
        throw std::invalid_argument("represent: context of " + std::to_string(m) + " sentences exceeds m_max " +
                                    std::to_string(vars.cfg.m_max));
    }
    const int d = vars.cfg.width;
    if (embedding_table.dim(1) != d) {
        throw core::ShapeError("represent: embedding table width " + std::to_string(embedding_table.dim(1)) +
                               " does not match planner width " + std::to_string(d));
    }
    Tensor rows({m, d});
    for (int i = 0; i < m; ++i) {
        const auto emb = actions::encode_sentence(context[static_cast<size_t>(i)], embedding_table);
        for (int j = 0; j < d; ++j) rows(i, j) = emb.vector(j);
    }
    Var base = tape.leaf(std::move(rows));
    Var pos = slice_rows(vars.sentence_pos, 0, m);
    return LatentContext{add(base, pos), m};
}

Var predict_action_logits(const PlannerVars& vars, const LatentContext& ctx) {
    Var enc = core::encoder_forward(vars.f_encoder, ctx.latents, /*causal=*/false);
    Var pooled = mean_rows(enc);
    return core::linear(pooled, vars.f_cls_w, vars.f_cls_b);
}

Var predict_action_dist(const PlannerVars& vars, const LatentContext& ctx, double tau) {
    return softmax_rows(predict_action_logits(vars, ctx), tau);
}

LatentContext dynamics_step(const PlannerVars& vars, const LatentContext& ctx, int action) {
    if (action < 0 || action >= vars.cfg.action_count) {
        throw std::out_of_range("dynamics_step: action id " + std::to_string(action) + " out of range");
    }
    const int m = ctx.rows();
    if (m + 1 > vars.cfg.m_max) {
        throw std::invalid_argument("dynamics_step: row count " + std::to_string(m + 1) + " exceeds m_max " +
                                    std::to_string(vars.cfg.m_max));
    }
    Var row = embedding(vars.action_embedding, {action});
    Var appended = append_row(ctx.latents, row);
    Var encoded = core::encoder_forward(vars.g_encoder, appended, /*causal=*/false);
    return LatentContext{encoded, ctx.real_count};
}

std::vector<int> rollout_argmax(const PlannerVars& vars, LatentContext ctx, int t_steps) {
    if (t_steps < 1) throw std::invalid_argument("rollout_argmax: T must be at least 1");
    std::vector<int> out;
    out.reserve(static_cast<size_t>(t_steps));
    for (int k = 0; k < t_steps; ++k) {
        Var logits = predict_action_logits(vars, ctx);
        const Tensor& lv = logits.tape->value(logits);
        int best = 0;
        for (int a = 1; a < vars.cfg.action_count; ++a) {
            if (lv(0, a) > lv(0, best)) best = a;
        }
        out.push_back(best);
        if (k + 1 < t_steps) ctx = dynamics_step(vars, ctx, best);
    }
    return out;
}

std::vector<PathSample> sample_paths(const PlannerVars& vars, const LatentContext& ctx, int k_paths, int t_steps,
                                     double tau, uint64_t seed) {
    if (k_paths < 1 || t_steps < 1) throw std::invalid_argument("sample_paths: K and T must be at least 1");
    if (!(tau > 0.0)) throw std::invalid_argument("sample_paths: temperature must be positive");

    // Path j draws from substream hash(seed, j), one draw per step, exactly
    // as if each path were rolled independently. Paths sharing an action
    // prefix also share the teacher-forced latent state, so the predict and
    // dynamics passes are computed once per distinct prefix.
    std::vector<PathSample> paths(static_cast<size_t>(k_paths));
    std::vector<core::Rng> rngs;
    rngs.reserve(static_cast<size_t>(k_paths));
    for (int j = 0; j < k_paths; ++j) rngs.emplace_back(core::hash_stream(seed, static_cast<uint64_t>(j)));

    struct Group {
        LatentContext ctx;
        std::vector<int> members;  // path indices, ascending
    };
    std::vector<Group> groups;
    {
        Group root{ctx, {}};
        for (int j = 0; j < k_paths; ++j) root.members.push_back(j);
        groups.push_back(std::move(root));
    }
    for (int k = 0; k < t_steps; ++k) {
        std::vector<Group> next;
        for (auto& g : groups) {
            Var dist = predict_action_dist(vars, g.ctx, tau);
            const Tensor& dv = dist.tape->value(dist);
            const auto probs = std::span<const double>(dv.data(), static_cast<size_t>(dv.size()));
            std::map<int, std::vector<int>> by_action;  // ascending action id
            for (int j : g.members) {
                const int a = core::sample_categorical(probs, rngs[static_cast<size_t>(j)]);
                paths[static_cast<size_t>(j)].actions.push_back(a);
                paths[static_cast<size_t>(j)].step_probs.push_back(dv(0, a));
                by_action[a].push_back(j);
            }
            if (k + 1 < t_steps) {
                for (auto& [a, members] : by_action) {
                    next.push_back(Group{dynamics_step(vars, g.ctx, a), std::move(members)});
                }
            }
        }
        groups = std::move(next);
    }
    return paths;
}

Var planner_loss(Tape& tape, const PlannerVars& vars, const actions::LabeledArticle& labeled,
                 const Tensor& embedding_table, int t_steps, int boundary_i) {
    const int n = static_cast<int>(labeled.article.sentences.size());
    if (t_steps < 1) throw std::invalid_argument("planner_loss: T must be at least 1");
    if (boundary_i < 2) throw std::invalid_argument("planner_loss: boundary must leave at least one context sentence");
    if (boundary_i + t_steps - 1 > n) {
        throw std::invalid_argument("planner_loss: window [" + std::to_string(boundary_i) + "," +
                                    std::to_string(boundary_i + t_steps - 1) + "] exceeds article of " +
                                    std::to_string(n) + " sentences");
    }
    LatentContext ctx = represent(
        tape, vars, std::span<const corpus::Sentence>(labeled.article.sentences.data(), static_cast<size_t>(boundary_i - 1)),
        embedding_table);
    Var total;
    for (int k = 0; k < t_steps; ++k) {
        const int gold = labeled.actions[static_cast<size_t>(boundary_i - 1 + k)];
        if (gold < 0 || gold >= vars.cfg.action_count) {
            throw std::out_of_range("planner_loss: action id " + std::to_string(gold) + " out of range");
        }
        Var logits = predict_action_logits(vars, ctx);
        Var nll = cross_entropy(logits, std::span<const int>(&gold, 1));
        total = (k == 0) ? nll : add(total, nll);
        if (k + 1 < t_steps) ctx = dynamics_step(vars, ctx, gold);
    }
    return scale_const(total, 1.0 / static_cast<double>(t_steps));
}

namespace {
struct OwnedRun {
    Tape tape;
    core::Binder binder;
    PlannerVars vars;
    explicit OwnedRun(PlannerModel& m) : binder(tape), vars(bind_planner(binder, "planner.", m)) {}
};
}  // namespace

std::vector<int> rollout_argmax(PlannerModel& m, std::span<const corpus::Sentence> context,
                                const Tensor& embedding_table, int t_steps) {
    OwnedRun run(m);
    LatentContext ctx = represent(run.tape, run.vars, context, embedding_table);
    return rollout_argmax(run.vars, ctx, t_steps);
}

std::vector<PathSample> sample_paths(PlannerModel& m, std::span<const corpus::Sentence> context,
                                     const Tensor& embedding_table, int k_paths, int t_steps, double tau,
                                     uint64_t seed) {
    OwnedRun run(m);
    LatentContext ctx = represent(run.tape, run.vars, context, embedding_table);
    return sample_paths(run.vars, ctx, k_paths, t_steps, tau, seed);
}

}  // namespace lplm::planner
