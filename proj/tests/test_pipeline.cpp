#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

#include "lplm/pipeline.hpp"

using namespace lplm;
using actions::LabeledArticle;
using core::Rng;
using core::Tensor;
using pipeline::RunConfig;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

corpus::SyntheticSpec smoke_spec(uint64_t seed) {
    corpus::SyntheticSpec spec;
    spec.num_states = 2;
    spec.transition = {{0.85, 0.15}, {0.15, 0.85}};
    const int w = 16;
    spec.emission.assign(2, std::vector<double>(w, 0.0));
    for (int st = 0; st < 2; ++st) {
        for (int j = 0; j < w; ++j) {
            spec.emission[static_cast<size_t>(st)][static_cast<size_t>(j)] = (j / 8 == st) ? 0.9 / 8 : 0.1 / 8;
        }
    }
    spec.sentence_length_range = {3, 6};
    spec.sentences_per_article_range = {4, 7};
    spec.seed = seed;
    return spec;
}

RunConfig smoke_config() {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.action_count = 4;
    cfg.t_steps = 2;
    cfg.k_paths = 3;
    cfg.tau = 1.0;
    cfg.d_lm = 16;
    cfg.lm_layers = 1;
    cfg.lm_heads = 2;
    cfg.planner_layers = 1;
    cfg.planner_heads = 2;
    cfg.adapter_layers = 1;
    cfg.adapter_heads = 2;
    cfg.window = 40;
    cfg.m_max = 16;
    cfg.t_max = 4;
    cfg.batch_lm = 8;
    cfg.batch_planner = 8;
    cfg.lr_lm = 3e-3;
    cfg.lr_planner = 3e-3;
    cfg.pretrain_steps = 25;
    cfg.planner_steps = 20;
    cfg.finetune_steps = 12;
    cfg.gen_len = 24;
    return cfg;
}

struct SmokeWorld {
    std::vector<corpus::Article> articles;
    corpus::TokenVocabulary vocab;
    RunConfig cfg;

    SmokeWorld() : cfg(smoke_config()) {
        auto spec = smoke_spec(404);
        articles = corpus::generate_synthetic_corpus(spec, 120);
        vocab = corpus::synthetic_vocab(static_cast<int>(spec.emission[0].size()));
    }
};

}  // namespace

TEST_CASE("levenshtein: identities and brute-force equivalence on 500 random pairs") {
    std::vector<int> s{1, 2, 3, 4};
    std::vector<int> empty;
    CHECK(pipeline::levenshtein(s, s) == 0);
    CHECK(pipeline::levenshtein(empty, s) == 4);
    CHECK(pipeline::levenshtein(s, empty) == 4);
    std::vector<int> a{1, 2, 3}, b{2, 3, 4};
    CHECK(pipeline::levenshtein(a, b) == 2);

    Rng rng(2025);
    for (int rep = 0; rep < 500; ++rep) {
        std::vector<int> x(rng.next_below(9)), y(rng.next_below(9));
        for (auto& v : x) v = static_cast<int>(rng.next_below(4));
        for (auto& v : y) v = static_cast<int>(rng.next_below(4));
        CHECK(pipeline::levenshtein(x, y) == testutil::levenshtein_recursive(x, y));
    }
}

TEST_CASE("run config: parsing, defaults, validation, canonical hash") {
    auto cfg = RunConfig::from_json_text(R"({"seed": 9, "C": 8, "T": 3, "variant": "ProjectAvg"})");
    CHECK(cfg.seed == 9);
    CHECK(cfg.action_count == 8);
    CHECK(cfg.t_steps == 3);
    CHECK(cfg.variant == adapter::Variant::kProjectAvg);
    CHECK(cfg.d_lm == 128);  // default preserved

    CHECK_THROWS_AS(RunConfig::from_json_text("not json"), pipeline::ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"no_such_key": 1})"), pipeline::ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"tau": -1.0})"), pipeline::ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"variant": "Weird"})"), pipeline::ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"K": 0})"), pipeline::ConfigError);

    auto c1 = RunConfig::from_json_text(R"({"seed": 1})");
    auto c2 = RunConfig::from_json_text(R"({"seed": 1})");
    auto c3 = RunConfig::from_json_text(R"({"seed": 2})");
    CHECK(c1.config_hash() == c2.config_hash());
    CHECK(c1.config_hash() != c3.config_hash());
}

TEST_CASE("windows cover whole sentences and restart per article") {
    corpus::Article a;
    a.id = "w";
    a.sentences = {{4, 5, 6}, {7, 8}, {9, 10, 11, 12}, {4}};
    auto ws = pipeline::build_windows({a}, 8);
    REQUIRE(ws.size() == 2);
    CHECK(ws[0].tokens == std::vector<int>{corpus::kBos, 4, 5, 6, 7, 8});
    CHECK(ws[0].sent_slot == std::vector<int>{-1, 0, 0, 0, 1, 1});
    CHECK(ws[0].num_sentences == 2);
    CHECK(ws[1].first_sentence == 2);
    CHECK(ws[1].tokens == std::vector<int>{corpus::kBos, 9, 10, 11, 12, 4});
    CHECK(ws[1].num_sentences == 2);

    // a sentence that can never fit ends its article's coverage
    corpus::Article b;
    b.id = "long";
    b.sentences = {{4, 5}, {6, 7, 8, 9, 10, 11, 12, 4, 5}, {6}};
    auto wb = pipeline::build_windows({b}, 8);
    REQUIRE(wb.size() == 1);
    CHECK(wb[0].num_sentences == 1);
}

TEST_CASE("pipeline smoke: pretraining reduces loss deterministically") {
    SmokeWorld world;
    pipeline::TrainLog log1, log2;
    log1.quiet = log2.quiet = true;
    auto lm1 = pipeline::pretrain_base_lm(world.cfg, world.articles, world.vocab.size(), &log1);
    auto lm2 = pipeline::pretrain_base_lm(world.cfg, world.articles, world.vocab.size(), &log2);

    CHECK(log1.step_loss.front() > log1.step_loss.back());
    CHECK(log1.step_loss == log2.step_loss);

    pipeline::save_lm("smoke_lm_a.ckpt", lm1);
    pipeline::save_lm("smoke_lm_b.ckpt", lm2);
    CHECK(slurp("smoke_lm_a.ckpt") == slurp("smoke_lm_b.ckpt"));
    std::remove("smoke_lm_a.ckpt");
    std::remove("smoke_lm_b.ckpt");
}

TEST_CASE("pipeline smoke: actions, planner, finetune, eval all cohere") {
    SmokeWorld world;
    pipeline::TrainLog quiet;
    quiet.quiet = true;
    auto lm = pipeline::pretrain_base_lm(world.cfg, world.articles, world.vocab.size(), &quiet);

    auto avocab = pipeline::fit_actions(world.cfg, world.articles, lm.token_embedding);
    CHECK(avocab.count() == world.cfg.action_count);
    auto labeled = actions::label_corpus(world.articles, avocab, lm.token_embedding);
    REQUIRE(labeled.size() == world.articles.size());

    pipeline::TrainLog plog;
    plog.quiet = true;
    auto planner_model = pipeline::train_planner(world.cfg, labeled, lm.token_embedding, &plog);
    CHECK(plog.step_loss.front() >= plog.step_loss.back());

    auto acc = pipeline::measure_planner_accuracy(planner_model, labeled, lm.token_embedding, world.cfg.t_steps, 30);
    CHECK(acc.boundaries > 0);
    for (double a : acc.per_step) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }

    planner_model.save("smoke_planner.ckpt");
    const std::string planner_bytes_before = slurp("smoke_planner.ckpt");

    // planner-dependent variant without a planner is a config error
    RunConfig bad = world.cfg;
    bad.variant = adapter::Variant::kArgmax1;
    CHECK_THROWS_AS(pipeline::finetune_conditioned_lm(bad, labeled, nullptr, lm, &quiet), pipeline::ConfigError);

    RunConfig fixed_cfg = world.cfg;
    fixed_cfg.variant = adapter::Variant::kFixed;
    pipeline::TrainLog flog;
    flog.quiet = true;
    auto [lm_fixed, adp_fixed] = pipeline::finetune_conditioned_lm(fixed_cfg, labeled, nullptr, lm, &flog);

    RunConfig full_cfg = world.cfg;
    full_cfg.variant = adapter::Variant::kFull;
    pipeline::TrainLog glog;
    glog.quiet = true;
    auto [lm_full, adp_full] = pipeline::finetune_conditioned_lm(full_cfg, labeled, &planner_model, lm, &glog);

    // the planner is frozen through fine-tuning
    planner_model.save("smoke_planner_after.ckpt");
    CHECK(slurp("smoke_planner_after.ckpt") == planner_bytes_before);
    std::remove("smoke_planner.ckpt");
    std::remove("smoke_planner_after.ckpt");

    auto eval_fixed = pipeline::eval_perplexity(fixed_cfg, lm_fixed, adp_fixed, nullptr, labeled, 1, 1, 1.0, 99);
    auto eval_full = pipeline::eval_perplexity(full_cfg, lm_full, adp_full, &planner_model, labeled,
                                               world.cfg.k_paths, world.cfg.t_steps, 1.0, 99);
    CHECK(eval_fixed.report.perplexity >= 1.0);
    CHECK(eval_full.report.perplexity >= 1.0);
    CHECK(eval_fixed.report.token_count == eval_full.report.token_count);

    // determinism of the sampled-path evaluation
    auto eval_full2 = pipeline::eval_perplexity(full_cfg, lm_full, adp_full, &planner_model, labeled,
                                                world.cfg.k_paths, world.cfg.t_steps, 1.0, 99);
    CHECK(eval_full.report.perplexity == eval_full2.report.perplexity);

    // consistency: exp(mean NLL) equals the PPL recomputed from the window log
    double nll = 0.0;
    int64_t toks = 0;
    for (const auto& w : eval_full.per_window) {
        nll += w.nll_sum;
        toks += w.tokens;
    }
    CHECK(std::abs(std::exp(nll / static_cast<double>(toks)) - eval_full.report.perplexity) < 1e-9);

    // and through the CSV round trip
    pipeline::write_ppl_csv("smoke_eval.csv", eval_full.per_window);
    auto rows = pipeline::read_ppl_csv("smoke_eval.csv");
    REQUIRE(rows.size() == eval_full.per_window.size());
    double nll2 = 0.0;
    int64_t toks2 = 0;
    for (const auto& w : rows) {
        nll2 += w.nll_sum;
        toks2 += w.tokens;
    }
    CHECK(std::abs(std::exp(nll2 / static_cast<double>(toks2)) - eval_full.report.perplexity) < 1e-9);
    std::remove("smoke_eval.csv");

    // edit distance runs end to end and stays within its trivial bounds
    auto edit = pipeline::eval_edit_distance(full_cfg, lm_full, adp_full, &planner_model, avocab, world.vocab,
                                             labeled, world.cfg.gen_len, 5);
    REQUIRE(edit.per_article.size() == labeled.size());
    for (size_t i = 0; i < edit.per_article.size(); ++i) {
        CHECK(edit.per_article[i] >= 0.0);
    }
    CHECK(edit.report.edit_distance_mean.has_value());
}

TEST_CASE("uniform-logit LM yields perplexity exactly V") {
    SmokeWorld world;
    RunConfig cfg = world.cfg;
    cfg.variant = adapter::Variant::kFixed;
    Rng rng(1);
    auto lm = adapter::ConditionedLM::init(cfg.lm_config(world.vocab.size()), rng);
    std::fill(lm.out_w.vec().begin(), lm.out_w.vec().end(), 0.0);
    std::fill(lm.out_b.vec().begin(), lm.out_b.vec().end(), 0.0);
    auto adp = adapter::AdapterModel::init(cfg.adapter_config(), rng);
    auto labeled = [&] {
        std::vector<LabeledArticle> out;
        for (const auto& a : world.articles) {
            LabeledArticle la;
            la.article = a;
            la.actions.assign(a.sentences.size(), 0);
            out.push_back(std::move(la));
        }
        return out;
    }();
    auto res = pipeline::eval_perplexity(cfg, lm, adp, nullptr, labeled, 1, 1, 1.0, 3);
    CHECK(std::abs(res.report.perplexity - world.vocab.size()) < 1e-9);
}

TEST_CASE("planner training skips too-short articles with a warning") {
    SmokeWorld world;
    RunConfig cfg = world.cfg;
    cfg.t_steps = 3;
    cfg.planner_steps = 2;
    std::vector<LabeledArticle> labeled;
    {
        LabeledArticle good;
        good.article.id = "good";
        good.article.sentences = {{4, 5}, {6, 7}, {8, 9}, {10, 4}, {5, 6}};
        good.actions = {0, 1, 2, 3, 0};
        LabeledArticle tiny;
        tiny.article.id = "tiny";
        tiny.article.sentences = {{4}, {5}};
        tiny.actions = {1, 2};
        labeled = {good, tiny};
    }
    Rng rng(6);
    Tensor table = Tensor::gaussian({world.vocab.size(), cfg.d_lm}, 0.4, rng);
    pipeline::TrainLog log;
    log.quiet = true;
    auto model = pipeline::train_planner(cfg, labeled, table, &log);
    REQUIRE(!log.warnings.empty());
    CHECK(log.warnings[0].find("tiny") != std::string::npos);
}

TEST_CASE("baseline reduction: argmax conditioning equals the plain projection on 50 boundaries") {
    SmokeWorld world;
    pipeline::TrainLog quiet;
    quiet.quiet = true;
    RunConfig cfg = world.cfg;
    cfg.pretrain_steps = 5;
    auto lm = pipeline::pretrain_base_lm(cfg, world.articles, world.vocab.size(), &quiet);
    auto avocab = pipeline::fit_actions(cfg, world.articles, lm.token_embedding);
    auto labeled = actions::label_corpus(world.articles, avocab, lm.token_embedding);
    cfg.planner_steps = 5;
    auto planner_model = pipeline::train_planner(cfg, labeled, lm.token_embedding, &quiet);
    Rng arng(17);
    auto adp = adapter::AdapterModel::init(cfg.adapter_config(), arng);

    int checked = 0;
    for (size_t ai = 0; ai < labeled.size() && checked < 50; ++ai) {
        const auto& art = labeled[ai];
        const int n = static_cast<int>(art.article.sentences.size());
        for (int i = 2; i <= n && checked < 50; ++i) {
            auto ctx = std::span<const corpus::Sentence>(art.article.sentences.data(), static_cast<size_t>(i - 1));
            const int a = planner::rollout_argmax(planner_model, ctx, lm.token_embedding, 1)[0];

            core::Tape tape;
            core::Binder bind(tape);
            auto av = adapter::bind_adapter(bind, "adapter.", adp);
            std::vector<std::vector<int>> single{{a}};
            const Tensor& reduced = tape.value(adapter::multi_path_naive(av, single));
            const Tensor& projected = tape.value(adapter::project_action(av, a));
            CHECK(reduced == projected);  // bitwise

            for (int j = 0; j < cfg.d_lm; ++j) {
                double expect = adp.b(j);
                for (int x = 0; x < adp.cfg.d_a; ++x) expect += adp.action_embedding(a, x) * adp.w(x, j);
                CHECK(std::abs(reduced(0, j) - expect) < 1e-12);
            }
            ++checked;
        }
    }
    CHECK(checked == 50);
}

TEST_CASE("csv writers emit fixed headers and six significant digits") {
    CHECK(pipeline::format_sig(3.14159265358979) == "3.14159");
    CHECK(pipeline::format_sig(123456789.0) == "1.23457e+08");
    CHECK(pipeline::format_sig(42.0) == "42");

    pipeline::write_sweep_k_csv("smoke_sweep_k.csv", {{1, 12.345678, 1.0}, {5, 11.111111, 4.2}});
    const std::string sk = slurp("smoke_sweep_k.csv");
    CHECK(sk.find("K,ppl,relative_time\n") == 0);
    CHECK(sk.find("12.3457") != std::string::npos);
    std::remove("smoke_sweep_k.csv");

    pipeline::write_sweep_temp_csv("smoke_sweep_t.csv", {{0.01, 20.0}, {1.0, 15.5}});
    const std::string st = slurp("smoke_sweep_t.csv");
    CHECK(st.find("tau,ppl\n") == 0);
    std::remove("smoke_sweep_t.csv");

    pipeline::EvalReport rep;
    rep.perplexity = 12.5;
    rep.token_count = 1000;
    rep.wall_clock_seconds = 1.25;
    rep.config_hash = "abc";
    rep.save_json("smoke_report.json");
    const std::string rj = slurp("smoke_report.json");
    CHECK(rj.find("\"edit_distance_mean\": null") != std::string::npos);
    CHECK(rj.find("\"perplexity\": 12.5") != std::string::npos);
    std::remove("smoke_report.json");
}

TEST_CASE("conditioned checkpoint round trips both the LM and adapter") {
    SmokeWorld world;
    Rng rng(30);
    auto lm = adapter::ConditionedLM::init(world.cfg.lm_config(world.vocab.size()), rng);
    auto adp = adapter::AdapterModel::init(world.cfg.adapter_config(), rng);
    adp.alpha1(0) = 0.5;
    pipeline::save_conditioned("smoke_cond.ckpt", lm, adp);
    auto [lm2, adp2] = pipeline::load_conditioned("smoke_cond.ckpt", world.cfg.lm_config(world.vocab.size()),
                                                  world.cfg.adapter_config());
    CHECK(lm.token_embedding == lm2.token_embedding);
    CHECK(lm.out_w == lm2.out_w);
    CHECK(adp.alpha1 == adp2.alpha1);
    CHECK(adp.action_embedding == adp2.action_embedding);
    std::remove("smoke_cond.ckpt");
}
