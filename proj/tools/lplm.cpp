// Command-line driver for the latent-plan language modeling pipeline.
//
// Stages write their artifacts under --out and are pure functions of
// (config, seed, input files); no environment variables are consulted.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "lplm/checkpoint.hpp"
#include "lplm/pipeline.hpp"
#include "lplm/thread_pool.hpp"

namespace fs = std::filesystem;
using namespace lplm;

namespace {

struct Common {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_dir = ".";
    int threads = 0;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", c.config_path, "JSON run configuration");
    if (needs_config) opt->required();
    cmd->add_option("--seed", c.seed, "overrides the config seed");
    cmd->add_option("--out", c.out_dir, "output directory");
    cmd->add_option("--threads", c.threads, "worker threads for dense math (0 = hardware)");
}

pipeline::RunConfig load_config(const Common& c) {
    pipeline::RunConfig cfg = c.config_path.empty() ? pipeline::RunConfig{} : pipeline::RunConfig::from_json_file(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    if (c.threads > 0) core::ThreadPool::set_num_threads(c.threads);
    fs::create_directories(c.out_dir);
    return cfg;
}

corpus::TokenVocabulary load_vocab_for(const pipeline::RunConfig& cfg, const std::string& override_path) {
    const std::string path = override_path.empty() ? cfg.vocab_path : override_path;
    if (path.empty()) throw pipeline::ConfigError("a vocabulary path is required (config key \"vocab\" or --vocab)");
    return corpus::TokenVocabulary::load(path);
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    if (out.empty()) throw pipeline::ConfigError("empty list: " + s);
    return out;
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    if (out.empty()) throw pipeline::ConfigError("empty list: " + s);
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"latent-plan conditioned language modeling pipeline"};
    app.require_subcommand(1);

    // make-corpus
    auto* mc = app.add_subcommand("make-corpus", "generate a synthetic corpus or ingest a directory of .txt files");
    Common mc_c;
    std::string mc_synthetic, mc_txt_dir, mc_vocab;
    int mc_num_articles = 0;
    add_common(mc, mc_c, /*needs_config=*/false);
    mc->add_option("--synthetic", mc_synthetic, "synthetic generator spec (JSON)");
    mc->add_option("--num-articles", mc_num_articles, "articles to generate");
    mc->add_option("--txt-dir", mc_txt_dir, "directory of .txt articles");
    mc->add_option("--vocab", mc_vocab, "vocabulary for --txt-dir ingestion");
    mc->callback([&] {
        fs::create_directories(mc_c.out_dir);
        if (mc_c.threads > 0) core::ThreadPool::set_num_threads(mc_c.threads);
        if (!mc_synthetic.empty()) {
            if (mc_num_articles <= 0) throw pipeline::ConfigError("--num-articles must be positive");
            corpus::SyntheticSpec spec = corpus::SyntheticSpec::from_json_file(mc_synthetic);
            if (mc_c.seed) spec.seed = *mc_c.seed;
            const auto articles = corpus::generate_synthetic_corpus(spec, mc_num_articles);
            corpus::save_corpus_jsonl(mc_c.out_dir + "/corpus.jsonl", articles);
            corpus::synthetic_vocab(static_cast<int>(spec.emission[0].size())).save(mc_c.out_dir + "/vocab.json");
            std::cout << "wrote " << articles.size() << " articles to " << mc_c.out_dir << "/corpus.jsonl\n";
        } else if (!mc_txt_dir.empty()) {
            if (mc_vocab.empty()) throw pipeline::ConfigError("--txt-dir ingestion needs --vocab");
            const auto vocab = corpus::TokenVocabulary::load(mc_vocab);
            const auto articles = corpus::ingest_text_dir(mc_txt_dir, vocab);
            corpus::save_corpus_jsonl(mc_c.out_dir + "/corpus.jsonl", articles);
            std::cout << "wrote " << articles.size() << " articles to " << mc_c.out_dir << "/corpus.jsonl\n";
        } else {
            throw pipeline::ConfigError("make-corpus needs --synthetic or --txt-dir");
        }
    });

    // build-vocab
    auto* bv = app.add_subcommand("build-vocab", "frequency-ranked vocabulary from raw text");
    Common bv_c;
    std::string bv_txt_dir;
    int bv_max_size = 512;
    add_common(bv, bv_c, /*needs_config=*/false);
    bv->add_option("--txt-dir", bv_txt_dir, "directory of .txt articles")->required();
    bv->add_option("--max-size", bv_max_size, "maximum vocabulary size including reserved ids");
    bv->callback([&] {
        fs::create_directories(bv_c.out_dir);
        const auto texts = corpus::read_text_dir(bv_txt_dir);
        corpus::build_vocab(texts, bv_max_size).save(bv_c.out_dir + "/vocab.json");
        std::cout << "wrote " << bv_c.out_dir << "/vocab.json\n";
    });

    // pretrain-lm
    auto* pt = app.add_subcommand("pretrain-lm", "causal LM pretraining with zero conditioning");
    Common pt_c;
    std::string pt_corpus, pt_vocab;
    add_common(pt, pt_c);
    pt->add_option("--corpus", pt_corpus, "training corpus (JSON-lines)")->required();
    pt->add_option("--vocab", pt_vocab, "vocabulary path (overrides config)");
    pt->callback([&] {
        auto cfg = load_config(pt_c);
        const auto vocab = load_vocab_for(cfg, pt_vocab);
        const auto articles = corpus::load_corpus_jsonl(pt_corpus);
        auto lm = pipeline::pretrain_base_lm(cfg, articles, vocab.size());
        pipeline::save_lm(pt_c.out_dir + "/lm.ckpt", lm);
        std::cout << "wrote " << pt_c.out_dir << "/lm.ckpt\n";
    });

    // fit-actions
    auto* fa = app.add_subcommand("fit-actions", "k-means action vocabulary over sentence embeddings");
    Common fa_c;
    std::string fa_corpus, fa_lm, fa_vocab;
    add_common(fa, fa_c);
    fa->add_option("--corpus", fa_corpus, "corpus (JSON-lines)")->required();
    fa->add_option("--lm", fa_lm, "pretrained LM checkpoint")->required();
    fa->add_option("--vocab", fa_vocab, "vocabulary path (overrides config)");
    fa->callback([&] {
        auto cfg = load_config(fa_c);
        const auto vocab = load_vocab_for(cfg, fa_vocab);
        auto lm = pipeline::load_lm(fa_lm, cfg.lm_config(vocab.size()));
        const auto articles = corpus::load_corpus_jsonl(fa_corpus);
        auto avocab = pipeline::fit_actions(cfg, articles, lm.token_embedding);
        avocab.save(fa_c.out_dir + "/actions.ckpt");
        std::cout << "wrote " << fa_c.out_dir << "/actions.ckpt\n";
    });

    // label
    auto* lb = app.add_subcommand("label", "assign an action id to every sentence");
    Common lb_c;
    std::string lb_corpus, lb_lm, lb_actions, lb_vocab;
    add_common(lb, lb_c);
    lb->add_option("--corpus", lb_corpus, "corpus (JSON-lines)")->required();
    lb->add_option("--lm", lb_lm, "pretrained LM checkpoint")->required();
    lb->add_option("--actions", lb_actions, "action vocabulary checkpoint")->required();
    lb->add_option("--vocab", lb_vocab, "vocabulary path (overrides config)");
    lb->callback([&] {
        auto cfg = load_config(lb_c);
        const auto vocab = load_vocab_for(cfg, lb_vocab);
        auto lm = pipeline::load_lm(lb_lm, cfg.lm_config(vocab.size()));
        auto avocab = actions::ActionVocabulary::load(lb_actions, cfg.action_count, cfg.d_lm);
        const auto articles = corpus::load_corpus_jsonl(lb_corpus);
        const auto labeled = actions::label_corpus(articles, avocab, lm.token_embedding);
        actions::save_labeled_jsonl(lb_c.out_dir + "/labeled.jsonl", labeled);
        std::cout << "wrote " << lb_c.out_dir << "/labeled.jsonl\n";
    });

    // train-planner
    auto* tp = app.add_subcommand("train-planner", "multi-step planner training on labeled articles");
    Common tp_c;
    std::string tp_labeled, tp_val, tp_lm, tp_vocab;
    add_common(tp, tp_c);
    tp->add_option("--labeled", tp_labeled, "labeled training corpus")->required();
    tp->add_option("--val-labeled", tp_val, "labeled corpus for accuracy reporting");
    tp->add_option("--lm", tp_lm, "pretrained LM checkpoint (frozen encoder table)")->required();
    tp->add_option("--vocab", tp_vocab, "vocabulary path (overrides config)");
    tp->callback([&] {
        auto cfg = load_config(tp_c);
        const auto vocab = load_vocab_for(cfg, tp_vocab);
        auto lm = pipeline::load_lm(tp_lm, cfg.lm_config(vocab.size()));
        const auto labeled = actions::load_labeled_jsonl(tp_labeled);
        auto model = pipeline::train_planner(cfg, labeled, lm.token_embedding);
        model.save(tp_c.out_dir + "/planner.ckpt");
        const auto eval_set = tp_val.empty() ? labeled : actions::load_labeled_jsonl(tp_val);
        const auto acc = pipeline::measure_planner_accuracy(model, eval_set, lm.token_embedding, cfg.t_steps,
                                                            tp_val.empty() ? 100 : 0);
        std::ofstream csv(tp_c.out_dir + "/planner_accuracy.csv");
        csv << "step,accuracy\n";
        for (size_t k = 0; k < acc.per_step.size(); ++k) {
            csv << (k + 1) << "," << pipeline::format_sig(acc.per_step[k]) << "\n";
            std::cout << "step " << (k + 1) << " accuracy " << pipeline::format_sig(acc.per_step[k]) << "\n";
        }
        std::cout << "wrote " << tp_c.out_dir << "/planner.ckpt\n";
    });

    // finetune-lm
    auto* ft = app.add_subcommand("finetune-lm", "condition the LM on planner actions and fine-tune");
    Common ft_c;
    std::string ft_labeled, ft_lm, ft_planner, ft_vocab;
    add_common(ft, ft_c);
    ft->add_option("--labeled", ft_labeled, "labeled training corpus")->required();
    ft->add_option("--lm", ft_lm, "pretrained LM checkpoint")->required();
    ft->add_option("--planner", ft_planner, "planner checkpoint (not needed for Fixed)");
    ft->add_option("--vocab", ft_vocab, "vocabulary path (overrides config)");
    ft->callback([&] {
        auto cfg = load_config(ft_c);
        const auto vocab = load_vocab_for(cfg, ft_vocab);
        auto lm = pipeline::load_lm(ft_lm, cfg.lm_config(vocab.size()));
        const auto labeled = actions::load_labeled_jsonl(ft_labeled);
        std::optional<planner::PlannerModel> planner_model;
        if (!ft_planner.empty()) planner_model = planner::PlannerModel::load(ft_planner, cfg.planner_config());
        auto [tuned, adp] = pipeline::finetune_conditioned_lm(cfg, labeled, planner_model ? &*planner_model : nullptr,
                                                              lm);
        pipeline::save_conditioned(ft_c.out_dir + "/conditioned.ckpt", tuned, adp);
        std::cout << "wrote " << ft_c.out_dir << "/conditioned.ckpt\n";
    });

    // eval-ppl
    auto* ep = app.add_subcommand("eval-ppl", "teacher-forced perplexity");
    Common ep_c;
    std::string ep_labeled, ep_model, ep_planner, ep_vocab;
    int ep_k = 0, ep_t = 0;
    double ep_tau = 0.0;
    add_common(ep, ep_c);
    ep->add_option("--labeled", ep_labeled, "labeled evaluation corpus")->required();
    ep->add_option("--model", ep_model, "conditioned LM checkpoint")->required();
    ep->add_option("--planner", ep_planner, "planner checkpoint (not needed for Fixed)");
    ep->add_option("--vocab", ep_vocab, "vocabulary path (overrides config)");
    ep->add_option("--k", ep_k, "paths per boundary (overrides config K)");
    ep->add_option("--t", ep_t, "path length (overrides config T)");
    ep->add_option("--tau", ep_tau, "sampling temperature (overrides config tau)");
    ep->callback([&] {
        auto cfg = load_config(ep_c);
        const auto vocab = load_vocab_for(cfg, ep_vocab);
        auto [lm, adp] = pipeline::load_conditioned(ep_model, cfg.lm_config(vocab.size()), cfg.adapter_config());
        const auto labeled = actions::load_labeled_jsonl(ep_labeled);
        std::optional<planner::PlannerModel> planner_model;
        if (!ep_planner.empty()) planner_model = planner::PlannerModel::load(ep_planner, cfg.planner_config());
        auto res = pipeline::eval_perplexity(cfg, lm, adp, planner_model ? &*planner_model : nullptr, labeled,
                                             ep_k > 0 ? ep_k : cfg.k_paths, ep_t > 0 ? ep_t : cfg.t_steps,
                                             ep_tau > 0.0 ? ep_tau : cfg.tau, cfg.seed);
        pipeline::write_ppl_csv(ep_c.out_dir + "/eval_ppl.csv", res.per_window);
        res.report.save_json(ep_c.out_dir + "/report.json");
        std::cout << "ppl " << pipeline::format_sig(res.report.perplexity) << " over " << res.report.token_count
                  << " tokens\n";
    });

    // eval-edit
    auto* ee = app.add_subcommand("eval-edit", "edit distance of generated action sequences");
    Common ee_c;
    std::string ee_labeled, ee_model, ee_planner, ee_actions, ee_vocab;
    int ee_gen_len = 0;
    add_common(ee, ee_c);
    ee->add_option("--labeled", ee_labeled, "labeled evaluation corpus")->required();
    ee->add_option("--model", ee_model, "conditioned LM checkpoint")->required();
    ee->add_option("--planner", ee_planner, "planner checkpoint (not needed for Fixed)");
    ee->add_option("--actions", ee_actions, "action vocabulary checkpoint")->required();
    ee->add_option("--vocab", ee_vocab, "vocabulary path (overrides config)");
    ee->add_option("--gen-len", ee_gen_len, "generated tokens per article (overrides config)");
    ee->callback([&] {
        auto cfg = load_config(ee_c);
        const auto vocab = load_vocab_for(cfg, ee_vocab);
        auto [lm, adp] = pipeline::load_conditioned(ee_model, cfg.lm_config(vocab.size()), cfg.adapter_config());
        auto avocab = actions::ActionVocabulary::load(ee_actions, cfg.action_count, cfg.d_lm);
        const auto labeled = actions::load_labeled_jsonl(ee_labeled);
        std::optional<planner::PlannerModel> planner_model;
        if (!ee_planner.empty()) planner_model = planner::PlannerModel::load(ee_planner, cfg.planner_config());
        auto res = pipeline::eval_edit_distance(cfg, lm, adp, planner_model ? &*planner_model : nullptr, avocab,
                                                vocab, labeled, ee_gen_len > 0 ? ee_gen_len : cfg.gen_len, cfg.seed);
        std::vector<std::string> ids;
        for (size_t i = 0; i < res.per_article.size(); ++i) ids.push_back(labeled[i].article.id);
        pipeline::write_edit_csv(ee_c.out_dir + "/eval_edit.csv", ids, res.per_article);
        res.report.save_json(ee_c.out_dir + "/report.json");
        std::cout << "edit distance mean " << pipeline::format_sig(*res.report.edit_distance_mean) << "\n";
    });

    // sweep-k
    auto* sk = app.add_subcommand("sweep-k", "perplexity and relative time as K varies at inference");
    Common sk_c;
    std::string sk_labeled, sk_model, sk_planner, sk_vocab, sk_list = "1,2,5,10";
    add_common(sk, sk_c);
    sk->add_option("--labeled", sk_labeled, "labeled evaluation corpus")->required();
    sk->add_option("--model", sk_model, "conditioned LM checkpoint")->required();
    sk->add_option("--planner", sk_planner, "planner checkpoint")->required();
    sk->add_option("--vocab", sk_vocab, "vocabulary path (overrides config)");
    sk->add_option("--k-list", sk_list, "comma-separated K values");
    sk->callback([&] {
        auto cfg = load_config(sk_c);
        const auto vocab = load_vocab_for(cfg, sk_vocab);
        auto [lm, adp] = pipeline::load_conditioned(sk_model, cfg.lm_config(vocab.size()), cfg.adapter_config());
        auto planner_model = planner::PlannerModel::load(sk_planner, cfg.planner_config());
        const auto labeled = actions::load_labeled_jsonl(sk_labeled);
        const auto rows = pipeline::sweep_k(cfg, lm, adp, planner_model, labeled, parse_int_list(sk_list), cfg.tau,
                                            cfg.seed);
        pipeline::write_sweep_k_csv(sk_c.out_dir + "/sweep_k.csv", rows);
        for (const auto& r : rows) {
            std::cout << "K=" << r.k << " ppl " << pipeline::format_sig(r.ppl) << " rel_time "
                      << pipeline::format_sig(r.relative_time) << "\n";
        }
    });

    // sweep-temp
    auto* st = app.add_subcommand("sweep-temp", "perplexity as sampling temperature varies");
    Common st_c;
    std::string st_labeled, st_model, st_planner, st_vocab, st_list = "0.01,0.1,1,10,100";
    add_common(st, st_c);
    st->add_option("--labeled", st_labeled, "labeled evaluation corpus")->required();
    st->add_option("--model", st_model, "conditioned LM checkpoint")->required();
    st->add_option("--planner", st_planner, "planner checkpoint")->required();
    st->add_option("--vocab", st_vocab, "vocabulary path (overrides config)");
    st->add_option("--tau-list", st_list, "comma-separated temperatures");
    st->callback([&] {
        auto cfg = load_config(st_c);
        const auto vocab = load_vocab_for(cfg, st_vocab);
        auto [lm, adp] = pipeline::load_conditioned(st_model, cfg.lm_config(vocab.size()), cfg.adapter_config());
        auto planner_model = planner::PlannerModel::load(st_planner, cfg.planner_config());
        const auto labeled = actions::load_labeled_jsonl(st_labeled);
        const auto rows = pipeline::sweep_temperature(cfg, lm, adp, planner_model, labeled,
                                                      parse_double_list(st_list), cfg.k_paths, cfg.seed);
        pipeline::write_sweep_temp_csv(st_c.out_dir + "/sweep_temp.csv", rows);
        for (const auto& r : rows) {
            std::cout << "tau=" << pipeline::format_sig(r.tau) << " ppl " << pipeline::format_sig(r.ppl) << "\n";
        }
    });

    CLI11_PARSE(app, argc, argv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const pipeline::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const core::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const core::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
