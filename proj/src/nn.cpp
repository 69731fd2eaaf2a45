#include "lplm/nn.hpp"

namespace lplm::core {

EncoderParams EncoderParams::init(const EncoderConfig& cfg, Rng& rng) {
    if (cfg.width <= 0 || cfg.heads <= 0 || cfg.layers <= 0) {
        throw ShapeError("encoder: width, heads and layers must be positive");
    }
    if (cfg.width % cfg.heads != 0) {
        throw ShapeError("encoder: width " + std::to_string(cfg.width) + " not divisible by head count " +
                         std::to_string(cfg.heads));
    }
    EncoderParams p;
    p.cfg = cfg;
    const int d = cfg.width;
    const int f = cfg.resolved_ffn();
    p.blocks.resize(static_cast<size_t>(cfg.layers));
    for (auto& b : p.blocks) {
        b.ln1_gain = Tensor::full({d}, 1.0);
        b.ln1_bias = Tensor::zeros({d});
        b.wq = Tensor::gaussian({d, d}, kInitStd, rng);
        b.bq = Tensor::zeros({d});
        b.wk = Tensor::gaussian({d, d}, kInitStd, rng);
        b.bk = Tensor::zeros({d});
        b.wv = Tensor::gaussian({d, d}, kInitStd, rng);
        b.bv = Tensor::zeros({d});
        b.wo = Tensor::gaussian({d, d}, kInitStd, rng);
        b.bo = Tensor::zeros({d});
        b.ln2_gain = Tensor::full({d}, 1.0);
        b.ln2_bias = Tensor::zeros({d});
        b.w1 = Tensor::gaussian({d, f}, kInitStd, rng);
        b.b1 = Tensor::zeros({f});
        b.w2 = Tensor::gaussian({f, d}, kInitStd, rng);
        b.b2 = Tensor::zeros({d});
    }
    if (cfg.final_norm) {
        p.lnf_gain = Tensor::full({d}, 1.0);
        p.lnf_bias = Tensor::zeros({d});
    }
    return p;
}

void EncoderParams::visit(const std::string& prefix, const ParamVisitor& fn) {
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        const std::string bp = prefix + "block" + std::to_string(i) + ".";
        fn(bp + "ln1_gain", b.ln1_gain);
        fn(bp + "ln1_bias", b.ln1_bias);
        fn(bp + "wq", b.wq);
        fn(bp + "bq", b.bq);
        fn(bp + "wk", b.wk);
        fn(bp + "bk", b.bk);
        fn(bp + "wv", b.wv);
        fn(bp + "bv", b.bv);
        fn(bp + "wo", b.wo);
        fn(bp + "bo", b.bo);
        fn(bp + "ln2_gain", b.ln2_gain);
        fn(bp + "ln2_bias", b.ln2_bias);
        fn(bp + "w1", b.w1);
        fn(bp + "b1", b.b1);
        fn(bp + "w2", b.w2);
        fn(bp + "b2", b.b2);
    }
    if (cfg.final_norm) {
        fn(prefix + "lnf_gain", lnf_gain);
        fn(prefix + "lnf_bias", lnf_bias);
    }
}

EncoderVars bind_encoder(Binder& bind, const std::string& prefix, EncoderParams& p) {
    EncoderVars v;
    v.cfg = p.cfg;
    v.blocks.reserve(p.blocks.size());
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        const std::string bp = prefix + "block" + std::to_string(i) + ".";
        EncoderVars::Block bv;
        bv.ln1_g = bind(bp + "ln1_gain", b.ln1_gain);
        bv.ln1_b = bind(bp + "ln1_bias", b.ln1_bias);
        bv.wq = bind(bp + "wq", b.wq);
        bv.bq = bind(bp + "bq", b.bq);
        bv.wk = bind(bp + "wk", b.wk);
        bv.bk = bind(bp + "bk", b.bk);
        bv.wv = bind(bp + "wv", b.wv);
        bv.bv = bind(bp + "bv", b.bv);
        bv.wo = bind(bp + "wo", b.wo);
        bv.bo = bind(bp + "bo", b.bo);
        bv.ln2_g = bind(bp + "ln2_gain", b.ln2_gain);
        bv.ln2_b = bind(bp + "ln2_bias", b.ln2_bias);
        bv.w1 = bind(bp + "w1", b.w1);
        bv.b1 = bind(bp + "b1", b.b1);
        bv.w2 = bind(bp + "w2", b.w2);
        bv.b2 = bind(bp + "b2", b.b2);
        v.blocks.push_back(bv);
    }
    if (p.cfg.final_norm) {
        v.lnf_g = bind(prefix + "lnf_gain", p.lnf_gain);
        v.lnf_b = bind(prefix + "lnf_bias", p.lnf_bias);
    }
    return v;
}

Var encoder_forward(const EncoderVars& enc, Var x, bool causal) {
    for (const auto& b : enc.blocks) {
        Var h = layer_norm(x, b.ln1_g, b.ln1_b, kLayerNormEps);
        Var q = linear(h, b.wq, b.bq);
        Var k = linear(h, b.wk, b.bk);
        Var v = linear(h, b.wv, b.bv);
        Var a = attention(q, k, v, enc.cfg.heads, causal);
        x = add(x, linear(a, b.wo, b.bo));
        Var h2 = layer_norm(x, b.ln2_g, b.ln2_b, kLayerNormEps);
        x = add(x, linear(gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
    }
    if (enc.cfg.final_norm) {
        x = layer_norm(x, enc.lnf_g, enc.lnf_b, kLayerNormEps);
    }
    return x;
}

}  // namespace lplm::core
