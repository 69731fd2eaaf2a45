#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lplm/tape.hpp"

namespace lplm::core {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

struct EncoderConfig {
    int width = 64;
    int heads = 2;
    int layers = 2;
    int ffn_hidden = 0;  // 0 -> 4 * width
    bool final_norm = false;

    int resolved_ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * width; }
};

// Pre-norm transformer encoder stack. Without final_norm the stack is exactly
// the identity when the attention output and second FFN projections are zero.
struct EncoderParams {
    EncoderConfig cfg;

    struct Block {
        Tensor ln1_gain, ln1_bias;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_gain, ln2_bias;
        Tensor w1, b1, w2, b2;
    };
    std::vector<Block> blocks;
    Tensor lnf_gain, lnf_bias;  // only when cfg.final_norm

    static EncoderParams init(const EncoderConfig& cfg, Rng& rng);
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Registers trainable leaves on a tape, keeping (name, tensor, var) triples
// in registration order for the optimizer and checkpointing.
class Binder {
public:
    explicit Binder(Tape& tape) : tape_(&tape) {}

    Var operator()(const std::string& name, Tensor& t) {
        Var v = tape_->leaf(t);
        entries_.push_back({name, &t, v});
        return v;
    }

    struct Entry {
        std::string name;
        Tensor* param;
        Var var;
    };
    const std::vector<Entry>& entries() const { return entries_; }
    Tape& tape() { return *tape_; }

private:
    Tape* tape_;
    std::vector<Entry> entries_;
};

struct EncoderVars {
    struct Block {
        Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    EncoderConfig cfg;
    std::vector<Block> blocks;
    Var lnf_g, lnf_b;
};

EncoderVars bind_encoder(Binder& bind, const std::string& prefix, EncoderParams& p);

// x: [L, width] -> [L, width]
Var encoder_forward(const EncoderVars& enc, Var x, bool causal);

inline Var linear(Var x, Var w, Var b) { return add_rows(matmul(x, w), b); }

}  // namespace lplm::core
