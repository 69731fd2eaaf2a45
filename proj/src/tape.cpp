#include "lplm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "lplm/thread_pool.hpp"

namespace lplm::core {

namespace {
void require_same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": operands are on different tapes");
}
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}
}  // namespace

size_t Tape::check(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) {
        throw std::logic_error("invalid Var handle");
    }
    return static_cast<size_t>(v.id);
}

Var Tape::leaf(const Tensor& value) { return leaf(Tensor(value)); }

Var Tape::leaf(Tensor&& value) {
    return make(std::move(value), nullptr, "leaf");
}

Var Tape::make(Tensor value, std::function<void(Tape&, int)> bw, const char* op) {
    if (check_finite_ && !value.all_finite()) {
        throw NumericError(std::string("non-finite values produced by op '") + op + "'");
    }
    Node n;
    n.value = std::move(value);
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::grad(Var v) const {
    size_t i = check(v);
    if (!grads_ready_) throw std::logic_error("grad() before backward()");
    return nodes_[i].grad;
}

void Tape::backward(Var root) {
    size_t r = check(root);
    if (nodes_[r].value.size() != 1) {
        throw ShapeError("backward: root must be scalar, got " + shape_str(nodes_[r].value.shape()));
    }
    for (size_t i = 0; i <= r; ++i) {
        Node& n = nodes_[i];
        if (n.grad.size() != n.value.size()) {
            n.grad = Tensor(n.value.shape());
        } else {
            std::fill(n.grad.vec().begin(), n.grad.vec().end(), 0.0);
        }
    }
    nodes_[r].grad(0) = 1.0;
    for (size_t i = r + 1; i-- > 0;) {
        if (nodes_[i].backward) nodes_[i].backward(*this, static_cast<int>(i));
    }
    grads_ready_ = true;
}

void Tape::clear() {
    nodes_.clear();
    grads_ready_ = false;
}

// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
    require_same_tape(a, b, "add");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "add");
    Tensor out = av;
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] += bv.data()[i];
    const int pa = a.id, pb = b.id;
    return t.make(std::move(out), [pa, pb](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& ga = tp.grad_mut(pa);
        Tensor& gb = tp.grad_mut(pb);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga.data()[i] += g.data()[i];
            gb.data()[i] += g.data()[i];
        }
    }, "add");
}

Var sub(Var a, Var b) {
    require_same_tape(a, b, "sub");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "sub");
    Tensor out = av;
    for (int64_t i = 0; i < out.size(); ++i) out.data()[i] -= bv.data()[i];
    const int pa = a.id, pb = b.id;
    return t.make(std::move(out), [pa, pb](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& ga = tp.grad_mut(pa);
        Tensor& gb = tp.grad_mut(pb);
        for (int64_t i = 0; i < g.size(); ++i) {
            ga.data()[i] += g.data()[i];
            gb.data()[i] -= g.data()[i];
        }
    }, "sub");
}

Var add_rows(Var mat, Var row) {
    require_same_tape(mat, row, "add_rows");
    Tape& t = *mat.tape;
    const Tensor& mv = t.value(mat);
    const Tensor& rv = t.value(row);
    if (mv.rank() != 2 || rv.rank() != 1 || mv.dim(1) != rv.dim(0)) {
        throw ShapeError("add_rows: shape mismatch " + shape_str(mv.shape()) + " vs " + shape_str(rv.shape()));
    }
    const int L = mv.dim(0), d = mv.dim(1);
    Tensor out = mv;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < d; ++j) out(i, j) += rv(j);
    const int pm = mat.id, pr = row.id;
    return t.make(std::move(out), [pm, pr, L, d](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& gm = tp.grad_mut(pm);
        Tensor& gr = tp.grad_mut(pr);
        for (int64_t i = 0; i < g.size(); ++i) gm.data()[i] += g.data()[i];
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < d; ++j) gr(j) += g(i, j);
    }, "add_rows");
}

Var scale_const(Var a, double s) {
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (auto& x : out.vec()) x *= s;
    const int pa = a.id;
    return t.make(std::move(out), [pa, s](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& ga = tp.grad_mut(pa);
        for (int64_t i = 0; i < g.size(); ++i) ga.data()[i] += s * g.data()[i];
    }, "scale_const");
}

Var scale_var(Var a, Var alpha) {
    require_same_tape(a, alpha, "scale_var");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& sv = t.value(alpha);
    if (sv.size() != 1) throw ShapeError("scale_var: alpha must be scalar, got " + shape_str(sv.shape()));
    const double s = sv(0);
    Tensor out = av;
    for (auto& x : out.vec()) x *= s;
    const int pa = a.id, ps = alpha.id;
    return t.make(std::move(out), [pa, ps, s](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        const Tensor& av2 = tp.value_at(pa);
        Tensor& ga = tp.grad_mut(pa);
        Tensor& gs = tp.grad_mut(ps);
        double acc = 0.0;
        for (int64_t i = 0; i < g.size(); ++i) {
            ga.data()[i] += s * g.data()[i];
            acc += av2.data()[i] * g.data()[i];
        }
        gs(0) += acc;
    }, "scale_var");
}

Var matmul(Var a, Var b) {
    require_same_tape(a, b, "matmul");
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    Tensor out({av.dim(0), bv.dim(1)});
    matmul_acc(out, av, bv);
    const int pa = a.id, pb = b.id;
    return t.make(std::move(out), [pa, pb](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        matmul_nt_acc(tp.grad_mut(pa), g, tp.value_at(pb));  // dA += dC * B^T
        matmul_tn_acc(tp.grad_mut(pb), tp.value_at(pa), g);  // dB += A^T * dC
    }, "matmul");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    require_same_tape(x, gain, "layer_norm");
    require_same_tape(x, bias, "layer_norm");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    const Tensor& bv = t.value(bias);
    if (xv.rank() != 2 || gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != xv.dim(1) || bv.dim(0) != xv.dim(1)) {
        throw ShapeError("layer_norm: shape mismatch " + shape_str(xv.shape()));
    }
    const int L = xv.dim(0), d = xv.dim(1);
    Tensor out({L, d});
    Tensor xhat({L, d});
    Tensor inv_std({L});
    for (int i = 0; i < L; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xv(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = xv(i, j) - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std(i) = is;
        for (int j = 0; j < d; ++j) {
            double xh = (xv(i, j) - mu) * is;
            xhat(i, j) = xh;
            out(i, j) = gv(j) * xh + bv(j);
        }
    }
    const int px = x.id, pg = gain.id, pb = bias.id;
    return t.make(std::move(out),
                  [px, pg, pb, L, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        const Tensor& gv2 = tp.value_at(pg);
        Tensor& gx = tp.grad_mut(px);
        Tensor& gg = tp.grad_mut(pg);
        Tensor& gb = tp.grad_mut(pb);
        for (int i = 0; i < L; ++i) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int j = 0; j < d; ++j) {
                double dy = g(i, j);
                gg(j) += dy * xhat(i, j);
                gb(j) += dy;
                double dxh = dy * gv2(j);
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xhat(i, j);
            }
            const double is = inv_std(i);
            for (int j = 0; j < d; ++j) {
                double dxh = g(i, j) * gv2(j);
                gx(i, j) += is * (dxh - sum_dxhat / d - xhat(i, j) * sum_dxhat_xhat / d);
            }
        }
    }, "layer_norm");
}

Var gelu(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    Tensor out(xv.shape());
    Tensor deriv(xv.shape());  // cached dy/dx for the backward pass
    const double inv_sqrt2 = 0.7071067811865475244;
    const double inv_sqrt2pi = 0.3989422804014326779;
    const int64_t n = xv.size();
    const double* in = xv.data();
    double* o = out.data();
    double* dd = deriv.data();
    auto body = [&](int b, int e) {
        for (int64_t i = b; i < e; ++i) {
            const double v = in[i];
            const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            o[i] = v * phi;
            dd[i] = phi + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
        }
    };
    if (n >= 16384) {
        parallel_for(static_cast<int>(n), body);
    } else {
        body(0, static_cast<int>(n));
    }
    const int px = x.id;
    return t.make(std::move(out), [px, deriv = std::move(deriv)](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& gx = tp.grad_mut(px);
        for (int64_t i = 0; i < g.size(); ++i) gx.data()[i] += g.data()[i] * deriv.data()[i];
    }, "gelu");
}

Var softmax_rows(Var x, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2) throw ShapeError("softmax_rows: expected rank-2, got " + shape_str(xv.shape()));
    const int L = xv.dim(0), n = xv.dim(1);
    Tensor out({L, n});
    for (int i = 0; i < L; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) m = std::max(m, xv(i, j) / temperature);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            double e = std::exp(xv(i, j) / temperature - m);
            out(i, j) = e;
            z += e;
        }
        for (int j = 0; j < n; ++j) out(i, j) /= z;
    }
    const int px = x.id;
    Tensor probs = out;
    return t.make(std::move(out), [px, L, n, temperature, probs = std::move(probs)](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& gx = tp.grad_mut(px);
        for (int i = 0; i < L; ++i) {
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += g(i, j) * probs(i, j);
            for (int j = 0; j < n; ++j) gx(i, j) += probs(i, j) * (g(i, j) - dot) / temperature;
        }
    }, "softmax_rows");
}

Var attention(Var q, Var k, Var v, int heads, bool causal) {
    require_same_tape(q, k, "attention");
    require_same_tape(q, v, "attention");
    Tape& t = *q.tape;
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    require_same_shape(qv, kv, "attention");
    require_same_shape(qv, vv, "attention");
    if (qv.rank() != 2) throw ShapeError("attention: expected rank-2 inputs");
    const int L = qv.dim(0), d = qv.dim(1);
    if (heads <= 0 || d % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(d) + " not divisible by head count " + std::to_string(heads));
    }
    const int dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // Cached softmax weights, one [L,L] block per head.
    Tensor weights({heads, L * L});
    Tensor out({L, d});
    auto head_fwd = [&](int h0, int h1) {
        std::vector<double> kt(static_cast<size_t>(dh) * L);  // transposed head slice of K
        for (int h = h0; h < h1; ++h) {
            const int off = h * dh;
            double* w = weights.data() + static_cast<size_t>(h) * L * L;
            for (int j = 0; j < L; ++j) {
                for (int c = 0; c < dh; ++c) kt[static_cast<size_t>(c) * L + j] = kv(j, off + c);
            }
            for (int i = 0; i < L; ++i) {
                const int jmax = causal ? i : L - 1;
                double* wr = w + static_cast<size_t>(i) * L;
                for (int j = 0; j <= jmax; ++j) wr[j] = 0.0;
                for (int c = 0; c < dh; ++c) {
                    const double qc = qv(i, off + c);
                    const double* kr = kt.data() + static_cast<size_t>(c) * L;
                    for (int j = 0; j <= jmax; ++j) wr[j] += qc * kr[j];
                }
                double m = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= jmax; ++j) m = std::max(m, wr[j] * scale);
                double z = 0.0;
                for (int j = 0; j <= jmax; ++j) {
                    const double e = std::exp(wr[j] * scale - m);
                    wr[j] = e;
                    z += e;
                }
                const double inv_z = 1.0 / z;
                for (int j = 0; j <= jmax; ++j) wr[j] *= inv_z;
                for (int j = jmax + 1; j < L; ++j) wr[j] = 0.0;
                double* orow = out.data() + static_cast<size_t>(i) * d + off;
                for (int c = 0; c < dh; ++c) orow[c] = 0.0;
                for (int j = 0; j <= jmax; ++j) {
                    const double wij = wr[j];
                    const double* vrow = vv.data() + static_cast<size_t>(j) * d + off;
                    for (int c = 0; c < dh; ++c) orow[c] += wij * vrow[c];
                }
            }
        }
    };
    if (static_cast<int64_t>(L) * L * dh * heads >= (1 << 18) && heads >= 2) {
        parallel_for(heads, head_fwd);
    } else {
        head_fwd(0, heads);
    }

    const int pq = q.id, pk = k.id, pv = v.id;
    return t.make(std::move(out),
                  [pq, pk, pv, heads, dh, L, causal, scale, weights = std::move(weights)](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        const Tensor& qv2 = tp.value_at(pq);
        const Tensor& kv2 = tp.value_at(pk);
        const Tensor& vv2 = tp.value_at(pv);
        Tensor& gq = tp.grad_mut(pq);
        Tensor& gk = tp.grad_mut(pk);
        Tensor& gv = tp.grad_mut(pv);
        const int d = heads * dh;
        auto head_bwd = [&](int h0, int h1) {
            std::vector<double> dw(static_cast<size_t>(L) * L);
            std::vector<double> vt(static_cast<size_t>(dh) * L);  // transposed head slice of V
            for (int h = h0; h < h1; ++h) {
                const int off = h * dh;
                const double* w = weights.data() + static_cast<size_t>(h) * L * L;
                for (int j = 0; j < L; ++j) {
                    for (int c = 0; c < dh; ++c) vt[static_cast<size_t>(c) * L + j] = vv2(j, off + c);
                }
                // dW = dOut * V^T and dV += W^T * dOut
                for (int i = 0; i < L; ++i) {
                    const int jmax = causal ? i : L - 1;
                    double* dwr = dw.data() + static_cast<size_t>(i) * L;
                    for (int j = 0; j <= jmax; ++j) dwr[j] = 0.0;
                    const double* grow = g.data() + static_cast<size_t>(i) * d + off;
                    for (int c = 0; c < dh; ++c) {
                        const double gc = grow[c];
                        const double* vr = vt.data() + static_cast<size_t>(c) * L;
                        for (int j = 0; j <= jmax; ++j) dwr[j] += gc * vr[j];
                    }
                    const double* wr = w + static_cast<size_t>(i) * L;
                    for (int j = 0; j <= jmax; ++j) {
                        const double wij = wr[j];
                        double* gvrow = gv.data() + static_cast<size_t>(j) * d + off;
                        for (int c = 0; c < dh; ++c) gvrow[c] += wij * grow[c];
                    }
                }
                // softmax backward, then into Q and K
                for (int i = 0; i < L; ++i) {
                    const int jmax = causal ? i : L - 1;
                    const double* wr = w + static_cast<size_t>(i) * L;
                    double* dwr = dw.data() + static_cast<size_t>(i) * L;
                    double dot = 0.0;
                    for (int j = 0; j <= jmax; ++j) dot += dwr[j] * wr[j];
                    double* gqrow = gq.data() + static_cast<size_t>(i) * d + off;
                    const double* qrow = qv2.data() + static_cast<size_t>(i) * d + off;
                    for (int j = 0; j <= jmax; ++j) {
                        const double ds = wr[j] * (dwr[j] - dot) * scale;
                        const double* krow = kv2.data() + static_cast<size_t>(j) * d + off;
                        double* gkrow = gk.data() + static_cast<size_t>(j) * d + off;
                        for (int c = 0; c < dh; ++c) {
                            gqrow[c] += ds * krow[c];
                            gkrow[c] += ds * qrow[c];
                        }
                    }
                }
            }
        };
        if (static_cast<int64_t>(L) * L * dh * heads >= (1 << 18) && heads >= 2) {
            parallel_for(heads, head_bwd);
        } else {
            head_bwd(0, heads);
        }
    }, "attention");
}

Var cross_entropy(Var logits, std::span<const int> targets) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.value(logits);
    if (lv.rank() != 2) throw ShapeError("cross_entropy: expected rank-2 logits");
    const int L = lv.dim(0), V = lv.dim(1);
    if (static_cast<int>(targets.size()) != L) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(L) + " rows");
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    for (int i = 0; i < L; ++i) {
        if (tgt[static_cast<size_t>(i)] < 0 || tgt[static_cast<size_t>(i)] >= V) {
            throw std::out_of_range("cross_entropy: target id " + std::to_string(tgt[static_cast<size_t>(i)]) +
                                    " out of range for vocab " + std::to_string(V));
        }
    }
    Tensor probs({L, V});  // cached for the backward pass
    double total = 0.0;
    for (int i = 0; i < L; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < V; ++j) m = std::max(m, lv(i, j));
        double z = 0.0;
        for (int j = 0; j < V; ++j) {
            const double e = std::exp(lv(i, j) - m);
            probs(i, j) = e;
            z += e;
        }
        const double inv_z = 1.0 / z;
        for (int j = 0; j < V; ++j) probs(i, j) *= inv_z;
        total += m + std::log(z) - lv(i, tgt[static_cast<size_t>(i)]);
    }
    Tensor out = Tensor::scalar(total / L);
    const int pl = logits.id;
    return t.make(std::move(out), [pl, L, V, tgt = std::move(tgt), probs = std::move(probs)](Tape& tp, int self) {
        const double gout = tp.grad_mut(self)(0) / L;
        Tensor& gl = tp.grad_mut(pl);
        for (int i = 0; i < L; ++i) {
            for (int j = 0; j < V; ++j) {
                gl(i, j) += gout * (probs(i, j) - (j == tgt[static_cast<size_t>(i)] ? 1.0 : 0.0));
            }
        }
    }, "cross_entropy");
}

Var mean_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2) throw ShapeError("mean_rows: expected rank-2, got " + shape_str(xv.shape()));
    const int L = xv.dim(0), d = xv.dim(1);
    Tensor out({1, d});
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < d; ++j) out(0, j) += xv(i, j);
    for (int j = 0; j < d; ++j) out(0, j) /= L;
    const int px = x.id;
    return t.make(std::move(out), [px, L, d](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& gx = tp.grad_mut(px);
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < d; ++j) gx(i, j) += g(0, j) / L;
    }, "mean_rows");
}

Var embedding(Var table, std::vector<int> ids) {
    Tape& t = *table.tape;
    const Tensor& tv = t.value(table);
    if (tv.rank() != 2) throw ShapeError("embedding: table must be rank-2");
    const int V = tv.dim(0), d = tv.dim(1);
    const int L = static_cast<int>(ids.size());
    if (L == 0) throw ShapeError("embedding: empty id list");
    for (int id : ids) {
        if (id < 0 || id >= V) {
            throw std::out_of_range("embedding: id " + std::to_string(id) + " out of range for table rows " + std::to_string(V));
        }
    }
    Tensor out({L, d});
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < d; ++j) out(i, j) = tv(ids[static_cast<size_t>(i)], j);
    const int pt = table.id;
    return t.make(std::move(out), [pt, d, ids = std::move(ids)](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& gt = tp.grad_mut(pt);
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < d; ++j) gt(ids[i], j) += g(static_cast<int>(i), j);
    }, "embedding");
}

Var append_row(Var mat, Var row) {
    require_same_tape(mat, row, "append_row");
    Tape& t = *mat.tape;
    const Tensor& mv = t.value(mat);
    const Tensor& rv = t.value(row);
    if (mv.rank() != 2 || rv.rank() != 2 || rv.dim(0) != 1 || rv.dim(1) != mv.dim(1)) {
        throw ShapeError("append_row: shape mismatch " + shape_str(mv.shape()) + " vs " + shape_str(rv.shape()));
    }
    const int m = mv.dim(0), d = mv.dim(1);
    Tensor out({m + 1, d});
    std::copy(mv.vec().begin(), mv.vec().end(), out.vec().begin());
    for (int j = 0; j < d; ++j) out(m, j) = rv(0, j);
    const int pm = mat.id, pr = row.id;
    return t.make(std::move(out), [pm, pr, m, d](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& gm = tp.grad_mut(pm);
        Tensor& gr = tp.grad_mut(pr);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j) gm(i, j) += g(i, j);
        for (int j = 0; j < d; ++j) gr(0, j) += g(m, j);
    }, "append_row");
}

Var stack_rows(std::span<const Var> rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty input");
    Tape& t = *rows[0].tape;
    const int d = t.value(rows[0]).dim(1);
    const int k = static_cast<int>(rows.size());
    Tensor out({k, d});
    std::vector<int> parents;
    parents.reserve(rows.size());
    for (int i = 0; i < k; ++i) {
        require_same_tape(rows[0], rows[static_cast<size_t>(i)], "stack_rows");
        const Tensor& rv = t.value(rows[static_cast<size_t>(i)]);
        if (rv.rank() != 2 || rv.dim(0) != 1 || rv.dim(1) != d) {
            throw ShapeError("stack_rows: expected [1," + std::to_string(d) + "], got " + shape_str(rv.shape()));
        }
        for (int j = 0; j < d; ++j) out(i, j) = rv(0, j);
        parents.push_back(rows[static_cast<size_t>(i)].id);
    }
    return t.make(std::move(out), [d, parents = std::move(parents)](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        for (size_t i = 0; i < parents.size(); ++i) {
            Tensor& gr = tp.grad_mut(parents[i]);
            for (int j = 0; j < d; ++j) gr(0, j) += g(static_cast<int>(i), j);
        }
    }, "stack_rows");
}

Var slice_rows(Var mat, int begin, int count) {
    Tape& t = *mat.tape;
    const Tensor& mv = t.value(mat);
    if (mv.rank() != 2) throw ShapeError("slice_rows: expected rank-2");
    if (begin < 0 || count < 1 || begin + count > mv.dim(0)) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") out of bounds for " + shape_str(mv.shape()));
    }
    const int d = mv.dim(1);
    Tensor out({count, d});
    for (int i = 0; i < count; ++i)
        for (int j = 0; j < d; ++j) out(i, j) = mv(begin + i, j);
    const int pm = mat.id;
    return t.make(std::move(out), [pm, begin, count, d](Tape& tp, int self) {
        const Tensor& g = tp.grad_mut(self);
        Tensor& gm = tp.grad_mut(pm);
        for (int i = 0; i < count; ++i)
            for (int j = 0; j < d; ++j) gm(begin + i, j) += g(i, j);
    }, "slice_rows");
}

}  // namespace lplm::core
