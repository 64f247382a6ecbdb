#include "iip/autograd.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <stdexcept>
#include <string>

namespace iip {

namespace {

thread_local CostCounter* g_counter = nullptr;

void count_madds(std::uint64_t n) {
    if (g_counter) g_counter->madds += n;
}

void count_aux(std::uint64_t elements) {
    if (g_counter) g_counter->aux_flops += kElementwiseFlops * elements;
}

Tape& tape_of(Var a) {
    if (!a.tape) throw std::logic_error("operation on an unbound Var");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw std::logic_error("operands recorded on different tapes");
    return tape_of(a);
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

Tensor finished(Tensor t, const char* op) {
    t.require_finite(op);
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::leaf(Tensor value) {
    value.require_finite("leaf");
    nodes_.push_back(Node{std::move(value), {}, true, {}});
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
    value.require_finite("constant");
    nodes_.push_back(Node{std::move(value), {}, false, {}});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
    const bool needs = std::any_of(parents.begin(), parents.end(), [](Var p) { return p.requires_grad(); });
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(std::size_t id) const {
    return const_cast<Tape*>(this)->grad_buffer(id);
}

Tensor& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Tape::backward(Var root) {
    if (root.value().size() != 1) {
        throw ShapeError("backward() without a seed needs a scalar root, got " + shape_str(root.shape()));
    }
    backward(root, Tensor(root.shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& seed) {
    if (root.tape != this) throw std::logic_error("backward root belongs to another tape");
    if (seed.shape() != root.shape()) {
        throw ShapeError("backward seed " + shape_str(seed.shape()) + " vs root " + shape_str(root.shape()));
    }
    Tensor& g = grad_buffer(root.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t id = root.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || !n.backward || n.grad.size() != n.value.size()) continue;
        n.backward(*this, id);
    }
}

ScopedCostCounter::ScopedCostCounter(CostCounter& counter) : previous_(g_counter) { g_counter = &counter; }
ScopedCostCounter::~ScopedCostCounter() { g_counter = previous_; }

// ---------------------------------------------------------------------------

namespace {

double sorted_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
}

// One head of attention whose key sums do not depend on key order: each
// score is a fixed-order dot product and every sum over keys runs over the
// terms in sorted order.
void sorted_order_head(const RowMatrix& Q, const RowMatrix& K, const RowMatrix& V, double sc, RowMatrix& S,
                       RowMatrix& O) {
    const Eigen::Index kn = K.rows();
    const Eigen::Index dn = K.cols();
    std::vector<double> terms(static_cast<std::size_t>(kn));
    for (Eigen::Index i = 0; i < Q.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < kn; ++j) {
            double dot = 0.0;
            for (Eigen::Index t = 0; t < dn; ++t) dot += Q(i, t) * K(j, t);
            S(i, j) = dot * sc;
            mx = std::max(mx, S(i, j));
        }
        for (Eigen::Index j = 0; j < kn; ++j) terms[static_cast<std::size_t>(j)] = S(i, j) = std::exp(S(i, j) - mx);
        const double sum = sorted_sum(terms);
        for (Eigen::Index j = 0; j < kn; ++j) S(i, j) /= sum;
        for (Eigen::Index t = 0; t < dn; ++t) {
            for (Eigen::Index j = 0; j < kn; ++j) terms[static_cast<std::size_t>(j)] = S(i, j) * V(j, t);
            O(i, t) = sorted_sum(terms);
        }
    }
}

// out = a * b through Eigen's GEMM with the row count padded to a whole
// number of register panels. Every row then takes the same micro-kernel path,
// so a row's result does not depend on which row of `a` it occupies.
void rowwise_product(const Tensor& a, const Tensor& b, Tensor& out) {
    constexpr Eigen::Index panel = 48;
    const auto rows = static_cast<Eigen::Index>(a.size() / a.cols());
    const auto inner = static_cast<Eigen::Index>(b.dim(0));
    const auto n = static_cast<Eigen::Index>(b.dim(1));
    const auto wm = b.matrix();
    MatrixMap dst(out.data(), rows, n);
    const ConstMatrixMap src(a.data(), rows, inner);
    if (rows % panel == 0) {
        dst.noalias() = src * wm;
        return;
    }
    const Eigen::Index padded = (rows / panel + 1) * panel;
    RowMatrix xp = RowMatrix::Zero(padded, inner);
    xp.topRows(rows) = src;
    RowMatrix yp(padded, n);
    yp.noalias() = xp * wm;
    dst = yp.topRows(rows);
}
}  // namespace

Var matmul(Var a, Var b) {
    Tape& tape = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank2(av, "matmul");
    require_rank2(bv, "matmul");
    if (av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul: inner dimensions disagree for " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
    }
    Tensor out({av.dim(0), bv.dim(1)});
    rowwise_product(av, bv, out);
    count_madds(av.dim(0) * av.dim(1) * bv.dim(1));
    const Var parents[] = {a, b};
    return tape.record(finished(std::move(out), "matmul"), parents, [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (a.requires_grad()) t.grad_buffer(a.id).matrix().noalias() += g.matrix() * b.value().matrix().transpose();
        if (b.requires_grad()) t.grad_buffer(b.id).matrix().noalias() += a.value().matrix().transpose() * g.matrix();
    });
}

Var transpose(Var a) {
    Tape& tape = tape_of(a);
    const Tensor& av = a.value();
    require_rank2(av, "transpose");
    Tensor out({av.dim(1), av.dim(0)});
    out.matrix() = av.matrix().transpose();
    const Var parents[] = {a};
    return tape.record(std::move(out), parents, [a](Tape& t, std::size_t self) {
        t.grad_buffer(a.id).matrix() += t.grad(self).matrix().transpose();
    });
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void accumulate(Tape& t, Var target, const Tensor& g, double factor = 1.0) {
    if (!target.requires_grad()) return;
    Tensor& buf = t.grad_buffer(target.id);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += factor * g[i];
}

}  // namespace

Var add(Var a, Var b) {
    Tape& tape = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const Var parents[] = {a, b};
    return tape.record(finished(std::move(out), "add"), parents, [a, b](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self));
        accumulate(t, b, t.grad(self));
    });
}

Var sub(Var a, Var b) {
    Tape& tape = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    const Var parents[] = {a, b};
    return tape.record(finished(std::move(out), "sub"), parents, [a, b](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self));
        accumulate(t, b, t.grad(self), -1.0);
    });
}

Var mul(Var a, Var b) {
    Tape& tape = tape_of(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const Var parents[] = {a, b};
    return tape.record(finished(std::move(out), "mul"), parents, [a, b](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (a.requires_grad()) {
            Tensor& ga = t.grad_buffer(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
        }
        if (b.requires_grad()) {
            Tensor& gb = t.grad_buffer(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
        }
    });
}

Var scale(Var x, double s) {
    Tape& tape = tape_of(x);
    Tensor out = x.value();
    for (double& v : out.values()) v *= s;
    const Var parents[] = {x};
    return tape.record(finished(std::move(out), "scale"), parents,
                       [x, s](Tape& t, std::size_t self) { accumulate(t, x, t.grad(self), s); });
}

Var relu(Var x) {
    Tape& tape = tape_of(x);
    Tensor out = x.value();
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    const Var parents[] = {x};
    return tape.record(std::move(out), parents, [x](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buffer(x.id);
        const Tensor& xv = x.value();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > 0.0) gx[i] += g[i];
        }
    });
}

Var sum(Var x) {
    Tape& tape = tape_of(x);
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    const Var parents[] = {x};
    return tape.record(finished(Tensor({}, std::vector<double>{s}), "sum"), parents,
                       [x](Tape& t, std::size_t self) {
                           const double g = t.grad(self)[0];
                           for (double& v : t.grad_buffer(x.id).values()) v += g;
                       });
}

Var mean(Var x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw ShapeError("mean: zero-length reduction");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var add_rowvec(Var x, Var v) {
    Tape& tape = tape_of(x, v);
    const Tensor& xv = x.value();
    const std::size_t c = xv.cols();
    if (v.value().size() != c) {
        throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) + " vs rows of " + shape_str(xv.shape()));
    }
    Tensor out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) out.at(r, j) += v.value()[j];
    const Var parents[] = {x, v};
    return tape.record(finished(std::move(out), "add_rowvec"), parents, [x, v, c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        accumulate(t, x, g);
        if (v.requires_grad()) {
            Tensor& gv = t.grad_buffer(v.id);
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t j = 0; j < c; ++j) gv[j] += g.at(r, j);
        }
    });
}

Var linear(Var x, Var w) {
    Tape& tape = tape_of(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    require_rank2(wv, "linear");
    if (xv.rank() == 0 || xv.cols() != wv.dim(0)) {
        throw ShapeError("linear: input " + shape_str(xv.shape()) + " does not match weight " + shape_str(wv.shape()));
    }
    Shape out_shape = xv.shape();
    out_shape.back() = wv.dim(1);
    Tensor out(out_shape);
    rowwise_product(xv, wv, out);
    count_madds(xv.rows() * wv.dim(0) * wv.dim(1));
    const Var parents[] = {x, w};
    return tape.record(finished(std::move(out), "linear"), parents, [x, w](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (x.requires_grad()) t.grad_buffer(x.id).matrix().noalias() += g.matrix() * w.value().matrix().transpose();
        if (w.requires_grad()) t.grad_buffer(w.id).matrix().noalias() += x.value().matrix().transpose() * g.matrix();
    });
}

Var linear(Var x, Var w, Var b) {
    if (b.value().size() != w.value().cols()) {
        throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
    }
    return add_rowvec(linear(x, w), b);
}

Var softmax_lastdim(Var x) {
    Tape& tape = tape_of(x);
    const Tensor& xv = x.value();
    if (xv.cols() == 0) throw ShapeError("softmax_lastdim: empty last dimension");
    Tensor out = xv;
    const std::size_t c = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double* row = out.data() + r * c;
        const double m = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += (row[j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < c; ++j) row[j] /= s;
    }
    count_aux(out.size());
    const Var parents[] = {x};
    return tape.record(finished(std::move(out), "softmax_lastdim"), parents, [x, c](Tape& t, std::size_t self) {
        const Tensor& y = t.value(self);
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buffer(x.id);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g.at(r, j) * y.at(r, j);
            for (std::size_t j = 0; j < c; ++j) gx.at(r, j) += y.at(r, j) * (g.at(r, j) - dot);
        }
    });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
    Tape& tape = tape_of(x, gamma);
    const Tensor& xv = x.value();
    const std::size_t c = xv.cols();
    if (c == 0) throw ShapeError("layernorm: zero-length reduction");
    if (gamma.value().size() != c || beta.value().size() != c) {
        throw ShapeError("layernorm: affine parameters do not match " + shape_str(xv.shape()));
    }
    const std::size_t rows = xv.rows();
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv.at(r, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xv.at(r, j) - mu) * (xv.at(r, j) - mu);
        var /= static_cast<double>(c);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) xhat.at(r, j) = (xv.at(r, j) - mu) * inv_std[r];
    }
    Tensor out = xhat;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out.at(r, j) = out.at(r, j) * gamma.value()[j] + beta.value()[j];
    count_aux(xv.size());
    const Var parents[] = {x, gamma, beta};
    return tape.record(finished(std::move(out), "layernorm"), parents,
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), c](Tape& t,
                                                                                                std::size_t self) {
                           const Tensor& g = t.grad(self);
                           const std::size_t rows = g.rows();
                           if (gamma.requires_grad() || beta.requires_grad()) {
                               Tensor& gg = t.grad_buffer(gamma.id);
                               Tensor& gb = t.grad_buffer(beta.id);
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < c; ++j) {
                                       gg[j] += g.at(r, j) * xhat.at(r, j);
                                       gb[j] += g.at(r, j);
                                   }
                           }
                           if (!x.requires_grad()) return;
                           Tensor& gx = t.grad_buffer(x.id);
                           const double n = static_cast<double>(c);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t j = 0; j < c; ++j) {
                                   const double dxh = g.at(r, j) * gamma.value()[j];
                                   s1 += dxh;
                                   s2 += dxh * xhat.at(r, j);
                               }
                               for (std::size_t j = 0; j < c; ++j) {
                                   const double dxh = g.at(r, j) * gamma.value()[j];
                                   gx.at(r, j) += inv_std[r] * (dxh - s1 / n - xhat.at(r, j) * s2 / n);
                               }
                           }
                       });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats stats, bool training) {
    Tape& tape = tape_of(x, gamma);
    const Tensor& xv = x.value();
    const std::size_t c = xv.cols();
    const std::size_t rows = xv.rows();
    if (gamma.value().size() != c || beta.value().size() != c || stats.running_mean.size() != c ||
        stats.running_var.size() != c) {
        throw ShapeError("batchnorm: channel parameters do not match " + shape_str(xv.shape()));
    }
    if (rows == 0) throw ShapeError("batchnorm: zero-length reduction");

    std::vector<double> mu(c, 0.0), inv_std(c);
    if (training) {
        std::vector<double> var(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) mu[j] += xv.at(r, j);
        for (double& m : mu) m /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) var[j] += (xv.at(r, j) - mu[j]) * (xv.at(r, j) - mu[j]);
        for (std::size_t j = 0; j < c; ++j) {
            const double biased = var[j] / static_cast<double>(rows);
            const double unbiased = rows > 1 ? var[j] / static_cast<double>(rows - 1) : biased;
            inv_std[j] = 1.0 / std::sqrt(biased + stats.eps);
            stats.running_mean[j] = (1.0 - stats.momentum) * stats.running_mean[j] + stats.momentum * mu[j];
            stats.running_var[j] = (1.0 - stats.momentum) * stats.running_var[j] + stats.momentum * unbiased;
        }
    } else {
        for (std::size_t j = 0; j < c; ++j) {
            mu[j] = stats.running_mean[j];
            inv_std[j] = 1.0 / std::sqrt(stats.running_var[j] + stats.eps);
        }
    }

    Tensor xhat(xv.shape());
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
            xhat.at(r, j) = (xv.at(r, j) - mu[j]) * inv_std[j];
            out.at(r, j) = xhat.at(r, j) * gamma.value()[j] + beta.value()[j];
        }
    count_aux(xv.size());
    const Var parents[] = {x, gamma, beta};
    return tape.record(
        finished(std::move(out), "batchnorm"), parents,
        [x, gamma, beta, training, xhat = std::move(xhat), inv_std = std::move(inv_std), c](Tape& t,
                                                                                         std::size_t self) {
            const Tensor& g = t.grad(self);
            const std::size_t rows = g.rows();
            std::vector<double> s1(c, 0.0), s2(c, 0.0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) {
                    s1[j] += g.at(r, j);
                    s2[j] += g.at(r, j) * xhat.at(r, j);
                }
            if (gamma.requires_grad()) {
                Tensor& gg = t.grad_buffer(gamma.id);
                for (std::size_t j = 0; j < c; ++j) gg[j] += s2[j];
            }
            if (beta.requires_grad()) {
                Tensor& gb = t.grad_buffer(beta.id);
                for (std::size_t j = 0; j < c; ++j) gb[j] += s1[j];
            }
            if (!x.requires_grad()) return;
            Tensor& gx = t.grad_buffer(x.id);
            const double n = static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) {
                    const double gam = gamma.value()[j];
                    if (training) {
                        gx.at(r, j) += gam * inv_std[j] * (g.at(r, j) - s1[j] / n - xhat.at(r, j) * s2[j] / n);
                    } else {
                        gx.at(r, j) += gam * inv_std[j] * g.at(r, j);
                    }
                }
        });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
    Tape& tape = tape_of(logits);
    const Tensor& z = logits.value();
    const std::size_t k = z.cols();
    const std::size_t rows = z.rows();
    if (k == 0 || rows == 0) throw ShapeError("cross_entropy: zero-length reduction");
    if (labels.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
    }
    Tensor probs = z;
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] >= k) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " +
                                    std::to_string(k) + " classes");
        }
        double* row = probs.data() + r * k;
        const double m = *std::max_element(row, row + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += (row[j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < k; ++j) row[j] /= s;
        loss += -(z.at(r, labels[r]) - m - std::log(s));
    }
    loss /= static_cast<double>(rows);
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    const Var parents[] = {logits};
    return tape.record(finished(Tensor({}, std::vector<double>{loss}), "cross_entropy"), parents,
                       [logits, probs = std::move(probs), lab = std::move(lab), k](Tape& t, std::size_t self) {
                           const double g = t.grad(self)[0] / static_cast<double>(lab.size());
                           Tensor& gz = t.grad_buffer(logits.id);
                           for (std::size_t r = 0; r < lab.size(); ++r)
                               for (std::size_t j = 0; j < k; ++j)
                                   gz.at(r, j) += g * (probs.at(r, j) - (j == lab[r] ? 1.0 : 0.0));
                       });
}

Var cross_entropy(Var logits, std::size_t label) {
    const std::size_t one[] = {label};
    return cross_entropy(logits, one);
}

Var gather_rows(Var x, std::span<const std::ptrdiff_t> index) {
    Tape& tape = tape_of(x);
    const Tensor& xv = x.value();
    const std::size_t c = xv.cols();
    const auto rows = static_cast<std::ptrdiff_t>(xv.rows());
    Tensor out({index.size(), c});
    for (std::size_t r = 0; r < index.size(); ++r) {
        const std::ptrdiff_t src = index[r];
        if (src >= rows) {
            throw std::out_of_range("gather_rows: row " + std::to_string(src) + " out of range for " +
                                    shape_str(xv.shape()));
        }
        if (src < 0) continue;
        std::copy_n(xv.data() + static_cast<std::size_t>(src) * c, c, out.data() + r * c);
    }
    std::vector<std::ptrdiff_t> idx(index.begin(), index.end());
    const Var parents[] = {x};
    return tape.record(std::move(out), parents, [x, idx = std::move(idx), c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_buffer(x.id);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] < 0) continue;
            double* dst = gx.data() + static_cast<std::size_t>(idx[r]) * c;
            const double* src = g.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Tape& tape = tape_of(parts.front());
    const std::size_t c = parts.front().value().cols();
    std::size_t rows = 0;
    for (Var p : parts) {
        tape_of(parts.front(), p);
        if (p.value().cols() != c) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                             shape_str(p.shape()));
        }
        rows += p.value().rows();
    }
    Tensor out({rows, c});
    std::size_t offset = 0;
    for (Var p : parts) {
        std::copy(p.value().values().begin(), p.value().values().end(), out.data() + offset);
        offset += p.value().size();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return tape.record(std::move(out), parts, [ps](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        std::size_t offset = 0;
        for (Var p : ps) {
            const std::size_t n = p.value().size();
            if (p.requires_grad()) {
                Tensor& gp = t.grad_buffer(p.id);
                for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
            }
            offset += n;
        }
    });
}

Var reshape(Var x, Shape shape) {
    Tape& tape = tape_of(x);
    Tensor out = x.value().reshaped(std::move(shape));
    const Var parents[] = {x};
    return tape.record(std::move(out), parents,
                       [x](Tape& t, std::size_t self) { accumulate(t, x, t.grad(self)); });
}

Var group_mean_rows(Var x, std::size_t group) {
    Tape& tape = tape_of(x);
    const Tensor& xv = x.value();
    if (group == 0 || xv.rows() % group != 0) {
        throw ShapeError("group_mean_rows: " + std::to_string(xv.rows()) + " rows not divisible into groups of " +
                         std::to_string(group));
    }
    const std::size_t c = xv.cols();
    const std::size_t groups = xv.rows() / group;
    Tensor out({groups, c});
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t r = 0; r < group; ++r)
            for (std::size_t j = 0; j < c; ++j) out.at(g, j) += xv.at(g * group + r, j) * inv;
    const Var parents[] = {x};
    return tape.record(std::move(out), parents, [x, group, c, inv](Tape& t, std::size_t self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad_buffer(x.id);
        for (std::size_t g = 0; g < gy.rows(); ++g)
            for (std::size_t r = 0; r < group; ++r)
                for (std::size_t j = 0; j < c; ++j) gx.at(g * group + r, j) += gy.at(g, j) * inv;
    });
}

Var grouped_attention(Var q, Var k, Var v, std::size_t q_per_group, std::size_t k_per_group, std::size_t heads,
                      std::vector<Tensor>* maps, bool key_order_invariant) {
    Tape& tape = tape_of(q, k);
    tape_of(q, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_rank2(qv, "attention");
    require_rank2(kv, "attention");
    require_rank2(vv, "attention");
    const std::size_t c = qv.cols();
    if (kv.cols() != c || vv.cols() != c || kv.rows() != vv.rows()) {
        throw ShapeError("attention: shape mismatch q=" + shape_str(qv.shape()) + " k=" + shape_str(kv.shape()) +
                         " v=" + shape_str(vv.shape()));
    }
    if (heads == 0 || c % heads != 0) {
        throw ShapeError("attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(c));
    }
    if (q_per_group == 0 || k_per_group == 0 || qv.rows() % q_per_group != 0 || kv.rows() % k_per_group != 0 ||
        qv.rows() / q_per_group != kv.rows() / k_per_group) {
        throw ShapeError("attention: group sizes " + std::to_string(q_per_group) + "/" + std::to_string(k_per_group) +
                         " inconsistent with q=" + shape_str(qv.shape()) + " k=" + shape_str(kv.shape()));
    }
    const std::size_t groups = qv.rows() / q_per_group;
    const std::size_t d = c / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    const auto qn = static_cast<Eigen::Index>(q_per_group);
    const auto kn = static_cast<Eigen::Index>(k_per_group);
    const auto dn = static_cast<Eigen::Index>(d);

    // probs holds, per (group, head), a q_per_group x k_per_group block.
    Tensor probs({groups * heads * q_per_group, k_per_group});
    Tensor out({qv.rows(), c});
    auto Q = qv.matrix();
    auto K = kv.matrix();
    auto V = vv.matrix();
    auto P = probs.matrix();
    auto O = out.matrix();
    // Head blocks are copied into fresh buffers so results do not depend on where a group sits in memory.
    RowMatrix Qh(qn, dn), Kh(kn, dn), Vh(kn, dn), S(qn, kn), Oh(qn, dn);
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t h = 0; h < heads; ++h) {
            const auto qr = static_cast<Eigen::Index>(g * q_per_group);
            const auto kr = static_cast<Eigen::Index>(g * k_per_group);
            const auto col = static_cast<Eigen::Index>(h * d);
            const auto pr = static_cast<Eigen::Index>((g * heads + h) * q_per_group);
            Qh = Q.block(qr, col, qn, dn);
            Kh = K.block(kr, col, kn, dn);
            Vh = V.block(kr, col, kn, dn);
            if (key_order_invariant) {
                sorted_order_head(Qh, Kh, Vh, sc, S, Oh);
                P.block(pr, 0, qn, kn) = S;
                O.block(qr, col, qn, dn) = Oh;
                continue;
            }
            S.noalias() = Qh * Kh.transpose();
            for (Eigen::Index i = 0; i < qn; ++i) {
                double mx = S(i, 0) * sc;
                for (Eigen::Index j = 1; j < kn; ++j) mx = std::max(mx, S(i, j) * sc);
                double sum = 0.0;
                for (Eigen::Index j = 0; j < kn; ++j) {
                    S(i, j) = std::exp(S(i, j) * sc - mx);
                    sum += S(i, j);
                }
                for (Eigen::Index j = 0; j < kn; ++j) S(i, j) /= sum;
            }
            P.block(pr, 0, qn, kn) = S;
            Oh.noalias() = S * Vh;
            O.block(qr, col, qn, dn) = Oh;
        }
    }
    count_madds(2 * groups * q_per_group * k_per_group * c);
    count_aux(probs.size());
    if (maps) {
        for (std::size_t g = 0; g < groups; ++g) {
            Tensor m({heads * q_per_group, k_per_group});
            const std::size_t n = m.size();
            std::copy_n(probs.data() + g * n, n, m.data());
            maps->push_back(std::move(m));
        }
    }

    const Var parents[] = {q, k, v};
    return tape.record(
        finished(std::move(out), "attention"), parents,
        [q, k, v, probs = std::move(probs), groups, heads, qn, kn, dn, q_per_group, k_per_group, sc](
            Tape& t, std::size_t self) {
            auto G = t.grad(self).matrix();
            auto Q = q.value().matrix();
            auto K = k.value().matrix();
            auto V = v.value().matrix();
            auto P = probs.matrix();
            RowMatrix A(qn, kn), dP(qn, kn), dS(qn, kn), dO(qn, dn), Qh(qn, dn), Kh(kn, dn), Vh(kn, dn);
            Tensor gq_local, gk_local, gv_local;
            Tensor& gq = q.requires_grad() ? t.grad_buffer(q.id) : (gq_local = Tensor(q.shape()));
            Tensor& gk = k.requires_grad() ? t.grad_buffer(k.id) : (gk_local = Tensor(k.shape()));
            Tensor& gv = v.requires_grad() ? t.grad_buffer(v.id) : (gv_local = Tensor(v.shape()));
            auto GQ = gq.matrix();
            auto GK = gk.matrix();
            auto GV = gv.matrix();
            for (std::size_t g = 0; g < groups; ++g) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const auto qr = static_cast<Eigen::Index>(g * q_per_group);
                    const auto kr = static_cast<Eigen::Index>(g * k_per_group);
                    const auto col = static_cast<Eigen::Index>(h * dn);
                    const auto pr = static_cast<Eigen::Index>((g * heads + h) * q_per_group);
                    A = P.block(pr, 0, qn, kn);
                    dO = G.block(qr, col, qn, dn);
                    Qh = Q.block(qr, col, qn, dn);
                    Kh = K.block(kr, col, kn, dn);
                    Vh = V.block(kr, col, kn, dn);
                    GV.block(kr, col, kn, dn) += (A.transpose() * dO).eval();
                    dP.noalias() = dO * Vh.transpose();
                    for (Eigen::Index i = 0; i < qn; ++i) {
                        double dot = 0.0;
                        for (Eigen::Index j = 0; j < kn; ++j) dot += dP(i, j) * A(i, j);
                        for (Eigen::Index j = 0; j < kn; ++j) dS(i, j) = A(i, j) * (dP(i, j) - dot) * sc;
                    }
                    GQ.block(qr, col, qn, dn) += (dS * Kh).eval();
                    GK.block(kr, col, kn, dn) += (dS.transpose() * Qh).eval();
                }
            }
        });
}

}  // namespace iip
