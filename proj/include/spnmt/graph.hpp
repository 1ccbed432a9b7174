#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "spnmt/common.hpp"
#include "spnmt/instrument.hpp"
#include "spnmt/tensor.hpp"

namespace spnmt {

// ---------------------------------------------------------------------------
// Dropout masks are pure functions of (seed, size, keep_prob): each element's
// coin flip is hashed independently, so masks are reproducible and independent
// across passes without any shared RNG state.
struct DropoutMask {
    Real keep_prob = 1;
    std::uint64_t seed = 0;
    std::vector<std::uint8_t> mask;

    static DropoutMask make(long numel, Real keep_prob, std::uint64_t seed) {
        if (!(keep_prob > Real(0)) || keep_prob > Real(1))
            throw ConfigError("dropout keep_prob must be in (0,1], got " + std::to_string(keep_prob));
        DropoutMask m;
        m.keep_prob = keep_prob;
        m.seed = seed;
        m.mask.resize(static_cast<std::size_t>(numel));
        for (long i = 0; i < numel; ++i)
            m.mask[static_cast<std::size_t>(i)] =
                uniform01(hash_combine(seed, static_cast<std::uint64_t>(i))) < keep_prob ? 1 : 0;
        return m;
    }
};

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_nn(const Real* a, const Real* b, Real* c, long m, long k, long n) {
    for (long i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        Real* ci = c + i * n;
        for (long p = 0; p < k; ++p) {
            const Real av = ai[p];
            const Real* bp = b + p * n;
            for (long j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void mm_nt(const Real* a, const Real* b, Real* c, long m, long k, long n) {
    for (long i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        Real* ci = c + i * n;
        for (long j = 0; j < n; ++j) {
            const Real* bj = b + j * k;
            Real acc = 0;
            for (long p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_tn(const Real* a, const Real* b, Real* c, long m, long k, long n) {
    for (long i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        const Real* bi = b + i * n;
        for (long p = 0; p < k; ++p) {
            const Real av = ai[p];
            Real* cp = c + p * n;
            for (long j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

inline constexpr Real kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
inline constexpr Real kGeluA = 0.044715;

inline Real gelu_fwd(Real x) {
    return Real(0.5) * x * (Real(1) + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline Real gelu_bwd(Real x) {
    const Real t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
    const Real dt = (Real(1) - t * t) * kGeluC * (Real(1) + Real(3) * kGeluA * x * x);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * x * dt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reverse-mode computation record. Nodes are appended in evaluation order, so
// the record is topological by construction; backward() sweeps it once in
// reverse. With recording off, ops run forward-only and keep no closures.
class Graph {
  public:
    using NodeId = int;

    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    const Tensor& value(NodeId id) const { return nodes_[check(id)].val; }
    const Tensor& grad(NodeId id) const { return nodes_[check(id)].grad; }

    // ----- leaves -----

    NodeId constant(Tensor t) { return push(std::move(t), false, {}); }

    NodeId param(Parameter& p) {
        Tensor t = p.value;
        if (!recording_) return push(std::move(t), false, {});
        Parameter* pp = &p;
        NodeId id = push(std::move(t), true, {});
        nodes_[static_cast<std::size_t>(id)].back = [id, pp](Graph& g) {
            const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
            for (std::size_t i = 0; i < d.v.size(); ++i) pp->grad.v[i] += d.v[i];
        };
        return id;
    }

    // ----- elementwise and affine -----

    NodeId add(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (!ta.same_shape(tb))
            throw InputError("add: shape mismatch " + Tensor::shape_str(ta.shape) + " vs " +
                             Tensor::shape_str(tb.shape));
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = ta.v[i] + tb.v[i];
        NodeId id = push(std::move(out), needs(a) || needs(b), {a, b});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a, b](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(a, [&](Tensor& ga) {
                    for (std::size_t i = 0; i < d.v.size(); ++i) ga.v[i] += d.v[i];
                });
                g.accumulate(b, [&](Tensor& gb) {
                    for (std::size_t i = 0; i < d.v.size(); ++i) gb.v[i] += d.v[i];
                });
            };
        }
        return id;
    }

    NodeId mul(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (!ta.same_shape(tb))
            throw InputError("mul: shape mismatch " + Tensor::shape_str(ta.shape) + " vs " +
                             Tensor::shape_str(tb.shape));
        Tensor out(ta.shape);
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = ta.v[i] * tb.v[i];
        NodeId id = push(std::move(out), needs(a) || needs(b), {a, b});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a, b](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const Tensor& va = g.value(a);
                const Tensor& vb = g.value(b);
                g.accumulate(a, [&](Tensor& ga) {
                    for (std::size_t i = 0; i < d.v.size(); ++i) ga.v[i] += d.v[i] * vb.v[i];
                });
                g.accumulate(b, [&](Tensor& gb) {
                    for (std::size_t i = 0; i < d.v.size(); ++i) gb.v[i] += d.v[i] * va.v[i];
                });
            };
        }
        return id;
    }

    NodeId scale(NodeId a, Real c) {
        Tensor out = value(a);
        for (Real& x : out.v) x *= c;
        NodeId id = push(std::move(out), needs(a), {a});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a, c](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(a, [&](Tensor& ga) {
                    for (std::size_t i = 0; i < d.v.size(); ++i) ga.v[i] += c * d.v[i];
                });
            };
        }
        return id;
    }

    // x: [R, C], b: [C], broadcast over rows.
    NodeId add_rowvec(NodeId x, NodeId b) {
        const Tensor& tx = value(x);
        const Tensor& tb = value(b);
        const long C = tx.cols();
        if (tb.numel() != C)
            throw InputError("add_rowvec: bias size " + std::to_string(tb.numel()) +
                             " does not match columns " + std::to_string(C));
        Tensor out = tx;
        const long R = tx.rows();
        for (long r = 0; r < R; ++r)
            for (long c = 0; c < C; ++c) out.v[static_cast<std::size_t>(r * C + c)] += tb.v[static_cast<std::size_t>(c)];
        NodeId id = push(std::move(out), needs(x) || needs(b), {x, b});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, x, b, R, C](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(x, [&](Tensor& gx) {
                    for (std::size_t i = 0; i < d.v.size(); ++i) gx.v[i] += d.v[i];
                });
                g.accumulate(b, [&](Tensor& gb) {
                    for (long r = 0; r < R; ++r)
                        for (long c = 0; c < C; ++c)
                            gb.v[static_cast<std::size_t>(c)] += d.v[static_cast<std::size_t>(r * C + c)];
                });
            };
        }
        return id;
    }

    NodeId gelu(NodeId a) {
        Tensor out = value(a);
        for (Real& x : out.v) x = detail::gelu_fwd(x);
        NodeId id = push(std::move(out), needs(a), {a});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const Tensor& va = g.value(a);
                g.accumulate(a, [&](Tensor& ga) {
                    for (std::size_t i = 0; i < d.v.size(); ++i)
                        ga.v[i] += d.v[i] * detail::gelu_bwd(va.v[i]);
                });
            };
        }
        return id;
    }

    // ----- matrix products -----

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
            throw InputError("matmul: incompatible shapes " + Tensor::shape_str(ta.shape) +
                             " x " + Tensor::shape_str(tb.shape));
        const long m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
        Tensor out({static_cast<int>(m), static_cast<int>(n)});
        detail::mm_nn(ta.v.data(), tb.v.data(), out.v.data(), m, k, n);
        NodeId id = push(std::move(out), needs(a) || needs(b), {a, b});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a, b, m, k, n](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const Tensor& va = g.value(a);
                const Tensor& vb = g.value(b);
                g.accumulate(a, [&](Tensor& ga) {
                    detail::mm_nt(d.v.data(), vb.v.data(), ga.v.data(), m, n, k);
                });
                g.accumulate(b, [&](Tensor& gb) {
                    detail::mm_tn(va.v.data(), d.v.data(), gb.v.data(), m, k, n);
                });
            };
        }
        return id;
    }

    // a: [B, m, k]; b: [B, k, n] (or [B, n, k] with transpose_b). Leading axis
    // is a plain batch loop.
    NodeId bmm(NodeId a, NodeId b, bool transpose_b = false) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(0) != tb.dim(0))
            throw InputError("bmm: incompatible shapes " + Tensor::shape_str(ta.shape) + " x " +
                             Tensor::shape_str(tb.shape));
        const long B = ta.dim(0), m = ta.dim(1), k = ta.dim(2);
        const long n = transpose_b ? tb.dim(1) : tb.dim(2);
        const long bk = transpose_b ? tb.dim(2) : tb.dim(1);
        if (bk != k)
            throw InputError("bmm: inner dimensions disagree " + Tensor::shape_str(ta.shape) +
                             " x " + Tensor::shape_str(tb.shape));
        Tensor out({static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)});
        for (long q = 0; q < B; ++q) {
            const Real* pa = ta.v.data() + q * m * k;
            const Real* pb = tb.v.data() + q * k * n;
            Real* pc = out.v.data() + q * m * n;
            if (transpose_b)
                detail::mm_nt(pa, pb, pc, m, k, n);
            else
                detail::mm_nn(pa, pb, pc, m, k, n);
        }
        NodeId id = push(std::move(out), needs(a) || needs(b), {a, b});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a, b, B, m, k, n, transpose_b](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const Tensor& va = g.value(a);
                const Tensor& vb = g.value(b);
                g.accumulate(a, [&](Tensor& ga) {
                    for (long q = 0; q < B; ++q) {
                        const Real* pd = d.v.data() + q * m * n;
                        const Real* pb = vb.v.data() + q * k * n;
                        Real* pg = ga.v.data() + q * m * k;
                        if (transpose_b)
                            detail::mm_nn(pd, pb, pg, m, n, k);  // d[m,n] * b[n,k]
                        else
                            detail::mm_nt(pd, pb, pg, m, n, k);  // d[m,n] * b[k,n]^T
                    }
                });
                g.accumulate(b, [&](Tensor& gb) {
                    for (long q = 0; q < B; ++q) {
                        const Real* pd = d.v.data() + q * m * n;
                        const Real* pa = va.v.data() + q * m * k;
                        Real* pg = gb.v.data() + q * k * n;
                        if (transpose_b)
                            detail::mm_tn(pd, pa, pg, m, n, k);  // d[m,n]^T * a[m,k]
                        else
                            detail::mm_tn(pa, pd, pg, m, k, n);  // a[m,k]^T * d[m,n]
                    }
                });
            };
        }
        return id;
    }

    // x: [R, in] @ w: [in, out] + b: [out]
    NodeId linear(NodeId x, NodeId w, NodeId b) { return add_rowvec(matmul(x, w), b); }

    // ----- shape -----

    NodeId reshape(NodeId a, std::vector<int> shape) {
        const Tensor& ta = value(a);
        if (Tensor::numel_of(shape) != ta.numel())
            throw InputError("reshape: element count mismatch " + Tensor::shape_str(ta.shape) +
                             " -> " + Tensor::shape_str(shape));
        Tensor out(std::move(shape), ta.v);
        NodeId id = push(std::move(out), needs(a), {a});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(a, [&](Tensor& ga) {
                    for (std::size_t i = 0; i < d.v.size(); ++i) ga.v[i] += d.v[i];
                });
            };
        }
        return id;
    }

    // [a, b, c, d] -> [a, c, b, d]; the head split/merge permutation.
    NodeId transpose_0213(NodeId x) {
        const Tensor& tx = value(x);
        if (tx.rank() != 4)
            throw InputError("transpose_0213 expects rank-4, got " + Tensor::shape_str(tx.shape));
        const long A = tx.dim(0), B = tx.dim(1), C = tx.dim(2), D = tx.dim(3);
        Tensor out({static_cast<int>(A), static_cast<int>(C), static_cast<int>(B), static_cast<int>(D)});
        permute_0213(tx.v.data(), out.v.data(), A, B, C, D);
        NodeId id = push(std::move(out), needs(x), {x});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, x, A, B, C, D](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(x, [&](Tensor& gx) {
                    // inverse permutation is the same swap with B and C exchanged
                    std::vector<Real> tmp(gx.v.size(), Real(0));
                    permute_0213(d.v.data(), tmp.data(), A, C, B, D);
                    for (std::size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += tmp[i];
                });
            };
        }
        return id;
    }

    // ----- normalizations -----

    // Softmax over the last axis, max-stabilized.
    NodeId softmax(NodeId x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape);
        const long R = tx.rows(), C = tx.cols();
        for (long r = 0; r < R; ++r) {
            const Real* in = tx.v.data() + r * C;
            Real* o = out.v.data() + r * C;
            Real mx = in[0];
            for (long c = 1; c < C; ++c) mx = std::max(mx, in[c]);
            Real sum = 0;
            for (long c = 0; c < C; ++c) {
                o[c] = std::exp(in[c] - mx);
                sum += o[c];
            }
            const Real inv = Real(1) / sum;
            for (long c = 0; c < C; ++c) o[c] *= inv;
        }
        NodeId id = push(std::move(out), needs(x), {x});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, x, R, C](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const Tensor& y = g.value(id);
                g.accumulate(x, [&](Tensor& gx) {
                    for (long r = 0; r < R; ++r) {
                        const Real* dy = d.v.data() + r * C;
                        const Real* yy = y.v.data() + r * C;
                        Real dot = 0;
                        for (long c = 0; c < C; ++c) dot += dy[c] * yy[c];
                        Real* gg = gx.v.data() + r * C;
                        for (long c = 0; c < C; ++c) gg[c] += yy[c] * (dy[c] - dot);
                    }
                });
            };
        }
        return id;
    }

    // Softmax over the last axis restricted to positions with mask != 0;
    // masked positions output 0 and receive no gradient. Every row must keep
    // at least one unmasked entry.
    NodeId masked_softmax(NodeId x, const std::vector<std::uint8_t>& mask) {
        const Tensor& tx = value(x);
        if (mask.size() != tx.v.size())
            throw InputError("masked_softmax: mask size " + std::to_string(mask.size()) +
                             " does not match tensor " + Tensor::shape_str(tx.shape));
        Tensor out(tx.shape);
        const long R = tx.rows(), C = tx.cols();
        for (long r = 0; r < R; ++r) {
            const Real* in = tx.v.data() + r * C;
            const std::uint8_t* mk = mask.data() + r * C;
            Real* o = out.v.data() + r * C;
            Real mx = 0;
            bool any = false;
            for (long c = 0; c < C; ++c)
                if (mk[c]) {
                    mx = any ? std::max(mx, in[c]) : in[c];
                    any = true;
                }
            if (!any) throw InputError("masked_softmax: fully masked row " + std::to_string(r));
            Real sum = 0;
            for (long c = 0; c < C; ++c) {
                if (mk[c]) {
                    o[c] = std::exp(in[c] - mx);
                    sum += o[c];
                } else {
                    o[c] = 0;
                }
            }
            const Real inv = Real(1) / sum;
            for (long c = 0; c < C; ++c) o[c] *= inv;
        }
        NodeId id = push(std::move(out), needs(x), {x});
        if (grad_here(id)) {
            // masked outputs are exactly 0, so the plain softmax backward
            // already routes zero gradient to masked inputs
            nodes_[static_cast<std::size_t>(id)].back = [id, x, R, C](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const Tensor& y = g.value(id);
                g.accumulate(x, [&](Tensor& gx) {
                    for (long r = 0; r < R; ++r) {
                        const Real* dy = d.v.data() + r * C;
                        const Real* yy = y.v.data() + r * C;
                        Real dot = 0;
                        for (long c = 0; c < C; ++c) dot += dy[c] * yy[c];
                        Real* gg = gx.v.data() + r * C;
                        for (long c = 0; c < C; ++c) gg[c] += yy[c] * (dy[c] - dot);
                    }
                });
            };
        }
        return id;
    }

    NodeId log_softmax(NodeId x) {
        const Tensor& tx = value(x);
        Tensor out(tx.shape);
        const long R = tx.rows(), C = tx.cols();
        for (long r = 0; r < R; ++r) {
            const Real* in = tx.v.data() + r * C;
            Real* o = out.v.data() + r * C;
            Real mx = in[0];
            for (long c = 1; c < C; ++c) mx = std::max(mx, in[c]);
            Real sum = 0;
            for (long c = 0; c < C; ++c) sum += std::exp(in[c] - mx);
            const Real lse = mx + std::log(sum);
            for (long c = 0; c < C; ++c) o[c] = in[c] - lse;
        }
        NodeId id = push(std::move(out), needs(x), {x});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, x, R, C](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const Tensor& y = g.value(id);
                g.accumulate(x, [&](Tensor& gx) {
                    for (long r = 0; r < R; ++r) {
                        const Real* dy = d.v.data() + r * C;
                        const Real* yy = y.v.data() + r * C;
                        Real tot = 0;
                        for (long c = 0; c < C; ++c) tot += dy[c];
                        Real* gg = gx.v.data() + r * C;
                        for (long c = 0; c < C; ++c) gg[c] += dy[c] - std::exp(yy[c]) * tot;
                    }
                });
            };
        }
        return id;
    }

    // Normalization over the last axis: y = (x - mean) / sqrt(var + eps) * g + b.
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, Real eps = Real(1e-5)) {
        const Tensor& tx = value(x);
        const long R = tx.rows(), C = tx.cols();
        if (value(gain).numel() != C || value(bias).numel() != C)
            throw InputError("layer_norm: gain/bias must have size " + std::to_string(C));
        Tensor out(tx.shape);
        std::vector<Real> rstd(static_cast<std::size_t>(R));
        std::vector<Real> xhat(tx.v.size());
        const Real* g_ = value(gain).v.data();
        const Real* b_ = value(bias).v.data();
        for (long r = 0; r < R; ++r) {
            const Real* in = tx.v.data() + r * C;
            Real mean = 0;
            for (long c = 0; c < C; ++c) mean += in[c];
            mean /= static_cast<Real>(C);
            Real var = 0;
            for (long c = 0; c < C; ++c) {
                const Real dlt = in[c] - mean;
                var += dlt * dlt;
            }
            var /= static_cast<Real>(C);
            const Real rs = Real(1) / std::sqrt(var + eps);
            rstd[static_cast<std::size_t>(r)] = rs;
            Real* o = out.v.data() + r * C;
            Real* xh = xhat.data() + r * C;
            for (long c = 0; c < C; ++c) {
                xh[c] = (in[c] - mean) * rs;
                o[c] = xh[c] * g_[c] + b_[c];
            }
        }
        NodeId id = push(std::move(out), needs(x) || needs(gain) || needs(bias), {x, gain, bias});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back =
                [id, x, gain, bias, R, C, rstd = std::move(rstd), xhat = std::move(xhat)](Graph& g) {
                    const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                    const Real* gv = g.value(gain).v.data();
                    g.accumulate(x, [&](Tensor& gx) {
                        for (long r = 0; r < R; ++r) {
                            const Real* dy = d.v.data() + r * C;
                            const Real* xh = xhat.data() + r * C;
                            Real mean_dyg = 0, mean_dyg_xh = 0;
                            for (long c = 0; c < C; ++c) {
                                const Real t = dy[c] * gv[c];
                                mean_dyg += t;
                                mean_dyg_xh += t * xh[c];
                            }
                            mean_dyg /= static_cast<Real>(C);
                            mean_dyg_xh /= static_cast<Real>(C);
                            const Real rs = rstd[static_cast<std::size_t>(r)];
                            Real* gg = gx.v.data() + r * C;
                            for (long c = 0; c < C; ++c)
                                gg[c] += rs * (dy[c] * gv[c] - mean_dyg - xh[c] * mean_dyg_xh);
                        }
                    });
                    g.accumulate(gain, [&](Tensor& gg) {
                        for (long r = 0; r < R; ++r)
                            for (long c = 0; c < C; ++c)
                                gg.v[static_cast<std::size_t>(c)] +=
                                    d.v[static_cast<std::size_t>(r * C + c)] * xhat[static_cast<std::size_t>(r * C + c)];
                    });
                    g.accumulate(bias, [&](Tensor& gb) {
                        for (long r = 0; r < R; ++r)
                            for (long c = 0; c < C; ++c)
                                gb.v[static_cast<std::size_t>(c)] += d.v[static_cast<std::size_t>(r * C + c)];
                    });
                };
        }
        return id;
    }

    // ----- lookup / gather -----

    // ids index rows of table [V, d]; output [ids.size(), d].
    NodeId embedding(const std::vector<int>& ids, NodeId table) {
        const Tensor& tt = value(table);
        if (tt.rank() != 2)
            throw InputError("embedding: table must be rank-2, got " + Tensor::shape_str(tt.shape));
        const long V = tt.dim(0), D = tt.dim(1);
        for (int t : ids)
            if (t < 0 || t >= V)
                throw InputError("embedding: id " + std::to_string(t) + " outside vocabulary of " +
                                 std::to_string(V));
        Tensor out({static_cast<int>(ids.size()), static_cast<int>(D)});
        for (std::size_t r = 0; r < ids.size(); ++r)
            std::copy_n(tt.v.data() + static_cast<long>(ids[r]) * D, D,
                        out.v.data() + static_cast<long>(r) * D);
        NodeId id = push(std::move(out), needs(table), {table});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, table, ids, D](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(table, [&](Tensor& gt) {
                    for (std::size_t r = 0; r < ids.size(); ++r) {
                        const Real* src = d.v.data() + static_cast<long>(r) * D;
                        Real* dst = gt.v.data() + static_cast<long>(ids[r]) * D;
                        for (long c = 0; c < D; ++c) dst[c] += src[c];
                    }
                });
            };
        }
        return id;
    }

    // logprobs: [R, V]; out[r] = logprobs[r, ids[r]].
    NodeId gather_cols(NodeId logprobs, const std::vector<int>& ids) {
        const Tensor& tl = value(logprobs);
        const long R = tl.rows(), V = tl.cols();
        if (static_cast<long>(ids.size()) != R)
            throw InputError("gather_cols: ids size " + std::to_string(ids.size()) +
                             " does not match rows " + std::to_string(R));
        for (int t : ids)
            if (t < 0 || t >= V)
                throw InputError("gather_cols: id " + std::to_string(t) + " outside vocabulary of " +
                                 std::to_string(V));
        Tensor out({static_cast<int>(R)});
        for (long r = 0; r < R; ++r) out.v[static_cast<std::size_t>(r)] = tl.v[static_cast<std::size_t>(r * V + ids[static_cast<std::size_t>(r)])];
        NodeId id = push(std::move(out), needs(logprobs), {logprobs});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, logprobs, ids, V](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(logprobs, [&](Tensor& gl) {
                    for (std::size_t r = 0; r < ids.size(); ++r)
                        gl.v[static_cast<std::size_t>(static_cast<long>(r) * V + ids[r])] += d.v[r];
                });
            };
        }
        return id;
    }

    // Per-token negative log-likelihood from raw logits [J, V]; padded
    // positions (pad[j] == 0) contribute exactly 0.
    NodeId cross_entropy_per_token(NodeId logits, const std::vector<int>& targets,
                                   const std::vector<std::uint8_t>& pad) {
        const Tensor& tl = value(logits);
        const long J = tl.rows(), V = tl.cols();
        if (static_cast<long>(targets.size()) != J || static_cast<long>(pad.size()) != J)
            throw InputError("cross_entropy_per_token: expected " + std::to_string(J) +
                             " targets and mask entries");
        for (long j = 0; j < J; ++j)
            if (pad[static_cast<std::size_t>(j)] &&
                (targets[static_cast<std::size_t>(j)] < 0 || targets[static_cast<std::size_t>(j)] >= V))
                throw InputError("cross_entropy_per_token: target id " +
                                 std::to_string(targets[static_cast<std::size_t>(j)]) +
                                 " outside vocabulary of " + std::to_string(V));
        Tensor out({static_cast<int>(J)});
        std::vector<Real> lse(static_cast<std::size_t>(J));
        for (long j = 0; j < J; ++j) {
            if (!pad[static_cast<std::size_t>(j)]) {
                out.v[static_cast<std::size_t>(j)] = 0;
                continue;
            }
            const Real* in = tl.v.data() + j * V;
            Real mx = in[0];
            for (long c = 1; c < V; ++c) mx = std::max(mx, in[c]);
            Real sum = 0;
            for (long c = 0; c < V; ++c) sum += std::exp(in[c] - mx);
            lse[static_cast<std::size_t>(j)] = mx + std::log(sum);
            out.v[static_cast<std::size_t>(j)] =
                lse[static_cast<std::size_t>(j)] - in[targets[static_cast<std::size_t>(j)]];
        }
        NodeId id = push(std::move(out), needs(logits), {logits});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back =
                [id, logits, targets, pad, J, V, lse = std::move(lse)](Graph& g) {
                    const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                    const Tensor& tl = g.value(logits);
                    g.accumulate(logits, [&](Tensor& gl) {
                        for (long j = 0; j < J; ++j) {
                            if (!pad[static_cast<std::size_t>(j)]) continue;
                            const Real dy = d.v[static_cast<std::size_t>(j)];
                            const Real* in = tl.v.data() + j * V;
                            Real* gg = gl.v.data() + j * V;
                            const Real l = lse[static_cast<std::size_t>(j)];
                            for (long c = 0; c < V; ++c) gg[c] += dy * std::exp(in[c] - l);
                            gg[targets[static_cast<std::size_t>(j)]] -= dy;
                        }
                    });
                };
        }
        return id;
    }

    // ----- reductions -----

    NodeId sum(NodeId a) {
        const Tensor& ta = value(a);
        Real s = 0;
        for (Real x : ta.v) s += x;
        Tensor out({1});
        out.v[0] = s;
        NodeId id = push(std::move(out), needs(a), {a});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a](Graph& g) {
                const Real dy = g.nodes_[static_cast<std::size_t>(id)].grad.v[0];
                g.accumulate(a, [&](Tensor& ga) {
                    for (Real& x : ga.v) x += dy;
                });
            };
        }
        return id;
    }

    // Scalar = sum_i w[i] * x[i] with constant weights.
    NodeId weighted_sum(NodeId a, std::vector<Real> w) {
        const Tensor& ta = value(a);
        if (static_cast<long>(w.size()) != ta.numel())
            throw InputError("weighted_sum: weight count " + std::to_string(w.size()) +
                             " does not match elements " + std::to_string(ta.numel()));
        Real s = 0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * ta.v[i];
        Tensor out({1});
        out.v[0] = s;
        NodeId id = push(std::move(out), needs(a), {a});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a, w = std::move(w)](Graph& g) {
                const Real dy = g.nodes_[static_cast<std::size_t>(id)].grad.v[0];
                g.accumulate(a, [&](Tensor& ga) {
                    for (std::size_t i = 0; i < w.size(); ++i) ga.v[i] += dy * w[i];
                });
            };
        }
        return id;
    }

    // x viewed as [N, seg]; out[n] = sum_j w[n*seg+j] * x[n*seg+j].
    NodeId weighted_segment_sum(NodeId a, std::vector<Real> w, long seg) {
        const Tensor& ta = value(a);
        if (static_cast<long>(w.size()) != ta.numel() || seg <= 0 || ta.numel() % seg != 0)
            throw InputError("weighted_segment_sum: bad weights or segment length");
        const long N = ta.numel() / seg;
        Tensor out({static_cast<int>(N)});
        for (long n = 0; n < N; ++n) {
            Real s = 0;
            for (long j = 0; j < seg; ++j)
                s += w[static_cast<std::size_t>(n * seg + j)] * ta.v[static_cast<std::size_t>(n * seg + j)];
            out.v[static_cast<std::size_t>(n)] = s;
        }
        NodeId id = push(std::move(out), needs(a), {a});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, a, w = std::move(w)](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                const long seg2 = static_cast<long>(w.size()) / d.numel();
                g.accumulate(a, [&](Tensor& ga) {
                    for (long n = 0; n < d.numel(); ++n) {
                        const Real dy = d.v[static_cast<std::size_t>(n)];
                        for (long j = 0; j < seg2; ++j)
                            ga.v[static_cast<std::size_t>(n * seg2 + j)] += dy * w[static_cast<std::size_t>(n * seg2 + j)];
                    }
                });
            };
        }
        return id;
    }

    // ----- dropout -----

    // Inverted dropout: kept entries are scaled by 1/keep_prob at train time
    // so evaluation applies the identity.
    NodeId dropout(NodeId x, Real keep_prob, std::uint64_t seed, bool training) {
        if (!(keep_prob > Real(0)) || keep_prob > Real(1))
            throw ConfigError("dropout keep_prob must be in (0,1], got " + std::to_string(keep_prob));
        if (!training || keep_prob == Real(1)) {
            // identity pass-through keeps the node count stable between modes
            Tensor out = value(x);
            NodeId id = push(std::move(out), needs(x), {x});
            if (grad_here(id)) {
                nodes_[static_cast<std::size_t>(id)].back = [id, x](Graph& g) {
                    const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                    g.accumulate(x, [&](Tensor& gx) {
                        for (std::size_t i = 0; i < d.v.size(); ++i) gx.v[i] += d.v[i];
                    });
                };
            }
            return id;
        }
        DropoutMask m = DropoutMask::make(value(x).numel(), keep_prob, seed);
        return dropout(x, m);
    }

    NodeId dropout(NodeId x, const DropoutMask& m) {
        const Tensor& tx = value(x);
        if (static_cast<long>(m.mask.size()) != tx.numel())
            throw InputError("dropout: mask size does not match tensor");
        const Real inv = Real(1) / m.keep_prob;
        Tensor out(tx.shape);
        for (std::size_t i = 0; i < out.v.size(); ++i)
            out.v[i] = m.mask[i] ? tx.v[i] * inv : Real(0);
        NodeId id = push(std::move(out), needs(x), {x});
        if (grad_here(id)) {
            nodes_[static_cast<std::size_t>(id)].back = [id, x, mask = m.mask, inv](Graph& g) {
                const Tensor& d = g.nodes_[static_cast<std::size_t>(id)].grad;
                g.accumulate(x, [&](Tensor& gx) {
                    for (std::size_t i = 0; i < d.v.size(); ++i)
                        if (mask[i]) gx.v[i] += d.v[i] * inv;
                });
            };
        }
        return id;
    }

    // ----- backward -----

    void backward(NodeId loss) {
        if (!recording_) throw InputError("backward on a non-recording graph");
        if (value(loss).numel() != 1) throw InputError("backward target must be a scalar node");
        nodes_[static_cast<std::size_t>(loss)].grad.v[0] = 1;
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.needs_grad && n.back) n.back(*this);
        }
        instrument::counters().backwards.fetch_add(1, std::memory_order_relaxed);
    }

  private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Graph&)> back;
        bool needs_grad = false;
    };

    bool recording_;
    std::vector<Node> nodes_;

    NodeId check(NodeId id) const {
        if (id < 0 || id >= size()) throw InputError("invalid node id " + std::to_string(id));
        return id;
    }

    bool needs(NodeId id) const { return nodes_[static_cast<std::size_t>(check(id))].needs_grad; }
    bool grad_here(NodeId id) const { return recording_ && needs(id); }

    NodeId push(Tensor t, bool needs_grad, std::initializer_list<NodeId>) {
        Node n;
        n.val = std::move(t);
        n.needs_grad = recording_ && needs_grad;
        if (n.needs_grad) n.grad = Tensor(n.val.shape);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    template <class F>
    void accumulate(NodeId parent, F&& f) {
        Node& p = nodes_[static_cast<std::size_t>(parent)];
        if (p.needs_grad) f(p.grad);
    }

    static void permute_0213(const Real* in, Real* out, long A, long B, long C, long D) {
        for (long a = 0; a < A; ++a)
            for (long b = 0; b < B; ++b)
                for (long c = 0; c < C; ++c) {
                    const Real* src = in + ((a * B + b) * C + c) * D;
                    Real* dst = out + ((a * C + c) * B + b) * D;
                    std::copy_n(src, D, dst);
                }
    }
};

}  // namespace spnmt
