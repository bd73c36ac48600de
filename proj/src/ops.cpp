#include "vitkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace vitkd {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

Tensor make_op(Shape shape, std::vector<float> value, std::initializer_list<Tensor> inputs,
               std::function<void(Node&)> bw) {
    bool req = grad_enabled();
    if (req) {
        bool any = false;
        for (const auto& t : inputs) any = any || t.requires_grad();
        req = any;
    }
    Tensor out = make_node(std::move(shape), std::move(value), req);
    if (req) {
        for (const auto& t : inputs)
            if (t.requires_grad()) out.node_->parents.push_back(t.node_);
        out.node_->backward_fn = std::move(bw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` right-aligned to `out`, zero on broadcast dims.
std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    for (size_t i = 0; i < in.size(); ++i) {
        const size_t ii = in.size() - 1 - i;
        const size_t oi = out.size() - 1 - i;
        strides[oi] = (in[ii] == 1 && out[oi] != 1) ? 0 : s;
        s *= in[ii];
    }
    return strides;
}

// Walks every position of `out`, handing the body linear offsets into out and
// into two strided inputs. Inner loop is over the last axis.
template <class F>
void for_each_bcast2(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb,
                     F&& body) {
    const int64_t rank = static_cast<int64_t>(out.size());
    const int64_t last = out[static_cast<size_t>(rank - 1)];
    const int64_t la = sa[static_cast<size_t>(rank - 1)];
    const int64_t lb = sb[static_cast<size_t>(rank - 1)];
    const int64_t total = shape_numel(out);
    const int64_t outer = total / last;
    std::vector<int64_t> idx(static_cast<size_t>(rank > 1 ? rank - 1 : 0), 0);
    int64_t offa = 0, offb = 0, offo = 0;
    for (int64_t o = 0; o < outer; ++o) {
        int64_t ia = offa, ib = offb;
        for (int64_t j = 0; j < last; ++j) {
            body(offo + j, ia, ib);
            ia += la;
            ib += lb;
        }
        offo += last;
        for (int64_t d = rank - 2; d >= 0; --d) {
            offa += sa[static_cast<size_t>(d)];
            offb += sb[static_cast<size_t>(d)];
            if (++idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            offa -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            offb -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

enum class BinKind { add, sub, mul };

Tensor binary_bcast(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    const int64_t n = shape_numel(out_shape);
    std::vector<float> value(static_cast<size_t>(n));
    const float* pa = a.data().data();
    const float* pb = b.data().data();

    const bool same = a.shape() == b.shape() && b.shape() == out_shape;
    if (same) {
        switch (kind) {
            case BinKind::add:
                for (int64_t i = 0; i < n; ++i) value[i] = pa[i] + pb[i];
                break;
            case BinKind::sub:
                for (int64_t i = 0; i < n; ++i) value[i] = pa[i] - pb[i];
                break;
            case BinKind::mul:
                for (int64_t i = 0; i < n; ++i) value[i] = pa[i] * pb[i];
                break;
        }
    } else {
        const auto sa = bcast_strides(a.shape(), out_shape);
        const auto sb = bcast_strides(b.shape(), out_shape);
        switch (kind) {
            case BinKind::add:
                for_each_bcast2(out_shape, sa, sb,
                                [&](int64_t o, int64_t ia, int64_t ib) { value[o] = pa[ia] + pb[ib]; });
                break;
            case BinKind::sub:
                for_each_bcast2(out_shape, sa, sb,
                                [&](int64_t o, int64_t ia, int64_t ib) { value[o] = pa[ia] - pb[ib]; });
                break;
            case BinKind::mul:
                for_each_bcast2(out_shape, sa, sb,
                                [&](int64_t o, int64_t ia, int64_t ib) { value[o] = pa[ia] * pb[ib]; });
                break;
        }
    }

    NodePtr na = a.node_, nb = b.node_;
    Shape ash = a.shape(), bsh = b.shape(), osh = out_shape;
    return make_op(out_shape, std::move(value), {a, b}, [na, nb, ash, bsh, osh, kind](Node& out) {
        const float* g = out.grad.data();
        const auto sa = bcast_strides(ash, osh);
        const auto sb = bcast_strides(bsh, osh);
        if (na->requires_grad) {
            auto& ga = na->ensure_grad();
            float* pg = ga.data();
            switch (kind) {
                case BinKind::add:
                case BinKind::sub:
                    for_each_bcast2(osh, sa, sb, [&](int64_t o, int64_t ia, int64_t) { pg[ia] += g[o]; });
                    break;
                case BinKind::mul: {
                    const float* pb = nb->value.data();
                    for_each_bcast2(osh, sa, sb,
                                    [&](int64_t o, int64_t ia, int64_t ib) { pg[ia] += g[o] * pb[ib]; });
                    break;
                }
            }
        }
        if (nb->requires_grad) {
            auto& gb = nb->ensure_grad();
            float* pg = gb.data();
            switch (kind) {
                case BinKind::add:
                    for_each_bcast2(osh, sa, sb, [&](int64_t o, int64_t, int64_t ib) { pg[ib] += g[o]; });
                    break;
                case BinKind::sub:
                    for_each_bcast2(osh, sa, sb, [&](int64_t o, int64_t, int64_t ib) { pg[ib] -= g[o]; });
                    break;
                case BinKind::mul: {
                    const float* pa = na->value.data();
                    for_each_bcast2(osh, sa, sb,
                                    [&](int64_t o, int64_t ia, int64_t ib) { pg[ib] += g[o] * pa[ia]; });
                    break;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// gemm kernels (accumulating, row-major)
// ---------------------------------------------------------------------------

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const float* A, const float* B, float* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        float* crow = C + i * n;
        const float* arow = A + i * k;
        for (int64_t t = 0; t < k; ++t) {
            const float av = arow[t];
            const float* brow = B + t * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const float* A, const float* B, float* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = A + i * k;
        float* crow = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const float* brow = B + j * k;
            float s = 0.0f;
            for (int64_t t = 0; t < k; ++t) s += arow[t] * brow[t];
            crow[j] += s;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const float* A, const float* B, float* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t t = 0; t < k; ++t) {
        const float* arow = A + t * m;
        const float* brow = B + t * n;
        for (int64_t i = 0; i < m; ++i) {
            const float av = arow[i];
            float* crow = C + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

Shape lead_dims(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() < 2 || b.dim() < 2)
        throw ShapeError("matmul: both inputs need rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = a.size(-2), ka = a.size(-1);
    const int64_t kb = b.size(-2), n = b.size(-1);
    if (ka != kb)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int64_t k = ka;

    // Weight application [lead.., m, k] x [k, n] collapses to one gemm.
    if (b.dim() == 2) {
        Shape out_shape = a.shape();
        out_shape.back() = n;
        const int64_t rows = a.numel() / k;
        std::vector<float> value(static_cast<size_t>(rows * n), 0.0f);
        gemm_nn(a.data().data(), b.data().data(), value.data(), rows, k, n);
        NodePtr na = a.node_, nb = b.node_;
        return make_op(std::move(out_shape), std::move(value), {a, b}, [na, nb, rows, k, n](Node& out) {
            const float* g = out.grad.data();
            if (na->requires_grad)
                gemm_nt(g, nb->value.data(), na->ensure_grad().data(), rows, n, k);
            if (nb->requires_grad)
                gemm_tn(na->value.data(), g, nb->ensure_grad().data(), k, rows, n);
        });
    }

    const Shape la = lead_dims(a.shape());
    const Shape lb = lead_dims(b.shape());
    const Shape lo = broadcast_shape(la, lb, "matmul");
    Shape out_shape = lo;
    out_shape.push_back(m);
    out_shape.push_back(n);

    const int64_t batches = shape_numel(lo);
    std::vector<float> value(static_cast<size_t>(batches * m * n), 0.0f);

    // Batch strides in matrix units (zero where broadcast).
    auto batch_strides = [](const Shape& lead, const Shape& out_lead) {
        if (lead.empty()) return std::vector<int64_t>(std::max<size_t>(out_lead.size(), 1), 0);
        auto st = bcast_strides(lead, out_lead);
        return st;
    };
    const Shape lo_or1 = lo.empty() ? Shape{1} : lo;
    const auto sa = batch_strides(la, lo_or1);
    const auto sb = batch_strides(lb, lo_or1);

    // Enumerate batch offsets once; reused by forward and backward.
    std::vector<int64_t> offs_a(static_cast<size_t>(batches)), offs_b(static_cast<size_t>(batches));
    {
        std::vector<int64_t> idx(lo_or1.size(), 0);
        int64_t oa = 0, ob = 0;
        for (int64_t bi = 0; bi < batches; ++bi) {
            offs_a[static_cast<size_t>(bi)] = oa;
            offs_b[static_cast<size_t>(bi)] = ob;
            for (int64_t d = static_cast<int64_t>(lo_or1.size()) - 1; d >= 0; --d) {
                oa += sa[static_cast<size_t>(d)];
                ob += sb[static_cast<size_t>(d)];
                if (++idx[static_cast<size_t>(d)] < lo_or1[static_cast<size_t>(d)]) break;
                oa -= sa[static_cast<size_t>(d)] * lo_or1[static_cast<size_t>(d)];
                ob -= sb[static_cast<size_t>(d)] * lo_or1[static_cast<size_t>(d)];
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }

    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (int64_t bi = 0; bi < batches; ++bi)
        gemm_nn(pa + offs_a[static_cast<size_t>(bi)] * m * k, pb + offs_b[static_cast<size_t>(bi)] * k * n,
                value.data() + bi * m * n, m, k, n);

    NodePtr na = a.node_, nb = b.node_;
    return make_op(std::move(out_shape), std::move(value), {a, b},
                   [na, nb, offs_a, offs_b, batches, m, k, n](Node& out) {
                       const float* g = out.grad.data();
                       if (na->requires_grad) {
                           float* ga = na->ensure_grad().data();
                           const float* pb = nb->value.data();
                           for (int64_t bi = 0; bi < batches; ++bi)
                               gemm_nt(g + bi * m * n, pb + offs_b[static_cast<size_t>(bi)] * k * n,
                                       ga + offs_a[static_cast<size_t>(bi)] * m * k, m, n, k);
                       }
                       if (nb->requires_grad) {
                           float* gb = nb->ensure_grad().data();
                           const float* pa = na->value.data();
                           for (int64_t bi = 0; bi < batches; ++bi)
                               gemm_tn(pa + offs_a[static_cast<size_t>(bi)] * m * k, g + bi * m * n,
                                       gb + offs_b[static_cast<size_t>(bi)] * k * n, k, m, n);
                       }
                   });
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_bcast(a, b, BinKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_bcast(a, b, BinKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_bcast(a, b, BinKind::mul, "mul"); }

Tensor scale(const Tensor& a, float s) {
    std::vector<float> value(a.data().size());
    const float* pa = a.data().data();
    for (size_t i = 0; i < value.size(); ++i) value[i] = pa[i] * s;
    NodePtr na = a.node_;
    return make_op(a.shape(), std::move(value), {a}, [na, s](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float* g = out.grad.data();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
    });
}

Tensor gelu(const Tensor& a) {
    constexpr float kInvSqrt2 = 0.70710678118654752440f;
    constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
    std::vector<float> value(a.data().size());
    const float* pa = a.data().data();
    for (size_t i = 0; i < value.size(); ++i)
        value[i] = 0.5f * pa[i] * (1.0f + std::erf(pa[i] * kInvSqrt2));
    NodePtr na = a.node_;
    return make_op(a.shape(), std::move(value), {a}, [na](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float* g = out.grad.data();
        const float* x = na->value.data();
        for (size_t i = 0; i < ga.size(); ++i) {
            const float cdf = 0.5f * (1.0f + std::erf(x[i] * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x[i] * x[i]);
            ga[i] += g[i] * (cdf + x[i] * pdf);
        }
    });
}

Tensor log_op(const Tensor& a) {
    std::vector<float> value(a.data().size());
    const float* pa = a.data().data();
    for (size_t i = 0; i < value.size(); ++i) value[i] = std::log(pa[i]);
    NodePtr na = a.node_;
    return make_op(a.shape(), std::move(value), {a}, [na](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float* g = out.grad.data();
        const float* x = na->value.data();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / x[i];
    });
}

Tensor clamp_min(const Tensor& a, float lo) {
    std::vector<float> value(a.data().size());
    const float* pa = a.data().data();
    for (size_t i = 0; i < value.size(); ++i) value[i] = pa[i] < lo ? lo : pa[i];
    NodePtr na = a.node_;
    return make_op(a.shape(), std::move(value), {a}, [na, lo](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float* g = out.grad.data();
        const float* x = na->value.data();
        for (size_t i = 0; i < ga.size(); ++i)
            if (x[i] > lo) ga[i] += g[i];
    });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor transpose(const Tensor& a, int64_t d0, int64_t d1) {
    const int64_t rank = a.dim();
    if (d0 < 0) d0 += rank;
    if (d1 < 0) d1 += rank;
    if (d0 < 0 || d0 >= rank || d1 < 0 || d1 >= rank)
        throw ShapeError("transpose: axes out of range for shape " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    std::swap(out_shape[static_cast<size_t>(d0)], out_shape[static_cast<size_t>(d1)]);

    // Strides of `a` seen through the swapped axes.
    std::vector<int64_t> in_strides(static_cast<size_t>(rank));
    int64_t s = 1;
    for (int64_t i = rank - 1; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = s;
        s *= a.shape()[static_cast<size_t>(i)];
    }
    std::vector<int64_t> view(in_strides);
    std::swap(view[static_cast<size_t>(d0)], view[static_cast<size_t>(d1)]);

    std::vector<float> value(a.data().size());
    const float* pa = a.data().data();
    const std::vector<int64_t> zero(view.size(), 0);
    for_each_bcast2(out_shape, view, zero, [&](int64_t o, int64_t ia, int64_t) { value[o] = pa[ia]; });

    NodePtr na = a.node_;
    return make_op(out_shape, std::move(value), {a}, [na, out_shape, view, zero](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float* g = out.grad.data();
        for_each_bcast2(out_shape, view, zero, [&](int64_t o, int64_t ia, int64_t) { ga[ia] += g[o]; });
    });
}

Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    NodePtr na = a.node_;
    return make_op(std::move(new_shape), a.data(), {a}, [na](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float* g = out.grad.data();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
}

Tensor concat(const std::vector<Tensor>& parts, int64_t dim) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int64_t rank = parts[0].dim();
    if (dim < 0) dim += rank;
    Shape out_shape = parts[0].shape();
    int64_t total_dim = 0;
    for (const auto& p : parts) {
        if (p.dim() != rank) throw ShapeError("concat: rank mismatch");
        for (int64_t d = 0; d < rank; ++d)
            if (d != dim && p.shape()[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)])
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(out_shape));
        total_dim += p.size(dim);
    }
    out_shape[static_cast<size_t>(dim)] = total_dim;

    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < dim; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int64_t d = dim + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];

    std::vector<float> value(static_cast<size_t>(shape_numel(out_shape)));
    const int64_t out_row = total_dim * inner;
    int64_t part_off = 0;
    for (const auto& p : parts) {
        const int64_t block = p.size(dim) * inner;
        const float* pp = p.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(value.data() + o * out_row + part_off, pp + o * block,
                        static_cast<size_t>(block) * sizeof(float));
        part_off += block;
    }

    std::vector<NodePtr> nodes;
    std::vector<int64_t> blocks;
    for (const auto& p : parts) {
        nodes.push_back(p.node_);
        blocks.push_back(p.size(dim) * inner);
    }
    bool any_req = false;
    for (const auto& p : parts) any_req = any_req || p.requires_grad();
    Tensor out = make_node(std::move(out_shape), std::move(value), grad_enabled() && any_req);
    if (out.requires_grad()) {
        for (const auto& p : parts)
            if (p.requires_grad()) out.node_->parents.push_back(p.node_);
        out.node_->backward_fn = [nodes, blocks, outer, out_row](Node& o) {
            const float* g = o.grad.data();
            int64_t part_off = 0;
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                const int64_t block = blocks[pi];
                if (nodes[pi]->requires_grad) {
                    auto& gp = nodes[pi]->ensure_grad();
                    for (int64_t ou = 0; ou < outer; ++ou) {
                        const float* src = g + ou * out_row + part_off;
                        float* dst = gp.data() + ou * block;
                        for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                }
                part_off += block;
            }
        };
    }
    return out;
}

Tensor slice(const Tensor& a, int64_t dim, int64_t start, int64_t len) {
    const int64_t rank = a.dim();
    if (dim < 0) dim += rank;
    if (dim < 0 || dim >= rank || start < 0 || len < 0 || start + len > a.size(dim))
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") on axis " + std::to_string(dim) + " of " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(dim)] = len;

    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < dim; ++d) outer *= a.shape()[static_cast<size_t>(d)];
    for (int64_t d = dim + 1; d < rank; ++d) inner *= a.shape()[static_cast<size_t>(d)];
    const int64_t in_row = a.size(dim) * inner;
    const int64_t out_row = len * inner;

    std::vector<float> value(static_cast<size_t>(outer * out_row));
    const float* pa = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(value.data() + o * out_row, pa + o * in_row + start * inner,
                    static_cast<size_t>(out_row) * sizeof(float));

    NodePtr na = a.node_;
    return make_op(std::move(out_shape), std::move(value), {a},
                   [na, outer, in_row, out_row, start, inner](Node& out) {
                       if (!na->requires_grad) return;
                       auto& ga = na->ensure_grad();
                       const float* g = out.grad.data();
                       for (int64_t o = 0; o < outer; ++o) {
                           float* dst = ga.data() + o * in_row + start * inner;
                           const float* src = g + o * out_row;
                           for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
                       }
                   });
}

Tensor index_select(const Tensor& a, int64_t dim, const std::vector<int64_t>& indices) {
    const int64_t rank = a.dim();
    if (dim < 0) dim += rank;
    if (dim < 0 || dim >= rank) throw ShapeError("index_select: bad axis for " + shape_str(a.shape()));
    for (int64_t ix : indices)
        if (ix < 0 || ix >= a.size(dim))
            throw ShapeError("index_select: index " + std::to_string(ix) + " out of range on axis " +
                             std::to_string(dim) + " of " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(dim)] = static_cast<int64_t>(indices.size());

    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < dim; ++d) outer *= a.shape()[static_cast<size_t>(d)];
    for (int64_t d = dim + 1; d < rank; ++d) inner *= a.shape()[static_cast<size_t>(d)];
    const int64_t in_row = a.size(dim) * inner;
    const int64_t out_row = static_cast<int64_t>(indices.size()) * inner;

    std::vector<float> value(static_cast<size_t>(outer * out_row));
    const float* pa = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (size_t r = 0; r < indices.size(); ++r)
            std::memcpy(value.data() + o * out_row + static_cast<int64_t>(r) * inner,
                        pa + o * in_row + indices[r] * inner, static_cast<size_t>(inner) * sizeof(float));

    NodePtr na = a.node_;
    std::vector<int64_t> idx = indices;
    return make_op(std::move(out_shape), std::move(value), {a},
                   [na, outer, in_row, out_row, inner, idx](Node& out) {
                       if (!na->requires_grad) return;
                       auto& ga = na->ensure_grad();
                       const float* g = out.grad.data();
                       for (int64_t o = 0; o < outer; ++o)
                           for (size_t r = 0; r < idx.size(); ++r) {
                               float* dst = ga.data() + o * in_row + idx[r] * inner;
                               const float* src = g + o * out_row + static_cast<int64_t>(r) * inner;
                               for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                           }
                   });
}

// ---------------------------------------------------------------------------
// normalization and reductions
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& a, int64_t dim) {
    const int64_t rank = a.dim();
    if (dim < 0) dim += rank;
    if (dim < 0 || dim >= rank) throw ShapeError("softmax: bad axis for " + shape_str(a.shape()));

    int64_t outer = 1, inner = 1;
    const int64_t axis = a.size(dim);
    for (int64_t d = 0; d < dim; ++d) outer *= a.shape()[static_cast<size_t>(d)];
    for (int64_t d = dim + 1; d < rank; ++d) inner *= a.shape()[static_cast<size_t>(d)];

    std::vector<float> value(a.data().size());
    const float* pa = a.data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * axis * inner + in;
            float mx = pa[base];
            for (int64_t t = 1; t < axis; ++t) mx = std::max(mx, pa[base + t * inner]);
            float denom = 0.0f;
            for (int64_t t = 0; t < axis; ++t) {
                const float e = std::exp(pa[base + t * inner] - mx);
                value[static_cast<size_t>(base + t * inner)] = e;
                denom += e;
            }
            const float inv = 1.0f / denom;
            for (int64_t t = 0; t < axis; ++t) value[static_cast<size_t>(base + t * inner)] *= inv;
        }

    NodePtr na = a.node_;
    return make_op(a.shape(), std::move(value), {a}, [na, outer, axis, inner](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float* g = out.grad.data();
        const float* y = out.value.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * axis * inner + in;
                float dot = 0.0f;
                for (int64_t t = 0; t < axis; ++t) {
                    const int64_t p = base + t * inner;
                    dot += g[p] * y[p];
                }
                for (int64_t t = 0; t < axis; ++t) {
                    const int64_t p = base + t * inner;
                    ga[p] += y[p] * (g[p] - dot);
                }
            }
    });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta) {
    const int64_t cols = a.size(-1);
    const int64_t rows = a.numel() / cols;
    const bool affine = gamma.defined();
    if (affine && (gamma.numel() != cols || !beta.defined() || beta.numel() != cols))
        throw ShapeError("layer_norm: affine parameters must match the last axis (" +
                         std::to_string(cols) + ")");

    std::vector<float> xhat(a.data().size());
    std::vector<float> rstd(static_cast<size_t>(rows));
    std::vector<float> value(a.data().size());
    const float* pa = a.data().data();
    const float* pg = affine ? gamma.data().data() : nullptr;
    const float* pb = affine ? beta.data().data() : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
        const float* x = pa + r * cols;
        double mean = 0.0;
        for (int64_t c = 0; c < cols; ++c) mean += x[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            const double d = x[c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const float rs = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(kLayerNormEps)));
        rstd[static_cast<size_t>(r)] = rs;
        const float mu = static_cast<float>(mean);
        for (int64_t c = 0; c < cols; ++c) {
            const float h = (x[c] - mu) * rs;
            xhat[static_cast<size_t>(r * cols + c)] = h;
            value[static_cast<size_t>(r * cols + c)] = affine ? h * pg[c] + pb[c] : h;
        }
    }

    NodePtr na = a.node_;
    NodePtr ng = affine ? gamma.node_ : nullptr;
    NodePtr nb = affine ? beta.node_ : nullptr;
    auto bw = [na, ng, nb, xhat = std::move(xhat), rstd = std::move(rstd), rows, cols,
               affine](Node& out) {
        const float* g = out.grad.data();
        const float* pgam = affine ? ng->value.data() : nullptr;
        if (affine && ng->requires_grad) {
            auto& gg = ng->ensure_grad();
            auto& gb = nb->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < cols; ++c) {
                    const int64_t p = r * cols + c;
                    gg[static_cast<size_t>(c)] += g[p] * xhat[static_cast<size_t>(p)];
                    gb[static_cast<size_t>(c)] += g[p];
                }
        }
        if (na->requires_grad) {
            auto& ga = na->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (int64_t c = 0; c < cols; ++c) {
                    const int64_t p = r * cols + c;
                    const float gg = affine ? g[p] * pgam[c] : g[p];
                    m1 += gg;
                    m2 += static_cast<double>(gg) * xhat[static_cast<size_t>(p)];
                }
                m1 /= static_cast<double>(cols);
                m2 /= static_cast<double>(cols);
                const float rs = rstd[static_cast<size_t>(r)];
                for (int64_t c = 0; c < cols; ++c) {
                    const int64_t p = r * cols + c;
                    const float gg = affine ? g[p] * pgam[c] : g[p];
                    ga[p] += rs * (gg - static_cast<float>(m1) -
                                   xhat[static_cast<size_t>(p)] * static_cast<float>(m2));
                }
            }
        }
    };
    if (affine) return make_op(a.shape(), std::move(value), {a, gamma, beta}, std::move(bw));
    return make_op(a.shape(), std::move(value), {a}, std::move(bw));
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (float v : a.data()) s += v;
    NodePtr na = a.node_;
    return make_op({1}, {static_cast<float>(s)}, {a}, [na](Node& out) {
        if (!na->requires_grad) return;
        auto& ga = na->ensure_grad();
        const float g = out.grad[0];
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (float v : a.data()) s += v;
    const float inv = 1.0f / static_cast<float>(a.numel());
    NodePtr na = a.node_;
    return make_op({1}, {static_cast<float>(s / static_cast<double>(a.numel()))}, {a},
                   [na, inv](Node& out) {
                       if (!na->requires_grad) return;
                       auto& ga = na->ensure_grad();
                       const float g = out.grad[0] * inv;
                       for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                   });
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, float beta) {
    if (pred.shape() != target.shape())
        throw ShapeError("smooth_l1: shapes differ, " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    if (beta <= 0.0f) throw ContractError("smooth_l1: beta must be positive");
    const float* p = pred.data().data();
    const float* t = target.data().data();
    const int64_t n = pred.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float d = std::fabs(p[i] - t[i]);
        s += d <= beta ? 0.5 * d * d / beta : d - 0.5 * beta;
    }
    NodePtr np = pred.node_, nt = target.node_;
    return make_op({1}, {static_cast<float>(s / static_cast<double>(n))}, {pred, target},
                   [np, nt, beta, n](Node& out) {
                       const float coeff = out.grad[0] / static_cast<float>(n);
                       const float* p = np->value.data();
                       const float* t = nt->value.data();
                       for (int64_t i = 0; i < n; ++i) {
                           const float d = p[i] - t[i];
                           const float gd =
                               std::fabs(d) <= beta ? d / beta : (d > 0.0f ? 1.0f : -1.0f);
                           if (np->requires_grad) np->ensure_grad()[static_cast<size_t>(i)] += coeff * gd;
                           if (nt->requires_grad) nt->ensure_grad()[static_cast<size_t>(i)] -= coeff * gd;
                       }
                   });
}

}  // namespace vitkd
