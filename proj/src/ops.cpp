#include "mzu/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace mzu::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Tape<T>* tape_of(std::initializer_list<Var<T>> vars) {
    Tape<T>* t = nullptr;
    for (const auto& v : vars) {
        if (!v.valid()) throw std::invalid_argument("op received an unbound variable");
        if (t && v.tape != t) throw std::invalid_argument("op inputs live on different tapes");
        t = v.tape;
    }
    return t;
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
    if (a.rank() != rank) throw ShapeError(op, {a.shape()}, "expected rank " + std::to_string(rank));
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError(op, {a.shape(), b.shape()}, "operand shapes differ");
}

template <typename T, typename F, typename D>
Var<T> unary(Var<T> a, F f, D dfdy_dx) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& x = a.value();
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return tape->push(std::move(y), {a.id}, [dfdy_dx](BackwardArgs<T>& b) {
        Tensor<T>& gx = *b.in_grad[0];
        const Tensor<T>& x = *b.in[0];
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += b.grad[i] * dfdy_dx(x[i], b.out[i]);
    });
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>* tape = tape_of({a, b});
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    require_rank("matmul", av, 2);
    require_rank("matmul", bv, 2);
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k) throw ShapeError("matmul", {av.shape(), bv.shape()}, "inner dimensions differ");
    Tensor<T> out({m, n});
    Map<T>(out.data(), m, n).noalias() = CMap<T>(av.data(), m, k) * CMap<T>(bv.data(), k, n);
    return tape->push(std::move(out), {a.id, b.id}, [m, k, n](BackwardArgs<T>& x) {
        CMap<T> g(x.grad.data(), m, n);
        if (x.in_grad[0]) Map<T>(x.in_grad[0]->data(), m, k).noalias() += g * CMap<T>(x.in[1]->data(), k, n).transpose();
        if (x.in_grad[1]) Map<T>(x.in_grad[1]->data(), k, n).noalias() += CMap<T>(x.in[0]->data(), m, k).transpose() * g;
    });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
    Tape<T>* tape = tape_of({a, b});
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    require_rank("bmm", av, 3);
    require_rank("bmm", bv, 3);
    const std::size_t groups = av.dim(0);
    if (bv.dim(0) != groups) throw ShapeError("bmm", {av.shape(), bv.shape()}, "group counts differ");
    const std::size_t ar = av.dim(1), ac = av.dim(2), br = bv.dim(1), bc = bv.dim(2);
    const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
    const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
    if (k != kb) throw ShapeError("bmm", {av.shape(), bv.shape()}, "inner dimensions differ");
    Tensor<T> out({groups, m, n});
    for (std::size_t g = 0; g < groups; ++g) {
        CMap<T> A(av.data() + g * ar * ac, ar, ac);
        CMap<T> B(bv.data() + g * br * bc, br, bc);
        Map<T> C(out.data() + g * m * n, m, n);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    return tape->push(std::move(out), {a.id, b.id}, [=](BackwardArgs<T>& x) {
        for (std::size_t g = 0; g < groups; ++g) {
            CMap<T> G(x.grad.data() + g * m * n, m, n);
            CMap<T> A(x.in[0]->data() + g * ar * ac, ar, ac);
            CMap<T> B(x.in[1]->data() + g * br * bc, br, bc);
            if (x.in_grad[0]) {
                Map<T> GA(x.in_grad[0]->data() + g * ar * ac, ar, ac);
                // d op(A) = G op(B)^T
                if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
                else if (!trans_a && trans_b) GA.noalias() += G * B;
                else if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
                else GA.noalias() += B.transpose() * G.transpose();
            }
            if (x.in_grad[1]) {
                Map<T> GB(x.in_grad[1]->data() + g * br * bc, br, bc);
                // d op(B) = op(A)^T G
                if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
                else if (trans_a && !trans_b) GB.noalias() += A * G;
                else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        }
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>* tape = tape_of({a, b});
    require_same("add", a.value(), b.value());
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return tape->push(std::move(out), {a.id, b.id}, [](BackwardArgs<T>& x) {
        for (int k = 0; k < 2; ++k) {
            if (!x.in_grad[k]) continue;
            for (std::size_t i = 0; i < x.grad.size(); ++i) (*x.in_grad[k])[i] += x.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>* tape = tape_of({a, b});
    require_same("sub", a.value(), b.value());
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return tape->push(std::move(out), {a.id, b.id}, [](BackwardArgs<T>& x) {
        if (x.in_grad[0])
            for (std::size_t i = 0; i < x.grad.size(); ++i) (*x.in_grad[0])[i] += x.grad[i];
        if (x.in_grad[1])
            for (std::size_t i = 0; i < x.grad.size(); ++i) (*x.in_grad[1])[i] -= x.grad[i];
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Tape<T>* tape = tape_of({a, b});
    require_same("mul", a.value(), b.value());
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return tape->push(std::move(out), {a.id, b.id}, [](BackwardArgs<T>& x) {
        if (x.in_grad[0])
            for (std::size_t i = 0; i < x.grad.size(); ++i) (*x.in_grad[0])[i] += x.grad[i] * (*x.in[1])[i];
        if (x.in_grad[1])
            for (std::size_t i = 0; i < x.grad.size(); ++i) (*x.in_grad[1])[i] += x.grad[i] * (*x.in[0])[i];
    });
}

template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
    Tape<T>* tape = tape_of({a, bias});
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = bias.value();
    const std::size_t rows = av.rows(), cols = av.cols();
    if (bv.size() != cols) throw ShapeError("add_bias", {av.shape(), bv.shape()}, "bias width differs from columns");
    Tensor<T> out = av;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
    return tape->push(std::move(out), {a.id, bias.id}, [rows, cols](BackwardArgs<T>& x) {
        if (x.in_grad[0])
            for (std::size_t i = 0; i < x.grad.size(); ++i) (*x.in_grad[0])[i] += x.grad[i];
        if (x.in_grad[1])
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) (*x.in_grad[1])[c] += x.grad[r * cols + c];
    });
}

template <typename T>
Var<T> scale(Var<T> a, double s) {
    const T f = static_cast<T>(s);
    return unary(a, [f](T v) { return v * f; }, [f](T, T) { return f; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, double s) {
    const T f = static_cast<T>(s);
    return unary(a, [f](T v) { return v + f; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return unary(
        a,
        [](T v) {
            // Split by sign so exp never overflows.
            if (v >= 0) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
    return unary(a, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> relu(Var<T> a) {
    return unary(a, [](T v) { return v > 0 ? v : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
    Tape<T>* tape = parts[0].tape;
    const std::size_t rows = parts[0].value().rows();
    std::vector<std::size_t> widths, ids;
    std::vector<Shape> shapes;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.tape != tape) throw std::invalid_argument("concat_cols: operands live on different tapes");
        const auto& v = p.value();
        shapes.push_back(v.shape());
        if (v.rank() != 2 || v.rows() != rows) throw ShapeError("concat_cols", shapes, "row counts differ");
        widths.push_back(v.cols());
        ids.push_back(p.id);
        total += v.cols();
    }
    Tensor<T> out({rows, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& v = parts[k].value();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + off);
        off += widths[k];
    }
    return tape->push(std::move(out), std::move(ids), [rows, total, widths](BackwardArgs<T>& x) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (x.in_grad[k]) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < widths[k]; ++c)
                        (*x.in_grad[k])[r * widths[k] + c] += x.grad[r * total + off + c];
            }
            off += widths[k];
        }
    });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
    Tape<T>* tape = parts[0].tape;
    const std::size_t cols = parts[0].value().cols();
    std::vector<std::size_t> sizes, ids;
    std::vector<Shape> shapes;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.tape != tape) throw std::invalid_argument("concat_rows: operands live on different tapes");
        const auto& v = p.value();
        shapes.push_back(v.shape());
        if (v.cols() != cols) throw ShapeError("concat_rows", shapes, "column counts differ");
        sizes.push_back(v.size());
        ids.push_back(p.id);
        rows += v.rows();
    }
    std::vector<T> data;
    data.reserve(rows * cols);
    for (const auto& p : parts) data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
    return tape->push(Tensor<T>({rows, cols}, std::move(data)), std::move(ids), [sizes](BackwardArgs<T>& x) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            if (x.in_grad[k])
                for (std::size_t i = 0; i < sizes[k]; ++i) (*x.in_grad[k])[i] += x.grad[off + i];
            off += sizes[k];
        }
    });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    require_rank("slice_cols", v, 2);
    if (begin >= end || end > v.cols())
        throw ShapeError("slice_cols", {v.shape()}, "bad column range [" + std::to_string(begin) + "," + std::to_string(end) + ")");
    const std::size_t rows = v.rows(), cols = v.cols(), w = end - begin;
    Tensor<T> out({rows, w});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.data() + r * cols + begin, w, out.data() + r * w);
    return tape->push(std::move(out), {a.id}, [rows, cols, w, begin](BackwardArgs<T>& x) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) (*x.in_grad[0])[r * cols + begin + c] += x.grad[r * w + c];
    });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    require_rank("slice_rows", v, 2);
    if (begin >= end || end > v.rows())
        throw ShapeError("slice_rows", {v.shape()}, "bad row range [" + std::to_string(begin) + "," + std::to_string(end) + ")");
    const std::size_t cols = v.cols();
    std::vector<T> data(v.data() + begin * cols, v.data() + end * cols);
    return tape->push(Tensor<T>({end - begin, cols}, std::move(data)), {a.id}, [begin, cols](BackwardArgs<T>& x) {
        T* dst = x.in_grad[0]->data() + begin * cols;
        for (std::size_t i = 0; i < x.grad.size(); ++i) dst[i] += x.grad[i];
    });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tape<T>* tape = tape_of({a});
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return tape->push(std::move(out), {a.id}, [](BackwardArgs<T>& x) {
        for (std::size_t i = 0; i < x.grad.size(); ++i) (*x.in_grad[0])[i] += x.grad[i];
    });
}

template <typename T>
Var<T> swap_axes(Var<T> a, std::size_t axis) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    if (axis + 1 >= v.rank()) throw ShapeError("swap_axes", {v.shape()}, "axis out of range");
    const Shape& s = v.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 2; i < s.size(); ++i) inner *= s[i];
    const std::size_t p = s[axis], q = s[axis + 1];
    Shape os = s;
    std::swap(os[axis], os[axis + 1]);
    // [outer, p, q, inner] -> [outer, q, p, inner]
    auto src_index = [=](std::size_t o, std::size_t i, std::size_t j, std::size_t k) { return ((o * p + i) * q + j) * inner + k; };
    auto dst_index = [=](std::size_t o, std::size_t i, std::size_t j, std::size_t k) { return ((o * q + j) * p + i) * inner + k; };
    Tensor<T> out(os);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j)
                for (std::size_t k = 0; k < inner; ++k) out[dst_index(o, i, j, k)] = v[src_index(o, i, j, k)];
    return tape->push(std::move(out), {a.id}, [=](BackwardArgs<T>& x) {
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j)
                    for (std::size_t k = 0; k < inner; ++k) (*x.in_grad[0])[src_index(o, i, j, k)] += x.grad[dst_index(o, i, j, k)];
    });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    if (v.empty() || v.cols() == 0) throw DomainError("softmax_rows: empty row");
    const std::size_t rows = v.rows(), cols = v.cols();
    Tensor<T> out(v.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = v.data() + r * cols;
        T* y = out.data() + r * cols;
        const T mx = *std::max_element(x, x + cols);
        T z = 0;
        for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
    }
    return tape->push(std::move(out), {a.id}, [rows, cols](BackwardArgs<T>& x) {
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = x.out.data() + r * cols;
            const T* g = x.grad.data() + r * cols;
            T dot = 0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
            T* gx = x.in_grad[0]->data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) gx[c] += y[c] * (g[c] - dot);
        }
    });
}

template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gain, Var<T> bias, double eps) {
    Tape<T>* tape = tape_of({x, gain, bias});
    const Tensor<T>& xv = x.value();
    const std::size_t rows = xv.rows(), n = xv.cols();
    if (gain.value().size() != n || bias.value().size() != n)
        throw ShapeError("layer_norm", {xv.shape(), gain.value().shape(), bias.value().shape()}, "gain/bias width differs");
    if (!(eps > 0)) throw DomainError("layer_norm: eps must be positive");
    Tensor<T> out(xv.shape());
    Tensor<T> xhat(xv.shape());
    std::vector<T> inv_std(rows);
    const T* gv = gain.value().data();
    const T* bv = bias.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * n;
        T mu = 0;
        for (std::size_t c = 0; c < n; ++c) mu += xr[c];
        mu /= static_cast<T>(n);
        T var = 0;
        for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<T>(n);
        inv_std[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
        for (std::size_t c = 0; c < n; ++c) {
            const T h = (xr[c] - mu) * inv_std[r];
            xhat[r * n + c] = h;
            out[r * n + c] = h * gv[c] + bv[c];
        }
    }
    return tape->push(std::move(out), {x.id, gain.id, bias.id},
                      [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](BackwardArgs<T>& a) {
                          const T* gv = a.in[1]->data();
                          std::vector<T> gxh(n);
                          for (std::size_t r = 0; r < rows; ++r) {
                              const T* g = a.grad.data() + r * n;
                              const T* h = xhat.data() + r * n;
                              if (a.in_grad[1])
                                  for (std::size_t c = 0; c < n; ++c) (*a.in_grad[1])[c] += g[c] * h[c];
                              if (a.in_grad[2])
                                  for (std::size_t c = 0; c < n; ++c) (*a.in_grad[2])[c] += g[c];
                              if (!a.in_grad[0]) continue;
                              T m1 = 0, m2 = 0;
                              for (std::size_t c = 0; c < n; ++c) {
                                  gxh[c] = g[c] * gv[c];
                                  m1 += gxh[c];
                                  m2 += gxh[c] * h[c];
                              }
                              m1 /= static_cast<T>(n);
                              m2 /= static_cast<T>(n);
                              T* gx = a.in_grad[0]->data() + r * n;
                              for (std::size_t c = 0; c < n; ++c) gx[c] += inv_std[r] * (gxh[c] - m1 - h[c] * m2);
                          }
                      });
}

template <typename T>
Var<T> normalize_rows(Var<T> a) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    const std::size_t rows = v.rows(), n = v.cols();
    Tensor<T> out(v.shape());
    std::vector<T> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = v.data() + r * n;
        T s = 0;
        for (std::size_t c = 0; c < n; ++c) s += x[c] * x[c];
        norms[r] = std::sqrt(s);
        if (norms[r] <= static_cast<T>(kNormGuard)) continue;
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[c] / norms[r];
    }
    return tape->push(std::move(out), {a.id}, [rows, n, norms = std::move(norms)](BackwardArgs<T>& b) {
        for (std::size_t r = 0; r < rows; ++r) {
            if (norms[r] <= static_cast<T>(kNormGuard)) continue;
            const T* u = b.out.data() + r * n;
            const T* g = b.grad.data() + r * n;
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += u[c] * g[c];
            T* gx = b.in_grad[0]->data() + r * n;
            for (std::size_t c = 0; c < n; ++c) gx[c] += (g[c] - u[c] * dot) / norms[r];
        }
    });
}

template <typename T>
Var<T> l2_norm_rows(Var<T> a) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    const std::size_t rows = v.rows(), n = v.cols();
    Tensor<T> out({rows, 1});
    for (std::size_t r = 0; r < rows; ++r) {
        T s = 0;
        for (std::size_t c = 0; c < n; ++c) s += v[r * n + c] * v[r * n + c];
        out[r] = std::sqrt(s);
    }
    return tape->push(std::move(out), {a.id}, [rows, n](BackwardArgs<T>& b) {
        for (std::size_t r = 0; r < rows; ++r) {
            const T nr = b.out[r];
            if (nr <= static_cast<T>(kNormGuard)) continue;
            for (std::size_t c = 0; c < n; ++c) (*b.in_grad[0])[r * n + c] += b.grad[r] * (*b.in[0])[r * n + c] / nr;
        }
    });
}

template <typename T>
Var<T> cosine_rows(Var<T> a, Var<T> b) {
    tape_of({a, b});
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ShapeError("cosine", {av.shape(), bv.shape()}, "operand shapes differ");
    const std::size_t rows = av.rows(), n = av.cols();
    Var<T> ua = normalize_rows(reshape(a, {rows, n}));
    Var<T> ub = normalize_rows(reshape(b, {rows, n}));
    // Row-wise dot product as a batched [rows, 1, n] x [rows, n, 1] product.
    Var<T> d = bmm(reshape(ua, {rows, 1, n}), reshape(ub, {rows, n, 1}));
    return reshape(d, {rows, 1});
}

template <typename T>
Var<T> squash_rows(Var<T> a) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    const std::size_t rows = v.rows(), n = v.cols();
    Tensor<T> out(v.shape());
    std::vector<T> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* s = v.data() + r * n;
        T sq = 0;
        for (std::size_t c = 0; c < n; ++c) sq += s[c] * s[c];
        const T nr = std::sqrt(sq);
        norms[r] = nr;
        if (nr <= static_cast<T>(kNormGuard)) continue;
        const T f = nr / (T(1) + sq);
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = f * s[c];
    }
    return tape->push(std::move(out), {a.id}, [rows, n, norms = std::move(norms)](BackwardArgs<T>& b) {
        // y = f(|s|) s with f(t) = t / (1 + t^2); dy = f g + s (f'(t)/t)(s.g)
        for (std::size_t r = 0; r < rows; ++r) {
            const T t = norms[r];
            if (t <= static_cast<T>(kNormGuard)) continue;
            const T* s = b.in[0]->data() + r * n;
            const T* g = b.grad.data() + r * n;
            const T t2 = t * t;
            const T f = t / (T(1) + t2);
            const T fp_over_t = (T(1) - t2) / ((T(1) + t2) * (T(1) + t2) * t);
            T sg = 0;
            for (std::size_t c = 0; c < n; ++c) sg += s[c] * g[c];
            T* gx = b.in_grad[0]->data() + r * n;
            for (std::size_t c = 0; c < n; ++c) gx[c] += f * g[c] + s[c] * fp_over_t * sg;
        }
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    Tape<T>* tape = tape_of({a});
    T s = 0;
    for (T v : a.value().values()) s += v;
    return tape->push(Tensor<T>({1}, std::vector<T>{s}), {a.id}, [](BackwardArgs<T>& b) {
        const T g = b.grad[0];
        for (auto& v : b.in_grad[0]->values()) v += g;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

template <typename T>
Var<T> mean_over_rows(Var<T> a) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    const std::size_t rows = v.rows(), n = v.cols();
    Tensor<T> out({1, n});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c] += v[r * n + c];
    for (auto& x : out.values()) x /= static_cast<T>(rows);
    return tape->push(std::move(out), {a.id}, [rows, n](BackwardArgs<T>& b) {
        const T inv = T(1) / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) (*b.in_grad[0])[r * n + c] += b.grad[c] * inv;
    });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
    Tape<T>* tape = tape_of({table});
    const Tensor<T>& tv = table.value();
    require_rank("embedding", tv, 2);
    if (ids.empty()) throw ShapeError("embedding", {tv.shape()}, "empty id list");
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    Tensor<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
            throw DomainError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
        std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return tape->push(std::move(out), {table.id}, [d, idv = std::move(idv)](BackwardArgs<T>& b) {
        for (std::size_t i = 0; i < idv.size(); ++i) {
            T* dst = b.in_grad[0]->data() + static_cast<std::size_t>(idv[i]) * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += b.grad[i * d + c];
        }
    });
}

template <typename T>
Var<T> dropout(Var<T> a, Tensor<T> mask) {
    Tape<T>* tape = tape_of({a});
    require_same("dropout", a.value(), mask);
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return tape->push(std::move(out), {a.id}, [mask = std::move(mask)](BackwardArgs<T>& b) {
        for (std::size_t i = 0; i < b.grad.size(); ++i) (*b.in_grad[0])[i] += b.grad[i] * mask[i];
    });
}

template <typename T>
Var<T> cross_entropy_sum(Var<T> logits, std::span<const int> targets) {
    Tape<T>* tape = tape_of({logits});
    const Tensor<T>& v = logits.value();
    const std::size_t rows = v.rows(), n = v.cols();
    if (targets.size() != rows)
        throw ShapeError("cross_entropy", {v.shape(), Shape{targets.size()}}, "target count differs from logit rows");
    Tensor<T> probs(v.shape());
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t < 0 || static_cast<std::size_t>(t) >= n) throw DomainError("cross_entropy: target " + std::to_string(t) + " out of range");
        const T* x = v.data() + r * n;
        const T mx = *std::max_element(x, x + n);
        T z = 0;
        for (std::size_t c = 0; c < n; ++c) z += (probs[r * n + c] = std::exp(x[c] - mx));
        for (std::size_t c = 0; c < n; ++c) probs[r * n + c] /= z;
        total += std::log(z) + mx - x[t];
    }
    std::vector<int> tv(targets.begin(), targets.end());
    return tape->push(Tensor<T>({1}, std::vector<T>{total}), {logits.id},
                      [n, probs = std::move(probs), tv = std::move(tv)](BackwardArgs<T>& b) {
                          const T g = b.grad[0];
                          T* gx = b.in_grad[0]->data();
                          for (std::size_t i = 0; i < probs.size(); ++i) gx[i] += g * probs[i];
                          for (std::size_t r = 0; r < tv.size(); ++r) gx[r * n + static_cast<std::size_t>(tv[r])] -= g;
                      });
}

template <typename T>
Var<T> set_diagonal(Var<T> a, double value) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    require_rank("set_diagonal", v, 3);
    const std::size_t groups = v.dim(0), n = v.dim(1);
    if (v.dim(2) != n) throw ShapeError("set_diagonal", {v.shape()}, "matrices must be square");
    Tensor<T> out = v;
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < n; ++i) out[(g * n + i) * n + i] = static_cast<T>(value);
    return tape->push(std::move(out), {a.id}, [groups, n](BackwardArgs<T>& b) {
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (i != j) (*b.in_grad[0])[(g * n + i) * n + j] += b.grad[(g * n + i) * n + j];
    });
}

template <typename T>
Var<T> sym_normalize(Var<T> a, double min_degree) {
    Tape<T>* tape = tape_of({a});
    const Tensor<T>& v = a.value();
    require_rank("sym_normalize", v, 3);
    const std::size_t groups = v.dim(0), n = v.dim(1);
    if (v.dim(2) != n) throw ShapeError("sym_normalize", {v.shape()}, "matrices must be square");
    const T floor = static_cast<T>(min_degree);
    std::vector<T> deg(groups * n);
    std::vector<char> clamped(groups * n);
    Tensor<T> out(v.shape());
    for (std::size_t g = 0; g < groups; ++g) {
        const T* A = v.data() + g * n * n;
        for (std::size_t i = 0; i < n; ++i) {
            T d = 0;
            for (std::size_t j = 0; j < n; ++j) d += A[i * n + j];
            clamped[g * n + i] = d < floor;
            deg[g * n + i] = std::max(d, floor);
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out[(g * n + i) * n + j] = A[i * n + j] / std::sqrt(deg[g * n + i] * deg[g * n + j]);
    }
    return tape->push(std::move(out), {a.id},
                      [groups, n, deg = std::move(deg), clamped = std::move(clamped)](BackwardArgs<T>& b) {
                          std::vector<T> r(n), gr(n);
                          for (std::size_t g = 0; g < groups; ++g) {
                              const T* A = b.in[0]->data() + g * n * n;
                              const T* G = b.grad.data() + g * n * n;
                              T* GA = b.in_grad[0]->data() + g * n * n;
                              for (std::size_t i = 0; i < n; ++i) r[i] = T(1) / std::sqrt(deg[g * n + i]);
                              std::fill(gr.begin(), gr.end(), T(0));
                              for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t j = 0; j < n; ++j) {
                                      const T gij = G[i * n + j];
                                      GA[i * n + j] += gij * r[i] * r[j];
                                      gr[i] += gij * A[i * n + j] * r[j];
                                      gr[j] += gij * A[i * n + j] * r[i];
                                  }
                              for (std::size_t i = 0; i < n; ++i) {
                                  if (clamped[g * n + i]) continue;
                                  // r = d^-1/2, dr/dd = -r^3 / 2, d = sum_j A_ij
                                  const T gd = gr[i] * T(-0.5) * r[i] * r[i] * r[i];
                                  for (std::size_t j = 0; j < n; ++j) GA[i * n + j] += gd;
                              }
                          }
                      });
}

template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double rate, Rng& rng, bool training) {
    if (!(rate >= 0.0) || rate >= 1.0) throw DomainError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    Tensor<T> mask(shape, T(1));
    if (!training || rate == 0.0) return mask;
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask.values()) m = uniform01(rng) < rate ? T(0) : keep;
    return mask;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
    if (x.size() != gain.size() || x.size() != bias.size())
        throw ShapeError("layer_norm", {x.shape(), gain.shape(), bias.shape()}, "lengths differ");
    Tape<T> tape;
    tape.set_recording(false);
    const Shape row{1, x.size()};
    Var<T> y = layer_norm_rows(tape.constant(x.reshaped(row)), tape.constant(gain.reshaped(row)),
                               tape.constant(bias.reshaped(row)), eps);
    return y.value().reshaped(x.shape());
}

#define MZU_INSTANTIATE_OPS(T)                                                         \
    template Var<T> matmul(Var<T>, Var<T>);                                            \
    template Var<T> bmm(Var<T>, Var<T>, bool, bool);                                   \
    template Var<T> add(Var<T>, Var<T>);                                               \
    template Var<T> sub(Var<T>, Var<T>);                                               \
    template Var<T> mul(Var<T>, Var<T>);                                               \
    template Var<T> add_bias(Var<T>, Var<T>);                                          \
    template Var<T> scale(Var<T>, double);                                             \
    template Var<T> add_scalar(Var<T>, double);                                        \
    template Var<T> sigmoid(Var<T>);                                                   \
    template Var<T> tanh(Var<T>);                                                      \
    template Var<T> relu(Var<T>);                                                      \
    template Var<T> concat_cols(std::span<const Var<T>>);                              \
    template Var<T> concat_rows(std::span<const Var<T>>);                              \
    template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                      \
    template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                      \
    template Var<T> reshape(Var<T>, Shape);                                            \
    template Var<T> swap_axes(Var<T>, std::size_t);                                    \
    template Var<T> softmax_rows(Var<T>);                                              \
    template Var<T> layer_norm_rows(Var<T>, Var<T>, Var<T>, double);                   \
    template Var<T> normalize_rows(Var<T>);                                            \
    template Var<T> l2_norm_rows(Var<T>);                                              \
    template Var<T> cosine_rows(Var<T>, Var<T>);                                       \
    template Var<T> squash_rows(Var<T>);                                               \
    template Var<T> sum(Var<T>);                                                       \
    template Var<T> mean(Var<T>);                                                      \
    template Var<T> mean_over_rows(Var<T>);                                            \
    template Var<T> embedding(Var<T>, std::span<const int>);                           \
    template Var<T> dropout(Var<T>, Tensor<T>);                                        \
    template Var<T> cross_entropy_sum(Var<T>, std::span<const int>);                   \
    template Var<T> set_diagonal(Var<T>, double);                                      \
    template Var<T> sym_normalize(Var<T>, double);                                     \
    template Tensor<T> dropout_mask(const Shape&, double, Rng&, bool);                 \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);

MZU_INSTANTIATE_OPS(float)
MZU_INSTANTIATE_OPS(double)

}  // namespace mzu::ops
